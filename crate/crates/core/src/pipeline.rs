//! End-to-end training objective `L = L_NTP + λ·L_NIP`, autoregressive
//! interleaved inference with `BoI`-triggered image generation, and
//! checkpointing.

use std::collections::HashMap;
use std::io::{BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgdec::{self, DenoiserConfig, DenoiserVars, NoiseSchedule};
use crate::mmllm::{self, ImageData, ImageKey, LLMConfig, LLMVars, StreamInput};
use crate::numcore::{Binding, Graph, ParamStore, Prng, Real, Tensor, Var};
use crate::pyramid::{encode_pyramid, EncoderConfig, ImagePyramid, PyramidVars, RawImage};
use crate::resampler::{resample, ResamplerConfig, ResamplerVars};
use crate::sequence::{ntp_targets, Element, Slot, TrainContext, Vocab};

/// Parameter-name prefixes for the five sub-models.
pub const LLM_PREFIX: &str = "llm";
pub const ENC_PREFIX: &str = "enc";
pub const VRES_PREFIX: &str = "vres";
pub const CRES_PREFIX: &str = "cres";
pub const DEC_PREFIX: &str = "dec";

/// Full-model shape: LLM, pyramid encoder, two resamplers (visual tokens
/// and decoder condition), and the diffusion decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub llm: LLMConfig,
    pub encoder: EncoderConfig,
    pub visual_resampler: ResamplerConfig,
    pub cond_resampler: ResamplerConfig,
    pub decoder: DenoiserConfig,
    pub diffusion_steps: usize,
    pub beta1: f64,
    pub beta_t: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.llm.validate()?;
        self.decoder.validate()?;
        let c = self.llm.channels;
        for (what, got) in [
            ("encoder", self.encoder.channels),
            ("visual resampler", self.visual_resampler.channels),
            ("condition resampler", self.cond_resampler.channels),
            ("decoder", self.decoder.channels),
        ] {
            if got != c {
                return Err(Error::Config(format!(
                    "{what} channels {got} != llm channels {c}"
                )));
            }
        }
        if self.cond_resampler.n_out != self.decoder.cond_tokens {
            return Err(Error::Config(format!(
                "condition resampler emits {} tokens, decoder expects {}",
                self.cond_resampler.n_out, self.decoder.cond_tokens
            )));
        }
        if self.llm.mmfs.levels != self.encoder.levels
            || self.decoder.mmfs.levels != self.encoder.levels
        {
            return Err(Error::Config(format!(
                "pyramid levels {} must match llm mmfs {} and decoder mmfs {}",
                self.encoder.levels, self.llm.mmfs.levels, self.decoder.mmfs.levels
            )));
        }
        NoiseSchedule::linear(self.diffusion_steps, self.beta1, self.beta_t)?;
        Ok(())
    }

    /// Visual tokens per image fed into the LLM.
    pub fn n_visual(&self) -> usize {
        self.visual_resampler.n_out
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::linear(self.diffusion_steps, self.beta1, self.beta_t)
            .expect("validated schedule")
    }
}

/// Initialize every sub-model's parameters under the standard prefixes.
pub fn init_model_params<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut Prng) {
    mmllm::init_llm_params(store, LLM_PREFIX, &cfg.llm, &mut rng.split_str(LLM_PREFIX));
    crate::pyramid::init_encoder_params(
        store,
        ENC_PREFIX,
        &cfg.encoder,
        &mut rng.split_str(ENC_PREFIX),
    );
    crate::resampler::init_resampler_params(
        store,
        VRES_PREFIX,
        &cfg.visual_resampler,
        &mut rng.split_str(VRES_PREFIX),
    );
    crate::resampler::init_resampler_params(
        store,
        CRES_PREFIX,
        &cfg.cond_resampler,
        &mut rng.split_str(CRES_PREFIX),
    );
    imgdec::init_denoiser_params(store, DEC_PREFIX, &cfg.decoder, &mut rng.split_str(DEC_PREFIX));
}

/// Encode one raw image inside `g`: pyramid through the encoder, visual
/// tokens by resampling the finest level.
pub fn encode_image<F: Real>(
    g: &mut Graph<F>,
    img: &RawImage,
    store: &ParamStore<F>,
    binding: &Binding,
    cfg: &ModelConfig,
) -> Result<ImageData> {
    let pyramid = encode_pyramid(g, img, store, binding, ENC_PREFIX, &cfg.encoder)?;
    let finest = pyramid.levels[0];
    let sh = g.value(finest).shape.clone();
    let feats = g.reshape(finest, vec![sh[0] * sh[1], sh[2]])?;
    let vres = ResamplerVars::bind(store, binding, VRES_PREFIX, cfg.visual_resampler.depth);
    let visual_tokens = resample(g, feats, &vres, &cfg.visual_resampler)?;
    Ok(ImageData {
        visual_tokens,
        pyramid,
    })
}

// ---------------------------------------------------------------------------
// Training

/// Training hyper-parameters. `lambda` weights the image loss; `lr` applies
/// to every group except the diffusion decoder, which uses `lr_decoder`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub lr_decoder: f64,
    pub steps: usize,
    pub batch: usize,
    /// Per-image probability of replacing the condition with the learned
    /// null condition (classifier-free guidance training).
    pub dropout: f64,
    pub seed: u64,
    pub optimizer: OptKind,
    /// Ablation switch: `false` trains the decoder without access to
    /// previous-image pyramids (the no-MMFS arm).
    #[serde(default = "default_true")]
    pub decoder_mmfs: bool,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1]",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptKind {
    Sgd,
    Adam,
}

/// Adam-style optimizer state ((0.9, 0.995, 1e-6) defaults) with a plain
/// SGD mode. Moments are kept in 64-bit regardless of the parameter dtype.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptKind,
    step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptKind) -> Self {
        Optimizer {
            kind,
            step: 0,
            beta1: 0.9,
            beta2: 0.995,
            eps: 1e-6,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Apply one update using the gradients accumulated in `store`.
    /// Parameters under `dec.` use `cfg.lr_decoder`, everything else `cfg.lr`.
    pub fn update<F: Real>(&mut self, store: &mut ParamStore<F>, cfg: &TrainConfig) {
        self.step += 1;
        let names: Vec<String> = store.names().to_vec();
        for name in names {
            let lr = if name.starts_with(&format!("{DEC_PREFIX}.")) {
                cfg.lr_decoder
            } else {
                cfg.lr
            };
            let grad: Vec<f64> = store.grad_of(&name).data.iter().map(|g| g.to_f64()).collect();
            match self.kind {
                OptKind::Sgd => {
                    let t = store.get_mut(&name);
                    for (p, g) in t.data.iter_mut().zip(&grad) {
                        *p = F::from_f64(p.to_f64() - lr * g);
                    }
                }
                OptKind::Adam => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
                    for (mi, g) in m.iter_mut().zip(&grad) {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                    }
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
                    for (vi, g) in v.iter_mut().zip(&grad) {
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                    }
                    let bc1 = 1.0 - self.beta1.powi(self.step as i32);
                    let bc2 = 1.0 - self.beta2.powi(self.step as i32);
                    let m = &self.m[&name];
                    let v = &self.v[&name];
                    let t = store.get_mut(&name);
                    for i in 0..t.data.len() {
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        t.data[i] =
                            F::from_f64(t.data[i].to_f64() - lr * mh / (vh.sqrt() + self.eps));
                    }
                }
            }
        }
    }
}

/// One training example: a packed context plus pixel data for every image
/// key it references.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub context: TrainContext,
    pub images: HashMap<ImageKey, RawImage>,
}

/// Per-step losses (already λ-combined).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepStats {
    pub ntp: f64,
    pub nip: f64,
    pub total: f64,
}

/// Next-token targets for a whole packed context (per-sample targets
/// concatenated in stream order).
pub fn context_targets(ctx: &TrainContext, vocab: Vocab) -> (Vec<usize>, Vec<bool>) {
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for sample in &ctx.samples {
        let (t, m) = ntp_targets(sample, vocab);
        targets.extend(t);
        mask.extend(m);
    }
    (targets, mask)
}

/// Eligible NIP images of one context: every image except each sample's
/// first, returned as (sample index, image order within sample).
fn eligible_images(ctx: &TrainContext) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (si, sample) in ctx.samples.iter().enumerate() {
        for i in 1..sample.images.len() {
            out.push((si, i));
        }
    }
    out
}

/// One optimizer step over a batch of packed contexts.
///
/// The loss is `mean(ntp per context) + λ · mean(nip per eligible image)`;
/// a sample's first image never contributes to NIP, and each eligible
/// image's condition is dropped to the null condition with probability
/// `cfg.dropout`.
pub fn train_step<F: Real>(
    store: &mut ParamStore<F>,
    batch: &[BatchItem],
    mcfg: &ModelConfig,
    cfg: &TrainConfig,
    opt: &mut Optimizer,
    rng: &mut Prng,
) -> Result<StepStats> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyInput("train_step: empty batch".to_string()));
    }
    let sched = mcfg.schedule();
    let n_ctx = batch.len();
    let n_imgs: usize = batch.iter().map(|b| eligible_images(&b.context).len()).sum();
    let mut any_targets = false;
    for b in batch {
        let (_, mask) = context_targets(&b.context, mcfg.llm.vocab);
        any_targets |= mask.iter().any(|&m| m);
    }
    if !any_targets && n_imgs == 0 {
        return Err(Error::EmptyLoss);
    }

    store.zero_grads();
    let mut ntp_sum = 0.0;
    let mut nip_sum = 0.0;
    for item in batch {
        let mut g: Graph<F> = Graph::new();
        let binding = store.bind(&mut g);
        let llm_vars = LLMVars::bind(store, &binding, LLM_PREFIX, &mcfg.llm);

        let mut images: HashMap<ImageKey, ImageData> = HashMap::new();
        for (si, sample) in item.context.samples.iter().enumerate() {
            for &img in &sample.images {
                let raw = item
                    .images
                    .get(&(si, img))
                    .ok_or(Error::MissingImage(img))?;
                images.insert((si, img), encode_image(&mut g, raw, store, &binding, mcfg)?);
            }
        }

        let input = StreamInput::from_context(&item.context);
        let fwd = mmllm::forward(&mut g, &input, &images, &llm_vars, &mcfg.llm)?;
        let (targets, mask) = context_targets(&item.context, mcfg.llm.vocab);

        let mut pieces: Vec<Var> = Vec::new();
        if mask.iter().any(|&m| m) {
            let ntp = mmllm::ntp_loss(&mut g, fwd.logits, &targets, &mask)?;
            ntp_sum += g.value(ntp).data[0].to_f64();
            pieces.push(g.scale(ntp, 1.0 / n_ctx as f64));
        }

        // per-sample stream offsets inside the packed context
        let mut starts = Vec::with_capacity(item.context.samples.len());
        let mut off = 0;
        for sample in &item.context.samples {
            starts.push(off);
            off += sample.len();
        }
        let dvars = DenoiserVars::new(store, &binding, DEC_PREFIX);
        let cres = ResamplerVars::bind(store, &binding, CRES_PREFIX, mcfg.cond_resampler.depth);
        for (si, i) in eligible_images(&item.context) {
            let sample = &item.context.samples[si];
            let img_id = sample.images[i];
            // global position of this image's BoI
            let local_boi = sample
                .stream
                .iter()
                .enumerate()
                .filter(|(_, s)| matches!(s, Slot::Boi))
                .nth(i)
                .map(|(p, _)| p)
                .expect("image has a BoI");
            let boi = starts[si] + local_boi;
            let cond = if rng.uniform() < cfg.dropout {
                binding.var(store, &format!("{DEC_PREFIX}.null_cond"))
            } else {
                let feats = g.slice_rows(fwd.hidden, starts[si], boi - starts[si] + 1)?;
                resample(&mut g, feats, &cres, &mcfg.cond_resampler)?
            };
            // previously realized images of the same sample, most recent first
            let pyramids: Vec<&PyramidVars> = if cfg.decoder_mmfs {
                sample.images[..i]
                    .iter()
                    .rev()
                    .take(mcfg.decoder.mmfs.max_images)
                    .map(|&id| &images[&(si, id)].pyramid)
                    .collect()
            } else {
                Vec::new()
            };
            let x0: Tensor<F> = item.images[&(si, img_id)].pixels.cast();
            let (nip, _, _) = imgdec::nip_loss(
                &mut g, &x0, cond, &pyramids, &dvars, &mcfg.decoder, &sched, rng,
            )?;
            nip_sum += g.value(nip).data[0].to_f64();
            pieces.push(g.scale(nip, cfg.lambda / n_imgs as f64));
        }

        if pieces.is_empty() {
            continue;
        }
        let mut total = pieces[0];
        for &p in &pieces[1..] {
            total = g.add(total, p)?;
        }
        g.backward(total)?;
        store.accumulate_grads(&g, &binding);
    }

    opt.update(store, cfg);
    let ntp = ntp_sum / n_ctx as f64;
    let nip = if n_imgs == 0 { 0.0 } else { nip_sum / n_imgs as f64 };
    Ok(StepStats {
        ntp,
        nip,
        total: ntp + cfg.lambda * nip,
    })
}

/// JSON-lines training log: `{step, ntp, nip, total, wall_ms}` per line.
pub struct TrainLog {
    w: BufWriter<std::fs::File>,
}

impl TrainLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(TrainLog {
            w: BufWriter::new(std::fs::File::create(path)?),
        })
    }

    pub fn log(&mut self, step: usize, stats: &StepStats, wall_ms: f64) -> Result<()> {
        let line = serde_json::json!({
            "step": step,
            "ntp": stats.ntp,
            "nip": stats.nip,
            "total": stats.total,
            "wall_ms": wall_ms,
        });
        writeln!(self.w, "{line}")?;
        self.w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Incremental decoding

/// KV-cached incremental decoder state. Feeding slots one at a time
/// reproduces [`mmllm::forward`] position by position.
pub struct DecodeState<F: Real> {
    /// Per layer: cached key/value rows, `[t, C]` flattened.
    k: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    /// Final-normalized hidden rows, `[t, C]` flattened.
    hidden: Vec<F>,
    /// Images visible so far (stream order).
    seen: Vec<usize>,
    len: usize,
}

impl<F: Real> DecodeState<F> {
    pub fn new(cfg: &LLMConfig) -> Self {
        DecodeState {
            k: vec![Vec::new(); cfg.layers],
            v: vec![Vec::new(); cfg.layers],
            hidden: Vec::new(),
            seen: Vec::new(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Final-normalized hidden states so far, `[t, C]`.
    pub fn hidden(&self, channels: usize) -> Tensor<F> {
        Tensor::new(vec![self.len, channels], self.hidden.clone()).expect("consistent state")
    }
}

/// Feed one slot; returns the next-token logits row `[V]`.
///
/// `visual_row` supplies the image slot's visual-token row; `pyramids[id]`
/// must hold the pyramid of every realized image id referenced so far.
pub fn decode_step<F: Real>(
    state: &mut DecodeState<F>,
    slot: Slot,
    visual_row: Option<&[F]>,
    pyramids: &[ImagePyramid<F>],
    store: &ParamStore<F>,
    cfg: &LLMConfig,
) -> Result<Vec<F>> {
    let t = state.len;
    if t + 1 > cfg.max_context {
        return Err(Error::ContextOverflow {
            len: t + 1,
            max: cfg.max_context,
        });
    }
    let c = cfg.channels;
    if let Slot::ImgSlot { image, index: 0 } = slot {
        state.seen.push(image);
    }

    let mut g: Graph<F> = Graph::new();
    let binding = store.bind(&mut g);
    let vars = LLMVars::bind(store, &binding, LLM_PREFIX, cfg);

    let row = match slot {
        Slot::TextTok(tok) => {
            if tok >= cfg.vocab.text {
                return Err(Error::Dimension(format!(
                    "token id {tok} out of vocab {}",
                    cfg.vocab.text
                )));
            }
            g.gather_rows(vars.emb, &[tok])?
        }
        Slot::Bos => g.gather_rows(vars.emb, &[cfg.vocab.bos()])?,
        Slot::Eos => g.gather_rows(vars.emb, &[cfg.vocab.eos()])?,
        Slot::Boi => g.gather_rows(vars.emb, &[cfg.vocab.boi()])?,
        Slot::ImgSlot { .. } => {
            let vr = visual_row.ok_or_else(|| {
                Error::EmptyInput("decode_step: image slot without visual row".to_string())
            })?;
            let tns = Tensor::new(vec![1, c], vr.to_vec())?;
            g.constant(tns)
        }
    };
    let pos = g.gather_rows(vars.pos, &[t])?;
    let mut x = g.add(row, pos)?;

    let dh = c / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for (l, blk) in vars.blocks.iter().enumerate() {
        let h = g.layer_norm(x, blk.ln1_g, blk.ln1_b, 1e-5)?;
        let q = g.linear(h, blk.w_q, blk.b_q)?;
        let k_row = g.linear(h, blk.w_k, blk.b_k)?;
        let v_row = g.linear(h, blk.w_v, blk.b_v)?;
        state.k[l].extend_from_slice(&g.value(k_row).data);
        state.v[l].extend_from_slice(&g.value(v_row).data);
        let k_full = g.constant(Tensor::new(vec![t + 1, c], state.k[l].clone())?);
        let v_full = g.constant(Tensor::new(vec![t + 1, c], state.v[l].clone())?);
        let mut head_outs = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k_full, hd * dh, dh)?;
            let vh = g.slice_cols(v_full, hd * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores)?;
            head_outs.push(g.matmul(attn, vh)?);
        }
        let ctx = g.concat_cols(&head_outs)?;
        let o = g.linear(ctx, blk.w_o, blk.b_o)?;
        x = g.add(x, o)?;

        if let Some(mmfs_vars) = &blk.mmfs {
            if !state.seen.is_empty() {
                let recent: Vec<usize> = state
                    .seen
                    .iter()
                    .rev()
                    .take(cfg.mmfs.max_images)
                    .copied()
                    .collect();
                let pvars: Vec<PyramidVars> = recent
                    .iter()
                    .map(|&id| {
                        pyramids
                            .get(id)
                            .map(|p| PyramidVars::from_values(&mut g, p))
                            .ok_or(Error::MissingImage(id))
                    })
                    .collect::<Result<_>>()?;
                let prefs: Vec<&PyramidVars> = pvars.iter().collect();
                let ranks: Vec<usize> = (0..recent.len()).collect();
                let out = crate::mmfs::apply_gated(
                    &mut g,
                    x,
                    crate::mmfs::RefPoint::CENTER,
                    &ranks,
                    &prefs,
                    mmfs_vars,
                    &cfg.mmfs,
                )?;
                x = g.reshape(out, vec![1, c])?;
            }
        }

        let h = g.layer_norm(x, blk.ln2_g, blk.ln2_b, 1e-5)?;
        let h = g.linear(h, blk.ffn_w1, blk.ffn_b1)?;
        let h = g.gelu(h);
        let h = g.linear(h, blk.ffn_w2, blk.ffn_b2)?;
        x = g.add(x, h)?;
    }
    let hidden = g.layer_norm(x, vars.lnf_g, vars.lnf_b, 1e-5)?;
    let logits = g.matmul_nt(hidden, vars.w_out)?;
    state.hidden.extend_from_slice(&g.value(hidden).data);
    state.len += 1;
    Ok(g.value(logits).data.clone())
}

// ---------------------------------------------------------------------------
// Generation

/// Sampler settings for [`generate`]. `forced` token ids (prediction
/// vocabulary) are consumed before the model's own choices — test plumbing
/// for the forced-path examples.
#[derive(Debug, Clone)]
pub struct GenerateConfig {
    pub max_new: usize,
    /// `None` = greedy argmax; `Some(tau)` = softmax sampling at
    /// temperature `tau`.
    pub temperature: Option<f64>,
    pub guidance: f64,
    pub sample_steps: usize,
    pub seed: u64,
    pub forced: Vec<usize>,
}

/// Generation output: realized elements plus pixel data per image id
/// (prompt images echoed, generated images appended).
#[derive(Debug, Clone)]
pub struct Generated {
    pub elements: Vec<Element>,
    pub images: Vec<Tensor<f64>>,
}

fn visual_tokens_value<F: Real>(
    raw: &RawImage,
    store: &ParamStore<F>,
    cfg: &ModelConfig,
) -> Result<(ImagePyramid<F>, Tensor<F>)> {
    let mut g: Graph<F> = Graph::new();
    let binding = store.bind(&mut g);
    let data = encode_image(&mut g, raw, store, &binding, cfg)?;
    let pyr = data.pyramid.to_values(&g);
    let vt = g.value(data.visual_tokens).clone();
    Ok((pyr, vt))
}

/// Autoregressive interleaved generation. Text tokens come from the LM
/// head; a predicted `BoI` triggers the diffusion decoder conditioned on
/// all hidden states up to and including the `BoI` position, and the
/// generated image is re-encoded and appended as visual tokens.
pub fn generate<F: Real>(
    store: &ParamStore<F>,
    mcfg: &ModelConfig,
    prompt: &[Element],
    prompt_images: &[Tensor<f64>],
    cfg: &GenerateConfig,
) -> Result<Generated> {
    mcfg.validate()?;
    let vocab = mcfg.llm.vocab;
    let n_visual = mcfg.n_visual();
    let sched = mcfg.schedule();
    let mut rng = Prng::new(cfg.seed).split_str("generate");

    let mut images: Vec<Tensor<f64>> = prompt_images.to_vec();
    let mut pyramids: Vec<ImagePyramid<F>> = Vec::new();
    let mut tokens: Vec<Tensor<F>> = Vec::new();
    for px in prompt_images {
        let raw = RawImage::new(px.clone())?;
        let (p, t) = visual_tokens_value(&raw, store, mcfg)?;
        pyramids.push(p);
        tokens.push(t);
    }

    let mut state = DecodeState::new(&mcfg.llm);
    let feed = |state: &mut DecodeState<F>,
                    slot: Slot,
                    pyramids: &[ImagePyramid<F>],
                    tokens: &[Tensor<F>]|
     -> Result<Vec<F>> {
        let row_store;
        let visual_row = match slot {
            Slot::ImgSlot { image, index } => {
                let vt = tokens
                    .get(image)
                    .ok_or(Error::MissingImage(image))?;
                let c = vt.shape[1];
                row_store = vt.data[index * c..(index + 1) * c].to_vec();
                Some(row_store.as_slice())
            }
            _ => None,
        };
        decode_step(state, slot, visual_row, pyramids, store, &mcfg.llm)
    };

    let mut elements: Vec<Element> = Vec::new();
    let mut logits = feed(&mut state, Slot::Bos, &pyramids, &tokens)?;
    for el in prompt {
        match el {
            Element::Text(ids) => {
                for &tok in ids {
                    logits = feed(&mut state, Slot::TextTok(tok), &pyramids, &tokens)?;
                }
            }
            Element::Image(id) => {
                if *id >= images.len() {
                    return Err(Error::MissingImage(*id));
                }
                logits = feed(&mut state, Slot::Boi, &pyramids, &tokens)?;
                for index in 0..n_visual {
                    logits =
                        feed(&mut state, Slot::ImgSlot { image: *id, index }, &pyramids, &tokens)?;
                }
            }
        }
        elements.push(el.clone());
    }
    let prompt_elements = elements.len();

    let mut forced = cfg.forced.iter().copied();
    for _ in 0..cfg.max_new {
        let tok = match forced.next() {
            Some(t) => t,
            None => pick_token(&logits, vocab, cfg.temperature, &mut rng),
        };
        if tok == vocab.eos() {
            break;
        }
        if tok == vocab.boi() {
            logits = feed(&mut state, Slot::Boi, &pyramids, &tokens)?;
            // condition on everything up to and including the BoI position
            let hidden = state.hidden(mcfg.llm.channels);
            let cond = {
                let mut g: Graph<F> = Graph::new();
                let binding = store.bind(&mut g);
                let cres =
                    ResamplerVars::bind(store, &binding, CRES_PREFIX, mcfg.cond_resampler.depth);
                let feats = g.constant(hidden);
                let out = resample(&mut g, feats, &cres, &mcfg.cond_resampler)?;
                g.value(out).clone()
            };
            let vis: Vec<ImagePyramid<F>> = pyramids
                .iter()
                .rev()
                .take(mcfg.decoder.mmfs.max_images)
                .cloned()
                .collect();
            let (x0, _) = imgdec::sample(
                store,
                DEC_PREFIX,
                &mcfg.decoder,
                &sched,
                &cond,
                &vis,
                cfg.guidance,
                cfg.sample_steps,
                &mut rng,
            )?;
            let id = images.len();
            let px: Tensor<f64> = x0.cast();
            let raw = RawImage::new(px.clone())?;
            let (p, t) = visual_tokens_value(&raw, store, mcfg)?;
            images.push(px);
            pyramids.push(p);
            tokens.push(t);
            for index in 0..n_visual {
                logits = feed(&mut state, Slot::ImgSlot { image: id, index }, &pyramids, &tokens)?;
            }
            elements.push(Element::Image(id));
        } else {
            logits = feed(&mut state, Slot::TextTok(tok), &pyramids, &tokens)?;
            let extend_last = elements.len() > prompt_elements
                && matches!(elements.last(), Some(Element::Text(_)));
            if extend_last {
                if let Some(Element::Text(ids)) = elements.last_mut() {
                    ids.push(tok);
                }
            } else {
                elements.push(Element::Text(vec![tok]));
            }
        }
    }
    Ok(Generated { elements, images })
}

/// Sample from the prediction vocabulary (text ∪ {BoI, EoS}).
fn pick_token<F: Real>(
    logits: &[F],
    vocab: Vocab,
    temperature: Option<f64>,
    rng: &mut Prng,
) -> usize {
    let allowed: Vec<usize> = (0..vocab.text)
        .chain([vocab.boi(), vocab.eos()])
        .collect();
    match temperature {
        None => allowed
            .iter()
            .copied()
            .max_by(|&a, &b| {
                logits[a]
                    .to_f64()
                    .partial_cmp(&logits[b].to_f64())
                    .expect("finite logits")
            })
            .expect("nonempty vocabulary"),
        Some(tau) => {
            let z: Vec<f64> = allowed.iter().map(|&i| logits[i].to_f64() / tau).collect();
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut u = rng.uniform() * total;
            for (i, e) in exps.iter().enumerate() {
                u -= e;
                if u <= 0.0 {
                    return allowed[i];
                }
            }
            *allowed.last().expect("nonempty vocabulary")
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpointing

/// Checkpoint format tag.
pub const MAGIC: &[u8; 5] = b"MMIV1";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Offset into the payload, in elements.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

/// Parsed checkpoint: config echo plus named 32-bit tensors.
#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// Write `store` to `path`: magic, manifest length, JSON manifest,
/// little-endian 32-bit payload.
pub fn save_checkpoint<F: Real>(
    store: &ParamStore<F>,
    config: &serde_json::Value,
    path: &Path,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, t) in store.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            dtype: "f32".to_string(),
            offset,
            len: t.numel(),
        });
        for v in &t.data {
            payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        offset += t.numel();
    }
    let manifest = serde_json::to_vec(&Manifest {
        config: config.clone(),
        tensors: entries,
    })?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

/// Read and validate a checkpoint file.
pub fn read_checkpoint(path: &Path) -> Result<CheckpointData> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad checkpoint magic".to_string()));
    }
    let mut len8 = [0u8; 8];
    len8.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
    let mlen = u64::from_le_bytes(len8) as usize;
    let mstart = MAGIC.len() + 8;
    if bytes.len() < mstart + mlen {
        return Err(Error::Format("truncated manifest".to_string()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[mstart..mstart + mlen])?;
    let payload = &bytes[mstart + mlen..];
    let mut expected = 0usize;
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(Error::Format(format!("unsupported dtype {}", e.dtype)));
        }
        if e.offset != expected || e.shape.iter().product::<usize>() != e.len {
            return Err(Error::Format(format!("inconsistent manifest entry {}", e.name)));
        }
        expected += e.len;
    }
    if payload.len() != expected * 4 {
        return Err(Error::Format(format!(
            "payload {} bytes, manifest declares {}",
            payload.len(),
            expected * 4
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let data: Vec<f32> = (0..e.len)
            .map(|i| {
                let at = (e.offset + i) * 4;
                f32::from_le_bytes([
                    payload[at],
                    payload[at + 1],
                    payload[at + 2],
                    payload[at + 3],
                ])
            })
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok(CheckpointData {
        config: manifest.config,
        tensors,
    })
}

/// Copy checkpoint tensors into an existing store. Unknown names and shape
/// mismatches are errors.
pub fn load_into<F: Real>(data: &CheckpointData, store: &mut ParamStore<F>) -> Result<()> {
    for (name, t) in &data.tensors {
        if !store.contains(name) {
            return Err(Error::UnknownTensor(name.clone()));
        }
        store.set(name, t.cast())?;
    }
    Ok(())
}
