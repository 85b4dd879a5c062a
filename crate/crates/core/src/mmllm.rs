//! Toy causal transformer over packed interleaved streams. Multi-scale
//! deformable sampling layers sit between self-attention and the
//! feed-forward network every `mmfs_every` blocks; image slots are fed
//! resampled visual tokens and every position can query the pyramids of the
//! images visible to it.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::mmfs::{apply_gated, init_mmfs_params, GateVariant, MmfsConfig, MmfsVars, RefPoint};
use crate::numcore::{Binding, Graph, ParamStore, Prng, Real, Tensor, Var};
use crate::pyramid::PyramidVars;
use crate::sequence::{visibility, Slot, TrainContext, Vocab};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LLMConfig {
    /// Model width (C); must divide evenly by `heads` and match `mmfs.channels`.
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    /// FFN hidden width = `ffn_mult * channels`.
    pub ffn_mult: usize,
    pub vocab: Vocab,
    /// A sampling layer after every this many blocks.
    pub mmfs_every: usize,
    pub max_context: usize,
    pub mmfs: MmfsConfig,
}

impl LLMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.mmfs_every == 0 {
            return Err(Error::Config(
                "layers and mmfs_every must be >= 1".to_string(),
            ));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.mmfs.channels != self.channels {
            return Err(Error::Config("mmfs channel width mismatch".to_string()));
        }
        Ok(())
    }

    /// Whether block `l` (0-based) is followed by a sampling layer.
    pub fn has_mmfs(&self, l: usize) -> bool {
        (l + 1) % self.mmfs_every == 0
    }
}

pub struct LLMVars {
    pub emb: Var,
    pub pos: Var,
    pub blocks: Vec<LLMBlockVars>,
    pub lnf_g: Var,
    pub lnf_b: Var,
    pub w_out: Var,
}

pub struct LLMBlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub mmfs: Option<MmfsVars>,
}

pub fn init_llm_params<F: Real>(
    store: &mut ParamStore<F>,
    prefix: &str,
    cfg: &LLMConfig,
    rng: &mut Prng,
) {
    let c = cfg.channels;
    let mut r = rng.split_str(prefix);
    let gauss = |shape: &[usize], sigma: f64, r: &mut Prng| {
        Tensor::from_fn(shape, |_| F::from_f64(r.normal() * sigma))
    };
    store.add(
        &format!("{prefix}.emb"),
        gauss(&[cfg.vocab.total(), c], 0.02, &mut r),
    );
    store.add(
        &format!("{prefix}.pos"),
        gauss(&[cfg.max_context, c], 0.02, &mut r),
    );
    let sigma = 1.0 / (c as f64).sqrt();
    for l in 0..cfg.layers {
        let p = format!("{prefix}.l{l}");
        for n in ["ln1", "ln2"] {
            store.add(&format!("{p}.{n}.g"), Tensor::full(&[c], F::ONE));
            store.add(&format!("{p}.{n}.b"), Tensor::zeros(&[c]));
        }
        for n in ["w_q", "w_k", "w_v", "w_o"] {
            store.add(&format!("{p}.{n}"), gauss(&[c, c], sigma, &mut r));
            store.add(&format!("{p}.{}", n.replace('w', "b")), Tensor::zeros(&[c]));
        }
        store.add(
            &format!("{p}.ffn.w1"),
            gauss(&[cfg.ffn_mult * c, c], sigma, &mut r),
        );
        store.add(&format!("{p}.ffn.b1"), Tensor::zeros(&[cfg.ffn_mult * c]));
        store.add(
            &format!("{p}.ffn.w2"),
            gauss(&[c, cfg.ffn_mult * c], 1.0 / ((cfg.ffn_mult * c) as f64).sqrt(), &mut r),
        );
        store.add(&format!("{p}.ffn.b2"), Tensor::zeros(&[c]));
        if cfg.has_mmfs(l) {
            init_mmfs_params(store, &format!("{p}.mmfs"), &cfg.mmfs, GateVariant::Llm, &mut r);
        }
    }
    store.add(&format!("{prefix}.lnf.g"), Tensor::full(&[c], F::ONE));
    store.add(&format!("{prefix}.lnf.b"), Tensor::zeros(&[c]));
    store.add(
        &format!("{prefix}.w_out"),
        gauss(&[cfg.vocab.total(), c], sigma, &mut r),
    );
}

impl LLMVars {
    pub fn bind<F: Real>(
        store: &ParamStore<F>,
        binding: &Binding,
        prefix: &str,
        cfg: &LLMConfig,
    ) -> Self {
        let v = |n: String| binding.var(store, &n);
        LLMVars {
            emb: v(format!("{prefix}.emb")),
            pos: v(format!("{prefix}.pos")),
            blocks: (0..cfg.layers)
                .map(|l| {
                    let p = format!("{prefix}.l{l}");
                    LLMBlockVars {
                        ln1_g: v(format!("{p}.ln1.g")),
                        ln1_b: v(format!("{p}.ln1.b")),
                        w_q: v(format!("{p}.w_q")),
                        b_q: v(format!("{p}.b_q")),
                        w_k: v(format!("{p}.w_k")),
                        b_k: v(format!("{p}.b_k")),
                        w_v: v(format!("{p}.w_v")),
                        b_v: v(format!("{p}.b_v")),
                        w_o: v(format!("{p}.w_o")),
                        b_o: v(format!("{p}.b_o")),
                        ln2_g: v(format!("{p}.ln2.g")),
                        ln2_b: v(format!("{p}.ln2.b")),
                        ffn_w1: v(format!("{p}.ffn.w1")),
                        ffn_b1: v(format!("{p}.ffn.b1")),
                        ffn_w2: v(format!("{p}.ffn.w2")),
                        ffn_b2: v(format!("{p}.ffn.b2")),
                        mmfs: cfg.has_mmfs(l).then(|| {
                            MmfsVars::bind(store, binding, &format!("{p}.mmfs"), GateVariant::Llm)
                        }),
                    }
                })
                .collect(),
            lnf_g: v(format!("{prefix}.lnf.g")),
            lnf_b: v(format!("{prefix}.lnf.b")),
            w_out: v(format!("{prefix}.w_out")),
        }
    }
}

/// Per-image graph inputs: resampled visual tokens `[N, C]` plus the
/// multi-scale pyramid used by the sampling layers.
pub struct ImageData {
    pub visual_tokens: Var,
    pub pyramid: PyramidVars,
}

/// Image keys are `(segment index, image id)` so packed samples with
/// colliding image ids stay separate.
pub type ImageKey = (usize, usize);

/// Flattened forward input for one packed context.
pub struct StreamInput {
    pub slots: Vec<Slot>,
    pub segments: Vec<usize>,
    /// Per position: visible image keys in stream order (oldest first).
    pub visible: Vec<Vec<ImageKey>>,
}

impl StreamInput {
    pub fn from_context(ctx: &TrainContext) -> Self {
        let (slots, segments) = ctx.flatten();
        let mut visible = Vec::with_capacity(slots.len());
        for (si, sample) in ctx.samples.iter().enumerate() {
            let vis = visibility(sample);
            for ids in vis.per_position {
                visible.push(ids.into_iter().map(|img| (si, img)).collect());
            }
        }
        StreamInput {
            slots,
            segments,
            visible,
        }
    }
}

pub struct ForwardOut {
    /// `[T, V]` next-token logits.
    pub logits: Var,
    /// `[T, C]` final-layer-normalized hidden states.
    pub hidden: Var,
}

/// Full forward pass over a flattened stream.
pub fn forward<F: Real>(
    g: &mut Graph<F>,
    input: &StreamInput,
    images: &HashMap<ImageKey, ImageData>,
    vars: &LLMVars,
    cfg: &LLMConfig,
) -> Result<ForwardOut> {
    cfg.validate()?;
    let t_len = input.slots.len();
    if t_len == 0 {
        return Err(Error::EmptyInput("forward: empty stream".to_string()));
    }
    if t_len > cfg.max_context {
        return Err(Error::ContextOverflow {
            len: t_len,
            max: cfg.max_context,
        });
    }
    let c = cfg.channels;

    // input embeddings: word/special rows for token slots, visual tokens
    // for image slots
    let mut rows: Vec<Var> = Vec::with_capacity(t_len);
    for (p, slot) in input.slots.iter().enumerate() {
        let row = match *slot {
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
            Slot::ImgSlot { image, index } => {
                let key = (input.segments[p], image);
                let data = images.get(&key).ok_or(Error::MissingImage(image))?;
                g.slice_rows(data.visual_tokens, index, 1)?
            }
        };
        rows.push(row);
    }
    let mut x = g.concat_rows(&rows)?;
    let pos_ids: Vec<usize> = (0..t_len).collect();
    let pos = g.gather_rows(vars.pos, &pos_ids)?;
    x = g.add(x, pos)?;

    // strict causal attention, never across packed-sample boundaries
    let mut allowed = vec![false; t_len * t_len];
    for p in 0..t_len {
        for q in 0..=p {
            allowed[p * t_len + q] = input.segments[q] == input.segments[p];
        }
    }

    let dh = c / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for blk in &vars.blocks {
        let h = g.layer_norm(x, blk.ln1_g, blk.ln1_b, 1e-5)?;
        let q = g.linear(h, blk.w_q, blk.b_q)?;
        let k = g.linear(h, blk.w_k, blk.b_k)?;
        let v = g.linear(h, blk.w_v, blk.b_v)?;
        let mut head_outs = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k, hd * dh, dh)?;
            let vh = g.slice_cols(v, hd * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.masked_softmax(scores, &allowed)?;
            head_outs.push(g.matmul(attn, vh)?);
        }
        let ctx = g.concat_cols(&head_outs)?;
        let o = g.linear(ctx, blk.w_o, blk.b_o)?;
        x = g.add(x, o)?;

        if let Some(mmfs_vars) = &blk.mmfs {
            let mut new_rows = Vec::with_capacity(t_len);
            for p in 0..t_len {
                let row = g.slice_rows(x, p, 1)?;
                let vis = &input.visible[p];
                if vis.is_empty() {
                    new_rows.push(row);
                    continue;
                }
                // most recent first, capped at the module's image budget
                let recent: Vec<ImageKey> = vis
                    .iter()
                    .rev()
                    .take(cfg.mmfs.max_images)
                    .copied()
                    .collect();
                let pyramids: Vec<&PyramidVars> = recent
                    .iter()
                    .map(|key| {
                        images
                            .get(key)
                            .map(|d| &d.pyramid)
                            .ok_or(Error::MissingImage(key.1))
                    })
                    .collect::<Result<_>>()?;
                let ranks: Vec<usize> = (0..recent.len()).collect();
                let out = apply_gated(
                    g,
                    row,
                    RefPoint::CENTER,
                    &ranks,
                    &pyramids,
                    mmfs_vars,
                    &cfg.mmfs,
                )?;
                new_rows.push(g.reshape(out, vec![1, c])?);
            }
            x = g.concat_rows(&new_rows)?;
        }

        let h = g.layer_norm(x, blk.ln2_g, blk.ln2_b, 1e-5)?;
        let h = g.linear(h, blk.ffn_w1, blk.ffn_b1)?;
        let h = g.gelu(h);
        let h = g.linear(h, blk.ffn_w2, blk.ffn_b2)?;
        x = g.add(x, h)?;
    }
    let hidden = g.layer_norm(x, vars.lnf_g, vars.lnf_b, 1e-5)?;
    let logits = g.matmul_nt(hidden, vars.w_out)?;
    Ok(ForwardOut { logits, hidden })
}

/// Masked mean cross-entropy over next-token targets.
pub fn ntp_loss<F: Real>(
    g: &mut Graph<F>,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
) -> Result<Var> {
    g.cross_entropy(logits, targets, mask)
}
