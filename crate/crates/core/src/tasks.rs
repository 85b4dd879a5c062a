//! Synthetic desk-scale tasks: an overfittable interleaved LM corpus, a
//! layout-copy task for the decoder ablation, a two-image story task, and
//! Gaussian-blob diffusion data.

use std::collections::HashMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imgdec::DenoiserConfig;
use crate::mmfs::MmfsConfig;
use crate::mmllm::{self, LLMConfig, LLMVars, StreamInput};
use crate::numcore::{Graph, ParamStore, Prng, Real, Tensor};
use crate::pipeline::{
    self, encode_image, BatchItem, ModelConfig, OptKind, Optimizer, StepStats, TrainConfig,
    TrainLog,
};
use crate::pyramid::{EncoderConfig, ImagePyramid, RawImage};
use crate::resampler::{resample, ResamplerConfig, ResamplerVars};
use crate::sequence::{build, Element, Slot, TrainContext, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// 64 deterministic interleaved sequences for the NTP overfit check.
    Lm,
    /// Reconstruct a 16×16 two-color layout through a 16-token bottleneck;
    /// the pyramid is the only spatial signal.
    Copy,
    /// Two correlated blob images bridged by a text token.
    Story,
    /// 8×8 two-Gaussian-blob diffusion data for the NIP trend check.
    Blob,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lm" => Ok(Task::Lm),
            "copy" => Ok(Task::Copy),
            "story" => Ok(Task::Story),
            "blob" => Ok(Task::Blob),
            other => Err(Error::Config(format!(
                "unknown task '{other}' (expected lm|copy|story|blob)"
            ))),
        }
    }
}

/// One corpus sample: elements plus pixel data, image id = index.
#[derive(Debug, Clone)]
pub struct TaskSample {
    pub elements: Vec<Element>,
    pub images: Vec<RawImage>,
}

fn blob_image(h: usize, cx: f64, cy: f64, sigma: f64, amp: f64) -> RawImage {
    RawImage::new(Tensor::from_fn(&[h, h, 1], |i| {
        let y = (i / h) as f64;
        let x = (i % h) as f64;
        let d2 = (x - cx).powi(2) + (y - cy).powi(2);
        amp * (-d2 / (2.0 * sigma * sigma)).exp()
    }))
    .expect("finite pixels")
}

fn two_blob_image(h: usize, rng: &mut Prng) -> RawImage {
    let a = blob_image(
        h,
        rng.uniform() * h as f64,
        rng.uniform() * h as f64,
        1.2,
        1.0,
    );
    let b = blob_image(
        h,
        rng.uniform() * h as f64,
        rng.uniform() * h as f64,
        1.2,
        -1.0,
    );
    RawImage::new(Tensor::from_fn(&[h, h, 1], |i| {
        a.pixels.data[i] + b.pixels.data[i]
    }))
    .expect("finite pixels")
}

/// 16×16 two-color layout: a 4×4 grid of ±1 cells upsampled ×4.
fn layout_image(rng: &mut Prng) -> RawImage {
    let cells: Vec<f64> = (0..16)
        .map(|_| if rng.uniform() < 0.5 { -1.0 } else { 1.0 })
        .collect();
    RawImage::new(Tensor::from_fn(&[16, 16, 1], |i| {
        let y = i / 16;
        let x = i % 16;
        cells[(y / 4) * 4 + x / 4]
    }))
    .expect("finite pixels")
}

/// Deterministic text chain: `t_{j+1} = (3·t_j + 1 + j) mod text`.
fn chain(t0: usize, len: usize, text: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    let mut t = t0;
    for j in 0..len {
        out.push(t);
        t = (3 * t + 1 + j) % text;
    }
    out
}

/// Build the task corpus (sizes and content are fixed per task, modulo seed).
pub fn make_corpus(task: Task, seed: u64) -> Vec<TaskSample> {
    let mut rng = Prng::new(seed).split_str("corpus");
    match task {
        Task::Lm => (0..64)
            .map(|i| {
                let flat = blob_image(8, 4.0, 4.0, 2.0, 0.5);
                TaskSample {
                    elements: vec![Element::Text(chain(i % 2, 16, 11)), Element::Image(0)],
                    images: vec![flat],
                }
            })
            .collect(),
        Task::Copy => (0..32)
            .map(|_| {
                let layout = layout_image(&mut rng);
                TaskSample {
                    elements: vec![Element::Image(0), Element::Image(1)],
                    images: vec![layout.clone(), layout],
                }
            })
            .collect(),
        Task::Story => (0..16)
            .map(|_| {
                let p = rng.below(6) + 1;
                let first = blob_image(8, p as f64, 4.0, 1.2, 1.0);
                let second = blob_image(8, (p + 1) as f64, 4.0, 1.2, 1.0);
                TaskSample {
                    elements: vec![
                        Element::Image(0),
                        Element::Text(vec![p]),
                        Element::Image(1),
                    ],
                    images: vec![first, second],
                }
            })
            .collect(),
        Task::Blob => (0..16)
            .map(|_| {
                let first = two_blob_image(8, &mut rng);
                let second = two_blob_image(8, &mut rng);
                TaskSample {
                    elements: vec![Element::Image(0), Element::Image(1)],
                    images: vec![first, second],
                }
            })
            .collect(),
    }
}

fn small_model(image_size: usize, cond_tokens: usize, decoder_base: usize) -> ModelConfig {
    let c = 16;
    ModelConfig {
        llm: LLMConfig {
            channels: c,
            layers: 2,
            heads: 2,
            ffn_mult: 2,
            vocab: Vocab { text: 11 },
            mmfs_every: 2,
            max_context: 96,
            mmfs: MmfsConfig {
                points: 2,
                max_images: 2,
                levels: 1,
                channels: c,
            },
        },
        encoder: EncoderConfig {
            levels: 1,
            channels: c,
            image_channels: 1,
        },
        visual_resampler: ResamplerConfig {
            n_out: 2,
            depth: 1,
            channels: c,
        },
        cond_resampler: ResamplerConfig {
            n_out: cond_tokens,
            depth: 1,
            channels: c,
        },
        decoder: DenoiserConfig {
            height: image_size,
            width: image_size,
            img_channels: 1,
            base: decoder_base,
            depth: 1,
            cond_tokens,
            channels: c,
            mmfs: MmfsConfig {
                points: 4,
                max_images: 2,
                levels: 1,
                channels: c,
            },
        },
        // hotter than the imgdec default so that alpha_bar at T is ~0.08:
        // x_T carries essentially no image information and the sampler's
        // standard-normal start matches the forward process
        diffusion_steps: 100,
        beta1: 1e-4,
        beta_t: 0.05,
    }
}

/// Per-task toy model shape.
pub fn model_config(task: Task) -> ModelConfig {
    match task {
        Task::Lm => small_model(8, 2, 2),
        Task::Copy => small_model(16, 16, 8),
        Task::Story => small_model(8, 4, 4),
        Task::Blob => small_model(8, 4, 4),
    }
}

/// Per-task training hyper-parameters.
pub fn train_config(task: Task) -> TrainConfig {
    let base = TrainConfig {
        lambda: 10.0,
        lr: 1e-2,
        lr_decoder: 1e-3,
        steps: 300,
        batch: 4,
        dropout: 0.1,
        seed: 7,
        optimizer: OptKind::Adam,
        decoder_mmfs: true,
    };
    match task {
        Task::Lm => TrainConfig {
            lambda: 0.0,
            steps: 500,
            batch: 8,
            dropout: 0.0,
            ..base
        },
        // the decoder learns faster than the jointly-drifting encoder/LLM
        // features it consumes, so it gets the higher rate of the two
        Task::Copy => TrainConfig {
            lr: 1e-3,
            lr_decoder: 3e-3,
            steps: 4000,
            ..base
        },
        Task::Story => base,
        Task::Blob => TrainConfig {
            lr: 1e-3,
            lr_decoder: 3e-3,
            steps: 300,
            ..base
        },
    }
}

/// Wrap one corpus sample as a single-sample packed context.
pub fn batch_item(sample: &TaskSample, mcfg: &ModelConfig) -> Result<BatchItem> {
    let seq = build(&sample.elements, mcfg.n_visual())?;
    let mut images = HashMap::new();
    for (id, raw) in sample.images.iter().enumerate() {
        images.insert((0usize, id), raw.clone());
    }
    Ok(BatchItem {
        context: TrainContext { samples: vec![seq] },
        images,
    })
}

/// Training history (per-step stats in order).
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub history: Vec<StepStats>,
}

impl RunSummary {
    pub fn final_stats(&self) -> StepStats {
        *self.history.last().expect("at least one step")
    }
}

/// Where a training run stopped: enough state to continue the data order
/// and noise draws exactly. The optimizer restarts with fresh moments.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainProgress {
    pub step: usize,
    pub rng_key: u64,
    pub rng_counter: u64,
    pub order: Vec<usize>,
}

/// Train `tcfg.steps` steps over the corpus (deterministic shuffled
/// batches), optionally logging JSON lines.
pub fn run_training<F: Real>(
    store: &mut ParamStore<F>,
    corpus: &[TaskSample],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    log: Option<&mut TrainLog>,
) -> Result<RunSummary> {
    run_training_resumed(store, corpus, mcfg, tcfg, log, None).map(|(s, _)| s)
}

/// [`run_training`] continuing from an optional [`TrainProgress`]; batches
/// and per-step randomness follow the interrupted run exactly.
pub fn run_training_resumed<F: Real>(
    store: &mut ParamStore<F>,
    corpus: &[TaskSample],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    mut log: Option<&mut TrainLog>,
    progress: Option<&TrainProgress>,
) -> Result<(RunSummary, TrainProgress)> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("run_training: empty corpus".to_string()));
    }
    mcfg.validate()?;
    tcfg.validate()?;
    let items: Vec<BatchItem> = corpus
        .iter()
        .map(|s| batch_item(s, mcfg))
        .collect::<Result<_>>()?;
    let mut opt = Optimizer::new(tcfg.optimizer);
    let (mut rng, mut order, start) = match progress {
        Some(p) => {
            if p.order.iter().any(|&i| i >= items.len()) {
                return Err(Error::Config(
                    "resume progress references samples outside the corpus".to_string(),
                ));
            }
            (
                Prng::from_state(p.rng_key, p.rng_counter),
                p.order.clone(),
                p.step,
            )
        }
        None => (Prng::new(tcfg.seed).split_str("train"), Vec::new(), 0),
    };
    let mut history = Vec::with_capacity(tcfg.steps);
    for step in start..start + tcfg.steps {
        let mut batch = Vec::with_capacity(tcfg.batch);
        for _ in 0..tcfg.batch {
            if order.is_empty() {
                order = (0..items.len()).collect();
                // Fisher-Yates with the run rng
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.below(i + 1));
                }
            }
            batch.push(items[order.pop().expect("refilled")].clone());
        }
        let start = std::time::Instant::now();
        let stats = pipeline::train_step(store, &batch, mcfg, tcfg, &mut opt, &mut rng)?;
        if let Some(log) = log.as_deref_mut() {
            log.log(step, &stats, start.elapsed().as_secs_f64() * 1e3)?;
        }
        history.push(stats);
    }
    let (rng_key, rng_counter) = rng.state();
    Ok((
        RunSummary { history },
        TrainProgress {
            step: start + tcfg.steps,
            rng_key,
            rng_counter,
            order,
        },
    ))
}

/// Mean reconstruction MSE of each sample's second image, generated by the
/// diffusion sampler conditioned exactly as in training. `use_pyramids`
/// selects the with/without-MMFS arm.
pub fn eval_reconstruction<F: Real>(
    store: &ParamStore<F>,
    corpus: &[TaskSample],
    mcfg: &ModelConfig,
    use_pyramids: bool,
    guidance: f64,
    sample_steps: usize,
    seed: u64,
) -> Result<f64> {
    let sched = mcfg.schedule();
    let mut total = 0.0;
    let mut count = 0usize;
    for (si, sample) in corpus.iter().enumerate() {
        if sample.images.len() < 2 {
            continue;
        }
        let item = batch_item(sample, mcfg)?;
        let seq = &item.context.samples[0];
        // hidden states up to and including the second image's BoI
        let mut g: Graph<F> = Graph::new();
        let binding = store.bind(&mut g);
        let llm_vars = LLMVars::bind(store, &binding, pipeline::LLM_PREFIX, &mcfg.llm);
        let mut images = HashMap::new();
        for (id, raw) in sample.images.iter().enumerate() {
            images.insert((0usize, id), encode_image(&mut g, raw, store, &binding, mcfg)?);
        }
        let input = StreamInput::from_context(&item.context);
        let fwd = mmllm::forward(&mut g, &input, &images, &llm_vars, &mcfg.llm)?;
        let boi = seq
            .stream
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, Slot::Boi))
            .nth(1)
            .map(|(p, _)| p)
            .expect("two images");
        let feats = g.slice_rows(fwd.hidden, 0, boi + 1)?;
        let cres = ResamplerVars::bind(
            store,
            &binding,
            pipeline::CRES_PREFIX,
            mcfg.cond_resampler.depth,
        );
        let cond_v = resample(&mut g, feats, &cres, &mcfg.cond_resampler)?;
        let cond = g.value(cond_v).clone();
        let pyramids: Vec<ImagePyramid<F>> = if use_pyramids {
            vec![images[&(0, 0)].pyramid.to_values(&g)]
        } else {
            Vec::new()
        };
        let mut rng = Prng::new(seed).split(si as u64);
        let (x0, _) = crate::imgdec::sample(
            store,
            pipeline::DEC_PREFIX,
            &mcfg.decoder,
            &sched,
            &cond,
            &pyramids,
            guidance,
            sample_steps,
            &mut rng,
        )?;
        let target: Tensor<F> = sample.images[1].pixels.cast();
        total += x0
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).powi(2))
            .sum::<f64>()
            / target.data.len() as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyInput(
            "eval_reconstruction: no two-image samples".to_string(),
        ));
    }
    Ok(total / count as f64)
}
