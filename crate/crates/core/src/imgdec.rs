//! Toy diffusion image decoder: an epsilon-prediction U-Net with
//! condition-token cross-attention in every stage and a multi-scale
//! deformable sampling layer after each downsampling block, plus the
//! denoising loss and classifier-free-guidance ancestral sampling.

use crate::error::{Error, Result};
use crate::mmfs::{deform_attn, init_mmfs_core_params, plan, MmfsConfig, MmfsCoreVars, RefPoint};
use crate::numcore::{Binding, Graph, ParamStore, Prng, Real, Tensor, Var};
use crate::pyramid::{ImagePyramid, PyramidVars};

/// Linear-beta schedule with precomputed cumulative products.
/// Timesteps are 1-based: arrays index `t - 1`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta1: f64, beta_t: f64) -> Result<Self> {
        if steps == 0 || beta1 <= 0.0 || beta_t < beta1 || beta_t >= 1.0 {
            return Err(Error::Schedule(format!(
                "invalid schedule: steps={steps}, beta range [{beta1}, {beta_t}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta1
                } else {
                    beta1 + (beta_t - beta1) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// T = 100, beta linear 1e-4 to 0.02.
    pub fn default_toy() -> Self {
        Self::linear(100, 1e-4, 0.02).unwrap()
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DenoiserConfig {
    pub height: usize,
    pub width: usize,
    pub img_channels: usize,
    /// Channel count of the first stage; stage `s` has `base << s`.
    pub base: usize,
    /// Down/up stage pairs.
    pub depth: usize,
    /// Condition token count (N_c).
    pub cond_tokens: usize,
    /// Width of condition tokens, time embedding and the sampling module.
    pub channels: usize,
    pub mmfs: MmfsConfig,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.depth;
        if self.height % div != 0 || self.width % div != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by 2^{}",
                self.height, self.width, self.depth
            )));
        }
        if self.channels % 2 != 0 {
            return Err(Error::Config("channels must be even".to_string()));
        }
        if self.mmfs.channels != self.channels {
            return Err(Error::Config("mmfs channel width mismatch".to_string()));
        }
        Ok(())
    }

    pub fn stage_channels(&self, s: usize) -> usize {
        self.base << s
    }
}

/// Forward diffusion: `x_t = sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps`.
pub fn noise<F: Real>(
    sched: &NoiseSchedule,
    x0: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
) -> Result<Tensor<F>> {
    if t == 0 || t > sched.steps() {
        return Err(Error::Schedule(format!(
            "t = {t} outside [1, {}]",
            sched.steps()
        )));
    }
    if x0.shape != eps.shape {
        return Err(Error::Dimension("noise: x0/eps shape mismatch".to_string()));
    }
    let ab = sched.alpha_bars[t - 1];
    let (sa, sb) = (F::from_f64(ab.sqrt()), F::from_f64((1.0 - ab).sqrt()));
    Ok(Tensor::new(
        x0.shape.clone(),
        x0.data
            .iter()
            .zip(&eps.data)
            .map(|(a, e)| sa.mul(*a).add(sb.mul(*e)))
            .collect(),
    )
    .unwrap())
}

pub fn init_denoiser_params<F: Real>(
    store: &mut ParamStore<F>,
    prefix: &str,
    cfg: &DenoiserConfig,
    rng: &mut Prng,
) {
    let c = cfg.channels;
    let mut r = rng.split_str(prefix);
    let gauss = |shape: &[usize], r: &mut Prng| {
        let fan_in: usize = shape[..shape.len() - 1].iter().product::<usize>().max(1);
        let sigma = 1.0 / (fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| F::from_f64(r.normal() * sigma))
    };
    store.add(&format!("{prefix}.stem.w"), gauss(&[3, 3, cfg.img_channels, cfg.base], &mut r));
    store.add(&format!("{prefix}.stem.b"), Tensor::zeros(&[cfg.base]));
    store.add(&format!("{prefix}.temb.w1"), gauss(&[c, c], &mut r));
    store.add(&format!("{prefix}.temb.b1"), Tensor::zeros(&[c]));
    store.add(&format!("{prefix}.temb.w2"), gauss(&[c, c], &mut r));
    store.add(&format!("{prefix}.temb.b2"), Tensor::zeros(&[c]));
    for s in 0..cfg.depth {
        let (ci, co) = (cfg.stage_channels(s), cfg.stage_channels(s + 1));
        let p = format!("{prefix}.d{s}");
        for n in ["n1", "n2"] {
            store.add(&format!("{p}.{n}.g"), Tensor::full(&[ci], F::ONE));
            store.add(&format!("{p}.{n}.b"), Tensor::zeros(&[ci]));
        }
        store.add(&format!("{p}.n3.g"), Tensor::full(&[co], F::ONE));
        store.add(&format!("{p}.n3.b"), Tensor::zeros(&[co]));
        store.add(&format!("{p}.conv.w"), gauss(&[3, 3, ci, ci], &mut r));
        store.add(&format!("{p}.conv.b"), Tensor::zeros(&[ci]));
        store.add(&format!("{p}.temb.w"), gauss(&[ci, c], &mut r));
        store.add(&format!("{p}.temb.b"), Tensor::zeros(&[ci]));
        store.add(&format!("{p}.ca.w_q"), gauss(&[c, ci], &mut r));
        store.add(&format!("{p}.ca.b_q"), Tensor::zeros(&[c]));
        store.add(&format!("{p}.ca.w_k"), gauss(&[c, c], &mut r));
        store.add(&format!("{p}.ca.b_k"), Tensor::zeros(&[c]));
        store.add(&format!("{p}.ca.w_v"), gauss(&[c, c], &mut r));
        store.add(&format!("{p}.ca.b_v"), Tensor::zeros(&[c]));
        store.add(&format!("{p}.ca.w_o"), gauss(&[ci, c], &mut r));
        store.add(&format!("{p}.ca.b_o"), Tensor::zeros(&[ci]));
        store.add(&format!("{p}.down.w"), gauss(&[2, 2, ci, co], &mut r));
        store.add(&format!("{p}.down.b"), Tensor::zeros(&[co]));
        init_mmfs_core_params(store, &format!("{p}.mmfs"), &cfg.mmfs, &mut r);
        store.add(&format!("{p}.in_proj.w"), gauss(&[c, co], &mut r));
        store.add(&format!("{p}.in_proj.b"), Tensor::zeros(&[c]));
        // zero-init: the sampling branch is an exact no-op at start
        store.add(&format!("{p}.zconv.w"), Tensor::zeros(&[co, c]));
        store.add(&format!("{p}.zconv.b"), Tensor::zeros(&[co]));
    }
    let cd = cfg.stage_channels(cfg.depth);
    store.add(&format!("{prefix}.mid.n.g"), Tensor::full(&[cd], F::ONE));
    store.add(&format!("{prefix}.mid.n.b"), Tensor::zeros(&[cd]));
    store.add(&format!("{prefix}.mid.conv.w"), gauss(&[3, 3, cd, cd], &mut r));
    store.add(&format!("{prefix}.mid.conv.b"), Tensor::zeros(&[cd]));
    store.add(&format!("{prefix}.mid.temb.w"), gauss(&[cd, c], &mut r));
    store.add(&format!("{prefix}.mid.temb.b"), Tensor::zeros(&[cd]));
    for s in (0..cfg.depth).rev() {
        let (ci, co) = (cfg.stage_channels(s), cfg.stage_channels(s + 1));
        let p = format!("{prefix}.u{s}");
        store.add(&format!("{p}.up.w"), gauss(&[3, 3, co, ci], &mut r));
        store.add(&format!("{p}.up.b"), Tensor::zeros(&[ci]));
        store.add(&format!("{p}.fuse.w"), gauss(&[3, 3, 2 * ci, ci], &mut r));
        store.add(&format!("{p}.fuse.b"), Tensor::zeros(&[ci]));
        store.add(&format!("{p}.temb.w"), gauss(&[ci, c], &mut r));
        store.add(&format!("{p}.temb.b"), Tensor::zeros(&[ci]));
    }
    store.add(&format!("{prefix}.out.w"), gauss(&[3, 3, cfg.base, cfg.img_channels], &mut r));
    store.add(&format!("{prefix}.out.b"), Tensor::zeros(&[cfg.img_channels]));
    store.add(
        &format!("{prefix}.null_cond"),
        Tensor::from_fn(&[cfg.cond_tokens, c], |_| F::from_f64(r.normal() * 0.02)),
    );
}

/// Name-based variable lookup for the denoiser's many tensors.
pub struct DenoiserVars<'a, F: Real> {
    store: &'a ParamStore<F>,
    binding: &'a Binding,
    prefix: String,
}

impl<'a, F: Real> DenoiserVars<'a, F> {
    pub fn new(store: &'a ParamStore<F>, binding: &'a Binding, prefix: &str) -> Self {
        DenoiserVars {
            store,
            binding,
            prefix: prefix.to_string(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        self.binding.var(self.store, &format!("{}.{name}", self.prefix))
    }

    pub fn mmfs_core(&self, stage: usize) -> MmfsCoreVars {
        MmfsCoreVars::bind(self.store, self.binding, &format!("{}.d{stage}.mmfs", self.prefix))
    }
}

/// Sinusoidal timestep embedding of width `c` (half sines, half cosines).
fn time_embedding<F: Real>(t: usize, c: usize) -> Tensor<F> {
    let half = c / 2;
    Tensor::from_fn(&[c], |i| {
        let k = i % half;
        let freq = (10000f64).powf(-(k as f64) / half as f64);
        let angle = t as f64 * freq;
        F::from_f64(if i < half { angle.sin() } else { angle.cos() })
    })
}

/// Predict the noise component of `x_t`.
///
/// `pyramids` hold the previously generated images, most recent first; an
/// empty slice leaves every sampling layer inert.
pub fn denoise<F: Real>(
    g: &mut Graph<F>,
    x_t: Var,
    t: usize,
    cond: Var,
    pyramids: &[&PyramidVars],
    vars: &DenoiserVars<F>,
    cfg: &DenoiserConfig,
    sched: &NoiseSchedule,
) -> Result<Var> {
    cfg.validate()?;
    if t == 0 || t > sched.steps() {
        return Err(Error::Schedule(format!(
            "t = {t} outside [1, {}]",
            sched.steps()
        )));
    }
    let shape = g.value(x_t).shape.clone();
    if shape != [cfg.height, cfg.width, cfg.img_channels] {
        return Err(Error::Dimension(format!(
            "denoise: input {shape:?}, expected [{}, {}, {}]",
            cfg.height, cfg.width, cfg.img_channels
        )));
    }
    let cond_shape = g.value(cond).shape.clone();
    if cond_shape != [cfg.cond_tokens, cfg.channels] {
        return Err(Error::Dimension(format!(
            "denoise: cond {cond_shape:?}, expected [{}, {}]",
            cfg.cond_tokens, cfg.channels
        )));
    }
    let c = cfg.channels;
    let scale = 1.0 / (c as f64).sqrt();

    // timestep embedding through a 2-layer MLP
    let temb0 = g.constant(time_embedding::<F>(t, c));
    let temb = g.linear(temb0, vars.var("temb.w1"), vars.var("temb.b1"))?;
    let temb = g.gelu(temb);
    let temb = g.linear(temb, vars.var("temb.w2"), vars.var("temb.b2"))?;

    let mut x = g.conv2d(x_t, vars.var("stem.w"), vars.var("stem.b"), 1, 1)?;
    let mut skips = Vec::with_capacity(cfg.depth);
    for s in 0..cfg.depth {
        let p = |n: &str| vars.var(&format!("d{s}.{n}"));
        // pre-norm conv block with timestep conditioning
        let n = g.layer_norm(x, p("n1.g"), p("n1.b"), 1e-5)?;
        let h = g.conv2d(n, p("conv.w"), p("conv.b"), 1, 1)?;
        let tp = g.linear(temb, p("temb.w"), p("temb.b"))?;
        let h = g.add_channel(h, tp)?;
        let h = g.gelu(h);
        x = g.add(x, h)?;
        // per-pixel cross-attention over the condition tokens
        let (hh, ww, ci) = {
            let sh = &g.value(x).shape;
            (sh[0], sh[1], sh[2])
        };
        let nx = g.layer_norm(x, p("n2.g"), p("n2.b"), 1e-5)?;
        let flat = g.reshape(nx, vec![hh * ww, ci])?;
        let q = g.linear(flat, p("ca.w_q"), p("ca.b_q"))?;
        let k = g.linear(cond, p("ca.w_k"), p("ca.b_k"))?;
        let v = g.linear(cond, p("ca.w_v"), p("ca.b_v"))?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores)?;
        let av = g.matmul(attn, v)?;
        let o = g.linear(av, p("ca.w_o"), p("ca.b_o"))?;
        let o = g.reshape(o, vec![hh, ww, ci])?;
        x = g.add(x, o)?;
        skips.push(x);
        // downsample then query previous images, anchored at each pixel's
        // own normalized coordinate
        x = g.conv2d(x, p("down.w"), p("down.b"), 2, 0)?;
        if !pyramids.is_empty() {
            let core = vars.mmfs_core(s);
            let visible: Vec<usize> = (0..pyramids.len().min(cfg.mmfs.max_images)).collect();
            let pyr = &pyramids[..visible.len()];
            let (dh, dw, dc) = {
                let sh = &g.value(x).shape;
                (sh[0], sh[1], sh[2])
            };
            let nx = g.layer_norm(x, p("n3.g"), p("n3.b"), 1e-5)?;
            let nflat = g.reshape(nx, vec![dh * dw, dc])?;
            let flat = g.reshape(x, vec![dh * dw, dc])?;
            let mut rows = Vec::with_capacity(dh * dw);
            for y in 0..dh {
                for xp in 0..dw {
                    let row = g.slice_rows(flat, y * dw + xp, 1)?;
                    let nrow = g.slice_rows(nflat, y * dw + xp, 1)?;
                    let fq = g.linear(nrow, p("in_proj.w"), p("in_proj.b"))?;
                    let rp = RefPoint::new(
                        (xp as f64 + 0.5) / dw as f64,
                        (y as f64 + 0.5) / dh as f64,
                    )?;
                    let pl = plan(g, fq, rp, &visible, &core, &cfg.mmfs)?;
                    let f_o = deform_attn(g, pyr, &pl, &cfg.mmfs)?;
                    let z = g.linear(f_o, p("zconv.w"), p("zconv.b"))?;
                    let z = g.reshape(z, vec![1, dc])?;
                    rows.push(g.add(row, z)?);
                }
            }
            let merged = g.concat_rows(&rows)?;
            x = g.reshape(merged, vec![dh, dw, dc])?;
        }
    }

    let n = g.layer_norm(x, vars.var("mid.n.g"), vars.var("mid.n.b"), 1e-5)?;
    let h = g.conv2d(n, vars.var("mid.conv.w"), vars.var("mid.conv.b"), 1, 1)?;
    let tp = g.linear(temb, vars.var("mid.temb.w"), vars.var("mid.temb.b"))?;
    let h = g.add_channel(h, tp)?;
    let h = g.gelu(h);
    x = g.add(x, h)?;

    for s in (0..cfg.depth).rev() {
        let p = |n: &str| vars.var(&format!("u{s}.{n}"));
        let up = g.upsample2x(x)?;
        let up = g.conv2d(up, p("up.w"), p("up.b"), 1, 1)?;
        let cat = g.concat_channels(up, skips[s])?;
        let h = g.conv2d(cat, p("fuse.w"), p("fuse.b"), 1, 1)?;
        let tp = g.linear(temb, p("temb.w"), p("temb.b"))?;
        let h = g.add_channel(h, tp)?;
        x = g.gelu(h);
    }
    g.conv2d(x, vars.var("out.w"), vars.var("out.b"), 1, 1)
}

/// Denoising loss at a fixed draw `(t, eps)`: mean squared error between
/// `eps` and the prediction on the noised image.
pub fn nip_loss_at<F: Real>(
    g: &mut Graph<F>,
    x0: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
    cond: Var,
    pyramids: &[&PyramidVars],
    vars: &DenoiserVars<F>,
    cfg: &DenoiserConfig,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let x_t = noise(sched, x0, t, eps)?;
    let x_t = g.constant(x_t);
    let eps_hat = denoise(g, x_t, t, cond, pyramids, vars, cfg, sched)?;
    let eps_v = g.constant(eps.clone());
    g.mean_sq_diff(eps_hat, eps_v)
}

/// Draw `t` uniform in `[1, T]` and standard-normal `eps`, then evaluate
/// [`nip_loss_at`]. Returns the loss with the recorded draw for replay.
pub fn nip_loss<F: Real>(
    g: &mut Graph<F>,
    x0: &Tensor<F>,
    cond: Var,
    pyramids: &[&PyramidVars],
    vars: &DenoiserVars<F>,
    cfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    rng: &mut Prng,
) -> Result<(Var, usize, Tensor<F>)> {
    let t = rng.below(sched.steps()) + 1;
    let eps = Tensor::from_fn(&x0.shape, |_| F::from_f64(rng.normal()));
    let loss = nip_loss_at(g, x0, t, &eps, cond, pyramids, vars, cfg, sched)?;
    Ok((loss, t, eps))
}

/// Ancestral sampling with classifier-free guidance. `steps <= T` runs the
/// chain from `x_steps ~ N(0, I)` down to `x_0`; per step the applied noise
/// estimate is `e_u + s (e_c - e_u)` with the learned null condition for
/// the unconditional branch. Deterministic given the rng seed.
pub fn sample<F: Real>(
    store: &ParamStore<F>,
    prefix: &str,
    cfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    cond: &Tensor<F>,
    pyramids: &[ImagePyramid<F>],
    guidance: f64,
    steps: usize,
    rng: &mut Prng,
) -> Result<(Tensor<F>, Vec<(usize, f64, f64)>)> {
    if steps == 0 || steps > sched.steps() {
        return Err(Error::Schedule(format!(
            "steps = {steps} outside [1, {}]",
            sched.steps()
        )));
    }
    let shape = [cfg.height, cfg.width, cfg.img_channels];
    let mut x: Tensor<F> = Tensor::from_fn(&shape, |_| F::from_f64(rng.normal()));
    let mut trace = Vec::with_capacity(steps);
    for t in (1..=steps).rev() {
        let mut g: Graph<F> = Graph::new();
        let binding = store.bind(&mut g);
        let vars = DenoiserVars::new(store, &binding, prefix);
        let x_v = g.constant(x.clone());
        let cond_v = g.constant(cond.clone());
        let null_v = vars.var("null_cond");
        let pvs: Vec<PyramidVars> = pyramids
            .iter()
            .map(|p| PyramidVars::from_values(&mut g, p))
            .collect();
        let refs: Vec<&PyramidVars> = pvs.iter().collect();
        let e_c = denoise(&mut g, x_v, t, cond_v, &refs, &vars, cfg, sched)?;
        let e_u = denoise(&mut g, x_v, t, null_v, &refs, &vars, cfg, sched)?;
        let ec = g.value(e_c);
        let eu = g.value(e_u);
        let s = F::from_f64(guidance);
        let eps_hat: Vec<F> = ec
            .data
            .iter()
            .zip(&eu.data)
            .map(|(c, u)| u.add(s.mul(c.sub(*u))))
            .collect();
        let (a, b, ab) = (sched.alphas[t - 1], sched.betas[t - 1], sched.alpha_bars[t - 1]);
        // clip the implied x0 to the data range and re-derive the noise
        // estimate; keeps the chain bounded when the model extrapolates
        let (sab, snab) = (ab.sqrt(), (1.0 - ab).sqrt());
        let eps_hat: Vec<F> = eps_hat
            .iter()
            .zip(&x.data)
            .map(|(e, xi)| {
                let x0h = (xi.to_f64() - snab * e.to_f64()) / sab;
                let x0h = x0h.clamp(-1.0, 1.0);
                F::from_f64((xi.to_f64() - sab * x0h) / snab)
            })
            .collect();
        let inv_sqrt_a = F::from_f64(1.0 / a.sqrt());
        let coef = F::from_f64(b / (1.0 - ab).sqrt());
        let sigma = F::from_f64(b.sqrt());
        for (xi, e) in x.data.iter_mut().zip(&eps_hat) {
            let mut v = inv_sqrt_a.mul(xi.sub(coef.mul(*e)));
            if t > 1 {
                v = v.add(sigma.mul(F::from_f64(rng.normal())));
            }
            *xi = v;
        }
        let n = x.data.len() as f64;
        let mean: f64 = x.data.iter().map(|v| v.to_f64()).sum::<f64>() / n;
        let var: f64 = x
            .data
            .iter()
            .map(|v| (v.to_f64() - mean) * (v.to_f64() - mean))
            .sum::<f64>()
            / n;
        trace.push((t, mean, var.sqrt()));
    }
    Ok((x, trace))
}
