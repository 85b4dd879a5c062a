//! Latent-query resampler: maps a variable-length feature set `[S, C]` to a
//! fixed number of tokens `[N_out, C]` via learned latent queries,
//! cross-attention blocks and feed-forward residuals.

use crate::error::{Error, Result};
use crate::numcore::{Binding, Graph, ParamStore, Prng, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ResamplerConfig {
    /// Number of output tokens.
    pub n_out: usize,
    /// Number of cross-attention blocks (0 = pass latents through).
    pub depth: usize,
    /// Channel width (C).
    pub channels: usize,
}

pub struct ResamplerVars {
    pub latents: Var,
    pub blocks: Vec<BlockVars>,
}

pub struct BlockVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub ln_g: Var,
    pub ln_b: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

pub fn init_resampler_params<F: Real>(
    store: &mut ParamStore<F>,
    prefix: &str,
    cfg: &ResamplerConfig,
    rng: &mut Prng,
) {
    let c = cfg.channels;
    let mut r = rng.split_str(prefix);
    let gauss = |shape: &[usize], sigma: f64, r: &mut Prng| {
        Tensor::from_fn(shape, |_| F::from_f64(r.normal() * sigma))
    };
    store.add(&format!("{prefix}.latents"), gauss(&[cfg.n_out, c], 0.02, &mut r));
    let sigma = 1.0 / (c as f64).sqrt();
    for d in 0..cfg.depth {
        let p = format!("{prefix}.b{d}");
        for n in ["w_q", "w_k", "w_v", "w_o"] {
            store.add(&format!("{p}.{n}"), gauss(&[c, c], sigma, &mut r));
            store.add(&format!("{p}.{}", n.replace('w', "b")), Tensor::zeros(&[c]));
        }
        store.add(&format!("{p}.ln.g"), Tensor::full(&[c], F::ONE));
        store.add(&format!("{p}.ln.b"), Tensor::zeros(&[c]));
        store.add(&format!("{p}.ffn.w1"), gauss(&[4 * c, c], sigma, &mut r));
        store.add(&format!("{p}.ffn.b1"), Tensor::zeros(&[4 * c]));
        store.add(
            &format!("{p}.ffn.w2"),
            gauss(&[c, 4 * c], 1.0 / (4.0 * c as f64).sqrt(), &mut r),
        );
        store.add(&format!("{p}.ffn.b2"), Tensor::zeros(&[c]));
    }
}

impl ResamplerVars {
    pub fn bind<F: Real>(
        store: &ParamStore<F>,
        binding: &Binding,
        prefix: &str,
        depth: usize,
    ) -> Self {
        let v = |n: String| binding.var(store, &n);
        ResamplerVars {
            latents: v(format!("{prefix}.latents")),
            blocks: (0..depth)
                .map(|d| {
                    let p = format!("{prefix}.b{d}");
                    BlockVars {
                        w_q: v(format!("{p}.w_q")),
                        b_q: v(format!("{p}.b_q")),
                        w_k: v(format!("{p}.w_k")),
                        b_k: v(format!("{p}.b_k")),
                        w_v: v(format!("{p}.w_v")),
                        b_v: v(format!("{p}.b_v")),
                        w_o: v(format!("{p}.w_o")),
                        b_o: v(format!("{p}.b_o")),
                        ln_g: v(format!("{p}.ln.g")),
                        ln_b: v(format!("{p}.ln.b")),
                        ffn_w1: v(format!("{p}.ffn.w1")),
                        ffn_b1: v(format!("{p}.ffn.b1")),
                        ffn_w2: v(format!("{p}.ffn.w2")),
                        ffn_b2: v(format!("{p}.ffn.b2")),
                    }
                })
                .collect(),
        }
    }
}

/// Resample `features` `[S, C]` down (or up) to `[n_out, C]`.
pub fn resample<F: Real>(
    g: &mut Graph<F>,
    features: Var,
    vars: &ResamplerVars,
    cfg: &ResamplerConfig,
) -> Result<Var> {
    let shape = g.value(features).shape.clone();
    if shape.len() != 2 || shape[1] != cfg.channels {
        return Err(Error::Dimension(format!(
            "resample: features shape {shape:?}, expected [S, {}]",
            cfg.channels
        )));
    }
    if shape[0] == 0 {
        return Err(Error::EmptyInput("resample: no input features".to_string()));
    }
    let scale = 1.0 / (cfg.channels as f64).sqrt();
    let mut lat = vars.latents;
    for b in &vars.blocks {
        let q = g.linear(lat, b.w_q, b.b_q)?;
        let k = g.linear(features, b.w_k, b.b_k)?;
        let v = g.linear(features, b.w_v, b.b_v)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores)?;
        let ctx = g.matmul(attn, v)?;
        let o = g.linear(ctx, b.w_o, b.b_o)?;
        lat = g.add(lat, o)?;
        let h = g.layer_norm(lat, b.ln_g, b.ln_b, 1e-5)?;
        let h = g.linear(h, b.ffn_w1, b.ffn_b1)?;
        let h = g.gelu(h);
        let h = g.linear(h, b.ffn_w2, b.ffn_b2)?;
        lat = g.add(lat, h)?;
    }
    Ok(lat)
}
