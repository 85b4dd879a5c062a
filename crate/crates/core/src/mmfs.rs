//! Multi-Modal Feature Synchronizer: per-query sampling-plan prediction over
//! up to `max_images` reference images, a joint softmax across all
//! image/level/point logits, multi-scale deformable sampling and a gated
//! residual application.
//!
//! For a query feature `f_q` and visible images ranked by recency
//! (rank 0 = most recent):
//!
//! ```text
//! q(m)    = W_q f_q + b_q + PosEmbed(rank m)
//! offs(m) = W_p q(m) + b_p                   (K offsets, shared across levels)
//! loc(m)  = ref + offs(m)
//! A       = softmax over all M*L*K logits of W_A q(m) + b_A
//! f_o     = sum_{m,l,k} A[m,l,k] * bilinear(pyramid_m.level_l, loc(m)[k])
//! ```
//!
//! Offsets and attention projections are zero-initialized, and the residual
//! gate (`tanh(alpha)` for the LLM variant, a zero-initialized 1x1
//! convolution for the decoder variant) starts at zero, so a fresh module is
//! an exact no-op that attends uniformly at the reference point.

use crate::error::{Error, Result};
use crate::numcore::{Binding, Graph, ParamStore, Prng, Real, Tensor, Var};
use crate::pyramid::PyramidVars;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GateVariant {
    Llm,
    Decoder,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct MmfsConfig {
    /// Sampling points per feature map (K).
    pub points: usize,
    /// Maximum reference images (M-bar).
    pub max_images: usize,
    /// Pyramid levels (L).
    pub levels: usize,
    /// Channel width (C).
    pub channels: usize,
}

impl MmfsConfig {
    pub fn plan_len(&self) -> usize {
        self.levels * self.points
    }
}

/// Normalized reference point, components in `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct RefPoint {
    pub u: f64,
    pub v: f64,
}

impl RefPoint {
    pub const CENTER: RefPoint = RefPoint { u: 0.5, v: 0.5 };

    pub fn new(u: f64, v: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return Err(Error::Dimension(format!(
                "reference point ({u}, {v}) outside [0,1]^2"
            )));
        }
        Ok(RefPoint { u, v })
    }
}

/// Plan-prediction variables (shared by both gate variants).
pub struct MmfsCoreVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_p: Var,
    pub b_p: Var,
    pub w_a: Var,
    pub b_a: Var,
    pub pos_embed: Var,
}

/// Graph variables of one synchronizer instance.
pub struct MmfsVars {
    pub core: MmfsCoreVars,
    /// `alpha` scalar (LLM variant) or 1x1 conv weight/bias (decoder).
    pub gate: GateVars,
}

pub enum GateVars {
    Llm { alpha: Var },
    Decoder { w: Var, b: Var },
}

/// Initialize the plan-prediction parameters only (no residual gate);
/// callers that embed the module in a larger block own the gate themselves.
pub fn init_mmfs_core_params<F: Real>(
    store: &mut ParamStore<F>,
    prefix: &str,
    cfg: &MmfsConfig,
    rng: &mut Prng,
) {
    let c = cfg.channels;
    let mut r = rng.split_str(prefix);
    let sigma = 1.0 / (c as f64).sqrt();
    store.add(
        &format!("{prefix}.w_q"),
        Tensor::from_fn(&[c, c], |_| F::from_f64(r.normal() * sigma)),
    );
    store.add(&format!("{prefix}.b_q"), Tensor::zeros(&[c]));
    // zero-init: locations start at the reference point, weights uniform
    store.add(&format!("{prefix}.w_p"), Tensor::zeros(&[2 * cfg.points, c]));
    store.add(&format!("{prefix}.b_p"), Tensor::zeros(&[2 * cfg.points]));
    store.add(&format!("{prefix}.w_a"), Tensor::zeros(&[cfg.plan_len(), c]));
    store.add(&format!("{prefix}.b_a"), Tensor::zeros(&[cfg.plan_len()]));
    store.add(
        &format!("{prefix}.pos_embed"),
        Tensor::from_fn(&[cfg.max_images, c], |_| F::from_f64(r.normal() * 0.02)),
    );
}

pub fn init_mmfs_params<F: Real>(
    store: &mut ParamStore<F>,
    prefix: &str,
    cfg: &MmfsConfig,
    variant: GateVariant,
    rng: &mut Prng,
) {
    let c = cfg.channels;
    init_mmfs_core_params(store, prefix, cfg, rng);
    match variant {
        GateVariant::Llm => {
            store.add(&format!("{prefix}.alpha"), Tensor::zeros(&[1]));
        }
        GateVariant::Decoder => {
            store.add(&format!("{prefix}.zconv.w"), Tensor::zeros(&[c, c]));
            store.add(&format!("{prefix}.zconv.b"), Tensor::zeros(&[c]));
        }
    }
}

impl MmfsCoreVars {
    pub fn bind<F: Real>(store: &ParamStore<F>, binding: &Binding, prefix: &str) -> Self {
        let v = |n: &str| binding.var(store, &format!("{prefix}.{n}"));
        MmfsCoreVars {
            w_q: v("w_q"),
            b_q: v("b_q"),
            w_p: v("w_p"),
            b_p: v("b_p"),
            w_a: v("w_a"),
            b_a: v("b_a"),
            pos_embed: v("pos_embed"),
        }
    }
}

impl MmfsVars {
    pub fn bind<F: Real>(
        store: &ParamStore<F>,
        binding: &Binding,
        prefix: &str,
        variant: GateVariant,
    ) -> Self {
        let v = |n: &str| binding.var(store, &format!("{prefix}.{n}"));
        MmfsVars {
            core: MmfsCoreVars::bind(store, binding, prefix),
            gate: match variant {
                GateVariant::Llm => GateVars::Llm { alpha: v("alpha") },
                GateVariant::Decoder => GateVars::Decoder {
                    w: v("zconv.w"),
                    b: v("zconv.b"),
                },
            },
        }
    }
}

/// Graph-resident sampling plan for one query.
pub struct Plan {
    /// Per visible image: `[K, 2]` normalized sampling locations, shared
    /// across levels.
    pub locations: Vec<Var>,
    /// `[1, M*L*K]` attention weights (joint softmax, sums to one).
    pub weights: Var,
    /// Visible image ids, most recent first (rank order).
    pub visible: Vec<usize>,
}

/// Materialized sampling plan (for dumps and oracle comparison).
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    /// `(M, L, K, 2)` locations.
    pub p_q: Tensor<f64>,
    /// `(M, L, K)` weights.
    pub a_q: Tensor<f64>,
    pub visible: Vec<usize>,
}

impl Plan {
    pub fn materialize<F: Real>(&self, g: &Graph<F>, cfg: &MmfsConfig) -> SamplingPlan {
        let m = self.visible.len();
        let (l, k) = (cfg.levels, cfg.points);
        let mut p_q = Tensor::zeros(&[m, l, k, 2]);
        for (mi, loc) in self.locations.iter().enumerate() {
            let t = g.value(*loc);
            for li in 0..l {
                for ki in 0..k {
                    for d in 0..2 {
                        p_q.data[((mi * l + li) * k + ki) * 2 + d] = t.data[ki * 2 + d].to_f64();
                    }
                }
            }
        }
        let w = g.value(self.weights);
        let a_q = Tensor::new(
            vec![m, l, k],
            w.data.iter().map(|v| v.to_f64()).collect(),
        )
        .unwrap();
        SamplingPlan {
            p_q,
            a_q,
            visible: self.visible.clone(),
        }
    }
}

/// Predict the sampling plan for one query.
///
/// `visible` must be ordered most recent first; its ranks index `PosEmbed`.
pub fn plan<F: Real>(
    g: &mut Graph<F>,
    f_q: Var,
    ref_pt: RefPoint,
    visible: &[usize],
    vars: &MmfsCoreVars,
    cfg: &MmfsConfig,
) -> Result<Plan> {
    if visible.is_empty() {
        return Err(Error::EmptyInput("plan: no visible images".to_string()));
    }
    if visible.len() > cfg.max_images {
        return Err(Error::Capacity {
            got: visible.len(),
            max: cfg.max_images,
        });
    }
    let k = cfg.points;
    let fq_row = g.reshape(f_q, vec![1, cfg.channels])?;
    let base_q = g.linear(fq_row, vars.w_q, vars.b_q)?;
    let ref_t = g.constant(Tensor::from_fn(&[k, 2], |i| {
        F::from_f64(if i % 2 == 0 { ref_pt.u } else { ref_pt.v })
    }));
    let mut locations = Vec::with_capacity(visible.len());
    let mut logit_parts = Vec::with_capacity(visible.len());
    for rank in 0..visible.len() {
        let pos = g.gather_rows(vars.pos_embed, &[rank])?;
        let q_m = g.add(base_q, pos)?;
        let offs = g.linear(q_m, vars.w_p, vars.b_p)?;
        let offs = g.reshape(offs, vec![k, 2])?;
        locations.push(g.add(ref_t, offs)?);
        logit_parts.push(g.linear(q_m, vars.w_a, vars.b_a)?);
    }
    let logits = g.concat_cols(&logit_parts)?;
    let weights = g.softmax(logits)?;
    Ok(Plan {
        locations,
        weights,
        visible: visible.to_vec(),
    })
}

/// Weighted multi-scale deformable sampling:
/// `f_o = sum A[m,l,k] * bilinear(pyramid_m.level_l, loc_m[k])`.
///
/// `pyramids` are aligned with `plan.visible`.
pub fn deform_attn<F: Real>(
    g: &mut Graph<F>,
    pyramids: &[&PyramidVars],
    plan: &Plan,
    cfg: &MmfsConfig,
) -> Result<Var> {
    if pyramids.len() != plan.visible.len() {
        return Err(Error::Dimension(format!(
            "deform_attn: {} pyramids for {} visible images",
            pyramids.len(),
            plan.visible.len()
        )));
    }
    let mut rows = Vec::with_capacity(plan.visible.len() * cfg.levels);
    for (pyr, loc) in pyramids.iter().zip(&plan.locations) {
        if pyr.levels.len() != cfg.levels {
            return Err(Error::Dimension(format!(
                "deform_attn: pyramid has {} levels, expected {}",
                pyr.levels.len(),
                cfg.levels
            )));
        }
        for &lvl in &pyr.levels {
            if g.value(lvl).shape[2] != cfg.channels {
                return Err(Error::Dimension("deform_attn: channel mismatch".to_string()));
            }
            rows.push(g.bilinear_sample(lvl, *loc)?);
        }
    }
    let stacked = g.concat_rows(&rows)?;
    let out = g.matmul(plan.weights, stacked)?;
    g.reshape(out, vec![cfg.channels])
}

/// Plan, sample and apply the gated residual. Empty visibility returns `f_q`
/// unchanged (bit-exact pass-through).
pub fn apply_gated<F: Real>(
    g: &mut Graph<F>,
    f_q: Var,
    ref_pt: RefPoint,
    visible: &[usize],
    pyramids: &[&PyramidVars],
    vars: &MmfsVars,
    cfg: &MmfsConfig,
) -> Result<Var> {
    if visible.is_empty() {
        return Ok(f_q);
    }
    let p = plan(g, f_q, ref_pt, visible, &vars.core, cfg)?;
    let f_o = deform_attn(g, pyramids, &p, cfg)?;
    let shaped = g.reshape(f_q, vec![cfg.channels])?;
    match &vars.gate {
        GateVars::Llm { alpha } => {
            let t = g.tanh(*alpha);
            let gated = g.scale_by(f_o, t)?;
            g.add(shaped, gated)
        }
        GateVars::Decoder { w, b } => {
            let z = g.linear(f_o, *w, *b)?;
            g.add(shaped, z)
        }
    }
}
