//! In-process invariant suites behind `mmiv selftest`: oracle
//! equivalence, gradient checks, causality, zero-init identity and
//! attention normalization, with optional fault injection for exercising
//! the failure path.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::Result;
use crate::imgdec::{self, DenoiserConfig, DenoiserVars, NoiseSchedule};
use crate::mmfs::{
    apply_gated, init_mmfs_params, plan, GateVariant, MmfsConfig, MmfsVars, RefPoint,
};
use crate::mmllm::{self, ImageData, ImageKey, LLMConfig, LLMVars, StreamInput};
use crate::numcore::{gradcheck, Binding, GradCheckCfg, Graph, ParamStore, Prng, Tensor, Var};
use crate::pyramid::{ImagePyramid, PyramidVars};
use crate::sequence::{build, Element, Slot, TrainContext, Vocab};

/// Deliberate parameter corruptions applied before the affected suites
/// run; used to demonstrate that the suites actually catch bugs.
#[derive(Debug, Clone, Copy, Default)]
pub struct FaultInjection {
    /// Set every MMFS gate `alpha` to 1 instead of 0, breaking the
    /// zero-init identity.
    pub alpha_one: bool,
}

/// One suite verdict.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteOutcome {
    pub module: &'static str,
    pub id: &'static str,
    pub pass: bool,
    pub detail: String,
}

/// Run every suite whose `module.id` contains `filter` (all when empty).
pub fn run_suites(filter: &str, inject: &FaultInjection) -> Vec<SuiteOutcome> {
    let suites: Vec<(&'static str, &'static str, fn(&FaultInjection) -> (bool, String))> = vec![
        ("numcore", "gradcheck-composite", suite_numcore_gradcheck),
        ("pyramid", "bilinear-oracle", suite_bilinear_oracle),
        ("mmfs", "oracle-equivalence", suite_mmfs_oracle),
        ("mmfs", "normalization", suite_normalization),
        ("mmfs", "gradcheck", suite_mmfs_gradcheck),
        ("mmllm", "zero-init-identity", suite_llm_zero_init),
        ("mmllm", "causality", suite_causality),
        ("imgdec", "zero-init-identity", suite_decoder_zero_init),
        ("imgdec", "schedule", suite_schedule),
    ];
    suites
        .into_iter()
        .filter(|(module, id, _)| format!("{module}.{id}").contains(filter))
        .map(|(module, id, f)| {
            let (pass, detail) = f(inject);
            SuiteOutcome {
                module,
                id,
                pass,
                detail,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// shared helpers (mirrors the oracle definitions frozen into the
// acceptance tests)

fn bilin(map: &Tensor<f64>, u: f64, v: f64) -> Vec<f64> {
    let (h, w, c) = (map.shape[0], map.shape[1], map.shape[2]);
    let x = u * w as f64 - 0.5;
    let y = v * h as f64 - 0.5;
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let mut out = vec![0.0; c];
    for (dy, dx, wt) in [
        (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
        (0.0, 1.0, fx * (1.0 - fy)),
        (1.0, 0.0, (1.0 - fx) * fy),
        (1.0, 1.0, fx * fy),
    ] {
        let (xi, yi) = (x0 + dx, y0 + dy);
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            continue;
        }
        for ch in 0..c {
            out[ch] += wt * map.data[((yi as usize) * w + xi as usize) * c + ch];
        }
    }
    out
}

fn mv(w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let (dout, din) = (w.shape[0], w.shape[1]);
    (0..dout)
        .map(|o| b.data[o] + (0..din).map(|i| w.data[o * din + i] * x[i]).sum::<f64>())
        .collect()
}

fn mmfs_oracle(
    store: &ParamStore<f64>,
    cfg: &MmfsConfig,
    variant: GateVariant,
    f_q: &[f64],
    ref_pt: (f64, f64),
    m: usize,
    pyramids: &[ImagePyramid<f64>],
) -> Vec<f64> {
    let p = |n: &str| store.get(&format!("m.{n}"));
    let (l, k, c) = (cfg.levels, cfg.points, cfg.channels);
    let base_q = mv(p("w_q"), p("b_q"), f_q);
    let pos = p("pos_embed");
    let mut logits = Vec::new();
    let mut locs = Vec::new();
    for mi in 0..m {
        let q_m: Vec<f64> = (0..c).map(|i| base_q[i] + pos.data[mi * c + i]).collect();
        let offs = mv(p("w_p"), p("b_p"), &q_m);
        locs.push(
            (0..k)
                .map(|ki| (ref_pt.0 + offs[2 * ki], ref_pt.1 + offs[2 * ki + 1]))
                .collect::<Vec<_>>(),
        );
        logits.extend(mv(p("w_a"), p("b_a"), &q_m));
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let mut f_o = vec![0.0; c];
    for mi in 0..m {
        for li in 0..l {
            for ki in 0..k {
                let a = exps[(mi * l + li) * k + ki] / denom;
                let (u, v) = locs[mi][ki];
                let s = bilin(&pyramids[mi].levels[li], u, v);
                for ch in 0..c {
                    f_o[ch] += a * s[ch];
                }
            }
        }
    }
    match variant {
        GateVariant::Llm => {
            let gate = store.get("m.alpha").data[0].tanh();
            (0..c).map(|ch| f_q[ch] + gate * f_o[ch]).collect()
        }
        GateVariant::Decoder => {
            let z = mv(p("zconv.w"), p("zconv.b"), &f_o);
            (0..c).map(|ch| f_q[ch] + z[ch]).collect()
        }
    }
}

fn randomize_mmfs(store: &mut ParamStore<f64>, rng: &mut Prng) {
    for (name, scale) in [
        ("w_p", 0.03),
        ("b_p", 0.03),
        ("w_a", 0.2),
        ("b_a", 0.2),
        ("alpha", 0.2),
        ("zconv.w", 0.2),
        ("zconv.b", 0.2),
    ] {
        let full = format!("m.{name}");
        if store.contains(&full) {
            for v in store.get_mut(&full).data.iter_mut() {
                *v = rng.normal() * scale;
            }
        }
    }
}

fn random_pyramids(
    cfg: &MmfsConfig,
    count: usize,
    base: usize,
    rng: &mut Prng,
) -> Vec<ImagePyramid<f64>> {
    (0..count)
        .map(|_| ImagePyramid {
            levels: (0..cfg.levels)
                .map(|i| {
                    let h = (base >> i).max(1);
                    Tensor::from_fn(&[h, h, cfg.channels], |_| rng.normal())
                })
                .collect(),
        })
        .collect()
}

fn gradcheck_store(
    store: &ParamStore<f64>,
    build: impl Fn(&mut Graph<f64>, &ParamStore<f64>, &Binding) -> Result<Var>,
    tol: f64,
    min_coords: usize,
) -> (bool, f64) {
    let names: Vec<String> = store.names().to_vec();
    let params: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).clone()).collect();
    let report = gradcheck(
        |ps: &[Tensor<f64>]| {
            let mut s2: ParamStore<f64> = ParamStore::new();
            for (n, t) in names.iter().zip(ps) {
                s2.add(n, t.clone());
            }
            let mut g: Graph<f64> = Graph::new();
            let binding = s2.bind(&mut g);
            let loss = build(&mut g, &s2, &binding)?;
            let loss_val = g.value(loss).data[0];
            g.backward(loss)?;
            let grads = names
                .iter()
                .zip(ps)
                .map(|(n, t)| {
                    let var = binding.var(&s2, n);
                    match g.grad(var) {
                        Some(gr) => Tensor::new(t.shape.clone(), gr.to_vec()).unwrap(),
                        None => Tensor::zeros(&t.shape),
                    }
                })
                .collect();
            Ok((loss_val, grads))
        },
        &names.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
        &params,
        &GradCheckCfg {
            eps: 1e-5,
            tol,
            min_coords,
        },
    );
    match report {
        Ok(r) => (r.pass, r.max_rel()),
        Err(_) => (false, f64::INFINITY),
    }
}

fn tiny_llm(vocab: usize) -> LLMConfig {
    LLMConfig {
        channels: 8,
        layers: 2,
        heads: 2,
        ffn_mult: 2,
        vocab: Vocab { text: vocab },
        mmfs_every: 1,
        max_context: 96,
        mmfs: MmfsConfig {
            points: 2,
            max_images: 3,
            levels: 1,
            channels: 8,
        },
    }
}

fn warm_llm_mmfs(store: &mut ParamStore<f64>, rng: &mut Prng) {
    for n in store.names().to_vec() {
        if n.contains(".mmfs.w_p") || n.contains(".mmfs.b_p") {
            for v in store.get_mut(&n).data.iter_mut() {
                *v = rng.normal() * 0.02;
            }
        } else if n.contains(".mmfs.w_a") || n.ends_with(".alpha") {
            for v in store.get_mut(&n).data.iter_mut() {
                *v = rng.normal() * 0.3;
            }
        }
    }
}

fn inject_alpha(store: &mut ParamStore<f64>, inject: &FaultInjection) {
    if inject.alpha_one {
        for n in store.names().to_vec() {
            if n.ends_with(".alpha") {
                for v in store.get_mut(&n).data.iter_mut() {
                    *v = 1.0;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// suites

fn suite_numcore_gradcheck(_: &FaultInjection) -> (bool, String) {
    let mut rng = Prng::new(0x5E1F);
    let mut store: ParamStore<f64> = ParamStore::new();
    store.add("w", Tensor::from_fn(&[4, 3], |_| rng.normal()));
    store.add("b", Tensor::from_fn(&[4], |_| rng.normal()));
    store.add("x", Tensor::from_fn(&[3], |_| rng.normal()));
    let (pass, worst) = gradcheck_store(
        &store,
        |g, s, b| {
            let y = g.linear(b.var(s, "x"), b.var(s, "w"), b.var(s, "b"))?;
            let t = g.tanh(y);
            let sq = g.mul(t, t)?;
            Ok(g.sum_all(sq))
        },
        1e-6,
        64,
    );
    (pass, format!("worst rel err {worst:.2e} (tol 1e-6)"))
}

fn suite_bilinear_oracle(_: &FaultInjection) -> (bool, String) {
    let mut rng = Prng::new(0x5E2F);
    let cfg = MmfsConfig {
        points: 1,
        max_images: 1,
        levels: 1,
        channels: 3,
    };
    // one point, one level, one image: softmax weight is exactly 1 and the
    // output isolates a single bilinear read through the gate
    let mut store: ParamStore<f64> = ParamStore::new();
    init_mmfs_params(&mut store, "m", &cfg, GateVariant::Llm, &mut rng);
    store.get_mut("m.alpha").data[0] = 20.0; // tanh ≈ 1
    let pyramids = random_pyramids(&cfg, 1, 4, &mut rng);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let rp = (rng.uniform() * 1.2 - 0.1, rng.uniform() * 1.2 - 0.1);
        let fq = vec![0.0; cfg.channels];
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let vars = MmfsVars::bind(&store, &binding, "m", GateVariant::Llm);
        let f_q = g.constant(Tensor::new(vec![cfg.channels], fq).unwrap());
        let pv = PyramidVars::from_values(&mut g, &pyramids[0]);
        let out = apply_gated(
            &mut g,
            f_q,
            RefPoint::new(rp.0.clamp(0.0, 1.0), rp.1.clamp(0.0, 1.0)).unwrap(),
            &[0],
            &[&pv],
            &vars,
            &cfg,
        )
        .unwrap();
        let got = g.value(out).data.clone();
        let want = bilin(
            &pyramids[0].levels[0],
            rp.0.clamp(0.0, 1.0),
            rp.1.clamp(0.0, 1.0),
        );
        let gate = store.get("m.alpha").data[0].tanh();
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - gate * b).abs());
        }
    }
    (worst < 1e-9, format!("worst abs diff {worst:.2e} over 50 points"))
}

fn suite_mmfs_oracle(_: &FaultInjection) -> (bool, String) {
    let mut rng = Prng::new(0x5E3F);
    let mut configs = 0usize;
    let mut worst: f64 = 0.0;
    for &m in &[1usize, 2] {
        for &l in &[1usize, 2] {
            for &k in &[1usize, 3] {
                for variant in [GateVariant::Llm, GateVariant::Decoder] {
                    let cfg = MmfsConfig {
                        points: k,
                        max_images: 3,
                        levels: l,
                        channels: 5,
                    };
                    let mut store: ParamStore<f64> = ParamStore::new();
                    init_mmfs_params(&mut store, "m", &cfg, variant, &mut rng);
                    randomize_mmfs(&mut store, &mut rng);
                    let pyramids = random_pyramids(&cfg, m, 4, &mut rng);
                    let fq: Vec<f64> = (0..cfg.channels).map(|_| rng.normal()).collect();
                    let rp = (0.3 + 0.4 * rng.uniform(), 0.3 + 0.4 * rng.uniform());
                    let mut g = Graph::new();
                    let binding = store.bind(&mut g);
                    let vars = MmfsVars::bind(&store, &binding, "m", variant);
                    let f_q = g.constant(Tensor::new(vec![cfg.channels], fq.clone()).unwrap());
                    let pvs: Vec<PyramidVars> = pyramids
                        .iter()
                        .map(|p| PyramidVars::from_values(&mut g, p))
                        .collect();
                    let refs: Vec<&PyramidVars> = pvs.iter().collect();
                    let visible: Vec<usize> = (0..m).collect();
                    let out = apply_gated(
                        &mut g,
                        f_q,
                        RefPoint::new(rp.0, rp.1).unwrap(),
                        &visible,
                        &refs,
                        &vars,
                        &cfg,
                    )
                    .unwrap();
                    let got = g.value(out).data.clone();
                    let want = mmfs_oracle(&store, &cfg, variant, &fq, rp, m, &pyramids);
                    for (a, b) in got.iter().zip(&want) {
                        worst = worst.max((a - b).abs());
                    }
                    configs += 1;
                }
            }
        }
    }
    (
        worst < 1e-10,
        format!("{configs} configs, worst abs diff {worst:.2e}"),
    )
}

fn suite_normalization(_: &FaultInjection) -> (bool, String) {
    let mut rng = Prng::new(0x5E4F);
    let cfg = MmfsConfig {
        points: 2,
        max_images: 3,
        levels: 2,
        channels: 6,
    };
    let mut store: ParamStore<f64> = ParamStore::new();
    init_mmfs_params(&mut store, "m", &cfg, GateVariant::Llm, &mut rng);
    randomize_mmfs(&mut store, &mut rng);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let vars = MmfsVars::bind(&store, &binding, "m", GateVariant::Llm);
        let f_q = g.constant(Tensor::from_fn(&[cfg.channels], |_| rng.normal()));
        let m = 1 + rng.below(3);
        let visible: Vec<usize> = (0..m).collect();
        let p = plan(&mut g, f_q, RefPoint::CENTER, &visible, &vars.core, &cfg).unwrap();
        let sp = p.materialize(&g, &cfg);
        let total: f64 = sp.a_q.data.iter().sum();
        worst = worst.max((total - 1.0).abs());
    }
    (
        worst < 1e-6,
        format!("worst |sum - 1| = {worst:.2e} over 500 queries"),
    )
}

fn suite_mmfs_gradcheck(_: &FaultInjection) -> (bool, String) {
    let mut rng = Prng::new(0x5E5F);
    let cfg = MmfsConfig {
        points: 2,
        max_images: 2,
        levels: 2,
        channels: 3,
    };
    let mut all = true;
    let mut worst: f64 = 0.0;
    for variant in [GateVariant::Llm, GateVariant::Decoder] {
        let mut store: ParamStore<f64> = ParamStore::new();
        init_mmfs_params(&mut store, "m", &cfg, variant, &mut rng);
        randomize_mmfs(&mut store, &mut rng);
        for (i, p) in random_pyramids(&cfg, 2, 4, &mut rng).iter().enumerate() {
            for (li, lvl) in p.levels.iter().enumerate() {
                store.add(&format!("pyr{i}.l{li}"), lvl.clone());
            }
        }
        store.add("f_q", Tensor::from_fn(&[cfg.channels], |_| rng.normal()));
        let cfg2 = cfg.clone();
        let (pass, rel) = gradcheck_store(
            &store,
            move |g, s, b| {
                let vars = MmfsVars::bind(s, b, "m", variant);
                let pv0 = PyramidVars {
                    levels: vec![b.var(s, "pyr0.l0"), b.var(s, "pyr0.l1")],
                };
                let pv1 = PyramidVars {
                    levels: vec![b.var(s, "pyr1.l0"), b.var(s, "pyr1.l1")],
                };
                let f_q = b.var(s, "f_q");
                let out = apply_gated(
                    g,
                    f_q,
                    RefPoint::new(0.4, 0.6)?,
                    &[0, 1],
                    &[&pv0, &pv1],
                    &vars,
                    &cfg2,
                )?;
                let mix = g.constant(Tensor::from_fn(&[cfg2.channels], |i| 1.0 + i as f64 * 0.5));
                let prod = g.mul(out, mix)?;
                Ok(g.sum_all(prod))
            },
            1e-4,
            16,
        );
        all &= pass;
        worst = worst.max(rel);
    }
    (all, format!("both variants, worst rel err {worst:.2e}"))
}

fn suite_llm_zero_init(inject: &FaultInjection) -> (bool, String) {
    let mut rng = Prng::new(0x5E6F);
    let with = tiny_llm(7);
    let without = LLMConfig {
        mmfs_every: with.layers + 1,
        ..with.clone()
    };
    let mut store: ParamStore<f64> = ParamStore::new();
    mmllm::init_llm_params(&mut store, "llm", &with, &mut rng);
    inject_alpha(&mut store, inject);
    let seq = build(
        &[Element::Text(vec![1]), Element::Image(0), Element::Text(vec![2])],
        2,
    )
    .unwrap();
    let input = StreamInput::from_context(&TrainContext { samples: vec![seq] });
    let run = |cfg: &LLMConfig| {
        let mut g: Graph<f64> = Graph::new();
        let binding = store.bind(&mut g);
        let vars = LLMVars::bind(&store, &binding, "llm", cfg);
        let mut r2 = Prng::new(99);
        let mut images: HashMap<ImageKey, ImageData> = HashMap::new();
        let vt = g.constant(Tensor::from_fn(&[2, 8], |_| r2.normal() * 0.2));
        let lvl = g.constant(Tensor::from_fn(&[2, 2, 8], |_| r2.normal()));
        images.insert(
            (0, 0),
            ImageData {
                visual_tokens: vt,
                pyramid: PyramidVars { levels: vec![lvl] },
            },
        );
        let fwd = mmllm::forward(&mut g, &input, &images, &vars, cfg).unwrap();
        g.value(fwd.logits).data.clone()
    };
    let exact = run(&with) == run(&without);
    (
        exact,
        format!("mmfs-equipped vs mmfs-free logits bitwise equal: {exact}"),
    )
}

fn suite_causality(_: &FaultInjection) -> (bool, String) {
    let mut rng = Prng::new(0x5E7F);
    let cfg = tiny_llm(9);
    let mut store: ParamStore<f64> = ParamStore::new();
    mmllm::init_llm_params(&mut store, "llm", &cfg, &mut rng);
    warm_llm_mmfs(&mut store, &mut rng);
    let mut layouts = 0usize;
    for _ in 0..10 {
        let n_imgs = 1 + rng.below(2);
        let mut elements = vec![Element::Text(vec![rng.below(9)])];
        for id in 0..n_imgs {
            elements.push(Element::Image(id));
            elements.push(Element::Text(vec![rng.below(9), rng.below(9)]));
        }
        let ctx = TrainContext {
            samples: vec![build(&elements, 2).unwrap()],
        };
        let input = StreamInput::from_context(&ctx);
        let mut base: HashMap<ImageKey, (Tensor<f64>, Tensor<f64>)> = HashMap::new();
        for img in 0..n_imgs {
            base.insert(
                (0, img),
                (
                    Tensor::from_fn(&[2, 8], |_| rng.normal() * 0.2),
                    Tensor::from_fn(&[2, 2, 8], |_| rng.normal()),
                ),
            );
        }
        let run = |base: &HashMap<ImageKey, (Tensor<f64>, Tensor<f64>)>| {
            let mut g: Graph<f64> = Graph::new();
            let binding = store.bind(&mut g);
            let vars = LLMVars::bind(&store, &binding, "llm", &cfg);
            let mut images: HashMap<ImageKey, ImageData> = HashMap::new();
            for (key, (vt, lvl)) in base {
                images.insert(
                    *key,
                    ImageData {
                        visual_tokens: g.constant(vt.clone()),
                        pyramid: PyramidVars {
                            levels: vec![g.constant(lvl.clone())],
                        },
                    },
                );
            }
            let fwd = mmllm::forward(&mut g, &input, &images, &vars, &cfg).unwrap();
            g.value(fwd.logits).data.clone()
        };
        let before = run(&base);
        let target = (0usize, rng.below(n_imgs));
        let entry = base.get_mut(&target).unwrap();
        for v in entry.0.data.iter_mut() {
            *v += 1.0;
        }
        for v in entry.1.data.iter_mut() {
            *v += 1.0;
        }
        let after = run(&base);
        let first_slot = input
            .slots
            .iter()
            .position(|s| matches!(s, Slot::ImgSlot { image, index: 0 } if *image == target.1))
            .unwrap();
        let v = cfg.vocab.total();
        for p in 0..input.slots.len() {
            let same = before[p * v..(p + 1) * v] == after[p * v..(p + 1) * v];
            if p < first_slot && !same {
                return (false, format!("future image leaked into position {p}"));
            }
        }
        if before == after {
            return (false, "perturbation had no effect".to_string());
        }
        layouts += 1;
    }
    (true, format!("{layouts} layouts, bitwise isolation"))
}

fn suite_decoder_zero_init(_: &FaultInjection) -> (bool, String) {
    let mut rng = Prng::new(0x5E8F);
    let dcfg = DenoiserConfig {
        height: 8,
        width: 8,
        img_channels: 1,
        base: 4,
        depth: 1,
        cond_tokens: 2,
        channels: 8,
        mmfs: MmfsConfig {
            points: 2,
            max_images: 2,
            levels: 1,
            channels: 8,
        },
    };
    let sched = NoiseSchedule::default_toy();
    let mut dstore: ParamStore<f64> = ParamStore::new();
    imgdec::init_denoiser_params(&mut dstore, "dec", &dcfg, &mut rng);
    let x_t = Tensor::from_fn(&[8, 8, 1], |_| rng.normal());
    let cond = Tensor::from_fn(&[2, 8], |_| rng.normal());
    let pyr = ImagePyramid::<f64> {
        levels: vec![Tensor::from_fn(&[4, 4, 8], |_| rng.normal())],
    };
    let run_dec = |pyrs: &[&ImagePyramid<f64>]| {
        let mut g: Graph<f64> = Graph::new();
        let binding = dstore.bind(&mut g);
        let vars = DenoiserVars::new(&dstore, &binding, "dec");
        let x_v = g.constant(x_t.clone());
        let c_v = g.constant(cond.clone());
        let pvs: Vec<PyramidVars> = pyrs
            .iter()
            .map(|p| PyramidVars::from_values(&mut g, p))
            .collect();
        let refs: Vec<&PyramidVars> = pvs.iter().collect();
        let out = imgdec::denoise(&mut g, x_v, 5, c_v, &refs, &vars, &dcfg, &sched).unwrap();
        g.value(out).data.clone()
    };
    let exact = run_dec(&[&pyr]) == run_dec(&[]);
    (
        exact,
        format!("with vs without pyramids bitwise equal: {exact}"),
    )
}

fn suite_schedule(_: &FaultInjection) -> (bool, String) {
    let sched = NoiseSchedule::default_toy();
    let t = sched.steps();
    let mut prev = 1.0f64;
    let mut monotone = true;
    for &ab in &sched.alpha_bars {
        monotone &= ab < prev && ab > 0.0;
        prev = ab;
    }
    (
        monotone,
        format!("alpha_bar strictly decreasing over {t} steps, final {prev:.3}"),
    )
}
