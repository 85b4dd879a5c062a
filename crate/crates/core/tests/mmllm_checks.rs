//! Independent straight-line oracle, causality and gradient checks for the
//! interleaved causal transformer.

use std::collections::HashMap;

use mmiv::mmfs::MmfsConfig;
use mmiv::mmllm::{
    forward, init_llm_params, ntp_loss, ImageData, ImageKey, LLMConfig, LLMVars, StreamInput,
};
use mmiv::numcore::{gradcheck, GradCheckCfg, Graph, ParamStore, Prng, Tensor};
use mmiv::pyramid::PyramidVars;
use mmiv::sequence::{build, ntp_targets, Element, Slot, TrainContext, Vocab};

fn toy_cfg(layers: usize, mmfs_every: usize, c: usize) -> LLMConfig {
    LLMConfig {
        channels: c,
        layers,
        heads: 2,
        ffn_mult: 2,
        vocab: Vocab { text: 11 },
        mmfs_every,
        max_context: 48,
        mmfs: MmfsConfig {
            points: 2,
            max_images: 3,
            levels: 2,
            channels: c,
        },
    }
}

/// Plain-tensor image inputs: (visual tokens [N, C], pyramid levels).
type RawImage = (Tensor<f64>, Vec<Tensor<f64>>);

fn random_images(cfg: &LLMConfig, ids: &[usize], n_visual: usize, seed: u64) -> HashMap<ImageKey, RawImage> {
    let mut rng = Prng::new(seed);
    ids.iter()
        .map(|&id| {
            let toks = Tensor::from_fn(&[n_visual, cfg.channels], |_| rng.normal() * 0.3);
            let levels = (0..cfg.mmfs.levels)
                .map(|i| Tensor::from_fn(&[4 >> i, 4 >> i, cfg.channels], |_| rng.normal()))
                .collect();
            ((0usize, id), (toks, levels))
        })
        .collect()
}

fn run_graph(
    store: &ParamStore<f64>,
    cfg: &LLMConfig,
    input: &StreamInput,
    raw: &HashMap<ImageKey, RawImage>,
) -> (Vec<f64>, Vec<usize>) {
    let mut g = Graph::new();
    let binding = store.bind(&mut g);
    let vars = LLMVars::bind(store, &binding, "llm", cfg);
    let mut images = HashMap::new();
    for (key, (toks, levels)) in raw {
        let visual_tokens = g.constant(toks.clone());
        let pyramid = PyramidVars {
            levels: levels.iter().map(|l| g.constant(l.clone())).collect(),
        };
        images.insert(
            *key,
            ImageData {
                visual_tokens,
                pyramid,
            },
        );
    }
    let out = forward(&mut g, input, &images, &vars, cfg).unwrap();
    let t = g.value(out.logits);
    (t.data.clone(), t.shape.clone())
}

// ---- straight-line oracle -------------------------------------------------

fn mv(w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let (dout, din) = (w.shape[0], w.shape[1]);
    (0..dout)
        .map(|o| b.data[o] + (0..din).map(|i| w.data[o * din + i] * x[i]).sum::<f64>())
        .collect()
}

fn ln(x: &[f64], g: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| g.data[i] * (v - mean) / (var + 1e-5).sqrt() + b.data[i])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh())
}

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

fn oracle_forward(
    store: &ParamStore<f64>,
    cfg: &LLMConfig,
    input: &StreamInput,
    raw: &HashMap<ImageKey, RawImage>,
) -> Vec<Vec<f64>> {
    let c = cfg.channels;
    let p = |n: String| store.get(&n);
    let emb = p("llm.emb".to_string());
    let pos = p("llm.pos".to_string());
    let t_len = input.slots.len();
    let mut x: Vec<Vec<f64>> = input
        .slots
        .iter()
        .enumerate()
        .map(|(pi, slot)| {
            let base: Vec<f64> = match *slot {
                Slot::TextTok(t) => emb.data[t * c..(t + 1) * c].to_vec(),
                Slot::Bos => emb.data[cfg.vocab.bos() * c..][..c].to_vec(),
                Slot::Eos => emb.data[cfg.vocab.eos() * c..][..c].to_vec(),
                Slot::Boi => emb.data[cfg.vocab.boi() * c..][..c].to_vec(),
                Slot::ImgSlot { image, index } => {
                    let (toks, _) = &raw[&(input.segments[pi], image)];
                    toks.data[index * c..(index + 1) * c].to_vec()
                }
            };
            base.iter()
                .enumerate()
                .map(|(i, v)| v + pos.data[pi * c + i])
                .collect()
        })
        .collect();

    let dh = c / cfg.heads;
    for l in 0..cfg.layers {
        let b = |n: &str| store.get(&format!("llm.l{l}.{n}"));
        let h: Vec<Vec<f64>> = x.iter().map(|r| ln(r, b("ln1.g"), b("ln1.b"))).collect();
        let qs: Vec<Vec<f64>> = h.iter().map(|r| mv(b("w_q"), b("b_q"), r)).collect();
        let ks: Vec<Vec<f64>> = h.iter().map(|r| mv(b("w_k"), b("b_k"), r)).collect();
        let vs: Vec<Vec<f64>> = h.iter().map(|r| mv(b("w_v"), b("b_v"), r)).collect();
        for pi in 0..t_len {
            let mut ctx = vec![0.0; c];
            for hd in 0..cfg.heads {
                let cols = hd * dh..(hd + 1) * dh;
                let logits: Vec<(usize, f64)> = (0..=pi)
                    .filter(|&qi| input.segments[qi] == input.segments[pi])
                    .map(|qi| {
                        let s: f64 = cols
                            .clone()
                            .map(|d| qs[pi][d] * ks[qi][d])
                            .sum::<f64>()
                            / (dh as f64).sqrt();
                        (qi, s)
                    })
                    .collect();
                let mx = logits.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = logits.iter().map(|(_, s)| (s - mx).exp()).sum();
                for (qi, s) in &logits {
                    let w = (s - mx).exp() / denom;
                    for d in cols.clone() {
                        ctx[d] += w * vs[*qi][d];
                    }
                }
            }
            let o = mv(b("w_o"), b("b_o"), &ctx);
            for d in 0..c {
                x[pi][d] += o[d];
            }
        }

        if cfg.has_mmfs(l) {
            let m = |n: &str| store.get(&format!("llm.l{l}.mmfs.{n}"));
            for pi in 0..t_len {
                let vis = &input.visible[pi];
                if vis.is_empty() {
                    continue;
                }
                let recent: Vec<ImageKey> = vis
                    .iter()
                    .rev()
                    .take(cfg.mmfs.max_images)
                    .copied()
                    .collect();
                let base_q = mv(m("w_q"), m("b_q"), &x[pi]);
                let pe = m("pos_embed");
                let mut logits = Vec::new();
                let mut locs = Vec::new();
                for (rank, _) in recent.iter().enumerate() {
                    let q_m: Vec<f64> =
                        (0..c).map(|i| base_q[i] + pe.data[rank * c + i]).collect();
                    let offs = mv(m("w_p"), m("b_p"), &q_m);
                    locs.push(
                        (0..cfg.mmfs.points)
                            .map(|ki| (0.5 + offs[2 * ki], 0.5 + offs[2 * ki + 1]))
                            .collect::<Vec<_>>(),
                    );
                    logits.extend(mv(m("w_a"), m("b_a"), &q_m));
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
                let denom: f64 = exps.iter().sum();
                let mut f_o = vec![0.0; c];
                for (mi, key) in recent.iter().enumerate() {
                    let (_, levels) = &raw[key];
                    for li in 0..cfg.mmfs.levels {
                        for ki in 0..cfg.mmfs.points {
                            let a = exps[(mi * cfg.mmfs.levels + li) * cfg.mmfs.points + ki]
                                / denom;
                            let (u, v) = locs[mi][ki];
                            let s = bilin(&levels[li], u, v);
                            for ch in 0..c {
                                f_o[ch] += a * s[ch];
                            }
                        }
                    }
                }
                let gate = m("alpha").data[0].tanh();
                for ch in 0..c {
                    x[pi][ch] += gate * f_o[ch];
                }
            }
        }

        for pi in 0..t_len {
            let n = ln(&x[pi], b("ln2.g"), b("ln2.b"));
            let h1: Vec<f64> = mv(b("ffn.w1"), b("ffn.b1"), &n)
                .into_iter()
                .map(gelu)
                .collect();
            let h2 = mv(b("ffn.w2"), b("ffn.b2"), &h1);
            for d in 0..c {
                x[pi][d] += h2[d];
            }
        }
    }

    let w_out = p("llm.w_out".to_string());
    x.iter()
        .map(|r| {
            let hdn = ln(r, p("llm.lnf.g".to_string()), p("llm.lnf.b".to_string()));
            mv(w_out, &Tensor::zeros(&[w_out.shape[0]]), &hdn)
        })
        .collect()
}

fn perturb_mmfs(store: &mut ParamStore<f64>, cfg: &LLMConfig, rng: &mut Prng) {
    // break the zero-init so the sampling path actually contributes
    for l in 0..cfg.layers {
        if !cfg.has_mmfs(l) {
            continue;
        }
        for (n, scale) in [("w_p", 0.02), ("b_p", 0.02), ("w_a", 0.3), ("b_a", 0.3), ("alpha", 0.5)] {
            let t = store.get_mut(&format!("llm.l{l}.mmfs.{n}"));
            for v in t.data.iter_mut() {
                *v = rng.normal() * scale;
            }
        }
    }
}

fn sample_input(n_visual: usize) -> (StreamInput, Vec<usize>) {
    let seq = build(
        &[
            Element::Text(vec![1, 2]),
            Element::Image(0),
            Element::Text(vec![3]),
            Element::Image(1),
            Element::Text(vec![4]),
        ],
        n_visual,
    )
    .unwrap();
    let ctx = TrainContext { samples: vec![seq] };
    (StreamInput::from_context(&ctx), vec![0, 1])
}

#[test]
fn two_layer_forward_matches_oracle() {
    let cfg = toy_cfg(2, 2, 8);
    let mut store: ParamStore<f64> = ParamStore::new();
    init_llm_params(&mut store, "llm", &cfg, &mut Prng::new(21));
    perturb_mmfs(&mut store, &cfg, &mut Prng::new(22));
    let (input, ids) = sample_input(2);
    let raw = random_images(&cfg, &ids, 2, 23);
    let (got, shape) = run_graph(&store, &cfg, &input, &raw);
    assert_eq!(shape, vec![input.slots.len(), cfg.vocab.total()]);
    let want = oracle_forward(&store, &cfg, &input, &raw);
    let v = cfg.vocab.total();
    for (pi, row) in want.iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            let a = got[pi * v + j];
            assert!((a - w).abs() < 1e-8, "pos {pi} logit {j}: {a} vs {w}");
        }
    }
}

#[test]
fn token_causality_is_bitwise() {
    let cfg = toy_cfg(2, 2, 8);
    let mut store: ParamStore<f64> = ParamStore::new();
    init_llm_params(&mut store, "llm", &cfg, &mut Prng::new(31));
    perturb_mmfs(&mut store, &cfg, &mut Prng::new(32));
    let (input, ids) = sample_input(2);
    let raw = random_images(&cfg, &ids, 2, 33);
    let (base, shape) = run_graph(&store, &cfg, &input, &raw);
    let v = shape[1];
    // flip each text token in turn; logits strictly before it must not move
    for (p, slot) in input.slots.iter().enumerate() {
        if let Slot::TextTok(t) = slot {
            let mut altered = input.slots.clone();
            altered[p] = Slot::TextTok((t + 1) % cfg.vocab.text);
            let altered_input = StreamInput {
                slots: altered,
                segments: input.segments.clone(),
                visible: input.visible.clone(),
            };
            let (out, _) = run_graph(&store, &cfg, &altered_input, &raw);
            assert_eq!(&out[..p * v], &base[..p * v], "leak before position {p}");
            assert_ne!(&out[p * v..], &base[p * v..]);
        }
    }
}

#[test]
fn packed_samples_are_isolated_bitwise() {
    let cfg = toy_cfg(2, 2, 8);
    let mut store: ParamStore<f64> = ParamStore::new();
    init_llm_params(&mut store, "llm", &cfg, &mut Prng::new(41));
    perturb_mmfs(&mut store, &cfg, &mut Prng::new(42));
    let sample_a = build(&[Element::Text(vec![1]), Element::Image(0)], 2).unwrap();
    let sample_b = build(&[Element::Text(vec![2, 3])], 2).unwrap();
    let len_a = sample_a.len();
    let ctx = TrainContext {
        samples: vec![sample_a, sample_b],
    };
    let input = StreamInput::from_context(&ctx);
    let raw = random_images(&cfg, &[0], 2, 43);
    let (base, shape) = run_graph(&store, &cfg, &input, &raw);
    let v = shape[1];
    // perturb sample A's image: sample B's logits must be bit-identical
    let mut raw2 = raw.clone();
    for lvl in raw2.get_mut(&(0, 0)).unwrap().1.iter_mut() {
        for x in lvl.data.iter_mut() {
            *x += 1.0;
        }
    }
    for t in raw2.get_mut(&(0, 0)).unwrap().0.data.iter_mut() {
        *t += 1.0;
    }
    let (out, _) = run_graph(&store, &cfg, &input, &raw2);
    assert_eq!(&out[len_a * v..], &base[len_a * v..]);
    assert_ne!(&out[..len_a * v], &base[..len_a * v]);
}

#[test]
fn image_causality_follows_visibility() {
    let cfg = toy_cfg(2, 2, 8);
    let mut store: ParamStore<f64> = ParamStore::new();
    init_llm_params(&mut store, "llm", &cfg, &mut Prng::new(51));
    perturb_mmfs(&mut store, &cfg, &mut Prng::new(52));
    let (input, ids) = sample_input(2);
    let raw = random_images(&cfg, &ids, 2, 53);
    let (base, shape) = run_graph(&store, &cfg, &input, &raw);
    let v = shape[1];
    // perturb image 1's pyramid only (not its visual tokens): positions
    // where image 1 is invisible must be bit-identical
    let mut raw2 = raw.clone();
    for lvl in raw2.get_mut(&(0, 1)).unwrap().1.iter_mut() {
        for x in lvl.data.iter_mut() {
            *x += 0.7;
        }
    }
    let (out, _) = run_graph(&store, &cfg, &input, &raw2);
    let mut saw_change = false;
    for (p, vis) in input.visible.iter().enumerate() {
        let same = out[p * v..(p + 1) * v] == base[p * v..(p + 1) * v];
        if !vis.contains(&(0, 1)) {
            assert!(same, "position {p} sees a change without visibility");
        } else if !same {
            saw_change = true;
        }
    }
    assert!(saw_change);
}

#[test]
fn end_to_end_loss_gradcheck() {
    let cfg = toy_cfg(2, 2, 16);
    let mut store: ParamStore<f64> = ParamStore::new();
    init_llm_params(&mut store, "llm", &cfg, &mut Prng::new(61));
    perturb_mmfs(&mut store, &cfg, &mut Prng::new(62));
    let (input, ids) = sample_input(2);
    let raw = random_images(&cfg, &ids, 2, 63);
    let seq = build(
        &[
            Element::Text(vec![1, 2]),
            Element::Image(0),
            Element::Text(vec![3]),
            Element::Image(1),
            Element::Text(vec![4]),
        ],
        2,
    )
    .unwrap();
    let (targets, mask) = ntp_targets(&seq, cfg.vocab);

    let names: Vec<String> = store.names().to_vec();
    let params: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).clone()).collect();
    let report = gradcheck(
        |ps: &[Tensor<f64>]| {
            let mut store2: ParamStore<f64> = ParamStore::new();
            for (n, t) in names.iter().zip(ps) {
                store2.add(n, t.clone());
            }
            let mut g = Graph::new();
            let binding = store2.bind(&mut g);
            let vars = LLMVars::bind(&store2, &binding, "llm", &cfg);
            let mut images = HashMap::new();
            for (key, (toks, levels)) in &raw {
                let visual_tokens = g.constant(toks.clone());
                let pyramid = PyramidVars {
                    levels: levels.iter().map(|l| g.constant(l.clone())).collect(),
                };
                images.insert(
                    *key,
                    ImageData {
                        visual_tokens,
                        pyramid,
                    },
                );
            }
            let out = forward(&mut g, &input, &images, &vars, &cfg)?;
            let loss = ntp_loss(&mut g, out.logits, &targets, &mask)?;
            let loss_val = g.value(loss).data[0];
            g.backward(loss)?;
            let grads = names
                .iter()
                .zip(ps)
                .map(|(n, t)| {
                    let var = binding.var(&store2, n);
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
            tol: 1e-4,
            min_coords: 12,
        },
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}
