//! Oracle and property checks for the analytic FLOPs model and the
//! runtime harness.

use mmiv::bench::{
    count_flops, measure, paper_preset, sweep, sweep_csv, toy_runtime_pair, CostScenario,
    DenseCost, MmfsCost, MEASURE_HEADER, SWEEP_HEADER,
};

fn base_scenario() -> CostScenario {
    CostScenario {
        name: "base".to_string(),
        channels: 64,
        layers: 4,
        heads: 4,
        vocab: 1000,
        context: 2048,
        n_v: 32,
        n_i: 2,
        n_t: 64,
        mmfs: Some(MmfsCost {
            max_images: 5,
            levels: 2,
            points: 4,
            period: 2,
        }),
        dense_cross: None,
    }
}

#[test]
fn zero_layers_cost_nothing() {
    let s = CostScenario {
        layers: 0,
        ..base_scenario()
    };
    let f = count_flops(&s);
    assert_eq!(f.total(), 0.0);
    assert_eq!(
        (f.self_attn, f.ffn, f.mmfs, f.cross_attn, f.head),
        (0.0, 0.0, 0.0, 0.0, 0.0)
    );
}

#[test]
fn single_layer_matches_hand_expansion() {
    // T = 10 forced via n_i = 1, n_v = 3, n_t = 5: 2 + 1*(1+3) + 1*5 = 11.
    // Use a shape with a directly hand-computable T instead: no images.
    let s = CostScenario {
        name: "hand".to_string(),
        channels: 4,
        layers: 1,
        heads: 1,
        vocab: 7,
        context: 100,
        n_v: 3,
        n_i: 1,
        n_t: 4,
        mmfs: Some(MmfsCost {
            max_images: 2,
            levels: 2,
            points: 3,
            period: 1,
        }),
        dense_cross: Some(DenseCost {
            kv_per_image: 5,
            period: 1,
        }),
    };
    // T = 2 + 1*(1+3) + 1*4 = 10, C = 4
    let t = 10.0;
    let c = 4.0;
    let f = count_flops(&s);
    assert_eq!(f.self_attn, 4.0 * t * c * c + 2.0 * t * t * c);
    assert_eq!(f.ffn, 8.0 * t * c * c);
    // per query: 2C² + 2C·2K + M·2C·LK + M·LK·10C with M = min(1, 2) = 1
    let lk = 6.0;
    let per_query = 2.0 * c * c + 2.0 * c * 6.0 + 1.0 * 2.0 * c * lk + 1.0 * lk * 10.0 * c;
    assert_eq!(f.mmfs, t * per_query);
    // dense: S = 1·5 keys
    let s_keys = 5.0;
    assert_eq!(
        f.cross_attn,
        4.0 * s_keys * c * c + 4.0 * t * c * c + 4.0 * t * s_keys * c
    );
    assert_eq!(f.head, 2.0 * t * c * 7.0);
    assert_eq!(
        f.total(),
        f.self_attn + f.ffn + f.mmfs + f.cross_attn + f.head
    );
}

#[test]
fn paper_preset_hits_the_reported_ratio() {
    let with = count_flops(&paper_preset(true));
    let without = count_flops(&paper_preset(false));
    let ratio = without.total() / with.total();
    assert!(
        (2.8 * 0.7..=2.8 * 1.3).contains(&ratio),
        "ratio {ratio} outside 2.8 ± 30%"
    );
    // MMFS overhead vs the 32-token baseline (same shape, no MMFS)
    let baseline_32 = CostScenario {
        mmfs: None,
        ..paper_preset(true)
    };
    let overhead = with.mmfs / count_flops(&baseline_32).total();
    assert!(overhead <= 0.05, "mmfs overhead {overhead} > 5%");
}

#[test]
fn monotone_in_every_knob() {
    let base = base_scenario();
    let total = count_flops(&base).total();
    for (name, s) in [
        ("n_v", CostScenario { n_v: base.n_v + 8, ..base.clone() }),
        ("n_i", CostScenario { n_i: base.n_i + 1, ..base.clone() }),
        ("n_t", CostScenario { n_t: base.n_t + 16, ..base.clone() }),
        ("layers", CostScenario { layers: base.layers + 1, ..base.clone() }),
    ] {
        assert!(
            count_flops(&s).total() > total,
            "{name}: total not increasing"
        );
    }
}

#[test]
fn fig7_grid_mmfs_below_both_alternatives() {
    for n_i in 1..=6usize {
        for n_t in [32usize, 128, 256] {
            let mmfs32 = CostScenario {
                name: "mmfs32".to_string(),
                n_v: 32,
                n_i,
                n_t,
                ..paper_preset(true)
            };
            let plain256 = CostScenario {
                name: "plain256".to_string(),
                n_v: 256,
                n_i,
                n_t,
                mmfs: None,
                ..paper_preset(true)
            };
            let dense32 = CostScenario {
                name: "dense32".to_string(),
                n_v: 32,
                n_i,
                n_t,
                mmfs: None,
                dense_cross: Some(DenseCost {
                    kv_per_image: 1024,
                    period: 4,
                }),
                ..paper_preset(true)
            };
            let m = count_flops(&mmfs32).total();
            assert!(m < count_flops(&plain256).total(), "n_i={n_i} n_t={n_t}");
            assert!(m < count_flops(&dense32).total(), "n_i={n_i} n_t={n_t}");
        }
    }
}

#[test]
fn overflow_flag_matches_length_arithmetic() {
    for n_v in [32usize, 256] {
        for n_i in 1..=10usize {
            for n_t in [0usize, 64, 256] {
                let s = CostScenario {
                    n_v,
                    n_i,
                    n_t,
                    ..base_scenario()
                };
                let t = 2 + n_i * (1 + n_v) + n_i * n_t;
                assert_eq!(s.tokens(), t);
                assert_eq!(s.overflows(), t > s.context);
            }
        }
    }
    // the figure's note: 256 visual tokens cannot fit 8+ images at 2048
    let s = CostScenario {
        n_v: 256,
        n_i: 8,
        n_t: 0,
        ..base_scenario()
    };
    assert!(s.overflows());
}

#[test]
fn sweep_rows_and_csv() {
    let rows = sweep(&[base_scenario()]).unwrap();
    assert_eq!(rows.len(), 1);
    // delta against the 32-token no-MMFS baseline: here only the MMFS
    // component differs (n_v is already 32)
    assert!((rows[0].delta_total - rows[0].flops.mmfs).abs() < 1e-6);
    let csv = sweep_csv(&rows);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(SWEEP_HEADER));
    let row = lines.next().unwrap();
    assert_eq!(row.split(',').count(), SWEEP_HEADER.split(',').count());
    assert!(lines.next().is_none());
    assert!(sweep(&[]).is_err());
}

#[test]
fn measured_runtime_stability_and_ordering() {
    let (with, without) = toy_runtime_pair();
    let rows = measure(&[with.clone(), with.clone()], 5, 1).unwrap();
    assert_eq!(rows.len(), 2);
    let (a, b) = (rows[0].median_ms, rows[1].median_ms);
    let ratio = a.max(b) / a.min(b).max(1e-9);
    assert!(ratio < 1.2, "medians {a} vs {b} differ by more than 20%");

    let rows = measure(&[with, without], 5, 1).unwrap();
    assert!(
        rows[0].median_ms < rows[1].median_ms,
        "sparse 32-token run ({} ms) should beat the 256-token run ({} ms)",
        rows[0].median_ms,
        rows[1].median_ms
    );
    assert!(rows[0].peak_rss_kb > 0, "VmHWM should be readable on Linux");

    let empty = measure(&[], 5, 0).unwrap();
    assert!(empty.is_empty());
    assert_eq!(
        mmiv::bench::measure_csv(&empty).trim_end(),
        MEASURE_HEADER
    );
}
