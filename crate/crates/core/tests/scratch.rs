use mmiv::numcore::{ParamStore, Prng};
use mmiv::pipeline;
use mmiv::tasks::{self, Task};

#[test]
fn probe_long_copy() {
    let mcfg = tasks::model_config(Task::Copy);
    let corpus = tasks::make_corpus(Task::Copy, 1);
    for (lr, lr_dec) in [(1e-3, 3e-3)] {
    for with_mmfs in [true, false] {
        let mut tcfg = tasks::train_config(Task::Copy);
        tcfg.seed = 1;
        tcfg.lr = lr;
        tcfg.lr_decoder = lr_dec;
        tcfg.steps = 4000;
        tcfg.decoder_mmfs = with_mmfs;
        let mut store: ParamStore<f64> = ParamStore::new();
        pipeline::init_model_params(&mut store, &mcfg, &mut Prng::new(1));
        let t0 = std::time::Instant::now();
        let summary = tasks::run_training(&mut store, &corpus, &mcfg, &tcfg, None).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let w: Vec<f64> = summary
            .history
            .chunks(1000)
            .map(|c| c.iter().map(|s| s.nip).sum::<f64>() / c.len() as f64)
            .collect();
        let mse = tasks::eval_reconstruction(
            &store, &corpus, &mcfg, with_mmfs, 1.0, mcfg.diffusion_steps, 100,
        )
        .unwrap();
        for gsc in [2.0, 3.0] {
            let m = tasks::eval_reconstruction(
                &store, &corpus, &mcfg, with_mmfs, gsc, mcfg.diffusion_steps, 100,
            )
            .unwrap();
            println!("  with_mmfs={with_mmfs} guidance {gsc}: mse {m:.4}");
        }
        let mut zn = 0.0f64;
        for n in store.names() {
            if n.contains("zconv") {
                zn += store.get(n).data.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let xmse = if with_mmfs {
            tasks::eval_reconstruction(&store, &corpus, &mcfg, false, 1.0, mcfg.diffusion_steps, 100)
                .unwrap()
        } else {
            f64::NAN
        };
        println!(
            "lr {lr}/{lr_dec} with_mmfs={with_mmfs}: nip400 {w:.4?} mse {mse:.4} (pyr-ablated {xmse:.4}) |zconv| {:.3} train {secs:.0}s",
            zn.sqrt()
        );
    }
    }
}
