//! Subcommand bodies: train, generate, bench and ablate. Each writes its
//! artifacts under an output directory and prints a JSON summary line to
//! stdout.

use std::path::Path;

use serde_json::{json, Value};

use crate::bench;
use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Prng, Tensor};
use crate::pipeline::{
    self, load_into, read_checkpoint, save_checkpoint, GenerateConfig, ModelConfig, TrainConfig,
    TrainLog,
};
use crate::pyramid::{ppm, RawImage};
use crate::sequence::Element;
use crate::tasks::{self, Task, TrainProgress};

use super::artifacts::{line_chart_svg, Series};
use super::config::RunConfig;

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Train a task, writing `model.ckpt`, `train_log.jsonl` and
/// `summary.json` under `out`. With `resume`, training continues the
/// checkpointed run: parameters, data order and noise draws pick up where
/// it stopped.
pub fn cmd_train(
    cfg: &RunConfig,
    task: Task,
    out: &Path,
    resume: Option<&Path>,
) -> Result<Value> {
    ensure_dir(out)?;
    let (mcfg, tcfg, mut store, progress) = match resume {
        Some(path) => {
            let data = read_checkpoint(path)?;
            let mcfg: ModelConfig = serde_json::from_value(
                data.config
                    .get("model")
                    .cloned()
                    .ok_or_else(|| Error::Format("checkpoint lacks model config".to_string()))?,
            )?;
            let tcfg = cfg.train(task)?;
            let progress: TrainProgress = serde_json::from_value(
                data.config
                    .get("progress")
                    .cloned()
                    .ok_or_else(|| Error::Format("checkpoint lacks progress".to_string()))?,
            )?;
            let mut store: ParamStore<f32> = ParamStore::new();
            pipeline::init_model_params(&mut store, &mcfg, &mut Prng::new(tcfg.seed));
            load_into(&data, &mut store)?;
            (mcfg, tcfg, store, Some(progress))
        }
        None => {
            let mcfg = cfg.model(task)?;
            let tcfg = cfg.train(task)?;
            let mut store: ParamStore<f32> = ParamStore::new();
            pipeline::init_model_params(&mut store, &mcfg, &mut Prng::new(tcfg.seed));
            (mcfg, tcfg, store, None)
        }
    };
    let corpus = tasks::make_corpus(task, tcfg.seed);
    let mut log = TrainLog::create(&out.join("train_log.jsonl"))?;
    let (summary, progress) = tasks::run_training_resumed(
        &mut store,
        &corpus,
        &mcfg,
        &tcfg,
        Some(&mut log),
        progress.as_ref(),
    )?;
    let task_name = format!("{task:?}").to_lowercase();
    let config_echo = json!({
        "task": task_name,
        "model": mcfg,
        "train": tcfg,
        "progress": progress,
    });
    save_checkpoint(&store, &config_echo, &out.join("model.ckpt"))?;
    let last = summary.final_stats();
    let out_json = json!({
        "task": task_name,
        "steps_run": summary.history.len(),
        "steps_total": progress.step,
        "final_ntp": last.ntp,
        "final_nip": last.nip,
        "final_total": last.total,
        "checkpoint": out.join("model.ckpt").to_string_lossy(),
    });
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&out_json)?,
    )?;
    Ok(out_json)
}

fn elements_json(elements: &[Element]) -> Vec<Value> {
    elements
        .iter()
        .map(|e| match e {
            Element::Text(ids) => json!({ "text": ids }),
            Element::Image(id) => json!({ "image": id }),
        })
        .collect()
}

/// Generate from a checkpoint: greedy (or sampled) interleaved decoding,
/// writing `generated.json` plus one PPM per produced image.
pub fn cmd_generate(
    cfg: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    prompt: &[usize],
) -> Result<Value> {
    ensure_dir(out)?;
    let data = read_checkpoint(checkpoint)?;
    let mcfg: ModelConfig = serde_json::from_value(
        data.config
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint lacks model config".to_string()))?,
    )?;
    let mut store: ParamStore<f32> = ParamStore::new();
    pipeline::init_model_params(&mut store, &mcfg, &mut Prng::new(0));
    load_into(&data, &mut store)?;
    let gcfg: GenerateConfig = cfg.generation(&mcfg);
    let elements = if prompt.is_empty() {
        vec![Element::Text(vec![1 % mcfg.llm.vocab.text])]
    } else {
        vec![Element::Text(prompt.to_vec())]
    };
    let generated = pipeline::generate(&store, &mcfg, &elements, &[], &gcfg)?;
    let mut image_files = Vec::new();
    for (i, px) in generated.images.iter().enumerate() {
        // model pixels live in [-1, 1]; the PPM writer quantizes [0, 1]
        let unit = Tensor::new(
            px.shape.clone(),
            px.data.iter().map(|v| (v + 1.0) * 0.5).collect(),
        )?;
        let name = format!("img_{i}.ppm");
        ppm::save(&RawImage::new(unit)?, &out.join(&name))?;
        image_files.push(name);
    }
    let out_json = json!({
        "seed": gcfg.seed,
        "guidance": gcfg.guidance,
        "sample_steps": gcfg.sample_steps,
        "prompt": prompt,
        "elements": elements_json(&generated.elements),
        "images": image_files,
    });
    std::fs::write(
        out.join("generated.json"),
        serde_json::to_string_pretty(&out_json)?,
    )?;
    Ok(out_json)
}

/// Analytic FLOPs sweep over the Fig.-7-style grid plus a measured toy
/// runtime pair: `sweep.csv`, `measure.csv`, `bench.svg`, `bench.json`.
pub fn cmd_bench(out: &Path, reps: usize) -> Result<Value> {
    ensure_dir(out)?;
    let grid = bench::fig7_grid();
    let rows = bench::sweep(&grid)?;
    std::fs::write(out.join("sweep.csv"), bench::sweep_csv(&rows))?;

    // chart: total GFLOPs vs image count at the middle text share
    let mut series = Vec::new();
    for prefix in ["mmfs-32tok", "plain-256tok", "dense-32tok"] {
        let points: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| {
                r.scenario.name.starts_with(prefix) && r.scenario.n_t == 128
            })
            .map(|r| (r.scenario.n_i as f64, r.flops.total_gflops()))
            .collect();
        series.push(Series {
            label: prefix.to_string(),
            points,
        });
    }
    std::fs::write(
        out.join("bench.svg"),
        line_chart_svg(
            "LLM forward cost vs images in context (128 text tokens per image)",
            "images in context",
            "total GFLOPs",
            &series,
        ),
    )?;

    let with = bench::count_flops(&bench::paper_preset(true));
    let without = bench::count_flops(&bench::paper_preset(false));
    let baseline32 = bench::CostScenario {
        mmfs: None,
        ..bench::paper_preset(true)
    };
    let ratio = without.total() / with.total();
    let overhead = with.mmfs / bench::count_flops(&baseline32).total();

    let (a, b) = bench::toy_runtime_pair();
    let measured = bench::measure(&[a, b], reps, 1)?;
    std::fs::write(out.join("measure.csv"), bench::measure_csv(&measured))?;

    let out_json = json!({
        "flops_ratio_256_vs_32": ratio,
        "mmfs_overhead_fraction": overhead,
        "grid_rows": rows.len(),
        "measured": measured
            .iter()
            .map(|r| json!({ "name": r.name, "median_ms": r.median_ms }))
            .collect::<Vec<_>>(),
    });
    std::fs::write(
        out.join("bench.json"),
        serde_json::to_string_pretty(&out_json)?,
    )?;
    Ok(out_json)
}

/// Paired copy-task ablation: train the with- and without-MMFS arms (in
/// parallel) and write a comparison table with both arms' final
/// reconstruction MSE (`ablate.csv`, `ablate.json`).
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Value> {
    ensure_dir(out)?;
    let task = Task::Copy;
    let mcfg = cfg.model(task)?;
    let base_tcfg = cfg.train(task)?;
    let corpus = tasks::make_corpus(task, base_tcfg.seed);
    let guidance = cfg.guidance.unwrap_or(2.0);
    let sample_steps = cfg.sample_steps.unwrap_or(mcfg.diffusion_steps);

    let run_arm = |with_mmfs: bool| -> Result<(pipeline::StepStats, f64)> {
        let tcfg = TrainConfig {
            decoder_mmfs: with_mmfs,
            ..base_tcfg.clone()
        };
        let mut store: ParamStore<f64> = ParamStore::new();
        pipeline::init_model_params(&mut store, &mcfg, &mut Prng::new(tcfg.seed));
        let summary = tasks::run_training(&mut store, &corpus, &mcfg, &tcfg, None)?;
        let mse = tasks::eval_reconstruction(
            &store,
            &corpus,
            &mcfg,
            with_mmfs,
            guidance,
            sample_steps,
            100 + tcfg.seed,
        )?;
        Ok((summary.final_stats(), mse))
    };
    let (with_res, without_res) = std::thread::scope(|s| {
        let with = s.spawn(|| run_arm(true));
        let without = s.spawn(|| run_arm(false));
        (
            with.join().expect("with-mmfs arm panicked"),
            without.join().expect("without-mmfs arm panicked"),
        )
    });
    let (with_stats, with_mse) = with_res?;
    let (without_stats, without_mse) = without_res?;

    let mut csv = String::from("arm,final_ntp,final_nip,reconstruction_mse\n");
    for (name, stats, mse) in [
        ("with-mmfs", with_stats, with_mse),
        ("without-mmfs", without_stats, without_mse),
    ] {
        csv.push_str(&format!(
            "{name},{:.6},{:.6},{:.6}\n",
            stats.ntp, stats.nip, mse
        ));
    }
    std::fs::write(out.join("ablate.csv"), &csv)?;
    let arm = |stats: pipeline::StepStats, mse: f64| {
        json!({ "final_ntp": stats.ntp, "final_nip": stats.nip, "reconstruction_mse": mse })
    };
    let out_json = json!({
        "task": "copy",
        "seed": base_tcfg.seed,
        "steps": base_tcfg.steps,
        "with_mmfs": arm(with_stats, with_mse),
        "without_mmfs": arm(without_stats, without_mse),
        "mse_ratio": with_mse / without_mse,
    });
    std::fs::write(
        out.join("ablate.json"),
        serde_json::to_string_pretty(&out_json)?,
    )?;
    Ok(out_json)
}
