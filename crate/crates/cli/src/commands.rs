//! Subcommand implementations. Every failure here is a runtime error (exit 1).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde_json::json;

use styleforge::arch::{ArchitectureSpec, Model};
use styleforge::checkpoint::Checkpoint;
use styleforge::codec::{load_weights, Encoder, WeightArchive};
use styleforge::eval::{bench, frechet_distance, recon_error, tv_score, BenchConfig, EmbeddingSet};
use styleforge::image::Image;
use styleforge::train::{list_images, smoothed_loss, train, TrainOutputs};

use crate::config::Resolved;

/// Seed of the stand-in encoder weights used when no archive is given.
const SYNTHETIC_WEIGHTS_SEED: u64 = 0;

pub fn run(r: &Resolved) -> Result<()> {
    match r.command {
        "stylize" => stylize(r),
        "train" => train_cmd(r),
        "eval" => eval_cmd(r),
        "bench" => bench_cmd(r),
        other => bail!("unknown command {other}"),
    }
}

fn load_encoder(weights: Option<&Path>) -> Result<Arc<Encoder>> {
    let archive = match weights {
        Some(p) => load_weights(p).with_context(|| format!("loading VGG-19 weights from {}", p.display()))?,
        None => {
            log::warn!("no --weights given; using synthetic VGG-19 weights (seed {SYNTHETIC_WEIGHTS_SEED})");
            WeightArchive::synthetic_vgg19(SYNTHETIC_WEIGHTS_SEED)
        }
    };
    Ok(Arc::new(Encoder::from_archive(&archive)?))
}

/// Model from `--checkpoint`, or a seeded untrained one.
fn load_model(r: &Resolved, spec: &ArchitectureSpec, encoder: Arc<Encoder>) -> Result<Model> {
    let c = &r.config;
    match &c.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            Ok(ckpt.into_model(spec, encoder)?)
        }
        None => {
            let model = Model::build(spec.clone(), encoder, c.seed)?;
            Ok(if c.allow_untrained { model.allow_untrained() } else { model })
        }
    }
}

fn load_image(path: &Path) -> Result<Image> {
    Image::load(path).with_context(|| format!("reading image {}", path.display()))
}

fn load_dir(dir: &Path) -> Result<Vec<Image>> {
    let files = list_images(dir)?;
    if files.is_empty() {
        bail!("no images found in {}", dir.display());
    }
    files.iter().map(|p| load_image(p)).collect()
}

/// `out.png` → `out_beta0.40.png`
fn sweep_path(base: &Path, beta: f32) -> PathBuf {
    let stem = base.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    base.with_file_name(format!("{stem}_beta{beta:.2}.png"))
}

fn stylize(r: &Resolved) -> Result<()> {
    let c = &r.config;
    let encoder = load_encoder(c.weights.as_deref())?;
    let model = load_model(r, &r.spec, encoder)?;
    let content = load_image(c.content.as_deref().expect("validated"))?;
    let output = c.output.clone().expect("validated");

    if c.reconstruct {
        let img = model.reconstruct(&content)?;
        return write_outputs(&[(output, img)]);
    }
    let style = load_image(c.style.as_deref().expect("validated"))?;
    let jobs: Vec<(PathBuf, f32)> = match &r.betas {
        Some(betas) => betas.iter().map(|&b| (sweep_path(&output, b), b)).collect(),
        None => vec![(output, c.beta)],
    };
    let mut results = Vec::with_capacity(jobs.len());
    for (path, beta) in jobs {
        results.push((path, model.stylize(&content, &style, beta)?));
    }
    write_outputs(&results)
}

/// Write every image or none: anything already written is removed on failure.
fn write_outputs(items: &[(PathBuf, Image)]) -> Result<()> {
    let mut written = Vec::new();
    for (path, img) in items {
        if let Err(e) = img.save_png(path) {
            for p in written.iter().chain([path]) {
                let _ = std::fs::remove_file(p);
            }
            return Err(e).with_context(|| format!("writing {}", path.display()));
        }
        written.push(path.clone());
    }
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}

fn train_cmd(r: &Resolved) -> Result<()> {
    let c = &r.config;
    let encoder = load_encoder(c.weights.as_deref())?;
    let checkpoint = c
        .checkpoint
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("checkpoints/{}", c.arch.to_ascii_lowercase())));
    let log = c
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", checkpoint.display())));
    let outputs = TrainOutputs {
        checkpoint: Some(checkpoint.clone()),
        log: Some(log.clone()),
    };
    let data = c.data.as_deref().expect("validated");
    let result = train(data, &r.spec, &c.train, encoder, &outputs)?;
    let history = &result.checkpoint.loss_history;
    let (initial, last) = smoothed_loss(history, 20).unwrap_or((f64::NAN, f64::NAN));
    let summary = json!({
        "checkpoint": checkpoint,
        "log": log,
        "steps": result.checkpoint.step,
        "smoothed_initial_loss": initial,
        "smoothed_final_loss": last,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn eval_cmd(r: &Resolved) -> Result<()> {
    let c = &r.config;
    let images = load_dir(c.images.as_deref().expect("validated"))?;
    let report = match c.metric.as_str() {
        "recon" => {
            let encoder = load_encoder(c.weights.as_deref())?;
            let model = load_model(r, &r.spec, encoder)?;
            if !model.is_trained() && !c.allow_untrained {
                return Err(styleforge::Error::UntrainedModel.into());
            }
            json!({
                "metric": "recon_error",
                "value": recon_error(&images, &model)?,
                "n": images.len(),
                "scale": "0-255",
                "arch": model.spec().label(),
            })
        }
        "tv" => {
            let scores = images.iter().map(tv_score).collect::<styleforge::Result<Vec<f64>>>()?;
            json!({
                "metric": "tv_score",
                "value": scores.iter().sum::<f64>() / scores.len() as f64,
                "per_image": scores,
                "scale": "0-255",
            })
        }
        "frechet" => {
            let encoder = load_encoder(c.weights.as_deref())?;
            let reference = load_dir(c.reference.as_deref().expect("validated"))?;
            let a = EmbeddingSet::from_images(&reference, &encoder)?;
            let b = EmbeddingSet::from_images(&images, &encoder)?;
            json!({
                "metric": "frechet_distance",
                "value": frechet_distance(&a, &b)?,
                "embedding": a.source,
                "n_reference": a.len(),
                "n_images": b.len(),
                "note": "Fréchet distance over VGG-19 relu5_1 global-average-pooled features, not Inception-V3 FID",
            })
        }
        other => bail!("unknown metric {other}"),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn bench_cmd(r: &Resolved) -> Result<()> {
    let c = &r.config;
    let encoder = load_encoder(c.weights.as_deref())?;
    // latency does not depend on the weight values
    let models = r
        .bench_specs
        .iter()
        .map(|s| Ok(Model::build(s.clone(), encoder.clone(), c.seed)?.allow_untrained()))
        .collect::<Result<Vec<_>>>()?;
    let baseline_spec = ArchitectureSpec::vanilla().with_transfer(r.spec.transfer_kind);
    let baseline = Model::build(baseline_spec, encoder, c.seed)?.allow_untrained();
    let cfg = BenchConfig {
        resolutions: r.resolutions.clone(),
        runs: c.runs,
        seed: c.seed,
        ..BenchConfig::default()
    };
    let report = bench(&models, Some(&baseline), &cfg)?;
    match c.format.as_str() {
        "json" => println!("{}", serde_json::to_string_pretty(&report)?),
        _ => print!("{}", report.to_table()),
    }
    Ok(())
}
