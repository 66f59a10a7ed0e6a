//! Decoder training: reconstruction + perceptual losses, their gradients, Adam.
//!
//! Only decoder-side parameters are optimized. The encoder serves both as the
//! feature extractor feeding the decoder and as the perceptual-loss network Φ;
//! gradients flow through it to the decoder output but never into its weights.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureSpec, Decoder, Model, SIZE_MULTIPLE};
use crate::checkpoint::Checkpoint;
use crate::codec::Encoder;
use crate::error::{Error, Result};
use crate::image::{normalize, normalize_backward, Image};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the reconstruction term; the perceptual term gets `1 - alpha`.
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Record a loss entry every `log_every` steps (the last step is always recorded).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            learning_rate: 1e-4,
            epochs: 5,
            batch_size: 8,
            crop_size: 256,
            optimizer: AdamConfig::default(),
            seed: 0,
            max_steps: None,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::InvalidArgument(format!("{key}: {why}")));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha", format!("must be in [0,1], got {}", self.alpha));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(SIZE_MULTIPLE) {
            return bad("crop_size", format!("must be a positive multiple of 16, got {}", self.crop_size));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.log_every == 0 {
            return bad("log_every", "must be at least 1".into());
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("optimizer", "Adam betas must be in [0,1) and eps positive".into());
        }
        Ok(())
    }
}

/// One loss-history entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_recon: f64,
    pub l_percep: f64,
    pub l_total: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub recon: f64,
    pub percep: f64,
    pub total: f64,
}

impl LossParts {
    fn combine(recon: f64, percep: f64, alpha: f64) -> Self {
        Self {
            recon,
            percep,
            total: alpha * recon + (1.0 - alpha) * percep,
        }
    }
}

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(
            "image",
            &[a.height(), a.width(), 3],
            &[b.height(), b.width(), 3],
        ));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must be in [0,1], got {alpha}")));
    }
    Ok(())
}

/// Frobenius norm of the pixel difference over all H·W·3 entries.
pub fn recon_loss(input: &Image, output: &Image) -> Result<f64> {
    check_same_shape(input, output)?;
    Ok(input
        .data()
        .iter()
        .zip(output.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// Per-stage Frobenius distances ‖Φᵢ(a) − Φᵢ(b)‖ for stages 1..=5.
pub fn perceptual_terms(input: &Image, output: &Image, encoder: &Encoder) -> Result<[f64; 5]> {
    check_same_shape(input, output)?;
    let fa = encoder.encode(input, 5)?;
    let fb = encoder.encode(output, 5)?;
    let mut out = [0.0; 5];
    for (o, (a, b)) in out.iter_mut().zip(fa.iter().zip(fb.iter())) {
        *o = diff_norm(a, b);
    }
    Ok(out)
}

pub fn perceptual_loss(input: &Image, output: &Image, encoder: &Encoder) -> Result<f64> {
    Ok(perceptual_terms(input, output, encoder)?.iter().sum())
}

pub fn loss_parts(input: &Image, output: &Image, alpha: f64, encoder: &Encoder) -> Result<LossParts> {
    check_alpha(alpha)?;
    let recon = recon_loss(input, output)?;
    let percep = perceptual_loss(input, output, encoder)?;
    Ok(LossParts::combine(recon, percep, alpha))
}

/// `alpha · recon_loss + (1 − alpha) · perceptual_loss`.
pub fn total_loss(input: &Image, output: &Image, alpha: f64, encoder: &Encoder) -> Result<f64> {
    Ok(loss_parts(input, output, alpha, encoder)?.total)
}

fn diff_norm<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y).as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// `(a − b) / ‖a − b‖`, or zeros where the norm vanishes.
fn unit_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>, norm: f64, scale: f64) -> Tensor<T> {
    let k = if norm > 0.0 { T::from_f64_lossy(scale / norm) } else { T::zero() };
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * k).collect();
    Tensor::from_vec(a.channels(), a.height(), a.width(), data)
}

/// Training loss of the transfer-free decoder on a planar [0, 1] input whose
/// sides are multiples of 16. The output is not clamped.
pub fn decoder_loss<T: Real>(encoder: &Encoder<T>, decoder: &Decoder<T>, x: &Tensor<T>, alpha: f64) -> LossParts {
    let stages = encoder.forward(&normalize(x), 5);
    let (y, _) = decoder.forward_traced(&stages);
    let ys = encoder.forward(&normalize(&y), 5);
    let percep = ys.iter().zip(&stages).map(|(a, b)| diff_norm(a, b)).sum();
    LossParts::combine(diff_norm(&y, x), percep, alpha)
}

/// [`decoder_loss`] together with its gradient w.r.t. every decoder parameter.
pub fn loss_and_grad<T: Real>(
    encoder: &Encoder<T>,
    decoder: &Decoder<T>,
    x: &Tensor<T>,
    alpha: f64,
) -> (LossParts, Decoder<T>) {
    let stages = encoder.forward(&normalize(x), 5);
    let (y, trace) = decoder.forward_traced(&stages);

    let recon = diff_norm(&y, x);
    let (ys, enc_trace) = encoder.forward_traced(&normalize(&y), 5);
    let mut percep = 0.0;
    let stage_grads: Vec<Option<Tensor<T>>> = ys
        .iter()
        .zip(&stages)
        .map(|(a, b)| {
            let n = diff_norm(a, b);
            percep += n;
            Some(unit_diff(a, b, n, 1.0 - alpha))
        })
        .collect();
    let mut grad = normalize_backward(&encoder.backward_input(&enc_trace, &stage_grads));
    let g_recon = unit_diff(&y, x, recon, alpha);
    for (g, &r) in grad.data_mut().iter_mut().zip(g_recon.data()) {
        *g += r;
    }
    (LossParts::combine(recon, percep, alpha), decoder.backward(&trace, &grad))
}

/// Image files (png/jpg/jpeg) in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Decoded training images, each resized so its shorter side equals the crop size.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<Image>,
    crop_size: usize,
}

impl Dataset {
    /// Decode every image in `dir`. Files that fail to decode are logged and skipped.
    pub fn open(dir: &Path, crop_size: usize) -> Result<Self> {
        let mut images = Vec::new();
        for path in list_images(dir)? {
            match Image::load(&path) {
                Ok(img) => images.push(img.resize_min_side(crop_size)),
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        if images.is_empty() {
            return Err(Error::EmptyDataset(dir.to_path_buf()));
        }
        Ok(Self { images, crop_size })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Random `crop_size²` window of image `index`.
    pub fn crop(&self, index: usize, rng: &mut impl Rng) -> Image {
        let img = &self.images[index];
        let s = self.crop_size;
        let top = rng.random_range(0..=img.height() - s);
        let left = rng.random_range(0..=img.width() - s);
        img.crop(top, left, s, s)
    }
}

/// `batch_size` random crops from a seeded shuffle of `dir` (cycling if the
/// directory holds fewer images).
pub fn load_batch(dir: &Path, batch_size: usize, crop_size: usize, seed: u64) -> Result<Vec<Image>> {
    let data = Dataset::open(dir, crop_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    Ok((0..batch_size).map(|i| data.crop(order[i % order.len()], &mut rng)).collect())
}

fn add_scaled<T: Real>(dst: &mut Decoder<T>, src: &Decoder<T>, scale: T) {
    for (d, (_, _, s)) in dst.params_mut().into_iter().zip(src.named_params()) {
        for (a, &b) in d.iter_mut().zip(s) {
            *a += b * scale;
        }
    }
}

struct Adam {
    cfg: AdamConfig,
    lr: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    fn new(decoder: &Decoder<f32>, cfg: AdamConfig, lr: f64) -> Self {
        let zeros: Vec<Vec<f32>> = decoder.named_params().iter().map(|(_, _, p)| vec![0.0; p.len()]).collect();
        Self {
            cfg,
            lr,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn step(&mut self, decoder: &mut Decoder<f32>, grads: &Decoder<f32>) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1 as f32, self.cfg.beta2 as f32);
        let c1 = 1.0 - self.cfg.beta1.powi(self.t);
        let c2 = 1.0 - self.cfg.beta2.powi(self.t);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.cfg.eps * c2.sqrt()) as f32;
        let params = decoder.params_mut();
        for (((p, (_, _, g)), m), v) in params.into_iter().zip(grads.named_params()).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// Where training writes its artifacts. Both are optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Checkpoint base path, rewritten at every epoch end and at the end.
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines loss log.
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub model: Model,
    pub checkpoint: Checkpoint,
}

/// Mean of the first and of the last `window` recorded total losses.
pub fn smoothed_loss(history: &[LossRecord], window: usize) -> Option<(f64, f64)> {
    if history.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(history.len());
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.l_total).sum::<f64>() / s.len() as f64;
    Some((mean(&history[..w]), mean(&history[history.len() - w..])))
}

/// Train a freshly built decoder for `spec` on the images in `dataset_dir`.
pub fn train(
    dataset_dir: &Path,
    spec: &ArchitectureSpec,
    cfg: &TrainConfig,
    encoder: Arc<Encoder>,
    outputs: &TrainOutputs,
) -> Result<TrainResult> {
    cfg.validate()?;
    let mut model = Model::build(spec.clone(), encoder.clone(), cfg.seed)?;
    let data = Dataset::open(dataset_dir, cfg.crop_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut adam = Adam::new(&model.decoder, cfg.optimizer.clone(), cfg.learning_rate);

    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch).min(cfg.max_steps.unwrap_or(usize::MAX));
    let mut log = match &outputs.log {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            Some((BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?), p.clone()))
        }
        None => None,
    };
    let save = |model: &Model, step: usize, history: &[LossRecord]| -> Result<Checkpoint> {
        let mut m = model.clone();
        m.mark_trained();
        let ckpt = Checkpoint::new(&m, cfg.clone(), step, history.to_vec());
        if let Some(base) = &outputs.checkpoint {
            ckpt.save(base)?;
        }
        Ok(ckpt)
    };

    let start = Instant::now();
    let mut history = Vec::new();
    let mut step = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut checkpoint = None;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if step == total_steps {
                break 'epochs;
            }
            step += 1;
            let mut grads = model.decoder.zeros_like();
            let mut loss = LossParts::default();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let x = data.crop(i, &mut rng).to_planar::<f32>();
                let (parts, g) = loss_and_grad(encoder.as_ref(), &model.decoder, &x, cfg.alpha);
                add_scaled(&mut grads, &g, scale as f32);
                loss.recon += parts.recon * scale;
                loss.percep += parts.percep * scale;
                loss.total += parts.total * scale;
            }
            let record = LossRecord {
                step,
                l_recon: loss.recon,
                l_percep: loss.percep,
                l_total: loss.total,
            };
            if let Some((w, path)) = log.as_mut() {
                let line = serde_json::json!({
                    "step": step,
                    "l_recon": record.l_recon,
                    "l_percep": record.l_percep,
                    "l_total": record.l_total,
                    "wall_ms": start.elapsed().as_secs_f64() * 1e3,
                });
                writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            if ![loss.recon, loss.percep, loss.total].iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteLoss { step });
            }
            if step % cfg.log_every == 0 || step == total_steps {
                history.push(record);
            }
            adam.step(&mut model.decoder, &grads);
            log::debug!("epoch {epoch} step {step}: total {:.4}", loss.total);
        }
        checkpoint = Some(save(&model, step, &history)?);
    }
    if checkpoint.as_ref().is_none_or(|c| c.step != step) {
        checkpoint = Some(save(&model, step, &history)?);
    }
    model.mark_trained();
    Ok(TrainResult {
        model,
        checkpoint: checkpoint.expect("at least one checkpoint"),
    })
}

/// One sampled parameter of a gradient check.
#[derive(Clone, Debug, Serialize)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compare analytic decoder gradients of the training loss against central
/// finite differences with step `h`, in f64, for `samples` random parameters.
pub fn gradient_check(
    model: &Model,
    input: &Image,
    alpha: f64,
    samples: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<GradSample>> {
    check_alpha(alpha)?;
    if !input.height().is_multiple_of(SIZE_MULTIPLE) || !input.width().is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::InvalidArgument("gradient check input sides must be multiples of 16".into()));
    }
    let encoder = model.encoder().cast::<f64>();
    let decoder = model.decoder.cast::<f64>();
    let x = input.to_planar::<f64>();
    let (_, grads) = loss_and_grad(&encoder, &decoder, &x, alpha);

    let params = decoder.named_params();
    let sizes: Vec<usize> = params.iter().map(|(_, _, v)| v.len()).collect();
    let total: usize = sizes.iter().sum();
    let grad_params = grads.named_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let eval = |delta: f64| {
            let mut d = decoder.clone();
            d.params_mut()[which][flat] += delta;
            decoder_loss(&encoder, &d, &x, alpha).total
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let analytic = grad_params[which].2[flat];
        let scale = analytic.abs().max(numeric.abs()).max(1e-12);
        out.push(GradSample {
            param: params[which].0.clone(),
            index: flat,
            analytic,
            numeric,
            rel_error: (analytic - numeric).abs() / scale,
        });
    }
    Ok(out)
}
