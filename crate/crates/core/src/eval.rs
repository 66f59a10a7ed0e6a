//! Quality metrics and the resolution-sweep latency benchmark.

use std::sync::Mutex;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arch::Model;
use crate::codec::{global_embedding, Encoder};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::train::recon_loss;

/// Mean over `images` of ‖I − reconstruct(I)‖_F on the 0–255 pixel scale.
pub fn recon_error(images: &[Image], model: &Model) -> Result<f64> {
    recon_error_with(images, |im| model.reconstruct(im))
}

/// [`recon_error`] for any image-to-image map.
pub fn recon_error_with(images: &[Image], mut f: impl FnMut(&Image) -> Result<Image>) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyInput("recon_error needs at least one image"));
    }
    let mut sum = 0.0;
    for im in images {
        sum += 255.0 * recon_loss(im, &f(im)?)?;
    }
    Ok(sum / images.len() as f64)
}

/// Total-variation score of an H×W×C interleaved buffer already on the 0–255
/// scale: summed absolute horizontal and vertical neighbor differences over H·W·C.
pub fn tv_score_raw(data: &[f64], height: usize, width: usize, channels: usize) -> Result<f64> {
    if height < 2 || width < 2 {
        return Err(Error::ImageTooSmall {
            height,
            width,
            min: 2,
        });
    }
    assert_eq!(data.len(), height * width * channels, "buffer size");
    let at = |y: usize, x: usize, c: usize| data[(y * width + x) * channels + c];
    let mut sum = 0.0;
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let v = at(y, x, c);
                if x + 1 < width {
                    sum += (at(y, x + 1, c) - v).abs();
                }
                if y + 1 < height {
                    sum += (at(y + 1, x, c) - v).abs();
                }
            }
        }
    }
    Ok(sum / (height * width * channels) as f64)
}

/// Total-variation score of an RGB image on the 0–255 scale.
pub fn tv_score(image: &Image) -> Result<f64> {
    let data: Vec<f64> = image.data().iter().map(|&v| v as f64 * 255.0).collect();
    tv_score_raw(&data, image.height(), image.width(), 3)
}

/// N×D embedding matrix with a tag naming the extractor.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    data: DMatrix<f64>,
    pub source: String,
}

/// Tag of the default extractor.
pub const DEFAULT_EMBEDDING: &str = "vgg19-relu5_1-gap";

impl EmbeddingSet {
    pub fn new(rows: &[Vec<f64>], source: impl Into<String>) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::EmptyInput("an embedding set needs at least two rows"));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch("embedding rows differ in length".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("embeddings must be finite".into()));
        }
        Ok(Self {
            data: DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]),
            source: source.into(),
        })
    }

    /// Embed images with any extractor.
    pub fn from_images_with(
        images: &[Image],
        mut embed: impl FnMut(&Image) -> Result<Vec<f64>>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let rows = images.iter().map(&mut embed).collect::<Result<Vec<_>>>()?;
        Self::new(&rows, source)
    }

    /// Default embedding: global-average-pooled stage-5 encoder features.
    pub fn from_images(images: &[Image], encoder: &Encoder) -> Result<Self> {
        Self::from_images_with(images, |im| Ok(global_embedding(&encoder.encode(im, 5)?)), DEFAULT_EMBEDDING)
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    fn mean_and_cov(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.len() as f64;
        let mean = self.data.row_mean().transpose();
        let mut centered = self.data.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n - 1.0);
        (mean, cov)
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let s = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two embedding sets:
/// ‖μ_A − μ_B‖² + Tr(Σ_A + Σ_B − 2 (Σ_A Σ_B)^½).
///
/// The trace term is evaluated as Tr((√Σ_A Σ_B √Σ_A)^½), which shares its
/// eigenvalues with (Σ_A Σ_B)^½ and stays symmetric.
pub fn frechet_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "embedding dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let (mu_a, cov_a) = a.mean_and_cov();
    let (mu_b, cov_b) = b.mean_and_cov();
    let sa = sym_sqrt(&cov_a);
    let mut m = &sa * &cov_b * &sa;
    m = (&m + m.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// One timed configuration.
#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    /// (W, H)
    pub resolution: (usize, usize),
    pub arch: String,
    pub warmup_runs: usize,
    pub timed_runs: usize,
    pub median_s: f64,
    pub p90_s: f64,
    pub device: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Speedup {
    pub resolution: (usize, usize),
    pub arch: String,
    /// baseline median / model median
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub baseline: Vec<BenchRow>,
    pub speedups: Vec<Speedup>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    /// (W, H) pairs.
    pub resolutions: Vec<(usize, usize)>,
    pub runs: usize,
    pub warmup: usize,
    /// Rounds of the multi-round baseline.
    pub baseline_rounds: usize,
    pub seed: u64,
}

/// Resolutions of the standard sweep, (W, H).
pub const SWEEP_RESOLUTIONS: [(usize, usize); 4] = [(256, 128), (512, 256), (768, 384), (1024, 512)];

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            resolutions: SWEEP_RESOLUTIONS.to_vec(),
            runs: 5,
            warmup: 2,
            baseline_rounds: 5,
            seed: 0,
        }
    }
}

static BENCH_LOCK: Mutex<()> = Mutex::new(());

fn noise_image(rng: &mut impl Rng, w: usize, h: usize) -> Image {
    Image::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn time_row(
    label: String,
    resolution: (usize, usize),
    cfg: &BenchConfig,
    mut run: impl FnMut() -> Result<()>,
) -> BenchRow {
    let mut row = BenchRow {
        resolution,
        arch: label,
        warmup_runs: cfg.warmup,
        timed_runs: 0,
        median_s: 0.0,
        p90_s: 0.0,
        device: "cpu".into(),
        skipped: None,
    };
    let mut times = Vec::with_capacity(cfg.runs);
    for i in 0..cfg.warmup + cfg.runs {
        let t = Instant::now();
        if let Err(e) = run() {
            row.skipped = Some(e.to_string());
            return row;
        }
        if i >= cfg.warmup {
            times.push(t.elapsed().as_secs_f64());
        }
    }
    times.sort_by(f64::total_cmp);
    row.timed_runs = times.len();
    row.median_s = if times.len() % 2 == 1 {
        times[times.len() / 2]
    } else {
        0.5 * (times[times.len() / 2 - 1] + times[times.len() / 2])
    };
    row.p90_s = percentile(&times, 0.9);
    row
}

/// Time single-pass stylization of every model at every resolution, plus the
/// multi-round `baseline` (if given) for speedup ratios. Inputs are fixed
/// seeded noise images; timings cover content and style encoding, transfers
/// and decoding, but no file I/O.
pub fn bench(models: &[Model], baseline: Option<&Model>, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.runs < 5 {
        return Err(Error::InvalidArgument(format!("bench needs at least 5 timed runs, got {}", cfg.runs)));
    }
    let _guard = BENCH_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = BenchReport {
        rows: Vec::new(),
        baseline: Vec::new(),
        speedups: Vec::new(),
        notes: vec![
            "times include style-image encoding".into(),
            format!(
                "baseline: vanilla auto-encoder looped {} rounds, style statistics computed once",
                cfg.baseline_rounds
            ),
        ],
    };
    for &(w, h) in &cfg.resolutions {
        let content = noise_image(&mut rng, w, h);
        let style = noise_image(&mut rng, w, h);
        let base_row = baseline.map(|b| {
            let label = format!("{} x{}", b.spec().label(), cfg.baseline_rounds);
            time_row(label, (w, h), cfg, || {
                b.stylize_rounds(&content, &style, 1.0, cfg.baseline_rounds).map(drop)
            })
        });
        for m in models {
            let row = time_row(m.spec().label(), (w, h), cfg, || m.stylize(&content, &style, 1.0).map(drop));
            if let Some(b) = base_row.as_ref().filter(|b| b.skipped.is_none() && row.skipped.is_none()) {
                report.speedups.push(Speedup {
                    resolution: (w, h),
                    arch: row.arch.clone(),
                    ratio: b.median_s / row.median_s,
                });
            }
            report.rows.push(row);
        }
        report.baseline.extend(base_row);
    }
    Ok(report)
}

impl BenchReport {
    /// Plain-text table: one line per method, one column per resolution.
    pub fn to_table(&self) -> String {
        let mut resolutions: Vec<(usize, usize)> = Vec::new();
        for r in self.rows.iter().chain(&self.baseline) {
            if !resolutions.contains(&r.resolution) {
                resolutions.push(r.resolution);
            }
        }
        let mut methods: Vec<&str> = Vec::new();
        for r in self.rows.iter().chain(&self.baseline) {
            if !methods.contains(&r.arch.as_str()) {
                methods.push(&r.arch);
            }
        }
        let mut out = format!("{:<24}", "median s");
        for (w, h) in &resolutions {
            out += &format!("{:>12}", format!("{w}x{h}"));
        }
        out.push('\n');
        for m in methods {
            out += &format!("{m:<24}");
            for res in &resolutions {
                let cell = self
                    .rows
                    .iter()
                    .chain(&self.baseline)
                    .find(|r| r.arch == m && r.resolution == *res)
                    .map(|r| match &r.skipped {
                        Some(_) => "skipped".to_string(),
                        None => format!("{:.4}", r.median_s),
                    })
                    .unwrap_or_else(|| "-".into());
                out += &format!("{cell:>12}");
            }
            out.push('\n');
        }
        for s in &self.speedups {
            out += &format!(
                "speedup {} at {}x{}: {:.2}x\n",
                s.arch, s.resolution.0, s.resolution.1, s.ratio
            );
        }
        for n in &self.notes {
            out += &format!("note: {n}\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchitectureSpec;
    use crate::codec::WeightArchive;
    use proptest::prelude::{prop_assert, proptest};
    use rand_distr::{Distribution, Normal};
    use std::sync::Arc;

    #[test]
    fn tv_hand_cases() {
        let checker = [0.0, 255.0, 255.0, 0.0];
        assert_eq!(tv_score_raw(&checker, 2, 2, 1).unwrap(), 255.0);
        assert_eq!(tv_score(&Image::filled(5, 4, [0.3, 0.2, 0.9])).unwrap(), 0.0);
        assert!(matches!(
            tv_score(&Image::filled(1, 4, [0.0; 3])),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    proptest! {
        #[test]
        fn tv_is_flip_invariant(seed in 0u64..1000, h in 2usize..9, w in 2usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let im = noise_image(&mut rng, w, h);
            let t = tv_score(&im).unwrap();
            prop_assert!((t - tv_score(&im.flip_horizontal()).unwrap()).abs() < 1e-9);
            prop_assert!((t - tv_score(&im.flip_vertical()).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn frechet_is_symmetric_and_nonnegative(seed in 0u64..200, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut set = |n: usize, shift: f64| {
                let rows: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..d).map(|_| rng.random::<f64>() * 2.0 + shift).collect())
                    .collect();
                EmbeddingSet::new(&rows, "test").unwrap()
            };
            let a = set(20, 0.0);
            let b = set(30, 0.5);
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-6);
        }
    }

    #[test]
    fn recon_error_hand_cases() {
        let a = Image::filled(16, 16, [0.5; 3]);
        let b = Image::filled(16, 16, [0.25; 3]);
        assert_eq!(recon_error_with(&[a.clone(), b.clone()], |im| Ok(im.clone())).unwrap(), 0.0);
        // per-image errors 4 and 6 on the 0-255 scale (single-entry perturbations)
        let bump = |im: &Image, by: f32| {
            let mut data = im.data().to_vec();
            data[0] += by / 255.0;
            Image::new(im.height(), im.width(), data)
        };
        let mut k = 0;
        let err = recon_error_with(&[a.clone(), b.clone()], |im| {
            k += 1;
            Ok(bump(im, if k == 1 { 4.0 } else { 6.0 }))
        })
        .unwrap();
        assert!((err - 5.0).abs() < 1e-4);
        // a uniform perturbation doubles the error when doubled
        let shift = |by: f32| move |im: &Image| Ok(Image::new(im.height(), im.width(), im.data().iter().map(|v| v + by).collect()));
        let e1 = recon_error_with(std::slice::from_ref(&a), shift(0.01)).unwrap();
        let e2 = recon_error_with(std::slice::from_ref(&a), shift(0.02)).unwrap();
        assert!((e2 / e1 - 2.0).abs() < 1e-4);
        assert!(matches!(recon_error_with(&[], |im| Ok(im.clone())), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn frechet_identical_and_mismatched() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos(), i as f64 * 0.01]).collect();
        let a = EmbeddingSet::new(&rows, "t").unwrap();
        assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
        let b = EmbeddingSet::new(&[vec![0.0, 1.0], vec![1.0, 0.0]], "t").unwrap();
        assert!(matches!(frechet_distance(&a, &b), Err(Error::DimensionMismatch(_))));
        assert!(EmbeddingSet::new(&[vec![1.0]], "t").is_err());
    }

    #[test]
    fn frechet_matches_gaussian_closed_form() {
        // independent coordinates: sum of per-dimension (Δμ² + Δσ²)
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 4000;
        let params = [(0.0, 1.0, 0.5, 2.0), (1.0, 0.5, -1.0, 0.5), (2.0, 3.0, 2.0, 1.0)];
        let mut sample = |first: bool| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    params
                        .iter()
                        .map(|&(ma, sa, mb, sb)| {
                            let (m, s) = if first { (ma, sa) } else { (mb, sb) };
                            Normal::new(m, s).unwrap().sample(&mut rng)
                        })
                        .collect()
                })
                .collect()
        };
        let (ra, rb) = (sample(true), sample(false));
        let a = EmbeddingSet::new(&ra, "t").unwrap();
        let b = EmbeddingSet::new(&rb, "t").unwrap();
        let d = frechet_distance(&a, &b).unwrap();
        let population: f64 = params.iter().map(|&(ma, sa, mb, sb)| (ma - mb).powi(2) + (sa - sb).powi(2)).sum();
        assert!((d - population).abs() / population < 0.05, "{d} vs {population}");
    }

    #[test]
    fn bench_report_shape_and_scaling() {
        let enc = Arc::new(Encoder::from_archive(&WeightArchive::synthetic_vgg19(0)).unwrap());
        let art = Model::build(ArchitectureSpec::artnet(), enc.clone(), 0).unwrap().allow_untrained();
        let vanilla = Model::build(ArchitectureSpec::vanilla(), enc, 0).unwrap().allow_untrained();
        let cfg = BenchConfig {
            resolutions: vec![(32, 32), (256, 256)],
            runs: 5,
            ..BenchConfig::default()
        };
        let report = bench(&[art.clone(), art], Some(&vanilla), &cfg).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert_eq!(report.baseline.len(), 2);
        assert_eq!(report.speedups.len(), 4);
        assert!(report.rows.iter().all(|r| r.timed_runs == 5 && r.median_s > 0.0 && r.p90_s >= r.median_s));
        assert!(report.rows[2].median_s >= report.rows[0].median_s);
        let table = report.to_table();
        assert!(table.contains("256x256") && table.contains("ArtNet(WCT)"));
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["rows"][0]["device"], "cpu");
        assert!(bench(&[], None, &BenchConfig { runs: 4, ..cfg }).is_err());
    }
}
