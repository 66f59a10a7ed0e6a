//! Feature-space stylization: channel moments, instance normalization, AdaIN,
//! ZCA whitening/coloring (WCT) and the user-control blend.
//!
//! Moments use population statistics (divide by H·W); covariances divide by
//! H·W − 1. Eigenvalues at or below `eps_rank · λ_max` are truncated.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::{gemm, FeatureMap, MatMut, MatRef, Real, Tensor};

/// Denominator guard for normalization.
pub const EPS: f64 = 1e-5;
/// Relative eigenvalue floor for rank truncation.
pub const EPS_RANK: f64 = 1e-5;
/// Absolute floor so an all-zero covariance reports rank 0.
const ABS_EIG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub fn channel_stats<T: Real>(f: &Tensor<T>) -> ChannelStats {
    let n = f.plane() as f64;
    let (mut mean, mut std) = (Vec::with_capacity(f.channels()), Vec::with_capacity(f.channels()));
    for c in 0..f.channels() {
        let ch = f.channel(c);
        let m = ch.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = ch.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / n;
        mean.push(m);
        std.push(var.sqrt());
    }
    ChannelStats { mean, std }
}

/// `(F_c - mean_c) / (std_c + eps)` per channel.
pub fn instance_norm<T: Real>(f: &Tensor<T>, eps: f64) -> Tensor<T> {
    let stats = channel_stats(f);
    let mut out = f.clone();
    for c in 0..f.channels() {
        let (m, s) = (stats.mean[c], stats.std[c] + eps);
        out.channel_mut(c)
            .iter_mut()
            .for_each(|v| *v = T::from_f64_lossy((v.as_f64() - m) / s));
    }
    out
}

/// Adaptive instance normalization: re-scale every content channel to the
/// target mean and standard deviation.
pub fn adain(content: &FeatureMap, style: &ChannelStats, eps: f64) -> Result<FeatureMap> {
    if content.channels() != style.channels() {
        return Err(Error::ChannelMismatch {
            left: content.channels(),
            right: style.channels(),
        });
    }
    let own = channel_stats(content);
    let mut out = content.clone();
    for c in 0..content.channels() {
        let scale = style.std[c] / (own.std[c] + eps);
        let (m, ms) = (own.mean[c], style.mean[c]);
        out.channel_mut(c)
            .iter_mut()
            .for_each(|v| *v = ((*v as f64 - m) * scale + ms) as f32);
    }
    Ok(out)
}

/// Mean and eigendecomposition of a feature map's channel covariance.
#[derive(Clone, Debug)]
pub struct CovEigensystem {
    pub mean: Vec<f64>,
    /// Nonincreasing.
    pub eigenvalues: Vec<f64>,
    /// Column `j` is the eigenvector of `eigenvalues[j]`.
    pub eigenvectors: DMatrix<f64>,
    /// Count of eigenvalues above the truncation threshold.
    pub rank: usize,
}

impl CovEigensystem {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `E_r · diag(f(λ_r)) · E_rᵀ` over the retained eigenpairs, row-major.
    fn spectral_matrix(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let c = self.channels();
        let r = self.rank;
        // scaled = E_r · diag(f(λ)), row-major C×r
        let mut scaled = vec![0.0; c * r];
        for i in 0..c {
            for j in 0..r {
                scaled[i * r + j] = self.eigenvectors[(i, j)] * f(self.eigenvalues[j]);
            }
        }
        let mut er = vec![0.0; c * r];
        for i in 0..c {
            for j in 0..r {
                er[i * r + j] = self.eigenvectors[(i, j)];
            }
        }
        let mut out = vec![0.0; c * c];
        gemm(
            1.0,
            MatRef::row_major(&scaled, c, r, r),
            MatRef::row_major(&er, c, r, r).t(),
            0.0,
            MatMut::row_major(&mut out, c, c, c),
        );
        out
    }

    /// Covariance rebuilt from the full eigensystem, row-major C×C.
    pub fn reconstruct_covariance(&self) -> Vec<f64> {
        let full = Self {
            rank: self.channels(),
            ..self.clone()
        };
        full.spectral_matrix(|l| l)
    }
}

/// Centered channel data (row-major C×HW, f64) and the channel means.
fn centered<T: Real>(f: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let p = f.plane();
    let mut data: Vec<f64> = f.data().iter().map(|v| v.as_f64()).collect();
    let mut means = Vec::with_capacity(f.channels());
    for row in data.chunks_mut(p) {
        let m = row.iter().sum::<f64>() / p as f64;
        row.iter_mut().for_each(|v| *v -= m);
        means.push(m);
    }
    (data, means)
}

/// Channel covariance `X̄·X̄ᵀ / (HW − 1)`, row-major C×C.
pub fn covariance<T: Real>(f: &Tensor<T>) -> Vec<f64> {
    let (x, _) = centered(f);
    covariance_of_centered(&x, f.channels(), f.plane())
}

fn covariance_of_centered(x: &[f64], c: usize, p: usize) -> Vec<f64> {
    let mut cov = vec![0.0; c * c];
    let a = MatRef::row_major(x, c, p, p);
    gemm(
        1.0 / (p as f64 - 1.0).max(1.0),
        a,
        a.t(),
        0.0,
        MatMut::row_major(&mut cov, c, c, c),
    );
    cov
}

pub fn cov_eigensystem<T: Real>(f: &Tensor<T>, eps_rank: f64) -> CovEigensystem {
    let (x, mean) = centered(f);
    let c = f.channels();
    let cov = covariance_of_centered(&x, c, f.plane());
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(c, c, &cov));
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let eigenvectors = DMatrix::from_fn(c, c, |i, j| eig.eigenvectors[(i, order[j])]);
    let lmax = eigenvalues.first().copied().unwrap_or(0.0);
    let threshold = (eps_rank * lmax).max(ABS_EIG_FLOOR);
    let rank = eigenvalues.iter().take_while(|&&l| l > threshold).count();
    CovEigensystem {
        mean,
        eigenvalues,
        eigenvectors,
        rank,
    }
}

/// `matrix · x + offset` for row-major C×C and C×P operands; result reshaped to `h×w`.
fn apply(matrix: &[f64], x: &[f64], c: usize, h: usize, w: usize, offset: &[f64]) -> FeatureMap {
    let p = h * w;
    let mut out = vec![0.0; c * p];
    gemm(
        1.0,
        MatRef::row_major(matrix, c, c, c),
        MatRef::row_major(x, c, p, p),
        0.0,
        MatMut::row_major(&mut out, c, p, p),
    );
    for (row, &m) in out.chunks_mut(p).zip(offset) {
        row.iter_mut().for_each(|v| *v += m);
    }
    Tensor::from_vec(c, h, w, out.into_iter().map(|v| v as f32).collect())
}

/// ZCA whitening: `E·diag(λ^-1/2)·Eᵀ·(F − μ)` over the retained eigenpairs of
/// `content`, which must be the eigensystem of `f`.
pub fn whiten(f: &FeatureMap, content: &CovEigensystem) -> Result<FeatureMap> {
    if f.channels() != content.channels() {
        return Err(Error::ChannelMismatch {
            left: f.channels(),
            right: content.channels(),
        });
    }
    let c = f.channels();
    let (x, _) = centered(f);
    let w = content.spectral_matrix(|l| 1.0 / l.sqrt());
    Ok(apply(&w, &x, c, f.height(), f.width(), &vec![0.0; c]))
}

/// Coloring: `E_s·diag(λ_s^1/2)·E_sᵀ·F̂ + μ_s` over the retained style eigenpairs.
pub fn color(whitened: &FeatureMap, style: &CovEigensystem) -> Result<FeatureMap> {
    if whitened.channels() != style.channels() {
        return Err(Error::ChannelMismatch {
            left: whitened.channels(),
            right: style.channels(),
        });
    }
    let x: Vec<f64> = whitened.data().iter().map(|&v| v as f64).collect();
    let m = style.spectral_matrix(f64::sqrt);
    Ok(apply(&m, &x, whitened.channels(), whitened.height(), whitened.width(), &style.mean))
}

/// Whitening-coloring transform of `content` towards the style eigensystem.
pub fn wct(content: &FeatureMap, style: &CovEigensystem, eps_rank: f64) -> Result<FeatureMap> {
    if content.channels() != style.channels() {
        return Err(Error::ChannelMismatch {
            left: content.channels(),
            right: style.channels(),
        });
    }
    let own = cov_eigensystem(content, eps_rank);
    let c = content.channels();
    let whitening = own.spectral_matrix(|l| 1.0 / l.sqrt());
    let coloring = style.spectral_matrix(f64::sqrt);
    // fold both maps into one C×C transform; whitened features never leave f64
    let mut combined = vec![0.0; c * c];
    gemm(
        1.0,
        MatRef::row_major(&coloring, c, c, c),
        MatRef::row_major(&whitening, c, c, c),
        0.0,
        MatMut::row_major(&mut combined, c, c, c),
    );
    let (x, _) = centered(content);
    Ok(apply(&combined, &x, c, content.height(), content.width(), &style.mean))
}

/// `beta · transferred + (1 − beta) · content`, elementwise.
pub fn blend(transferred: &FeatureMap, content: &FeatureMap, beta: f32) -> Result<FeatureMap> {
    if transferred.shape() != content.shape() {
        return Err(Error::shape("blend", &content.shape(), &transferred.shape()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta must be in [0,1], got {beta}")));
    }
    // endpoints are returned as copies so they stay exact even for non-finite inputs
    if beta == 0.0 {
        return Ok(content.clone());
    }
    if beta == 1.0 {
        return Ok(transferred.clone());
    }
    let data = transferred
        .data()
        .iter()
        .zip(content.data())
        .map(|(&t, &c)| beta * t + (1.0 - beta) * c)
        .collect();
    Ok(Tensor::from_vec(content.channels(), content.height(), content.width(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fm(c: usize, w: usize, v: &[f32]) -> FeatureMap {
        Tensor::from_vec(c, 1, w, v.to_vec())
    }

    fn random_map(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // mix channels so the covariance is not diagonal
        let raw: Vec<f32> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mix: Vec<f32> = (0..c * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_fn(c, h, w, |o, y, x| {
            let p = y * w + x;
            (0..c).map(|i| mix[o * c + i] * raw[i * h * w + p]).sum::<f32>() + o as f32
        })
    }

    #[test]
    fn channel_stats_hand_cases() {
        let s = channel_stats(&fm(1, 2, &[0.0, 2.0]));
        assert_eq!((s.mean[0], s.std[0]), (1.0, 1.0));
        let s = channel_stats(&fm(1, 3, &[7.0; 3]));
        assert_eq!((s.mean[0], s.std[0]), (7.0, 0.0));
        let s = channel_stats(&fm(2, 2, &[1.0, 1.0, -1.0, 3.0]));
        assert_eq!(s.mean, vec![1.0, 1.0]);
        assert_eq!(s.std, vec![0.0, 2.0]);
    }

    #[test]
    fn instance_norm_hand_cases() {
        let n = instance_norm(&fm(1, 2, &[0.0, 2.0]), EPS);
        assert!((n.data()[0] + 1.0).abs() < 1e-4 && (n.data()[1] - 1.0).abs() < 1e-4);
        let n = instance_norm(&fm(1, 4, &[3.5; 4]), EPS);
        assert!(n.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_standardizes_and_is_idempotent() {
        let f = random_map(1, 4, 8, 8);
        let n = instance_norm(&f, EPS);
        let s = channel_stats(&n);
        for c in 0..4 {
            assert!(s.mean[c].abs() <= 1e-5);
            assert!((s.std[c] - 1.0).abs() <= 1e-3);
        }
        let nn = instance_norm(&n, EPS);
        for (a, b) in n.data().iter().zip(nn.data()) {
            assert!((a - b).abs() <= 1e-3);
        }
    }

    #[test]
    fn adain_hand_cases() {
        let f = fm(1, 2, &[0.0, 2.0]);
        let own = channel_stats(&f);
        let out = adain(&f, &own, EPS).unwrap();
        assert!(out.data().iter().zip(f.data()).all(|(a, b)| (a - b).abs() < 1e-4));

        let target = ChannelStats { mean: vec![6.0], std: vec![2.0] };
        let out = adain(&f, &target, EPS).unwrap();
        assert!((out.data()[0] - 4.0).abs() < 1e-3 && (out.data()[1] - 8.0).abs() < 1e-3);

        let flat = fm(1, 3, &[2.0; 3]);
        let target = ChannelStats { mean: vec![5.0], std: vec![3.0] };
        let out = adain(&flat, &target, EPS).unwrap();
        assert!(out.data().iter().all(|&v| (v - 5.0).abs() < 1e-6));

        let bad = ChannelStats { mean: vec![0.0; 2], std: vec![1.0; 2] };
        assert!(matches!(adain(&f, &bad, EPS), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn eigensystem_hand_cases() {
        let e = cov_eigensystem(&fm(1, 2, &[1.0, 3.0]), EPS_RANK);
        assert_eq!(e.mean, vec![2.0]);
        assert!((e.eigenvalues[0] - 2.0).abs() < 1e-12);
        assert!((e.eigenvectors[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert_eq!(e.rank, 1);

        let e = cov_eigensystem(&Tensor::<f32>::from_fn(3, 4, 4, |c, _, _| c as f32), EPS_RANK);
        assert!(e.eigenvalues.iter().all(|&l| l.abs() < 1e-12));
        assert_eq!(e.rank, 0);
    }

    #[test]
    fn eigensystem_reconstructs_covariance() {
        let f = random_map(2, 6, 5, 5);
        let e = cov_eigensystem(&f, EPS_RANK);
        let direct = covariance(&f);
        // independent oracle: element-wise double loop
        let (c, p) = (6, 25);
        let stats = channel_stats(&f);
        for i in 0..c {
            for j in 0..c {
                let brute: f64 = (0..p)
                    .map(|k| (f.channel(i)[k] as f64 - stats.mean[i]) * (f.channel(j)[k] as f64 - stats.mean[j]))
                    .sum::<f64>()
                    / (p as f64 - 1.0);
                assert!((direct[i * c + j] - brute).abs() < 1e-9);
            }
        }
        let rebuilt = e.reconstruct_covariance();
        let err: f64 = rebuilt.iter().zip(&direct).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err < 1e-4);
        let ete = e.eigenvectors.transpose() * &e.eigenvectors;
        assert!((ete - DMatrix::identity(c, c)).norm() < 1e-4);
        assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert!(e.eigenvalues.iter().all(|&l| l >= -1e-6));
    }

    #[test]
    fn wct_with_own_statistics_is_identity() {
        let f = random_map(3, 4, 6, 6);
        let own = cov_eigensystem(&f, EPS_RANK);
        assert_eq!(own.rank, 4);
        let out = wct(&f, &own, EPS_RANK).unwrap();
        for (a, b) in out.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn wct_one_dimensional_case_matches_moments() {
        let style = cov_eigensystem(&fm(1, 2, &[4.0, 8.0]), EPS_RANK);
        let out = wct(&fm(1, 2, &[0.0, 2.0]), &style, EPS_RANK).unwrap();
        assert!((out.data()[0] - 4.0).abs() < 1e-4 && (out.data()[1] - 8.0).abs() < 1e-4);
    }

    #[test]
    fn wct_with_degenerate_channel_stays_finite() {
        let mut f = random_map(4, 3, 4, 4);
        f.channel_mut(1).iter_mut().for_each(|v| *v = 2.5);
        let style_map = random_map(5, 3, 4, 4);
        let style = cov_eigensystem(&style_map, EPS_RANK);
        let own = cov_eigensystem(&f, EPS_RANK);
        assert_eq!(own.rank, 2);
        let out = wct(&f, &style, EPS_RANK).unwrap();
        assert!(out.is_finite());
        // the truncated direction carries no content, so output means are the style means
        let s = channel_stats(&out);
        for c in 0..3 {
            assert!((s.mean[c] - style.mean[c]).abs() < 1e-4);
        }
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let t = fm(1, 1, &[2.0]);
        let c = fm(1, 1, &[0.0]);
        assert_eq!(blend(&t, &c, 0.0).unwrap(), c);
        assert_eq!(blend(&t, &c, 1.0).unwrap(), t);
        assert_eq!(blend(&t, &c, 0.5).unwrap().data(), &[1.0]);
        assert!(matches!(blend(&t, &fm(1, 2, &[0.0, 0.0]), 0.5), Err(Error::ShapeMismatch { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn adain_reproduces_target_moments(seed in 0u64..1000, c in 1usize..6, mu in -5.0f64..5.0, sd in 0.1f64..4.0) {
            let f = random_map(seed, c, 4, 5);
            let target = ChannelStats { mean: vec![mu; c], std: (0..c).map(|i| sd + i as f64).collect() };
            let out = adain(&f, &target, EPS).unwrap();
            let (own, s) = (channel_stats(&f), channel_stats(&out));
            for i in 0..c {
                let expect_std = target.std[i] * own.std[i] / (own.std[i] + EPS);
                prop_assert!((s.mean[i] - target.mean[i]).abs() < 1e-4);
                prop_assert!((s.std[i] - expect_std).abs() < 1e-4 * (1.0 + target.std[i]));
            }
        }

        #[test]
        fn wct_whitening_is_identity_on_retained_subspace(seed in 0u64..1000, ci in 0usize..3, hw in prop::sample::select(vec![8usize, 64])) {
            let c = [1usize, 4, 16][ci];
            prop_assume!(hw > c);
            let f = random_map(seed, c, 1, hw);
            let own = cov_eigensystem(&f, EPS_RANK);
            let white = whiten(&f, &own).unwrap();
            let cov = covariance(&white);
            // project onto the retained eigenvectors: Erᵀ Σ Er = I
            let r = own.rank;
            for a in 0..r {
                for b in 0..r {
                    let mut s = 0.0;
                    for i in 0..c {
                        for j in 0..c {
                            s += own.eigenvectors[(i, a)] * cov[i * c + j] * own.eigenvectors[(j, b)];
                        }
                    }
                    let expect = if a == b { 1.0 } else { 0.0 };
                    prop_assert!((s - expect).abs() < 1e-3, "entry ({a},{b}) = {s}");
                }
            }
        }

        #[test]
        fn wct_output_means_match_style(seed in 0u64..1000, c in 1usize..8) {
            let f = random_map(seed, c, 4, 8);
            let s = random_map(seed + 7, c, 4, 8);
            let style = cov_eigensystem(&s, EPS_RANK);
            let out = wct(&f, &style, EPS_RANK).unwrap();
            let stats = channel_stats(&out);
            for i in 0..c {
                prop_assert!((stats.mean[i] - style.mean[i]).abs() < 1e-4);
            }
        }

        #[test]
        fn blend_is_linear_in_beta(seed in 0u64..1000, b1 in 0.0f32..1.0, b2 in 0.0f32..1.0) {
            let a = random_map(seed, 2, 3, 3);
            let b = random_map(seed + 1, 2, 3, 3);
            let l1 = blend(&a, &b, b1).unwrap();
            let l2 = blend(&a, &b, b2).unwrap();
            let mid = blend(&a, &b, (b1 + b2) / 2.0).unwrap();
            for ((x, y), m) in l1.data().iter().zip(l2.data()).zip(mid.data()) {
                prop_assert!((x + y - 2.0 * m).abs() <= 1e-6 * (1.0 + x.abs() + y.abs()));
            }
        }
    }
}
