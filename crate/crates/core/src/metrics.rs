//! Feature-space generation metrics: Fréchet distance between Gaussian fits
//! and k-nearest-neighbour precision/recall.

use std::fmt;

use crate::data::{gen_batch, NUM_CLASSES};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::perception::{GlobalFeatureNet, GlobalNetConfig};
use crate::rng::{Purpose, Stream};
use crate::sampler::{sample_threaded, SamplerConfig};
use crate::tensor::{Scalar, Tensor};

/// Diagonal ridge added to every fitted covariance.
pub const COV_RIDGE: f64 = 1e-6;
const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;
/// Real evaluation images come from indices at or above this, far from any training epoch.
pub const HELD_OUT_BASE: u64 = 1 << 40;

/// Mean and covariance of a feature cloud. The covariance is row-major `dim × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    pub n: usize,
}

impl GaussianFit {
    /// Fit rows of equal length; the covariance uses the `n − 1` normalizer plus the ridge.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Config(format!("a Gaussian fit needs at least 2 rows, got {n}")));
        }
        let d = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::dim("GaussianFit::from_rows", &[d], &[bad.len()]));
        }
        if n < d {
            log::warn!("fitting {d}-dimensional Gaussian from only {n} rows");
        }
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, &x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let c = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = c;
                cov[j * d + i] = c;
            }
            cov[i * d + i] += COV_RIDGE;
        }
        Ok(Self { mean, cov, n })
    }

    /// A fit from explicit moments (no ridge added).
    pub fn from_moments(mean: Vec<f64>, cov: Vec<f64>, n: usize) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::dim("GaussianFit::from_moments", &[d, d], &[cov.len()]));
        }
        Ok(Self { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and row-major eigenvectors (column `k` pairs with value `k`).
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return Err(Error::dim("symmetric_eigen", &[n, n], &[a.len()]));
    }
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Ok(((0..n).map(|i| a[i * n + i]).collect(), v))
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues are clamped to 0.
pub fn sqrt_psd(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let (vals, vecs) = symmetric_eigen(a, n)?;
    let roots: Vec<f64> = vals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| vecs[i * n + k] * roots[k] * vecs[j * n + k]).sum();
        }
    }
    Ok(out)
}

fn matmul_sq(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa^½ Σb Σa^½)^½)`, floored at 0.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::dim("frechet_distance", &[d], &[b.dim()]));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let trace = |m: &[f64]| (0..d).map(|i| m[i * d + i]).sum::<f64>();
    let ra = sqrt_psd(&a.cov, d)?;
    let mut inner = matmul_sq(&matmul_sq(&ra, &b.cov, d), &ra, d);
    for i in 0..d {
        for j in i + 1..d {
            let s = 0.5 * (inner[i * d + j] + inner[j * d + i]);
            inner[i * d + j] = s;
            inner[j * d + i] = s;
        }
    }
    let (vals, _) = symmetric_eigen(&inner, d)?;
    let cross: f64 = vals.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * cross).max(0.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each row to its `k`-th nearest other row.
fn knn_radii(rows: &[Vec<f64>], k: usize) -> Vec<f64> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let mut d: Vec<f64> = rows
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, o)| sq_dist(r, o))
                .collect();
            d.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            d[k - 1]
        })
        .collect()
}

/// Precision: share of generated points inside some real point's k-NN ball.
/// Recall: share of real points whose k-NN ball contains some generated point.
/// Both use the real set's radii.
pub fn knn_precision_recall(real: &[Vec<f64>], gen: &[Vec<f64>], k: usize) -> Result<(f64, f64)> {
    if k == 0 || k >= real.len() || gen.is_empty() {
        return Err(Error::Config(format!(
            "k-NN metrics need 1 <= k < n_real and n_gen >= 1 (k={k}, n_real={}, n_gen={})",
            real.len(),
            gen.len()
        )));
    }
    let d = real[0].len();
    if let Some(bad) = real.iter().chain(gen).find(|r| r.len() != d) {
        return Err(Error::dim("knn_precision_recall", &[d], &[bad.len()]));
    }
    let radii = knn_radii(real, k);
    let inside = |g: &[f64], i: usize| sq_dist(g, &real[i]) <= radii[i];
    let precision = gen.iter().filter(|g| (0..real.len()).any(|i| inside(g, i))).count() as f64 / gen.len() as f64;
    let recall = (0..real.len()).filter(|&i| gen.iter().any(|g| inside(g, i))).count() as f64 / real.len() as f64;
    Ok((precision, recall))
}

/// Patch-averaged final-layer features of `net` for each image of `[N, C, H, W]`.
pub fn pooled_features<S: Scalar>(net: &GlobalFeatureNet, images: &Tensor<S>) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 128;
    let n = images.shape()[0];
    let (p, dim) = (net.num_patches(), net.dim());
    let mut out = Vec::with_capacity(n);
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(CHUNK) {
        let part = images.select_rows(chunk)?;
        let f = net.eval_features(&part, net.last_layer())?;
        for row in f.data().chunks(p * dim) {
            let mut pooled = vec![0.0; dim];
            for patch in row.chunks(dim) {
                for (acc, &x) in pooled.iter_mut().zip(patch) {
                    *acc += x.as_f64();
                }
            }
            pooled.iter_mut().for_each(|v| *v /= p as f64);
            out.push(pooled);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub n: usize,
    pub k: usize,
    /// Seeds the generated noise and the choice of real images.
    pub eval_seed: u64,
    /// Seeds the evaluation feature network; keep it apart from the training extractor seed.
    pub feature_seed: u64,
    pub dataset_seed: u64,
    /// Sampling workers; results do not depend on it.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n: 1024,
            k: 3,
            eval_seed: 2024,
            feature_seed: 0xE7A1,
            dataset_seed: 0,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub frechet: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_real: usize,
    pub n_gen: usize,
    pub k: usize,
}

pub const REPORT_HEADER: &str = "frechet,precision,recall,n_real,n_gen,k";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.frechet, self.precision, self.recall, self.n_real, self.n_gen, self.k
        )
    }

    pub fn is_finite(&self) -> bool {
        self.frechet.is_finite() && self.precision.is_finite() && self.recall.is_finite()
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "frechet   {:.6}\nprecision {:.4}\nrecall    {:.4}\n(n_real={}, n_gen={}, k={})",
            self.frechet, self.precision, self.recall, self.n_real, self.n_gen, self.k
        )
    }
}

/// Held-out real images for evaluation and their labels.
pub fn real_images(cfg: &EvalConfig, n: usize, stream_index: u64) -> (Tensor<f32>, Vec<usize>) {
    let mut s = Stream::new(cfg.eval_seed, Purpose::EvalSubset, 0, stream_index);
    let indices: Vec<u64> = (0..n).map(|_| HELD_OUT_BASE + s.below(1 << 32)).collect();
    gen_batch(cfg.dataset_seed, &indices)
}

/// Compare two image sets with the evaluation feature network.
pub fn compare_images<S: Scalar>(real: &Tensor<S>, gen: &Tensor<S>, cfg: &EvalConfig) -> Result<MetricsReport> {
    let net = GlobalFeatureNet::new(cfg.feature_seed, GlobalNetConfig::default())?;
    let fr = pooled_features(&net, real)?;
    let fg = pooled_features(&net, gen)?;
    let frechet = frechet_distance(&GaussianFit::from_rows(&fr)?, &GaussianFit::from_rows(&fg)?)?;
    let (precision, recall) = knn_precision_recall(&fr, &fg, cfg.k)?;
    Ok(MetricsReport {
        frechet,
        precision,
        recall,
        n_real: fr.len(),
        n_gen: fg.len(),
        k: cfg.k,
    })
}

/// Sample `cfg.n` images with the labels of `cfg.n` held-out real images and compare the two sets.
pub fn evaluate(model: &Denoiser<f32>, sampler: &SamplerConfig, cfg: &EvalConfig) -> Result<MetricsReport> {
    let (real, labels) = real_images(cfg, cfg.n, 0);
    debug_assert!(labels.iter().all(|&c| c < NUM_CLASSES));
    let gen = sample_threaded(model, &labels, sampler, cfg.eval_seed, cfg.threads)?.images;
    compare_images(&real, &gen, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fit1(mu: f64, var: f64) -> GaussianFit {
        GaussianFit::from_moments(vec![mu], vec![var], 10).unwrap()
    }

    #[test]
    fn one_dimensional_closed_form() {
        let fd = frechet_distance(&fit1(0.0, 1.0), &fit1(1.0, 4.0)).unwrap();
        assert!((fd - 2.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_closed_form() {
        let (ma, mb) = (vec![0.3, -1.0, 2.0], vec![0.0, 0.5, 2.5]);
        let (la, lb) = ([1.0, 0.25, 3.0], [2.0, 0.5, 0.1]);
        let diag = |l: &[f64; 3]| {
            let mut c = vec![0.0; 9];
            (0..3).for_each(|i| c[i * 4] = l[i]);
            c
        };
        let a = GaussianFit::from_moments(ma.clone(), diag(&la), 10).unwrap();
        let b = GaussianFit::from_moments(mb.clone(), diag(&lb), 10).unwrap();
        let want: f64 = (0..3)
            .map(|i| (ma[i] - mb[i]).powi(2) + (la[i].sqrt() - lb[i].sqrt()).powi(2))
            .sum();
        assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn frechet_is_symmetric_and_zero_on_self() {
        let mut s = Stream::new(3, Purpose::Diagnostic, 0, 0);
        let rows = |s: &mut Stream, shift: f64| -> Vec<Vec<f64>> {
            (0..60)
                .map(|_| (0..4).map(|j| s.normal() * (1.0 + j as f64) + shift).collect())
                .collect()
        };
        let a = GaussianFit::from_rows(&rows(&mut s, 0.0)).unwrap();
        let b = GaussianFit::from_rows(&rows(&mut s, 0.5)).unwrap();
        assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-8 * ab.max(1.0));
        for i in 0..4 {
            for j in 0..4 {
                assert!((a.cov[i * 4 + j] - a.cov[j * 4 + i]).abs() < 1e-9);
            }
        }
        let wide = GaussianFit::from_moments(vec![0.0; 2], vec![1.0; 4], 4).unwrap();
        assert!(matches!(frechet_distance(&a, &wide), Err(Error::Dimension { .. })));
    }

    #[test]
    fn frechet_grows_with_noise() {
        let mut s = Stream::new(4, Purpose::Diagnostic, 0, 0);
        let base: Vec<Vec<f64>> = (0..200).map(|_| (0..3).map(|_| s.normal()).collect()).collect();
        let fit = GaussianFit::from_rows(&base).unwrap();
        let noise: Vec<Vec<f64>> = (0..200).map(|_| (0..3).map(|_| s.normal()).collect()).collect();
        let fd: Vec<f64> = [0.1, 0.5, 1.5]
            .iter()
            .map(|amp| {
                let g: Vec<Vec<f64>> = base
                    .iter()
                    .zip(&noise)
                    .map(|(r, n)| r.iter().zip(n).map(|(x, e)| x + amp * e).collect())
                    .collect();
                frechet_distance(&fit, &GaussianFit::from_rows(&g).unwrap()).unwrap()
            })
            .collect();
        assert!(fd[0] <= fd[1] && fd[1] <= fd[2], "{fd:?}");
    }

    #[test]
    fn eigen_reconstructs() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, -0.2, 0.5, -0.2, 1.0];
        let (vals, vecs) = symmetric_eigen(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| vecs[i * 3 + k] * vals[k] * vecs[j * 3 + k]).sum();
                assert!((r - a[i * 3 + j]).abs() < 1e-10);
            }
        }
        let root = sqrt_psd(&a, 3).unwrap();
        let sq = matmul_sq(&root, &root, 3);
        assert!(sq.iter().zip(&a).all(|(x, y)| (x - y).abs() < 1e-10));
    }

    #[test]
    fn knn_examples() {
        let line = |xs: &[f64]| xs.iter().map(|&x| vec![x]).collect::<Vec<_>>();
        let real = line(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(knn_precision_recall(&real, &line(&[0.1]), 1).unwrap(), (1.0, 0.5));
        assert_eq!(knn_precision_recall(&real, &real, 3).unwrap(), (1.0, 1.0));
        assert_eq!(
            knn_precision_recall(&real, &line(&[100.0, 101.0, 102.0]), 1).unwrap(),
            (0.0, 0.0)
        );
        assert!(matches!(knn_precision_recall(&real, &real, 4), Err(Error::Config(_))));
        let mut shuffled = real.clone();
        shuffled.reverse();
        let g = line(&[0.4, 2.6, 9.0]);
        assert_eq!(
            knn_precision_recall(&real, &g, 2).unwrap(),
            knn_precision_recall(&shuffled, &g, 2).unwrap()
        );
    }

    #[test]
    fn pooling_shape_and_duplicates() {
        let net = GlobalFeatureNet::new(9, GlobalNetConfig::default()).unwrap();
        let (imgs, _) = gen_batch(0, &[3, 3, 4]);
        let f = pooled_features(&net, &imgs).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f[0].len(), 32);
        assert_eq!(f[0], f[1]);
        assert_ne!(f[0], f[2]);
    }
}
