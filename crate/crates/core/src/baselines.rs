//! Reference clusterers: k-means with k-means++ seeding, PCA followed by k-means,
//! and a diagonal-covariance Gaussian mixture fitted by EM.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::sym_eigen_desc;
use crate::numeric::{argmax, logsumexp};
use crate::random::StreamRng;

const KMEANS_RESTARTS: usize = 20;
const KMEANS_MAX_ITER: usize = 300;
const PCA_VARIANCE: f64 = 0.9;
const PCA_MAX_COMPONENTS: usize = 10;
const GMM_TOL: f64 = 1e-6;
const GMM_MAX_ITER: usize = 1000;
const GMM_VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: DMatrix<f64>,
    pub inertia: f64,
}

fn sq_dist(points: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>, c: usize) -> f64 {
    let mut s = 0.0;
    for a in 0..points.ncols() {
        let d = points[(i, a)] - centers[(c, a)];
        s += d * d;
    }
    s
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::config("number of clusters must be at least 1"));
    }
    if k > n {
        return Err(Error::config(format!("cannot form {k} clusters from {n} points")));
    }
    Ok(())
}

fn kmeans_pp_seed<R: Rng + ?Sized>(points: &DMatrix<f64>, k: usize, rng: &mut R) -> DMatrix<f64> {
    let (n, d) = points.shape();
    let mut centers = DMatrix::zeros(k, d);
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from(&points.row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from(&points.row(pick));
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(points, i, &centers, c));
        }
    }
    centers
}

fn lloyd(points: &DMatrix<f64>, mut centers: DMatrix<f64>) -> KMeansResult {
    let (n, d) = points.shape();
    let k = centers.nrows();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let best = (0..k)
                .map(|c| (c, sq_dist(points, i, &centers, c)))
                .fold((0, f64::INFINITY), |acc, v| if v.1 < acc.1 { v } else { acc })
                .0;
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = DMatrix::<f64>::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for a in 0..d {
                sums[(c, a)] += points[(i, a)];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for a in 0..d {
                    centers[(c, a)] = sums[(c, a)] / counts[c] as f64;
                }
            } else {
                // empty cluster: move its center to the point farthest from its own center
                let far = (0..n)
                    .max_by(|&i, &j| {
                        sq_dist(points, i, &centers, labels[i])
                            .total_cmp(&sq_dist(points, j, &centers, labels[j]))
                    })
                    .unwrap();
                centers.row_mut(c).copy_from(&points.row(far));
            }
        }
    }
    let inertia = (0..n).map(|i| sq_dist(points, i, &centers, labels[i])).sum();
    KMeansResult {
        labels,
        centers,
        inertia,
    }
}

/// Lloyd's algorithm from `restarts` k-means++ seedings; lowest inertia wins.
pub fn kmeans_restarts(points: &DMatrix<f64>, k: usize, restarts: usize, rng: &mut StreamRng) -> Result<KMeansResult> {
    check_k(points.nrows(), k)?;
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let seeds = kmeans_pp_seed(points, k, rng);
        let fit = lloyd(points, seeds);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.unwrap())
}

pub fn baseline_kmeans(features: &DMatrix<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = StreamRng::derive(seed, &[0x6b6d]);
    Ok(kmeans_restarts(features, k, KMEANS_RESTARTS, &mut rng)?.labels)
}

/// Scores on the leading principal components of the centered features. With
/// `n_components = None`, keeps the fewest components reaching 90% of the variance,
/// at most 10.
pub fn principal_scores(features: &DMatrix<f64>, n_components: Option<usize>) -> DMatrix<f64> {
    let (n, d) = features.shape();
    let means = features.row_mean();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= &means;
    }
    let cov = centered.tr_mul(&centered) / (n.max(2) - 1) as f64;
    let (vals, vecs) = sym_eigen_desc(&cov);
    let total: f64 = vals.iter().map(|v| v.max(0.0)).sum();
    let m = match n_components {
        Some(m) => m.clamp(1, d),
        None => {
            let mut acc = 0.0;
            let mut m = d;
            for (i, v) in vals.iter().enumerate() {
                acc += v.max(0.0);
                if total <= 0.0 || acc >= PCA_VARIANCE * total {
                    m = i + 1;
                    break;
                }
            }
            m.min(PCA_MAX_COMPONENTS)
        }
    };
    centered * vecs.columns(0, m)
}

pub fn baseline_pca_kmeans(
    features: &DMatrix<f64>,
    k: usize,
    n_components: Option<usize>,
    seed: u64,
) -> Result<Vec<usize>> {
    check_k(features.nrows(), k)?;
    baseline_kmeans(&principal_scores(features, n_components), k, seed)
}

/// Diagonal-covariance Gaussian mixture by EM from a k-means start, run until the
/// relative log-likelihood change drops below 1e-6.
pub fn baseline_gmm_diag(features: &DMatrix<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let (n, d) = features.shape();
    check_k(n, k)?;
    let start = baseline_kmeans(features, k, seed)?;
    let mut resp = DMatrix::zeros(n, k);
    for (i, &c) in start.iter().enumerate() {
        resp[(i, c)] = 1.0;
    }
    let mut prev = f64::NEG_INFINITY;
    let mut logw = vec![0.0; k];
    for _ in 0..GMM_MAX_ITER {
        // M step
        let nk: Vec<f64> = (0..k).map(|c| resp.column(c).sum()).collect();
        let mut means = DMatrix::zeros(k, d);
        let mut vars = DMatrix::zeros(k, d);
        for c in 0..k {
            let w = nk[c].max(1e-12);
            for a in 0..d {
                let m = (0..n).map(|i| resp[(i, c)] * features[(i, a)]).sum::<f64>() / w;
                let v = (0..n)
                    .map(|i| resp[(i, c)] * (features[(i, a)] - m).powi(2))
                    .sum::<f64>()
                    / w;
                means[(c, a)] = m;
                vars[(c, a)] = v.max(GMM_VAR_FLOOR);
            }
        }
        let weights: Vec<f64> = nk.iter().map(|&v| (v / n as f64).max(1e-300)).collect();
        // E step
        let mut ll = 0.0;
        for i in 0..n {
            for c in 0..k {
                let mut s = weights[c].ln();
                for a in 0..d {
                    let v = vars[(c, a)];
                    let r = features[(i, a)] - means[(c, a)];
                    s -= 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + r * r / v);
                }
                logw[c] = s;
            }
            let lse = logsumexp(&logw);
            ll += lse;
            for c in 0..k {
                resp[(i, c)] = (logw[c] - lse).exp();
            }
        }
        if !ll.is_finite() {
            return Err(Error::numerical("Gaussian mixture log-likelihood is not finite"));
        }
        if (ll - prev).abs() <= GMM_TOL * ll.abs().max(1.0) {
            break;
        }
        prev = ll;
    }
    Ok(resp.row_iter().map(|r| argmax(r.iter().copied())).collect())
}

/// Row-bind `[X | Y]` features for the joint baselines.
pub fn joint_features(x: &DMatrix<f64>, y_features: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x.nrows(), x.ncols() + y_features.ncols());
    out.columns_mut(0, x.ncols()).copy_from(x);
    out.columns_mut(x.ncols(), y_features.ncols()).copy_from(y_features);
    out
}
