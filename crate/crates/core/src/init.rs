//! Starting values shared by both fitters: k-means on the response features, then
//! a per-cluster ridge fit on working responses truncated to rank `r_max`.

use nalgebra::DMatrix;

use crate::baselines::kmeans_restarts;
use crate::error::Result;
use crate::model::{ClusterParams, Dataset, GlobalParams, ModelSpec, ResponseFamily};
use crate::random::StreamRng;
use crate::sim::feature_transform;

const RIDGE: f64 = 1.0;
const SIGMA2_FLOOR: f64 = 1e-3;
/// k-means++ seedings per initialization.
const INIT_KMEANS_RESTARTS: usize = 5;

/// Responses mapped to the linear-predictor scale, offsets removed.
pub fn working_responses(data: &Dataset, families: &[ResponseFamily]) -> DMatrix<f64> {
    DMatrix::from_fn(data.n(), data.q(), |i, j| {
        let y = data.y[(i, j)];
        let eta = match families[j] {
            ResponseFamily::Gaussian { .. } => y,
            ResponseFamily::Bernoulli => ((y + 0.5) / (1.5 - y)).ln(),
            ResponseFamily::NegBin { r } => ((y + 0.5) / r).ln(),
        };
        eta - data.offsets[(i, j)]
    })
}

/// Hard labels from k-means++ on the standardized response features.
pub fn initial_labels(data: &Dataset, spec: &ModelSpec, rng: &mut StreamRng) -> Result<Vec<usize>> {
    if spec.k == 1 {
        return Ok(vec![0; data.n()]);
    }
    let features = feature_transform(&data.y, &spec.families)?;
    Ok(kmeans_restarts(&features.values, spec.k, INIT_KMEANS_RESTARTS, rng)?.labels)
}

/// Cluster parameters fitted to the members of each cluster in `labels`.
pub fn init_from_labels(
    spec: &ModelSpec,
    data: &Dataset,
    labels: &[usize],
) -> Result<(Vec<ClusterParams>, GlobalParams)> {
    let (n, p, q) = (data.n(), data.p(), data.q());
    let work = working_responses(data, &spec.families);
    let mut clusters = Vec::with_capacity(spec.k);
    let mut resid_ss = vec![0.0; q];
    for k in 0..spec.k {
        let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == k).collect();
        let mut c = ClusterParams::zeros(p, q, spec.r_max);
        if idx.is_empty() {
            clusters.push(c);
            continue;
        }
        let xk = data.x.select_rows(&idx);
        let yk = work.select_rows(&idx);
        let xm = xk.row_mean();
        let ym = yk.row_mean();
        let mut xc = xk.clone();
        for mut row in xc.row_iter_mut() {
            row -= &xm;
        }
        let mut yc = yk.clone();
        for mut row in yc.row_iter_mut() {
            row -= &ym;
        }
        let mut gram = xc.tr_mul(&xc);
        for a in 0..p {
            gram[(a, a)] += RIDGE;
        }
        let b = crate::linalg::cholesky_jitter(&gram)?.solve(&xc.tr_mul(&yc));
        let svd = b.clone().svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        for (h, &s) in order.iter().take(spec.r_max).enumerate() {
            let root = svd.singular_values[s].sqrt();
            c.l.set_column(h, &(u.column(s) * root));
            c.r.set_column(h, &(vt.row(s).transpose() * root));
        }
        c.mu = (ym - xm * c.coefficients()).transpose();
        let fitted = c.etas(&Dataset {
            x: xk,
            y: yk.clone(),
            offsets: DMatrix::zeros(idx.len(), q),
        });
        for j in 0..q {
            resid_ss[j] += (yk.column(j) - fitted.column(j)).norm_squared();
        }
        clusters.push(c);
    }
    let families = spec
        .families
        .iter()
        .enumerate()
        .map(|(j, f)| match f {
            ResponseFamily::Gaussian { .. } => ResponseFamily::Gaussian {
                sigma2: (resid_ss[j] / n.max(1) as f64).max(SIGMA2_FLOOR),
            },
            other => *other,
        })
        .collect();
    let alpha_sum: f64 = spec.hyper.alpha.iter().sum();
    let pi = (0..spec.k)
        .map(|k| {
            let nk = labels.iter().filter(|&&l| l == k).count() as f64;
            (nk + spec.hyper.alpha[k]) / (n as f64 + alpha_sum)
        })
        .collect();
    Ok((clusters, GlobalParams { pi, families }))
}

/// One-hot responsibilities.
pub fn hard_gamma(labels: &[usize], k: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(labels.len(), k);
    for (i, &l) in labels.iter().enumerate() {
        g[(i, l)] = 1.0;
    }
    g
}
