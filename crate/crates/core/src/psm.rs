//! Posterior similarity matrices, their leading eigenspace, and mean-shift
//! partitioning of the embedded units.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, sym_eigen_desc};
use crate::model::FitResult;

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-10;
const BANDWIDTH_FLOOR: f64 = 1e-6;
/// Largest sample used by the pairwise-median bandwidth rule.
const MEDIAN_SUBSAMPLE: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub enum Psm {
    /// Materialized `n x n` matrix with unit diagonal.
    Dense(DMatrix<f64>),
    /// `Gamma Gamma'` kept as its `n x K` factor.
    Factorized(DMatrix<f64>),
}

impl Psm {
    pub fn n(&self) -> usize {
        match self {
            Psm::Dense(s) => s.nrows(),
            Psm::Factorized(g) => g.nrows(),
        }
    }

    /// Dense form; the diagonal is set to one.
    pub fn materialize(&self) -> DMatrix<f64> {
        let mut s = match self {
            Psm::Dense(s) => s.clone(),
            Psm::Factorized(g) => g * g.transpose(),
        };
        for i in 0..s.nrows() {
            s[(i, i)] = 1.0;
        }
        s
    }
}

/// Co-clustering frequencies of a `T x n` label archive.
pub fn psm_from_draws(draws: &[Vec<usize>]) -> Result<Psm> {
    let Some(first) = draws.first() else {
        return Err(Error::data("label archive is empty"));
    };
    let n = first.len();
    if let Some(t) = draws.iter().position(|d| d.len() != n) {
        return Err(Error::data(format!("draw {t} has {} labels, expected {n}", draws[t].len())));
    }
    let mut counts = DMatrix::<f64>::zeros(n, n);
    for z in draws {
        for i in 0..n {
            for j in (i + 1)..n {
                if z[i] == z[j] {
                    counts[(i, j)] += 1.0;
                }
            }
        }
    }
    let t = draws.len() as f64;
    let mut s = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = counts[(i, j)] / t;
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    Ok(Psm::Dense(s))
}

/// Factorized similarity `Gamma Gamma'` from responsibilities.
pub fn psm_from_gamma(gamma: &DMatrix<f64>) -> Result<Psm> {
    for (i, row) in gamma.row_iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-8 || row.iter().any(|&g| !(-1e-12..=1.0 + 1e-12).contains(&g)) {
            return Err(Error::data(format!("responsibility row {i} is off the simplex (sum {sum})")));
        }
    }
    Ok(Psm::Factorized(gamma.clone()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    /// `n x K` with orthonormal columns (before row normalization).
    pub u: DMatrix<f64>,
    /// Decreasing.
    pub eigenvalues: DVector<f64>,
    pub row_normalized: bool,
    /// Set when fewer than the requested number of columns were numerically nonzero.
    pub truncated: bool,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.u.ncols()
    }

    /// Scales every nonzero row to unit length.
    pub fn row_normalize(&mut self) {
        for mut row in self.u.row_iter_mut() {
            let norm = row.norm();
            if norm > 0.0 {
                row /= norm;
            }
        }
        self.row_normalized = true;
    }
}

/// Leading `k` eigenpairs of a symmetric matrix, dropping numerically zero ones.
pub fn dense_top_eigen(s: &DMatrix<f64>, k: usize) -> Result<Embedding> {
    if k == 0 || k > s.nrows() {
        return Err(Error::config(format!("cannot take {k} eigenvectors of a {0}x{0} matrix", s.nrows())));
    }
    let (vals, vecs) = sym_eigen_desc(s);
    let keep = kept_count(&vals, k);
    Ok(Embedding {
        u: vecs.columns(0, keep).into_owned(),
        eigenvalues: vals.rows(0, keep).into_owned(),
        row_normalized: false,
        truncated: keep < k,
    })
}

fn kept_count(vals: &DVector<f64>, k: usize) -> usize {
    let top = vals.get(0).copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    vals.iter().take(k).take_while(|&&v| v > RANK_TOL * top).count()
}

/// Leading `k`-dimensional eigenspace. The factorized form eigendecomposes the
/// `K x K` matrix `Gamma' Gamma = V D V'` and returns `Gamma V D^{-1/2}`.
pub fn psm_eigen(psm: &Psm, k: usize) -> Result<Embedding> {
    match psm {
        Psm::Dense(s) => dense_top_eigen(s, k),
        Psm::Factorized(g) => {
            if k == 0 || k > g.nrows() {
                return Err(Error::config(format!("cannot take {k} eigenvectors for n = {}", g.nrows())));
            }
            let (vals, v) = sym_eigen_desc(&g.tr_mul(g));
            let keep = kept_count(&vals, k.min(g.ncols()));
            let mut u = g * v.columns(0, keep);
            for (h, mut col) in u.column_iter_mut().enumerate() {
                col /= vals[h].sqrt();
            }
            Ok(Embedding {
                u,
                eigenvalues: vals.rows(0, keep).into_owned(),
                row_normalized: false,
                truncated: keep < k,
            })
        }
    }
}

/// Sine of the largest principal angle between the column spans of two
/// orthonormal bases: `||U2 - U1 U1' U2||_2`.
pub fn subspace_distance(u1: &DMatrix<f64>, u2: &DMatrix<f64>) -> f64 {
    let resid = u2 - u1 * u1.tr_mul(u2);
    spectral_norm(&resid)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Half the root-mean-square distance of the points to their centroid.
    #[default]
    CentroidRms,
    /// Half the median pairwise distance over at most 1000 points.
    MedianPairwise,
    Fixed(f64),
}

/// Bandwidth chosen by `rule`, floored at `1e-6`.
pub fn select_bandwidth(points: &DMatrix<f64>, rule: Bandwidth) -> Result<f64> {
    let n = points.nrows();
    let h = match rule {
        Bandwidth::Fixed(h) => {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::config(format!("bandwidth must be positive, got {h}")));
            }
            return Ok(h);
        }
        Bandwidth::CentroidRms => {
            if n == 0 {
                return Ok(BANDWIDTH_FLOOR);
            }
            let c = points.row_mean();
            let ss: f64 = points.row_iter().map(|r| (r - &c).norm_squared()).sum();
            0.5 * (ss / n as f64).sqrt()
        }
        Bandwidth::MedianPairwise => {
            // evenly spaced subsample keeps the rule deterministic
            let m = n.min(MEDIAN_SUBSAMPLE);
            let idx: Vec<usize> = (0..m).map(|i| i * n / m.max(1)).collect();
            let mut d = Vec::with_capacity(m * m.saturating_sub(1) / 2);
            for (a, &i) in idx.iter().enumerate() {
                for &j in &idx[a + 1..] {
                    d.push((points.row(i) - points.row(j)).norm());
                }
            }
            if d.is_empty() {
                BANDWIDTH_FLOOR
            } else {
                0.5 * crate::numeric::median(&d)
            }
        }
    };
    Ok(h.max(BANDWIDTH_FLOOR))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanShiftOptions {
    /// Step length, relative to the bandwidth, that counts as converged.
    pub tol: f64,
    pub max_iter: usize,
    /// Merge radius as a fraction of the bandwidth.
    pub merge_fraction: f64,
}

impl Default for MeanShiftOptions {
    fn default() -> Self {
        MeanShiftOptions {
            tol: 1e-7,
            max_iter: 500,
            merge_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanShiftResult {
    pub labels: Vec<usize>,
    pub modes: Vec<DVector<f64>>,
    pub bandwidth: f64,
    /// Units whose trajectory hit `max_iter`; they join the nearest mode.
    pub unconverged: Vec<usize>,
}

impl MeanShiftResult {
    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }
}

/// Gaussian-kernel mean shift started from every row of `points`.
pub fn mean_shift(points: &DMatrix<f64>, h: f64, opts: &MeanShiftOptions) -> Result<MeanShiftResult> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config(format!("bandwidth must be positive, got {h}")));
    }
    let n = points.nrows();
    let inv = -0.5 / (h * h);
    let rows: Vec<DVector<f64>> = points.row_iter().map(|r| r.transpose()).collect();
    let step_tol = opts.tol * h;
    let ends: Vec<(DVector<f64>, bool)> = {
        use rayon::prelude::*;
        rows.par_iter()
            .map(|start| {
                let mut x = start.clone();
                for _ in 0..opts.max_iter {
                    let mut num = DVector::zeros(x.len());
                    let mut den = 0.0;
                    for r in &rows {
                        let w = ((r - &x).norm_squared() * inv).exp();
                        num.axpy(w, r, 1.0);
                        den += w;
                    }
                    if den == 0.0 {
                        return (x, true);
                    }
                    let next = num / den;
                    let step = (&next - &x).norm();
                    x = next;
                    if step <= step_tol {
                        return (x, true);
                    }
                }
                (x, false)
            })
            .collect()
    };
    let radius = opts.merge_fraction * h;
    let mut modes: Vec<DVector<f64>> = Vec::new();
    let mut labels = vec![usize::MAX; n];
    for (i, (end, ok)) in ends.iter().enumerate() {
        if !ok {
            continue;
        }
        labels[i] = match modes.iter().position(|m| (m - end).norm() <= radius) {
            Some(k) => k,
            None => {
                modes.push(end.clone());
                modes.len() - 1
            }
        };
    }
    let mut unconverged = Vec::new();
    for (i, (end, ok)) in ends.iter().enumerate() {
        if *ok {
            continue;
        }
        unconverged.push(i);
        let nearest = modes
            .iter()
            .enumerate()
            .map(|(k, m)| (k, (m - end).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        labels[i] = match nearest {
            Some((k, _)) => k,
            None => {
                modes.push(end.clone());
                modes.len() - 1
            }
        };
    }
    Ok(MeanShiftResult {
        labels,
        modes,
        bandwidth: h,
        unconverged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ClusterOptions {
    pub row_normalize: bool,
    pub bandwidth: Bandwidth,
    pub mean_shift: MeanShiftOptions,
}

#[derive(Debug, Clone)]
pub struct PartitionReport {
    pub labels: Vec<usize>,
    pub embedding: Embedding,
    pub n_modes: usize,
    pub bandwidth: f64,
    pub warnings: Vec<String>,
}

/// Similarity matrix of `fit`: label draws when present, otherwise responsibilities.
pub fn fit_psm(fit: &FitResult) -> Result<Psm> {
    match &fit.z_draws {
        Some(draws) => psm_from_draws(draws),
        None => psm_from_gamma(&fit.gamma),
    }
}

/// Embeds the units in the leading `k`-dimensional PSM eigenspace and partitions
/// them by mean shift.
pub fn cluster_psm(fit: &FitResult, k: usize, opts: &ClusterOptions) -> Result<PartitionReport> {
    let psm = fit_psm(fit)?;
    partition_psm(&psm, k, opts)
}

pub fn partition_psm(psm: &Psm, k: usize, opts: &ClusterOptions) -> Result<PartitionReport> {
    let mut embedding = psm_eigen(psm, k)?;
    let mut warnings = Vec::new();
    if embedding.truncated {
        warnings.push(format!(
            "similarity matrix has numerical rank {} < {k}; embedding truncated",
            embedding.dim()
        ));
    }
    if opts.row_normalize {
        embedding.row_normalize();
    }
    let n = psm.n();
    if k == 1 {
        return Ok(PartitionReport {
            labels: vec![0; n],
            embedding,
            n_modes: 1,
            bandwidth: f64::NAN,
            warnings,
        });
    }
    let h = select_bandwidth(&embedding.u, opts.bandwidth)?;
    let ms = mean_shift(&embedding.u, h, &opts.mean_shift)?;
    if !ms.unconverged.is_empty() {
        warnings.push(format!(
            "{} mean-shift trajectories did not converge; assigned to the nearest mode",
            ms.unconverged.len()
        ));
    }
    Ok(PartitionReport {
        n_modes: ms.n_modes(),
        labels: ms.labels,
        embedding,
        bandwidth: h,
        warnings,
    })
}

/// `unit,u1,...,uK,cluster` rows.
pub fn write_embedding_csv<W: Write>(report: &PartitionReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = report.embedding.dim();
    let mut header = vec!["unit".to_string()];
    header.extend((1..=d).map(|h| format!("u{h}")));
    header.push("cluster".into());
    w.write_record(&header)?;
    for i in 0..report.labels.len() {
        let mut rec = vec![i.to_string()];
        rec.extend((0..d).map(|h| report.embedding.u[(i, h)].to_string()));
        rec.push(report.labels[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

const PALETTE: [&str; 8] = [
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666",
];

/// Scatter of the first two embedding coordinates colored by cluster.
pub fn write_embedding_svg(report: &PartitionReport, path: &Path) -> Result<()> {
    let u = &report.embedding.u;
    let coord = |i: usize, h: usize| if h < u.ncols() { u[(i, h)] } else { 0.0 };
    let n = u.nrows();
    let (size, pad) = (480.0, 30.0);
    let range = |h: usize| {
        let (lo, hi) = (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
            (lo.min(coord(i, h)), hi.max(coord(i, h)))
        });
        if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) }
    };
    let ((x0, x1), (y0, y1)) = (range(0), range(1));
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for i in 0..n {
        let px = pad + (coord(i, 0) - x0) / (x1 - x0) * (size - 2.0 * pad);
        let py = size - pad - (coord(i, 1) - y0) / (y1 - y0) * (size - 2.0 * pad);
        let color = PALETTE[report.labels[i] % PALETTE.len()];
        svg.push_str(&format!("<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"2.5\" fill=\"{color}\"/>\n"));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}
