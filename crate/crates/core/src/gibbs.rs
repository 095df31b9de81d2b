//! Pólya–Gamma augmented Gibbs sampler.
//!
//! A sweep updates labels, mixing weights, Gaussian variances, count dispersions,
//! the PG weights, then per cluster the mean shift, the rows of `R`, `L` and the
//! MGP scales. The PG weights are drawn after the dispersions because the
//! dispersion update integrates them out; drawing them earlier would leave weights
//! conditioned on a stale `r` in the coefficient updates.
//!
//! Random numbers are consumed in a canonical cluster order determined by the
//! cluster parameters rather than their indices, so relabeling the state relabels
//! the chain.

use std::cmp::Ordering;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{init_from_labels, initial_labels};
use crate::likelihood::{cluster_logliks, nb_norm_table};
use crate::mgp::{delta_conditional, phi_conditional};
use crate::model::{
    validate_dataset, ClusterParams, Dataset, FitMode, FitResult, GlobalParams, HyperParams,
    ModelSpec, ResponseFamily,
};
use crate::normal_eq::{l_system, mu_moments, r_row_system, unvec, WeightedBlock};
use crate::numeric::{log1pexp, logsumexp, normalize_log_weights};
use crate::random::{
    sample_crt, sample_dirichlet, sample_gamma, sample_inv_gamma, sample_mvn_precision, sample_pg,
    sample_std_normal, StreamRng,
};

const GIBBS_STREAM: u64 = 0x61bb5;

#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    pub z: Vec<usize>,
    pub pi: Vec<f64>,
    pub clusters: Vec<ClusterParams>,
    /// Families carrying the current variances and dispersions.
    pub families: Vec<ResponseFamily>,
    /// `n x q` PG draws; Gaussian slots hold `1 / sigma2`.
    pub omega: DMatrix<f64>,
}

impl GibbsState {
    pub fn new(
        data: &Dataset,
        z: Vec<usize>,
        pi: Vec<f64>,
        clusters: Vec<ClusterParams>,
        families: Vec<ResponseFamily>,
    ) -> Result<Self> {
        let k = clusters.len();
        if z.len() != data.n() || pi.len() != k || families.len() != data.q() {
            return Err(Error::config(format!(
                "state shapes disagree: {} labels, {} weights, {} clusters, {} families for n={}, q={}",
                z.len(),
                pi.len(),
                k,
                families.len(),
                data.n(),
                data.q()
            )));
        }
        if let Some(i) = z.iter().position(|&l| l >= k) {
            return Err(Error::config(format!("label {} of unit {i} is out of range", z[i])));
        }
        let mut state = GibbsState {
            z,
            pi,
            clusters,
            families,
            omega: DMatrix::zeros(data.n(), data.q()),
        };
        state.set_expected_omega(data);
        Ok(state)
    }

    /// k-means labels and the shared per-cluster ridge start.
    pub fn initialize(spec: &ModelSpec, data: &Dataset, rng: &mut StreamRng) -> Result<Self> {
        let labels = initial_labels(data, spec, rng)?;
        let (clusters, GlobalParams { pi, families }) = init_from_labels(spec, data, &labels)?;
        GibbsState::new(data, labels, pi, clusters, families)
    }

    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k()];
        for &l in &self.z {
            c[l] += 1;
        }
        c
    }

    fn set_expected_omega(&mut self, data: &Dataset) {
        let etas = self.member_etas(data);
        for (j, fam) in self.families.iter().enumerate() {
            for i in 0..data.n() {
                self.omega[(i, j)] = match *fam {
                    ResponseFamily::Gaussian { sigma2 } => 1.0 / sigma2,
                    ResponseFamily::Bernoulli => crate::likelihood::pg_mean(1.0, etas[(i, j)]),
                    ResponseFamily::NegBin { r } => crate::likelihood::pg_mean(data.y[(i, j)] + r, etas[(i, j)]),
                };
            }
        }
    }

    /// `n x q` predictors of every unit under its current cluster.
    pub fn member_etas(&self, data: &Dataset) -> DMatrix<f64> {
        let all: Vec<DMatrix<f64>> = self.clusters.iter().map(|c| c.etas(data)).collect();
        DMatrix::from_fn(data.n(), data.q(), |i, j| all[self.z[i]][(i, j)])
    }

    fn members(&self, k: usize) -> Vec<usize> {
        (0..self.z.len()).filter(|&i| self.z[i] == k).collect()
    }

    /// Observed-data log-likelihood `sum_i log sum_k pi_k p(y_i | k)`.
    pub fn observed_loglik(&self, data: &Dataset) -> f64 {
        let norms = nb_norm_table(&data.y, &self.families);
        let ll = cluster_logliks(&self.clusters, &self.families, data, &norms);
        let logpi: Vec<f64> = self.pi.iter().map(|p| p.ln()).collect();
        let mut w = vec![0.0; self.k()];
        let mut total = Vec::with_capacity(data.n());
        for i in 0..data.n() {
            for k in 0..self.k() {
                w[k] = logpi[k] + ll[(i, k)];
            }
            total.push(logsumexp(&w));
        }
        crate::numeric::sum_sorted(&mut total)
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Cluster indices sorted by their parameters (mean shifts, then `L`, then `R`).
pub fn canonical_order(clusters: &[ClusterParams]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&clusters[a], &clusters[b]);
        lex_cmp(ca.mu.as_slice(), cb.mu.as_slice())
            .then_with(|| lex_cmp(ca.l.as_slice(), cb.l.as_slice()))
            .then_with(|| lex_cmp(ca.r.as_slice(), cb.r.as_slice()))
            .then(a.cmp(&b))
    });
    order
}

/// `n x K` assignment probabilities `propto pi_k p(y_i | k)`.
pub fn label_probabilities(state: &GibbsState, data: &Dataset) -> Result<DMatrix<f64>> {
    let norms = nb_norm_table(&data.y, &state.families);
    let ll = cluster_logliks(&state.clusters, &state.families, data, &norms);
    let k = state.k();
    let mut probs = DMatrix::zeros(data.n(), k);
    let mut w = vec![0.0; k];
    for i in 0..data.n() {
        for c in 0..k {
            w[c] = state.pi[c].ln() + ll[(i, c)];
        }
        let lse = normalize_log_weights(&mut w);
        if !lse.is_finite() {
            return Err(Error::numerical(format!("unit {i} has no cluster with finite weight")));
        }
        for c in 0..k {
            probs[(i, c)] = w[c];
        }
    }
    Ok(probs)
}

/// Draws every label by inverse CDF over the clusters in `order`.
pub fn step_labels(state: &mut GibbsState, data: &Dataset, order: &[usize], rng: &mut StreamRng) -> Result<()> {
    let probs = label_probabilities(state, data)?;
    for i in 0..data.n() {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = *order.last().unwrap_or(&0);
        for &c in order {
            acc += probs[(i, c)];
            if u < acc {
                chosen = c;
                break;
            }
        }
        state.z[i] = chosen;
    }
    Ok(())
}

/// Dirichlet parameters `alpha_k + n_k`.
pub fn pi_conditional(counts: &[usize], alpha: &[f64]) -> Vec<f64> {
    alpha.iter().zip(counts).map(|(a, &n)| a + n as f64).collect()
}

pub fn step_pi(state: &mut GibbsState, hyper: &HyperParams, order: &[usize], rng: &mut StreamRng) -> Result<()> {
    let params = pi_conditional(&state.counts(), &hyper.alpha);
    let ordered: Vec<f64> = order.iter().map(|&c| params[c]).collect();
    let draw = sample_dirichlet(&ordered, rng)?;
    for (pos, &c) in order.iter().enumerate() {
        state.pi[c] = draw[pos];
    }
    Ok(())
}

/// PG draws at the members' predictors; Gaussian slots are set to `1 / sigma2`.
pub fn step_omega(state: &mut GibbsState, data: &Dataset, rng: &mut StreamRng) -> Result<()> {
    let eta = state.member_etas(data);
    for i in 0..data.n() {
        for (j, fam) in state.families.iter().enumerate() {
            state.omega[(i, j)] = match *fam {
                ResponseFamily::Gaussian { sigma2 } => 1.0 / sigma2,
                ResponseFamily::Bernoulli => sample_pg(1.0, eta[(i, j)], rng)?,
                ResponseFamily::NegBin { r } => sample_pg(data.y[(i, j)] + r, eta[(i, j)], rng)?,
            };
        }
    }
    Ok(())
}

/// Inverse-gamma `(shape, scale)` of one Gaussian variance given its residuals.
pub fn sigma2_conditional(hyper: &HyperParams, residuals: &[f64]) -> (f64, f64) {
    let ss: f64 = residuals.iter().map(|r| r * r).sum();
    (hyper.a_sigma + 0.5 * residuals.len() as f64, hyper.b_sigma + 0.5 * ss)
}

pub fn step_sigma2(state: &mut GibbsState, data: &Dataset, hyper: &HyperParams, rng: &mut StreamRng) -> Result<()> {
    let eta = state.member_etas(data);
    for j in 0..data.q() {
        if !state.families[j].is_gaussian() {
            continue;
        }
        let resid: Vec<f64> = (0..data.n()).map(|i| data.y[(i, j)] - eta[(i, j)]).collect();
        let (shape, scale) = sigma2_conditional(hyper, &resid);
        let sigma2 = sample_inv_gamma(shape, scale, rng)?;
        state.families[j] = ResponseFamily::Gaussian { sigma2 };
        for i in 0..data.n() {
            state.omega[(i, j)] = 1.0 / sigma2;
        }
    }
    Ok(())
}

/// Gamma `(shape, rate)` of a dispersion: `a_r + sum L`, `b_r + sum log(1 + e^eta)`.
pub fn dispersion_conditional(hyper: &HyperParams, crt_total: u64, etas: &[f64]) -> (f64, f64) {
    let soft: f64 = etas.iter().map(|&e| log1pexp(e)).sum();
    (hyper.a_r + crt_total as f64, hyper.b_r + soft)
}

pub fn step_r(state: &mut GibbsState, data: &Dataset, hyper: &HyperParams, rng: &mut StreamRng) -> Result<()> {
    let eta = state.member_etas(data);
    for j in 0..data.q() {
        let ResponseFamily::NegBin { r } = state.families[j] else {
            continue;
        };
        let mut total = 0;
        for i in 0..data.n() {
            total += sample_crt(data.y[(i, j)] as u64, r, rng)?;
        }
        let etas: Vec<f64> = eta.column(j).iter().copied().collect();
        let (shape, rate) = dispersion_conditional(hyper, total, &etas);
        state.families[j] = ResponseFamily::NegBin { r: sample_gamma(shape, rate, rng)? };
    }
    Ok(())
}

/// Members' pseudo-data for cluster `k`: weights `omega`, linear terms `kappa`.
pub fn gibbs_block(state: &GibbsState, data: &Dataset, k: usize) -> WeightedBlock {
    let idx = state.members(k);
    let q = data.q();
    let mut scaled_base = vec![None; q];
    let c = DMatrix::from_fn(idx.len(), q, |row, j| {
        let y = data.y[(idx[row], j)];
        match state.families[j] {
            ResponseFamily::Gaussian { sigma2 } => y / sigma2,
            ResponseFamily::Bernoulli => y - 0.5,
            ResponseFamily::NegBin { r } => 0.5 * (y - r),
        }
    });
    for (j, fam) in state.families.iter().enumerate() {
        if let ResponseFamily::Gaussian { sigma2 } = *fam {
            scaled_base[j] = Some(1.0 / sigma2);
        }
    }
    WeightedBlock {
        x: data.x.select_rows(&idx),
        w: state.omega.select_rows(&idx),
        c,
        offsets: data.offsets.select_rows(&idx),
        scaled_base,
        base: DVector::from_element(idx.len(), 1.0),
    }
}

/// `(mean, variance)` of every `mu_kj`; an empty cluster gives `(0, sigma_mu2)`.
pub fn mu_conditional(cluster: &ClusterParams, block: &WeightedBlock, hyper: &HyperParams) -> Vec<(f64, f64)> {
    let xb = (&block.x * &cluster.l) * cluster.r.transpose();
    mu_moments(block, &xb, 1.0 / hyper.sigma_mu2)
}

pub fn step_mu(c: &mut ClusterParams, block: &WeightedBlock, hyper: &HyperParams, rng: &mut StreamRng) {
    for (j, (m, v)) in mu_conditional(c, block, hyper).into_iter().enumerate() {
        c.mu[j] = m + v.sqrt() * sample_std_normal(rng);
    }
}

/// Rows of `R` in column-index order.
pub fn step_r_rows(c: &mut ClusterParams, block: &WeightedBlock, rng: &mut StreamRng) -> Result<()> {
    let u = &block.x * &c.l;
    let prec = c.precision_diag();
    for j in 0..block.q() {
        let (q, b) = r_row_system(block, &u, j, c.mu[j], &prec);
        let row = sample_mvn_precision(&q, &b, rng)?;
        c.r.set_row(j, &row.transpose());
    }
    Ok(())
}

pub fn step_l(c: &mut ClusterParams, block: &WeightedBlock, rng: &mut StreamRng) -> Result<()> {
    let grams = block.weighted_grams();
    let (q, b) = l_system(block, &grams, &c.r, &c.mu, &c.precision_diag());
    c.l = unvec(&sample_mvn_precision(&q, &b, rng)?, c.p(), c.r_max());
    Ok(())
}

/// `phi` then `delta_1, ..., delta_r` from their gamma conditionals.
pub fn step_mgp(c: &mut ClusterParams, hyper: &HyperParams, rng: &mut StreamRng) -> Result<()> {
    let (shape, rate) = phi_conditional(c, hyper);
    c.phi = sample_gamma(shape, rate, rng)?;
    for h in 0..c.r_max() {
        let (shape, rate) = delta_conditional(c, h, hyper);
        c.delta[h] = sample_gamma(shape, rate, rng)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GibbsOptions {
    pub iters: usize,
    /// Defaults to half of `iters`.
    pub burnin: Option<usize>,
    pub thin: usize,
    /// Keeps `L`, `R` and the MGP scales at their initial values.
    #[serde(default)]
    pub pin_coefficients: bool,
}

impl Default for GibbsOptions {
    fn default() -> Self {
        GibbsOptions { iters: 2000, burnin: None, thin: 1, pin_coefficients: false }
    }
}

impl GibbsOptions {
    pub fn burnin(&self) -> usize {
        self.burnin.unwrap_or(self.iters / 2)
    }

    pub fn retained(&self) -> usize {
        (self.iters - self.burnin()) / self.thin
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::config("thinning interval must be at least 1"));
        }
        if self.burnin() >= self.iters {
            return Err(Error::config(format!(
                "burn-in {} must be smaller than the iteration count {}",
                self.burnin(),
                self.iters
            )));
        }
        Ok(())
    }
}

/// One full sweep.
pub fn gibbs_sweep(
    state: &mut GibbsState,
    data: &Dataset,
    hyper: &HyperParams,
    pin_coefficients: bool,
    rng: &mut StreamRng,
) -> Result<()> {
    let order = canonical_order(&state.clusters);
    step_labels(state, data, &order, rng)?;
    step_pi(state, hyper, &order, rng)?;
    step_sigma2(state, data, hyper, rng)?;
    step_r(state, data, hyper, rng)?;
    step_omega(state, data, rng)?;
    for &k in &order {
        let block = gibbs_block(state, data, k);
        let c = &mut state.clusters[k];
        step_mu(c, &block, hyper, rng);
        if !pin_coefficients {
            step_r_rows(c, &block, rng)?;
            step_l(c, &block, rng)?;
            step_mgp(c, hyper, rng)?;
        }
    }
    Ok(())
}

/// Retained draws plus the per-iteration observed-data log-likelihood.
#[derive(Debug, Clone)]
pub struct DrawArchive {
    pub z: Vec<Vec<usize>>,
    pub pi: Vec<Vec<f64>>,
    pub mu: Vec<Vec<DVector<f64>>>,
    pub l: Vec<Vec<DMatrix<f64>>>,
    pub r: Vec<Vec<DMatrix<f64>>>,
    /// Per draw, one entry per Gaussian column in `gaussian_columns` order.
    pub sigma2: Vec<Vec<f64>>,
    pub gaussian_columns: Vec<usize>,
    pub dispersion: Vec<Vec<f64>>,
    pub count_columns: Vec<usize>,
    pub loglik: Vec<f64>,
    pub last: GibbsState,
}

impl DrawArchive {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Fraction of retained draws placing each unit in each cluster.
    pub fn label_frequencies(&self) -> DMatrix<f64> {
        let k = self.last.k();
        let n = self.last.z.len();
        let mut f = DMatrix::zeros(n, k);
        for z in &self.z {
            for (i, &l) in z.iter().enumerate() {
                f[(i, l)] += 1.0;
            }
        }
        f / self.z.len().max(1) as f64
    }

    /// Writes one CSV per parameter block into `dir`, one row per retained draw.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let k = self.last.k();
        let write = |name: &str, header: Vec<String>, rows: Vec<Vec<String>>| -> Result<()> {
            let mut w = csv::Writer::from_path(dir.join(name))?;
            w.write_record(&header)?;
            for r in rows {
                w.write_record(&r)?;
            }
            w.flush()?;
            Ok(())
        };
        let n = self.last.z.len();
        write(
            "z.csv",
            (0..n).map(|i| format!("unit{i}")).collect(),
            self.z.iter().map(|z| z.iter().map(|l| l.to_string()).collect()).collect(),
        )?;
        write(
            "pi.csv",
            (0..k).map(|c| format!("pi{c}")).collect(),
            self.pi.iter().map(|p| p.iter().map(|v| v.to_string()).collect()).collect(),
        )?;
        let q = self.last.families.len();
        write(
            "mu.csv",
            (0..k).flat_map(|c| (0..q).map(move |j| format!("mu_{c}_{j}"))).collect(),
            self.mu.iter().map(|m| m.iter().flat_map(|v| v.iter().map(|x| x.to_string())).collect()).collect(),
        )?;
        let (p, rm) = (self.last.clusters[0].p(), self.last.clusters[0].r_max());
        write(
            "L.csv",
            (0..k).flat_map(|c| (0..rm).flat_map(move |h| (0..p).map(move |a| format!("L_{c}_{a}_{h}")))).collect(),
            self.l.iter().map(|m| m.iter().flat_map(|v| v.iter().map(|x| x.to_string())).collect()).collect(),
        )?;
        write(
            "R.csv",
            (0..k).flat_map(|c| (0..rm).flat_map(move |h| (0..q).map(move |j| format!("R_{c}_{j}_{h}")))).collect(),
            self.r.iter().map(|m| m.iter().flat_map(|v| v.iter().map(|x| x.to_string())).collect()).collect(),
        )?;
        write(
            "sigma2.csv",
            self.gaussian_columns.iter().map(|j| format!("sigma2_{j}")).collect(),
            self.sigma2.iter().map(|s| s.iter().map(|v| v.to_string()).collect()).collect(),
        )?;
        write(
            "dispersion.csv",
            self.count_columns.iter().map(|j| format!("r_{j}")).collect(),
            self.dispersion.iter().map(|s| s.iter().map(|v| v.to_string()).collect()).collect(),
        )?;
        write(
            "loglik.csv",
            vec!["iteration".into(), "loglik".into()],
            self.loglik.iter().enumerate().map(|(t, v)| vec![t.to_string(), v.to_string()]).collect(),
        )?;
        Ok(())
    }
}

/// Runs the chain from `state`, retaining every `thin`-th draw after burn-in.
pub fn run_gibbs_from(
    mut state: GibbsState,
    data: &Dataset,
    hyper: &HyperParams,
    opts: &GibbsOptions,
    rng: &mut StreamRng,
) -> Result<DrawArchive> {
    opts.validate()?;
    hyper.validate(state.k())?;
    let gaussian_columns: Vec<usize> = (0..data.q()).filter(|&j| state.families[j].is_gaussian()).collect();
    let count_columns: Vec<usize> = (0..data.q())
        .filter(|&j| matches!(state.families[j], ResponseFamily::NegBin { .. }))
        .collect();
    let cap = opts.retained();
    let mut archive = DrawArchive {
        z: Vec::with_capacity(cap),
        pi: Vec::with_capacity(cap),
        mu: Vec::with_capacity(cap),
        l: Vec::with_capacity(cap),
        r: Vec::with_capacity(cap),
        sigma2: Vec::with_capacity(cap),
        gaussian_columns,
        dispersion: Vec::with_capacity(cap),
        count_columns,
        loglik: Vec::with_capacity(opts.iters),
        last: state.clone(),
    };
    let burnin = opts.burnin();
    for t in 0..opts.iters {
        gibbs_sweep(&mut state, data, hyper, opts.pin_coefficients, rng)
            .map_err(|e| Error::numerical(format!("iteration {t}: {e}")))?;
        archive.loglik.push(state.observed_loglik(data));
        if t >= burnin && (t + 1 - burnin).is_multiple_of(opts.thin) {
            archive.z.push(state.z.clone());
            archive.pi.push(state.pi.clone());
            archive.mu.push(state.clusters.iter().map(|c| c.mu.clone()).collect());
            archive.l.push(state.clusters.iter().map(|c| c.l.clone()).collect());
            archive.r.push(state.clusters.iter().map(|c| c.r.clone()).collect());
            archive.sigma2.push(
                archive
                    .gaussian_columns
                    .iter()
                    .map(|&j| match state.families[j] {
                        ResponseFamily::Gaussian { sigma2 } => sigma2,
                        _ => unreachable!("column {j} is Gaussian"),
                    })
                    .collect(),
            );
            archive.dispersion.push(
                archive
                    .count_columns
                    .iter()
                    .map(|&j| match state.families[j] {
                        ResponseFamily::NegBin { r } => r,
                        _ => unreachable!("column {j} is a count column"),
                    })
                    .collect(),
            );
        }
    }
    archive.last = state;
    Ok(archive)
}

/// Initializes from k-means and runs the chain on the stream derived from `seed`.
pub fn run_gibbs(spec: &ModelSpec, data: &Dataset, opts: &GibbsOptions, seed: u64) -> Result<DrawArchive> {
    spec.validate()?;
    validate_dataset(data, spec).into_result()?;
    let mut rng = StreamRng::derive(seed, &[GIBBS_STREAM]);
    let state = GibbsState::initialize(spec, data, &mut rng)?;
    run_gibbs_from(state, data, &spec.hyper, opts, &mut rng)
}

/// Fit summary of an archive: final draw, label frequencies as responsibilities,
/// label draws, and the log-likelihood trace.
pub fn archive_into_fit(archive: DrawArchive, spec: &ModelSpec, seed: u64) -> FitResult {
    let gamma = archive.label_frequencies();
    FitResult {
        mode: FitMode::Gibbs,
        spec: spec.clone(),
        clusters: archive.last.clusters.clone(),
        global: GlobalParams { pi: archive.last.pi.clone(), families: archive.last.families.clone() },
        gamma,
        z_draws: Some(archive.z),
        objective_trace: archive.loglik,
        seed,
    }
}

pub fn gibbs_fit(spec: &ModelSpec, data: &Dataset, opts: &GibbsOptions, seed: u64) -> Result<FitResult> {
    let archive = run_gibbs(spec, data, opts, seed)?;
    Ok(archive_into_fit(archive, spec, seed))
}
