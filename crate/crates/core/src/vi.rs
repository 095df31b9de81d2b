//! Coordinate-ascent variational fitter.
//!
//! Each outer iteration replaces the PG weights by their conditional expectations
//! at the current predictors, refits `mu`, the rows of `R` and `L` for every
//! cluster by weighted ridge solves, moves the MGP scales and Gaussian variances to
//! their conditional modes, and finally refreshes the mixing weights and the
//! responsibilities. The traced objective is the plug-in log pointwise predictive
//! density `sum_i log sum_k pi_k exp(l_ik)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{hard_gamma, init_from_labels, initial_labels};
use crate::likelihood::{cluster_logliks, nb_norm_table, pg_mean};
use crate::linalg::cholesky_jitter;
use crate::mgp::mgp_map_update_at;
use crate::model::{
    validate_dataset, ClusterParams, Dataset, FitMode, FitResult, GlobalParams, HyperParams,
    ModelSpec, ResponseFamily,
};
use crate::normal_eq::{l_system, mu_moments, r_row_system, unvec, WeightedBlock};
use crate::numeric::logsumexp;
use crate::random::StreamRng;

/// Stream tag for initialization draws.
const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViOptions {
    pub max_iter: usize,
    /// Relative objective change that counts as converged.
    pub tol: f64,
    pub restarts: usize,
    /// When false the MGP scales stay at their initial values.
    #[serde(default = "yes")]
    pub update_shrinkage: bool,
    /// When true the MGP scales see `E||l_h||^2 + E||r_h||^2` under the Gaussian
    /// ridge posteriors; when false only the squared point estimates.
    #[serde(default = "yes")]
    pub expected_energy: bool,
}

fn yes() -> bool {
    true
}

impl Default for ViOptions {
    fn default() -> Self {
        ViOptions {
            max_iter: 500,
            tol: 1e-7,
            restarts: 3,
            update_shrinkage: true,
            expected_energy: true,
        }
    }
}

impl ViOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::config("max_iter must be at least 1"));
        }
        if self.restarts == 0 {
            return Err(Error::config("at least one restart is required"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::config("tolerance must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ViState {
    /// n x K responsibilities.
    pub gamma: DMatrix<f64>,
    pub clusters: Vec<ClusterParams>,
    pub global: GlobalParams,
    /// Expected PG weights, one n x q matrix per cluster.
    pub omega_bar: Vec<DMatrix<f64>>,
    pub objective: Vec<f64>,
    /// Per cluster, the trace of the inverse precision of each column of `R`
    /// and of `L` from their latest solves.
    pub r_spread: Vec<DVector<f64>>,
    pub l_spread: Vec<DVector<f64>>,
    nb_norms: DMatrix<f64>,
}

impl ViState {
    pub fn new(
        data: &Dataset,
        gamma: DMatrix<f64>,
        clusters: Vec<ClusterParams>,
        global: GlobalParams,
    ) -> Result<Self> {
        if gamma.nrows() != data.n() || gamma.ncols() != clusters.len() || global.pi.len() != clusters.len() {
            return Err(Error::config(format!(
                "state shapes disagree: gamma {:?}, {} clusters, {} weights, n = {}",
                gamma.shape(),
                clusters.len(),
                global.pi.len(),
                data.n()
            )));
        }
        for c in &clusters {
            c.check_shape(data.p(), data.q(), clusters[0].r_max())?;
        }
        let nb_norms = nb_norm_table(&data.y, &global.families);
        let omega_bar = vec![DMatrix::zeros(data.n(), data.q()); clusters.len()];
        let spread = vec![DVector::zeros(clusters[0].r_max()); clusters.len()];
        Ok(ViState {
            gamma,
            clusters,
            global,
            omega_bar,
            objective: Vec::new(),
            r_spread: spread.clone(),
            l_spread: spread,
            nb_norms,
        })
    }

    /// State initialized from hard labels.
    pub fn from_labels(spec: &ModelSpec, data: &Dataset, labels: &[usize]) -> Result<Self> {
        let (clusters, global) = init_from_labels(spec, data, labels)?;
        ViState::new(data, hard_gamma(labels, spec.k), clusters, global)
    }

    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    /// `n x K` table of per-unit log-likelihoods under the current parameters.
    pub fn logliks(&self, data: &Dataset) -> DMatrix<f64> {
        cluster_logliks(&self.clusters, &self.global.families, data, &self.nb_norms)
    }
}

/// Expected PG weights at the current predictors; Gaussian slots get `1 / sigma2`.
pub fn vi_expect_omega(state: &mut ViState, data: &Dataset) {
    for k in 0..state.k() {
        let eta = state.clusters[k].etas(data);
        let om = &mut state.omega_bar[k];
        for (j, fam) in state.global.families.iter().enumerate() {
            for i in 0..data.n() {
                om[(i, j)] = match *fam {
                    ResponseFamily::Gaussian { sigma2 } => 1.0 / sigma2,
                    ResponseFamily::Bernoulli => pg_mean(1.0, eta[(i, j)]),
                    ResponseFamily::NegBin { r } => pg_mean(data.y[(i, j)] + r, eta[(i, j)]),
                };
            }
        }
    }
}

/// Weighted pseudo-data of cluster `k`: `w = gamma_ik E[omega_ij]`,
/// `c = gamma_ik kappa_ij`.
pub fn vi_block(state: &ViState, data: &Dataset, k: usize) -> WeightedBlock {
    let (n, q) = (data.n(), data.q());
    let g = state.gamma.column(k);
    let om = &state.omega_bar[k];
    let fams = &state.global.families;
    let mut c = DMatrix::zeros(n, q);
    let mut scaled_base = vec![None; q];
    for (j, fam) in fams.iter().enumerate() {
        for i in 0..n {
            let y = data.y[(i, j)];
            let kappa = match *fam {
                ResponseFamily::Gaussian { sigma2 } => y / sigma2,
                ResponseFamily::Bernoulli => y - 0.5,
                ResponseFamily::NegBin { r } => 0.5 * (y - r),
            };
            c[(i, j)] = g[i] * kappa;
        }
        if let ResponseFamily::Gaussian { sigma2 } = *fam {
            scaled_base[j] = Some(1.0 / sigma2);
        }
    }
    let w = DMatrix::from_fn(n, q, |i, j| g[i] * om[(i, j)]);
    WeightedBlock {
        x: data.x.clone(),
        w,
        c,
        offsets: data.offsets.clone(),
        scaled_base,
        base: g.into_owned(),
    }
}

fn update_mu_for(c: &mut ClusterParams, block: &WeightedBlock, prior_prec: f64) {
    let xb = (&block.x * &c.l) * c.r.transpose();
    for (j, (m, _)) in mu_moments(block, &xb, prior_prec).into_iter().enumerate() {
        c.mu[j] = m;
    }
}

/// Solves for every row of `R`; returns the per-column trace of the inverse
/// precisions.
fn update_r_for(c: &mut ClusterParams, block: &WeightedBlock) -> Result<DVector<f64>> {
    let u = &block.x * &c.l;
    let prec = c.precision_diag();
    let mut spread = DVector::zeros(c.r_max());
    for j in 0..block.q() {
        let (q, b) = r_row_system(block, &u, j, c.mu[j], &prec);
        let chol = cholesky_jitter(&q)?;
        c.r.set_row(j, &chol.solve(&b).transpose());
        spread += chol.inverse().diagonal();
    }
    Ok(spread)
}

fn update_l_for(c: &mut ClusterParams, block: &WeightedBlock) -> Result<DVector<f64>> {
    let grams = block.weighted_grams();
    let (q, b) = l_system(block, &grams, &c.r, &c.mu, &c.precision_diag());
    let chol = cholesky_jitter(&q)?;
    let (p, r) = (c.p(), c.r_max());
    c.l = unvec(&chol.solve(&b), p, r);
    let diag = chol.inverse().diagonal();
    Ok(DVector::from_fn(r, |h, _| diag.rows(h * p, p).sum()))
}

/// Weighted least-squares mean shifts with prior precision `1 / sigma_mu2`.
pub fn vi_update_mu(state: &mut ViState, data: &Dataset, hyper: &HyperParams) {
    for k in 0..state.k() {
        let block = vi_block(state, data, k);
        update_mu_for(&mut state.clusters[k], &block, 1.0 / hyper.sigma_mu2);
    }
}

/// Ridge solve for each row of every `R_k`.
pub fn vi_update_r(state: &mut ViState, data: &Dataset) -> Result<()> {
    for k in 0..state.k() {
        let block = vi_block(state, data, k);
        state.r_spread[k] = update_r_for(&mut state.clusters[k], &block)?;
    }
    Ok(())
}

/// Kronecker normal-equation solve for every `L_k`.
pub fn vi_update_l(state: &mut ViState, data: &Dataset) -> Result<()> {
    for k in 0..state.k() {
        let block = vi_block(state, data, k);
        state.l_spread[k] = update_l_for(&mut state.clusters[k], &block)?;
    }
    Ok(())
}

/// Gamma-mode updates of every cluster's MGP scales. With `expected` the column
/// energies include the posterior spread of the latest `R` and `L` solves.
pub fn vi_update_mgp(state: &mut ViState, hyper: &HyperParams, expected: bool) {
    for (k, c) in state.clusters.iter_mut().enumerate() {
        let mut s = c.column_energy();
        if expected {
            s += &state.r_spread[k] + &state.l_spread[k];
        }
        mgp_map_update_at(c, &s, hyper);
    }
}

/// Inverse-gamma mode `(b + rss/2) / (a + n/2 + 1)` for one Gaussian column.
pub fn sigma2_mode(hyper: &HyperParams, n: f64, rss: f64) -> f64 {
    (hyper.b_sigma + 0.5 * rss) / (hyper.a_sigma + 0.5 * n + 1.0)
}

/// Gaussian variances at the mode of their responsibility-weighted conditional.
pub fn vi_update_sigma2(state: &mut ViState, data: &Dataset, hyper: &HyperParams) {
    let gaussian: Vec<usize> = (0..data.q())
        .filter(|&j| state.global.families[j].is_gaussian())
        .collect();
    if gaussian.is_empty() {
        return;
    }
    let mut rss = vec![0.0; data.q()];
    for k in 0..state.k() {
        let eta = state.clusters[k].etas(data);
        for &j in &gaussian {
            for i in 0..data.n() {
                let r = data.y[(i, j)] - eta[(i, j)];
                rss[j] += state.gamma[(i, k)] * r * r;
            }
        }
    }
    for &j in &gaussian {
        state.global.families[j] = ResponseFamily::Gaussian {
            sigma2: sigma2_mode(hyper, data.n() as f64, rss[j]),
        };
    }
}

/// `pi_k = (alpha_k + sum_i gamma_ik) / (sum alpha + n)`.
pub fn vi_update_pi(gamma: &DMatrix<f64>, alpha: &[f64]) -> Vec<f64> {
    let n = gamma.nrows() as f64;
    let asum: f64 = alpha.iter().sum();
    (0..gamma.ncols())
        .map(|k| (alpha[k] + gamma.column(k).sum()) / (asum + n))
        .collect()
}

/// Responsibilities `gamma_ik propto pi_k exp(l_ik)` and the plug-in lppd.
pub fn responsibilities(logliks: &DMatrix<f64>, pi: &[f64]) -> Result<(DMatrix<f64>, f64)> {
    let (n, k) = logliks.shape();
    let logpi: Vec<f64> = pi.iter().map(|p| p.ln()).collect();
    let mut gamma = DMatrix::zeros(n, k);
    let mut lppd = Vec::with_capacity(n);
    let mut w = vec![0.0; k];
    for i in 0..n {
        for c in 0..k {
            w[c] = logpi[c] + logliks[(i, c)];
        }
        let lse = logsumexp(&w);
        if !lse.is_finite() {
            return Err(Error::numerical(format!(
                "unit {i} has no finite cluster weight (log-sum-exp {lse})"
            )));
        }
        for c in 0..k {
            gamma[(i, c)] = (w[c] - lse).exp();
        }
        lppd.push(lse);
    }
    Ok((gamma, crate::numeric::sum_sorted(&mut lppd)))
}

/// Mixing weights from the incoming responsibilities, then responsibilities under
/// the new weights. Returns the plug-in lppd.
pub fn vi_update_gamma_pi(state: &mut ViState, data: &Dataset, hyper: &HyperParams) -> Result<f64> {
    state.global.pi = vi_update_pi(&state.gamma, &hyper.alpha);
    let (gamma, lppd) = responsibilities(&state.logliks(data), &state.global.pi)?;
    state.gamma = gamma;
    Ok(lppd)
}

/// One outer iteration; returns the objective.
pub fn vi_iteration(state: &mut ViState, data: &Dataset, hyper: &HyperParams, opts: &ViOptions) -> Result<f64> {
    vi_expect_omega(state, data);
    let prior_prec = 1.0 / hyper.sigma_mu2;
    for k in 0..state.k() {
        let block = vi_block(state, data, k);
        let c = &mut state.clusters[k];
        update_mu_for(c, &block, prior_prec);
        state.r_spread[k] = update_r_for(c, &block)?;
        state.l_spread[k] = update_l_for(c, &block)?;
    }
    if opts.update_shrinkage {
        vi_update_mgp(state, hyper, opts.expected_energy);
    }
    vi_update_sigma2(state, data, hyper);
    vi_update_gamma_pi(state, data, hyper)
}

/// Iterates from `state` until the relative objective change drops below `tol` or
/// `max_iter` iterations have run.
pub fn vi_run(mut state: ViState, data: &Dataset, hyper: &HyperParams, opts: &ViOptions) -> Result<ViState> {
    opts.validate()?;
    for it in 0..opts.max_iter {
        let obj = vi_iteration(&mut state, data, hyper, opts)
            .map_err(|e| Error::numerical(format!("iteration {it}: {e}")))?;
        if !obj.is_finite() {
            return Err(Error::numerical(format!("objective is {obj} at iteration {it}")));
        }
        let prev = state.objective.last().copied();
        state.objective.push(obj);
        if let Some(prev) = prev {
            if (obj - prev).abs() <= opts.tol * prev.abs() {
                break;
            }
        }
    }
    Ok(state)
}

pub fn state_into_fit(state: ViState, spec: &ModelSpec, seed: u64) -> FitResult {
    FitResult {
        mode: FitMode::Vi,
        spec: spec.clone(),
        clusters: state.clusters,
        global: state.global,
        gamma: state.gamma,
        z_draws: None,
        objective_trace: state.objective,
        seed,
    }
}

/// Best of `opts.restarts` runs, each started from k-means on the response features
/// with its own random stream, ranked by final objective.
pub fn vi_fit(spec: &ModelSpec, data: &Dataset, opts: &ViOptions, seed: u64) -> Result<FitResult> {
    spec.validate()?;
    opts.validate()?;
    validate_dataset(data, spec).into_result()?;
    let mut best: Option<ViState> = None;
    let mut last_err = None;
    for restart in 0..opts.restarts {
        let mut rng = StreamRng::derive(seed, &[INIT_STREAM, restart as u64]);
        let labels = initial_labels(data, spec, &mut rng)?;
        let run = ViState::from_labels(spec, data, &labels).and_then(|s| vi_run(s, data, &spec.hyper, opts));
        match run {
            Ok(state) => {
                let obj = *state.objective.last().unwrap();
                if best.as_ref().is_none_or(|b| obj > *b.objective.last().unwrap()) {
                    best = Some(state);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some(state) => Ok(state_into_fit(state, spec, seed)),
        None => Err(last_err.unwrap_or_else(|| Error::numerical("no restart completed"))),
    }
}

/// Row sums of the responsibilities, for simplex checks.
pub fn gamma_row_sums(gamma: &DMatrix<f64>) -> DVector<f64> {
    gamma.column_sum()
}
