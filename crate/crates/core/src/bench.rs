//! Replication harness: simulated scenarios, the proposed pipeline against the
//! baseline clusterers, predictive metrics and aggregated tables.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{baseline_gmm_diag, baseline_kmeans, baseline_pca_kmeans, joint_features};
use crate::error::{Error, Result};
use crate::metrics::{partition_metrics, soft_classification_error, PartitionMetrics};
use crate::model::{Dataset, FitResult, HyperParams, ResponseFamily};
use crate::numeric::logistic;
use crate::psm::{cluster_psm, ClusterOptions};
use crate::random::StreamRng;
use crate::selection::{grid_search, select_model, GridSpec, SelectOptions};
use crate::sim::{feature_transform, generate_scenario, Scenario};
use crate::vi::ViOptions;

const REP_STREAM: u64 = 0xbe7c;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Bmlc,
    KMeansY,
    KMeansXY,
    PcaKMeans,
    GmmDiag,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Bmlc, Method::KMeansY, Method::KMeansXY, Method::PcaKMeans, Method::GmmDiag];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Bmlc => "BMLC-VI-PSM",
            Method::KMeansY => "KMeans(Y)",
            Method::KMeansXY => "KMeans(X,Y)",
            Method::PcaKMeans => "PCA-KMeans",
            Method::GmmDiag => "GMM-diag",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name().to_ascii_lowercase() == key)
            .or(match key.as_str() {
                "bmlc" => Some(Method::Bmlc),
                "kmeans" => Some(Method::KMeansY),
                "kmeans-xy" => Some(Method::KMeansXY),
                "pca" => Some(Method::PcaKMeans),
                "gmm" => Some(Method::GmmDiag),
                _ => None,
            })
            .ok_or_else(|| Error::config(format!("unknown method '{s}'")))
    }
}

/// Fit-quality metrics per family present; `None` for absent families.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictiveMetrics {
    pub gaussian_mse: Option<f64>,
    pub brier: Option<f64>,
    pub bernoulli_accuracy: Option<f64>,
    pub nb_mse: Option<f64>,
}

/// `n x q` responsibility-weighted mixture means.
pub fn mixture_predictions(fit: &FitResult, data: &Dataset) -> DMatrix<f64> {
    let mut pred = DMatrix::zeros(data.n(), data.q());
    for (k, c) in fit.clusters.iter().enumerate() {
        let eta = c.etas(data);
        for (j, fam) in fit.global.families.iter().enumerate() {
            for i in 0..data.n() {
                let m = match *fam {
                    ResponseFamily::Gaussian { .. } => eta[(i, j)],
                    ResponseFamily::Bernoulli => logistic(eta[(i, j)]),
                    ResponseFamily::NegBin { r } => r * eta[(i, j)].exp(),
                };
                pred[(i, j)] += fit.gamma[(i, k)] * m;
            }
        }
    }
    pred
}

/// Squared errors pooled over all columns of each family.
pub fn predictive_metrics(fit: &FitResult, data: &Dataset) -> PredictiveMetrics {
    scores_from_predictions(&mixture_predictions(fit, data), &data.y, &fit.global.families)
}

pub fn scores_from_predictions(pred: &DMatrix<f64>, y: &DMatrix<f64>, families: &[ResponseFamily]) -> PredictiveMetrics {
    let mut acc = [(0.0, 0usize); 3];
    let mut hits = 0usize;
    for (j, fam) in families.iter().enumerate() {
        let slot = match fam {
            ResponseFamily::Gaussian { .. } => 0,
            ResponseFamily::Bernoulli => 1,
            ResponseFamily::NegBin { .. } => 2,
        };
        for i in 0..y.nrows() {
            let e = pred[(i, j)] - y[(i, j)];
            acc[slot].0 += e * e;
            acc[slot].1 += 1;
            if slot == 1 && (pred[(i, j)] >= 0.5) == (y[(i, j)] == 1.0) {
                hits += 1;
            }
        }
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    PredictiveMetrics {
        gaussian_mse: mean(acc[0]),
        brier: mean(acc[1]),
        bernoulli_accuracy: (acc[1].1 > 0).then(|| hits as f64 / acc[1].1 as f64),
        nb_mse: mean(acc[2]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub grid: GridSpec,
    pub vi: ViOptions,
    pub select: SelectOptions,
    pub cluster: ClusterOptions,
    /// Threads for replications; grid cells inside a replication run serially.
    pub workers: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            grid: GridSpec { k: vec![1, 2, 3], r_max: vec![1, 2], r_nb: vec![5.0, 10.0, 20.0] },
            vi: ViOptions::default(),
            select: SelectOptions::default(),
            cluster: ClusterOptions::default(),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepRecord {
    pub scenario: u32,
    pub method: Method,
    pub rep: usize,
    pub metrics: PartitionMetrics,
    /// Proposed method only.
    pub sce: Option<f64>,
    pub predictive: Option<PredictiveMetrics>,
    pub k_hat: Option<usize>,
    pub r_hat: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepFailure {
    pub scenario: u32,
    pub method: Method,
    pub rep: usize,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct BenchResult {
    pub records: Vec<RepRecord>,
    pub failures: Vec<RepFailure>,
}

/// Generator seed of replication `rep` of `scenario`.
pub fn rep_seed(seed: u64, scenario: u32, rep: usize) -> u64 {
    StreamRng::derive(seed, &[REP_STREAM, scenario as u64, rep as u64]).next_u64()
}

/// Fits the grid, selects a cell and partitions its similarity matrix.
pub fn run_bmlc(data: &Dataset, families: &[ResponseFamily], truth: &[usize], cfg: &BenchConfig, seed: u64) -> Result<RepRecord> {
    let grid = grid_search(data, families, &HyperParams::for_k(1), &cfg.grid, &cfg.vi, seed, 1)?;
    let sel = select_model(&grid, &cfg.select)?;
    let fit = grid.rows[sel.index]
        .fit
        .as_ref()
        .ok_or_else(|| Error::numerical("selected grid cell carries no fit"))?;
    let part = cluster_psm(fit, sel.cell.k, &cfg.cluster)?;
    Ok(RepRecord {
        scenario: 0,
        method: Method::Bmlc,
        rep: 0,
        metrics: partition_metrics(&part.labels, truth)?,
        sce: Some(soft_classification_error(&fit.gamma, truth)?),
        predictive: Some(predictive_metrics(fit, data)),
        k_hat: Some(sel.cell.k),
        r_hat: Some(sel.cell.r_max),
    })
}

/// Baseline labels at the true number of clusters.
pub fn run_baseline(method: Method, data: &Dataset, families: &[ResponseFamily], k: usize, seed: u64) -> Result<Vec<usize>> {
    let feats = feature_transform(&data.y, families)?.values;
    match method {
        Method::KMeansY => baseline_kmeans(&feats, k, seed),
        Method::KMeansXY => baseline_kmeans(&joint_features(&data.x, &feats), k, seed),
        Method::PcaKMeans => baseline_pca_kmeans(&joint_features(&data.x, &feats), k, None, seed),
        Method::GmmDiag => baseline_gmm_diag(&feats, k, seed),
        Method::Bmlc => Err(Error::config("the proposed method is not a baseline")),
    }
}

/// Every (scenario, rep, method) combination; failed runs are logged and kept apart.
pub fn run_benchmark(scenarios: &[Scenario], methods: &[Method], reps: usize, seed: u64, cfg: &BenchConfig) -> Result<BenchResult> {
    if reps == 0 {
        return Err(Error::config("need at least one replication"));
    }
    for sc in scenarios {
        sc.validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..scenarios.len()).flat_map(|s| (0..reps).map(move |r| (s, r))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<Vec<std::result::Result<RepRecord, RepFailure>>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(s, rep)| {
                let sc = &scenarios[s];
                let data_seed = rep_seed(seed, sc.id, rep);
                let fail = |method: Method, e: &Error| RepFailure { scenario: sc.id, method, rep, error: e.to_string() };
                let sim = match generate_scenario(sc, data_seed) {
                    Ok(d) => d,
                    Err(e) => return methods.iter().map(|&m| Err(fail(m, &e))).collect(),
                };
                methods
                    .iter()
                    .map(|&method| {
                        let run = || -> Result<RepRecord> {
                            if method == Method::Bmlc {
                                run_bmlc(&sim.data, &sim.families, &sim.labels, cfg, data_seed)
                            } else {
                                let labels = run_baseline(method, &sim.data, &sim.families, sc.k_true, data_seed)?;
                                Ok(RepRecord {
                                    scenario: 0,
                                    method,
                                    rep: 0,
                                    metrics: partition_metrics(&labels, &sim.labels)?,
                                    sce: None,
                                    predictive: None,
                                    k_hat: None,
                                    r_hat: None,
                                })
                            }
                        };
                        run()
                            .map(|r| RepRecord { scenario: sc.id, rep, ..r })
                            .map_err(|e| {
                                log::warn!("scenario {} rep {rep} {method} failed: {e}", sc.id);
                                fail(method, &e)
                            })
                    })
                    .collect()
            })
            .collect()
    });
    let mut out = BenchResult::default();
    for o in outcomes.into_iter().flatten() {
        match o {
            Ok(r) => out.records.push(r),
            Err(f) => out.failures.push(f),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(v: &[f64]) -> Self {
        MeanSd { mean: crate::numeric::mean(v), sd: crate::numeric::variance(v).sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub scenario: u32,
    pub method: Method,
    pub reps: usize,
    pub failed: usize,
    pub accuracy: MeanSd,
    pub ari: MeanSd,
    pub macro_f1: MeanSd,
    pub hce: MeanSd,
    pub sce: Option<MeanSd>,
    pub k_hat: Option<f64>,
    pub r_hat: Option<f64>,
    /// Mean `|r_hat - r_true|`.
    pub rank_error: Option<f64>,
    /// Proposed-method accuracy minus the best baseline's, on the proposed row.
    pub gain: Option<f64>,
}

/// Proposed accuracy minus the best baseline accuracy.
pub fn gain_over_baselines(proposed: f64, baselines: &[f64]) -> Option<f64> {
    baselines.iter().copied().reduce(f64::max).map(|b| proposed - b)
}

impl BenchResult {
    pub fn records_for(&self, scenario: u32, method: Method) -> Vec<&RepRecord> {
        self.records.iter().filter(|r| r.scenario == scenario && r.method == method).collect()
    }

    /// Mean and SD per (scenario, method), in first-seen order.
    pub fn aggregate(&self, scenarios: &[Scenario]) -> Vec<Aggregate> {
        let mut keys: Vec<(u32, Method)> = Vec::new();
        for r in self.records.iter().map(|r| (r.scenario, r.method)).chain(self.failures.iter().map(|f| (f.scenario, f.method))) {
            if !keys.contains(&r) {
                keys.push(r);
            }
        }
        keys.sort_by_key(|&(s, m)| (s, Method::ALL.iter().position(|x| *x == m)));
        let mut rows: Vec<Aggregate> = keys
            .iter()
            .map(|&(s, m)| {
                let recs = self.records_for(s, m);
                let col = |f: &dyn Fn(&RepRecord) -> f64| MeanSd::of(&recs.iter().map(|r| f(r)).collect::<Vec<_>>());
                let opt_mean = |f: &dyn Fn(&RepRecord) -> Option<f64>| {
                    let v: Vec<f64> = recs.iter().filter_map(|r| f(r)).collect();
                    (!v.is_empty()).then(|| crate::numeric::mean(&v))
                };
                let r_true = scenarios.iter().find(|sc| sc.id == s).map(|sc| sc.r_true as f64);
                let sce_v: Vec<f64> = recs.iter().filter_map(|r| r.sce).collect();
                Aggregate {
                    scenario: s,
                    method: m,
                    reps: recs.len(),
                    failed: self.failures.iter().filter(|f| f.scenario == s && f.method == m).count(),
                    accuracy: col(&|r| r.metrics.accuracy),
                    ari: col(&|r| r.metrics.ari),
                    macro_f1: col(&|r| r.metrics.macro_f1),
                    hce: col(&|r| r.metrics.hce),
                    sce: (!sce_v.is_empty()).then(|| MeanSd::of(&sce_v)),
                    k_hat: opt_mean(&|r| r.k_hat.map(|v| v as f64)),
                    r_hat: opt_mean(&|r| r.r_hat.map(|v| v as f64)),
                    rank_error: r_true.and_then(|t| opt_mean(&|r| r.r_hat.map(|v| (v as f64 - t).abs()))),
                    gain: None,
                }
            })
            .collect();
        let snapshot = rows.clone();
        for row in rows.iter_mut().filter(|r| r.method == Method::Bmlc && r.reps > 0) {
            let base: Vec<f64> = snapshot
                .iter()
                .filter(|b| b.scenario == row.scenario && b.method != Method::Bmlc && b.reps > 0)
                .map(|b| b.accuracy.mean)
                .collect();
            row.gain = gain_over_baselines(row.accuracy.mean, &base);
        }
        rows
    }
}

/// Long format: `scenario,method,rep,metric,value`.
pub fn write_tidy_csv<W: Write>(result: &BenchResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "method", "rep", "metric", "value"])?;
    for r in &result.records {
        let mut put = |metric: &str, v: f64| {
            w.write_record([r.scenario.to_string(), r.method.to_string(), r.rep.to_string(), metric.to_string(), v.to_string()])
        };
        put("accuracy", r.metrics.accuracy)?;
        put("ari", r.metrics.ari)?;
        put("macro_f1", r.metrics.macro_f1)?;
        put("hce", r.metrics.hce)?;
        let extra = [
            ("sce", r.sce),
            ("k_hat", r.k_hat.map(|v| v as f64)),
            ("r_hat", r.r_hat.map(|v| v as f64)),
            ("gaussian_mse", r.predictive.and_then(|p| p.gaussian_mse)),
            ("brier", r.predictive.and_then(|p| p.brier)),
            ("bernoulli_accuracy", r.predictive.and_then(|p| p.bernoulli_accuracy)),
            ("nb_mse", r.predictive.and_then(|p| p.nb_mse)),
        ];
        for (name, v) in extra {
            if let Some(v) = v {
                put(name, v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per (scenario, method) with means and SDs.
pub fn write_aggregate_csv<W: Write>(rows: &[Aggregate], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scenario", "method", "reps", "failed", "accuracy", "accuracy_sd", "ari", "ari_sd", "macro_f1", "macro_f1_sd",
        "hce", "hce_sd", "sce", "k_hat", "r_hat", "rank_error", "gain",
    ])?;
    let f = |v: f64| format!("{v:.4}");
    let o = |v: Option<f64>| v.map(f).unwrap_or_default();
    for a in rows {
        w.write_record([
            a.scenario.to_string(),
            a.method.to_string(),
            a.reps.to_string(),
            a.failed.to_string(),
            f(a.accuracy.mean),
            f(a.accuracy.sd),
            f(a.ari.mean),
            f(a.ari.sd),
            f(a.macro_f1.mean),
            f(a.macro_f1.sd),
            f(a.hce.mean),
            f(a.hce.sd),
            o(a.sce.map(|s| s.mean)),
            o(a.k_hat),
            o(a.r_hat),
            o(a.rank_error),
            o(a.gain),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prediction_score_examples() {
        let y = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let g = [ResponseFamily::Gaussian { sigma2: 1.0 }];
        assert_eq!(scores_from_predictions(&y, &y, &g).gaussian_mse, Some(0.0));
        let yb = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 0.0, 1.0]);
        let s = scores_from_predictions(&DMatrix::from_element(4, 1, 0.5), &yb, &[ResponseFamily::Bernoulli]);
        assert_eq!(s.brier, Some(0.25));
        assert_eq!(s.gaussian_mse, None);
        let counts = [0.0, 3.0, 5.0, 1.0, 6.0];
        let yc = DMatrix::from_column_slice(5, 1, &counts);
        let m = crate::numeric::mean(&counts);
        let s = scores_from_predictions(&DMatrix::from_element(5, 1, m), &yc, &[ResponseFamily::NegBin { r: 2.0 }]);
        let pop_var = counts.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / 5.0;
        assert!((s.nb_mse.unwrap() - pop_var).abs() < 1e-12);
    }

    #[test]
    fn mixture_prediction_weights_clusters() {
        let data = Dataset::new(DMatrix::zeros(2, 1), DMatrix::from_column_slice(2, 1, &[0.0, 1.0]), None).unwrap();
        let mut c0 = crate::model::ClusterParams::zeros(1, 1, 1);
        let mut c1 = c0.clone();
        c0.mu[0] = -1.0;
        c1.mu[0] = 3.0;
        let fit = FitResult {
            mode: crate::model::FitMode::Vi,
            spec: crate::model::ModelSpec::new(2, 1, vec![ResponseFamily::Gaussian { sigma2: 1.0 }]).unwrap(),
            clusters: vec![c0, c1],
            global: crate::model::GlobalParams { pi: vec![0.5, 0.5], families: vec![ResponseFamily::Gaussian { sigma2: 1.0 }] },
            gamma: DMatrix::from_row_slice(2, 2, &[0.75, 0.25, 0.0, 1.0]),
            z_draws: None,
            objective_trace: vec![],
            seed: 0,
        };
        let p = mixture_predictions(&fit, &data);
        assert_eq!((p[(0, 0)], p[(1, 0)]), (0.0, 3.0));
    }

    #[test]
    fn gain_sign_convention() {
        let cases = [(0.996, 0.986, 0.010), (0.960, 0.955, 0.005), (0.900, 0.901, -0.001), (0.880, 0.894, -0.014)];
        for (bmlc, best, gain) in cases {
            let g = gain_over_baselines(bmlc, &[best - 0.1, best, best - 0.2]).unwrap();
            assert!((g - gain).abs() < 1e-12);
        }
        assert_eq!(gain_over_baselines(0.9, &[]), None);
    }

    #[test]
    fn single_rep_single_method() {
        let mut sc = Scenario::standard(1).unwrap();
        sc.n = 80;
        sc.p = 5;
        let res = run_benchmark(&[sc.clone()], &[Method::KMeansY], 1, 3, &BenchConfig::default()).unwrap();
        assert_eq!(res.records.len(), 1);
        let agg = res.aggregate(&[sc]);
        assert_eq!(agg.len(), 1);
        let m = res.records[0].metrics;
        assert_eq!(m.hce, 1.0 - m.accuracy);
        let mut buf = Vec::new();
        write_aggregate_csv(&agg, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
    }

    #[test]
    fn proposed_method_reports_selection() {
        let mut sc = Scenario::standard(4).unwrap();
        sc.n = 200;
        sc.p = 8;
        let cfg = BenchConfig {
            grid: GridSpec { k: vec![1, 2], r_max: vec![1, 2], r_nb: vec![10.0] },
            ..BenchConfig::default()
        };
        let res = run_benchmark(&[sc.clone()], &[Method::Bmlc, Method::KMeansY], 1, 5, &cfg).unwrap();
        assert!(res.failures.is_empty(), "{:?}", res.failures);
        let b = res.records_for(4, Method::Bmlc)[0];
        assert!(b.k_hat.is_some() && b.sce.is_some());
        let p = b.predictive.unwrap();
        assert!(p.gaussian_mse.is_some() && p.brier.is_some() && p.nb_mse.is_some());
        let agg = res.aggregate(&[sc]);
        assert!(agg.iter().find(|a| a.method == Method::Bmlc).unwrap().gain.is_some());
        let mut buf = Vec::new();
        write_tidy_csv(&res, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("scenario,method,rep,metric,value\n"));
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }
}
