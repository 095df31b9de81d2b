//! Acceptance checks. Prints one PASS/FAIL line per criterion.

use std::f64::consts::PI;

use lrmix::bench::{run_benchmark, BenchConfig, Method};
use lrmix::gibbs::{run_gibbs_from, GibbsOptions, GibbsState};
use lrmix::init::hard_gamma;
use lrmix::interpret::svd_energies;
use lrmix::metrics::adjusted_rand_index;
use lrmix::model::{ClusterParams, Dataset, ModelSpec, ResponseFamily};
use lrmix::psm::{mean_shift, psm_eigen, subspace_distance, MeanShiftOptions, Psm};
use lrmix::random::{sample_crt, sample_dirichlet, sample_pg, sample_std_normal, StreamRng};
use lrmix::selection::{select_model, waic_vi, GridCell, GridResult, GridRow, SelectOptions, WaicReport};
use lrmix::sim::{generate_scenario, Scenario};
use lrmix::vi::{vi_fit, ViOptions};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

const SEED: u64 = 20240;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn bench(id: u32, methods: &[Method]) -> (Scenario, lrmix::bench::BenchResult) {
    let sc = Scenario::standard(id).unwrap();
    let res = run_benchmark(std::slice::from_ref(&sc), methods, 20, SEED, &BenchConfig::default()).unwrap();
    (sc, res)
}

fn scenario_one() -> Outcome {
    let (_, res) = bench(1, &[Method::Bmlc]);
    let recs = res.records_for(1, Method::Bmlc);
    let acc = mean(&recs.iter().map(|r| r.metrics.accuracy).collect::<Vec<_>>());
    let ari = mean(&recs.iter().map(|r| r.metrics.ari).collect::<Vec<_>>());
    let hits = recs.iter().filter(|r| r.k_hat == Some(2) && r.r_hat == Some(2)).count();
    let share = hits as f64 / 20.0;
    outcome(
        recs.len() == 20 && acc >= 0.97 && ari >= 0.93 && share >= 0.9,
        format!("{} reps, accuracy {acc:.4}, ARI {ari:.4}, (K,r)=(2,2) in {hits}/20", recs.len()),
    )
}

fn scenario_four() -> Outcome {
    let (_, res) = bench(4, &[Method::Bmlc]);
    let recs = res.records_for(4, Method::Bmlc);
    let acc = mean(&recs.iter().map(|r| r.metrics.accuracy).collect::<Vec<_>>());
    let rank_err = mean(&recs.iter().map(|r| (r.r_hat.unwrap() as f64 - 2.0).abs()).collect::<Vec<_>>());
    outcome(
        recs.len() == 20 && acc >= 0.90 && rank_err <= 0.15,
        format!("{} reps, accuracy {acc:.4}, mean |r - 2| {rank_err:.3}", recs.len()),
    )
}

fn scenario_two() -> Outcome {
    let (_, res) = bench(2, &[Method::Bmlc, Method::KMeansY]);
    let acc = |m| mean(&res.records_for(2, m).iter().map(|r| r.metrics.accuracy).collect::<Vec<_>>());
    let (b, k) = (acc(Method::Bmlc), acc(Method::KMeansY));
    let two: Vec<f64> = res
        .records_for(2, Method::Bmlc)
        .iter()
        .filter(|r| r.k_hat == Some(2))
        .map(|r| r.metrics.accuracy)
        .collect();
    outcome(
        res.failures.is_empty() && b >= 0.85 && (b - k).abs() <= 0.05,
        format!(
            "proposed {b:.4}, KMeans(Y) {k:.4}, gap {:+.4}; K=2 selected in {}/20 with accuracy {:.4} there",
            b - k,
            two.len(),
            mean(&two)
        ),
    )
}

/// Mean and variance of `PG(b, z)` from its gamma-series representation.
fn pg_series_moments(b: f64, z: f64) -> (f64, f64) {
    let c2 = z * z / (4.0 * PI * PI);
    let terms = 2_000_000usize;
    let (mut s1, mut s2) = (0.0, 0.0);
    for k in (1..=terms).rev() {
        let d = (k as f64 - 0.5).powi(2) + c2;
        s1 += 1.0 / d;
        s2 += 1.0 / (d * d);
    }
    let t = terms as f64;
    s1 += 1.0 / t;
    s2 += 1.0 / (3.0 * t * t * t);
    (b * s1 / (2.0 * PI * PI), b * s2 / (4.0 * PI.powi(4)))
}

fn pg_moments() -> Outcome {
    let draws = 100_000;
    let mut worst = (0.0f64, 0.0f64);
    let mut pass = true;
    for (bi, b) in [1.0, 2.0, 10.0].into_iter().enumerate() {
        for (zi, z) in [0.0, 0.5, 1.0, 3.0].into_iter().enumerate() {
            let mut rng = StreamRng::derive(SEED, &[4, bi as u64, zi as u64]);
            let x: Vec<f64> = (0..draws).map(|_| sample_pg(b, z, &mut rng).unwrap()).collect();
            let m = mean(&x);
            let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (draws - 1) as f64;
            let m4 = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / draws as f64;
            let (em, ev) = pg_series_moments(b, z);
            let zm = (m - em).abs() / (m2 / draws as f64).sqrt();
            let zv = (m2 - ev).abs() / ((m4 - m2 * m2) / draws as f64).sqrt();
            worst = (worst.0.max(zm), worst.1.max(zv));
            pass &= zm <= 4.0 && zv <= 6.0;
        }
    }
    outcome(pass, format!("12 (b, z) pairs, worst mean z {:.2}, worst variance z {:.2}", worst.0, worst.1))
}

fn crt_suite() -> Outcome {
    let mut rng = StreamRng::derive(SEED, &[5]);
    let exact = (0..1000).all(|_| sample_crt(0, 3.3, &mut rng).unwrap() == 0 && sample_crt(1, 0.4, &mut rng).unwrap() == 1);
    let mut pass = exact;
    let mut detail = vec![format!("small cases exact: {exact}")];
    for (y, r) in [(5u64, 2.0), (20, 0.7), (60, 15.0)] {
        let draws = 100_000;
        let x: Vec<f64> = (0..draws).map(|_| sample_crt(y, r, &mut rng).unwrap() as f64).collect();
        let m = mean(&x);
        let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let expect: f64 = (1..=y).map(|l| r / (r + l as f64 - 1.0)).sum();
        let z = (m - expect).abs() / (var / draws as f64).sqrt();
        pass &= z <= 4.0;
        detail.push(format!("(y={y}, r={r}) z {z:.2}"));
    }
    outcome(pass, detail.join(", "))
}

/// Posterior moments of `(mu, sigma2)` for `y_i ~ N(mu, sigma2)`,
/// `mu ~ N(0, v0)`, `sigma2 ~ IG(a, b)`, by quadrature over `mu`.
fn conjugate_moments(y: &[f64], v0: f64, a: f64, b: f64) -> [f64; 4] {
    let n = y.len() as f64;
    let ybar = mean(y);
    let sd = (y.iter().map(|v| (v - ybar).powi(2)).sum::<f64>() / n).sqrt();
    let alpha = a + n / 2.0;
    let half = 12.0 * sd / n.sqrt();
    let m = 40_001;
    let grid: Vec<f64> = (0..m).map(|i| ybar - half + 2.0 * half * i as f64 / (m - 1) as f64).collect();
    let beta = |mu: f64| b + 0.5 * y.iter().map(|v| (v - mu).powi(2)).sum::<f64>();
    let logw: Vec<f64> = grid.iter().map(|&mu| -mu * mu / (2.0 * v0) - alpha * beta(mu).ln()).collect();
    let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut out = [0.0; 4];
    for (i, &mu) in grid.iter().enumerate() {
        let bt = beta(mu);
        let p = w[i] / total;
        out[0] += p * mu;
        out[1] += p * mu * mu;
        out[2] += p * bt / (alpha - 1.0);
        out[3] += p * bt * bt / ((alpha - 1.0) * (alpha - 2.0));
    }
    out
}

/// Standard error of a chain mean by non-overlapping batch means.
fn batch_se(x: &[f64], batches: usize) -> f64 {
    let len = x.len() / batches;
    let means: Vec<f64> = (0..batches).map(|k| mean(&x[k * len..(k + 1) * len])).collect();
    let m = mean(&means);
    (means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / ((batches - 1) * batches) as f64).sqrt()
}

fn gibbs_conjugacy() -> Outcome {
    let n = 40;
    let mut rng = StreamRng::derive(SEED, &[6]);
    let y: Vec<f64> = (0..n).map(|_| 1.2 + 0.9 * sample_std_normal(&mut rng)).collect();
    let data = Dataset::new(DMatrix::zeros(n, 1), DMatrix::from_column_slice(n, 1, &y), None).unwrap();
    let fam = vec![ResponseFamily::Gaussian { sigma2: 1.0 }];
    let spec = ModelSpec::new(1, 1, fam.clone()).unwrap();
    let state = GibbsState::new(&data, vec![0; n], vec![1.0], vec![ClusterParams::zeros(1, 1, 1)], fam).unwrap();
    let opts = GibbsOptions { iters: 21_000, burnin: Some(1_000), thin: 1, pin_coefficients: true };
    let arch = run_gibbs_from(state, &data, &spec.hyper, &opts, &mut StreamRng::derive(SEED, &[6, 1])).unwrap();
    let mu: Vec<f64> = arch.mu.iter().map(|m| m[0][0]).collect();
    let s2: Vec<f64> = arch.sigma2.iter().map(|s| s[0]).collect();
    let h = &spec.hyper;
    let oracle = conjugate_moments(&y, h.sigma_mu2, h.a_sigma, h.b_sigma);
    let chains = [
        mu.clone(),
        mu.iter().map(|v| v * v).collect(),
        s2.clone(),
        s2.iter().map(|v| v * v).collect::<Vec<_>>(),
    ];
    let zs: Vec<f64> = chains
        .iter()
        .zip(oracle)
        .map(|(c, o)| (mean(c) - o).abs() / batch_se(c, 50))
        .collect();
    let pass = mu.len() == 20_000 && zs.iter().all(|&z| z <= 3.0);
    outcome(
        pass,
        format!(
            "{} draws, E[mu] {:.4} vs {:.4}, E[sigma2] {:.4} vs {:.4}, z-scores {:.2?}",
            mu.len(),
            mean(&mu),
            oracle[0],
            mean(&s2),
            oracle[2],
            zs
        ),
    )
}

fn psm_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for t in 0..20u64 {
        let k = [2, 3, 5][t as usize % 3];
        let mut rng = StreamRng::derive(SEED, &[7, t]);
        let rows: Vec<Vec<f64>> = (0..200).map(|_| sample_dirichlet(&vec![1.0; k], &mut rng).unwrap()).collect();
        let g = DMatrix::from_fn(200, k, |i, c| rows[i][c]);
        let fac = psm_eigen(&Psm::Factorized(g.clone()), k).unwrap();
        let dense = psm_eigen(&Psm::Dense(&g * g.transpose()), k).unwrap();
        worst = worst.max(subspace_distance(&dense.u, &fac.u));
    }
    let sizes = [70usize, 50, 30];
    let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &s)| vec![c; s]).collect();
    let e = psm_eigen(&Psm::Factorized(hard_gamma(&labels, 3)), 3).unwrap();
    let exact = e.eigenvalues.iter().zip(sizes).all(|(&d, s)| d == s as f64);
    outcome(
        worst <= 1e-8 && exact,
        format!("worst principal-angle distance {worst:.2e}; block eigenvalues {:?}", e.eigenvalues.as_slice()),
    )
}

fn mean_shift_exactness() -> Outcome {
    let h = 0.5;
    let mut failures = 0;
    for t in 0..50u64 {
        let mut rng = StreamRng::derive(SEED, &[8, t]);
        let k = rng.random_range(2..=5);
        let dim = rng.random_range(2..=4);
        // clouds of radius h/4 whose centers are 4h + h/2 apart are at least 4h apart
        let mut centers: Vec<DVector<f64>> = Vec::new();
        while centers.len() < k {
            let c = DVector::from_fn(dim, |_, _| rng.random_range(-15.0 * h..15.0 * h));
            if centers.iter().all(|o| (o - &c).norm() >= 4.5 * h) {
                centers.push(c);
            }
        }
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..rng.random_range(5..40) {
                let mut dir = DVector::from_fn(dim, |_, _| sample_std_normal(&mut rng));
                dir /= dir.norm();
                rows.push((center + dir * (rng.random::<f64>() * h / 4.0)).transpose());
                truth.push(c);
            }
        }
        let res = mean_shift(&DMatrix::from_rows(&rows), h, &MeanShiftOptions::default()).unwrap();
        if adjusted_rand_index(&res.labels, &truth).unwrap() != 1.0 || res.n_modes() != k {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("{failures} of 50 configurations misclustered"))
}

fn waic_identities() -> Outcome {
    let mut sc = Scenario::standard(4).unwrap();
    sc.n = 300;
    sc.p = 10;
    let d = generate_scenario(&sc, SEED).unwrap();
    let opts = ViOptions::default();
    let one = vi_fit(&ModelSpec::new(1, 2, d.families.clone()).unwrap(), &d.data, &opts, 1).unwrap();
    let p_one = waic_vi(&one, &d.data).unwrap().p_waic;

    let fit = vi_fit(&ModelSpec::new(3, 2, d.families.clone()).unwrap(), &d.data, &opts, 1).unwrap();
    let base = waic_vi(&fit, &d.data).unwrap();
    let perm = [2usize, 0, 1];
    let mut permuted = fit.clone();
    permuted.clusters = perm.iter().map(|&c| fit.clusters[c].clone()).collect();
    permuted.global.pi = perm.iter().map(|&c| fit.global.pi[c]).collect();
    permuted.gamma = DMatrix::from_fn(fit.n(), 3, |i, c| fit.gamma[(i, perm[c])]);
    let invariant = waic_vi(&permuted, &d.data).unwrap() == base;

    let row = |k, r_max, waic, se| GridRow {
        cell: GridCell { k, r_max, r_nb: None },
        report: WaicReport { waic, lppd: f64::NAN, p_waic: f64::NAN, se_waic: se, min_prop: 0.3, pointwise: vec![] },
        fit: None,
    };
    let grid = GridResult::from_rows(vec![row(2, 1, 231.0, 16.3), row(2, 2, 165.0, 8.82), row(2, 3, 166.0, 8.62)], vec![]);
    let sel = select_model(&grid, &SelectOptions::default()).unwrap();
    outcome(
        p_one == 0.0 && invariant && (sel.cell.k, sel.cell.r_max) == (2, 2),
        format!("K=1 p_WAIC {p_one}, permutation invariant {invariant}, selected ({}, {})", sel.cell.k, sel.cell.r_max),
    )
}

fn vi_monotonicity() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for id in 1..=4u32 {
        let sc = Scenario::standard(id).unwrap();
        let (mut ok, mut total, mut worst) = (0usize, 0usize, 0.0f64);
        for rep in 0..20u64 {
            let d = generate_scenario(&sc, StreamRng::derive(SEED, &[10, id as u64, rep]).random()).unwrap();
            let spec = ModelSpec::new(sc.k_true, sc.r_true, d.families.clone()).unwrap();
            let fit = vi_fit(&spec, &d.data, &ViOptions::default(), rep).unwrap();
            for w in fit.objective_trace.windows(2) {
                total += 1;
                let dip = (w[0] - w[1]) / w[0].abs();
                if dip <= 1e-6 {
                    ok += 1;
                } else {
                    worst = worst.max(dip);
                }
            }
        }
        let share = ok as f64 / total.max(1) as f64;
        pass &= share >= 0.95;
        parts.push(format!("scenario {id}: {share:.3} (worst dip {worst:.1e})"));
    }
    outcome(pass, parts.join("; "))
}

fn energy_identity() -> Outcome {
    let mut worst = 0.0f64;
    for t in 0..100u64 {
        let mut rng = StreamRng::derive(SEED, &[11, t]);
        let (p, q) = (rng.random_range(1..30), rng.random_range(1..8));
        let b = DMatrix::from_fn(p, q, |_, _| 3.0 * sample_std_normal(&mut rng));
        let e = svd_energies(&b).unwrap();
        let fro = b.norm_squared();
        let sx: f64 = e.predictor.iter().sum();
        let sy: f64 = e.response.iter().sum();
        worst = worst.max((sx - fro).abs()).max((sy - fro).abs());
    }
    outcome(worst <= 1e-10, format!("largest deviation {worst:.2e}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("all-Gaussian scenario: accuracy, ARI and selected (K, r)", scenario_one),
        ("mixed scenario: accuracy and rank recovery", scenario_four),
        ("all-binary scenario: accuracy and gap to KMeans(Y)", scenario_two),
        ("Polya-Gamma sampler moments", pg_moments),
        ("CRT sampler", crt_suite),
        ("Gibbs conjugate posterior moments", gibbs_conjugacy),
        ("factorized similarity eigenspace", psm_equivalence),
        ("mean-shift recovery of separated clouds", mean_shift_exactness),
        ("WAIC identities and selection", waic_identities),
        ("variational objective near-monotonicity", vi_monotonicity),
        ("energy decomposition identity", energy_identity),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = std::time::Instant::now();
        let o = check();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {:>2}: {name} [{}] ({:.1}s)", i + 1, o.detail, start.elapsed().as_secs_f64());
        if !o.pass {
            failed.push(i + 1);
        }
    }
    println!("{} of {} criteria passed; failing: {failed:?}", criteria.len() - failed.len(), criteria.len());
}
