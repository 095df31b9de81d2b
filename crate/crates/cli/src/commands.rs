use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use lrmix::bench::{mixture_predictions, run_benchmark, write_aggregate_csv, write_tidy_csv, BenchConfig, Method};
use lrmix::gibbs::{archive_into_fit, run_gibbs};
use lrmix::interpret::svd_energies;
use lrmix::io::{impute_median, load_dataset, load_fit, read_table, save_fit, write_table_file, Loaded};
use lrmix::likelihood::{cluster_logliks, nb_norm_table};
use lrmix::model::{Dataset, FitResult, HyperParams, ModelSpec};
use lrmix::psm::{cluster_psm, write_embedding_csv, write_embedding_svg, Bandwidth, ClusterOptions};
use lrmix::selection::{grid_search, select_model, write_grid_csv, SelectOptions};
use lrmix::sim::{generate_scenario, Scenario};
use lrmix::vi::{responsibilities, vi_fit};
use lrmix::{Error, Result};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::{Engine, RunConfig};
use crate::{DataArgs, PartitionArgs};

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub workers: usize,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(self.path(name), text)?;
        Ok(())
    }

    fn load_data(&self) -> Result<Loaded> {
        let (x, y) = self.cfg.data_paths()?;
        load_dataset(x, y, self.cfg.offsets.as_deref(), &self.cfg.families()?, self.cfg.robust_scale)
    }

    fn hyper(&self, k: usize) -> Result<HyperParams> {
        match &self.cfg.hyper {
            Some(h) => h.resized(k),
            None => Ok(HyperParams::for_k(k)),
        }
    }
}

pub fn apply_data(cfg: &mut RunConfig, a: &DataArgs) {
    if a.x.is_some() {
        cfg.x = a.x.clone();
    }
    if a.y.is_some() {
        cfg.y = a.y.clone();
    }
    if a.offsets.is_some() {
        cfg.offsets = a.offsets.clone();
    }
    if !a.families.is_empty() {
        cfg.families = a.families.clone();
    }
    cfg.robust_scale |= a.robust_scale;
}

pub fn cluster_options(a: &PartitionArgs) -> Result<ClusterOptions> {
    let bandwidth = match a.bandwidth.as_str() {
        "rms" => Bandwidth::CentroidRms,
        "median" => Bandwidth::MedianPairwise,
        other => Bandwidth::Fixed(
            other
                .parse()
                .map_err(|_| Error::config(format!("bandwidth must be rms, median or a number, got '{other}'")))?,
        ),
    };
    Ok(ClusterOptions { row_normalize: a.row_normalize, bandwidth, ..ClusterOptions::default() })
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|j| format!("{prefix}{j}")).collect()
}

#[derive(Serialize)]
struct SimulationRecord<'a> {
    scenario: &'a Scenario,
    families: Vec<String>,
    seed: u64,
    clipped: usize,
}

pub fn simulate(ctx: &Context, id: u32, n: Option<usize>, p: Option<usize>) -> Result<()> {
    let mut sc = Scenario::standard(id)?;
    sc.n = n.unwrap_or(sc.n);
    sc.p = p.unwrap_or(sc.p);
    let sim = generate_scenario(&sc, ctx.cfg.seed)?;
    write_table_file(&ctx.path("X.csv"), &names("x", sc.p), &sim.data.x)?;
    write_table_file(&ctx.path("Y.csv"), &names("y", sc.q()), &sim.data.y)?;
    let truth = DMatrix::from_fn(sc.n, 2, |i, c| if c == 0 { i as f64 } else { sim.labels[i] as f64 });
    write_table_file(&ctx.path("truth.csv"), &["unit".into(), "cluster".into()], &truth)?;
    ctx.write_json(
        "scenario.json",
        &SimulationRecord {
            scenario: &sc,
            families: sim.families.iter().map(|f| f.to_string()).collect(),
            seed: ctx.cfg.seed,
            clipped: sim.clipped,
        },
    )?;
    println!("wrote scenario {id} ({} x {} predictors, {} responses) to {}", sc.n, sc.p, sc.q(), ctx.out.display());
    Ok(())
}

fn write_trace(ctx: &Context, trace: &[f64]) -> Result<()> {
    let m = DMatrix::from_fn(trace.len(), 2, |t, c| if c == 0 { t as f64 } else { trace[t] });
    write_table_file(&ctx.path("trace.csv"), &["iteration".into(), "objective".into()], &m)
}

pub fn fit(ctx: &Context) -> Result<()> {
    let loaded = ctx.load_data()?;
    let cfg = &ctx.cfg;
    let spec = ModelSpec::new(cfg.k, cfg.r_max, cfg.families()?)?.with_hyper(ctx.hyper(cfg.k)?)?;
    let fit = match cfg.engine {
        Engine::Vi => vi_fit(&spec, &loaded.data, &cfg.vi, cfg.seed)?,
        Engine::Gibbs => {
            let archive = run_gibbs(&spec, &loaded.data, &cfg.gibbs, cfg.seed)?;
            archive.write_dir(&ctx.path("draws"))?;
            archive_into_fit(archive, &spec, cfg.seed)
        }
    };
    save_fit(&fit, &ctx.path("fit.json"))?;
    write_trace(ctx, &fit.objective_trace)?;
    let counts = fit.hard_labels().iter().fold(vec![0usize; spec.k], |mut c, &l| {
        c[l] += 1;
        c
    });
    println!(
        "fitted K={} r_max={} on n={} ({} iterations); cluster sizes {:?}",
        spec.k,
        spec.r_max,
        loaded.data.n(),
        fit.objective_trace.len(),
        counts
    );
    Ok(())
}

#[derive(Serialize)]
struct SelectionRecord {
    k: usize,
    r_max: usize,
    r_nb: Option<f64>,
    waic: f64,
    se_waic: f64,
    fallback: bool,
    failed_cells: Vec<lrmix::selection::CellFailure>,
}

pub fn select(ctx: &Context, opts: &SelectOptions) -> Result<()> {
    let loaded = ctx.load_data()?;
    let cfg = &ctx.cfg;
    let families = cfg.families()?;
    let grid = grid_search(&loaded.data, &families, &ctx.hyper(1)?, &cfg.grid, &cfg.vi, cfg.seed, ctx.workers)?;
    write_grid_csv(&grid, ctx.create("grid.csv")?)?;
    let sel = select_model(&grid, opts)?;
    let row = &grid.rows[sel.index];
    ctx.write_json(
        "selected.json",
        &SelectionRecord {
            k: sel.cell.k,
            r_max: sel.cell.r_max,
            r_nb: sel.cell.r_nb,
            waic: row.report.waic,
            se_waic: row.report.se_waic,
            fallback: sel.fallback,
            failed_cells: grid.failures.clone(),
        },
    )?;
    if let Some(fit) = &row.fit {
        save_fit(fit, &ctx.path("fit.json"))?;
    }
    println!(
        "selected K={} r_max={}{} (WAIC {:.2} +/- {:.2}) from {} cells",
        sel.cell.k,
        sel.cell.r_max,
        sel.cell.r_nb.map(|r| format!(" r_NB={r}")).unwrap_or_default(),
        row.report.waic,
        row.report.se_waic,
        grid.rows.len()
    );
    Ok(())
}

pub fn cluster(ctx: &Context, fit_path: &Path, k: Option<usize>, opts: &ClusterOptions, svg: bool) -> Result<()> {
    let fit = load_fit(fit_path)?;
    let k = k.unwrap_or(fit.spec.k);
    let report = cluster_psm(&fit, k, opts)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    write_embedding_csv(&report, ctx.create("embedding.csv")?)?;
    if svg {
        write_embedding_svg(&report, &ctx.path("embedding.svg"))?;
    }
    println!("{} clusters (bandwidth {:.4})", report.n_modes, report.bandwidth);
    Ok(())
}

/// `fit` reweighted for new units: posterior responsibilities when responses are
/// available, mixing weights otherwise.
fn predictive_fit(fit: &FitResult, data: &Dataset, observed: bool) -> Result<FitResult> {
    let gamma = if observed {
        let norms = nb_norm_table(&data.y, &fit.global.families);
        responsibilities(&cluster_logliks(&fit.clusters, &fit.global.families, data, &norms), &fit.global.pi)?.0
    } else {
        DMatrix::from_fn(data.n(), fit.spec.k, |_, c| fit.global.pi[c])
    };
    Ok(FitResult { gamma, z_draws: None, ..fit.clone() })
}

pub fn predict(ctx: &Context, fit_path: &Path, x: &Path, offsets: Option<&Path>, y: Option<&Path>) -> Result<()> {
    let fit = load_fit(fit_path)?;
    let q = fit.spec.q();
    let (data, headers) = match y {
        Some(y) => {
            let l = load_dataset(x, y, offsets, &fit.global.families, false)?;
            (l.data, l.y_names)
        }
        None => {
            let mut t = read_table(x)?;
            impute_median(&mut t.values, &[])?;
            let o = offsets.map(|p| read_table(p).map(|t| t.values)).transpose()?;
            let n = t.values.nrows();
            (Dataset::new(t.values, DMatrix::zeros(n, q), o)?, names("y", q))
        }
    };
    let p = fit.clusters.first().map(|c| c.p()).unwrap_or(0);
    if data.p() != p {
        return Err(Error::data(format!("{} has {} predictors, the fit expects {p}", x.display(), data.p())));
    }
    let pred = mixture_predictions(&predictive_fit(&fit, &data, y.is_some())?, &data);
    write_table_file(&ctx.path("predictions.csv"), &headers, &pred)?;
    println!("wrote {} predictions", data.n());
    Ok(())
}

pub fn interpret(ctx: &Context, fit_path: &Path, x: Option<&Path>) -> Result<()> {
    let fit = load_fit(fit_path)?;
    let p = fit.clusters.first().map(|c| c.p()).unwrap_or(0);
    let x_names = match x {
        Some(path) => read_table(path)?.headers,
        None => names("x", p),
    };
    if x_names.len() != p {
        return Err(Error::data(format!("{} names for {p} predictors", x_names.len())));
    }
    let y_names = names("y", fit.spec.q());
    let mut w = csv::Writer::from_writer(ctx.create("energies.csv")?);
    w.write_record(["cluster", "side", "index", "name", "energy", "fraction"]).map_err(Error::from)?;
    for (k, c) in fit.clusters.iter().enumerate() {
        let e = svd_energies(&c.coefficients())?;
        let total: f64 = e.predictor.iter().sum();
        let frac = |v: f64| if total > 0.0 { v / total } else { 0.0 };
        let mut put = |side: &str, idx: usize, name: &str, v: f64, f: f64| {
            w.write_record([k.to_string(), side.into(), idx.to_string(), name.into(), v.to_string(), f.to_string()])
        };
        for (a, &v) in e.predictor.iter().enumerate() {
            put("predictor", a, &x_names[a], v, frac(v)).map_err(Error::from)?;
        }
        for (j, &v) in e.response.iter().enumerate() {
            put("response", j, &y_names[j], v, frac(v)).map_err(Error::from)?;
        }
        for (h, (&d, f)) in e.singular_values.iter().zip(e.singular_fractions()).enumerate() {
            put("singular", h, &format!("d{}", h + 1), d, f).map_err(Error::from)?;
        }
    }
    w.flush()?;
    println!("wrote energies for {} clusters", fit.clusters.len());
    Ok(())
}

pub fn bench(
    ctx: &Context,
    ids: &[u32],
    methods: &[Method],
    reps: usize,
    n: Option<usize>,
    p: Option<usize>,
    cfg: &BenchConfig,
) -> Result<()> {
    let scenarios = ids
        .iter()
        .map(|&id| {
            let mut sc = Scenario::standard(id)?;
            sc.n = n.unwrap_or(sc.n);
            sc.p = p.unwrap_or(sc.p);
            Ok(sc)
        })
        .collect::<Result<Vec<_>>>()?;
    let res = run_benchmark(&scenarios, methods, reps, ctx.cfg.seed, cfg)?;
    write_tidy_csv(&res, ctx.create("bench_tidy.csv")?)?;
    let agg = res.aggregate(&scenarios);
    write_aggregate_csv(&agg, ctx.create("bench_summary.csv")?)?;
    for a in &agg {
        println!(
            "scenario {} {:<12} acc {:.3} ({:.3})  ARI {:.3}{}",
            a.scenario,
            a.method.name(),
            a.accuracy.mean,
            a.accuracy.sd,
            a.ari.mean,
            a.gain.map(|g| format!("  gain {g:+.3}")).unwrap_or_default()
        );
    }
    if !res.failures.is_empty() {
        log::warn!("{} runs failed and were excluded", res.failures.len());
    }
    Ok(())
}
