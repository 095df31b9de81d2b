//! CSV ingestion with median imputation, robust scaling and the JSON fit artifact.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    validate_dataset, ClusterParams, Dataset, FamilyKind, FitMode, FitResult, GlobalParams, ModelSpec,
    ResponseFamily,
};
use crate::numeric::median;

/// MAD-to-SD factor for normal data.
pub const MAD_SCALE: f64 = 1.4826;

/// A numeric table with its header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub values: DMatrix<f64>,
    /// `(row, column)` of every cell that was empty or `NA`.
    pub missing: Vec<(usize, usize)>,
}

fn is_missing(s: &str) -> bool {
    matches!(s, "" | "NA" | "na" | "NaN" | "nan" | "null")
}

/// Reads a headed CSV of numbers. Missing cells become NaN and are listed; any
/// other unparsable cell is a data error naming its row and column (1-based data
/// row, header name).
pub fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut data = Vec::new();
    let mut missing = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        if rec.len() != headers.len() {
            return Err(Error::data(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                i + 1,
                rec.len(),
                headers.len()
            )));
        }
        for (j, cell) in rec.iter().enumerate() {
            if is_missing(cell) {
                missing.push((i, j));
                data.push(f64::NAN);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::data(format!(
                    "{}: row {}, column '{}': cannot parse '{cell}' as a number",
                    path.display(),
                    i + 1,
                    headers[j]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "{}: row {}, column '{}': non-finite value",
                    path.display(),
                    i + 1,
                    headers[j]
                )));
            }
            data.push(v);
        }
    }
    let n = data.len() / headers.len().max(1);
    Ok(Table {
        values: DMatrix::from_row_slice(n, headers.len(), &data),
        headers,
        missing,
    })
}

/// Replaces NaN cells by the column median of the observed cells. Columns listed in
/// `lower` take the lower median so integer-valued columns stay integer-valued.
pub fn impute_median(values: &mut DMatrix<f64>, lower: &[usize]) -> Result<usize> {
    let mut filled = 0;
    for j in 0..values.ncols() {
        let mut obs: Vec<f64> = values.column(j).iter().copied().filter(|v| !v.is_nan()).collect();
        if obs.len() == values.nrows() {
            continue;
        }
        if obs.is_empty() {
            return Err(Error::data(format!("column {j} has no observed values")));
        }
        let fill = if lower.contains(&j) {
            obs.sort_by(f64::total_cmp);
            obs[(obs.len() - 1) / 2]
        } else {
            median(&obs)
        };
        for v in values.column_mut(j).iter_mut().filter(|v| v.is_nan()) {
            *v = fill;
            filled += 1;
        }
    }
    Ok(filled)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustScale {
    pub center: f64,
    pub scale: f64,
}

/// Median center and `1.4826 * MAD` scale. A zero MAD falls back to a unit scale.
pub fn robust_scale(values: &[f64]) -> RobustScale {
    let center = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - center).abs()).collect();
    let mad = median(&dev) * MAD_SCALE;
    RobustScale { center, scale: if mad > 0.0 { mad } else { 1.0 } }
}

impl RobustScale {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.center) / self.scale
    }
}

/// Robustly scales the listed Gaussian columns of `y` in place.
pub fn robust_scale_columns(y: &mut DMatrix<f64>, columns: &[usize]) -> Vec<RobustScale> {
    columns
        .iter()
        .map(|&j| {
            let col: Vec<f64> = y.column(j).iter().copied().collect();
            let rs = robust_scale(&col);
            y.column_mut(j).apply(|v| *v = rs.apply(*v));
            rs
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestReport {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub imputed_x: usize,
    pub imputed_y: usize,
    pub robust_scaled: Vec<(usize, RobustScale)>,
}

/// Loaded data with the predictor and response column names.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub data: Dataset,
    pub x_names: Vec<String>,
    pub y_names: Vec<String>,
    pub report: IngestReport,
}

/// Reads X, Y and optional offsets, imputes missing cells, optionally scales the
/// Gaussian responses robustly, and validates against the families.
pub fn load_dataset(
    x_path: &Path,
    y_path: &Path,
    offsets_path: Option<&Path>,
    families: &[ResponseFamily],
    robust: bool,
) -> Result<Loaded> {
    let mut x = read_table(x_path)?;
    let mut y = read_table(y_path)?;
    if y.values.ncols() != families.len() {
        return Err(Error::config(format!(
            "{} has {} columns but {} families are given",
            y_path.display(),
            y.values.ncols(),
            families.len()
        )));
    }
    let imputed_x = impute_median(&mut x.values, &[])?;
    let discrete: Vec<usize> = (0..families.len()).filter(|&j| !families[j].is_gaussian()).collect();
    let imputed_y = impute_median(&mut y.values, &discrete)?;
    let offsets = match offsets_path {
        Some(p) => {
            let o = read_table(p)?;
            if let Some(&(i, j)) = o.missing.first() {
                return Err(Error::data(format!("{}: row {}, column {}: missing offset", p.display(), i + 1, j + 1)));
            }
            Some(o.values)
        }
        None => None,
    };
    let mut robust_scaled = Vec::new();
    if robust {
        let cols: Vec<usize> = (0..families.len()).filter(|&j| families[j].kind() == FamilyKind::Gaussian).collect();
        let scales = robust_scale_columns(&mut y.values, &cols);
        robust_scaled = cols.into_iter().zip(scales).collect();
    }
    let data = Dataset::new(x.values, y.values, offsets)?;
    let spec = ModelSpec::new(1, 1, families.to_vec())?;
    validate_dataset(&data, &spec).into_result()?;
    Ok(Loaded {
        report: IngestReport {
            n: data.n(),
            p: data.p(),
            q: data.q(),
            imputed_x,
            imputed_y,
            robust_scaled,
        },
        data,
        x_names: x.headers,
        y_names: y.headers,
    })
}

pub fn write_table<W: Write>(out: W, headers: &[String], values: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(headers)?;
    for row in values.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table_file(path: &Path, headers: &[String], values: &DMatrix<f64>) -> Result<()> {
    write_table(BufWriter::new(File::create(path)?), headers, values)
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::config(format!("ragged {what} in fit artifact")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub mu: Vec<f64>,
    /// Row-major `p x r_max`.
    pub l: Vec<Vec<f64>>,
    /// Row-major `q x r_max`.
    pub r: Vec<Vec<f64>>,
    pub phi: f64,
    pub delta: Vec<f64>,
}

/// On-disk form of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub mode: FitMode,
    pub spec: ModelSpec,
    pub seed: u64,
    pub pi: Vec<f64>,
    pub families: Vec<ResponseFamily>,
    pub clusters: Vec<ClusterRecord>,
    pub gamma: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_draws: Option<Vec<Vec<usize>>>,
    pub objective_trace: Vec<f64>,
}

impl FitArtifact {
    pub fn from_fit(fit: &FitResult) -> Self {
        FitArtifact {
            mode: fit.mode,
            spec: fit.spec.clone(),
            seed: fit.seed,
            pi: fit.global.pi.clone(),
            families: fit.global.families.clone(),
            clusters: fit
                .clusters
                .iter()
                .map(|c| ClusterRecord {
                    mu: c.mu.iter().copied().collect(),
                    l: rows_of(&c.l),
                    r: rows_of(&c.r),
                    phi: c.phi,
                    delta: c.delta.iter().copied().collect(),
                })
                .collect(),
            gamma: rows_of(&fit.gamma),
            z_draws: fit.z_draws.clone(),
            objective_trace: fit.objective_trace.clone(),
        }
    }

    pub fn into_fit(self) -> Result<FitResult> {
        let rm = self.spec.r_max;
        let clusters = self
            .clusters
            .iter()
            .map(|c| {
                let cp = ClusterParams {
                    mu: DVector::from_vec(c.mu.clone()),
                    l: from_rows(&c.l, rm, "L")?,
                    r: from_rows(&c.r, rm, "R")?,
                    phi: c.phi,
                    delta: DVector::from_vec(c.delta.clone()),
                };
                cp.check_shape(cp.p(), self.spec.q(), rm)?;
                Ok(cp)
            })
            .collect::<Result<Vec<_>>>()?;
        if clusters.len() != self.spec.k {
            return Err(Error::config(format!("artifact has {} clusters, spec says {}", clusters.len(), self.spec.k)));
        }
        let global = GlobalParams { pi: self.pi, families: self.families };
        Ok(FitResult {
            mode: self.mode,
            gamma: from_rows(&self.gamma, self.spec.k, "responsibilities")?,
            spec: self.spec,
            clusters,
            global,
            z_draws: self.z_draws,
            objective_trace: self.objective_trace,
            seed: self.seed,
        })
    }
}

pub fn save_fit(fit: &FitResult, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &FitArtifact::from_fit(fit))?;
    w.flush()?;
    Ok(())
}

pub fn load_fit(path: &Path) -> Result<FitResult> {
    let file = File::open(path).map_err(|e| Error::config(format!("cannot open {}: {e}", path.display())))?;
    let art: FitArtifact = serde_json::from_reader(std::io::BufReader::new(file))?;
    art.into_fit()
}
