//! Model data types, dataset validation and the linear-predictor algebra shared by
//! the Gibbs sampler, the variational fitter and prediction.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Response family of one column of `Y`, carrying its nuisance parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ResponseFamily {
    /// Normal with variance `sigma2`.
    Gaussian { sigma2: f64 },
    /// Logit-link Bernoulli.
    Bernoulli,
    /// Number-of-failures negative binomial with dispersion (size) `r`, logit-p link.
    #[serde(rename = "negbin")]
    NegBin { r: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FamilyKind {
    Gaussian,
    Bernoulli,
    NegBin,
}

impl ResponseFamily {
    pub fn kind(&self) -> FamilyKind {
        match self {
            ResponseFamily::Gaussian { .. } => FamilyKind::Gaussian,
            ResponseFamily::Bernoulli => FamilyKind::Bernoulli,
            ResponseFamily::NegBin { .. } => FamilyKind::NegBin,
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, ResponseFamily::Gaussian { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ResponseFamily::Gaussian { sigma2 } if !(sigma2 > 0.0 && sigma2.is_finite()) => {
                Err(Error::config(format!("Gaussian variance must be positive, got {sigma2}")))
            }
            ResponseFamily::NegBin { r } if !(r > 0.0 && r.is_finite()) => {
                Err(Error::config(format!("negative binomial dispersion must be positive, got {r}")))
            }
            _ => Ok(()),
        }
    }

    /// Checks that `y` lies in the support of the family.
    pub fn check_value(&self, y: f64) -> std::result::Result<(), &'static str> {
        if !y.is_finite() {
            return Err("non-finite value");
        }
        match self {
            ResponseFamily::Gaussian { .. } => Ok(()),
            ResponseFamily::Bernoulli if y == 0.0 || y == 1.0 => Ok(()),
            ResponseFamily::Bernoulli => Err("non-binary value"),
            ResponseFamily::NegBin { .. } if y < 0.0 => Err("negative count"),
            ResponseFamily::NegBin { .. } if y.fract() != 0.0 => Err("non-integer count"),
            ResponseFamily::NegBin { .. } => Ok(()),
        }
    }
}

impl fmt::Display for ResponseFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResponseFamily::Gaussian { .. } => write!(f, "gaussian"),
            ResponseFamily::Bernoulli => write!(f, "bernoulli"),
            ResponseFamily::NegBin { r } => write!(f, "negbin:{r}"),
        }
    }
}

impl FromStr for ResponseFamily {
    type Err = Error;

    /// Accepts `gaussian`/`g`, `bernoulli`/`b`, and `negbin`/`nb` with an optional
    /// `:r` suffix giving the dispersion (default 10).
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (head, arg) = match lower.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (lower.as_str(), None),
        };
        let fam = match head {
            "g" | "gaussian" | "normal" => ResponseFamily::Gaussian {
                sigma2: parse_arg(arg, 1.0)?,
            },
            "b" | "bernoulli" | "binary" => ResponseFamily::Bernoulli,
            "nb" | "negbin" | "count" => ResponseFamily::NegBin {
                r: parse_arg(arg, 10.0)?,
            },
            other => return Err(Error::config(format!("unknown response family '{other}'"))),
        };
        fam.validate()?;
        Ok(fam)
    }
}

fn parse_arg(arg: Option<&str>, default: f64) -> Result<f64> {
    match arg {
        None => Ok(default),
        Some(a) => a
            .parse::<f64>()
            .map_err(|_| Error::config(format!("bad family parameter '{a}'"))),
    }
}

/// Prior hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Dirichlet concentrations, one per cluster.
    pub alpha: Vec<f64>,
    /// Prior variance of the cluster mean shifts.
    pub sigma_mu2: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
    pub a_r: f64,
    pub b_r: f64,
    pub a_phi: f64,
    pub b_phi: f64,
    /// MGP shape for the first column precision.
    pub a1: f64,
    /// MGP shape for the remaining column precisions.
    pub a2: f64,
}

impl HyperParams {
    pub fn for_k(k: usize) -> Self {
        HyperParams {
            alpha: vec![1.0; k],
            sigma_mu2: 10.0,
            a_sigma: 1.0,
            b_sigma: 1.0,
            a_r: 2.0,
            b_r: 0.1,
            a_phi: 1.0,
            b_phi: 1.0,
            a1: 2.0,
            a2: 3.0,
        }
    }

    /// Same hyperparameters for a different number of clusters. Only a symmetric
    /// Dirichlet can be resized.
    pub fn resized(&self, k: usize) -> Result<Self> {
        if self.alpha.len() == k {
            return Ok(self.clone());
        }
        let first = *self
            .alpha
            .first()
            .ok_or_else(|| Error::config("empty Dirichlet concentration vector"))?;
        if self.alpha.iter().any(|&a| a != first) {
            return Err(Error::config(
                "cannot resize a non-symmetric Dirichlet concentration vector",
            ));
        }
        Ok(HyperParams {
            alpha: vec![first; k],
            ..self.clone()
        })
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.alpha.len() != k {
            return Err(Error::config(format!(
                "alpha has length {} but K = {k}",
                self.alpha.len()
            )));
        }
        let scalars = [
            ("sigma_mu2", self.sigma_mu2),
            ("a_sigma", self.a_sigma),
            ("b_sigma", self.b_sigma),
            ("a_r", self.a_r),
            ("b_r", self.b_r),
            ("a_phi", self.a_phi),
            ("b_phi", self.b_phi),
            ("a1", self.a1),
            ("a2", self.a2),
        ];
        for (name, v) in scalars
            .iter()
            .copied()
            .chain(self.alpha.iter().map(|&a| ("alpha", a)))
        {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.a2 > self.a1 && self.a1 > 1.0) {
            return Err(Error::config(format!(
                "MGP shapes need a2 > a1 > 1, got a1 = {}, a2 = {}",
                self.a1, self.a2
            )));
        }
        Ok(())
    }
}

/// Response-family layout, cluster count, maximal rank and priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub k: usize,
    pub r_max: usize,
    pub families: Vec<ResponseFamily>,
    pub hyper: HyperParams,
    pub offsets_declared: bool,
}

impl ModelSpec {
    pub fn new(k: usize, r_max: usize, families: Vec<ResponseFamily>) -> Result<Self> {
        let spec = ModelSpec {
            k,
            r_max,
            families,
            hyper: HyperParams::for_k(k),
            offsets_declared: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_hyper(mut self, hyper: HyperParams) -> Result<Self> {
        self.hyper = hyper.resized(self.k)?;
        self.validate()?;
        Ok(self)
    }

    pub fn q(&self) -> usize {
        self.families.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        if self.r_max == 0 {
            return Err(Error::config("r_max must be at least 1"));
        }
        if self.families.is_empty() {
            return Err(Error::config("at least one response column is required"));
        }
        for f in &self.families {
            f.validate()?;
        }
        self.hyper.validate(self.k)
    }

    pub fn has_kind(&self, kind: FamilyKind) -> bool {
        self.families.iter().any(|f| f.kind() == kind)
    }
}

/// Predictors, mixed responses and per-cell offsets (zeros when absent).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub offsets: DMatrix<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>, offsets: Option<DMatrix<f64>>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::data(format!(
                "X has {} rows but Y has {}",
                x.nrows(),
                y.nrows()
            )));
        }
        let offsets = match offsets {
            Some(o) => {
                if o.shape() != y.shape() {
                    return Err(Error::data(format!(
                        "offsets have shape {:?} but Y has shape {:?}",
                        o.shape(),
                        y.shape()
                    )));
                }
                o
            }
            None => DMatrix::zeros(y.nrows(), y.ncols()),
        };
        Ok(Dataset { x, y, offsets })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.y.ncols()
    }

    pub fn has_offsets(&self) -> bool {
        self.offsets.iter().any(|&o| o != 0.0)
    }

    /// Rows `idx` of the dataset, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
            offsets: self.offsets.select_rows(idx),
        }
    }
}

/// Per-cluster parameters. `lambda` is always derived from `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterParams {
    pub mu: DVector<f64>,
    pub l: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub phi: f64,
    pub delta: DVector<f64>,
}

impl ClusterParams {
    pub fn zeros(p: usize, q: usize, r_max: usize) -> Self {
        ClusterParams {
            mu: DVector::zeros(q),
            l: DMatrix::zeros(p, r_max),
            r: DMatrix::zeros(q, r_max),
            phi: 1.0,
            delta: DVector::from_element(r_max, 1.0),
        }
    }

    pub fn p(&self) -> usize {
        self.l.nrows()
    }

    pub fn q(&self) -> usize {
        self.r.nrows()
    }

    pub fn r_max(&self) -> usize {
        self.l.ncols()
    }

    /// Cumulative products of `delta`.
    pub fn lambda(&self) -> DVector<f64> {
        let mut acc = 1.0;
        self.delta.map(|d| {
            acc *= d;
            acc
        })
    }

    /// Diagonal of the column precision matrix `phi * diag(lambda)`.
    pub fn precision_diag(&self) -> DVector<f64> {
        self.lambda() * self.phi
    }

    pub fn coefficients(&self) -> DMatrix<f64> {
        &self.l * self.r.transpose()
    }

    /// Squared column norms `||l_h||^2 + ||r_h||^2`.
    pub fn column_energy(&self) -> DVector<f64> {
        DVector::from_fn(self.r_max(), |h, _| {
            self.l.column(h).norm_squared() + self.r.column(h).norm_squared()
        })
    }

    pub fn check_shape(&self, p: usize, q: usize, r_max: usize) -> Result<()> {
        if self.l.shape() != (p, r_max)
            || self.r.shape() != (q, r_max)
            || self.mu.len() != q
            || self.delta.len() != r_max
        {
            return Err(Error::config(format!(
                "cluster parameter shapes (L {:?}, R {:?}, mu {}, delta {}) do not match p={p}, q={q}, r_max={r_max}",
                self.l.shape(),
                self.r.shape(),
                self.mu.len(),
                self.delta.len()
            )));
        }
        Ok(())
    }

    /// Linear predictors for every row of `data` under this cluster: `1 mu' + X B + O`.
    pub fn etas(&self, data: &Dataset) -> DMatrix<f64> {
        let u = &data.x * &self.l;
        let mut eta = u * self.r.transpose();
        eta += &data.offsets;
        for (j, mut col) in eta.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.mu[j]);
        }
        eta
    }
}

/// Shared parameters: mixing weights and the current family nuisance parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalParams {
    pub pi: Vec<f64>,
    pub families: Vec<ResponseFamily>,
}

impl GlobalParams {
    pub fn check(&self) -> Result<()> {
        let sum: f64 = self.pi.iter().sum();
        if self.pi.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::numerical(format!(
                "mixing weights off the simplex (sum {sum})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    Vi,
    Gibbs,
}

/// Output of a fit: point estimates (VI) or the final retained draw (Gibbs), plus
/// responsibilities or label draws.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub mode: FitMode,
    pub spec: ModelSpec,
    pub clusters: Vec<ClusterParams>,
    pub global: GlobalParams,
    /// n x K responsibilities (VI) or per-unit label frequencies (Gibbs).
    pub gamma: DMatrix<f64>,
    /// Retained label draws, T x n (Gibbs only).
    pub z_draws: Option<Vec<Vec<usize>>>,
    pub objective_trace: Vec<f64>,
    pub seed: u64,
}

impl FitResult {
    pub fn n(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn hard_labels(&self) -> Vec<usize> {
        self.gamma
            .row_iter()
            .map(|row| crate::numeric::argmax(row.iter().copied()))
            .collect()
    }
}

/// `eta_j = mu_j + x' (L R')_{.j} + offset_j`.
pub fn linear_predictor(
    cluster: &ClusterParams,
    x: &[f64],
    offset_row: &[f64],
) -> Result<DVector<f64>> {
    let (p, q) = (cluster.p(), cluster.q());
    if x.len() != p || offset_row.len() != q || cluster.mu.len() != q {
        return Err(Error::config(format!(
            "linear predictor dimension mismatch: x has {}, offsets {}, cluster expects p={p}, q={q}",
            x.len(),
            offset_row.len()
        )));
    }
    let u = cluster.l.tr_mul(&DVector::from_column_slice(x));
    let mut eta = &cluster.r * u;
    for j in 0..q {
        eta[j] += cluster.mu[j] + offset_row[j];
    }
    Ok(eta)
}

/// `B = L R'`.
pub fn coefficient_matrix(l: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if l.ncols() != r.ncols() {
        return Err(Error::config(format!(
            "inner dimensions differ: L is {:?}, R is {:?}",
            l.shape(),
            r.shape()
        )));
    }
    Ok(l * r.transpose())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub row: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.row, self.column) {
            (Some(r), Some(c)) => write!(f, "row {r}, column {c}: {}", self.message),
            (None, Some(c)) => write!(f, "column {c}: {}", self.message),
            (Some(r), None) => write!(f, "row {r}: {}", self.message),
            (None, None) => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            return Ok(());
        }
        let shown: Vec<String> = self.violations.iter().take(10).map(|v| v.to_string()).collect();
        Err(Error::data(format!(
            "{} violation(s): {}",
            self.violations.len(),
            shown.join("; ")
        )))
    }
}

/// Lists every way `data` fails to match `spec`. Empty iff valid.
pub fn validate_dataset(data: &Dataset, spec: &ModelSpec) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |row, column, message: String| {
        violations.push(Violation {
            row,
            column,
            message,
        })
    };
    if data.y.ncols() != spec.q() {
        push(
            None,
            None,
            format!(
                "Y has {} columns but {} families are declared",
                data.y.ncols(),
                spec.q()
            ),
        );
    }
    if data.x.nrows() != data.y.nrows() {
        push(
            None,
            None,
            format!("X has {} rows but Y has {}", data.x.nrows(), data.y.nrows()),
        );
    }
    if data.offsets.shape() != data.y.shape() {
        push(None, None, "offset matrix shape differs from Y".to_string());
    }
    for (i, row) in data.x.row_iter().enumerate() {
        for (a, v) in row.iter().enumerate() {
            if !v.is_finite() {
                push(Some(i), Some(a), "non-finite predictor".to_string());
            }
        }
    }
    for (j, fam) in spec.families.iter().enumerate().take(data.y.ncols()) {
        for i in 0..data.y.nrows() {
            if let Err(msg) = fam.check_value(data.y[(i, j)]) {
                push(Some(i), Some(j), msg.to_string());
            }
        }
    }
    if data.offsets.shape() == data.y.shape() {
        for (idx, v) in data.offsets.iter().enumerate() {
            if !v.is_finite() {
                let (i, j) = (idx % data.offsets.nrows(), idx / data.offsets.nrows());
                push(Some(i), Some(j), "non-finite offset".to_string());
            }
        }
    }
    ValidationReport { violations }
}
