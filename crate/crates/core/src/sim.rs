//! Synthetic mixed-response scenarios and the response feature transform used by
//! the baselines and for initialization.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, FamilyKind, ResponseFamily};
use crate::numeric::{logistic, mean, variance};
use crate::random::{sample_std_normal, StreamRng};

/// Stream tag for the data generator.
const GENERATOR_STREAM: u64 = 0x5ce0;
/// Count-model linear predictors are clipped to this magnitude before sampling.
const NB_ETA_CLIP: f64 = 8.0;

/// How the true coefficient matrices are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefScaling {
    /// `B = sep_B * P Q' / sqrt(p q)`.
    PerEntry,
    /// `||B||_F = sep_B / sqrt(2)`.
    Frobenius,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: u32,
    pub name: String,
    pub n: usize,
    pub p: usize,
    pub k_true: usize,
    pub r_true: usize,
    pub sep_mu: f64,
    pub sep_b: f64,
    pub gaussian_sd: f64,
    pub r_nb: f64,
    pub ar1_rho: f64,
    pub families: Vec<FamilyKind>,
    pub coef_scaling: CoefScaling,
}

impl Scenario {
    /// One of the four standard scenarios: all-Gaussian, all-binary, all-count and
    /// mixed Gaussian/Bernoulli/count.
    pub fn standard(id: u32) -> Result<Self> {
        use FamilyKind::*;
        let (name, families) = match id {
            1 => ("all-gaussian", vec![Gaussian, Gaussian, Gaussian]),
            2 => ("all-binary", vec![Bernoulli, Bernoulli, Bernoulli]),
            3 => ("all-count", vec![NegBin, NegBin, NegBin]),
            4 => ("mixed", vec![Gaussian, Bernoulli, NegBin]),
            other => return Err(Error::config(format!("unknown scenario id {other} (expected 1-4)"))),
        };
        Ok(Scenario {
            id,
            name: name.to_string(),
            n: 1000,
            p: 40,
            k_true: 2,
            r_true: 2,
            sep_mu: 3.5,
            sep_b: 7.5,
            gaussian_sd: 0.7,
            r_nb: 12.0,
            ar1_rho: 0.5,
            families,
            coef_scaling: CoefScaling::PerEntry,
        })
    }

    pub fn q(&self) -> usize {
        self.families.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.families.is_empty() {
            return Err(Error::config("scenario needs n, p and q at least 1"));
        }
        if self.k_true == 0 {
            return Err(Error::config("scenario needs at least one cluster"));
        }
        if self.r_true == 0 || self.r_true > self.p.min(self.q()) {
            return Err(Error::config(format!(
                "true rank {} must lie in 1..=min(p, q) = {}",
                self.r_true,
                self.p.min(self.q())
            )));
        }
        if !(self.ar1_rho.abs() < 1.0) {
            return Err(Error::config("AR(1) correlation must lie in (-1, 1)"));
        }
        if !(self.gaussian_sd > 0.0 && self.r_nb > 0.0 && self.sep_b >= 0.0 && self.sep_mu >= 0.0) {
            return Err(Error::config("scenario scales must be nonnegative and sd, r_NB positive"));
        }
        Ok(())
    }

    /// Model families with the generator's nuisance values as starting points.
    pub fn model_families(&self) -> Vec<ResponseFamily> {
        self.families
            .iter()
            .map(|k| match k {
                FamilyKind::Gaussian => ResponseFamily::Gaussian {
                    sigma2: self.gaussian_sd * self.gaussian_sd,
                },
                FamilyKind::Bernoulli => ResponseFamily::Bernoulli,
                FamilyKind::NegBin => ResponseFamily::NegBin { r: self.r_nb },
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub data: Dataset,
    pub families: Vec<ResponseFamily>,
    pub labels: Vec<usize>,
    pub mu: Vec<DVector<f64>>,
    pub coefficients: Vec<DMatrix<f64>>,
    pub seed: u64,
    /// Count-model predictors that hit the clip bound.
    pub clipped: usize,
}

/// `rows x cols` matrix with orthonormal columns from the QR factor of a Gaussian matrix.
fn random_orthonormal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| sample_std_normal(rng));
    g.qr().q().columns(0, cols).into_owned()
}

pub fn generate_scenario(sc: &Scenario, seed: u64) -> Result<SyntheticData> {
    sc.validate()?;
    let mut rng = StreamRng::derive(seed, &[GENERATOR_STREAM, sc.id as u64]);
    let (n, p, q, k) = (sc.n, sc.p, sc.q(), sc.k_true);

    // AR(1) rows: x_a = rho x_{a-1} + sqrt(1 - rho^2) e_a gives corr rho^|a-b|
    let rho = sc.ar1_rho;
    let innov = (1.0 - rho * rho).sqrt();
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let mut prev = sample_std_normal(&mut rng);
        x[(i, 0)] = prev;
        for a in 1..p {
            prev = rho * prev + innov * sample_std_normal(&mut rng);
            x[(i, a)] = prev;
        }
    }

    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();

    let mu: Vec<DVector<f64>> = (0..k)
        .map(|c| {
            let sign = if k == 1 { 1.0 } else { 1.0 - 2.0 * c as f64 / (k - 1) as f64 };
            DVector::from_element(q, sign * sc.sep_mu / 2.0)
        })
        .collect();

    let coefficients: Vec<DMatrix<f64>> = (0..k)
        .map(|_| {
            let pf = random_orthonormal(p, sc.r_true, &mut rng);
            let qf = random_orthonormal(q, sc.r_true, &mut rng);
            let b = pf * qf.transpose();
            match sc.coef_scaling {
                CoefScaling::PerEntry => b * (sc.sep_b / ((p * q) as f64).sqrt()),
                // ||P Q'||_F = sqrt(r)
                CoefScaling::Frobenius => {
                    b * (sc.sep_b / std::f64::consts::SQRT_2 / (sc.r_true as f64).sqrt())
                }
            }
        })
        .collect();

    let mut y = DMatrix::zeros(n, q);
    let mut clipped = 0;
    for i in 0..n {
        let c = labels[i];
        let eta = coefficients[c].tr_mul(&x.row(i).transpose()) + &mu[c];
        for (j, fam) in sc.families.iter().enumerate() {
            y[(i, j)] = match fam {
                FamilyKind::Gaussian => eta[j] + sc.gaussian_sd * sample_std_normal(&mut rng),
                FamilyKind::Bernoulli => {
                    if rng.random::<f64>() < logistic(eta[j]) {
                        1.0
                    } else {
                        0.0
                    }
                }
                FamilyKind::NegBin => {
                    let e = if eta[j].abs() > NB_ETA_CLIP {
                        clipped += 1;
                        eta[j].clamp(-NB_ETA_CLIP, NB_ETA_CLIP)
                    } else {
                        eta[j]
                    };
                    let rate: f64 = Gamma::new(sc.r_nb, e.exp())
                        .map_err(|err| Error::numerical(err.to_string()))?
                        .sample(&mut rng);
                    if rate > 0.0 {
                        Poisson::new(rate)
                            .map_err(|err| Error::numerical(err.to_string()))?
                            .sample(&mut rng)
                    } else {
                        0.0
                    }
                }
            };
        }
    }
    Ok(SyntheticData {
        data: Dataset::new(x, y, None)?,
        families: sc.model_families(),
        labels,
        mu,
        coefficients,
        seed,
        clipped,
    })
}

/// Standardized response features with the columns whose variance was zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: DMatrix<f64>,
    pub constant_columns: Vec<usize>,
}

/// Gaussian columns standardized, binary columns kept as 0/1, counts mapped through
/// `log(1 + y)` and then standardized.
pub fn feature_transform(y: &DMatrix<f64>, families: &[ResponseFamily]) -> Result<FeatureMatrix> {
    if y.ncols() != families.len() {
        return Err(Error::config(format!(
            "Y has {} columns but {} families",
            y.ncols(),
            families.len()
        )));
    }
    let mut values = y.clone();
    let mut constant_columns = Vec::new();
    for (j, fam) in families.iter().enumerate() {
        let mut col: Vec<f64> = y.column(j).iter().copied().collect();
        match fam.kind() {
            FamilyKind::Bernoulli => continue,
            FamilyKind::NegBin => col.iter_mut().for_each(|v| *v = v.ln_1p()),
            FamilyKind::Gaussian => {}
        }
        let m = mean(&col);
        let sd = variance(&col).sqrt();
        let scale = if sd > 0.0 {
            sd
        } else {
            constant_columns.push(j);
            1.0
        };
        for (i, v) in col.iter().enumerate() {
            values[(i, j)] = (v - m) / scale;
        }
    }
    Ok(FeatureMatrix {
        values,
        constant_columns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(id: u32) -> Scenario {
        let mut sc = Scenario::standard(id).unwrap();
        sc.n = 300;
        sc
    }

    #[test]
    fn scenario_shapes() {
        let d = generate_scenario(&Scenario::standard(1).unwrap(), 1).unwrap();
        assert_eq!(d.data.x.shape(), (1000, 40));
        assert_eq!(d.data.y.shape(), (1000, 3));
        assert!(d.families.iter().all(|f| f.is_gaussian()));
        let sc4 = Scenario::standard(4).unwrap();
        assert_eq!(
            sc4.families,
            vec![FamilyKind::Gaussian, FamilyKind::Bernoulli, FamilyKind::NegBin]
        );
        assert!(Scenario::standard(5).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let sc = small(4);
        let a = generate_scenario(&sc, 11).unwrap();
        let b = generate_scenario(&sc, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_scenario(&sc, 12).unwrap();
        assert_ne!(a.data.y, c.data.y);
    }

    #[test]
    fn coefficients_have_exact_rank() {
        for scaling in [CoefScaling::PerEntry, CoefScaling::Frobenius] {
            let mut sc = small(1);
            sc.coef_scaling = scaling;
            let d = generate_scenario(&sc, 3).unwrap();
            for b in &d.coefficients {
                let mut sv: Vec<f64> = b.clone().singular_values().iter().copied().collect();
                sv.sort_by(|a, b| b.total_cmp(a));
                assert!(sv[1] > 1e-8);
                assert!(sv[2] < 1e-10);
            }
            if scaling == CoefScaling::Frobenius {
                let f = d.coefficients[0].norm();
                assert!((f - 7.5 / 2f64.sqrt()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn family_supports() {
        let d = generate_scenario(&small(4), 5).unwrap();
        assert!(d.data.y.column(1).iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(d.data.y.column(2).iter().all(|&v| v >= 0.0 && v.fract() == 0.0));
    }

    #[test]
    fn count_mean_matches_model() {
        let mut sc = small(3);
        sc.n = 4000;
        let d = generate_scenario(&sc, 9).unwrap();
        for j in 0..3 {
            let means: Vec<f64> = (0..sc.n)
                .map(|i| {
                    let c = d.labels[i];
                    let eta = (d.coefficients[c].column(j).dot(&d.data.x.row(i).transpose())
                        + d.mu[c][j])
                        .clamp(-8.0, 8.0);
                    sc.r_nb * eta.exp()
                })
                .collect();
            let ys: Vec<f64> = d.data.y.column(j).iter().copied().collect();
            // residual y - m has mean zero with variance m + m^2 / r
            let resid: Vec<f64> = ys.iter().zip(&means).map(|(y, m)| y - m).collect();
            let se = (variance(&resid) / sc.n as f64).sqrt();
            assert!(mean(&resid).abs() < 4.0 * se, "column {j}: {} vs se {se}", mean(&resid));
        }
    }

    #[test]
    fn no_separation_gives_identical_laws() {
        let mut sc = small(1);
        sc.sep_mu = 0.0;
        sc.sep_b = 0.0;
        let d = generate_scenario(&sc, 2).unwrap();
        assert!(d.mu.iter().all(|m| m.iter().all(|&v| v == 0.0)));
        assert!(d.coefficients.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn transform_examples() {
        let fams = [
            ResponseFamily::Gaussian { sigma2: 1.0 },
            ResponseFamily::Bernoulli,
            ResponseFamily::NegBin { r: 5.0 },
        ];
        let e1 = std::f64::consts::E - 1.0;
        let y = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 3.0, 1.0, e1]);
        let f = feature_transform(&y, &fams).unwrap();
        assert_eq!(f.values.column(1), y.column(1));
        // log1p maps (0, e - 1) to (0, 1), then standardized with sd 1/sqrt(2)
        let s = 0.5f64.sqrt();
        assert!((f.values[(0, 2)] + 0.5 / s).abs() < 1e-12);
        assert!((f.values[(1, 2)] - 0.5 / s).abs() < 1e-12);

        let g = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let f = feature_transform(&g, &fams[..1]).unwrap();
        let col: Vec<f64> = f.values.column(0).iter().copied().collect();
        assert!(mean(&col).abs() < 1e-15 && (variance(&col) - 1.0).abs() < 1e-15);

        let c = DMatrix::from_element(3, 1, 4.0);
        let f = feature_transform(&c, &fams[..1]).unwrap();
        assert_eq!(f.constant_columns, vec![0]);
        assert!(f.values.iter().all(|&v| v == 0.0));
    }
}
