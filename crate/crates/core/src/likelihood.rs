//! Per-coordinate log-likelihoods and the Pólya–Gamma quadratic bookkeeping that
//! turns all three response families into weighted Gaussian pseudo-data.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{ClusterParams, Dataset, ResponseFamily};
use crate::numeric::{ln_gamma, log1pexp};

/// Below this `|eta|` the PG mean uses its Taylor series.
const PG_SERIES_CUTOFF: f64 = 1e-4;

/// Coefficients of the augmented quadratic `kappa * eta - omega * eta^2 / 2`.
///
/// Bernoulli: `b = 1`, `kappa = y - 1/2`. Negative binomial: `b = y + r`,
/// `kappa = (y - r) / 2`. Gaussian: `omega` is fixed at `precision = 1/sigma2`
/// and `kappa = y / sigma2`; `b` is unused and zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentTriple {
    pub b: f64,
    pub kappa: f64,
    pub is_gaussian: bool,
    pub precision: f64,
}

impl AugmentTriple {
    /// Expected PG weight at `eta`, or the fixed Gaussian precision.
    #[inline]
    pub fn expected_omega(&self, eta: f64) -> f64 {
        if self.is_gaussian {
            self.precision
        } else {
            pg_mean(self.b, eta)
        }
    }
}

/// Log normalizing constant `log C(y + r - 1, y)` of the negative binomial pmf.
#[inline]
pub fn nb_log_norm(y: f64, r: f64) -> f64 {
    ln_gamma(y + r) - ln_gamma(r) - ln_gamma(y + 1.0)
}

/// Full log-density of one response coordinate, constants included.
pub fn loglik_coord(family: &ResponseFamily, y: f64, eta: f64) -> Result<f64> {
    family
        .check_value(y)
        .map_err(|m| Error::data(format!("{m} {y} for {family} response")))?;
    Ok(loglik_unchecked(family, y, eta))
}

/// [`loglik_coord`] without the support check, for inner loops over validated data.
#[inline]
pub fn loglik_unchecked(family: &ResponseFamily, y: f64, eta: f64) -> f64 {
    match *family {
        ResponseFamily::Gaussian { sigma2 } => {
            let r = y - eta;
            -0.5 * (2.0 * PI * sigma2).ln() - 0.5 * r * r / sigma2
        }
        ResponseFamily::Bernoulli => y * eta - log1pexp(eta),
        ResponseFamily::NegBin { r } => nb_log_norm(y, r) + y * eta - (y + r) * log1pexp(eta),
    }
}

/// Negative binomial log-pmf with a precomputed normalizing constant.
#[inline]
pub fn nb_loglik_with_norm(norm: f64, y: f64, r: f64, eta: f64) -> f64 {
    norm + y * eta - (y + r) * log1pexp(eta)
}

pub fn augment_triple(family: &ResponseFamily, y: f64) -> Result<AugmentTriple> {
    family
        .check_value(y)
        .map_err(|m| Error::data(format!("{m} {y} for {family} response")))?;
    Ok(augment_unchecked(family, y))
}

#[inline]
pub fn augment_unchecked(family: &ResponseFamily, y: f64) -> AugmentTriple {
    match *family {
        ResponseFamily::Gaussian { sigma2 } => AugmentTriple {
            b: 0.0,
            kappa: y / sigma2,
            is_gaussian: true,
            precision: 1.0 / sigma2,
        },
        ResponseFamily::Bernoulli => AugmentTriple {
            b: 1.0,
            kappa: y - 0.5,
            is_gaussian: false,
            precision: 0.0,
        },
        ResponseFamily::NegBin { r } => AugmentTriple {
            b: y + r,
            kappa: 0.5 * (y - r),
            is_gaussian: false,
            precision: 0.0,
        },
    }
}

/// Mean of `PG(b, eta)`: `b tanh(eta/2) / (2 eta)`, equal to `b/4` at zero.
#[inline]
pub fn pg_mean(b: f64, eta: f64) -> f64 {
    let a = eta.abs();
    if a < PG_SERIES_CUTOFF {
        0.25 * b * (1.0 - a * a / 12.0)
    } else {
        b * (0.5 * a).tanh() / (2.0 * a)
    }
}

/// Variance of `PG(b, z)`: `b (sinh z - z) / (4 z^3 cosh^2(z/2))`, `b/24` at zero.
pub fn pg_variance(b: f64, z: f64) -> f64 {
    let a = z.abs();
    if a < 1e-3 {
        return b / 24.0 * (1.0 - a * a / 5.0);
    }
    // (sinh z - z) / cosh^2(z/2) = 2 tanh(z/2) - z sech^2(z/2)
    let half = 0.5 * a;
    let sech = 1.0 / half.cosh();
    b / (4.0 * a * a * a) * (2.0 * half.tanh() - a * sech * sech)
}

/// Pseudo-response `kappa / omega`, or `y` itself for Gaussian columns.
pub fn pseudo_response(triple: &AugmentTriple, y: f64, omega: f64) -> Result<f64> {
    if triple.is_gaussian {
        return Ok(y);
    }
    if !(omega > 0.0) {
        return Err(Error::numerical(format!(
            "augmentation weight must be positive, got {omega}"
        )));
    }
    Ok(triple.kappa / omega)
}

/// Negative binomial mean `r exp(eta)`; any offset is already inside `eta`.
#[inline]
pub fn nb_mean(r: f64, eta: f64) -> f64 {
    r * eta.exp()
}

/// Negative binomial normalizing constants per cell (zero for other families).
pub fn nb_norm_table(y: &DMatrix<f64>, families: &[ResponseFamily]) -> DMatrix<f64> {
    DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| match families[j] {
        ResponseFamily::NegBin { r } => nb_log_norm(y[(i, j)], r),
        _ => 0.0,
    })
}

/// Log-likelihood of row `i` of `data` under predictors `eta` (row `i` of an n x q
/// matrix), summed over responses in column order.
#[inline]
pub fn row_loglik(
    families: &[ResponseFamily],
    y: &DMatrix<f64>,
    eta: &DMatrix<f64>,
    norms: &DMatrix<f64>,
    i: usize,
) -> f64 {
    let mut s = 0.0;
    for (j, fam) in families.iter().enumerate() {
        let (yy, e) = (y[(i, j)], eta[(i, j)]);
        s += match *fam {
            ResponseFamily::NegBin { r } => nb_loglik_with_norm(norms[(i, j)], yy, r, e),
            _ => loglik_unchecked(fam, yy, e),
        };
    }
    s
}

/// `n x K` table of per-unit, per-cluster log-likelihoods.
pub fn cluster_logliks(
    clusters: &[ClusterParams],
    families: &[ResponseFamily],
    data: &Dataset,
    norms: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(data.n(), clusters.len());
    for (k, c) in clusters.iter().enumerate() {
        let eta = c.etas(data);
        for i in 0..data.n() {
            out[(i, k)] = row_loglik(families, &data.y, &eta, norms, i);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Gamma, Poisson};

    const GAUSS1: ResponseFamily = ResponseFamily::Gaussian { sigma2: 1.0 };

    #[test]
    fn loglik_examples() {
        let b = loglik_coord(&ResponseFamily::Bernoulli, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(b, -(2f64.ln()), epsilon = 1e-15);
        let g = loglik_coord(&GAUSS1, 1.3, 1.3).unwrap();
        assert_abs_diff_eq!(g, -0.918939, epsilon = 1e-6);
        let nb = loglik_coord(&ResponseFamily::NegBin { r: 2.0 }, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(nb, -2.0 * 2f64.ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(nb, -1.386294, epsilon = 1e-6);
    }

    #[test]
    fn loglik_rejects_invalid_values() {
        assert!(loglik_coord(&ResponseFamily::Bernoulli, 0.5, 0.0).is_err());
        assert!(loglik_coord(&ResponseFamily::NegBin { r: 1.0 }, -1.0, 0.0).is_err());
        assert!(loglik_coord(&GAUSS1, f64::NAN, 0.0).is_err());
    }

    /// Direct evaluation from the density definitions: probabilities in the
    /// natural parameterization and, for integer r, the binomial coefficient as a
    /// product of ratios.
    fn direct_loglik(family: &ResponseFamily, y: f64, eta: f64) -> f64 {
        match *family {
            ResponseFamily::Gaussian { sigma2 } => {
                ((-(y - eta).powi(2) / (2.0 * sigma2)).exp() / (2.0 * PI * sigma2).sqrt()).ln()
            }
            ResponseFamily::Bernoulli => {
                let p = 1.0 / (1.0 + (-eta).exp());
                if y == 1.0 { p.ln() } else { (1.0 - p).ln() }
            }
            ResponseFamily::NegBin { r } => {
                let mut log_binom = 0.0;
                for l in 1..=(y as u64) {
                    log_binom += ((r + l as f64 - 1.0) / l as f64).ln();
                }
                let p = 1.0 / (1.0 + (-eta).exp());
                log_binom + y * p.ln() + r * (1.0 - p).ln()
            }
        }
    }

    #[test]
    fn loglik_matches_direct_evaluation_on_grid() {
        let etas = [-6.0, -2.5, -0.7, 0.0, 0.3, 1.9, 5.0];
        for &eta in &etas {
            for &y in &[-1.2, 0.0, 0.4, 3.0] {
                let fam = ResponseFamily::Gaussian { sigma2: 0.8 };
                assert_abs_diff_eq!(
                    loglik_coord(&fam, y, eta).unwrap(),
                    direct_loglik(&fam, y, eta),
                    epsilon = 1e-10
                );
            }
            for &y in &[0.0, 1.0] {
                let fam = ResponseFamily::Bernoulli;
                assert_abs_diff_eq!(
                    loglik_coord(&fam, y, eta).unwrap(),
                    direct_loglik(&fam, y, eta),
                    epsilon = 1e-10
                );
            }
            for &r in &[1.0, 2.0, 5.0, 12.0] {
                for &y in &[0.0, 1.0, 3.0, 10.0, 40.0] {
                    let fam = ResponseFamily::NegBin { r };
                    assert_abs_diff_eq!(
                        loglik_coord(&fam, y, eta).unwrap(),
                        direct_loglik(&fam, y, eta),
                        epsilon = 1e-10
                    );
                }
            }
        }
    }

    #[test]
    fn augment_examples() {
        let t = augment_triple(&ResponseFamily::Bernoulli, 1.0).unwrap();
        assert_eq!((t.b, t.kappa), (1.0, 0.5));
        let t = augment_triple(&ResponseFamily::NegBin { r: 12.0 }, 12.0).unwrap();
        assert_eq!((t.b, t.kappa), (24.0, 0.0));
        let t = augment_triple(&ResponseFamily::NegBin { r: 5.0 }, 0.0).unwrap();
        assert_eq!((t.b, t.kappa), (5.0, -2.5));
        let t = augment_triple(&ResponseFamily::Gaussian { sigma2: 4.0 }, 2.0).unwrap();
        assert!(t.is_gaussian);
        assert_eq!((t.kappa, t.precision), (0.5, 0.25));
        assert!(augment_triple(&ResponseFamily::Bernoulli, 3.0).is_err());
    }

    #[test]
    fn pg_mean_examples() {
        assert_eq!(pg_mean(1.0, 0.0), 0.25);
        assert_eq!(pg_mean(2.0, 0.0), 0.5);
        assert_abs_diff_eq!(pg_mean(1.0, 2.0), 1f64.tanh() / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pg_mean(1.0, 2.0), 0.1903985, epsilon = 1e-7);
    }

    #[test]
    fn pg_mean_continuous_across_series_cutoff() {
        let below = pg_mean(3.0, PG_SERIES_CUTOFF * (1.0 - 1e-9));
        let above = pg_mean(3.0, PG_SERIES_CUTOFF * (1.0 + 1e-9));
        assert!((below - above).abs() / above < 1e-12);
    }

    #[test]
    fn pg_variance_limits() {
        assert_abs_diff_eq!(pg_variance(1.0, 0.0), 1.0 / 24.0, epsilon = 1e-15);
        let z: f64 = 1.0;
        let direct = (z.sinh() - z) / (4.0 * z.powi(3) * (0.5 * z).cosh().powi(2));
        assert_abs_diff_eq!(pg_variance(1.0, z), direct, epsilon = 1e-15);
        let z: f64 = 1.0001e-3;
        let direct = (z.sinh() - z) / (4.0 * z.powi(3) * (0.5 * z).cosh().powi(2));
        assert!((pg_variance(1.0, z) - direct).abs() < 1e-8);
        assert!(pg_variance(1.0, 800.0).is_finite());
    }

    #[test]
    fn pseudo_response_examples() {
        let t = augment_unchecked(&ResponseFamily::Bernoulli, 1.0);
        assert_eq!(pseudo_response(&t, 1.0, 0.25).unwrap(), 2.0);
        let t = augment_unchecked(&GAUSS1, 3.7);
        assert_eq!(pseudo_response(&t, 3.7, 123.0).unwrap(), 3.7);
        let t = augment_unchecked(&ResponseFamily::NegBin { r: 12.0 }, 12.0);
        assert_eq!(pseudo_response(&t, 12.0, 0.9).unwrap(), 0.0);
        let t = augment_unchecked(&ResponseFamily::Bernoulli, 0.0);
        assert!(pseudo_response(&t, 0.0, 0.0).is_err());
    }

    #[test]
    fn nb_mean_examples() {
        assert_eq!(nb_mean(12.0, 0.0), 12.0);
        assert_abs_diff_eq!(nb_mean(5.0, 2f64.ln()), 10.0, epsilon = 1e-14);
        assert_eq!(nb_mean(1.0, f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn nb_mean_matches_monte_carlo() {
        let (r, eta): (f64, f64) = (3.5, 0.8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let gamma = Gamma::new(r, eta.exp()).unwrap();
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let lam: f64 = gamma.sample(&mut rng);
                Poisson::new(lam).map(|p| p.sample(&mut rng)).unwrap_or(0.0)
            })
            .collect();
        let m = crate::numeric::mean(&draws);
        let se = (crate::numeric::variance(&draws) / n as f64).sqrt();
        assert!((m - nb_mean(r, eta)).abs() < 3.0 * se, "mean {m}, se {se}");
    }

    fn surrogate_slope(family: &ResponseFamily, y: f64, eta0: f64) -> f64 {
        let t = augment_unchecked(family, y);
        let w = pg_mean(t.b, eta0);
        t.kappa - w * eta0
    }

    #[test]
    fn surrogate_is_tangent_to_loglik() {
        let h = 1e-5;
        for &eta0 in &[-3.0, -0.4, 0.0, 0.2, 1.5, 4.0] {
            for (fam, y) in [
                (ResponseFamily::Bernoulli, 0.0),
                (ResponseFamily::Bernoulli, 1.0),
                (ResponseFamily::NegBin { r: 5.0 }, 0.0),
                (ResponseFamily::NegBin { r: 5.0 }, 7.0),
                (ResponseFamily::NegBin { r: 2.5 }, 30.0),
            ] {
                let fd = (loglik_unchecked(&fam, y, eta0 + h) - loglik_unchecked(&fam, y, eta0 - h))
                    / (2.0 * h);
                assert_abs_diff_eq!(surrogate_slope(&fam, y, eta0), fd, epsilon = 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn pg_mean_even_bounded_decreasing(b in 0.01f64..50.0, e1 in 0.0f64..20.0, e2 in 0.0f64..20.0) {
            prop_assert_eq!(pg_mean(b, e1), pg_mean(b, -e1));
            prop_assert!(pg_mean(b, e1) <= b / 4.0);
            let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
            if hi - lo > 1e-6 {
                prop_assert!(pg_mean(b, hi) < pg_mean(b, lo));
            }
        }
    }
}
