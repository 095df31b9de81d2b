//! Random variate generation: exact Pólya–Gamma draws, Chinese-restaurant-table
//! counts and the standard distributions used by the Gibbs updates.
//!
//! All draws come from [`StreamRng`], a ChaCha8 counter-mode generator keyed by a
//! `(seed, stream)` pair, so parallel workers reproduce the same sequences
//! regardless of scheduling.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::likelihood::{pg_mean, pg_variance};
use crate::linalg::cholesky_jitter;
use crate::numeric::norm_cdf;

/// Seedable counter-based generator with an explicit stream id.
#[derive(Debug, Clone)]
pub struct StreamRng {
    inner: ChaCha8Rng,
    seed: u64,
    stream: u64,
}

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        StreamRng {
            inner,
            seed,
            stream,
        }
    }

    /// Generator whose stream id is a hash of `parts` (e.g. replication, grid cell,
    /// restart).
    pub fn derive(seed: u64, parts: &[u64]) -> Self {
        let stream = parts
            .iter()
            .fold(0x243f_6a88_85a3_08d3u64, |acc, &p| splitmix64(acc ^ splitmix64(p)));
        StreamRng::new(seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Pólya–Gamma

/// Truncation point of the alternating-series sampler.
const PG_TRUNC: f64 = 0.64;
/// Largest integer shape drawn as a sum of exact PG(1, z) variates.
const PG_EXACT_MAX: f64 = 50.0;
/// Terms kept in the gamma-series representation of a fractional shape.
const PG_SERIES_TERMS: usize = 200;

/// One draw from `PG(b, z)`.
///
/// `b = 1` uses the exact alternating-series rejection sampler; integer `b <= 50`
/// sums `b` such draws; a fractional `b <= 50` adds a truncated gamma-series draw
/// for the fractional part; larger shapes use a positive-truncated normal with
/// the exact PG mean and variance.
pub fn sample_pg<R: Rng + ?Sized>(b: f64, z: f64, rng: &mut R) -> Result<f64> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::numerical(format!("PG shape must be positive, got {b}")));
    }
    if !z.is_finite() {
        return Err(Error::numerical(format!("PG tilt must be finite, got {z}")));
    }
    if b > PG_EXACT_MAX {
        return Ok(pg_moment_matched(b, z, rng));
    }
    let whole = b.floor();
    let frac = b - whole;
    let mut total = 0.0;
    for _ in 0..whole as usize {
        total += pg1_devroye(z, rng);
    }
    if frac > 0.0 {
        total += pg_gamma_series(frac, z, rng);
    }
    Ok(total)
}

fn pg_moment_matched<R: Rng + ?Sized>(b: f64, z: f64, rng: &mut R) -> f64 {
    let m = pg_mean(b, z);
    let sd = pg_variance(b, z).sqrt();
    loop {
        let e: f64 = rng.sample(StandardNormal);
        let x = m + sd * e;
        if x > 0.0 {
            return x;
        }
    }
}

/// `PG(b, z) = (1 / 2 pi^2) sum_k g_k / ((k - 1/2)^2 + z^2 / (4 pi^2))`, `g_k ~ Ga(b, 1)`,
/// truncated with the tail replaced by its expectation.
fn pg_gamma_series<R: Rng + ?Sized>(b: f64, z: f64, rng: &mut R) -> f64 {
    let c2 = (z / (2.0 * PI)).powi(2);
    let gamma = Gamma::new(b, 1.0).expect("positive shape");
    let mut sum = 0.0;
    for k in 1..=PG_SERIES_TERMS {
        let kh = k as f64 - 0.5;
        let g: f64 = gamma.sample(rng);
        sum += g / (kh * kh + c2);
    }
    // expected remainder, integral approximation of sum_{k > K} b / ((k-1/2)^2 + c^2)
    let c = c2.sqrt();
    let start = PG_SERIES_TERMS as f64;
    let tail = if c > 0.0 {
        b * (PI / 2.0 - (start / c).atan()) / c
    } else {
        b / start
    };
    (sum + tail) / (2.0 * PI * PI)
}

/// Exact PG(1, z) draw by the alternating-series method on `J*(1, z/2) / 4`.
fn pg1_devroye<R: Rng + ?Sized>(z: f64, rng: &mut R) -> f64 {
    let z = 0.5 * z.abs();
    let fz = PI * PI / 8.0 + 0.5 * z * z;
    let p_expon = mass_texpon(z, fz);
    loop {
        let x = if rng.random::<f64>() < p_expon {
            let e: f64 = rng.sample(Exp1);
            PG_TRUNC + e / fz
        } else {
            truncated_inverse_gaussian(z, rng)
        };
        let mut s = series_coef(0, x);
        let y = rng.random::<f64>() * s;
        let mut n = 0u32;
        loop {
            n += 1;
            if n % 2 == 1 {
                s -= series_coef(n, x);
                if y <= s {
                    return 0.25 * x;
                }
            } else {
                s += series_coef(n, x);
                if y > s {
                    break;
                }
            }
        }
    }
}

/// Probability of proposing from the exponential tail piece.
fn mass_texpon(z: f64, fz: f64) -> f64 {
    let t = PG_TRUNC;
    let b = (t * z - 1.0) / t.sqrt();
    let a = -(t * z + 1.0) / t.sqrt();
    let x0 = fz.ln() + fz * t;
    let xb = x0 - z + norm_cdf(b).ln();
    let xa = x0 + z + norm_cdf(a).ln();
    let qdivp = 4.0 / PI * (xb.exp() + xa.exp());
    1.0 / (1.0 + qdivp)
}

/// Inverse Gaussian with mean `1/z` and shape 1, truncated to `(0, PG_TRUNC)`.
fn truncated_inverse_gaussian<R: Rng + ?Sized>(z: f64, rng: &mut R) -> f64 {
    let t = PG_TRUNC;
    if z < 1.0 / t {
        // mean beyond the truncation point: inverse-chi-square proposal plus rejection
        loop {
            let (mut e1, mut e2): (f64, f64) = (rng.sample(Exp1), rng.sample(Exp1));
            while e1 * e1 > 2.0 * e2 / t {
                e1 = rng.sample(Exp1);
                e2 = rng.sample(Exp1);
            }
            let x = 1.0 + e1 * t;
            let x = t / (x * x);
            let alpha = (-0.5 * z * z * x).exp();
            if rng.random::<f64>() <= alpha {
                return x;
            }
        }
    } else {
        let mu = 1.0 / z;
        loop {
            let y: f64 = rng.sample::<f64, _>(StandardNormal).powi(2);
            let mu_y = mu * y;
            let mut x = mu + 0.5 * mu * mu_y - 0.5 * mu * (4.0 * mu_y + mu_y * mu_y).sqrt();
            if rng.random::<f64>() > mu / (mu + x) {
                x = mu * mu / x;
            }
            if x < t {
                return x;
            }
        }
    }
}

/// n-th coefficient of the alternating series for the `J*(1)` density.
fn series_coef(n: u32, x: f64) -> f64 {
    let nh = n as f64 + 0.5;
    let k = nh * PI;
    if x > PG_TRUNC {
        k * (-0.5 * k * k * x).exp()
    } else if x > 0.0 {
        let expnt = -1.5 * ((0.5 * PI).ln() + x.ln()) + k.ln() - 2.0 * nh * nh / x;
        expnt.exp()
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// CRT

/// Chinese-restaurant-table count `sum_{l=1}^{y} Bernoulli(r / (r + l - 1))`.
pub fn sample_crt<R: Rng + ?Sized>(y: u64, r: f64, rng: &mut R) -> Result<u64> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::numerical(format!("CRT concentration must be positive, got {r}")));
    }
    let mut tables = 0;
    for l in 1..=y {
        if rng.random::<f64>() < r / (r + (l - 1) as f64) {
            tables += 1;
        }
    }
    Ok(tables)
}

/// Exact expectation of a CRT(y, r) count.
pub fn crt_mean(y: u64, r: f64) -> f64 {
    (1..=y).map(|l| r / (r + (l - 1) as f64)).sum()
}

// ---------------------------------------------------------------------------
// Standard distributions

/// Gamma with shape `a` and rate `rate`.
pub fn sample_gamma<R: Rng + ?Sized>(a: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(a > 0.0 && rate > 0.0 && a.is_finite() && rate.is_finite()) {
        return Err(Error::numerical(format!("invalid gamma parameters shape={a}, rate={rate}")));
    }
    let g = Gamma::new(a, 1.0 / rate).map_err(|e| Error::numerical(e.to_string()))?;
    Ok(g.sample(rng))
}

/// Inverse gamma with shape `a` and scale `b` (density proportional to `x^{-a-1} e^{-b/x}`).
pub fn sample_inv_gamma<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    Ok(1.0 / sample_gamma(a, b, rng)?)
}

pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return Err(Error::numerical("empty Dirichlet parameter"));
    }
    let mut draws = alpha
        .iter()
        .map(|&a| sample_gamma(a, 1.0, rng))
        .collect::<Result<Vec<f64>>>()?;
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter_mut().for_each(|d| *d /= total);
    } else {
        // all gamma draws underflowed: put the mass on the largest concentration
        let k = crate::numeric::argmax(alpha.iter().copied());
        draws.iter_mut().enumerate().for_each(|(i, d)| *d = if i == k { 1.0 } else { 0.0 });
    }
    Ok(draws)
}

pub fn sample_std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Draw from `N(Q^{-1} b, Q^{-1})` through the Cholesky factor of `Q`.
pub fn sample_mvn_precision<R: Rng + ?Sized>(
    q: &DMatrix<f64>,
    b: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let chol = cholesky_jitter(q)?;
    let mean = chol.solve(b);
    let eps = DVector::from_fn(b.len(), |_, _| sample_std_normal(rng));
    // L' u = eps gives u ~ N(0, Q^{-1})
    let u = chol
        .l()
        .transpose()
        .solve_upper_triangular(&eps)
        .ok_or_else(|| Error::numerical("singular Cholesky factor"))?;
    Ok(mean + u)
}

/// Parameterized standard distributions.
#[derive(Debug, Clone)]
pub enum StandardDist {
    Gamma { shape: f64, rate: f64 },
    InverseGamma { shape: f64, scale: f64 },
    Dirichlet { alpha: Vec<f64> },
    /// Precision form `N(Q^{-1} b, Q^{-1})`.
    NormalPrecision { precision: DMatrix<f64>, linear: DVector<f64> },
    /// Covariance form `N(m, S)`.
    NormalCovariance { mean: DVector<f64>, cov: DMatrix<f64> },
}

pub fn sample_standard<R: Rng + ?Sized>(dist: &StandardDist, rng: &mut R) -> Result<Vec<f64>> {
    Ok(match dist {
        StandardDist::Gamma { shape, rate } => vec![sample_gamma(*shape, *rate, rng)?],
        StandardDist::InverseGamma { shape, scale } => vec![sample_inv_gamma(*shape, *scale, rng)?],
        StandardDist::Dirichlet { alpha } => sample_dirichlet(alpha, rng)?,
        StandardDist::NormalPrecision { precision, linear } => {
            sample_mvn_precision(precision, linear, rng)?.as_slice().to_vec()
        }
        StandardDist::NormalCovariance { mean, cov } => {
            let chol = cholesky_jitter(cov)?;
            let eps = DVector::from_fn(mean.len(), |_, _| sample_std_normal(rng));
            (mean + chol.l() * eps).as_slice().to_vec()
        }
    })
}
