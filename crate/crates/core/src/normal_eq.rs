//! Weighted normal equations for the mean-shift, `R`-row and `L` blocks of one
//! cluster.
//!
//! Both fitters reduce to the same quadratic: the sampler uses the PG draws as
//! weights and `kappa` as linear terms over the cluster's members, the variational
//! fitter uses `gamma * E[omega]` and `gamma * kappa` over all units. The builders
//! return precision `Q` and linear term `b`; the sampler draws from `N(Q^-1 b, Q^-1)`
//! and the variational fitter takes the mean.

use nalgebra::{DMatrix, DVector};

/// Pseudo-data for one cluster.
#[derive(Debug, Clone)]
pub struct WeightedBlock {
    /// Predictor rows in play (members for the sampler, all units for VI).
    pub x: DMatrix<f64>,
    /// Weights, one column per response.
    pub w: DMatrix<f64>,
    /// Linear terms, one column per response.
    pub c: DMatrix<f64>,
    pub offsets: DMatrix<f64>,
    /// `Some(s)` when column `j` has weights `s * base` (Gaussian columns), letting the
    /// weighted Gram matrix be shared.
    pub scaled_base: Vec<Option<f64>>,
    pub base: DVector<f64>,
}

impl WeightedBlock {
    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn q(&self) -> usize {
        self.w.ncols()
    }

    /// `X' diag(w_j) X` for every column, sharing the Gram matrix across columns
    /// whose weights are multiples of `base`.
    pub fn weighted_grams(&self) -> Vec<DMatrix<f64>> {
        let mut shared: Option<DMatrix<f64>> = None;
        (0..self.q())
            .map(|j| match self.scaled_base[j] {
                Some(s) => {
                    let g = shared.get_or_insert_with(|| weighted_gram(&self.x, self.base.as_slice()));
                    &*g * s
                }
                None => weighted_gram(&self.x, self.w.column(j).as_slice()),
            })
            .collect()
    }

    /// `c_j - w_j (mu_j + offset_j)`: the linear term after removing the intercept.
    pub fn residual_linear(&self, j: usize, mu_j: f64) -> DVector<f64> {
        DVector::from_fn(self.rows(), |i, _| {
            self.c[(i, j)] - self.w[(i, j)] * (mu_j + self.offsets[(i, j)])
        })
    }
}

/// `X' diag(w) X`.
pub fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (i, mut row) in xw.row_iter_mut().enumerate() {
        row *= w[i];
    }
    x.transpose() * xw
}

/// Mean and variance of the normal conditional of each `mu_j` given the coefficient
/// fit `a = X B` (offsets are added here) and prior precision `prior_prec`.
pub fn mu_moments(block: &WeightedBlock, xb: &DMatrix<f64>, prior_prec: f64) -> Vec<(f64, f64)> {
    (0..block.q())
        .map(|j| {
            let mut wsum = 0.0;
            let mut lin = 0.0;
            for i in 0..block.rows() {
                let w = block.w[(i, j)];
                let a = xb[(i, j)] + block.offsets[(i, j)];
                wsum += w;
                lin += block.c[(i, j)] - w * a;
            }
            let v = 1.0 / (wsum + prior_prec);
            (v * lin, v)
        })
        .collect()
}

/// Precision and linear term for row `j` of `R`: `Q = U' W_j U + diag(prec)`,
/// `b = U' (c_j - w_j (mu_j + offset_j))` with `U = X L`.
pub fn r_row_system(
    block: &WeightedBlock,
    u: &DMatrix<f64>,
    j: usize,
    mu_j: f64,
    prec: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let w = block.w.column(j);
    let q = weighted_gram(u, w.as_slice()) + DMatrix::from_diagonal(prec);
    let b = u.tr_mul(&block.residual_linear(j, mu_j));
    (q, b)
}

/// Precision and linear term for `vec(L)` (column-major, so block `h` holds column
/// `h` of `L`):
/// `Q = sum_j (r_j r_j') kron (X' W_j X) + diag(prec) kron I_p`,
/// `b = sum_j r_j kron X' (c_j - w_j (mu_j + offset_j))`.
pub fn l_system(
    block: &WeightedBlock,
    grams: &[DMatrix<f64>],
    r: &DMatrix<f64>,
    mu: &DVector<f64>,
    prec: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let p = block.x.ncols();
    let rm = r.ncols();
    let dim = p * rm;
    let mut q = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DVector::zeros(dim);
    for j in 0..block.q() {
        let rj = r.row(j);
        if rj.iter().all(|&v| v == 0.0) {
            continue;
        }
        let xt = block.x.tr_mul(&block.residual_linear(j, mu[j]));
        for h1 in 0..rm {
            let s1 = rj[h1];
            if s1 == 0.0 {
                continue;
            }
            b.rows_mut(h1 * p, p).axpy(s1, &xt, 1.0);
            for h2 in 0..rm {
                let s = s1 * rj[h2];
                if s != 0.0 {
                    let mut blk = q.view_mut((h1 * p, h2 * p), (p, p));
                    blk += &grams[j] * s;
                }
            }
        }
    }
    for h in 0..rm {
        for a in 0..p {
            q[(h * p + a, h * p + a)] += prec[h];
        }
    }
    (q, b)
}

/// `vec(L)` back to a `p x r` matrix.
pub fn unvec(v: &DVector<f64>, p: usize, r: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(p, r, v.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(x: DMatrix<f64>, w: DMatrix<f64>, c: DMatrix<f64>) -> WeightedBlock {
        let (n, q) = w.shape();
        WeightedBlock {
            x,
            w,
            c,
            offsets: DMatrix::zeros(n, q),
            scaled_base: vec![None; q],
            base: DVector::zeros(n),
        }
    }

    #[test]
    fn scalar_r_row() {
        // U = (1,1)', W = I, residual linear term (1,3)', Lambda = 1 -> Q = 3, b = 4
        let x = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let blk = block(x.clone(), DMatrix::from_element(2, 1, 1.0), DMatrix::from_column_slice(2, 1, &[1.0, 3.0]));
        let (q, b) = r_row_system(&blk, &x, 0, 0.0, &DVector::from_element(1, 1.0));
        assert_eq!(q[(0, 0)], 3.0);
        assert_eq!(b[0], 4.0);
    }

    #[test]
    fn mu_single_bernoulli() {
        let blk = block(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 0.25),
            DMatrix::from_element(1, 1, 0.5),
        );
        let m = mu_moments(&blk, &DMatrix::zeros(1, 1), 0.1);
        assert!((m[0].1 - 1.0 / 0.35).abs() < 1e-12);
        assert!((m[0].0 - 0.5 / 0.35).abs() < 1e-12);
    }

    #[test]
    fn l_system_collapses_to_ridge() {
        // q = 1, r = 1: Q = r^2 X'WX + lambda
        let x = DMatrix::from_fn(5, 2, |i, j| (i + 2 * j) as f64 * 0.3 - 0.7);
        let w = DMatrix::from_fn(5, 1, |i, _| 0.2 + 0.1 * i as f64);
        let c = DMatrix::from_fn(5, 1, |i, _| i as f64 - 2.0);
        let blk = block(x.clone(), w.clone(), c.clone());
        let grams = blk.weighted_grams();
        let r = DMatrix::from_element(1, 1, 1.5);
        let (q, b) = l_system(&blk, &grams, &r, &DVector::zeros(1), &DVector::from_element(1, 0.7));
        let mut direct = x.transpose() * DMatrix::from_diagonal(&w.column(0).into_owned()) * &x * 2.25;
        direct[(0, 0)] += 0.7;
        direct[(1, 1)] += 0.7;
        assert!((q - direct).norm() < 1e-12);
        let bd = x.transpose() * c.column(0) * 1.5;
        assert!((b - bd).norm() < 1e-12);
    }

    #[test]
    fn l_system_matches_explicit_design() {
        // Q and b must equal the Gram system of the design rows (r_j kron x_i)
        let (n, p, q, rm) = (6, 3, 2, 2);
        let x = DMatrix::from_fn(n, p, |i, a| ((i * 5 + a * 3) % 7) as f64 * 0.2 - 0.5);
        let w = DMatrix::from_fn(n, q, |i, j| 0.1 + ((i + j) % 3) as f64 * 0.2);
        let c = DMatrix::from_fn(n, q, |i, j| (i as f64 - j as f64) * 0.3);
        let mut blk = block(x.clone(), w.clone(), c.clone());
        blk.offsets = DMatrix::from_fn(n, q, |i, _| 0.05 * i as f64);
        let r = DMatrix::from_row_slice(q, rm, &[0.4, -1.0, 1.2, 0.3]);
        let mu = DVector::from_column_slice(&[0.2, -0.1]);
        let prec = DVector::from_column_slice(&[0.5, 2.0]);
        let (qm, bv) = l_system(&blk, &blk.weighted_grams(), &r, &mu, &prec);
        let mut qd = DMatrix::zeros(p * rm, p * rm);
        let mut bd = DVector::zeros(p * rm);
        for i in 0..n {
            for j in 0..q {
                let z = DVector::from_fn(p * rm, |idx, _| r[(j, idx / p)] * x[(i, idx % p)]);
                qd += &z * z.transpose() * w[(i, j)];
                bd += &z * (c[(i, j)] - w[(i, j)] * (mu[j] + blk.offsets[(i, j)]));
            }
        }
        for idx in 0..p * rm {
            qd[(idx, idx)] += prec[idx / p];
        }
        assert!((qm - qd).norm() < 1e-12);
        assert!((bv - bd).norm() < 1e-12);
    }

    #[test]
    fn shared_gram_equals_direct() {
        let x = DMatrix::from_fn(4, 2, |i, j| (i * 2 + j) as f64);
        let base = DVector::from_column_slice(&[0.1, 0.5, 1.0, 0.0]);
        let w = DMatrix::from_fn(4, 1, |i, _| base[i] * 4.0);
        let mut blk = block(x.clone(), w.clone(), DMatrix::zeros(4, 1));
        let direct = blk.weighted_grams();
        blk.scaled_base = vec![Some(4.0)];
        blk.base = base;
        assert!((blk.weighted_grams()[0].clone() - &direct[0]).norm() < 1e-12);
    }
}
