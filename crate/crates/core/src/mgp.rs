//! Multiplicative gamma process: conditional gamma parameters of the global scale
//! `phi` and the increments `delta`, plus their MAP plug-ins.

use nalgebra::DVector;

use crate::model::{ClusterParams, HyperParams};

/// Value used in place of a gamma mode when the shape does not exceed one.
pub const MODE_FLOOR: f64 = 1e-3;

/// Mode `(shape - 1) / rate`, or [`MODE_FLOOR`] when `shape <= 1`.
pub fn gamma_mode(shape: f64, rate: f64) -> f64 {
    if shape > 1.0 {
        (shape - 1.0) / rate
    } else {
        MODE_FLOOR
    }
}

/// `(shape, rate)` of `phi | rest`: `a_phi + (p+q) r / 2` and
/// `b_phi + sum_h lambda_h S_h / 2`.
pub fn phi_conditional(c: &ClusterParams, hyper: &HyperParams) -> (f64, f64) {
    phi_conditional_at(c, &c.column_energy(), hyper)
}

/// [`phi_conditional`] with the column energies `s` supplied by the caller.
pub fn phi_conditional_at(c: &ClusterParams, s: &DVector<f64>, hyper: &HyperParams) -> (f64, f64) {
    let (p, q, r) = (c.p() as f64, c.q() as f64, c.r_max() as f64);
    let lam = c.lambda();
    let weighted: f64 = lam.iter().zip(s.iter()).map(|(l, s)| l * s).sum();
    (hyper.a_phi + (p + q) * r / 2.0, hyper.b_phi + 0.5 * weighted)
}

/// `(shape, rate)` of `delta_h | rest` for zero-based column `h`:
/// `a_h + (p+q)(r - h) / 2` and `1 + (phi/2) sum_{t >= h} lambda_t^{(-h)} S_t`, with
/// `lambda^{(-h)}` the cumulative product leaving out `delta_h`.
pub fn delta_conditional(c: &ClusterParams, h: usize, hyper: &HyperParams) -> (f64, f64) {
    delta_conditional_at(c, &c.column_energy(), h, hyper)
}

pub fn delta_conditional_at(c: &ClusterParams, s: &DVector<f64>, h: usize, hyper: &HyperParams) -> (f64, f64) {
    let (p, q, r) = (c.p() as f64, c.q() as f64, c.r_max());
    let a = if h == 0 { hyper.a1 } else { hyper.a2 };
    let mut lam = 1.0;
    let mut tail = 0.0;
    for t in 0..r {
        if t != h {
            lam *= c.delta[t];
        }
        if t >= h {
            tail += lam * s[t];
        }
    }
    (a + (p + q) * (r - h) as f64 / 2.0, 1.0 + 0.5 * c.phi * tail)
}

/// One sweep of MAP updates: `phi`, then `delta_1, ..., delta_r` in order.
pub fn mgp_map_update(c: &mut ClusterParams, hyper: &HyperParams) {
    let s = c.column_energy();
    mgp_map_update_at(c, &s, hyper);
}

/// [`mgp_map_update`] with caller-supplied column energies.
pub fn mgp_map_update_at(c: &mut ClusterParams, s: &DVector<f64>, hyper: &HyperParams) {
    let (shape, rate) = phi_conditional_at(c, s, hyper);
    c.phi = gamma_mode(shape, rate);
    for h in 0..c.r_max() {
        let (shape, rate) = delta_conditional_at(c, s, h, hyper);
        c.delta[h] = gamma_mode(shape, rate);
    }
}
