//! `O_k(l, r) = ∂ ln ρ(l, r) / ∂α_k` for every real parameter.

use num_complex::Complex64;

use super::{tanh, NdmParams};
use crate::model::DoubledConfig;

/// Log-derivatives in [`super::ParamLayout`] order.
pub fn log_derivatives(params: &NdmParams, cfg: &DoubledConfig) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); params.layout().len()];
    log_derivatives_into(params, cfg, &mut out);
    out
}

/// Like [`log_derivatives`], writing into `out` (length `P`).
pub fn log_derivatives_into(params: &NdmParams, cfg: &DoubledConfig, out: &mut [Complex64]) {
    let lay = params.layout();
    assert_eq!(out.len(), lay.len());
    let n = params.n_sites();
    let i = Complex64::i();
    let l: Vec<f64> = (0..n).map(|j| cfg.l.get_f64(j)).collect();
    let r: Vec<f64> = (0..n).map(|j| cfg.r.get_f64(j)).collect();

    for j in 0..n {
        out[lay.re_a() + j] = Complex64::new(l[j] + r[j], 0.0);
        out[lay.im_a() + j] = Complex64::new(0.0, l[j] - r[j]);
    }

    let (theta_l, theta_r, theta_m) = params.angles(cfg);
    for k in 0..params.n_hidden() {
        let xl = tanh(theta_l[k]);
        let xr = tanh(theta_r[k]).conj();
        out[lay.re_b() + k] = xl + xr;
        out[lay.im_b() + k] = i * (xl - xr);
        for j in 0..n {
            let idx = k * n + j;
            out[lay.re_w() + idx] = l[j] * xl + r[j] * xr;
            out[lay.im_w() + idx] = i * (l[j] * xl - r[j] * xr);
        }
    }
    for p in 0..params.n_mixing() {
        let xm = tanh(theta_m[p]);
        out[lay.re_c() + p] = 2.0 * xm;
        for j in 0..n {
            let idx = p * n + j;
            out[lay.re_u() + idx] = (l[j] + r[j]) * xm;
            out[lay.im_u() + idx] = i * (l[j] - r[j]) * xm;
        }
    }
}
