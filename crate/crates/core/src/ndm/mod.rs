//! Neural density matrix: a complex RBM with row, column and mixing hidden
//! layers traced out analytically,
//!
//! ```text
//! ρ(l, r) = exp[Σ_j a_j l_j + a_j* r_j]
//!         × Π_k cosh(b_k + Σ_j W_kj l_j) cosh(b_k* + Σ_j W_kj* r_j)
//!         × Π_p cosh(c_p + c_p* + Σ_j U_pj l_j + U_pj* r_j)
//! ```
//!
//! The form is Hermitian and positive semidefinite for every parameter value.

mod cache;
mod checkpoint;
mod derivatives;
mod init;

pub use cache::{ratio, Flip, LookupCache, Side, CACHE_REBUILD_INTERVAL};
pub use checkpoint::Checkpoint;
pub use derivatives::{log_derivatives, log_derivatives_into};
pub use init::{init_params, InitMode, Polarization};

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{NdmError, Result};
use crate::model::DoubledConfig;

/// Largest chain [`to_dense`] will expand.
pub const MAX_DENSE_SITES: usize = 12;

/// `ln cosh z`, stable for large `|Re z|`.
#[inline]
pub fn log_cosh(z: Complex64) -> Complex64 {
    let z = if z.re < 0.0 { -z } else { z };
    // cosh z = e^z (1 + e^{-2z}) / 2 with |e^{-2z}| <= 1
    z + (1.0 + (-2.0 * z).exp()).ln() - std::f64::consts::LN_2
}

/// `tanh z`, stable for large `|Re z|`.
#[inline]
pub fn tanh(z: Complex64) -> Complex64 {
    if z.re >= 0.0 {
        let t = (-2.0 * z).exp();
        (1.0 - t) / (1.0 + t)
    } else {
        let t = (2.0 * z).exp();
        (t - 1.0) / (t + 1.0)
    }
}

/// Offsets of the real parameter vector.
///
/// Order: `Re a, Im a, Re b, Im b, Re W, Im W, Re c, Re U, Im U`, matrices
/// row-major over (hidden unit, site). `Im c` is not a free parameter: the
/// mixing bias only enters through `c + c*`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_sites: usize,
    pub n_hidden: usize,
    pub n_mixing: usize,
}

impl ParamLayout {
    pub fn re_a(&self) -> usize {
        0
    }
    pub fn im_a(&self) -> usize {
        self.n_sites
    }
    pub fn re_b(&self) -> usize {
        2 * self.n_sites
    }
    pub fn im_b(&self) -> usize {
        self.re_b() + self.n_hidden
    }
    pub fn re_w(&self) -> usize {
        self.im_b() + self.n_hidden
    }
    pub fn im_w(&self) -> usize {
        self.re_w() + self.n_hidden * self.n_sites
    }
    pub fn re_c(&self) -> usize {
        self.im_w() + self.n_hidden * self.n_sites
    }
    pub fn re_u(&self) -> usize {
        self.re_c() + self.n_mixing
    }
    pub fn im_u(&self) -> usize {
        self.re_u() + self.n_mixing * self.n_sites
    }

    /// Number of real parameters, `2N + 2M(N+1) + M̃(2N+1)`.
    pub fn len(&self) -> usize {
        self.im_u() + self.n_mixing * self.n_sites
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Complex parameter count `(N+1)(M+M̃) + N`, counting `c` as complex.
    pub fn complex_len(&self) -> usize {
        (self.n_sites + 1) * (self.n_hidden + self.n_mixing) + self.n_sites
    }
}

/// Flat real parameter vector in [`ParamLayout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `self + h * other`.
    pub fn axpy(&self, h: f64, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.len(), other.len());
        ParamVector(self.0.iter().zip(&other.0).map(|(x, y)| x + h * y).collect())
    }
}

/// Complex RBM parameters. `w` and `u` are row-major `(hidden, site)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NdmParams {
    n_sites: usize,
    n_hidden: usize,
    n_mixing: usize,
    a: Vec<Complex64>,
    b: Vec<Complex64>,
    w: Vec<Complex64>,
    c: Vec<Complex64>,
    u: Vec<Complex64>,
}

impl NdmParams {
    pub fn zeros(n_sites: usize, n_hidden: usize, n_mixing: usize) -> Self {
        let z = Complex64::new(0.0, 0.0);
        NdmParams {
            n_sites,
            n_hidden,
            n_mixing,
            a: vec![z; n_sites],
            b: vec![z; n_hidden],
            w: vec![z; n_hidden * n_sites],
            c: vec![z; n_mixing],
            u: vec![z; n_mixing * n_sites],
        }
    }

    pub fn from_parts(
        n_sites: usize,
        a: Vec<Complex64>,
        b: Vec<Complex64>,
        w: Vec<Complex64>,
        c: Vec<Complex64>,
        u: Vec<Complex64>,
    ) -> Result<Self> {
        let n_hidden = b.len();
        let n_mixing = c.len();
        if a.len() != n_sites || w.len() != n_hidden * n_sites || u.len() != n_mixing * n_sites {
            return Err(NdmError::InvalidParams(format!(
                "inconsistent shapes: N = {n_sites}, |a| = {}, |b| = {n_hidden}, |W| = {}, |c| = {n_mixing}, |U| = {}",
                a.len(),
                w.len(),
                u.len()
            )));
        }
        let p = NdmParams { n_sites, n_hidden, n_mixing, a, b, w, c, u };
        p.check_finite()?;
        Ok(p)
    }

    pub fn check_finite(&self) -> Result<()> {
        let bad = [&self.a, &self.b, &self.w, &self.c, &self.u]
            .iter()
            .flat_map(|v| v.iter())
            .any(|z| !z.re.is_finite() || !z.im.is_finite());
        if bad {
            return Err(NdmError::InvalidParams("non-finite parameter value".into()));
        }
        Ok(())
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }
    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }
    pub fn n_mixing(&self) -> usize {
        self.n_mixing
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            n_sites: self.n_sites,
            n_hidden: self.n_hidden,
            n_mixing: self.n_mixing,
        }
    }

    pub fn a(&self) -> &[Complex64] {
        &self.a
    }
    pub fn b(&self) -> &[Complex64] {
        &self.b
    }
    pub fn w(&self) -> &[Complex64] {
        &self.w
    }
    pub fn c(&self) -> &[Complex64] {
        &self.c
    }
    pub fn u(&self) -> &[Complex64] {
        &self.u
    }
    pub fn a_mut(&mut self) -> &mut [Complex64] {
        &mut self.a
    }
    pub fn b_mut(&mut self) -> &mut [Complex64] {
        &mut self.b
    }
    pub fn w_mut(&mut self) -> &mut [Complex64] {
        &mut self.w
    }
    pub fn c_mut(&mut self) -> &mut [Complex64] {
        &mut self.c
    }
    pub fn u_mut(&mut self) -> &mut [Complex64] {
        &mut self.u
    }

    #[inline]
    pub fn weight(&self, k: usize, j: usize) -> Complex64 {
        self.w[k * self.n_sites + j]
    }

    #[inline]
    pub fn mixing_weight(&self, p: usize, j: usize) -> Complex64 {
        self.u[p * self.n_sites + j]
    }

    /// Pack into the real parameter vector.
    pub fn to_vector(&self) -> ParamVector {
        let lay = self.layout();
        let mut v = vec![0.0; lay.len()];
        for (j, z) in self.a.iter().enumerate() {
            v[lay.re_a() + j] = z.re;
            v[lay.im_a() + j] = z.im;
        }
        for (k, z) in self.b.iter().enumerate() {
            v[lay.re_b() + k] = z.re;
            v[lay.im_b() + k] = z.im;
        }
        for (i, z) in self.w.iter().enumerate() {
            v[lay.re_w() + i] = z.re;
            v[lay.im_w() + i] = z.im;
        }
        for (p, z) in self.c.iter().enumerate() {
            v[lay.re_c() + p] = z.re;
        }
        for (i, z) in self.u.iter().enumerate() {
            v[lay.re_u() + i] = z.re;
            v[lay.im_u() + i] = z.im;
        }
        ParamVector(v)
    }

    /// Overwrite every free parameter from `v`; `Im c` is left untouched.
    pub fn set_from_vector(&mut self, v: &ParamVector) -> Result<()> {
        let lay = self.layout();
        if v.len() != lay.len() {
            return Err(NdmError::DimensionMismatch(format!(
                "parameter vector has length {}, expected {}",
                v.len(),
                lay.len()
            )));
        }
        let v = &v.0;
        for j in 0..self.n_sites {
            self.a[j] = Complex64::new(v[lay.re_a() + j], v[lay.im_a() + j]);
        }
        for k in 0..self.n_hidden {
            self.b[k] = Complex64::new(v[lay.re_b() + k], v[lay.im_b() + k]);
        }
        for i in 0..self.w.len() {
            self.w[i] = Complex64::new(v[lay.re_w() + i], v[lay.im_w() + i]);
        }
        for p in 0..self.n_mixing {
            self.c[p].re = v[lay.re_c() + p];
        }
        for i in 0..self.u.len() {
            self.u[i] = Complex64::new(v[lay.re_u() + i], v[lay.im_u() + i]);
        }
        self.check_finite()
    }

    /// Parameters from a packed vector, with `Im c = 0`.
    pub fn from_vector(layout: ParamLayout, v: &ParamVector) -> Result<Self> {
        let mut p = NdmParams::zeros(layout.n_sites, layout.n_hidden, layout.n_mixing);
        p.set_from_vector(v)?;
        Ok(p)
    }

    /// `self + h * direction` in packed coordinates.
    pub fn displaced(&self, h: f64, direction: &ParamVector) -> Result<Self> {
        let mut next = self.clone();
        next.set_from_vector(&self.to_vector().axpy(h, direction))?;
        Ok(next)
    }

    /// Row, column and mixing angles for `cfg`.
    pub fn angles(&self, cfg: &DoubledConfig) -> (Vec<Complex64>, Vec<Complex64>, Vec<Complex64>) {
        let n = self.n_sites;
        let mut theta_l = self.b.clone();
        let mut theta_r = self.b.clone();
        for k in 0..self.n_hidden {
            let row = &self.w[k * n..(k + 1) * n];
            for (j, w) in row.iter().enumerate() {
                theta_l[k] += w * cfg.l.get_f64(j);
                theta_r[k] += w * cfg.r.get_f64(j);
            }
        }
        let theta_m = (0..self.n_mixing)
            .map(|p| {
                let row = &self.u[p * n..(p + 1) * n];
                let mut t = Complex64::new(2.0 * self.c[p].re, 0.0);
                for (j, w) in row.iter().enumerate() {
                    t += w * cfg.l.get_f64(j) + w.conj() * cfg.r.get_f64(j);
                }
                t
            })
            .collect();
        (theta_l, theta_r, theta_m)
    }

    pub fn visible_term(&self, cfg: &DoubledConfig) -> Complex64 {
        self.a
            .iter()
            .enumerate()
            .map(|(j, a)| a * cfg.l.get_f64(j) + a.conj() * cfg.r.get_f64(j))
            .sum()
    }
}

/// `ln ρ(l, r)`, unnormalized. The imaginary part is a phase defined modulo 2π.
pub fn log_rho(params: &NdmParams, cfg: &DoubledConfig) -> Result<Complex64> {
    if cfg.len() != params.n_sites {
        return Err(NdmError::InvalidConfig(format!(
            "configuration has {} sites, parameters have {}",
            cfg.len(),
            params.n_sites
        )));
    }
    let v = log_rho_unchecked(params, cfg);
    if !v.re.is_finite() || !v.im.is_finite() {
        return Err(NdmError::EvaluationOverflow(format!("{cfg:?}")));
    }
    Ok(v)
}

pub(crate) fn log_rho_unchecked(params: &NdmParams, cfg: &DoubledConfig) -> Complex64 {
    let (tl, tr, tm) = params.angles(cfg);
    let mut s = params.visible_term(cfg);
    for k in 0..params.n_hidden {
        s += log_cosh(tl[k]) + log_cosh(tr[k]).conj();
    }
    for t in tm {
        s += log_cosh(t);
    }
    s
}

/// Dense `2^N × 2^N` matrix with entries `exp(ln ρ)`, not normalized.
pub fn to_dense(params: &NdmParams) -> Result<DMatrix<Complex64>> {
    to_dense_with_shift(params, 0.0)
}

/// Dense matrix divided by its trace.
pub fn to_dense_normalized(params: &NdmParams) -> Result<DMatrix<Complex64>> {
    let n = params.n_sites;
    guard_dense(n)?;
    // shift by the largest diagonal log-weight so the exponentials stay finite
    let shift = crate::model::SpinConfig::enumerate(n)
        .map(|s| log_rho_unchecked(params, &DoubledConfig::diagonal(s)).re)
        .fold(f64::NEG_INFINITY, f64::max);
    let m = to_dense_with_shift(params, shift)?;
    let tr = m.trace();
    Ok(m / tr)
}

fn guard_dense(n: usize) -> Result<()> {
    if n > MAX_DENSE_SITES {
        return Err(NdmError::SizeGuard { what: "to_dense", max: MAX_DENSE_SITES, n });
    }
    Ok(())
}

fn to_dense_with_shift(params: &NdmParams, shift: f64) -> Result<DMatrix<Complex64>> {
    let n = params.n_sites;
    guard_dense(n)?;
    let dim = 1usize << n;
    let mut m = DMatrix::zeros(dim, dim);
    for cfg in DoubledConfig::enumerate(n) {
        let v = (log_rho_unchecked(params, &cfg) - shift).exp();
        if !v.re.is_finite() || !v.im.is_finite() {
            return Err(NdmError::EvaluationOverflow(format!("{cfg:?}")));
        }
        m[(cfg.l.index() as usize, cfg.r.index() as usize)] = v;
    }
    Ok(m)
}
