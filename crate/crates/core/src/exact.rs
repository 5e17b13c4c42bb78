//! Dense reference implementation for small chains.
//!
//! Basis order matches [`crate::ndm::to_dense`]: site 0 is the most
//! significant bit, spin up before spin down.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{NdmError, Result};
use crate::estimators::{Axis, ObservableSpec};
use crate::model::{LindbladModel, SpinConfig};

/// Dense density matrix, `2^N × 2^N`.
pub type DenseState = DMatrix<Complex64>;

/// Largest chain with an explicit `4^N × 4^N` superoperator.
pub const MAX_EXPLICIT_SITES: usize = 5;
/// Largest chain the matrix-free application accepts.
pub const MAX_MATRIX_FREE_SITES: usize = 7;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn pauli(axis: Axis) -> DMatrix<Complex64> {
    let z = c(0.0, 0.0);
    let o = c(1.0, 0.0);
    let i = c(0.0, 1.0);
    match axis {
        Axis::X => DMatrix::from_row_slice(2, 2, &[z, o, o, z]),
        Axis::Y => DMatrix::from_row_slice(2, 2, &[z, -i, i, z]),
        Axis::Z => DMatrix::from_row_slice(2, 2, &[o, z, z, -o]),
    }
}

fn lowering() -> DMatrix<Complex64> {
    // |↓⟩⟨↑| with up = index 0
    let mut m = DMatrix::zeros(2, 2);
    m[(1, 0)] = c(1.0, 0.0);
    m
}

/// `op` on `site`, identity elsewhere.
pub fn site_operator(n_sites: usize, site: usize, op: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let left = DMatrix::<Complex64>::identity(1 << site, 1 << site);
    let right_dim = 1 << (n_sites - 1 - site);
    let right = DMatrix::<Complex64>::identity(right_dim, right_dim);
    left.kronecker(op).kronecker(&right)
}

/// Dense Hamiltonian built from Pauli matrices.
pub fn hamiltonian(model: &LindbladModel) -> DMatrix<Complex64> {
    let n = model.n_sites();
    let d = 1 << n;
    let mut h = DMatrix::<Complex64>::zeros(d, d);
    for j in 0..n {
        h += site_operator(n, j, &pauli(Axis::Z)) * c(model.field, 0.0);
    }
    for &(j, k) in model.bonds() {
        for (axis, coupling) in [(Axis::X, model.jx), (Axis::Y, model.jy), (Axis::Z, model.jz)] {
            if coupling != 0.0 {
                let a = site_operator(n, j, &pauli(axis));
                let b = site_operator(n, k, &pauli(axis));
                h += a * b * c(coupling, 0.0);
            }
        }
    }
    h
}

/// `σ^-_j` for every site.
pub fn jump_operators(model: &LindbladModel) -> Vec<DMatrix<Complex64>> {
    (0..model.n_sites()).map(|j| site_operator(model.n_sites(), j, &lowering())).collect()
}

/// Dense operator of a Pauli-string observable.
pub fn observable_matrix(n_sites: usize, obs: &ObservableSpec) -> Result<DMatrix<Complex64>> {
    obs.validate(n_sites)?;
    let d = 1 << n_sites;
    let mut x = DMatrix::<Complex64>::zeros(d, d);
    for t in &obs.terms {
        let mut term = DMatrix::<Complex64>::identity(d, d) * c(t.coeff, 0.0);
        for &(site, axis) in &t.ops {
            term *= site_operator(n_sites, site, &pauli(axis));
        }
        x += term;
    }
    Ok(x)
}

/// `Tr(Xρ) / Tr(ρ)`, real part.
pub fn expectation(x: &DMatrix<Complex64>, rho: &DenseState) -> f64 {
    ((x * rho).trace() / rho.trace()).re
}

/// The Lindblad generator for a chain of at most seven sites.
#[derive(Clone, Debug)]
pub struct DenseLiouvillian {
    n_sites: usize,
    h: DMatrix<Complex64>,
    jumps: Vec<DMatrix<Complex64>>,
    gamma: f64,
    explicit: Option<DMatrix<Complex64>>,
}

pub fn build_liouvillian(model: &LindbladModel) -> Result<DenseLiouvillian> {
    let n = model.n_sites();
    if n > MAX_MATRIX_FREE_SITES {
        return Err(NdmError::SizeGuard { what: "dense Liouvillian", max: MAX_MATRIX_FREE_SITES, n });
    }
    let h = hamiltonian(model);
    let jumps = jump_operators(model);
    let explicit = (n <= MAX_EXPLICIT_SITES).then(|| superoperator(&h, &jumps, model.gamma));
    Ok(DenseLiouvillian { n_sites: n, h, jumps, gamma: model.gamma, explicit })
}

/// Row-major vectorization: `vec(AρB) = (A ⊗ Bᵀ) vec(ρ)`.
fn superoperator(h: &DMatrix<Complex64>, jumps: &[DMatrix<Complex64>], gamma: f64) -> DMatrix<Complex64> {
    let d = h.nrows();
    let id = DMatrix::<Complex64>::identity(d, d);
    let mut l = (h.kronecker(&id) - id.kronecker(&h.transpose())) * c(0.0, -1.0);
    for cj in jumps {
        let cdc = cj.adjoint() * cj;
        let jump = cj.kronecker(&cj.conjugate());
        let anti = cdc.kronecker(&id) + id.kronecker(&cdc.transpose());
        l += (jump - anti * c(0.5, 0.0)) * c(gamma, 0.0);
    }
    l
}

impl DenseLiouvillian {
    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn dim(&self) -> usize {
        1 << self.n_sites
    }

    pub fn hamiltonian(&self) -> &DMatrix<Complex64> {
        &self.h
    }

    /// The `4^N × 4^N` matrix, if it was built.
    pub fn matrix(&self) -> Option<&DMatrix<Complex64>> {
        self.explicit.as_ref()
    }

    fn require_matrix(&self) -> Result<&DMatrix<Complex64>> {
        self.explicit.as_ref().ok_or(NdmError::SizeGuard {
            what: "explicit Liouvillian",
            max: MAX_EXPLICIT_SITES,
            n: self.n_sites,
        })
    }

    /// `L[ρ]` in matrix form.
    pub fn apply(&self, rho: &DenseState) -> DenseState {
        let mut out = (&self.h * rho - rho * &self.h) * c(0.0, -1.0);
        if self.gamma != 0.0 {
            for cj in &self.jumps {
                let cdag = cj.adjoint();
                let cdc = &cdag * cj;
                let term = cj * rho * &cdag - (&cdc * rho + rho * &cdc) * c(0.5, 0.0);
                out += term * c(self.gamma, 0.0);
            }
        }
        out
    }

    fn check_state(&self, rho: &DenseState) -> Result<()> {
        let d = self.dim();
        if rho.nrows() != d || rho.ncols() != d {
            return Err(NdmError::DimensionMismatch(format!(
                "state is {}x{}, Liouvillian acts on {d}x{d}",
                rho.nrows(),
                rho.ncols()
            )));
        }
        Ok(())
    }
}

/// Row-major flattening, index `l·2^N + r`.
pub fn vectorize(rho: &DenseState) -> Vec<Complex64> {
    let d = rho.nrows();
    (0..d * d).map(|i| rho[(i / d, i % d)]).collect()
}

pub fn unvectorize(v: &[Complex64], d: usize) -> DenseState {
    DMatrix::from_row_slice(d, d, v)
}

/// One time slice of an exact trajectory.
#[derive(Clone, Debug)]
pub struct ExactRecord {
    pub t: f64,
    pub rho: DenseState,
}

/// Classical RK4 on `ρ̇ = L[ρ]` without renormalization, recording every
/// `record_every` (rounded to a whole number of steps) and at `t_end`.
pub fn evolve_exact(
    liouvillian: &DenseLiouvillian,
    rho0: &DenseState,
    t_end: f64,
    dt: f64,
    record_every: f64,
) -> Result<Vec<ExactRecord>> {
    liouvillian.check_state(rho0)?;
    if !(dt > 0.0 && dt.is_finite()) || !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(NdmError::InvalidConfig(format!("need dt > 0 and t_end >= 0, got dt={dt}, t_end={t_end}")));
    }
    let n_steps = (t_end / dt).round() as usize;
    let every = if record_every > 0.0 { ((record_every / dt).round() as usize).max(1) } else { n_steps.max(1) };
    let mut rho = rho0.clone();
    let mut out = vec![ExactRecord { t: 0.0, rho: rho.clone() }];
    for step in 1..=n_steps {
        rk4_step(liouvillian, &mut rho, dt);
        if step % every == 0 || step == n_steps {
            out.push(ExactRecord { t: step as f64 * dt, rho: rho.clone() });
        }
    }
    Ok(out)
}

fn rk4_step(liouvillian: &DenseLiouvillian, rho: &mut DenseState, dt: f64) {
    let half = c(dt / 2.0, 0.0);
    let k1 = liouvillian.apply(rho);
    let k2 = liouvillian.apply(&(&*rho + &k1 * half));
    let k3 = liouvillian.apply(&(&*rho + &k2 * half));
    let k4 = liouvillian.apply(&(&*rho + &k3 * c(dt, 0.0)));
    *rho += (k1 + (k2 + k3) * c(2.0, 0.0) + k4) * c(dt / 6.0, 0.0);
}

/// Exact state that can be advanced to arbitrary later times, for
/// comparisons at the record points of an adaptive run.
pub struct ExactPropagator<'a> {
    liouvillian: &'a DenseLiouvillian,
    rho: DenseState,
    t: f64,
    max_dt: f64,
}

impl<'a> ExactPropagator<'a> {
    pub fn new(liouvillian: &'a DenseLiouvillian, rho0: &DenseState, max_dt: f64) -> Result<Self> {
        liouvillian.check_state(rho0)?;
        if !(max_dt > 0.0 && max_dt.is_finite()) {
            return Err(NdmError::InvalidConfig(format!("need max_dt > 0, got {max_dt}")));
        }
        Ok(ExactPropagator { liouvillian, rho: rho0.clone(), t: 0.0, max_dt })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn state(&self) -> &DenseState {
        &self.rho
    }

    /// RK4 in equal steps of at most `max_dt` up to `t`.
    pub fn advance_to(&mut self, t: f64) -> Result<&DenseState> {
        if !(t >= self.t) {
            return Err(NdmError::InvalidConfig(format!("cannot step back from t={} to t={t}", self.t)));
        }
        let span = t - self.t;
        let n = (span / self.max_dt).ceil() as usize;
        if n > 0 {
            let h = span / n as f64;
            for _ in 0..n {
                rk4_step(self.liouvillian, &mut self.rho, h);
            }
        }
        self.t = t;
        Ok(&self.rho)
    }
}

/// Unique stationary state, Hermitized and trace-normalized.
///
/// Solves `L vec(ρ) = 0` with the `(0,0)` row replaced by `Tr ρ = 1`; the
/// replaced row is redundant because `Tr L[ρ] = 0`.
pub fn steady_state_exact(liouvillian: &DenseLiouvillian) -> Result<DenseState> {
    let l = liouvillian.require_matrix()?;
    let d = liouvillian.dim();
    let mut a = l.clone();
    for col in 0..d * d {
        a[(0, col)] = c(0.0, 0.0);
    }
    for k in 0..d {
        a[(0, k * d + k)] = c(1.0, 0.0);
    }
    let mut rhs = nalgebra::DVector::<Complex64>::zeros(d * d);
    rhs[0] = c(1.0, 0.0);

    let lu = a.full_piv_lu();
    let u = lu.u();
    let pivots: Vec<f64> = (0..d * d).map(|i| u[(i, i)].norm()).collect();
    let max = pivots.iter().cloned().fold(0.0, f64::max);
    let min = pivots.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 1e-12 * max) {
        return Err(NdmError::DegenerateSteadyState(format!(
            "smallest pivot {min:.3e} against largest {max:.3e}: null space has dimension > 1"
        )));
    }
    let x = lu.solve(&rhs).ok_or_else(|| NdmError::DegenerateSteadyState("singular system".into()))?;
    let rho = unvectorize(x.as_slice(), d);
    let mut rho = (&rho + rho.adjoint()) * c(0.5, 0.0);
    let tr = rho.trace();
    rho /= tr;
    let residual = liouvillian.apply(&rho).norm();
    if residual > 1e-10 * l.norm().max(1.0) {
        return Err(NdmError::DegenerateSteadyState(format!("residual {residual:.3e} after solve")));
    }
    Ok(rho)
}

/// `Σ |ρ^v/Tr ρ^v − ρ^e|² / 4^N`.
pub fn delta_rho(var: &DenseState, exact: &DenseState) -> Result<f64> {
    if var.shape() != exact.shape() {
        return Err(NdmError::DimensionMismatch(format!(
            "variational state {:?} vs exact {:?}",
            var.shape(),
            exact.shape()
        )));
    }
    let tr = var.trace();
    let diff = var / tr - exact;
    let d = var.nrows() as f64;
    Ok(diff.norm_squared() / (d * d))
}

/// `Σ |ρ_{lr}| |(Lρ)_{lr}| / Σ |ρ_{lr}|²`, the exact analogue of `⟨|L^res|⟩_p`.
pub fn delta_l_dense(liouvillian: &DenseLiouvillian, rho: &DenseState) -> Result<f64> {
    liouvillian.check_state(rho)?;
    let lr = liouvillian.apply(rho);
    let num: f64 = rho.iter().zip(lr.iter()).map(|(a, b)| a.norm() * b.norm()).sum();
    Ok(num / rho.norm_squared())
}

/// `|s⟩⟨s|` for a product configuration.
pub fn product_state(cfg: &SpinConfig) -> DenseState {
    let d = 1usize << cfg.len();
    let mut rho = DMatrix::zeros(d, d);
    let i = cfg.index() as usize;
    rho[(i, i)] = c(1.0, 0.0);
    rho
}

/// Largest entry modulus.
pub fn max_abs(m: &DMatrix<Complex64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Hermiticity error, trace, and smallest eigenvalue.
pub fn physicality(rho: &DenseState) -> (f64, Complex64, f64) {
    let herm = max_abs(&(rho - rho.adjoint()));
    let sym = (rho + rho.adjoint()) * c(0.5, 0.0);
    let eig = sym.symmetric_eigenvalues();
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    (herm, rho.trace(), min)
}
