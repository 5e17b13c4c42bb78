//! Integration of `S α̇ = f`: regularized solves and Runge-Kutta drivers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{NdmError, Result};
use crate::estimators::{
    build_sr_weighted, delta_l_weighted, estimate_delta_l, estimate_observable, exhaustive_p, exhaustive_q,
    observable_weighted, Estimate, ObservableSpec, SrSystem, SrVariant,
};
use crate::model::{DoubledConfig, LindbladModel};
use crate::ndm::{log_rho, NdmParams, ParamVector};
use crate::sampler::{diagonal_batch, AcceptanceStats, ChainConfig, MarkovChains, Target};

/// Largest chain the exhaustive (noise-free) mode accepts.
pub const MAX_EXHAUSTIVE_SITES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    /// Solve `(S + λ·max diag(S)) α̇ = f` by Cholesky.
    DiagonalShift(f64),
    /// Pseudo-inverse dropping singular values below `ε·σ_max`.
    SvdCutoff(f64),
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::DiagonalShift(1e-3)
    }
}

impl Regularization {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Regularization::DiagonalShift(l) if !(l >= 0.0 && l.is_finite()) => {
                Err(NdmError::InvalidConfig(format!("diagonal shift must be >= 0, got {l}")))
            }
            Regularization::SvdCutoff(e) if !(0.0..1.0).contains(&e) => {
                Err(NdmError::InvalidConfig(format!("svd cutoff must lie in [0, 1), got {e}")))
            }
            _ => Ok(()),
        }
    }
}

/// `α̇ = S⁻¹ f` under the chosen regularization.
pub fn solve_update(sys: &SrSystem, reg: Regularization) -> Result<ParamVector> {
    reg.validate()?;
    let x = match reg {
        Regularization::DiagonalShift(lambda) => solve_shifted(&sys.s, &sys.f, lambda)?,
        Regularization::SvdCutoff(eps) => solve_pinv(&sys.s, &sys.f, eps),
    };
    if x.iter().any(|v| !v.is_finite()) {
        return Err(NdmError::NonFiniteUpdate);
    }
    Ok(ParamVector(x.as_slice().to_vec()))
}

fn solve_shifted(s: &DMatrix<f64>, f: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let max_diag = s.diagonal().iter().cloned().fold(0.0, f64::max);
    let shift = if max_diag > 0.0 { lambda * max_diag } else { lambda };
    let mut a = s.clone();
    for k in 0..a.nrows() {
        a[(k, k)] += shift;
    }
    let chol = a.cholesky().ok_or(NdmError::Factorization { shift: lambda })?;
    Ok(chol.solve(f))
}

fn solve_pinv(s: &DMatrix<f64>, f: &DVector<f64>, eps: f64) -> DVector<f64> {
    let svd = s.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = eps * smax;
    let u = svd.u.as_ref().expect("u computed");
    let vt = svd.v_t.as_ref().expect("v_t computed");
    let mut coeff = u.tr_mul(f);
    for (c, s) in coeff.iter_mut().zip(svd.singular_values.iter()) {
        *c = if *s > cut && *s > 0.0 { *c / s } else { 0.0 };
    }
    vt.tr_mul(&coeff)
}

/// How expectation values are formed.
#[derive(Clone, Debug, PartialEq)]
pub enum Sampling {
    /// Sums over the full configuration space.
    Exhaustive,
    /// Markov chains over `p` (for `S`, `f`, `δL`) and `q` (for observables).
    MonteCarlo {
        p: ChainConfig,
        q: ChainConfig,
        /// Reuse the first-stage `p` samples for the later Runge-Kutta stages
        /// of a step, reweighted by `|ρ'/ρ|²`.
        reuse_stage_samples: bool,
    },
}

/// Running diagnostics of an [`Evolver`].
#[derive(Clone, Debug, Default)]
pub struct Diagnostics {
    pub n_builds: usize,
    /// Smallest relative eigenvalue of `S` seen (only with PSD checks on).
    pub min_relative_eigenvalue: Option<f64>,
    pub acceptance_p: AcceptanceStats,
    pub acceptance_q: AcceptanceStats,
}

/// Observables and `δL` at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub observables: Vec<Estimate>,
    pub delta_l: Estimate,
    pub acceptance_p: Option<f64>,
    pub acceptance_q: Option<f64>,
}

enum SamplerState {
    Exhaustive,
    MonteCarlo {
        p: MarkovChains,
        q: MarkovChains,
        p_burned: bool,
        q_burned: bool,
        reuse: bool,
        /// First-stage samples of the current step and the parameters they
        /// were drawn at.
        stage_cache: Option<(NdmParams, Vec<(DoubledConfig, f64)>)>,
    },
}

/// Right-hand side of the parameter ODE together with the samplers it owns.
pub struct Evolver {
    model: LindbladModel,
    variant: SrVariant,
    regularization: Regularization,
    observables: Vec<ObservableSpec>,
    sampler: SamplerState,
    check_psd: bool,
    diagnostics: Diagnostics,
}

impl Evolver {
    pub fn new(
        model: LindbladModel,
        sampling: Sampling,
        variant: SrVariant,
        regularization: Regularization,
        observables: Vec<ObservableSpec>,
    ) -> Result<Self> {
        regularization.validate()?;
        for o in &observables {
            o.validate(model.n_sites())?;
        }
        let sampler = match sampling {
            Sampling::Exhaustive => {
                if model.n_sites() > MAX_EXHAUSTIVE_SITES {
                    return Err(NdmError::SizeGuard {
                        what: "exhaustive sampling",
                        max: MAX_EXHAUSTIVE_SITES,
                        n: model.n_sites(),
                    });
                }
                SamplerState::Exhaustive
            }
            Sampling::MonteCarlo { p, q, reuse_stage_samples } => SamplerState::MonteCarlo {
                p: MarkovChains::new(&model, Target::Rows, p)?,
                q: MarkovChains::new(&model, Target::Diagonal, q)?,
                p_burned: false,
                q_burned: false,
                reuse: reuse_stage_samples,
                stage_cache: None,
            },
        };
        Ok(Evolver { model, variant, regularization, observables, sampler, check_psd: false, diagnostics: Diagnostics::default() })
    }

    /// Record the smallest relative eigenvalue of every `S` built.
    pub fn with_psd_check(mut self, on: bool) -> Self {
        self.check_psd = on;
        self
    }

    pub fn model(&self) -> &LindbladModel {
        &self.model
    }

    pub fn observables(&self) -> &[ObservableSpec] {
        &self.observables
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    fn p_weights(&mut self, params: &NdmParams, first_stage: bool) -> Result<Vec<(DoubledConfig, f64)>> {
        match &mut self.sampler {
            SamplerState::Exhaustive => exhaustive_p(params),
            SamplerState::MonteCarlo { p, p_burned, reuse, stage_cache, .. } => {
                if *reuse && !first_stage {
                    if let Some((base, w)) = stage_cache.as_ref() {
                        return reweight(base, params, w);
                    }
                }
                let burn = if *p_burned { 1 } else { p.config().burn_in };
                let batch = p.sample(params, burn)?;
                *p_burned = true;
                self.diagnostics.acceptance_p = batch.acceptance;
                let w = batch.weighted();
                if *reuse {
                    *stage_cache = Some((params.clone(), w.clone()));
                }
                Ok(w)
            }
        }
    }

    fn derivative(&mut self, params: &NdmParams, first_stage: bool) -> Result<ParamVector> {
        let w = self.p_weights(params, first_stage)?;
        let sys = build_sr_weighted(&self.model, params, &w, self.variant)?;
        self.diagnostics.n_builds += 1;
        if self.check_psd {
            let e = sys.min_relative_eigenvalue();
            let m = self.diagnostics.min_relative_eigenvalue.get_or_insert(e);
            *m = m.min(e);
        }
        solve_update(&sys, self.regularization)
    }

    /// `α̇` at `params` from a fresh batch.
    pub fn time_derivative(&mut self, params: &NdmParams) -> Result<ParamVector> {
        self.derivative(params, true)
    }

    /// The assembled system at `params` (fresh batch, no solve).
    pub fn sr_system(&mut self, params: &NdmParams) -> Result<SrSystem> {
        let w = self.p_weights(params, true)?;
        build_sr_weighted(&self.model, params, &w, self.variant)
    }

    /// Observables over `q` and `δL` over `p`.
    pub fn measure(&mut self, params: &NdmParams) -> Result<Measurement> {
        match &mut self.sampler {
            SamplerState::Exhaustive => {
                let q = exhaustive_q(params)?;
                let p = exhaustive_p(params)?;
                Ok(Measurement {
                    observables: self.observables.iter().map(|o| observable_weighted(o, params, &q)).collect(),
                    delta_l: delta_l_weighted(&self.model, params, &p),
                    acceptance_p: None,
                    acceptance_q: None,
                })
            }
            SamplerState::MonteCarlo { p, q, p_burned, q_burned, .. } => {
                let burn = if *q_burned { 1 } else { q.config().burn_in };
                let qb = diagonal_batch(q.sample(params, burn)?);
                *q_burned = true;
                let burn = if *p_burned { 1 } else { p.config().burn_in };
                let pb = p.sample(params, burn)?;
                *p_burned = true;
                let observables =
                    self.observables.iter().map(|o| estimate_observable(o, params, &qb)).collect::<Result<_>>()?;
                let delta_l = estimate_delta_l(&self.model, params, &pb)?;
                self.diagnostics.acceptance_q = qb.acceptance;
                self.diagnostics.acceptance_p = pb.acceptance;
                Ok(Measurement {
                    observables,
                    delta_l,
                    acceptance_p: Some(pb.acceptance.overall()),
                    acceptance_q: Some(qb.acceptance.overall()),
                })
            }
        }
    }
}

fn reweight(base: &NdmParams, params: &NdmParams, w: &[(DoubledConfig, f64)]) -> Result<Vec<(DoubledConfig, f64)>> {
    let logs: Vec<f64> = w
        .iter()
        .map(|(c, x)| Ok(x.ln() + 2.0 * (log_rho(params, c)?.re - log_rho(base, c)?.re)))
        .collect::<Result<_>>()?;
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = raw.iter().sum();
    Ok(w.iter().zip(raw).map(|((c, _), x)| (*c, x / z)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scheme {
    Rk4 { dt: f64 },
    /// Heun's rule with step-doubling error control.
    Rk2Adaptive { tol: f64, dt_init: f64, dt_min: f64, dt_max: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    /// Final time in units of `1/γ`.
    pub t_end: f64,
    pub record_every: f64,
}

const SAFETY: f64 = 0.9;
const MAX_GROWTH: f64 = 2.0;
const MAX_SHRINK: f64 = 0.25;

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NdmError::InvalidConfig(m));
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return bad(format!("t_end must be finite and >= 0, got {}", self.t_end));
        }
        if !(self.record_every > 0.0 && self.record_every.is_finite()) {
            return bad(format!("record_every must be > 0, got {}", self.record_every));
        }
        match self.scheme {
            Scheme::Rk4 { dt } if !(dt > 0.0 && dt.is_finite()) => bad(format!("dt must be > 0, got {dt}")),
            Scheme::Rk2Adaptive { tol, dt_init, dt_min, dt_max } => {
                if !(tol > 0.0 && tol.is_finite()) {
                    return bad(format!("tol must be > 0, got {tol}"));
                }
                if !(dt_min > 0.0 && dt_min <= dt_init && dt_init <= dt_max && dt_max.is_finite()) {
                    return bad(format!("need 0 < dt_min <= dt_init <= dt_max, got {dt_min}, {dt_init}, {dt_max}"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// One recorded time point.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub observables: Vec<Estimate>,
    pub delta_l: Estimate,
    pub acceptance_p: Option<f64>,
    pub acceptance_q: Option<f64>,
    /// Set by the record hook when it stores the parameters.
    pub checkpoint: Option<String>,
}

/// Called at every record point with the current parameters.
pub type RecordHook<'a> = dyn FnMut(&mut TrajectoryRecord, &NdmParams) -> Result<()> + 'a;

/// Per-step statistics of an integration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepLog {
    pub accepted: usize,
    pub rejected: usize,
    /// Error estimate of every accepted adaptive step.
    pub accepted_errors: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
    pub params: NdmParams,
    pub steps: StepLog,
    /// Stationary-state runs only: whether the stop criterion was met.
    pub converged: bool,
}

fn rk4_step(ev: &mut Evolver, params: &NdmParams, dt: f64) -> Result<NdmParams> {
    let k1 = ev.derivative(params, true)?;
    let k2 = ev.derivative(&params.displaced(dt / 2.0, &k1)?, false)?;
    let k3 = ev.derivative(&params.displaced(dt / 2.0, &k2)?, false)?;
    let k4 = ev.derivative(&params.displaced(dt, &k3)?, false)?;
    let mut incr = k1;
    for (i, v) in incr.0.iter_mut().enumerate() {
        *v = (*v + 2.0 * k2.0[i] + 2.0 * k3.0[i] + k4.0[i]) / 6.0;
    }
    params.displaced(dt, &incr)
}

fn heun_step(ev: &mut Evolver, params: &NdmParams, dt: f64, first: bool) -> Result<NdmParams> {
    let k1 = ev.derivative(params, first)?;
    let k2 = ev.derivative(&params.displaced(dt, &k1)?, false)?;
    let mut incr = k1;
    for (a, b) in incr.0.iter_mut().zip(&k2.0) {
        *a = 0.5 * (*a + b);
    }
    params.displaced(dt, &incr)
}

fn rms_difference(a: &NdmParams, b: &NdmParams) -> f64 {
    let (x, y) = (a.to_vector(), b.to_vector());
    let s: f64 = x.0.iter().zip(&y.0).map(|(p, q)| (p - q).powi(2)).sum();
    (s / x.len().max(1) as f64).sqrt()
}

fn record(ev: &mut Evolver, params: &NdmParams, t: f64, hook: &mut RecordHook<'_>) -> Result<TrajectoryRecord> {
    let m = ev.measure(params)?;
    let mut rec = TrajectoryRecord {
        t,
        observables: m.observables,
        delta_l: m.delta_l,
        acceptance_p: m.acceptance_p,
        acceptance_q: m.acceptance_q,
        checkpoint: None,
    };
    hook(&mut rec, params)?;
    Ok(rec)
}

/// Integrate to `t_end`, recording at multiples of `record_every` and at the
/// end. `stop` is consulted after each record.
fn integrate(
    ev: &mut Evolver,
    params0: &NdmParams,
    cfg: &IntegratorConfig,
    hook: &mut RecordHook<'_>,
    mut stop: impl FnMut(&[TrajectoryRecord]) -> bool,
) -> Result<Trajectory> {
    cfg.validate()?;
    let mut params = params0.clone();
    params.check_finite()?;
    let mut records = vec![record(ev, &params, 0.0, hook)?];
    let mut steps = StepLog::default();
    if stop(&records) {
        return Ok(Trajectory { records, params, steps, converged: true });
    }
    match cfg.scheme {
        Scheme::Rk4 { dt } => {
            let n_steps = (cfg.t_end / dt).round() as usize;
            let every = ((cfg.record_every / dt).round() as usize).max(1);
            for step in 1..=n_steps {
                params = rk4_step(ev, &params, dt)?;
                steps.accepted += 1;
                if step % every == 0 || step == n_steps {
                    records.push(record(ev, &params, step as f64 * dt, hook)?);
                    if stop(&records) {
                        return Ok(Trajectory { records, params, steps, converged: true });
                    }
                }
            }
        }
        Scheme::Rk2Adaptive { tol, dt_init, dt_min, dt_max } => {
            let mut t = 0.0;
            let mut h = dt_init;
            let mut k = 1usize;
            while t < cfg.t_end * (1.0 - 1e-12) {
                let next_record = (k as f64 * cfg.record_every).min(cfg.t_end);
                let target = next_record - t;
                let step = h.min(target);
                let full = heun_step(ev, &params, step, true)?;
                let half = heun_step(ev, &params, step / 2.0, false)?;
                let two = heun_step(ev, &half, step / 2.0, false)?;
                let err = rms_difference(&full, &two) / 3.0;
                let factor = if err > 0.0 { SAFETY * (tol / err).powf(1.0 / 3.0) } else { MAX_GROWTH };
                let factor = factor.clamp(MAX_SHRINK, MAX_GROWTH);
                if err <= tol {
                    params = two;
                    t += step;
                    steps.accepted += 1;
                    steps.accepted_errors.push(err);
                    if (t - next_record).abs() <= 1e-12 * next_record.max(1.0) {
                        t = next_record;
                        records.push(record(ev, &params, t, hook)?);
                        k += 1;
                        if stop(&records) {
                            return Ok(Trajectory { records, params, steps, converged: true });
                        }
                    }
                    // a step clipped to a record time says nothing about h
                    if step == h {
                        h = (h * factor).min(dt_max);
                    }
                } else {
                    steps.rejected += 1;
                    h = step * factor;
                    if h < dt_min {
                        return Err(NdmError::StepUnderflow { t, dt_min });
                    }
                }
            }
        }
    }
    Ok(Trajectory { records, params, steps, converged: false })
}

/// Time evolution from `params0` to `cfg.t_end`.
pub fn run_dynamics(
    ev: &mut Evolver,
    params0: &NdmParams,
    cfg: &IntegratorConfig,
    hook: &mut RecordHook<'_>,
) -> Result<Trajectory> {
    let mut traj = integrate(ev, params0, cfg, hook, |_| false)?;
    traj.converged = true;
    Ok(traj)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopCondition {
    pub delta_l_threshold: f64,
    pub t_max: f64,
}

/// Records averaged when testing the stop condition.
pub const SMOOTHING_WINDOW: usize = 10;

/// `δL` averaged over the last [`SMOOTHING_WINDOW`] records.
pub fn smoothed_delta_l(records: &[TrajectoryRecord]) -> f64 {
    let tail = &records[records.len().saturating_sub(SMOOTHING_WINDOW)..];
    tail.iter().map(|r| r.delta_l.mean).sum::<f64>() / tail.len() as f64
}

/// Integrate until the smoothed `δL` drops below the threshold or `t_max`.
/// Non-convergence is reported through [`Trajectory::converged`].
pub fn run_steady_state(
    ev: &mut Evolver,
    params0: &NdmParams,
    cfg: &IntegratorConfig,
    stop: StopCondition,
    hook: &mut RecordHook<'_>,
) -> Result<Trajectory> {
    if stop.delta_l_threshold.is_nan() || !(stop.t_max >= 0.0 && stop.t_max.is_finite()) {
        return Err(NdmError::InvalidConfig("need a threshold and a finite t_max >= 0".into()));
    }
    let cfg = IntegratorConfig { t_end: stop.t_max, ..*cfg };
    integrate(ev, params0, &cfg, hook, |recs| smoothed_delta_l(recs) < stop.delta_l_threshold)
}

/// A hook that does nothing.
pub fn no_hook() -> impl FnMut(&mut TrajectoryRecord, &NdmParams) -> Result<()> {
    |_, _| Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Boundary;
    use crate::ndm::test_support::random_params;
    use crate::ndm::{init_params, InitMode, Polarization};
    use proptest::prelude::*;

    fn sys_from(s: DMatrix<f64>, f: DVector<f64>) -> SrSystem {
        let dim = f.len();
        SrSystem { s, f, n_samples: 1, mean_o: vec![Default::default(); dim], mean_lres: Default::default() }
    }

    fn random_psd(dim: usize, rank: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(rank, dim, |_, _| rng.gen_range(-1.0..1.0));
        x.tr_mul(&x)
    }

    #[test]
    fn identity_without_shift() {
        let f = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let x = solve_update(&sys_from(DMatrix::identity(3, 3), f.clone()), Regularization::DiagonalShift(0.0)).unwrap();
        assert_eq!(x.0, f.as_slice());
    }

    #[test]
    fn pseudo_inverse_is_minimum_norm() {
        let s = random_psd(6, 3, 1);
        let f = &s * DVector::from_fn(6, |i, _| (i as f64).sin());
        let x = solve_update(&sys_from(s.clone(), f.clone()), Regularization::SvdCutoff(1e-10)).unwrap();
        // independent oracle: eigen-decomposition of the symmetric S
        let eig = s.clone().symmetric_eigen();
        let max = eig.eigenvalues.amax();
        let mut want = DVector::zeros(6);
        for (k, lam) in eig.eigenvalues.iter().enumerate() {
            if lam.abs() > 1e-10 * max {
                let v = eig.eigenvectors.column(k);
                want += v * (v.dot(&f) / lam);
            }
        }
        let got = DVector::from_vec(x.0);
        assert!((&got - &want).norm() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn singular_without_shift_fails() {
        let s = random_psd(4, 2, 3);
        let e = solve_update(&sys_from(s, DVector::zeros(4)), Regularization::DiagonalShift(0.0));
        assert!(matches!(e, Err(NdmError::Factorization { .. })));
        assert!(Regularization::SvdCutoff(1.0).validate().is_err());
        assert!(Regularization::DiagonalShift(-1.0).validate().is_err());
    }

    proptest! {
        #[test]
        fn shift_shrinks_update(seed in any::<u64>(), l1 in 1e-6f64..1.0, extra in 1e-6f64..10.0) {
            let s = random_psd(5, 3, seed);
            let f = DVector::from_fn(5, |i, _| ((i as u64 ^ seed) as f64).cos());
            let a = solve_update(&sys_from(s.clone(), f.clone()), Regularization::DiagonalShift(l1)).unwrap();
            let b = solve_update(&sys_from(s, f), Regularization::DiagonalShift(l1 + extra)).unwrap();
            prop_assert!(b.norm() <= a.norm() * (1.0 + 1e-12));
        }
    }

    fn decay_model() -> LindbladModel {
        LindbladModel::heisenberg(1, Boundary::Open, 0.0, 0.0, 0.0, 0.0).unwrap()
    }

    fn spin_up(sigma: f64) -> NdmParams {
        init_params(InitMode::Polarized { direction: Polarization::Up, strength: 1.5, sigma }, 2, 2, 1, 5).unwrap()
    }

    /// Spin-up biased but visibly mixed, so chains also visit the down rows.
    fn mixed_up() -> NdmParams {
        init_params(InitMode::Polarized { direction: Polarization::Up, strength: 0.5, sigma: 0.01 }, 2, 2, 1, 5).unwrap()
    }

    /// `⟨σ^z⟩(t)` of a decaying spin that starts at `m0`.
    fn decay_curve(m0: f64, t: f64) -> f64 {
        -1.0 + (1.0 + m0) * (-t).exp()
    }

    fn exhaustive_magnetization(params: &NdmParams) -> f64 {
        observable_weighted(&ObservableSpec::magnetization_z(1), params, &exhaustive_q(params).unwrap()).mean
    }

    const WEAK: Regularization = Regularization::DiagonalShift(1e-9);

    #[test]
    fn exhaustive_matches_dense_solution() {
        use crate::exact::{build_liouvillian, vectorize};
        use crate::ndm::{log_derivatives, to_dense_normalized};
        let model = LindbladModel::heisenberg(2, Boundary::Open, 1.0, 2.0, 0.0, 1.0).unwrap();
        let params = random_params(2, 2, 2, 0.5, 17);
        let reg = Regularization::DiagonalShift(1e-3);
        let mut ev = Evolver::new(model.clone(), Sampling::Exhaustive, SrVariant::TwoNorm, reg, vec![]).unwrap();
        let got = ev.time_derivative(&params).unwrap();

        let l = build_liouvillian(&model).unwrap();
        let v = DVector::from_vec(vectorize(&to_dense_normalized(&params).unwrap()));
        let lv = l.matrix().unwrap() * &v;
        let dim = params.layout().len();
        let mut x = DMatrix::<num_complex::Complex64>::zeros(16, dim);
        for cfg in DoubledConfig::enumerate(2) {
            let i = cfg.l.index() as usize * 4 + cfg.r.index() as usize;
            for (k, o) in log_derivatives(&params, &cfg).into_iter().enumerate() {
                x[(i, k)] = o * v[i];
            }
        }
        let s = (x.adjoint() * &x).map(|z| 2.0 * z.re);
        let f = (x.adjoint() * &lv).map(|z| 2.0 * z.re);
        let want = solve_shifted(&s, &f, 1e-3).unwrap();
        let diff = (DVector::from_vec(got.0.clone()) - &want).amax();
        assert!(diff < 1e-6, "max deviation {diff}");
    }

    #[test]
    fn solution_minimizes_residual_norm() {
        use crate::exact::{build_liouvillian, vectorize};
        use crate::ndm::{log_derivatives, to_dense_normalized};
        use rand::{Rng, SeedableRng};
        let model = LindbladModel::heisenberg(2, Boundary::Open, 1.0, 2.0, 0.5, 0.0).unwrap();
        let params = random_params(2, 1, 1, 0.5, 3);
        let mut ev = Evolver::new(model.clone(), Sampling::Exhaustive, SrVariant::TwoNorm, Regularization::SvdCutoff(1e-12), vec![]).unwrap();
        let xdot = ev.time_derivative(&params).unwrap();

        let l = build_liouvillian(&model).unwrap();
        let v = DVector::from_vec(vectorize(&to_dense_normalized(&params).unwrap()));
        let lv = l.matrix().unwrap() * &v;
        let configs: Vec<_> = DoubledConfig::enumerate(2).collect();
        let o: Vec<Vec<num_complex::Complex64>> = configs.iter().map(|c| log_derivatives(&params, c)).collect();
        let delta = |a: &[f64]| -> f64 {
            configs
                .iter()
                .enumerate()
                .map(|(n, c)| {
                    let i = c.l.index() as usize * 4 + c.r.index() as usize;
                    let s: num_complex::Complex64 = o[n].iter().zip(a).map(|(ok, ak)| ok * *ak).sum();
                    (s * v[i] - lv[i]).norm_sqr()
                })
                .sum()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let base = delta(&xdot.0);
        for _ in 0..10 {
            let d: Vec<f64> = (0..xdot.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h = 1e-3;
            let at = |s: f64| delta(&xdot.0.iter().zip(&d).map(|(a, b)| a + s * h * b).collect::<Vec<_>>());
            let second = at(1.0) - 2.0 * base + at(-1.0);
            assert!(second >= -1e-8, "{second}");
            assert!(at(1.0) >= base - 1e-9 && at(-1.0) >= base - 1e-9);
        }
    }

    #[test]
    fn zero_steps_give_initial_record() {
        let mut ev = Evolver::new(decay_model(), Sampling::Exhaustive, SrVariant::TwoNorm, Regularization::default(), vec![ObservableSpec::magnetization_z(1)]).unwrap();
        let cfg = IntegratorConfig { scheme: Scheme::Rk4 { dt: 0.01 }, t_end: 0.0, record_every: 0.1 };
        let traj = run_dynamics(&mut ev, &spin_up(0.0), &cfg, &mut no_hook()).unwrap();
        assert_eq!(traj.records.len(), 1);
        assert_eq!(traj.records[0].t, 0.0);
    }

    #[test]
    fn single_spin_decay_monte_carlo() {
        let chains = |seed| ChainConfig { thinning: 1, ..ChainConfig::for_sites(1, 1000, 8, seed) };
        let mut ev = Evolver::new(
            decay_model(),
            Sampling::MonteCarlo { p: chains(3), q: chains(4), reuse_stage_samples: false },
            SrVariant::TwoNorm,
            Regularization::DiagonalShift(1e-4),
            vec![ObservableSpec::magnetization_z(1)],
        )
        .unwrap();
        let cfg = IntegratorConfig { scheme: Scheme::Rk4 { dt: 0.01 }, t_end: 2.0, record_every: 0.25 };
        let start = mixed_up();
        let m0 = exhaustive_magnetization(&start);
        let traj = run_dynamics(&mut ev, &start, &cfg, &mut no_hook()).unwrap();
        let times: Vec<f64> = traj.records.iter().map(|r| r.t).collect();
        assert!(times.windows(2).all(|w| w[1] > w[0]));
        for r in &traj.records {
            let want = decay_curve(m0, r.t);
            assert!((r.observables[0].mean - want).abs() < 2e-2, "t={} got {:?} want {want}", r.t, r.observables[0]);
        }
    }

    #[test]
    fn vanishing_liouvillian_gives_no_motion() {
        let model = LindbladModel::new(2, Boundary::Open, 0.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        let params = random_params(2, 1, 1, 0.3, 2);
        let p = ChainConfig::for_sites(2, 500, 4, 1);
        let mut ev = Evolver::new(model, Sampling::MonteCarlo { p: p.clone(), q: p, reuse_stage_samples: false }, SrVariant::TwoNorm, Regularization::default(), vec![]).unwrap();
        assert_eq!(ev.time_derivative(&params).unwrap().norm(), 0.0);
    }

    #[test]
    fn adaptive_respects_tolerance() {
        let mut ev = Evolver::new(decay_model(), Sampling::Exhaustive, SrVariant::TwoNorm, WEAK, vec![ObservableSpec::magnetization_z(1)]).unwrap();
        let tol = 1e-5;
        let cfg = IntegratorConfig {
            scheme: Scheme::Rk2Adaptive { tol, dt_init: 0.1, dt_min: 1e-8, dt_max: 0.5 },
            t_end: 2.0,
            record_every: 0.5,
        };
        let traj = run_dynamics(&mut ev, &spin_up(0.01), &cfg, &mut no_hook()).unwrap();
        assert!(traj.steps.accepted_errors.iter().all(|e| *e <= tol));
        assert_eq!(traj.records.iter().map(|r| r.t).collect::<Vec<_>>(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        let m0 = traj.records[0].observables[0].mean;
        for r in &traj.records {
            assert!((r.observables[0].mean - decay_curve(m0, r.t)).abs() < 1e-3);
        }
        let cfg = IntegratorConfig { scheme: Scheme::Rk2Adaptive { tol: 1e-30, dt_init: 0.1, dt_min: 0.05, dt_max: 0.5 }, ..cfg };
        assert!(matches!(run_dynamics(&mut ev, &spin_up(0.01), &cfg, &mut no_hook()), Err(NdmError::StepUnderflow { .. })));
    }

    #[test]
    fn steady_state_single_spin() {
        let chains = |seed| ChainConfig { thinning: 1, ..ChainConfig::for_sites(1, 4000, 8, seed) };
        let sampling = Sampling::MonteCarlo { p: chains(11), q: chains(12), reuse_stage_samples: false };
        let mut ev = Evolver::new(decay_model(), sampling, SrVariant::TwoNorm, Regularization::DiagonalShift(1e-4), vec![ObservableSpec::magnetization_z(1)]).unwrap();
        let cfg = IntegratorConfig { scheme: Scheme::Rk4 { dt: 0.02 }, t_end: 0.0, record_every: 0.1 };
        // The leftover up population biases m by about 2δL while the error
        // bar shrinks only like its square root, hence the tight threshold.
        let stop = StopCondition { delta_l_threshold: 1e-4, t_max: 40.0 };
        let traj = run_steady_state(&mut ev, &mixed_up(), &cfg, stop, &mut no_hook()).unwrap();
        assert!(traj.converged);
        let last = traj.records.last().unwrap();
        assert!(smoothed_delta_l(&traj.records) < 1e-2);
        let m = last.observables[0];
        assert!((m.mean + 1.0).abs() <= 4.0 * m.stderr.max(1e-4), "{m:?}");

        let stop = StopCondition { delta_l_threshold: f64::INFINITY, t_max: 30.0 };
        let traj = run_steady_state(&mut ev, &mixed_up(), &cfg, stop, &mut no_hook()).unwrap();
        assert_eq!(traj.records.len(), 1);
    }

    #[test]
    fn hook_sees_every_record_and_determinism() {
        let run = || {
            let p = ChainConfig::for_sites(2, 200, 2, 9);
            let model = LindbladModel::heisenberg(2, Boundary::Open, 1.0, 1.0, 0.0, 0.0).unwrap();
            let mut ev = Evolver::new(model, Sampling::MonteCarlo { p: p.clone(), q: p, reuse_stage_samples: true }, SrVariant::FubiniStudy, Regularization::default(), vec![ObservableSpec::magnetization_z(2)]).unwrap();
            let cfg = IntegratorConfig { scheme: Scheme::Rk4 { dt: 0.01 }, t_end: 0.05, record_every: 0.02 };
            let mut seen = Vec::new();
            let mut hook = |r: &mut TrajectoryRecord, _: &NdmParams| {
                r.checkpoint = Some(format!("ck{}", seen.len()));
                seen.push(r.t);
                Ok(())
            };
            let traj = run_dynamics(&mut ev, &random_params(2, 1, 1, 0.2, 0), &cfg, &mut hook).unwrap();
            (seen, traj.records)
        };
        let (seen, a) = run();
        assert_eq!(seen.len(), a.len());
        assert_eq!(a.last().unwrap().checkpoint.as_deref(), Some("ck3"));
        assert!((a.last().unwrap().t - 0.05).abs() < 1e-12);
        assert_eq!(a, run().1);
    }
}
