//! Local estimators and the stochastic assembly of `S α̇ = f`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NdmError, Result};
use crate::model::{diagonal_energy, dissipator_terms, double_flip_amplitude, DoubledConfig, LindbladModel, SpinConfig};
use crate::ndm::{log_derivatives_into, log_rho, Flip, LookupCache, NdmParams};
use crate::sampler::SampleBatch;

/// Rows per block when accumulating `S`.
const BLOCK_ROWS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SrVariant {
    /// Minimize `‖Σ α̇_k O_k ρ − Lρ‖²`.
    #[default]
    TwoNorm,
    /// Minimize the Fubini-Study distance; `S` and `f` are centered.
    FubiniStudy,
}

/// `S α̇ = f`, both normalized by the sampled weight: `S = 2 Re⟨O*O⟩`,
/// `f = 2 Re⟨O* L^res⟩`.
#[derive(Clone, Debug)]
pub struct SrSystem {
    pub s: DMatrix<f64>,
    pub f: DVector<f64>,
    pub n_samples: usize,
    /// `⟨O_k⟩` over the batch.
    pub mean_o: Vec<Complex64>,
    /// `⟨L^res⟩` over the batch.
    pub mean_lres: Complex64,
}

impl SrSystem {
    pub fn dim(&self) -> usize {
        self.f.len()
    }

    /// Smallest eigenvalue of `S` divided by the largest (0 for `S = 0`).
    pub fn min_relative_eigenvalue(&self) -> f64 {
        let eig = SymmetricEigen::new(self.s.clone()).eigenvalues;
        let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if max <= 0.0 {
            if min == 0.0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        } else {
            min / max
        }
    }
}

/// Mean and standard error.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

/// `coeff · Π σ^axis_site`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PauliString {
    pub coeff: f64,
    pub ops: Vec<(usize, Axis)>,
}

/// Hermitian observable as a real combination of Pauli strings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableSpec {
    pub name: String,
    pub terms: Vec<PauliString>,
}

impl ObservableSpec {
    /// `(1/N) Σ_j σ^z_j`.
    pub fn magnetization_z(n_sites: usize) -> Self {
        ObservableSpec {
            name: "magnetization_z".into(),
            terms: (0..n_sites)
                .map(|j| PauliString { coeff: 1.0 / n_sites as f64, ops: vec![(j, Axis::Z)] })
                .collect(),
        }
    }

    /// `σ^z_j`.
    pub fn site_sz(site: usize) -> Self {
        ObservableSpec {
            name: format!("site_sz({site})"),
            terms: vec![PauliString { coeff: 1.0, ops: vec![(site, Axis::Z)] }],
        }
    }

    pub fn validate(&self, n_sites: usize) -> Result<()> {
        for t in &self.terms {
            if !t.coeff.is_finite() {
                return Err(NdmError::InvalidConfig(format!("observable {}: non-finite coefficient", self.name)));
            }
            let mut seen = vec![false; n_sites];
            for &(site, _) in &t.ops {
                if site >= n_sites {
                    return Err(NdmError::InvalidConfig(format!(
                        "observable {}: site {site} outside a {n_sites}-site chain",
                        self.name
                    )));
                }
                if std::mem::replace(&mut seen[site], true) {
                    return Err(NdmError::InvalidConfig(format!(
                        "observable {}: site {site} repeated in one Pauli string",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// True if the operator is diagonal in the σ^z basis.
    pub fn is_diagonal(&self) -> bool {
        self.terms.iter().all(|t| t.ops.iter().all(|o| o.1 == Axis::Z))
    }
}

/// `L^res(l, r) = Σ_{l',r'} L_{(l,r),(l',r')} ρ(l', r') / ρ(l, r)` with the
/// ratios taken from `cache`, which must sit at the configuration of interest.
pub fn local_liouvillian_cached(model: &LindbladModel, params: &NdmParams, cache: &LookupCache) -> Complex64 {
    let DoubledConfig { l, r } = *cache.config();
    let i = Complex64::i();
    let mut out = -i * (diagonal_energy(model, &l) - diagonal_energy(model, &r));
    for &(j, k) in model.bonds() {
        let al = double_flip_amplitude(model, l.get(j), l.get(k));
        if al != 0.0 {
            out -= i * al * cache.ratio(params, &[Flip::l(j), Flip::l(k)]);
        }
        let ar = double_flip_amplitude(model, r.get(j), r.get(k));
        if ar != 0.0 {
            out += i * ar * cache.ratio(params, &[Flip::r(j), Flip::r(k)]);
        }
    }
    for site in 0..model.n_sites() {
        let d = dissipator_terms(model, site, &l, &r);
        if let Some((_, amp)) = d.jump {
            out += amp * cache.ratio(params, &[Flip::both(site)]);
        }
        out += d.anticommutator_diag;
    }
    out
}

pub fn local_liouvillian(model: &LindbladModel, params: &NdmParams, cfg: &DoubledConfig) -> Result<Complex64> {
    model.check_config(&cfg.l)?;
    model.check_config(&cfg.r)?;
    let cache = LookupCache::new(params, *cfg);
    Ok(local_liouvillian_cached(model, params, &cache))
}

/// `X^loc(l) = Σ_m X_{l,m} ρ(m, l) / ρ(l, l)`.
pub fn local_observable(obs: &ObservableSpec, params: &NdmParams, l: &SpinConfig) -> Complex64 {
    let cache = LookupCache::new(params, DoubledConfig::diagonal(*l));
    local_observable_cached(obs, params, &cache)
}

fn local_observable_cached(obs: &ObservableSpec, params: &NdmParams, cache: &LookupCache) -> Complex64 {
    let l = cache.config().l;
    let mut out = Complex64::new(0.0, 0.0);
    let mut flips: Vec<Flip> = Vec::new();
    for t in &obs.terms {
        let mut elem = Complex64::new(t.coeff, 0.0);
        flips.clear();
        for &(site, axis) in &t.ops {
            let s = l.get_f64(site);
            match axis {
                Axis::Z => elem *= s,
                Axis::X => flips.push(Flip::l(site)),
                Axis::Y => {
                    // ⟨s|σ^y|-s⟩ = -i s
                    elem *= Complex64::new(0.0, -s);
                    flips.push(Flip::l(site));
                }
            }
        }
        out += elem * cache.ratio(params, &flips);
    }
    out
}

/// Normalized `|ρ(l, r)|²` over every doubled configuration.
pub fn exhaustive_p(params: &NdmParams) -> Result<Vec<(DoubledConfig, f64)>> {
    let logs: Vec<(DoubledConfig, f64)> = DoubledConfig::enumerate(params.n_sites())
        .map(|c| Ok((c, 2.0 * log_rho(params, &c)?.re)))
        .collect::<Result<_>>()?;
    Ok(normalize_log_weights(logs))
}

/// Normalized `ρ(l, l)` over every spin configuration.
pub fn exhaustive_q(params: &NdmParams) -> Result<Vec<(SpinConfig, f64)>> {
    let logs: Vec<(SpinConfig, f64)> = SpinConfig::enumerate(params.n_sites())
        .map(|s| Ok((s, log_rho(params, &DoubledConfig::diagonal(s))?.re)))
        .collect::<Result<_>>()?;
    Ok(normalize_log_weights(logs))
}

fn normalize_log_weights<C>(logs: Vec<(C, f64)>) -> Vec<(C, f64)> {
    let max = logs.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<(C, f64)> = logs.into_iter().map(|(c, x)| (c, (x - max).exp())).collect();
    let z: f64 = w.iter().map(|x| x.1).sum();
    w.into_iter().map(|(c, x)| (c, x / z)).collect()
}

/// Assemble `S` and `f` from a Monte Carlo batch over `p`.
pub fn build_sr(
    model: &LindbladModel,
    params: &NdmParams,
    batch: &SampleBatch<DoubledConfig>,
    variant: SrVariant,
) -> Result<SrSystem> {
    if batch.is_empty() {
        return Err(NdmError::EmptyBatch);
    }
    let mut sys = build_sr_weighted(model, params, &batch.weighted(), variant)?;
    sys.n_samples = batch.len();
    Ok(sys)
}

/// Assemble `S` and `f` from configurations with weights summing to one.
///
/// Duplicate configurations are legal; exact enumeration passes every
/// configuration once with its probability.
pub fn build_sr_weighted(
    model: &LindbladModel,
    params: &NdmParams,
    weighted: &[(DoubledConfig, f64)],
    variant: SrVariant,
) -> Result<SrSystem> {
    if weighted.is_empty() {
        return Err(NdmError::EmptyBatch);
    }
    let dim = params.layout().len();
    let total: f64 = weighted.iter().map(|x| x.1).sum();

    struct Partial {
        s: DMatrix<f64>,
        f: DVector<f64>,
        mean_o: Vec<Complex64>,
        mean_l: Complex64,
    }

    let partials: Vec<Partial> = weighted
        .par_chunks(BLOCK_ROWS)
        .map(|block| {
            let rows = block.len();
            let mut x = DMatrix::<f64>::zeros(2 * rows, dim);
            let mut y = DVector::<f64>::zeros(2 * rows);
            let mut mean_o = vec![Complex64::new(0.0, 0.0); dim];
            let mut mean_l = Complex64::new(0.0, 0.0);
            let mut o = vec![Complex64::new(0.0, 0.0); dim];
            for (i, (cfg, w)) in block.iter().enumerate() {
                let w = w / total;
                let sw = w.sqrt();
                log_derivatives_into(params, cfg, &mut o);
                let cache = LookupCache::new(params, *cfg);
                let lres = local_liouvillian_cached(model, params, &cache);
                for k in 0..dim {
                    x[(2 * i, k)] = sw * o[k].re;
                    x[(2 * i + 1, k)] = sw * o[k].im;
                    mean_o[k] += w * o[k];
                }
                y[2 * i] = sw * lres.re;
                y[2 * i + 1] = sw * lres.im;
                mean_l += w * lres;
            }
            Partial { s: x.tr_mul(&x), f: x.tr_mul(&y), mean_o, mean_l }
        })
        .collect();

    let mut s = DMatrix::<f64>::zeros(dim, dim);
    let mut f = DVector::<f64>::zeros(dim);
    let mut mean_o = vec![Complex64::new(0.0, 0.0); dim];
    let mut mean_lres = Complex64::new(0.0, 0.0);
    for p in partials {
        s += p.s;
        f += p.f;
        for (m, x) in mean_o.iter_mut().zip(&p.mean_o) {
            *m += x;
        }
        mean_lres += p.mean_l;
    }
    s *= 2.0;
    f *= 2.0;
    if variant == SrVariant::FubiniStudy {
        for k in 0..dim {
            for q in 0..dim {
                s[(k, q)] -= 2.0 * (mean_o[k].conj() * mean_o[q]).re;
            }
            f[k] -= 2.0 * (mean_o[k].conj() * mean_lres).re;
        }
    }
    let s = (&s + s.transpose()) * 0.5;
    Ok(SrSystem { s, f, n_samples: weighted.len(), mean_o, mean_lres })
}

/// Mean of `f(sample)` with a batch-means standard error over chains.
///
/// A single chain is split into ten contiguous blocks instead.
fn chain_estimate<C, F>(chains: &[Vec<C>], mut value: F) -> Estimate
where
    F: FnMut(&C) -> f64,
{
    let batches: Vec<(f64, usize)> = if chains.len() >= 2 {
        chains
            .iter()
            .map(|c| (c.iter().map(&mut value).sum::<f64>(), c.len()))
            .collect()
    } else {
        let c = &chains[0];
        let per = (c.len() / 10).max(1);
        c.chunks(per).map(|b| (b.iter().map(&mut value).sum::<f64>(), b.len())).collect()
    };
    let n: usize = batches.iter().map(|b| b.1).sum();
    let mean = batches.iter().map(|b| b.0).sum::<f64>() / n as f64;
    let k = batches.len();
    if k < 2 {
        return Estimate { mean, stderr: f64::NAN };
    }
    let means: Vec<f64> = batches.iter().map(|(s, len)| s / *len as f64).collect();
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    Estimate { mean, stderr: (var / k as f64).sqrt() }
}

/// Expectation value from a batch over `q`: real and imaginary parts of
/// `⟨X^loc⟩_q`. The imaginary part vanishes in expectation for Hermitian `X`.
pub fn estimate_observable_parts(
    obs: &ObservableSpec,
    params: &NdmParams,
    batch: &SampleBatch<SpinConfig>,
) -> Result<(Estimate, Estimate)> {
    if batch.is_empty() {
        return Err(NdmError::EmptyBatch);
    }
    let mut unique: Vec<SpinConfig> = batch.iter().copied().collect();
    unique.sort_unstable();
    unique.dedup();
    let values: Vec<Complex64> = unique.iter().map(|s| local_observable(obs, params, s)).collect();
    let lookup = |s: &SpinConfig| values[unique.binary_search(s).expect("sample present")];
    let re = chain_estimate(&batch.chains, |s| lookup(s).re);
    let im = chain_estimate(&batch.chains, |s| lookup(s).im);
    Ok((re, im))
}

/// `⟨X⟩ ≈ ⟨Re X^loc⟩_q` with a chain batch-means error bar.
pub fn estimate_observable(obs: &ObservableSpec, params: &NdmParams, batch: &SampleBatch<SpinConfig>) -> Result<Estimate> {
    Ok(estimate_observable_parts(obs, params, batch)?.0)
}

/// `⟨X⟩` from exact weights over `q`.
pub fn observable_weighted(obs: &ObservableSpec, params: &NdmParams, weighted: &[(SpinConfig, f64)]) -> Estimate {
    let mean = weighted.iter().map(|(s, w)| w * local_observable(obs, params, s).re).sum();
    Estimate { mean, stderr: 0.0 }
}

/// `δL = ⟨|L^res|⟩_p`.
pub fn estimate_delta_l(model: &LindbladModel, params: &NdmParams, batch: &SampleBatch<DoubledConfig>) -> Result<Estimate> {
    if batch.is_empty() {
        return Err(NdmError::EmptyBatch);
    }
    let mut unique: Vec<DoubledConfig> = batch.iter().copied().collect();
    unique.sort_unstable();
    unique.dedup();
    let values: Vec<f64> = unique
        .iter()
        .map(|c| local_liouvillian_cached(model, params, &LookupCache::new(params, *c)).norm())
        .collect();
    Ok(chain_estimate(&batch.chains, |c| values[unique.binary_search(c).expect("sample present")]))
}

/// `δL` from exact weights over `p`.
pub fn delta_l_weighted(model: &LindbladModel, params: &NdmParams, weighted: &[(DoubledConfig, f64)]) -> Estimate {
    let mean = weighted
        .iter()
        .map(|(c, w)| w * local_liouvillian_cached(model, params, &LookupCache::new(params, *c)).norm())
        .sum();
    Estimate { mean, stderr: 0.0 }
}
