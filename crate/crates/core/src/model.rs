//! Spin lattice, anisotropic Heisenberg Hamiltonian and σ⁻ decay.
//!
//! Spins are σ^z eigenvalues, `+1` (up) or `-1` (down). Sites are 0-based.
//! Configurations are bit-packed: site `j` of an `n`-site chain lives at bit
//! `n - 1 - j`, set when the spin is down. The packed word is therefore the
//! row/column index of the dense basis (site 0 most significant, `+1` before
//! `-1`), which is the ordering used by [`crate::exact`].

use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{NdmError, Result};

/// Largest chain that fits the packed representation.
pub const MAX_SITES: usize = 64;

/// A string of σ^z eigenvalues.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpinConfig {
    len: u8,
    bits: u64,
}

impl SpinConfig {
    /// All spins up.
    pub fn all_up(n: usize) -> Self {
        assert!(n <= MAX_SITES, "at most {MAX_SITES} sites");
        SpinConfig { len: n as u8, bits: 0 }
    }

    /// All spins down.
    pub fn all_down(n: usize) -> Self {
        let mut s = Self::all_up(n);
        s.bits = Self::mask(n);
        s
    }

    pub fn from_spins(spins: &[i8]) -> Result<Self> {
        if spins.len() > MAX_SITES {
            return Err(NdmError::InvalidConfig(format!(
                "{} sites exceeds the maximum of {MAX_SITES}",
                spins.len()
            )));
        }
        let mut s = Self::all_up(spins.len());
        for (j, &v) in spins.iter().enumerate() {
            match v {
                1 => {}
                -1 => s.flip(j),
                other => {
                    return Err(NdmError::InvalidConfig(format!(
                        "spin {other} at site {j} is not ±1"
                    )))
                }
            }
        }
        Ok(s)
    }

    /// Configuration whose dense basis index is `index`.
    pub fn from_index(n: usize, index: u64) -> Self {
        assert!(n <= MAX_SITES);
        debug_assert!(index <= Self::mask(n));
        SpinConfig { len: n as u8, bits: index }
    }

    fn mask(n: usize) -> u64 {
        if n == 64 {
            u64::MAX
        } else {
            (1u64 << n) - 1
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len as usize
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    fn bit(&self, site: usize) -> u64 {
        1u64 << (self.len as usize - 1 - site)
    }

    /// σ^z eigenvalue at `site`.
    #[inline]
    pub fn get(&self, site: usize) -> i8 {
        debug_assert!(site < self.len());
        if self.bits & self.bit(site) == 0 {
            1
        } else {
            -1
        }
    }

    #[inline]
    pub fn get_f64(&self, site: usize) -> f64 {
        self.get(site) as f64
    }

    #[inline]
    pub fn flip(&mut self, site: usize) {
        self.bits ^= self.bit(site);
    }

    #[inline]
    pub fn flipped(mut self, site: usize) -> Self {
        self.flip(site);
        self
    }

    /// Dense basis index.
    #[inline]
    pub fn index(&self) -> u64 {
        self.bits
    }

    pub fn spins(&self) -> Vec<i8> {
        (0..self.len()).map(|j| self.get(j)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = i8> + '_ {
        (0..self.len()).map(|j| self.get(j))
    }

    /// Every configuration of `n` spins in dense basis order.
    pub fn enumerate(n: usize) -> impl Iterator<Item = SpinConfig> {
        assert!(n < 32, "enumeration over 2^{n} configurations");
        (0..1u64 << n).map(move |i| SpinConfig::from_index(n, i))
    }

    /// Σ_j s_j.
    pub fn magnetization(&self) -> i32 {
        self.len() as i32 - 2 * self.bits.count_ones() as i32
    }
}

impl fmt::Debug for SpinConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for s in self.iter() {
            f.write_str(if s > 0 { "+" } else { "-" })?;
        }
        f.write_str("]")
    }
}

/// Row (`l`) and column (`r`) index of a density-matrix element.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct DoubledConfig {
    pub l: SpinConfig,
    pub r: SpinConfig,
}

impl DoubledConfig {
    pub fn new(l: SpinConfig, r: SpinConfig) -> Self {
        assert_eq!(l.len(), r.len(), "row and column strings differ in length");
        DoubledConfig { l, r }
    }

    pub fn diagonal(s: SpinConfig) -> Self {
        DoubledConfig { l: s, r: s }
    }

    pub fn len(&self) -> usize {
        self.l.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l.is_empty()
    }

    /// All 4^n doubled configurations, `l` major.
    pub fn enumerate(n: usize) -> impl Iterator<Item = DoubledConfig> {
        SpinConfig::enumerate(n)
            .flat_map(move |l| SpinConfig::enumerate(n).map(move |r| DoubledConfig { l, r }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Open,
    Periodic,
}

/// Anisotropic Heisenberg chain with uniform σ⁻ decay on every site.
///
/// `H = B Σ_j σ^z_j + Σ_<j,k> Σ_a J_a σ^a_j σ^a_k`, jump operators `σ⁻_j`
/// at rate `gamma`. Energies are in units of `gamma`.
#[derive(Clone, Debug, PartialEq)]
pub struct LindbladModel {
    n_sites: usize,
    boundary: Boundary,
    pub field: f64,
    pub jx: f64,
    pub jy: f64,
    pub jz: f64,
    pub gamma: f64,
    bonds: Vec<(usize, usize)>,
}

impl LindbladModel {
    pub fn new(
        n_sites: usize,
        boundary: Boundary,
        field: f64,
        jx: f64,
        jy: f64,
        jz: f64,
        gamma: f64,
    ) -> Result<Self> {
        if n_sites == 0 {
            return Err(NdmError::InvalidModel("n_sites must be at least 1".into()));
        }
        if n_sites > MAX_SITES {
            return Err(NdmError::InvalidModel(format!(
                "n_sites = {n_sites} exceeds the maximum of {MAX_SITES}"
            )));
        }
        if boundary == Boundary::Periodic && n_sites < 3 {
            return Err(NdmError::InvalidModel(format!(
                "periodic boundary needs at least 3 sites, got {n_sites}"
            )));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(NdmError::InvalidModel(format!(
                "gamma must be a non-negative finite rate, got {gamma}"
            )));
        }
        for (name, v) in [("B", field), ("Jx", jx), ("Jy", jy), ("Jz", jz)] {
            if !v.is_finite() {
                return Err(NdmError::InvalidModel(format!("{name} is not finite")));
            }
        }
        let mut bonds: Vec<(usize, usize)> = (0..n_sites.saturating_sub(1)).map(|j| (j, j + 1)).collect();
        if boundary == Boundary::Periodic {
            bonds.push((n_sites - 1, 0));
        }
        Ok(LindbladModel {
            n_sites,
            boundary,
            field,
            jx,
            jy,
            jz,
            gamma,
            bonds,
        })
    }

    /// Chain with `gamma = 1`.
    pub fn heisenberg(n_sites: usize, boundary: Boundary, field: f64, jx: f64, jy: f64, jz: f64) -> Result<Self> {
        Self::new(n_sites, boundary, field, jx, jy, jz, 1.0)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    /// Nearest-neighbour pairs. Open chains give `(j, j+1)`; periodic chains
    /// add the wrap-around bond `(n-1, 0)`.
    pub fn bonds(&self) -> &[(usize, usize)] {
        &self.bonds
    }

    pub fn check_config(&self, s: &SpinConfig) -> Result<()> {
        if s.len() != self.n_sites {
            return Err(NdmError::InvalidConfig(format!(
                "configuration has {} sites, model has {}",
                s.len(),
                self.n_sites
            )));
        }
        Ok(())
    }
}

/// A nonzero matrix element `⟨m|O|n⟩` in a sparse row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatorTerm {
    pub config: SpinConfig,
    pub amplitude: Complex64,
}

/// Nonzero elements `H_{m,n}` of row `m` of the Hamiltonian.
///
/// The diagonal element comes first (when nonzero), followed by one
/// double-flip term per bond carrying `Jx` and `Jy` contributions. The `Jy`
/// sign is `-1` for aligned and `+1` for anti-aligned neighbours.
pub fn hamiltonian_row(model: &LindbladModel, m: &SpinConfig) -> Vec<OperatorTerm> {
    debug_assert_eq!(m.len(), model.n_sites);
    let mut out = Vec::with_capacity(model.bonds.len() + 1);
    let diag = diagonal_energy(model, m);
    if diag != 0.0 {
        out.push(OperatorTerm {
            config: *m,
            amplitude: Complex64::new(diag, 0.0),
        });
    }
    for &(j, k) in &model.bonds {
        let amp = double_flip_amplitude(model, m.get(j), m.get(k));
        if amp != 0.0 {
            out.push(OperatorTerm {
                config: m.flipped(j).flipped(k),
                amplitude: Complex64::new(amp, 0.0),
            });
        }
    }
    out
}

/// `B Σ m_j + Jz Σ_bonds m_j m_k`.
pub fn diagonal_energy(model: &LindbladModel, m: &SpinConfig) -> f64 {
    let field: f64 = model.field * m.magnetization() as f64;
    let zz: f64 = model
        .bonds
        .iter()
        .map(|&(j, k)| (m.get(j) * m.get(k)) as f64)
        .sum::<f64>();
    field + model.jz * zz
}

/// `Jx ⟨m'|σ^xσ^x|m⟩ + Jy ⟨m'|σ^yσ^y|m⟩` for the pair flip of spins `(sj, sk)`.
#[inline]
pub fn double_flip_amplitude(model: &LindbladModel, sj: i8, sk: i8) -> f64 {
    let y_sign = if sj == sk { -1.0 } else { 1.0 };
    model.jx + y_sign * model.jy
}

/// Jump and anticommutator parts of the decay on `site` for element `(l, r)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DissipatorTerms {
    /// Target element `(l', r')` of the jump `σ⁻ ρ σ⁺` and its amplitude.
    pub jump: Option<(DoubledConfig, f64)>,
    /// `-(γ/2)(δ_{l_j,1} + δ_{r_j,1})`.
    pub anticommutator_diag: f64,
}

pub fn dissipator_terms(model: &LindbladModel, site: usize, l: &SpinConfig, r: &SpinConfig) -> DissipatorTerms {
    debug_assert!(site < model.n_sites);
    let (lj, rj) = (l.get(site), r.get(site));
    let jump = (lj == -1 && rj == -1)
        .then(|| (DoubledConfig::new(l.flipped(site), r.flipped(site)), model.gamma));
    let ups = (lj == 1) as u8 + (rj == 1) as u8;
    DissipatorTerms {
        jump,
        anticommutator_diag: -0.5 * model.gamma * ups as f64,
    }
}

pub fn bonds(model: &LindbladModel) -> Vec<(usize, usize)> {
    model.bonds.clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(s: &[i8]) -> SpinConfig {
        SpinConfig::from_spins(s).unwrap()
    }

    #[test]
    fn packing_matches_dense_order() {
        let s = cfg(&[1, -1, -1]);
        assert_eq!(s.index(), 0b011);
        assert_eq!(s.spins(), vec![1, -1, -1]);
        assert_eq!(SpinConfig::from_index(3, 0b011), s);
        assert_eq!(s.magnetization(), -1);
        assert!(SpinConfig::from_spins(&[1, 0]).is_err());
    }

    #[test]
    fn single_site_field() {
        let m = LindbladModel::heisenberg(1, Boundary::Open, 10.0, 0.0, 0.0, 0.0).unwrap();
        let row = hamiltonian_row(&m, &cfg(&[1]));
        assert_eq!(row.len(), 1);
        assert_eq!(row[0].config, cfg(&[1]));
        assert_eq!(row[0].amplitude, Complex64::new(10.0, 0.0));
    }

    #[test]
    fn xx_flips_both_spins() {
        let m = LindbladModel::heisenberg(2, Boundary::Open, 0.0, 20.0, 0.0, 0.0).unwrap();
        let row = hamiltonian_row(&m, &cfg(&[1, 1]));
        assert_eq!(row, vec![OperatorTerm { config: cfg(&[-1, -1]), amplitude: Complex64::new(20.0, 0.0) }]);
    }

    #[test]
    fn yy_sign_rule() {
        let m = LindbladModel::heisenberg(2, Boundary::Open, 0.0, 0.0, 1.0, 0.0).unwrap();
        let row = hamiltonian_row(&m, &cfg(&[1, 1]));
        assert_eq!(row, vec![OperatorTerm { config: cfg(&[-1, -1]), amplitude: Complex64::new(-1.0, 0.0) }]);
        let row = hamiltonian_row(&m, &cfg(&[1, -1]));
        assert_eq!(row, vec![OperatorTerm { config: cfg(&[-1, 1]), amplitude: Complex64::new(1.0, 0.0) }]);
    }

    #[test]
    fn dissipator_cases() {
        let m = LindbladModel::heisenberg(1, Boundary::Open, 0.0, 0.0, 0.0, 0.0).unwrap();
        let (up, down) = (cfg(&[1]), cfg(&[-1]));
        let t = dissipator_terms(&m, 0, &down, &down);
        assert_eq!(t.jump, Some((DoubledConfig::new(up, up), 1.0)));
        assert_eq!(t.anticommutator_diag, 0.0);
        let t = dissipator_terms(&m, 0, &up, &up);
        assert_eq!(t.jump, None);
        assert_eq!(t.anticommutator_diag, -1.0);
        let t = dissipator_terms(&m, 0, &up, &down);
        assert_eq!(t.jump, None);
        assert_eq!(t.anticommutator_diag, -0.5);
    }

    #[test]
    fn bond_counts() {
        let p5 = LindbladModel::heisenberg(5, Boundary::Periodic, 0.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(bonds(&p5).len(), 5);
        assert_eq!(bonds(&p5).last(), Some(&(4, 0)));
        let o16 = LindbladModel::heisenberg(16, Boundary::Open, 0.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(bonds(&o16).len(), 15);
        let one = LindbladModel::heisenberg(1, Boundary::Open, 0.0, 0.0, 0.0, 0.0).unwrap();
        assert!(bonds(&one).is_empty());
    }

    #[test]
    fn rejects_bad_models() {
        assert!(LindbladModel::heisenberg(0, Boundary::Open, 0.0, 0.0, 0.0, 0.0).is_err());
        assert!(LindbladModel::heisenberg(2, Boundary::Periodic, 0.0, 0.0, 0.0, 0.0).is_err());
        assert!(LindbladModel::new(3, Boundary::Open, 0.0, 0.0, 0.0, 0.0, -1.0).is_err());
        assert!(LindbladModel::new(3, Boundary::Open, f64::NAN, 0.0, 0.0, 0.0, 1.0).is_err());
    }
}
