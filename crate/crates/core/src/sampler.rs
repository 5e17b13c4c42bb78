//! Metropolis chains over `p(l, r) = |ρ(l, r)|²` and `q(l) = ρ(l, l)`.
//!
//! Proposals for `p`: flip one row or column spin, flip `l_j` and `r_j`
//! together, flip a neighbouring pair on one side (all equally likely), or
//! redraw the whole configuration uniformly with relative weight
//! `uniform_restart_weight`. For `q` the moves are single flips, neighbouring
//! pair flips and uniform redraws. Every proposal is symmetric, so the
//! acceptance probability is the bare target ratio.

use std::collections::HashMap;

use rustc_hash::FxHashMap;
use std::hash::Hash;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NdmError, Result};
use crate::model::{DoubledConfig, LindbladModel, SpinConfig};
use crate::ndm::{log_rho, Flip, LookupCache, NdmParams, Side};

/// Default relative weight of the uniform-redraw move.
pub const DEFAULT_RESTART_WEIGHT: f64 = 0.01;

/// Largest doubled configuration space held as a lookup table.
const MAX_TABLE_ENTRIES: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    /// Kept samples per chain.
    pub n_samples: usize,
    pub n_chains: usize,
    /// Burn-in length in sweeps of `N` proposals.
    pub burn_in: usize,
    /// Proposals between kept samples.
    pub thinning: usize,
    pub seed: u64,
    pub uniform_restart_weight: f64,
}

impl ChainConfig {
    /// Defaults for an `n_sites` chain: `10 N` sweeps of burn-in, thinning `N`.
    pub fn for_sites(n_sites: usize, n_samples: usize, n_chains: usize, seed: u64) -> Self {
        ChainConfig {
            n_samples,
            n_chains,
            burn_in: 10 * n_sites,
            thinning: n_sites.max(1),
            seed,
            uniform_restart_weight: DEFAULT_RESTART_WEIGHT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_chains == 0 {
            return Err(NdmError::InvalidConfig("n_samples and n_chains must be at least 1".into()));
        }
        if self.thinning == 0 {
            return Err(NdmError::InvalidConfig("thinning must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.uniform_restart_weight) {
            return Err(NdmError::InvalidConfig(format!(
                "uniform_restart_weight must lie in [0, 1], got {}",
                self.uniform_restart_weight
            )));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.n_samples * self.n_chains
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MoveKind {
    /// One row or column spin (`p`), or one spin (`q`).
    Single,
    /// `l_j` and `r_j` together (`p` only).
    Paired,
    /// Two neighbouring spins on one side.
    Neighbor,
    /// Fresh uniform configuration.
    Redraw,
}


fn kind_slot(kind: MoveKind) -> usize {
    match kind {
        MoveKind::Single => 0,
        MoveKind::Paired => 1,
        MoveKind::Neighbor => 2,
        MoveKind::Redraw => 3,
    }
}

/// Proposed and accepted counts per move type.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AcceptanceStats {
    pub proposed: [u64; 4],
    pub accepted: [u64; 4],
}

impl AcceptanceStats {
    fn record(&mut self, kind: MoveKind, accepted: bool) {
        let i = kind_slot(kind);
        self.proposed[i] += 1;
        self.accepted[i] += accepted as u64;
    }

    pub fn merge(&mut self, other: &AcceptanceStats) {
        for i in 0..4 {
            self.proposed[i] += other.proposed[i];
            self.accepted[i] += other.accepted[i];
        }
    }

    /// Acceptance rate of one move type, `None` if never proposed.
    pub fn rate(&self, kind: MoveKind) -> Option<f64> {
        let i = kind_slot(kind);
        (self.proposed[i] > 0).then(|| self.accepted[i] as f64 / self.proposed[i] as f64)
    }

    pub fn overall(&self) -> f64 {
        let p: u64 = self.proposed.iter().sum();
        let a: u64 = self.accepted.iter().sum();
        if p == 0 {
            0.0
        } else {
            a as f64 / p as f64
        }
    }
}

/// Samples from independent chains, kept in chain order.
#[derive(Clone, Debug)]
pub struct SampleBatch<C> {
    pub chains: Vec<Vec<C>>,
    pub acceptance: AcceptanceStats,
}

impl<C: Copy + Eq + Hash + Ord> SampleBatch<C> {
    pub fn len(&self) -> usize {
        self.chains.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &C> {
        self.chains.iter().flatten()
    }

    /// Distinct configurations with their empirical frequencies, sorted.
    pub fn weighted(&self) -> Vec<(C, f64)> {
        histogram(self.chains.iter().flatten().copied(), self.len())
    }

    /// Per-chain histograms.
    pub fn weighted_by_chain(&self) -> Vec<Vec<(C, f64)>> {
        self.chains
            .iter()
            .map(|c| histogram(c.iter().copied(), c.len()))
            .collect()
    }
}

fn histogram<C: Copy + Eq + Hash + Ord>(it: impl Iterator<Item = C>, total: usize) -> Vec<(C, f64)> {
    let mut counts: FxHashMap<C, u64> = FxHashMap::default();
    for c in it {
        *counts.entry(c).or_insert(0) += 1;
    }
    let mut out: Vec<(C, f64)> = counts
        .into_iter()
        .map(|(c, k)| (c, k as f64 / total as f64))
        .collect();
    out.sort_unstable_by_key(|a| a.0);
    out
}

/// Which distribution a chain targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// `|ρ(l, r)|²` over doubled configurations.
    Rows,
    /// `ρ(l, l)` over diagonal configurations.
    Diagonal,
}

/// Enumerated log target weight over a small configuration space.
struct LogTable {
    n: usize,
    target: Target,
    values: Vec<f64>,
}

impl LogTable {
    fn build(params: &NdmParams, target: Target) -> Result<Self> {
        let n = params.n_sites();
        let values = match target {
            Target::Rows => DoubledConfig::enumerate(n)
                .map(|c| Ok(2.0 * log_rho(params, &c)?.re))
                .collect::<Result<Vec<_>>>()?,
            Target::Diagonal => SpinConfig::enumerate(n)
                .map(|s| Ok(diagonal_log_weight(log_rho(params, &DoubledConfig::diagonal(s))?)))
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(LogTable { n, target, values })
    }

    #[inline]
    fn index(&self, cfg: &DoubledConfig) -> usize {
        match self.target {
            Target::Rows => ((cfg.l.index() as usize) << self.n) | cfg.r.index() as usize,
            Target::Diagonal => cfg.l.index() as usize,
        }
    }

    /// Index mask toggled by a flip.
    fn mask(&self, flip: &Flip) -> usize {
        let zero = DoubledConfig::new(SpinConfig::from_index(self.n, 0), SpinConfig::from_index(self.n, 0));
        let mut y = zero;
        flip.apply(&mut y);
        if self.target == Target::Diagonal {
            y.r = y.l;
        }
        self.index(&y)
    }
}

/// How a chain evaluates amplitude ratios.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    /// Incremental hidden-unit angles.
    Cached,
    /// Enumerated `ln ρ` table, for small systems.
    Tabulated,
}

impl Backend {
    /// Tabulate when the space is small compared with the work of the chains.
    pub fn auto(n_sites: usize, target: Target, cfg: &ChainConfig) -> Backend {
        let bits = match target {
            Target::Rows => 2 * n_sites,
            Target::Diagonal => n_sites,
        };
        let proposals = cfg.n_chains * (cfg.n_samples * cfg.thinning + cfg.burn_in * n_sites);
        if bits < 63 && (1usize << bits) <= MAX_TABLE_ENTRIES && (1usize << bits) <= proposals {
            Backend::Tabulated
        } else {
            Backend::Cached
        }
    }
}

/// Log target-weight ratios (`ln p'/p` or `ln q'/q`) for one chain.
trait Walker {
    fn config(&self) -> DoubledConfig;
    fn log_ratio(&mut self, flips: &[Flip]) -> f64;
    fn accept(&mut self, flips: &[Flip]);
    fn log_ratio_to(&self, target: &DoubledConfig) -> f64;
    fn jump(&mut self, target: DoubledConfig);
}

/// `ln q` from `ln ρ(l, l)`, which must be real up to a multiple of 2πi.
#[inline]
fn diagonal_log_weight(log: Complex64) -> f64 {
    let tau = std::f64::consts::TAU;
    let phase = log.im - tau * (log.im / tau).round();
    assert!(phase.abs() < 1e-10, "diagonal ratio has phase {phase}");
    log.re
}

#[inline]
fn target_log_weight(target: Target, log_ratio: Complex64) -> f64 {
    match target {
        Target::Rows => 2.0 * log_ratio.re,
        Target::Diagonal => diagonal_log_weight(log_ratio),
    }
}

struct CachedWalker<'a> {
    params: &'a NdmParams,
    cache: LookupCache,
    target: Target,
}

impl Walker for CachedWalker<'_> {
    fn config(&self) -> DoubledConfig {
        *self.cache.config()
    }
    fn log_ratio(&mut self, flips: &[Flip]) -> f64 {
        target_log_weight(self.target, self.cache.log_ratio(self.params, flips))
    }
    fn accept(&mut self, flips: &[Flip]) {
        self.cache.apply_flips(self.params, flips)
    }
    fn log_ratio_to(&self, target: &DoubledConfig) -> f64 {
        let d = crate::ndm::log_rho_unchecked(self.params, target) - self.cache.log_rho(self.params);
        target_log_weight(self.target, d)
    }
    fn jump(&mut self, target: DoubledConfig) {
        self.cache.reset(self.params, target)
    }
}

/// Walks dense table indices; side masks are precomputed per site.
struct TableWalker<'a> {
    table: &'a LogTable,
    index: usize,
    current: f64,
    pending: usize,
    masks: [Vec<usize>; 3],
}

impl<'a> TableWalker<'a> {
    fn new(table: &'a LogTable, cfg: DoubledConfig) -> Self {
        let masks = [Side::L, Side::R, Side::Both].map(|side| {
            (0..table.n).map(|site| table.mask(&Flip { side, site })).collect()
        });
        let index = table.index(&cfg);
        TableWalker { table, index, current: table.values[index], pending: index, masks }
    }

    #[inline]
    fn mask(&self, flips: &[Flip]) -> usize {
        flips.iter().fold(0, |m, f| {
            let side = match f.side {
                Side::L => 0,
                Side::R => 1,
                Side::Both => 2,
            };
            m ^ self.masks[side][f.site]
        })
    }

    fn config_at(&self, i: usize) -> DoubledConfig {
        let n = self.table.n;
        match self.table.target {
            Target::Rows => DoubledConfig::new(
                SpinConfig::from_index(n, (i >> n) as u64),
                SpinConfig::from_index(n, (i & ((1 << n) - 1)) as u64),
            ),
            Target::Diagonal => DoubledConfig::diagonal(SpinConfig::from_index(n, i as u64)),
        }
    }
}

impl Walker for TableWalker<'_> {
    fn config(&self) -> DoubledConfig {
        self.config_at(self.index)
    }
    #[inline]
    fn log_ratio(&mut self, flips: &[Flip]) -> f64 {
        self.pending = self.index ^ self.mask(flips);
        self.table.values[self.pending] - self.current
    }
    #[inline]
    fn accept(&mut self, _flips: &[Flip]) {
        self.index = self.pending;
        self.current = self.table.values[self.index];
    }
    fn log_ratio_to(&self, target: &DoubledConfig) -> f64 {
        self.table.values[self.table.index(target)] - self.current
    }
    fn jump(&mut self, target: DoubledConfig) {
        self.index = self.table.index(&target);
        self.current = self.table.values[self.index];
    }
}

enum Proposal {
    Flips(MoveKind, [Flip; 2], usize),
    Redraw(DoubledConfig),
}

/// Move set of one chain type on one lattice.
#[derive(Clone, Debug)]
pub struct MoveSet {
    n: usize,
    target: Target,
    bonds: Vec<(usize, usize)>,
    kinds: Vec<(MoveKind, f64)>,
    total: f64,
}

impl MoveSet {
    pub fn new(model: &LindbladModel, target: Target, restart_weight: f64) -> Self {
        Self::from_bonds(model.n_sites(), model.bonds().to_vec(), target, restart_weight)
    }

    pub fn from_bonds(n: usize, bonds: Vec<(usize, usize)>, target: Target, restart_weight: f64) -> Self {
        let mut kinds = vec![(MoveKind::Single, 1.0)];
        if target == Target::Rows {
            kinds.push((MoveKind::Paired, 1.0));
        }
        if !bonds.is_empty() {
            kinds.push((MoveKind::Neighbor, 1.0));
        }
        if restart_weight > 0.0 {
            kinds.push((MoveKind::Redraw, restart_weight));
        }
        let total = kinds.iter().map(|k| k.1).sum();
        MoveSet { n, target, bonds, kinds, total }
    }

    fn random_config(&self, rng: &mut ChaCha8Rng) -> DoubledConfig {
        let mask = if self.n == 64 { u64::MAX } else { (1u64 << self.n) - 1 };
        let l = SpinConfig::from_index(self.n, rng.gen::<u64>() & mask);
        match self.target {
            Target::Rows => DoubledConfig::new(l, SpinConfig::from_index(self.n, rng.gen::<u64>() & mask)),
            Target::Diagonal => DoubledConfig::diagonal(l),
        }
    }

    fn one_side(&self, rng: &mut ChaCha8Rng) -> Side {
        match self.target {
            Target::Diagonal => Side::Both,
            Target::Rows => {
                if rng.gen::<bool>() {
                    Side::L
                } else {
                    Side::R
                }
            }
        }
    }

    fn propose(&self, rng: &mut ChaCha8Rng) -> Proposal {
        let mut x = rng.gen::<f64>() * self.total;
        let mut kind = self.kinds[self.kinds.len() - 1].0;
        for &(k, w) in &self.kinds {
            if x < w {
                kind = k;
                break;
            }
            x -= w;
        }
        let none = Flip::l(0);
        match kind {
            MoveKind::Single => {
                let side = self.one_side(rng);
                let site = rng.gen_range(0..self.n);
                Proposal::Flips(kind, [Flip { side, site }, none], 1)
            }
            MoveKind::Paired => Proposal::Flips(kind, [Flip::both(rng.gen_range(0..self.n)), none], 1),
            MoveKind::Neighbor => {
                let side = self.one_side(rng);
                let (j, k) = self.bonds[rng.gen_range(0..self.bonds.len())];
                Proposal::Flips(kind, [Flip { side, site: j }, Flip { side, site: k }], 2)
            }
            MoveKind::Redraw => Proposal::Redraw(self.random_config(rng)),
        }
    }

    /// Exact one-step proposal distribution from `cfg`, merged over move types.
    pub fn kernel(&self, cfg: &DoubledConfig) -> Vec<(DoubledConfig, f64)> {
        let mut out: HashMap<DoubledConfig, f64> = HashMap::new();
        let sides: &[Side] = match self.target {
            Target::Rows => &[Side::L, Side::R],
            Target::Diagonal => &[Side::Both],
        };
        for &(kind, w) in &self.kinds {
            let pk = w / self.total;
            match kind {
                MoveKind::Single => {
                    for &side in sides {
                        for site in 0..self.n {
                            let mut y = *cfg;
                            Flip { side, site }.apply(&mut y);
                            *out.entry(y).or_default() += pk / (sides.len() * self.n) as f64;
                        }
                    }
                }
                MoveKind::Paired => {
                    for site in 0..self.n {
                        let mut y = *cfg;
                        Flip::both(site).apply(&mut y);
                        *out.entry(y).or_default() += pk / self.n as f64;
                    }
                }
                MoveKind::Neighbor => {
                    for &side in sides {
                        for &(j, k) in &self.bonds {
                            let mut y = *cfg;
                            Flip { side, site: j }.apply(&mut y);
                            Flip { side, site: k }.apply(&mut y);
                            *out.entry(y).or_default() += pk / (sides.len() * self.bonds.len()) as f64;
                        }
                    }
                }
                MoveKind::Redraw => {
                    let all: Vec<DoubledConfig> = match self.target {
                        Target::Rows => DoubledConfig::enumerate(self.n).collect(),
                        Target::Diagonal => SpinConfig::enumerate(self.n).map(DoubledConfig::diagonal).collect(),
                    };
                    let each = pk / all.len() as f64;
                    for y in all {
                        *out.entry(y).or_default() += each;
                    }
                }
            }
        }
        let mut v: Vec<_> = out.into_iter().collect();
        v.sort_by_key(|a| a.0);
        v
    }
}

/// Metropolis acceptance from a log target ratio.
#[inline]
fn accepts(log_ratio: f64, rng: &mut ChaCha8Rng) -> bool {
    log_ratio >= 0.0 || rng.gen::<f64>() < log_ratio.exp()
}

struct ChainState {
    cfg: DoubledConfig,
    rng: ChaCha8Rng,
}

fn run_chain<W: Walker>(
    walker: &mut W,
    moves: &MoveSet,
    rng: &mut ChaCha8Rng,
    burn_steps: usize,
    n_samples: usize,
    thinning: usize,
) -> (Vec<DoubledConfig>, AcceptanceStats) {
    let mut stats = AcceptanceStats::default();
    let step = |walker: &mut W, rng: &mut ChaCha8Rng, stats: &mut AcceptanceStats| match moves.propose(rng) {
        Proposal::Flips(kind, flips, k) => {
            let flips = &flips[..k];
            let ok = accepts(walker.log_ratio(flips), rng);
            if ok {
                walker.accept(flips);
            }
            stats.record(kind, ok);
        }
        Proposal::Redraw(y) => {
            let ok = accepts(walker.log_ratio_to(&y), rng);
            if ok {
                walker.jump(y);
            }
            stats.record(MoveKind::Redraw, ok);
        }
    };
    for _ in 0..burn_steps {
        step(walker, rng, &mut stats);
    }
    stats = AcceptanceStats::default();
    let mut out = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        for _ in 0..thinning {
            step(walker, rng, &mut stats);
        }
        out.push(walker.config());
    }
    (out, stats)
}

/// A set of persistent Markov chains that can be resumed after the
/// parameters change.
pub struct MarkovChains {
    target: Target,
    moves: MoveSet,
    cfg: ChainConfig,
    backend: Option<Backend>,
    states: Vec<ChainState>,
}

impl MarkovChains {
    /// Chains with uniformly random starting points. Chain `i` draws from
    /// stream `i` of a ChaCha generator keyed by `cfg.seed`.
    pub fn new(model: &LindbladModel, target: Target, cfg: ChainConfig) -> Result<Self> {
        cfg.validate()?;
        let moves = MoveSet::new(model, target, cfg.uniform_restart_weight);
        let states = (0..cfg.n_chains)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(i as u64 + if target == Target::Rows { 0 } else { 1 << 32 });
                let cfg = moves.random_config(&mut rng);
                ChainState { cfg, rng }
            })
            .collect();
        Ok(MarkovChains { target, moves, cfg, backend: None, states })
    }

    /// Force a ratio backend instead of choosing one from the system size.
    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backend = Some(backend);
        self
    }

    pub fn config(&self) -> &ChainConfig {
        &self.cfg
    }

    /// Run every chain for `burn_sweeps` sweeps, then collect samples.
    pub fn sample(&mut self, params: &NdmParams, burn_sweeps: usize) -> Result<SampleBatch<DoubledConfig>> {
        let n = params.n_sites();
        if n != self.moves.n {
            return Err(NdmError::DimensionMismatch(format!("parameters for {n} sites, chains for {}", self.moves.n)));
        }
        let backend = self.backend.unwrap_or_else(|| Backend::auto(n, self.target, &self.cfg));
        let table = match backend {
            Backend::Tabulated => Some(LogTable::build(params, self.target)?),
            Backend::Cached => None,
        };
        let burn = burn_sweeps * n;
        let (n_samples, thinning) = (self.cfg.n_samples, self.cfg.thinning);
        let moves = &self.moves;
        let target = self.target;
        let results: Vec<(Vec<DoubledConfig>, AcceptanceStats)> = self
            .states
            .par_iter_mut()
            .map(|st| {
                let (samples, stats) = match &table {
                    Some(t) => {
                        let mut w = TableWalker::new(t, st.cfg);
                        run_chain(&mut w, moves, &mut st.rng, burn, n_samples, thinning)
                    }
                    None => {
                        let mut w = CachedWalker { params, cache: LookupCache::new(params, st.cfg), target };
                        run_chain(&mut w, moves, &mut st.rng, burn, n_samples, thinning)
                    }
                };
                if let Some(last) = samples.last() {
                    st.cfg = *last;
                }
                (samples, stats)
            })
            .collect();
        let mut acceptance = AcceptanceStats::default();
        let mut chains = Vec::with_capacity(results.len());
        for (s, a) in results {
            acceptance.merge(&a);
            chains.push(s);
        }
        Ok(SampleBatch { chains, acceptance })
    }
}

/// Fresh chains over `p(l, r) = |ρ(l, r)|²`.
pub fn sample_p(model: &LindbladModel, params: &NdmParams, cfg: &ChainConfig) -> Result<SampleBatch<DoubledConfig>> {
    MarkovChains::new(model, Target::Rows, cfg.clone())?.sample(params, cfg.burn_in)
}

/// Fresh chains over `q(l) = ρ(l, l)`.
pub fn sample_q(model: &LindbladModel, params: &NdmParams, cfg: &ChainConfig) -> Result<SampleBatch<SpinConfig>> {
    let batch = MarkovChains::new(model, Target::Diagonal, cfg.clone())?.sample(params, cfg.burn_in)?;
    Ok(diagonal_batch(batch))
}

pub(crate) fn diagonal_batch(batch: SampleBatch<DoubledConfig>) -> SampleBatch<SpinConfig> {
    SampleBatch {
        chains: batch.chains.into_iter().map(|c| c.into_iter().map(|d| d.l).collect()).collect(),
        acceptance: batch.acceptance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Boundary;
    use crate::ndm::test_support::random_params;
    use crate::ndm::{init_params, InitMode, Polarization};

    fn chain(n: usize, boundary: Boundary) -> LindbladModel {
        LindbladModel::heisenberg(n, boundary, 1.0, 1.0, 0.0, 0.0).unwrap()
    }

    fn exact_p(params: &NdmParams) -> Vec<(DoubledConfig, f64)> {
        let w: Vec<_> = DoubledConfig::enumerate(params.n_sites())
            .map(|c| (c, (2.0 * log_rho(params, &c).unwrap().re).exp()))
            .collect();
        let z: f64 = w.iter().map(|x| x.1).sum();
        w.into_iter().map(|(c, x)| (c, x / z)).collect()
    }

    fn exact_q(params: &NdmParams) -> Vec<(DoubledConfig, f64)> {
        let w: Vec<_> = SpinConfig::enumerate(params.n_sites())
            .map(|s| {
                let c = DoubledConfig::diagonal(s);
                (c, log_rho(params, &c).unwrap().re.exp())
            })
            .collect();
        let z: f64 = w.iter().map(|x| x.1).sum();
        w.into_iter().map(|(c, x)| (c, x / z)).collect()
    }

    /// Worst deviation in units of the binomial standard error.
    fn max_sigma(emp: &[(DoubledConfig, f64)], exact: &[(DoubledConfig, f64)], n: usize) -> f64 {
        let lookup: HashMap<_, _> = emp.iter().copied().collect();
        exact
            .iter()
            .map(|(c, p)| {
                let f = lookup.get(c).copied().unwrap_or(0.0);
                (f - p).abs() / (p * (1.0 - p) / n as f64).sqrt()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn uniform_target_p() {
        let model = chain(2, Boundary::Open);
        let params = NdmParams::zeros(2, 1, 1);
        let cfg = ChainConfig::for_sites(2, 25_000, 4, 3);
        let batch = sample_p(&model, &params, &cfg).unwrap();
        assert_eq!(batch.len(), 100_000);
        let emp = batch.weighted();
        assert_eq!(emp.len(), 16);
        assert!(max_sigma(&emp, &exact_p(&params), batch.len()) < 4.0);
        assert_eq!(batch.acceptance.overall(), 1.0);
    }

    #[test]
    fn random_params_p_marginals() {
        let model = chain(2, Boundary::Open);
        let params = random_params(2, 2, 2, 0.5, 8);
        let cfg = ChainConfig::for_sites(2, 25_000, 4, 5);
        for backend in [Backend::Cached, Backend::Tabulated] {
            let batch = MarkovChains::new(&model, Target::Rows, cfg.clone())
                .unwrap()
                .with_backend(backend)
                .sample(&params, cfg.burn_in)
                .unwrap();
            // thinned chains are mildly correlated; allow for that
            assert!(max_sigma(&batch.weighted(), &exact_p(&params), batch.len()) < 5.0, "{backend:?}");
        }
    }

    #[test]
    fn backends_agree_sample_by_sample() {
        let model = chain(3, Boundary::Periodic);
        let params = random_params(3, 2, 2, 0.5, 12);
        let cfg = ChainConfig::for_sites(3, 500, 2, 99);
        let run = |b| {
            MarkovChains::new(&model, Target::Rows, cfg.clone())
                .unwrap()
                .with_backend(b)
                .sample(&params, 2)
                .unwrap()
                .chains
        };
        assert_eq!(run(Backend::Cached), run(Backend::Tabulated));
    }

    #[test]
    fn uniform_target_q() {
        let model = chain(3, Boundary::Open);
        let params = NdmParams::zeros(3, 1, 1);
        let cfg = ChainConfig::for_sites(3, 25_000, 4, 1);
        let batch = sample_q(&model, &params, &cfg).unwrap();
        let emp: Vec<_> = batch.weighted().into_iter().map(|(s, f)| (DoubledConfig::diagonal(s), f)).collect();
        assert!(max_sigma(&emp, &exact_q(&params), batch.len()) < 4.0);
    }

    #[test]
    fn polarized_down_magnetization_q() {
        let model = chain(3, Boundary::Open);
        let params = init_params(InitMode::Polarized { direction: Polarization::Down, strength: 2.0, sigma: 0.0 }, 1, 1, 3, 0).unwrap();
        let cfg = ChainConfig::for_sites(3, 20_000, 4, 2);
        let batch = sample_q(&model, &params, &cfg).unwrap();
        let want = -(4.0f64).tanh();
        let p_up = (1.0 + want) / 2.0;
        let n = (batch.len() * 3) as f64;
        let mean = batch.iter().map(|s| s.magnetization() as f64).sum::<f64>() / n;
        let sigma = 2.0 * (p_up * (1.0 - p_up) / n).sqrt();
        assert!((mean - want).abs() < 4.0 * sigma, "{mean} vs {want}");
    }

    #[test]
    fn redraw_is_rejected_sometimes_for_peaked_rho() {
        let model = chain(3, Boundary::Open);
        let params = init_params(InitMode::Polarized { direction: Polarization::Up, strength: 3.0, sigma: 0.0 }, 1, 1, 3, 0).unwrap();
        let mut cfg = ChainConfig::for_sites(3, 20_000, 1, 2);
        cfg.uniform_restart_weight = 1.0;
        let batch = sample_p(&model, &params, &cfg).unwrap();
        let rate = batch.acceptance.rate(MoveKind::Redraw).unwrap();
        assert!(rate < 1.0);
    }

    fn stationarity_defect(moves: &MoveSet, states: &[(DoubledConfig, f64)]) -> f64 {
        let pi: HashMap<_, _> = states.iter().copied().collect();
        let mut flow: HashMap<DoubledConfig, f64> = HashMap::new();
        for &(x, px) in states {
            let mut stay = 1.0;
            for (y, k) in moves.kernel(&x) {
                if y == x {
                    continue;
                }
                let t = k * (pi[&y] / px).min(1.0);
                *flow.entry(y).or_default() += px * t;
                stay -= t;
            }
            *flow.entry(x).or_default() += px * stay;
        }
        states.iter().map(|(x, p)| (flow[x] - p).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn detailed_balance_by_enumeration() {
        let params = random_params(2, 2, 2, 0.9, 31);
        let moves = MoveSet::from_bonds(2, vec![(0, 1)], Target::Rows, 0.01);
        for (_, row) in exact_p(&params).iter().map(|x| (x.0, moves.kernel(&x.0))) {
            let total: f64 = row.iter().map(|x| x.1).sum();
            assert!((total - 1.0).abs() < 1e-14);
        }
        assert!(stationarity_defect(&moves, &exact_p(&params)) < 1e-12);
        let moves = MoveSet::from_bonds(2, vec![(0, 1)], Target::Diagonal, 0.01);
        assert!(stationarity_defect(&moves, &exact_q(&params)) < 1e-12);
    }

    #[test]
    fn empirical_proposals_follow_kernel() {
        let moves = MoveSet::from_bonds(3, vec![(0, 1), (1, 2)], Target::Rows, 0.01);
        let x = DoubledConfig::new(SpinConfig::from_index(3, 1), SpinConfig::from_index(3, 6));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200_000;
        let mut counts: HashMap<DoubledConfig, usize> = HashMap::new();
        for _ in 0..n {
            let y = match moves.propose(&mut rng) {
                Proposal::Flips(_, f, k) => {
                    let mut y = x;
                    for fl in &f[..k] {
                        fl.apply(&mut y);
                    }
                    y
                }
                Proposal::Redraw(y) => y,
            };
            *counts.entry(y).or_default() += 1;
        }
        for (y, p) in moves.kernel(&x) {
            let f = counts.get(&y).copied().unwrap_or(0) as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((f - p).abs() < 5.0 * sigma + 1e-12, "{y:?}: {f} vs {p}");
        }
    }

    #[test]
    fn open_chain_never_pairs_across_the_edge() {
        let moves = MoveSet::from_bonds(4, vec![(0, 1), (1, 2), (2, 3)], Target::Diagonal, 0.0);
        let x = DoubledConfig::diagonal(SpinConfig::all_up(4));
        let edge = DoubledConfig::diagonal(SpinConfig::all_up(4).flipped(0).flipped(3));
        assert!(moves.kernel(&x).iter().all(|(y, _)| *y != edge));
        let model = LindbladModel::heisenberg(4, Boundary::Periodic, 0.0, 0.0, 0.0, 0.0).unwrap();
        let moves = MoveSet::new(&model, Target::Diagonal, 0.0);
        assert!(moves.kernel(&x).iter().any(|(y, _)| *y == edge));
    }

    #[test]
    fn reproducible_streams() {
        let model = chain(3, Boundary::Open);
        let params = random_params(3, 2, 2, 0.5, 1);
        let cfg = ChainConfig::for_sites(3, 300, 3, 42);
        let a = sample_p(&model, &params, &cfg).unwrap();
        let b = sample_p(&model, &params, &cfg).unwrap();
        assert_eq!(a.chains, b.chains);
        let mut other = cfg.clone();
        other.seed = 43;
        assert_ne!(sample_p(&model, &params, &other).unwrap().chains, a.chains);
    }

    #[test]
    fn rejects_bad_chain_config() {
        let mut cfg = ChainConfig::for_sites(2, 10, 1, 0);
        cfg.thinning = 0;
        assert!(cfg.validate().is_err());
        cfg.thinning = 1;
        cfg.uniform_restart_weight = 2.0;
        assert!(cfg.validate().is_err());
    }
}
