//! Incremental hidden-unit angles for fast amplitude ratios under spin flips.

use num_complex::Complex64;

use super::{log_cosh, NdmParams};
use crate::model::DoubledConfig;

/// Accepted moves between from-scratch rebuilds of the angles.
pub const CACHE_REBUILD_INTERVAL: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    L,
    R,
    Both,
}

/// Flip of the row index, the column index, or both, at one site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Flip {
    pub side: Side,
    pub site: usize,
}

impl Flip {
    pub fn l(site: usize) -> Self {
        Flip { side: Side::L, site }
    }
    pub fn r(site: usize) -> Self {
        Flip { side: Side::R, site }
    }
    pub fn both(site: usize) -> Self {
        Flip { side: Side::Both, site }
    }

    fn touches_l(&self) -> bool {
        self.side != Side::R
    }

    fn touches_r(&self) -> bool {
        self.side != Side::L
    }

    /// Apply to a configuration.
    pub fn apply(&self, cfg: &mut DoubledConfig) {
        if self.touches_l() {
            cfg.l.flip(self.site);
        }
        if self.touches_r() {
            cfg.r.flip(self.site);
        }
    }
}

/// Angles of every `cosh` factor of ρ at the current configuration.
///
/// `theta_l[k] = b_k + Σ_j W_kj l_j`, `theta_r[k] = b_k + Σ_j W_kj r_j`
/// (the column factor is `cosh(theta_r)*`), and
/// `theta_m[p] = c_p + c_p* + Σ_j U_pj l_j + U_pj* r_j`.
#[derive(Clone, Debug)]
pub struct LookupCache {
    cfg: DoubledConfig,
    theta_l: Vec<Complex64>,
    theta_r: Vec<Complex64>,
    theta_m: Vec<Complex64>,
    lc_l: Vec<Complex64>,
    lc_r: Vec<Complex64>,
    lc_m: Vec<Complex64>,
    accepted: usize,
}

impl LookupCache {
    pub fn new(params: &NdmParams, cfg: DoubledConfig) -> Self {
        let mut c = LookupCache {
            cfg,
            theta_l: Vec::new(),
            theta_r: Vec::new(),
            theta_m: Vec::new(),
            lc_l: Vec::new(),
            lc_r: Vec::new(),
            lc_m: Vec::new(),
            accepted: 0,
        };
        c.rebuild(params);
        c
    }

    /// Recompute every angle from scratch at the stored configuration.
    pub fn rebuild(&mut self, params: &NdmParams) {
        let (tl, tr, tm) = params.angles(&self.cfg);
        self.lc_l = tl.iter().map(|&t| log_cosh(t)).collect();
        self.lc_r = tr.iter().map(|&t| log_cosh(t)).collect();
        self.lc_m = tm.iter().map(|&t| log_cosh(t)).collect();
        self.theta_l = tl;
        self.theta_r = tr;
        self.theta_m = tm;
    }

    /// Move to an arbitrary configuration.
    pub fn reset(&mut self, params: &NdmParams, cfg: DoubledConfig) {
        self.cfg = cfg;
        self.rebuild(params);
    }

    pub fn config(&self) -> &DoubledConfig {
        &self.cfg
    }

    pub fn theta_l(&self) -> &[Complex64] {
        &self.theta_l
    }
    pub fn theta_r(&self) -> &[Complex64] {
        &self.theta_r
    }
    pub fn theta_m(&self) -> &[Complex64] {
        &self.theta_m
    }

    /// `ln ρ` at the cached configuration, from the stored angles.
    pub fn log_rho(&self, params: &NdmParams) -> Complex64 {
        let mut s = params.visible_term(&self.cfg);
        for k in 0..self.lc_l.len() {
            s += self.lc_l[k] + self.lc_r[k].conj();
        }
        s + self.lc_m.iter().sum::<Complex64>()
    }

    /// `ln[ρ(new) / ρ(old)]` for the flipped configuration.
    pub fn log_ratio(&self, params: &NdmParams, flips: &[Flip]) -> Complex64 {
        if flips.is_empty() {
            return Complex64::new(0.0, 0.0);
        }
        let n = params.n_sites();
        let (mut any_l, mut any_r) = (false, false);
        let mut out = Complex64::new(0.0, 0.0);
        for f in flips {
            let a = params.a()[f.site];
            if f.touches_l() {
                any_l = true;
                out -= 2.0 * a * self.cfg.l.get_f64(f.site);
            }
            if f.touches_r() {
                any_r = true;
                out -= 2.0 * a.conj() * self.cfg.r.get_f64(f.site);
            }
        }
        for k in 0..params.n_hidden() {
            let row = &params.w()[k * n..(k + 1) * n];
            if any_l {
                let mut d = Complex64::new(0.0, 0.0);
                for f in flips.iter().filter(|f| f.touches_l()) {
                    d -= 2.0 * row[f.site] * self.cfg.l.get_f64(f.site);
                }
                out += log_cosh(self.theta_l[k] + d) - self.lc_l[k];
            }
            if any_r {
                let mut d = Complex64::new(0.0, 0.0);
                for f in flips.iter().filter(|f| f.touches_r()) {
                    d -= 2.0 * row[f.site] * self.cfg.r.get_f64(f.site);
                }
                out += (log_cosh(self.theta_r[k] + d) - self.lc_r[k]).conj();
            }
        }
        for p in 0..params.n_mixing() {
            let d = self.mixing_delta(params, p, flips);
            out += log_cosh(self.theta_m[p] + d) - self.lc_m[p];
        }
        out
    }

    fn mixing_delta(&self, params: &NdmParams, p: usize, flips: &[Flip]) -> Complex64 {
        let n = params.n_sites();
        let row = &params.u()[p * n..(p + 1) * n];
        let mut d = Complex64::new(0.0, 0.0);
        for f in flips {
            if f.touches_l() {
                d -= 2.0 * row[f.site] * self.cfg.l.get_f64(f.site);
            }
            if f.touches_r() {
                d -= 2.0 * row[f.site].conj() * self.cfg.r.get_f64(f.site);
            }
        }
        d
    }

    /// `ρ(new) / ρ(old)`; the cache is not modified.
    pub fn ratio(&self, params: &NdmParams, flips: &[Flip]) -> Complex64 {
        self.log_ratio(params, flips).exp()
    }

    /// Move the cache to the flipped configuration.
    pub fn apply_flips(&mut self, params: &NdmParams, flips: &[Flip]) {
        if flips.is_empty() {
            return;
        }
        let n = params.n_sites();
        for k in 0..params.n_hidden() {
            let row = &params.w()[k * n..(k + 1) * n];
            let (mut dl, mut dr) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
            let (mut tl, mut tr) = (false, false);
            for f in flips {
                if f.touches_l() {
                    tl = true;
                    dl -= 2.0 * row[f.site] * self.cfg.l.get_f64(f.site);
                }
                if f.touches_r() {
                    tr = true;
                    dr -= 2.0 * row[f.site] * self.cfg.r.get_f64(f.site);
                }
            }
            if tl {
                self.theta_l[k] += dl;
                self.lc_l[k] = log_cosh(self.theta_l[k]);
            }
            if tr {
                self.theta_r[k] += dr;
                self.lc_r[k] = log_cosh(self.theta_r[k]);
            }
        }
        for p in 0..params.n_mixing() {
            let d = self.mixing_delta(params, p, flips);
            self.theta_m[p] += d;
            self.lc_m[p] = log_cosh(self.theta_m[p]);
        }
        for f in flips {
            f.apply(&mut self.cfg);
        }
        self.accepted += 1;
        if self.accepted.is_multiple_of(CACHE_REBUILD_INTERVAL) {
            self.rebuild(params);
        }
    }
}

/// `ρ(new)/ρ(old)` for `flips` applied at the configuration held by `cache`.
pub fn ratio(params: &NdmParams, cache: &LookupCache, flips: &[Flip]) -> Complex64 {
    cache.ratio(params, flips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SpinConfig;
    use crate::ndm::log_rho;
    use crate::ndm::test_support::random_params;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_drift(cache: &LookupCache, params: &NdmParams) -> f64 {
        let (tl, tr, tm) = params.angles(cache.config());
        let d = |a: &[Complex64], b: &[Complex64]| a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        d(&tl, cache.theta_l()).max(d(&tr, cache.theta_r())).max(d(&tm, cache.theta_m()))
    }

    fn cfg3() -> DoubledConfig {
        DoubledConfig::new(SpinConfig::from_spins(&[1, -1, 1]).unwrap(), SpinConfig::from_spins(&[-1, -1, 1]).unwrap())
    }

    #[test]
    fn empty_flip_set() {
        let p = random_params(3, 2, 2, 1.0, 1);
        let mut c = LookupCache::new(&p, cfg3());
        assert_eq!(ratio(&p, &c, &[]), Complex64::new(1.0, 0.0));
        let before = c.clone();
        c.apply_flips(&p, &[]);
        assert_eq!(c.theta_l(), before.theta_l());
        assert_eq!(c.config(), before.config());
    }

    #[test]
    fn zero_params_ratio_is_one() {
        let p = NdmParams::zeros(3, 2, 2);
        let c = LookupCache::new(&p, cfg3());
        assert_eq!(c.ratio(&p, &[Flip::l(1), Flip::both(2)]), Complex64::new(1.0, 0.0));
    }

    #[test]
    fn ratio_matches_from_scratch() {
        let p = random_params(3, 3, 2, 0.9, 2);
        let c = LookupCache::new(&p, cfg3());
        let old = log_rho(&p, &cfg3()).unwrap();
        for flips in [vec![Flip::l(0)], vec![Flip::r(2)], vec![Flip::both(1)], vec![Flip::l(0), Flip::l(1)], vec![Flip::r(2), Flip::r(0)]] {
            let mut new = cfg3();
            for f in &flips {
                f.apply(&mut new);
            }
            let want = (log_rho(&p, &new).unwrap() - old).exp();
            let got = c.ratio(&p, &flips);
            assert!((got - want).norm() <= 1e-10 * want.norm(), "{flips:?}: {got} vs {want}");
        }
    }

    #[test]
    fn apply_matches_rebuild() {
        let p = random_params(3, 3, 2, 0.9, 4);
        let mut c = LookupCache::new(&p, cfg3());
        c.apply_flips(&p, &[Flip::l(2)]);
        assert!(max_drift(&c, &p) < 1e-12);
        c.apply_flips(&p, &[Flip::r(0), Flip::r(1)]);
        assert!(max_drift(&c, &p) < 1e-12);
        assert!((c.log_rho(&p) - log_rho(&p, c.config()).unwrap()).norm() < 1e-12);
    }

    #[test]
    fn long_random_walk_stays_coherent() {
        let n = 6;
        let p = random_params(n, 4, 4, 0.7, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let start = DoubledConfig::new(SpinConfig::all_up(n), SpinConfig::all_down(n));
        let mut c = LookupCache::new(&p, start);
        for _ in 0..10_000 {
            let site = rng.gen_range(0..n);
            let f = match rng.gen_range(0..3) {
                0 => Flip::l(site),
                1 => Flip::r(site),
                _ => Flip::both(site),
            };
            c.apply_flips(&p, &[f]);
        }
        assert!(max_drift(&c, &p) < 1e-8);
    }

    proptest! {
        #[test]
        fn ratio_equals_log_difference(seed in 0u64..1000, site in 0usize..4, side in 0u8..3, pair in any::<bool>()) {
            let p = random_params(4, 2, 3, 0.8, seed);
            let start = DoubledConfig::new(SpinConfig::from_index(4, seed % 16), SpinConfig::from_index(4, (seed / 16) % 16));
            let c = LookupCache::new(&p, start);
            let mk = |s: usize| match side { 0 => Flip::l(s), 1 => Flip::r(s), _ => Flip::both(s) };
            let mut flips = vec![mk(site)];
            if pair {
                flips.push(mk((site + 1) % 4));
            }
            let mut new = start;
            for f in &flips {
                f.apply(&mut new);
            }
            let want = (log_rho(&p, &new).unwrap() - log_rho(&p, &start).unwrap()).exp();
            let got = c.ratio(&p, &flips);
            prop_assert!((got - want).norm() <= 1e-10 * want.norm().max(1e-300));
        }
    }
}
