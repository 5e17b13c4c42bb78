use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::NdmParams;
use crate::error::{NdmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarization {
    Up,
    Down,
}

/// Starting point of a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitMode {
    /// Every real component drawn from `N(0, sigma²)`.
    NearZero { sigma: f64 },
    /// Same noise, plus `Re a_j = ±strength`: a product state along ±z with
    /// single-site `⟨σ^z⟩ = ±tanh(2·strength)`.
    Polarized { direction: Polarization, strength: f64, sigma: f64 },
}

impl Default for InitMode {
    fn default() -> Self {
        InitMode::Polarized { direction: Polarization::Up, strength: 1.5, sigma: 0.01 }
    }
}

/// Seeded initialization. `Im c` is always zero.
pub fn init_params(mode: InitMode, n_hidden: usize, n_mixing: usize, n_sites: usize, seed: u64) -> Result<NdmParams> {
    let sigma = match mode {
        InitMode::NearZero { sigma } | InitMode::Polarized { sigma, .. } => sigma,
    };
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(NdmError::InvalidParams(format!("noise scale must be >= 0, got {sigma}")));
    }
    let mut p = NdmParams::zeros(n_sites, n_hidden, n_mixing);
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        let mut draw = |v: &mut [Complex64], imag: bool| {
            for z in v.iter_mut() {
                z.re = normal.sample(&mut rng);
                if imag {
                    z.im = normal.sample(&mut rng);
                }
            }
        };
        draw(p.a_mut(), true);
        draw(p.b_mut(), true);
        draw(p.w_mut(), true);
        draw(p.c_mut(), false);
        draw(p.u_mut(), true);
    }
    if let InitMode::Polarized { direction, strength, .. } = mode {
        let s = match direction {
            Polarization::Up => strength,
            Polarization::Down => -strength,
        };
        for a in p.a_mut() {
            a.re += s;
        }
    }
    p.check_finite()?;
    Ok(p)
}
