//! JSON parameter checkpoints.
//!
//! Floats are written in shortest round-trip form, so reading a checkpoint
//! back reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::NdmParams;
use crate::error::{NdmError, Result};

const FORMAT: &str = "ndm-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NdmParams,
    pub seed: u64,
    /// Simulation time in units of 1/γ.
    pub time: f64,
    /// Free-form provenance line (version, seed, config hash).
    pub header: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    header: Option<String>,
    format: String,
    version: u32,
    n_sites: usize,
    n_hidden: usize,
    n_mixing: usize,
    seed: u64,
    time: f64,
    a: Vec<[f64; 2]>,
    b: Vec<[f64; 2]>,
    w: Vec<[f64; 2]>,
    c: Vec<[f64; 2]>,
    u: Vec<[f64; 2]>,
}

fn pairs(v: &[Complex64]) -> Vec<[f64; 2]> {
    v.iter().map(|z| [z.re, z.im]).collect()
}

fn complexes(v: &[[f64; 2]]) -> Vec<Complex64> {
    v.iter().map(|&[re, im]| Complex64::new(re, im)).collect()
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let p = &self.params;
        let doc = Document {
            header: self.header.clone(),
            format: FORMAT.into(),
            version: VERSION,
            n_sites: p.n_sites(),
            n_hidden: p.n_hidden(),
            n_mixing: p.n_mixing(),
            seed: self.seed,
            time: self.time,
            a: pairs(p.a()),
            b: pairs(p.b()),
            w: pairs(p.w()),
            c: pairs(p.c()),
            u: pairs(p.u()),
        };
        serde_json::to_string_pretty(&doc).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document = serde_json::from_str(text).map_err(|e| NdmError::Checkpoint(e.to_string()))?;
        if doc.format != FORMAT || doc.version != VERSION {
            return Err(NdmError::Checkpoint(format!(
                "unsupported format {:?} version {}",
                doc.format, doc.version
            )));
        }
        let params = NdmParams::from_parts(
            doc.n_sites,
            complexes(&doc.a),
            complexes(&doc.b),
            complexes(&doc.w),
            complexes(&doc.c),
            complexes(&doc.u),
        )
        .map_err(|e| NdmError::Checkpoint(e.to_string()))?;
        if params.n_hidden() != doc.n_hidden || params.n_mixing() != doc.n_mixing {
            return Err(NdmError::Checkpoint("hidden-layer sizes disagree with stored arrays".into()));
        }
        Ok(Checkpoint { params, seed: doc.seed, time: doc.time, header: doc.header })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
