//! Run configuration: a TOML document with one table per subsystem.
//!
//! Every key except `mode` and `model.n_sites` has a default. Unknown keys
//! are rejected with the nearest valid key as a hint, before any typed
//! deserialization runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndm_core::estimators::{Axis, ObservableSpec, PauliString, SrVariant};
use ndm_core::model::{Boundary, LindbladModel};
use ndm_core::ndm::{InitMode, Polarization};
use ndm_core::sampler::{ChainConfig, DEFAULT_RESTART_WEIGHT};
use ndm_core::tdvp::{IntegratorConfig, Regularization, Sampling, Scheme, StopCondition};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dynamics,
    Steady,
    Oracle,
    Benchmark,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads, 0 for all cores.
    #[serde(default)]
    pub threads: usize,
    pub model: ModelBlock,
    #[serde(default)]
    pub ndm: NdmBlock,
    #[serde(default)]
    pub sampler: SamplerBlock,
    #[serde(default)]
    pub integrator: IntegratorBlock,
    #[serde(default)]
    pub steady: SteadyBlock,
    #[serde(default)]
    pub oracle: OracleBlock,
    #[serde(default)]
    pub observables: ObservablesBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("ndm-output")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub n_sites: usize,
    #[serde(default = "default_boundary")]
    pub boundary: BoundaryKind,
    #[serde(default, rename = "B")]
    pub field: f64,
    #[serde(default, rename = "Jx")]
    pub jx: f64,
    #[serde(default, rename = "Jy")]
    pub jy: f64,
    #[serde(default, rename = "Jz")]
    pub jz: f64,
    #[serde(default = "one")]
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    Open,
    Periodic,
}

fn default_boundary() -> BoundaryKind {
    BoundaryKind::Open
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    NearZero,
    Polarized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NdmBlock {
    /// `M`, hidden units.
    pub n_hidden: usize,
    /// `M̃`, mixing units.
    pub n_mixing: usize,
    pub init: InitKind,
    pub direction: Polarization,
    pub strength: f64,
    pub sigma: f64,
}

impl Default for NdmBlock {
    fn default() -> Self {
        NdmBlock {
            n_hidden: 4,
            n_mixing: 4,
            init: InitKind::Polarized,
            direction: Polarization::Up,
            strength: 1.5,
            sigma: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMethod {
    MonteCarlo,
    Exhaustive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerBlock {
    pub method: SamplingMethod,
    /// Kept samples per chain.
    pub n_samples: usize,
    pub n_chains: usize,
    /// Sweeps, default `10 N`.
    pub burn_in: Option<usize>,
    /// Proposals between kept samples, default `N`.
    pub thinning: Option<usize>,
    /// Default: run seed + 1.
    pub seed: Option<u64>,
    pub uniform_restart_weight: f64,
    pub reuse_stage_samples: bool,
}

impl Default for SamplerBlock {
    fn default() -> Self {
        SamplerBlock {
            method: SamplingMethod::MonteCarlo,
            n_samples: 1000,
            n_chains: 4,
            burn_in: None,
            thinning: None,
            seed: None,
            uniform_restart_weight: DEFAULT_RESTART_WEIGHT,
            reuse_stage_samples: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Rk4,
    Rk2Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizationKind {
    DiagonalShift,
    SvdCutoff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorBlock {
    pub scheme: SchemeKind,
    pub dt: f64,
    pub tol: f64,
    pub dt_init: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub t_end: f64,
    pub record_every: f64,
    pub regularization: RegularizationKind,
    pub lambda: f64,
    pub epsilon: f64,
    pub variant: SrVariant,
    pub check_psd: bool,
}

impl Default for IntegratorBlock {
    fn default() -> Self {
        IntegratorBlock {
            scheme: SchemeKind::Rk4,
            dt: 1e-3,
            tol: 1e-4,
            dt_init: 1e-2,
            dt_min: 1e-9,
            dt_max: 0.1,
            t_end: 1.0,
            record_every: 0.1,
            regularization: RegularizationKind::DiagonalShift,
            lambda: 1e-3,
            epsilon: 1e-10,
            variant: SrVariant::TwoNorm,
            check_psd: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteadyBlock {
    pub delta_l_threshold: f64,
    pub t_max: f64,
}

impl Default for SteadyBlock {
    fn default() -> Self {
        SteadyBlock { delta_l_threshold: 1e-2, t_max: 50.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleBlock {
    /// Largest exact RK4 step.
    pub dt: f64,
}

impl Default for OracleBlock {
    fn default() -> Self {
        OracleBlock { dt: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservablesBlock {
    pub names: Vec<String>,
}

impl Default for ObservablesBlock {
    fn default() -> Self {
        ObservablesBlock { names: vec!["mz".into(), "mz_sum".into()] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    pub checkpoint_every_record: bool,
}

/// Every valid key with a one-line description, in reference-config order.
pub const KEYS: &[(&str, &str)] = &[
    ("mode", "dynamics | steady | oracle | benchmark"),
    ("seed", "master seed; initialization uses it directly"),
    ("output_dir", "created if missing"),
    ("threads", "worker threads, 0 = all cores; NDM_THREADS overrides"),
    ("model.n_sites", "chain length N (required)"),
    ("model.boundary", "open | periodic (periodic needs N >= 3)"),
    ("model.B", "field along z, units of gamma"),
    ("model.Jx", "xx coupling"),
    ("model.Jy", "yy coupling"),
    ("model.Jz", "zz coupling"),
    ("model.gamma", "decay rate; sets the time unit"),
    ("ndm.n_hidden", "hidden units M"),
    ("ndm.n_mixing", "mixing units M~"),
    ("ndm.init", "near_zero | polarized"),
    ("ndm.direction", "up | down (polarized only)"),
    ("ndm.strength", "polarization strength, <sz> = tanh(2 strength)"),
    ("ndm.sigma", "std of every real parameter component"),
    ("sampler.method", "monte_carlo | exhaustive (exhaustive needs N <= 5)"),
    ("sampler.n_samples", "kept samples per chain"),
    ("sampler.n_chains", "independent chains"),
    ("sampler.burn_in", "burn-in sweeps, default 10 N"),
    ("sampler.thinning", "proposals between kept samples, default N"),
    ("sampler.seed", "chain seed, default seed + 1"),
    ("sampler.uniform_restart_weight", "relative weight of the uniform redraw move"),
    ("sampler.reuse_stage_samples", "reweight one sample set across RK stages"),
    ("integrator.scheme", "rk4 | rk2_adaptive"),
    ("integrator.dt", "rk4 step"),
    ("integrator.tol", "rk2_adaptive local error tolerance"),
    ("integrator.dt_init", "rk2_adaptive first step"),
    ("integrator.dt_min", "rk2_adaptive smallest step before giving up"),
    ("integrator.dt_max", "rk2_adaptive largest step"),
    ("integrator.t_end", "final time (dynamics, oracle, benchmark)"),
    ("integrator.record_every", "record interval"),
    ("integrator.regularization", "diagonal_shift | svd_cutoff"),
    ("integrator.lambda", "diagonal shift relative to max diag S"),
    ("integrator.epsilon", "svd cutoff relative to the largest singular value"),
    ("integrator.variant", "two_norm | fubini_study"),
    ("integrator.check_psd", "track the smallest relative eigenvalue of S"),
    ("steady.delta_l_threshold", "stop once the smoothed dL falls below this"),
    ("steady.t_max", "give up at this time"),
    ("oracle.dt", "largest exact RK4 step"),
    ("observables.names", "mz, mz_sum, or Pauli products such as \"X0 X1\""),
    ("output.checkpoint_every_record", "write a JSON checkpoint at every record"),
];

fn key_names() -> impl Iterator<Item = &'static str> {
    KEYS.iter().map(|k| k.0)
}

/// Closest valid key by edit distance on the full dotted path.
fn nearest_key(path: &str) -> &'static str {
    key_names()
        .min_by_key(|k| {
            let leaf = k.rsplit('.').next().unwrap_or(k);
            let given = path.rsplit('.').next().unwrap_or(path);
            (strsim::levenshtein(leaf, given), strsim::levenshtein(k, path))
        })
        .expect("key table is not empty")
}

fn check_keys(table: &toml::Table, prefix: &str) -> Result<(), CliError> {
    for (key, value) in table {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        let is_section = key_names().any(|k| k.starts_with(&format!("{path}.")));
        let is_leaf = key_names().any(|k| k == path);
        match value {
            toml::Value::Table(t) if is_section => check_keys(t, &path)?,
            _ if is_leaf => {}
            _ => {
                return Err(CliError::Config(format!(
                    "unknown key `{path}`; did you mean `{}`?",
                    nearest_key(&path)
                )))
            }
        }
    }
    Ok(())
}

impl RunConfig {
    /// Configuration with every default applied.
    pub fn new(mode: Mode, n_sites: usize) -> Self {
        RunConfig {
            mode,
            seed: 0,
            output_dir: default_output_dir(),
            threads: 0,
            model: ModelBlock {
                n_sites,
                boundary: BoundaryKind::Open,
                field: 0.0,
                jx: 0.0,
                jy: 0.0,
                jz: 0.0,
                gamma: 1.0,
            },
            ndm: NdmBlock::default(),
            sampler: SamplerBlock::default(),
            integrator: IntegratorBlock::default(),
            steady: SteadyBlock::default(),
            oracle: OracleBlock::default(),
            observables: ObservablesBlock::default(),
            output: OutputBlock::default(),
        }
        .resolved()
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        check_keys(&table, "")?;
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fill size-dependent defaults so the dump is self-contained.
    pub fn resolved(mut self) -> Self {
        let n = self.model.n_sites.max(1);
        self.sampler.burn_in.get_or_insert(10 * n);
        self.sampler.thinning.get_or_insert(n);
        self.sampler.seed.get_or_insert(self.seed.wrapping_add(1));
        self
    }

    /// Canonical TOML; parsing it gives back an equal configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical dump, hex encoded. `output_dir` and
    /// `threads` do not affect results and are left out, so the same run
    /// written to two places carries the same hash.
    pub fn hash(&self) -> String {
        let mut canon = self.clone().resolved();
        canon.output_dir = PathBuf::new();
        canon.threads = 0;
        let digest = Sha256::digest(canon.to_toml().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Provenance line written at the top of every output file.
    pub fn header(&self) -> String {
        format!("# ndm {} seed={} config_sha256={}", env!("CARGO_PKG_VERSION"), self.seed, self.hash())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("{field}: {msg}")));
        // TOML integers are signed 64-bit; the chain seed defaults to seed + 1.
        if self.seed >= i64::MAX as u64 {
            return bad("seed", format!("must be below {}", i64::MAX));
        }
        if self.sampler.seed.is_some_and(|s| s > i64::MAX as u64) {
            return bad("sampler.seed", format!("must be at most {}", i64::MAX));
        }
        self.model().map_err(|e| CliError::Config(format!("model: {e}")))?;
        if self.model.gamma <= 0.0 {
            return bad("model.gamma", format!("must be > 0, got {}", self.model.gamma));
        }
        let ndm = &self.ndm;
        if !(ndm.sigma >= 0.0 && ndm.sigma.is_finite()) {
            return bad("ndm.sigma", format!("must be >= 0, got {}", ndm.sigma));
        }
        if !ndm.strength.is_finite() {
            return bad("ndm.strength", "must be finite".into());
        }
        let s = &self.sampler;
        if s.n_samples == 0 {
            return bad("sampler.n_samples", "must be >= 1".into());
        }
        if s.n_chains == 0 {
            return bad("sampler.n_chains", "must be >= 1".into());
        }
        if s.thinning == Some(0) {
            return bad("sampler.thinning", "must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&s.uniform_restart_weight) {
            return bad("sampler.uniform_restart_weight", format!("must lie in [0, 1], got {}", s.uniform_restart_weight));
        }
        let ig = &self.integrator;
        for (name, v) in [
            ("integrator.dt", ig.dt),
            ("integrator.tol", ig.tol),
            ("integrator.dt_init", ig.dt_init),
            ("integrator.dt_min", ig.dt_min),
            ("integrator.dt_max", ig.dt_max),
            ("integrator.record_every", ig.record_every),
            ("oracle.dt", self.oracle.dt),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, format!("must be > 0, got {v}"));
            }
        }
        if !(ig.t_end >= 0.0 && ig.t_end.is_finite()) {
            return bad("integrator.t_end", format!("must be >= 0, got {}", ig.t_end));
        }
        self.integrator_config().validate().map_err(|e| CliError::Config(format!("integrator: {e}")))?;
        self.regularization().validate().map_err(|e| CliError::Config(format!("integrator: {e}")))?;
        let st = &self.steady;
        if !(st.delta_l_threshold > 0.0) {
            return bad("steady.delta_l_threshold", format!("must be > 0, got {}", st.delta_l_threshold));
        }
        if !(st.t_max >= 0.0 && st.t_max.is_finite()) {
            return bad("steady.t_max", format!("must be >= 0, got {}", st.t_max));
        }
        self.observables()?;
        Ok(())
    }

    pub fn model(&self) -> ndm_core::Result<LindbladModel> {
        let m = &self.model;
        let boundary = match m.boundary {
            BoundaryKind::Open => Boundary::Open,
            BoundaryKind::Periodic => Boundary::Periodic,
        };
        LindbladModel::new(m.n_sites, boundary, m.field, m.jx, m.jy, m.jz, m.gamma)
    }

    pub fn init_mode(&self) -> InitMode {
        let n = &self.ndm;
        match n.init {
            InitKind::NearZero => InitMode::NearZero { sigma: n.sigma },
            InitKind::Polarized => InitMode::Polarized { direction: n.direction, strength: n.strength, sigma: n.sigma },
        }
    }

    pub fn chain_config(&self) -> ChainConfig {
        let s = &self.sampler;
        let n = self.model.n_sites;
        ChainConfig {
            n_samples: s.n_samples,
            n_chains: s.n_chains,
            burn_in: s.burn_in.unwrap_or(10 * n),
            thinning: s.thinning.unwrap_or(n),
            seed: s.seed.unwrap_or(self.seed.wrapping_add(1)),
            uniform_restart_weight: s.uniform_restart_weight,
        }
    }

    pub fn sampling(&self) -> Sampling {
        match self.sampler.method {
            SamplingMethod::Exhaustive => Sampling::Exhaustive,
            SamplingMethod::MonteCarlo => {
                let c = self.chain_config();
                Sampling::MonteCarlo { p: c.clone(), q: c, reuse_stage_samples: self.sampler.reuse_stage_samples }
            }
        }
    }

    pub fn regularization(&self) -> Regularization {
        match self.integrator.regularization {
            RegularizationKind::DiagonalShift => Regularization::DiagonalShift(self.integrator.lambda),
            RegularizationKind::SvdCutoff => Regularization::SvdCutoff(self.integrator.epsilon),
        }
    }

    pub fn integrator_config(&self) -> IntegratorConfig {
        let ig = &self.integrator;
        let scheme = match ig.scheme {
            SchemeKind::Rk4 => Scheme::Rk4 { dt: ig.dt },
            SchemeKind::Rk2Adaptive => {
                Scheme::Rk2Adaptive { tol: ig.tol, dt_init: ig.dt_init, dt_min: ig.dt_min, dt_max: ig.dt_max }
            }
        };
        IntegratorConfig { scheme, t_end: ig.t_end, record_every: ig.record_every }
    }

    pub fn stop_condition(&self) -> StopCondition {
        StopCondition { delta_l_threshold: self.steady.delta_l_threshold, t_max: self.steady.t_max }
    }

    pub fn observables(&self) -> Result<Vec<ObservableSpec>, CliError> {
        let n = self.model.n_sites;
        let mut out: Vec<ObservableSpec> = Vec::new();
        for label in &self.observables.names {
            let obs = parse_observable(label, n)?;
            if out.iter().any(|o| o.name == obs.name) {
                return Err(CliError::Config(format!("observables.names: `{label}` listed twice")));
            }
            out.push(obs);
        }
        Ok(out)
    }
}

/// `mz` (per-site mean σ^z), `mz_sum` (site sum), or a product of Pauli
/// factors such as `X0 Z2`. The name is also the CSV column stem.
pub fn parse_observable(label: &str, n_sites: usize) -> Result<ObservableSpec, CliError> {
    let err = |msg: String| CliError::Config(format!("observables.names: `{label}`: {msg}"));
    let trimmed = label.trim();
    let obs = match trimmed {
        "mz" => ObservableSpec { name: "mz".into(), ..ObservableSpec::magnetization_z(n_sites) },
        "mz_sum" => ObservableSpec {
            name: "mz_sum".into(),
            terms: (0..n_sites).map(|j| PauliString { coeff: 1.0, ops: vec![(j, Axis::Z)] }).collect(),
        },
        _ => {
            let mut ops = Vec::new();
            for tok in trimmed.split_whitespace() {
                let mut chars = tok.chars();
                let axis = match chars.next().map(|c| c.to_ascii_uppercase()) {
                    Some('X') => Axis::X,
                    Some('Y') => Axis::Y,
                    Some('Z') => Axis::Z,
                    _ => return Err(err(format!("factor `{tok}` must look like X0, Y3 or Z1"))),
                };
                let site: usize = chars
                    .as_str()
                    .parse()
                    .map_err(|_| err(format!("factor `{tok}` has no site index")))?;
                ops.push((site, axis));
            }
            if ops.is_empty() {
                return Err(err("empty observable".into()));
            }
            let name = ops
                .iter()
                .map(|(s, a)| format!("{a:?}{s}"))
                .collect::<Vec<_>>()
                .join("_");
            ObservableSpec { name, terms: vec![PauliString { coeff: 1.0, ops }] }
        }
    };
    obs.validate(n_sites).map_err(|e| err(e.to_string()))?;
    Ok(obs)
}

/// Commented reference configuration listing every key with its default.
pub fn reference_config() -> String {
    let cfg = RunConfig::new(Mode::Dynamics, 4);
    let dump = cfg.to_toml();
    let mut out = String::from("# ndm run configuration. Every key below shows its default;\n# only `mode` and `model.n_sites` are required.\n");
    let mut section = String::new();
    for line in dump.lines() {
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.to_string();
            out.push('\n');
            out.push_str(line);
            out.push('\n');
            continue;
        }
        let key = line.split('=').next().unwrap_or("").trim();
        let path = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
        match KEYS.iter().find(|k| k.0 == path) {
            Some((_, doc)) if !key.is_empty() => {
                let _ = writeln!(out, "# {doc}");
                let _ = writeln!(out, "{line}");
            }
            _ if !line.is_empty() => {
                let _ = writeln!(out, "{line}");
            }
            _ => {}
        }
    }
    out
}
