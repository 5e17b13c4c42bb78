//! Mode dispatch and artifact writing.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndm_core::estimators::ObservableSpec;
use ndm_core::exact::{
    build_liouvillian, delta_l_dense, delta_rho, expectation, observable_matrix, DenseLiouvillian, DenseState,
    ExactPropagator, MAX_EXPLICIT_SITES,
};
use ndm_core::ndm::{init_params, to_dense_normalized, Checkpoint, NdmParams};
use ndm_core::tdvp::{run_dynamics, run_steady_state, smoothed_delta_l, Evolver, Trajectory, TrajectoryRecord};
use ndm_core::NdmError;

use crate::config::{Mode, RunConfig};
use crate::error::CliError;
use crate::output::{self, CsvFile};

/// What a run left on disk.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub records: usize,
    /// Stationary-state runs only.
    pub converged: Option<bool>,
    pub min_relative_eigenvalue: Option<f64>,
}

struct Context<'a> {
    cfg: &'a RunConfig,
    header: String,
    dir: &'a Path,
    names: Vec<String>,
    observables: Vec<ObservableSpec>,
    files: Vec<PathBuf>,
}

impl Context<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        if !self.files.contains(&p) {
            self.files.push(p.clone());
        }
        p
    }
}

/// Execute a validated configuration.
pub fn run(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    cfg.validate()?;
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir).map_err(CliError::io(format!("cannot create {}", dir.display())))?;
    let observables = cfg.observables()?;
    let mut ctx = Context {
        cfg,
        header: cfg.header(),
        dir,
        names: observables.iter().map(|o| o.name.clone()).collect(),
        observables,
        files: Vec::new(),
    };
    let resolved = ctx.path(output::RESOLVED_CONFIG_FILE);
    fs::write(&resolved, format!("{}\n{}", ctx.header, cfg.to_toml()))
        .map_err(CliError::io(format!("cannot write {}", resolved.display())))?;
    info!("{} run, output in {}", mode_name(cfg.mode), dir.display());

    let mut summary = match cfg.mode {
        Mode::Oracle => run_oracle(&mut ctx)?,
        Mode::Dynamics | Mode::Steady | Mode::Benchmark => run_variational(&mut ctx)?,
    };
    summary.files = ctx.files;
    Ok(summary)
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Dynamics => "dynamics",
        Mode::Steady => "steady",
        Mode::Oracle => "oracle",
        Mode::Benchmark => "benchmark",
    }
}

fn initial_params(cfg: &RunConfig) -> Result<NdmParams, CliError> {
    let n = &cfg.ndm;
    Ok(init_params(cfg.init_mode(), n.n_hidden, n.n_mixing, cfg.model.n_sites, cfg.seed)?)
}

/// Exact reference pieces shared by oracle and benchmark modes.
struct Oracle {
    liouvillian: DenseLiouvillian,
    matrices: Vec<DenseState>,
}

impl Oracle {
    fn new(cfg: &RunConfig, observables: &[ObservableSpec]) -> Result<Self, CliError> {
        let model = cfg.model()?;
        let liouvillian = build_liouvillian(&model)?;
        let matrices = observables
            .iter()
            .map(|o| observable_matrix(model.n_sites(), o))
            .collect::<ndm_core::Result<_>>()?;
        Ok(Oracle { liouvillian, matrices })
    }

    fn values(&self, rho: &DenseState) -> ndm_core::Result<(Vec<f64>, f64)> {
        let obs = self.matrices.iter().map(|m| expectation(m, rho)).collect();
        Ok((obs, delta_l_dense(&self.liouvillian, rho)?))
    }
}

fn record_times(t_end: f64, every: f64) -> Vec<f64> {
    let n = (t_end / every).floor() as usize;
    let mut times: Vec<f64> = (0..=n).map(|k| k as f64 * every).filter(|t| *t < t_end - 1e-9 * every).collect();
    times.push(t_end);
    times
}

fn run_oracle(ctx: &mut Context) -> Result<RunSummary, CliError> {
    let cfg = ctx.cfg;
    let oracle = Oracle::new(cfg, &ctx.observables)?;
    let rho0 = to_dense_normalized(&initial_params(cfg)?)?;
    let mut prop = ExactPropagator::new(&oracle.liouvillian, &rho0, cfg.oracle.dt)?;
    let path = ctx.path(output::ORACLE_FILE);
    let mut csv = CsvFile::create(&path, &ctx.header, &output::trajectory_columns(&ctx.names))?;
    let times = record_times(cfg.integrator.t_end, cfg.integrator.record_every);
    for &t in &times {
        let rho = prop.advance_to(t)?;
        let (obs, dl) = oracle.values(rho)?;
        info!("t={t:.4} exact dL={dl:.3e}");
        csv.row(&output::oracle_row(t, &obs, dl))?;
    }
    csv.finish()?;
    Ok(RunSummary {
        output_dir: ctx.dir.to_path_buf(),
        files: Vec::new(),
        records: times.len(),
        converged: None,
        min_relative_eigenvalue: None,
    })
}

/// Benchmark side of the record hook.
struct Comparison<'a> {
    oracle: &'a Oracle,
    prop: ExactPropagator<'a>,
    oracle_csv: CsvFile,
    comparison_csv: CsvFile,
}

impl Comparison<'_> {
    fn record(&mut self, rec: &TrajectoryRecord, params: &NdmParams) -> Result<(), CliError> {
        let rho = self.prop.advance_to(rec.t)?;
        let (obs, dl) = self.oracle.values(rho)?;
        let dr = delta_rho(&to_dense_normalized(params)?, rho)?;
        info!("t={:.4} delta_rho={dr:.3e}", rec.t);
        self.oracle_csv.row(&output::oracle_row(rec.t, &obs, dl))?;
        self.comparison_csv.row(&output::comparison_row(rec, dr, &obs, dl))?;
        Ok(())
    }
}

fn run_variational(ctx: &mut Context) -> Result<RunSummary, CliError> {
    let cfg = ctx.cfg;
    let model = cfg.model()?;
    if cfg.mode == Mode::Benchmark && model.n_sites() > MAX_EXPLICIT_SITES {
        return Err(NdmError::SizeGuard { what: "benchmark mode", max: MAX_EXPLICIT_SITES, n: model.n_sites() }.into());
    }
    let params0 = initial_params(cfg)?;
    let mut evolver = Evolver::new(
        model,
        cfg.sampling(),
        cfg.integrator.variant,
        cfg.regularization(),
        ctx.observables.clone(),
    )?
    .with_psd_check(cfg.integrator.check_psd || cfg.mode == Mode::Benchmark);

    let oracle = match cfg.mode {
        Mode::Benchmark => Some(Oracle::new(cfg, &ctx.observables)?),
        _ => None,
    };
    let mut comparison = match &oracle {
        Some(o) => Some(Comparison {
            oracle: o,
            prop: ExactPropagator::new(&o.liouvillian, &to_dense_normalized(&params0)?, cfg.oracle.dt)?,
            oracle_csv: CsvFile::create(&ctx.path(output::ORACLE_FILE), &ctx.header, &output::trajectory_columns(&ctx.names))?,
            comparison_csv: CsvFile::create(
                &ctx.path(output::COMPARISON_FILE),
                &ctx.header,
                &output::comparison_columns(&ctx.names),
            )?,
        }),
        None => None,
    };
    let traj_path = ctx.path(output::TRAJECTORY_FILE);
    let mut traj_csv = CsvFile::create(&traj_path, &ctx.header, &output::trajectory_columns(&ctx.names))?;
    if cfg.output.checkpoint_every_record {
        let d = ctx.dir.join(output::CHECKPOINT_DIR);
        fs::create_dir_all(&d).map_err(CliError::io(format!("cannot create {}", d.display())))?;
    }

    let mut failure: Option<CliError> = None;
    let mut index = 0usize;
    let mut checkpoints = Vec::new();
    let result = {
        let mut hook = |rec: &mut TrajectoryRecord, params: &NdmParams| -> ndm_core::Result<()> {
            let mut step = || -> Result<(), CliError> {
                if cfg.output.checkpoint_every_record {
                    let rel = format!("{}/t{index:06}.json", output::CHECKPOINT_DIR);
                    let path = ctx.dir.join(&rel);
                    checkpoint(cfg, params, rec.t, &ctx.header).write(&path)?;
                    checkpoints.push(path);
                    rec.checkpoint = Some(rel);
                }
                index += 1;
                log_record(rec, &ctx.names);
                traj_csv.row(&output::trajectory_row(rec))?;
                if let Some(c) = comparison.as_mut() {
                    c.record(rec, params)?;
                }
                Ok(())
            };
            step().map_err(|e| {
                let msg = e.to_string();
                failure = Some(e);
                NdmError::Io(std::io::Error::other(msg))
            })
        };
        match cfg.mode {
            Mode::Steady => {
                run_steady_state(&mut evolver, &params0, &cfg.integrator_config(), cfg.stop_condition(), &mut hook)
            }
            _ => run_dynamics(&mut evolver, &params0, &cfg.integrator_config(), &mut hook),
        }
    };
    let traj: Trajectory = match result {
        Ok(t) => t,
        Err(e) => {
            // flush what was recorded so far before reporting
            let _ = traj_csv.finish();
            return Err(failure.unwrap_or(CliError::Run(e)));
        }
    };
    traj_csv.finish()?;
    if let Some(c) = comparison {
        c.oracle_csv.finish()?;
        c.comparison_csv.finish()?;
    }
    ctx.files.extend(checkpoints);

    let last_t = traj.records.last().map_or(0.0, |r| r.t);
    let final_path = ctx.path(output::FINAL_CHECKPOINT_FILE);
    checkpoint(cfg, &traj.params, last_t, &ctx.header).write(&final_path)?;

    let diag = evolver.diagnostics().clone();
    let converged = (cfg.mode == Mode::Steady).then_some(traj.converged);
    if converged == Some(false) {
        warn!("stop criterion not met by t_max = {}", cfg.steady.t_max);
    }
    let mut entries: Vec<(String, String)> = vec![
        ("mode".into(), mode_name(cfg.mode).into()),
        ("records".into(), traj.records.len().to_string()),
        ("t_final".into(), last_t.to_string()),
        ("accepted_steps".into(), traj.steps.accepted.to_string()),
        ("rejected_steps".into(), traj.steps.rejected.to_string()),
        ("sr_builds".into(), diag.n_builds.to_string()),
        (
            "min_relative_eigenvalue".into(),
            diag.min_relative_eigenvalue.map(|x| x.to_string()).unwrap_or_default(),
        ),
        ("acceptance_p".into(), rate(diag.acceptance_p.overall(), &diag.acceptance_p.proposed)),
        ("acceptance_q".into(), rate(diag.acceptance_q.overall(), &diag.acceptance_q.proposed)),
    ];
    if let Some(c) = converged {
        entries.push(("converged".into(), c.to_string()));
        entries.push(("smoothed_delta_l".into(), smoothed_delta_l(&traj.records).to_string()));
    }
    if let Some(last) = traj.records.last() {
        for (name, e) in ctx.names.iter().zip(&last.observables) {
            entries.push((format!("{name}_mean"), e.mean.to_string()));
            entries.push((format!("{name}_stderr"), e.stderr.to_string()));
        }
    }
    let summary_path = ctx.path(output::SUMMARY_FILE);
    output::write_summary(&summary_path, &ctx.header, &entries)?;

    Ok(RunSummary {
        output_dir: ctx.dir.to_path_buf(),
        files: Vec::new(),
        records: traj.records.len(),
        converged,
        min_relative_eigenvalue: diag.min_relative_eigenvalue,
    })
}

fn rate(overall: f64, proposed: &[u64; 4]) -> String {
    if proposed.iter().sum::<u64>() == 0 {
        String::new()
    } else {
        overall.to_string()
    }
}

fn checkpoint(cfg: &RunConfig, params: &NdmParams, time: f64, header: &str) -> Checkpoint {
    Checkpoint { params: params.clone(), seed: cfg.seed, time, header: Some(header.to_string()) }
}

fn log_record(rec: &TrajectoryRecord, names: &[String]) {
    let obs: Vec<String> = names
        .iter()
        .zip(&rec.observables)
        .map(|(n, e)| format!("{n}={:.5}±{:.1e}", e.mean, e.stderr))
        .collect();
    let acc = |a: Option<f64>| a.map_or("-".to_string(), |x| format!("{x:.3}"));
    info!(
        "t={:.4} dL={:.3e} acc_p={} acc_q={} {}",
        rec.t,
        rec.delta_l.mean,
        acc(rec.acceptance_p),
        acc(rec.acceptance_q),
        obs.join(" ")
    );
}
