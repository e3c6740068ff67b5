//! Config-driven experiment runner behind the `maskfl` binary.
//!
//! Subcommands and the files they write:
//!
//! * `train`: `config.toml`, `datasets.bin`, `constants.txt`, `metrics.csv`, `model.bin`
//! * `sweep`: `cells/cell<c>_seed<s>.csv` per cell and seed, `summary.csv`
//! * `stability`: `stability.csv`, `stability_summary.txt`
//! * `analyze RUN_DIR`: `analysis.txt` next to the run's artifacts
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4
//! missing or corrupted artifact.

pub mod artifacts;
pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

pub use artifacts::{
    decode_model, encode_model, metrics_csv, parse_kv, parse_metrics_csv, read_model, write_model, MetricsRun,
    METRICS_HEADER,
};
pub use config::ExperimentConfig;

use crate::data::{estimate_constants, gen_clients_with, read_datasets, write_datasets, ConstantsReport, Objective};
use crate::error::{config_err, Error, Result};
use crate::masking::MaskPlan;
use crate::oracle::MaskedObjective;
use crate::params::{dot, ParamVector};
use crate::rng::derive_seed;
use crate::stability::{run_stability_sweep, StabilitySetup, StabilitySweep};
use crate::trainer::{run, TrainResult};

use artifacts::{fmt_f64, read_artifact};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_ARTIFACT: i32 = 4;

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } | Error::NotConverged { .. } => EXIT_NUMERIC,
        Error::MissingArtifact(_) | Error::Format(_) | Error::Io(_) => EXIT_ARTIFACT,
        Error::Config(_) | Error::DimensionMismatch { .. } | Error::IndexOutOfRange { .. } | Error::Unsupported(_) => {
            EXIT_CONFIG
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "maskfl", version, about = "Masked federated averaging simulator")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment.
    Train(RunArgs),
    /// Run the sweep grid of a config.
    Sweep(RunArgs),
    /// Coupled runs on neighbouring datasets.
    Stability {
        #[command(flatten)]
        run: RunArgs,
        /// Replace the sample by itself; every divergence must be zero.
        #[arg(long)]
        debug_identity_perturbation: bool,
    },
    /// Check the stationarity bound on a finished train run.
    Analyze { run_dir: PathBuf },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Trainer seed override.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses `args`, runs the command and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let outcome = match cli.workers {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(|| dispatch(&cli.command)),
            Err(e) => Err(config_err(format!("--workers: {e}"))),
        },
        None => dispatch(&cli.command),
    };
    match outcome {
        Ok(msg) => {
            print!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: &Command) -> Result<String> {
    match cmd {
        Command::Train(a) => {
            let (cfg, out) = load_with_overrides(a)?;
            let res = cmd_train(&cfg, &out)?;
            Ok(format!(
                "train: wrote {} ({} metric rows, eta {:.6e})\n",
                out.display(),
                res.metrics.len(),
                res.eta
            ))
        }
        Command::Sweep(a) => {
            let (cfg, out) = load_with_overrides(a)?;
            let rows = cmd_sweep(&cfg, &out)?;
            Ok(format!("sweep: {} runs written to {}\n", rows.len(), out.display()))
        }
        Command::Stability {
            run,
            debug_identity_perturbation,
        } => {
            let (cfg, out) = load_with_overrides(run)?;
            let sweep = cmd_stability(&cfg, &out, *debug_identity_perturbation)?;
            Ok(format!(
                "stability: {} pairs, slope {:.4}, written to {}\n",
                sweep.rows.len(),
                sweep.slope,
                out.display()
            ))
        }
        Command::Analyze { run_dir } => Ok(cmd_analyze(run_dir)?.to_kv_string()),
    }
}

fn load_with_overrides(a: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.trainer.seed = seed;
    }
    let out = a
        .out
        .clone()
        .or_else(|| cfg.output.as_ref().map(|o| o.dir.clone()))
        .ok_or_else(|| config_err("no output directory: pass --out or set output.dir"))?;
    Ok((cfg, out))
}

/// Generates the datasets of `cfg` with `data_seed` and estimates constants.
pub fn prepare(cfg: &ExperimentConfig, data_seed: u64) -> Result<(Objective, ConstantsReport)> {
    let d = &cfg.data;
    let spec = cfg.objective_spec()?;
    let clients = gen_clients_with(d.clients, d.samples, d.dim, d.heterogeneity, spec.kind, data_seed, &cfg.gen_options())?;
    let objective = Objective::new(spec, clients)?;
    let probs = cfg.mask_plan()?.keep_fractions(d.clients, objective.dim());
    let ball = crate::params::DomainBall::new(cfg.trainer.radius)?;
    let constants = estimate_constants(&objective, &ball, &probs, cfg.constants_trials(), cfg.constants_seed())?;
    Ok((objective, constants))
}

/// Runs one experiment and writes its artifacts into `out`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainResult> {
    cfg.validate()?;
    let (objective, constants) = prepare(cfg, cfg.data.seed)?;
    let res = run(&objective, &constants, &cfg.train_config()?)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    write_datasets(&out.join("datasets.bin"), objective.spec().kind, objective.clients())?;
    fs::write(out.join("constants.txt"), constants.to_kv_string())?;
    fs::write(
        out.join("metrics.csv"),
        metrics_csv(&[MetricsRun {
            run_id: "train",
            seed: cfg.trainer.seed,
            records: &res.metrics,
        }]),
    )?;
    write_model(&out.join("model.bin"), &res.w_hat)?;
    Ok(res)
}

/// Terminal quantities of one sweep run.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: usize,
    pub value: f64,
    pub seed_index: usize,
    pub seed: u64,
    /// `F(ŵ) − F(w*)` (`NaN` for nonconvex objectives).
    pub f_gap: f64,
    pub grad_norm_sq_f: f64,
    pub grad_norm_sq_fmask: f64,
    /// `F(w*_mask) − F(w*)` (`NaN` for nonconvex objectives).
    pub residual: f64,
}

pub const SWEEP_SUMMARY_HEADER: &str =
    "cell,param,value,seed_index,seed,F_gap,grad_norm_sq_F,grad_norm_sq_Fmask,residual";

/// Runs the sweep grid. Replicate `s` of every cell shares one dataset; the
/// trainer seed of cell `c`, replicate `s` is `derive_seed(trainer.seed, c, s)`.
pub fn sweep_rows(cfg: &ExperimentConfig) -> Result<Vec<(SweepRow, TrainResult)>> {
    let sweep = cfg.sweep.as_ref().ok_or_else(|| config_err("config has no [sweep] section"))?;
    cfg.validate()?;
    let jobs: Vec<(usize, f64, usize)> = sweep
        .values
        .iter()
        .enumerate()
        .flat_map(|(c, &v)| (0..sweep.seeds).map(move |s| (c, v, s)))
        .collect();
    jobs.par_iter()
        .map(|&(c, v, s)| {
            let mut cell = cfg.with_sweep_value(&sweep.param, v)?;
            let seed = derive_seed(cfg.trainer.seed, c as u64, s as u64);
            cell.trainer.seed = seed;
            let data_seed = derive_seed(cfg.data.seed, u64::MAX, s as u64);
            let (objective, constants) = prepare(&cell, data_seed)?;
            let res = run(&objective, &constants, &cell.train_config()?)?;
            let h = MaskedObjective::auto(&objective, cell.mask_plan()?, 12, 256, seed)?;
            let (f_gap, residual) = if objective.spec().is_convex() {
                let ball = crate::params::DomainBall::new(cell.trainer.radius)?;
                let full = MaskedObjective::new(&objective, MaskPlan::Full, crate::oracle::EvalMode::Enumerate)
                    .or_else(|_| MaskedObjective::auto(&objective, MaskPlan::Full, 0, 1, seed))?;
                let w_star = full.solve_masked_optimum(&ball)?;
                let f_star = objective.global_loss(&w_star);
                let residual = res
                    .wstar_mask
                    .as_ref()
                    .map_or(f64::NAN, |w| objective.global_loss(w) - f_star);
                (objective.global_loss(&res.w_hat) - f_star, residual)
            } else {
                (f64::NAN, f64::NAN)
            };
            let gf = objective.global_grad(&res.w_hat);
            let row = SweepRow {
                cell: c,
                value: v,
                seed_index: s,
                seed,
                f_gap,
                grad_norm_sq_f: dot(&gf, &gf),
                grad_norm_sq_fmask: h.gradient(&res.w_hat)?.norm_sq(),
                residual,
            };
            Ok((row, res))
        })
        .collect()
}

/// Runs the sweep and writes per-run CSVs plus `summary.csv`.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SweepRow>> {
    let results = sweep_rows(cfg)?;
    let param = &cfg.sweep.as_ref().expect("checked in sweep_rows").param;
    let cells = out.join("cells");
    fs::create_dir_all(&cells)?;
    let mut summary = String::from(SWEEP_SUMMARY_HEADER);
    summary.push('\n');
    for (row, res) in &results {
        let id = format!("cell{:03}_seed{:03}", row.cell, row.seed_index);
        fs::write(
            cells.join(format!("{id}.csv")),
            metrics_csv(&[MetricsRun {
                run_id: &id,
                seed: row.seed,
                records: &res.metrics,
            }]),
        )?;
        let _ = writeln!(
            summary,
            "{},{param},{},{},{},{},{},{},{}",
            row.cell,
            fmt_f64(row.value),
            row.seed_index,
            row.seed,
            fmt_f64(row.f_gap),
            fmt_f64(row.grad_norm_sq_f),
            fmt_f64(row.grad_norm_sq_fmask),
            fmt_f64(row.residual)
        );
    }
    fs::write(out.join("summary.csv"), summary)?;
    Ok(results.into_iter().map(|(r, _)| r).collect())
}

pub const STABILITY_HEADER: &str = "seed,n,N,p,divergence,gap";

/// Stability grid described by the config's `[stability]` section.
pub fn stability_setup(cfg: &ExperimentConfig, identity: bool) -> Result<StabilitySetup> {
    let st = cfg
        .stability
        .as_ref()
        .ok_or_else(|| config_err("config has no [stability] section"))?;
    cfg.validate()?;
    let mut train = cfg.train_config()?;
    train.metrics = false;
    Ok(StabilitySetup {
        spec: cfg.objective_spec()?,
        n_clients: cfg.data.clients,
        dim: cfg.data.dim,
        heterogeneity: cfg.data.heterogeneity,
        gen: cfg.gen_options(),
        data_seed: cfg.data.seed,
        train,
        n_list: st.n.clone(),
        seeds: st.seeds,
        constants_trials: cfg.constants_trials(),
        test_samples: st.test_samples,
        identity_perturbation: identity,
    })
}

pub fn cmd_stability(cfg: &ExperimentConfig, out: &Path, identity: bool) -> Result<StabilitySweep> {
    let sweep = run_stability_sweep(&stability_setup(cfg, identity)?)?;
    fs::create_dir_all(out)?;
    let mut csv = String::from(STABILITY_HEADER);
    csv.push('\n');
    for r in &sweep.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.seed,
            r.n,
            r.n_clients,
            fmt_f64(r.p),
            fmt_f64(r.divergence),
            fmt_f64(r.gap)
        );
    }
    fs::write(out.join("stability.csv"), csv)?;
    let mut summary = String::from("# stability summary\n");
    let _ = writeln!(summary, "slope={}", fmt_f64(sweep.slope));
    for (n, m) in &sweep.means {
        let _ = writeln!(summary, "mean_divergence_n{n}={}", fmt_f64(*m));
    }
    fs::write(out.join("stability_summary.txt"), summary)?;
    Ok(sweep)
}

/// Result of checking the stationarity bound on a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub grad_norm_sq_f: f64,
    pub grad_norm_sq_fmask: f64,
    pub bound: f64,
    /// `bound − ||∇F(ŵ)||²`.
    pub margin: f64,
    pub satisfied: bool,
}

impl Analysis {
    pub fn to_kv_string(&self) -> String {
        let mut s = String::from("# stationarity analysis\n");
        let _ = writeln!(s, "grad_norm_sq_F={}", fmt_f64(self.grad_norm_sq_f));
        let _ = writeln!(s, "grad_norm_sq_Fmask={}", fmt_f64(self.grad_norm_sq_fmask));
        let _ = writeln!(s, "bound={}", fmt_f64(self.bound));
        let _ = writeln!(s, "margin={}", fmt_f64(self.margin));
        let _ = writeln!(s, "bound_satisfied={}", if self.satisfied { "yes" } else { "no" });
        s
    }
}

/// Evaluates `||∇F(ŵ)||²` against `2||∇F_mask(ŵ)||²` plus the mask deficit
/// term for the model saved in `run_dir`, and writes `analysis.txt`.
pub fn cmd_analyze(run_dir: &Path) -> Result<Analysis> {
    let text = String::from_utf8(read_artifact(&run_dir.join("config.toml"))?)
        .map_err(|_| Error::Format("config.toml is not UTF-8".into()))?;
    let cfg = ExperimentConfig::from_toml_str(&text)?;
    let (kind, clients) = read_datasets(&run_dir.join("datasets.bin"))?;
    let spec = cfg.objective_spec()?;
    if kind != spec.kind {
        return Err(Error::Format("datasets.bin does not match the saved config".into()));
    }
    let constants_text = String::from_utf8(read_artifact(&run_dir.join("constants.txt"))?)
        .map_err(|_| Error::Format("constants.txt is not UTF-8".into()))?;
    let constants = ConstantsReport::from_kv_str(&constants_text)?;
    let w_hat: ParamVector = read_model(&run_dir.join("model.bin"))?;
    let objective = Objective::new(spec, clients)?;
    crate::error::check_dim(objective.dim(), w_hat.dim())
        .map_err(|_| Error::Format("model dimension does not match the datasets".into()))?;
    let h = MaskedObjective::auto(&objective, cfg.mask_plan()?, 12, 256, cfg.trainer.seed)?;
    let gf = objective.global_grad(&w_hat);
    let grad_f = dot(&gf, &gf);
    let grad_m = h.gradient(&w_hat)?.norm_sq();
    let bound = h.stationarity_bound(&w_hat, grad_m, &constants)?;
    let analysis = Analysis {
        grad_norm_sq_f: grad_f,
        grad_norm_sq_fmask: grad_m,
        bound,
        margin: bound - grad_f,
        satisfied: grad_f <= bound,
    };
    fs::write(run_dir.join("analysis.txt"), analysis.to_kv_string())?;
    Ok(analysis)
}
