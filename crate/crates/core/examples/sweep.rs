//! A config-driven sweep over the keep probability, the same path the
//! `sweep` subcommand takes. Output goes to a directory given as the first
//! argument (default: a temporary one).

use std::path::PathBuf;

use maskfl::cli::{cmd_sweep, ExperimentConfig};

const CONFIG: &str = include_str!("../configs/sweep_p.toml");

fn main() -> maskfl::Result<()> {
    let cfg = ExperimentConfig::from_toml_str(CONFIG)?;
    let tmp = tempfile::tempdir()?;
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| tmp.path().to_path_buf());
    let rows = cmd_sweep(&cfg, &out)?;
    let values: Vec<f64> = cfg.sweep.as_ref().unwrap().values.clone();
    println!("{:>4} {:>14} {:>14}", "p", "mean F gap", "mean residual");
    for (c, v) in values.iter().enumerate() {
        let cell: Vec<_> = rows.iter().filter(|r| r.cell == c).collect();
        let k = cell.len() as f64;
        println!(
            "{v:>4} {:>14.4e} {:>14.4e}",
            cell.iter().map(|r| r.f_gap).sum::<f64>() / k,
            cell.iter().map(|r| r.residual).sum::<f64>() / k
        );
    }
    println!("summary written to {}", out.join("summary.csv").display());
    Ok(())
}
