//! Train from a config, then check the saved model against the bound that
//! turns masked stationarity into stationarity of the original objective.

use maskfl::cli::{cmd_analyze, cmd_train, ExperimentConfig};

const CONFIG: &str = include_str!("../configs/train_rolling.toml");

fn main() -> maskfl::Result<()> {
    let cfg = ExperimentConfig::from_toml_str(CONFIG)?;
    let dir = tempfile::tempdir()?;
    cmd_train(&cfg, dir.path())?;
    let a = cmd_analyze(dir.path())?;
    print!("{}", a.to_kv_string());
    Ok(())
}
