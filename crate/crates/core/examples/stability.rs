//! Coupled runs on neighbouring datasets: parameter divergence against the
//! total sample count, for full and masked training.

use maskfl::stability::{run_stability_sweep, StabilitySetup};
use maskfl::*;

fn setup(p: f64) -> StabilitySetup {
    let ball = DomainBall::new(1e3).unwrap();
    let mut train = TrainConfig::new(MaskPlan::uniform_random(4, p), 5, 4000, 1, StepSize::Stability, ball, 8);
    train.metrics = false;
    StabilitySetup {
        spec: ObjectiveSpec::quadratic(0.0),
        n_clients: 4,
        dim: 20,
        heterogeneity: 1.0,
        // strong client shifts over weak features keep the curvature anisotropic
        gen: GenOptions {
            feature_scale: 0.03,
            max_shift: 333.0,
            ..GenOptions::default()
        },
        data_seed: 11,
        train,
        n_list: vec![50, 100, 200, 400],
        seeds: 20,
        constants_trials: 4,
        test_samples: 200,
        identity_perturbation: false,
    }
}

fn main() -> Result<()> {
    for p in [1.0, 0.5] {
        let sweep = run_stability_sweep(&setup(p))?;
        println!("p = {p}: log-log slope {:.3}", sweep.slope);
        for (n, m) in &sweep.means {
            println!("  n = {n:>4}  mean divergence {m:.4e}");
        }
    }
    Ok(())
}
