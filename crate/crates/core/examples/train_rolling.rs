//! Rolling-window masked FedAvg on logistic regression: each client trains
//! half the model per round and sees every window once per epoch.

use maskfl::*;

fn main() -> Result<()> {
    let clients = gen_clients(4, 100, 8, 0.5, ObjectiveKind::Logistic, 2)?;
    let objective = Objective::new(ObjectiveSpec::logistic(0.05), clients)?;
    let ball = DomainBall::new(10.0)?;
    let plan = MaskPlan::uniform_rolling(4, 4, 8);
    let constants = estimate_constants(&objective, &ball, &plan.keep_fractions(4, 8), 20, 0)?;

    for windows in plan.rolling_masks(8)?[0].iter() {
        println!("window {:?}", windows.bits());
    }
    let mut cfg = TrainConfig::new(plan, 4, 8, 32, StepSize::Thm4, ball, 3);
    cfg.record_every = 8 * 4;
    let res = run_rolling_masked_fedavg(&objective, &constants, &cfg)?;
    println!("{:>6} {:>12} {:>14}", "round", "F", "||grad F_m||^2");
    for m in &res.metrics {
        println!("{:>6} {:>12.6} {:>14.3e}", m.round, m.f_value, m.grad_norm_sq_fmask);
    }
    Ok(())
}
