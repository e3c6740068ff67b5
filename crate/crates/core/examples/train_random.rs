//! Randomly masked FedAvg on a heterogeneous quadratic, tracking the
//! distance to the masked optimum.

use maskfl::*;

fn main() -> Result<()> {
    let clients = gen_clients(4, 100, 8, 0.5, ObjectiveKind::Quadratic, 1)?;
    let objective = Objective::new(ObjectiveSpec::quadratic(0.1), clients)?;
    let ball = DomainBall::new(10.0)?;
    let plan = MaskPlan::uniform_random(4, 0.5);
    let constants = estimate_constants(&objective, &ball, &plan.keep_fractions(4, 8), 20, 0)?;

    let mut cfg = TrainConfig::new(plan, 5, 400, 1, StepSize::Thm1, ball, 7);
    cfg.record_every = 50;
    let res = run_random_masked_fedavg(&objective, &constants, &cfg)?;

    println!("eta = {:.4}", res.eta);
    println!("{:>6} {:>12} {:>12} {:>12}", "round", "F", "F_p", "|w - w*_p|");
    for m in &res.metrics {
        println!("{:>6} {:>12.6} {:>12.6} {:>12.3e}", m.round, m.f_value, m.fmask_value, m.dist_to_wstar_mask);
    }
    println!("F(w_hat) = {:.6}", objective.global_loss(&res.w_hat));
    Ok(())
}
