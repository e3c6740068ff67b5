//! The three ways of evaluating F_p (closed form, enumeration, Monte Carlo)
//! and the finite window average F_m.

use maskfl::*;

fn main() -> Result<()> {
    let clients = gen_clients(3, 50, 6, 0.5, ObjectiveKind::Quadratic, 4)?;
    let objective = Objective::new(ObjectiveSpec::quadratic(0.1), clients)?;
    let w = vec![0.5, -0.3, 0.2, 0.1, -0.4, 0.6];
    let plan = MaskPlan::Random { probs: vec![0.9, 0.6, 0.3] };

    let closed = MaskedObjective::new(&objective, plan.clone(), EvalMode::ClosedQuadratic)?;
    let exact = MaskedObjective::new(&objective, plan.clone(), EvalMode::Enumerate)?;
    let mc = MaskedObjective::new(&objective, plan, EvalMode::MonteCarlo { samples: 2000, seed: 1 })?;
    let est = mc.fp_estimate(&w)?;
    println!("F(w)              = {:.8}", objective.global_loss(&w));
    println!("F_p closed form   = {:.8}", closed.fp_value(&w)?);
    println!("F_p enumeration   = {:.8}", exact.fp_value(&w)?);
    println!("F_p Monte Carlo   = {:.8} +- {:.2e}", est.value, est.std_error);
    println!("grad F_p          = {:?}", closed.fp_gradient(&w)?.as_slice());

    let rolling = MaskedObjective::new(&objective, MaskPlan::uniform_rolling(3, 3, 2), EvalMode::Enumerate)?;
    println!("F_m (s=3, R=2)    = {:.8}", rolling.fm_value(&w)?);
    println!("expected Hessian of F_p:\n{:.4}", closed.expected_hessian()?);
    Ok(())
}
