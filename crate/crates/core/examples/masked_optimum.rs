//! How far the masked optimum w*(p) moves from the FedAvg optimum as the
//! keep probability drops, and what that costs on the original objective.

use maskfl::*;

fn main() -> Result<()> {
    let clients = gen_clients(4, 100, 8, 0.5, ObjectiveKind::Quadratic, 1)?;
    let objective = Objective::new(ObjectiveSpec::quadratic(0.1), clients)?;
    let ball = DomainBall::new(10.0)?;
    let full = MaskedObjective::new(&objective, MaskPlan::Full, EvalMode::ClosedQuadratic)?;
    let w1 = full.solve_masked_optimum(&ball)?;
    let f1 = objective.global_loss(&w1);

    println!("{:>4} {:>14} {:>14} {:>14}", "p", "|w*(p)-w*|", "F(w*(p))-F*", "residual");
    for p in [1.0, 0.9, 0.8, 0.6, 0.4, 0.2] {
        let h = MaskedObjective::new(&objective, MaskPlan::uniform_random(4, p), EvalMode::ClosedQuadratic)?;
        let wp = h.solve_masked_optimum(&ball)?;
        println!(
            "{p:>4} {:>14.4e} {:>14.4e} {:>14.4e}",
            wp.distance(&w1),
            objective.global_loss(&wp) - f1,
            h.optimality_residual(wp.as_slice(), &ball)?
        );
    }
    Ok(())
}
