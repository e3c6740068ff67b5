//! Gradient dissimilarity of masked clients and the data heterogeneity
//! D_max, as heterogeneity grows.

use maskfl::oracle::default_eval_points;
use maskfl::*;

fn main() -> Result<()> {
    let ball = DomainBall::new(3.0)?;
    println!("{:>4} {:>12} {:>12} {:>12} {:>8}", "h", "sigma*^2", "zeta_p^2", "zeta_max^2", "D_max");
    for h in [0.0, 0.25, 0.5, 1.0] {
        let clients = gen_clients(4, 80, 6, h, ObjectiveKind::Quadratic, 5)?;
        let objective = Objective::new(ObjectiveSpec::quadratic(0.1), clients)?;
        let masked = MaskedObjective::new(&objective, MaskPlan::uniform_random(4, 0.6), EvalMode::ClosedQuadratic)?;
        let points = default_eval_points(&[ParamVector::zeros(6)], &ball, 6, 16, 1);
        let r = masked.full_report(&points, &ball)?;
        println!(
            "{h:>4} {:>12.4e} {:>12.4e} {:>12.4e} {:>8.3}",
            r.sigma_star_sq.unwrap_or(f64::NAN),
            r.zeta_p_sq.unwrap_or(f64::NAN),
            r.zeta_max_sq,
            r.d_max
        );
    }
    Ok(())
}
