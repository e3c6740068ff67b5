//! Problem constants for each objective family, in the key=value form
//! written next to every run.

use maskfl::*;

fn main() -> Result<()> {
    let ball = DomainBall::new(5.0)?;
    let specs = [
        (ObjectiveKind::Quadratic, ObjectiveSpec::quadratic(0.1)),
        (ObjectiveKind::Logistic, ObjectiveSpec::logistic(0.05)),
        (ObjectiveKind::Mlp, ObjectiveSpec::mlp(4, 0.01)),
    ];
    for (kind, spec) in specs {
        let clients = gen_clients(4, 60, 5, 0.7, kind, 9)?;
        let objective = Objective::new(spec, clients)?;
        let report = estimate_constants(&objective, &ball, &[0.5; 4], 50, 0)?;
        println!("## {} (dim {})", kind.name(), objective.dim());
        print!("{}", report.to_kv_string());
    }
    Ok(())
}
