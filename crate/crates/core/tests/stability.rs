mod common;

use common::*;
use maskfl::rng::sample_stream;
use maskfl::stability::{
    coupled_run, generalization_gap, identity_neighbor, make_neighbor, run_stability_sweep, StabilitySetup,
};
use maskfl::{
    estimate_constants, DomainBall, GenOptions, MaskPlan, Objective, ObjectiveKind, ObjectiveSpec, Sample, Stream,
    StepSize, TrainConfig,
};
use rand::Rng;

fn quad_grad(samples: &[Sample], ridge: f64, w: &[f64]) -> Vec<f64> {
    let n = samples.len() as f64;
    let mut g: Vec<f64> = w.iter().map(|x| ridge * x).collect();
    for s in samples {
        let r: f64 = s.features.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - s.target;
        for (gj, a) in g.iter_mut().zip(&s.features) {
            *gj += r * a / n;
        }
    }
    g
}

#[test]
fn identity_perturbation_gives_zero_divergence() {
    let obj = logistic_objective(3, 20, 4, 0.8, 0.1, 5);
    let ball = DomainBall::new(5.0).unwrap();
    let c = estimate_constants(&obj, &ball, &[0.5; 3], 8, 0).unwrap();
    let pair = identity_neighbor(obj.clients(), 1, 7).unwrap();
    assert_eq!(pair.base, pair.perturbed);
    for plan in [MaskPlan::uniform_random(3, 0.5), MaskPlan::uniform_rolling(3, 2, 2)] {
        let epochs = if plan.is_rolling() { 3 } else { 1 };
        let mut cfg = TrainConfig::new(plan, 3, 2, epochs, StepSize::Constant(0.1), ball, 8);
        cfg.metrics = false;
        let res = coupled_run(obj.spec(), &c, &cfg, &pair).unwrap();
        assert_eq!(res.param_divergence, 0.0);
        assert_eq!(res.loss_divergence, 0.0);
        assert_eq!(res.w_hat, res.w_hat_perturbed);
    }
}

#[test]
fn one_step_divergence_in_closed_form() {
    let ridge = 0.1;
    let eta = 0.3;
    let mut hit = [false, false];
    for seed in 0..12u64 {
        let obj = quadratic_objective(1, 3, 2, 0.0, ridge, seed);
        let ball = DomainBall::new(1e6).unwrap();
        let c = estimate_constants(&obj, &ball, &[1.0], 4, 0).unwrap();
        let j = (seed % 3) as usize;
        let pair = make_neighbor(obj.clients(), 0, j, &mut Stream::new(seed).rng()).unwrap();
        let mut cfg = TrainConfig::new(MaskPlan::Full, 1, 1, 1, StepSize::Constant(eta), ball, seed);
        cfg.metrics = false;
        let res = coupled_run(obj.spec(), &c, &cfg, &pair).unwrap();

        // one SGD step from 0 on the drawn sample, then a full-batch step of size 1/L
        let idx = sample_stream(seed, 0, 0).rng().gen_range(0..3);
        hit[usize::from(idx == j)] = true;
        let out = |samples: &[Sample]| -> Vec<f64> {
            let g0 = quad_grad(&samples[idx..idx + 1], ridge, &[0.0, 0.0]);
            let w1: Vec<f64> = g0.iter().map(|g| -eta * g).collect();
            let g1 = quad_grad(samples, ridge, &w1);
            w1.iter().zip(&g1).map(|(w, g)| w - g / c.l).collect()
        };
        let a = out(&pair.base[0].samples);
        let b = out(&pair.perturbed[0].samples);
        let expect = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        assert!(
            (res.param_divergence - expect).abs() <= 1e-14 * expect.max(1.0),
            "seed {seed}: {} vs {expect}",
            res.param_divergence
        );
        assert!(res.param_divergence > 0.0);
    }
    assert!(hit[0] && hit[1], "both the hit and miss cases should occur");
}

#[test]
fn neighbor_replacement_comes_from_own_generator() {
    let clients = maskfl::gen_clients(3, 10, 3, 1.0, ObjectiveKind::Logistic, 2).unwrap();
    let pair = make_neighbor(&clients, 2, 4, &mut Stream::new(1).rng()).unwrap();
    let diffs: usize = pair
        .base
        .iter()
        .zip(&pair.perturbed)
        .map(|(a, b)| a.samples.iter().zip(&b.samples).filter(|(x, y)| x != y).count())
        .sum();
    assert_eq!(diffs, 1);
    assert_eq!(pair.perturbed[2].samples[4], pair.replacement);
    assert_eq!(pair.perturbed[2].generator, clients[2].generator);
    assert!(make_neighbor(&clients, 3, 0, &mut Stream::new(1).rng()).is_err());
    assert!(make_neighbor(&clients, 0, 10, &mut Stream::new(1).rng()).is_err());
}

#[test]
fn gap_properties() {
    let obj = quadratic_objective(2, 30, 3, 0.5, 0.1, 4);
    let w = maskfl::ParamVector::new(vec![0.3, -0.2, 0.1]).unwrap();
    assert_eq!(generalization_gap(obj.spec(), &w, obj.clients(), obj.clients()).unwrap(), 0.0);
    let test = maskfl::data::draw_test_sets(obj.clients(), 200, 9).unwrap();
    assert!(generalization_gap(obj.spec(), &w, obj.clients(), &test).unwrap() >= 0.0);
    let mut empty = test.clone();
    empty[1].samples.clear();
    assert!(generalization_gap(obj.spec(), &w, obj.clients(), &empty).is_err());
}

/// Stability regime: step `√(Nn)/(RK)`, weak curvature except along the
/// client shift directions, `R ≥ L√(Nn)`.
fn regime(p: f64, n_list: Vec<usize>, seeds: usize) -> StabilitySetup {
    let ball = DomainBall::new(1e3).unwrap();
    let mut train = TrainConfig::new(MaskPlan::uniform_random(4, p), 5, 4000, 1, StepSize::Stability, ball, 8);
    train.metrics = false;
    StabilitySetup {
        spec: ObjectiveSpec::quadratic(0.0),
        n_clients: 4,
        dim: 20,
        heterogeneity: 1.0,
        gen: GenOptions {
            feature_scale: 0.03,
            max_shift: 333.0,
            ..GenOptions::default()
        },
        data_seed: 11,
        train,
        n_list,
        seeds,
        constants_trials: 4,
        test_samples: 100,
        identity_perturbation: false,
    }
}

#[test]
fn masking_does_not_increase_divergence() {
    let masked = run_stability_sweep(&regime(0.5, vec![100], 20)).unwrap().means[0].1;
    let full = run_stability_sweep(&regime(1.0, vec![100], 20)).unwrap().means[0].1;
    assert!(masked <= full, "{masked} > {full}");
}

#[test]
fn expected_generalization_error_bounded_by_stability() {
    // E[L_D − L_S] ≤ G · E||ŵ − ŵ'||, checked with a 3-standard-error band
    let seeds = 20;
    let mut gen = Vec::new();
    let mut stab = Vec::new();
    for s in 0..seeds as u64 {
        let obj = quadratic_objective(2, 50, 3, 0.5, 0.05, 500 + s);
        let ball = DomainBall::new(5.0).unwrap();
        let c = estimate_constants(&obj, &ball, &[0.5; 2], 16, s).unwrap();
        let pair = make_neighbor(obj.clients(), (s % 2) as usize, s as usize % 50, &mut Stream::new(s).rng()).unwrap();
        let mut cfg = TrainConfig::new(MaskPlan::uniform_random(2, 0.5), 5, 50, 1, StepSize::Constant(0.05), ball, s);
        cfg.metrics = false;
        let res = coupled_run(obj.spec(), &c, &cfg, &pair).unwrap();
        let test = maskfl::data::draw_test_sets(obj.clients(), 2000, s).unwrap();
        let mut signed = 0.0;
        for (tr, te) in obj.clients().iter().zip(&test) {
            signed += maskfl::loss(obj.spec(), te, &res.w_hat).unwrap() - maskfl::loss(obj.spec(), tr, &res.w_hat).unwrap();
        }
        gen.push(signed / 2.0);
        stab.push(res.lipschitz_surrogate);
    }
    let k = seeds as f64;
    let mean = gen.iter().sum::<f64>() / k;
    let sd = (gen.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
    let bound = stab.iter().sum::<f64>() / k;
    assert!(mean <= bound + 3.0 * sd / k.sqrt(), "{mean} > {bound}");
}

#[test]
fn sweep_shape_and_determinism() {
    let ball = DomainBall::new(100.0).unwrap();
    let mut train = TrainConfig::new(MaskPlan::uniform_random(2, 0.5), 2, 20, 1, StepSize::Stability, ball, 3);
    train.metrics = false;
    let setup = StabilitySetup {
        spec: ObjectiveSpec::quadratic(0.0),
        n_clients: 2,
        dim: 3,
        heterogeneity: 0.5,
        gen: GenOptions::default(),
        data_seed: 1,
        train,
        n_list: vec![10, 20, 40],
        seeds: 3,
        constants_trials: 4,
        test_samples: 50,
        identity_perturbation: false,
    };
    let a = run_stability_sweep(&setup).unwrap();
    assert_eq!(a.rows.len(), 9);
    assert!(a.slope.is_finite());
    assert!(a.rows.iter().all(|r| r.divergence >= 0.0 && r.gap >= 0.0 && r.p == 0.5));
    assert_eq!(a, run_stability_sweep(&setup).unwrap());
    let zero = run_stability_sweep(&StabilitySetup {
        identity_perturbation: true,
        ..setup.clone()
    })
    .unwrap();
    assert!(zero.rows.iter().all(|r| r.divergence == 0.0));
    assert!(run_stability_sweep(&StabilitySetup { n_list: vec![], ..setup }).is_err());
}

#[test]
fn objective_rebuilds_from_neighbor() {
    let obj = quadratic_objective(2, 5, 2, 0.0, 0.0, 1);
    let pair = make_neighbor(obj.clients(), 0, 0, &mut Stream::new(0).rng()).unwrap();
    assert!(Objective::new(obj.spec().clone(), pair.perturbed).is_ok());
}
