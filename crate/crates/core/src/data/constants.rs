use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Objective, ObjectiveKind};
use crate::error::{config_err, Error, Result};
use crate::masking::{sample_bernoulli_masks, validate_probs};
use crate::params::{dot, DomainBall};
use crate::rng::{tags, Stream, StreamRng};

/// Below this many trials the sampled constants are flagged.
const CONFIDENT_TRIALS: usize = 100;

/// Estimated problem constants: smoothness `l`, strong convexity `mu`,
/// gradient bound `g` over the ball, domain radius, masked stochastic
/// gradient variance bound `delta_sq` and the masked-objective analogues
/// `mu_p = (1/N) Σ p_i μ`, `l_p = (1/N) Σ p_i L`, `mu_tilde = min p_i μ`,
/// `l_tilde = max p_i L`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantsReport {
    pub l: f64,
    pub mu: f64,
    pub g: f64,
    pub radius: f64,
    pub delta_sq: f64,
    pub kappa: f64,
    pub mu_p: f64,
    pub l_p: f64,
    pub mu_tilde: f64,
    pub l_tilde: f64,
    pub keep_probs: Vec<f64>,
    pub dim: usize,
    pub n_clients: usize,
    pub trials: usize,
    /// `l` and `mu` are exact Hessian eigenvalues (quadratic objectives).
    pub exact_curvature: bool,
    pub low_confidence: bool,
}

impl ConstantsReport {
    pub fn delta(&self) -> f64 {
        self.delta_sq.sqrt()
    }

    /// Recomputes the masked-objective constants for other keep probabilities.
    pub fn with_keep_probs(&self, probs: &[f64]) -> Result<Self> {
        validate_probs(probs)?;
        let mut out = self.clone();
        out.fill_masked(probs);
        Ok(out)
    }

    fn fill_masked(&mut self, probs: &[f64]) {
        let n = probs.len() as f64;
        self.mu_p = probs.iter().map(|p| p * self.mu).sum::<f64>() / n;
        self.l_p = probs.iter().map(|p| p * self.l).sum::<f64>() / n;
        self.mu_tilde = probs.iter().map(|p| p * self.mu).fold(f64::INFINITY, f64::min);
        self.l_tilde = probs.iter().map(|p| p * self.l).fold(f64::NEG_INFINITY, f64::max);
        self.keep_probs = probs.to_vec();
    }

    /// Flat `key=value` text, one entry per line.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::from("# constants report\n");
        let f = |x: f64| format!("{x:.16e}");
        for (k, v) in [
            ("L", self.l),
            ("mu", self.mu),
            ("G", self.g),
            ("W", self.radius),
            ("delta_sq", self.delta_sq),
            ("kappa", self.kappa),
            ("mu_p", self.mu_p),
            ("L_p", self.l_p),
            ("mu_tilde", self.mu_tilde),
            ("L_tilde", self.l_tilde),
        ] {
            let _ = writeln!(s, "{k}={}", f(v));
        }
        let probs: Vec<String> = self.keep_probs.iter().map(|&p| f(p)).collect();
        let _ = writeln!(s, "keep_probs={}", probs.join(","));
        let _ = writeln!(s, "dim={}", self.dim);
        let _ = writeln!(s, "n_clients={}", self.n_clients);
        let _ = writeln!(s, "trials={}", self.trials);
        let _ = writeln!(s, "exact_curvature={}", self.exact_curvature);
        let _ = writeln!(s, "low_confidence={}", self.low_confidence);
        s
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let kv = crate::cli::parse_kv(text)?;
        let num = |k: &str| -> Result<f64> {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("constants report lacks `{k}`")))?
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("constants `{k}`: {e}")))
        };
        let int = |k: &str| -> Result<usize> {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("constants report lacks `{k}`")))?
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("constants `{k}`: {e}")))
        };
        let flag = |k: &str| -> Result<bool> {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("constants report lacks `{k}`")))?
                .parse::<bool>()
                .map_err(|e| Error::Format(format!("constants `{k}`: {e}")))
        };
        let keep_probs = kv
            .get("keep_probs")
            .ok_or_else(|| Error::Format("constants report lacks `keep_probs`".into()))?
            .split(',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|e| Error::Format(format!("keep_probs: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            l: num("L")?,
            mu: num("mu")?,
            g: num("G")?,
            radius: num("W")?,
            delta_sq: num("delta_sq")?,
            kappa: num("kappa")?,
            mu_p: num("mu_p")?,
            l_p: num("L_p")?,
            mu_tilde: num("mu_tilde")?,
            l_tilde: num("L_tilde")?,
            keep_probs,
            dim: int("dim")?,
            n_clients: int("n_clients")?,
            trials: int("trials")?,
            exact_curvature: flag("exact_curvature")?,
            low_confidence: flag("low_confidence")?,
        })
    }
}

/// Point in the ball: uniform inside for even `t`, on the boundary for odd `t`.
pub(crate) fn ball_point(dim: usize, ball: &DomainBall, t: usize, rng: &mut StreamRng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = dot(&v, &v).sqrt().max(f64::MIN_POSITIVE);
    let r = if t % 2 == 1 {
        ball.radius()
    } else {
        ball.radius() * rng.gen::<f64>().powf(1.0 / dim as f64)
    };
    v.iter_mut().for_each(|x| *x *= r / n);
    ball.project_in_place(&mut v);
    v
}

/// Estimates the problem constants over the ball.
///
/// Quadratic curvature is exact (extreme eigenvalues of each client's
/// Hessian). Logistic curvature uses exact Hessians at `trials` sampled
/// points plus the origin, where the logistic Hessian is largest. Mlp
/// curvature uses gradient-difference quotients. `G` is the largest client
/// gradient norm seen at the sampled points and `delta_sq` the largest
/// per-client variance of the masked stochastic gradient over a sampled
/// `(w, mask)` pair, computed exactly over the client's samples.
pub fn estimate_constants(
    objective: &Objective,
    ball: &DomainBall,
    keep_probs: &[f64],
    trials: usize,
    seed: u64,
) -> Result<ConstantsReport> {
    if trials < 1 {
        return Err(config_err("constants.trials must be at least 1"));
    }
    if keep_probs.len() != objective.n_clients() {
        return Err(config_err(format!(
            "{} keep probabilities for {} clients",
            keep_probs.len(),
            objective.n_clients()
        )));
    }
    validate_probs(keep_probs)?;
    let d = objective.dim();
    let n_clients = objective.n_clients();
    let root = Stream::new(seed).child(tags::CONSTANTS);

    let mut points: Vec<Vec<f64>> = vec![vec![0.0; d]];
    {
        let mut rng = root.child(0).rng();
        points.extend((0..trials).map(|t| ball_point(d, ball, t, &mut rng)));
    }

    let (l, mu, exact) = match objective.spec().kind {
        ObjectiveKind::Quadratic => {
            let mut l = f64::NEG_INFINITY;
            let mut mu = f64::INFINITY;
            for q in objective.quadratic_parts()? {
                let eig = q.a.clone().symmetric_eigenvalues();
                l = l.max(eig.max());
                mu = mu.min(eig.min());
            }
            (l, mu, true)
        }
        ObjectiveKind::Logistic => {
            let mut l = f64::NEG_INFINITY;
            let mut mu = f64::INFINITY;
            for i in 0..n_clients {
                for w in &points {
                    let eig = objective.local_hessian(i, w)?.symmetric_eigenvalues();
                    l = l.max(eig.max());
                    mu = mu.min(eig.min());
                }
            }
            (l, mu, false)
        }
        ObjectiveKind::Mlp => {
            let mut l = 0.0f64;
            let mut mu = f64::INFINITY;
            let mut rng = root.child(1).rng();
            for i in 0..n_clients {
                for w in &points {
                    let step = 1e-4 * (1.0 + dot(w, w).sqrt());
                    let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    let dn = dot(&dir, &dir).sqrt();
                    dir.iter_mut().for_each(|x| *x *= step / dn);
                    let w2: Vec<f64> = w.iter().zip(&dir).map(|(a, b)| a + b).collect();
                    let g1 = objective.local_grad(i, w);
                    let g2 = objective.local_grad(i, &w2);
                    let dg: Vec<f64> = g2.iter().zip(&g1).map(|(a, b)| a - b).collect();
                    l = l.max(dot(&dg, &dg).sqrt() / step);
                    mu = mu.min(dot(&dg, &dir) / (step * step));
                }
            }
            (l, mu, false)
        }
    };

    let mut g = 0.0f64;
    let mut grad = vec![0.0; d];
    for w in &points {
        for i in 0..n_clients {
            objective.local_grad_into(i, w, &mut grad);
            g = g.max(dot(&grad, &grad).sqrt());
        }
    }

    let mut delta_sq = 0.0f64;
    {
        let mut rng = root.child(2).rng();
        let spec = objective.spec();
        let mut full = vec![0.0; d];
        let mut single = vec![0.0; d];
        for w in &points {
            let masks = sample_bernoulli_masks(keep_probs, d, &mut rng)?;
            for (i, mask) in masks.iter().enumerate() {
                let mut wm = w.clone();
                mask.apply_in_place(&mut wm);
                let samples = &objective.clients()[i].samples;
                spec.mean_grad_into(samples, &wm, &mut full);
                mask.apply_in_place(&mut full);
                let mut var = 0.0;
                for s in samples {
                    spec.sample_grad_into(s, &wm, &mut single);
                    mask.apply_in_place(&mut single);
                    var += single
                        .iter()
                        .zip(&full)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>();
                }
                delta_sq = delta_sq.max(var / samples.len() as f64);
            }
        }
    }

    let kappa = if mu > 0.0 { l / mu } else { f64::INFINITY };
    let mut report = ConstantsReport {
        l,
        mu,
        g,
        radius: ball.radius(),
        delta_sq,
        kappa,
        mu_p: 0.0,
        l_p: 0.0,
        mu_tilde: 0.0,
        l_tilde: 0.0,
        keep_probs: vec![],
        dim: d,
        n_clients,
        trials,
        exact_curvature: exact,
        low_confidence: trials < CONFIDENT_TRIALS,
    };
    report.fill_masked(keep_probs);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_clients, ClientDataset, ClientGenerator, ObjectiveSpec, Sample, TargetKind};

    fn identity_hessian_dataset() -> ClientDataset {
        let r = 2f64.sqrt();
        ClientDataset {
            client_id: 0,
            samples: vec![
                Sample {
                    features: vec![r, 0.0],
                    target: 0.0,
                },
                Sample {
                    features: vec![0.0, r],
                    target: 0.0,
                },
            ],
            generator: ClientGenerator {
                target: TargetKind::Regression,
                mean_shift: vec![0.0; 2],
                label_bias: 0.0,
                teacher: vec![0.0; 2],
                feature_scale: 1.0,
                noise: 0.0,
                class_separation: 1.0,
            },
        }
    }

    #[test]
    fn identity_quadratic() {
        let obj = Objective::new(ObjectiveSpec::quadratic(0.0), vec![identity_hessian_dataset()]).unwrap();
        let ball = DomainBall::new(3.0).unwrap();
        let rep = estimate_constants(&obj, &ball, &[1.0], 10, 1).unwrap();
        assert!((rep.l - 1.0).abs() < 1e-12);
        assert!((rep.mu - 1.0).abs() < 1e-12);
        assert!((rep.kappa - 1.0).abs() < 1e-12);
        assert!(rep.low_confidence);
        assert!(rep.exact_curvature);
    }

    #[test]
    fn full_masking_constants_coincide() {
        let clients = gen_clients(3, 30, 4, 0.5, ObjectiveKind::Quadratic, 2).unwrap();
        let obj = Objective::new(ObjectiveSpec::quadratic(0.1), clients).unwrap();
        let ball = DomainBall::new(5.0).unwrap();
        let rep = estimate_constants(&obj, &ball, &[1.0; 3], 100, 4).unwrap();
        assert_eq!(rep.mu_p, rep.mu);
        assert_eq!(rep.l_p, rep.l);
        assert!(!rep.low_confidence);
        let half = rep.with_keep_probs(&[0.5; 3]).unwrap();
        assert!((half.mu_p - 0.5 * rep.mu).abs() < 1e-15);
        assert!((half.mu_tilde - 0.5 * rep.mu).abs() < 1e-15);
    }

    #[test]
    fn kv_roundtrip() {
        let clients = gen_clients(2, 20, 3, 0.3, ObjectiveKind::Logistic, 2).unwrap();
        let obj = Objective::new(ObjectiveSpec::logistic(0.05), clients).unwrap();
        let rep = estimate_constants(&obj, &DomainBall::new(2.0).unwrap(), &[0.6, 0.9], 12, 8).unwrap();
        let back = ConstantsReport::from_kv_str(&rep.to_kv_string()).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn logistic_curvature_bracketed() {
        let clients = gen_clients(2, 40, 3, 0.3, ObjectiveKind::Logistic, 5).unwrap();
        let obj = Objective::new(ObjectiveSpec::logistic(0.05), clients).unwrap();
        let rep = estimate_constants(&obj, &DomainBall::new(2.0).unwrap(), &[1.0, 1.0], 20, 8).unwrap();
        let bound = (0..2).map(|i| obj.smoothness_bound(i).unwrap()).fold(0.0, f64::max);
        // the origin attains the logistic curvature supremum
        assert!((rep.l - bound).abs() < 1e-10);
        assert!(rep.mu >= 0.05 - 1e-12);
        assert!(rep.delta_sq > 0.0);
    }

    #[test]
    fn zero_trials_rejected() {
        let obj = Objective::new(ObjectiveSpec::quadratic(0.0), vec![identity_hessian_dataset()]).unwrap();
        assert!(estimate_constants(&obj, &DomainBall::new(1.0).unwrap(), &[1.0], 0, 1).is_err());
        assert!(estimate_constants(&obj, &DomainBall::new(1.0).unwrap(), &[0.0], 1, 1).is_err());
    }
}
