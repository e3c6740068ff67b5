//! Randomly masked and rolling masked FedAvg.
//!
//! One global round: every client receives its masked copy `m ⊙ w`, runs `K`
//! masked SGD steps `w ← w − η m ⊙ ∇f_i(m ⊙ w; ξ)` with `ξ` drawn uniformly
//! with replacement from its data, and the server fills unselected
//! coordinates from the previous global model, averages and projects onto
//! the ball. A final output step of size `1/L` produces `ŵ`.

use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::{ConstantsReport, Objective};
use crate::error::{config_err, Error, Result};
use crate::masking::{sample_bernoulli_masks, shuffle_permutation, MaskPlan};
use crate::oracle::{EvalMode, MaskedObjective};
use crate::params::{dot, server_average, DomainBall, Mask, ParamVector};
use crate::rng::{mask_stream, output_stream, sample_stream, shuffle_stream, StreamRng};

/// Step size: a constant or one of the schedules derived from the problem
/// constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    Constant(f64),
    /// `log((KR)²) / (μ̃ K R)`, strongly convex random masking.
    Thm1,
    /// `1 / (L √(KR))`, nonconvex random masking.
    Thm2,
    /// `log(T²) / (μ K R T)`, strongly convex rolling masking. The logarithm
    /// is floored at 1 so that `T = 1` gives a positive step.
    Thm3,
    /// `1 / (L √(KRT))`, nonconvex rolling masking.
    Thm4,
    /// `√(Nn) / (RK)`, the stability regime.
    Stability,
}

impl StepSize {
    pub fn name(&self) -> String {
        match self {
            StepSize::Constant(v) => format!("{v}"),
            StepSize::Thm1 => "thm1".into(),
            StepSize::Thm2 => "thm2".into(),
            StepSize::Thm3 => "thm3".into(),
            StepSize::Thm4 => "thm4".into(),
            StepSize::Stability => "stability".into(),
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "thm1" => StepSize::Thm1,
            "thm2" => StepSize::Thm2,
            "thm3" => StepSize::Thm3,
            "thm4" => StepSize::Thm4,
            "stability" => StepSize::Stability,
            _ => return None,
        })
    }

    /// Numeric step for a run with `n_clients` clients of `n_samples` points.
    pub fn resolve(&self, consts: &ConstantsReport, cfg: &TrainConfig, n_clients: usize, n_samples: usize) -> Result<f64> {
        let k = cfg.local_steps as f64;
        let r = cfg.rounds as f64;
        let t = cfg.epochs as f64;
        let eta = match *self {
            StepSize::Constant(v) => v,
            StepSize::Thm1 => ((k * r).powi(2)).ln() / (consts.mu_tilde * k * r),
            StepSize::Thm2 => 1.0 / (consts.l * (k * r).sqrt()),
            StepSize::Thm3 => (t * t).ln().max(1.0) / (consts.mu * k * r * t),
            StepSize::Thm4 => 1.0 / (consts.l * (k * r * t).sqrt()),
            StepSize::Stability => ((n_clients * n_samples) as f64).sqrt() / (r * k),
        };
        if !(eta.is_finite() && eta >= 0.0) {
            return Err(config_err(format!(
                "trainer.eta resolves to {eta} for preset {}",
                self.name()
            )));
        }
        Ok(eta)
    }
}

/// Full specification of one training run on a given objective.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub plan: MaskPlan,
    /// Local steps `K`.
    pub local_steps: usize,
    /// Rounds `R` (per epoch for rolling plans).
    pub rounds: usize,
    /// Epochs `T`; random plans use a single epoch.
    pub epochs: usize,
    pub step: StepSize,
    pub ball: DomainBall,
    pub seed: u64,
    /// Metrics and trajectory are recorded at global round 0 and every
    /// `record_every` global rounds (0 records only the first and last).
    pub record_every: usize,
    /// Evaluation of the masked objective in metrics; `None` picks an exact
    /// mode when available.
    pub eval_mode: Option<EvalMode>,
    /// Skip the metric evaluations entirely.
    pub metrics: bool,
    /// Solve for the masked optimum to fill `dist_to_wstar_mask`.
    pub solve_optimum: bool,
    pub init: Option<ParamVector>,
}

impl TrainConfig {
    pub fn new(plan: MaskPlan, local_steps: usize, rounds: usize, epochs: usize, step: StepSize, ball: DomainBall, seed: u64) -> Self {
        Self {
            plan,
            local_steps,
            rounds,
            epochs,
            step,
            ball,
            seed,
            record_every: 0,
            eval_mode: None,
            metrics: true,
            solve_optimum: true,
            init: None,
        }
    }

    pub fn total_rounds(&self) -> usize {
        self.rounds * self.epochs
    }

    fn validate(&self, objective: &Objective) -> Result<()> {
        if self.local_steps < 1 {
            return Err(config_err("trainer.K must be at least 1"));
        }
        if self.rounds < 1 {
            return Err(config_err("trainer.R must be at least 1"));
        }
        if self.epochs < 1 {
            return Err(config_err("trainer.T must be at least 1"));
        }
        self.plan.validate(objective.n_clients(), objective.dim())?;
        if let MaskPlan::Rolling { rounds_per_epoch, .. } = &self.plan {
            if *rounds_per_epoch != self.rounds {
                return Err(config_err(format!(
                    "trainer.R = {} differs from plan.R = {rounds_per_epoch}",
                    self.rounds
                )));
            }
        } else if self.epochs != 1 {
            return Err(config_err("trainer.T must be 1 for random masking"));
        }
        if let Some(w) = &self.init {
            crate::error::check_dim(objective.dim(), w.dim())?;
        }
        Ok(())
    }
}

/// One row of the metric series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    /// Global round index (`e·R + r` for rolling plans).
    pub round: usize,
    pub f_value: f64,
    /// `F_p` or `F_m`.
    pub fmask_value: f64,
    pub grad_norm_sq_f: f64,
    pub grad_norm_sq_fmask: f64,
    /// `||w − w*_mask||`, `NaN` when the masked optimum is unavailable.
    pub dist_to_wstar_mask: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    /// Model after the output step.
    pub w_hat: ParamVector,
    /// Last global iterate.
    pub w_final: ParamVector,
    /// `(global round, iterate)` at the recorded rounds.
    pub trajectory: Vec<(usize, ParamVector)>,
    pub metrics: Vec<MetricsRecord>,
    pub eta: f64,
    pub wstar_mask: Option<ParamVector>,
    /// SHA-256 over every mask, permutation and sample index consumed.
    pub stream_digest: [u8; 32],
}

/// Algorithm with Bernoulli masks redrawn every round.
pub fn run_random_masked_fedavg(objective: &Objective, constants: &ConstantsReport, cfg: &TrainConfig) -> Result<TrainResult> {
    if cfg.plan.is_rolling() {
        return Err(config_err("random masked FedAvg needs a random or full plan"));
    }
    run(objective, constants, cfg)
}

/// Algorithm cycling through shuffled rolling windows.
pub fn run_rolling_masked_fedavg(objective: &Objective, constants: &ConstantsReport, cfg: &TrainConfig) -> Result<TrainResult> {
    if !cfg.plan.is_rolling() {
        return Err(config_err("rolling masked FedAvg needs a rolling plan"));
    }
    run(objective, constants, cfg)
}

/// Runs whichever algorithm the plan selects.
pub fn run(objective: &Objective, constants: &ConstantsReport, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate(objective)?;
    let n_clients = objective.n_clients();
    let n_samples = objective.clients()[0].len();
    let d = objective.dim();
    let eta = cfg.step.resolve(constants, cfg, n_clients, n_samples)?;
    if eta * cfg.local_steps as f64 * constants.l > 1.0 {
        log::warn!(
            "eta*K*L = {:.3} exceeds 1; outside the analysed step-size regime",
            eta * cfg.local_steps as f64 * constants.l
        );
    }

    let rolling = if cfg.plan.is_rolling() {
        Some(cfg.plan.rolling_masks(d)?)
    } else {
        None
    };
    let probs = cfg.plan.keep_fractions(n_clients, d);

    let mut recorder = Recorder::new(objective, cfg)?;
    let mut hasher = Sha256::new();
    let mut w = match &cfg.init {
        Some(w0) => {
            let mut v = w0.as_slice().to_vec();
            cfg.ball.project_in_place(&mut v);
            ParamVector::new(v)?
        }
        None => ParamVector::zeros(d),
    };
    recorder.record(0, &w)?;

    let total = cfg.total_rounds();
    for e in 0..cfg.epochs {
        let sigma = rolling.as_ref().map(|_| {
            let p = shuffle_permutation(cfg.rounds, &mut shuffle_stream(cfg.seed, e as u64).rng());
            for &s in p.as_slice() {
                hasher.update((s as u64).to_le_bytes());
            }
            p
        });
        for r in 0..cfg.rounds {
            let g = e * cfg.rounds + r;
            let masks: Vec<Mask> = match (&rolling, &sigma) {
                (Some(windows), Some(sigma)) => windows.iter().map(|ws| ws[sigma.get(r)].clone()).collect(),
                _ => sample_bernoulli_masks(&probs, d, &mut mask_stream(cfg.seed, g as u64).rng())?,
            };
            let outcomes: Vec<(ParamVector, Vec<usize>)> = masks
                .par_iter()
                .enumerate()
                .map(|(i, m)| local_update(objective, i, m, &w, eta, cfg.local_steps, cfg.seed, g))
                .collect::<Result<_>>()?;
            let mut locals = Vec::with_capacity(n_clients);
            for (m, (local, idx)) in masks.iter().zip(outcomes) {
                hasher.update(m.bits());
                for k in idx {
                    hasher.update((k as u64).to_le_bytes());
                }
                locals.push(local);
            }
            w = server_average(&locals, &masks, &w, &cfg.ball).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFinite {
                    context: format!("global iterate after round {}", g + 1),
                },
                other => other,
            })?;
            let done = g + 1;
            if done == total || done.is_multiple_of(cfg.record_every) {
                recorder.record(done, &w)?;
            }
        }
    }

    let mut out_rng = output_stream(cfg.seed).rng();
    let w_hat = output_step(&w, &cfg.plan, objective, constants.l, &cfg.ball, &mut out_rng)?;
    Ok(TrainResult {
        w_hat,
        w_final: w,
        trajectory: recorder.trajectory,
        metrics: recorder.metrics,
        eta,
        wstar_mask: recorder.wstar,
        stream_digest: hasher.finalize().into(),
    })
}

/// `K` masked SGD steps of client `i` starting from `m ⊙ w`. Returns the
/// local model and the sample indices drawn.
#[allow(clippy::too_many_arguments)]
fn local_update(
    objective: &Objective,
    i: usize,
    mask: &Mask,
    w: &ParamVector,
    eta: f64,
    k_steps: usize,
    seed: u64,
    round: usize,
) -> Result<(ParamVector, Vec<usize>)> {
    let spec = objective.spec();
    let samples = &objective.clients()[i].samples;
    let mut rng: StreamRng = sample_stream(seed, round as u64, i as u64).rng();
    let mut local = w.as_slice().to_vec();
    mask.apply_in_place(&mut local);
    let mut g = vec![0.0; local.len()];
    let mut drawn = Vec::with_capacity(k_steps);
    for _ in 0..k_steps {
        let idx = rng.gen_range(0..samples.len());
        drawn.push(idx);
        mask.apply_in_place(&mut local);
        spec.sample_grad_into(&samples[idx], &local, &mut g);
        mask.apply_in_place(&mut g);
        for (x, gj) in local.iter_mut().zip(&g) {
            *x -= eta * gj;
        }
    }
    debug_assert!(
        local.iter().zip(mask.bits()).all(|(x, &b)| b == 1 || *x == 0.0),
        "local update touched a coordinate outside the mask"
    );
    if !local.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("client {i} local model in round {}", round + 1),
        });
    }
    Ok((ParamVector::from_vec_unchecked(local), drawn))
}

/// `P_W(w − (1/L) · direction)` where the direction is the client average of
/// full-batch masked gradients: fresh Bernoulli masks from `rng` for random
/// plans, the average over all canonical windows for rolling plans.
pub fn output_step(
    w: &ParamVector,
    plan: &MaskPlan,
    objective: &Objective,
    l: f64,
    ball: &DomainBall,
    rng: &mut StreamRng,
) -> Result<ParamVector> {
    if !(l > 0.0) {
        return Err(config_err(format!("output step needs L > 0, got {l}")));
    }
    let n = objective.n_clients();
    let d = objective.dim();
    crate::error::check_dim(d, w.dim())?;
    let per_client: Vec<Vec<Mask>> = if plan.is_rolling() {
        plan.rolling_masks(d)?
    } else {
        sample_bernoulli_masks(&plan.keep_fractions(n, d), d, rng)?
            .into_iter()
            .map(|m| vec![m])
            .collect()
    };
    let mut dir = vec![0.0; d];
    let mut g = vec![0.0; d];
    for (i, masks) in per_client.iter().enumerate() {
        let mut client = vec![0.0; d];
        for m in masks {
            objective.masked_local_grad_into(i, m, w, &mut g);
            for (c, x) in client.iter_mut().zip(&g) {
                *c += x;
            }
        }
        let r = masks.len() as f64;
        for (a, c) in dir.iter_mut().zip(&client) {
            *a += c / r;
        }
    }
    let mut out: Vec<f64> = w.iter().zip(&dir).map(|(x, g)| x - (g / n as f64) / l).collect();
    ball.project_in_place(&mut out);
    ParamVector::new(out).map_err(|_| Error::NonFinite {
        context: "output step".into(),
    })
}

struct Recorder<'a> {
    objective: &'a Objective,
    masked: Option<MaskedObjective<'a>>,
    wstar: Option<ParamVector>,
    trajectory: Vec<(usize, ParamVector)>,
    metrics: Vec<MetricsRecord>,
}

impl<'a> Recorder<'a> {
    fn new(objective: &'a Objective, cfg: &TrainConfig) -> Result<Self> {
        let mut masked = None;
        let mut wstar = None;
        if cfg.metrics {
            let h = match cfg.eval_mode {
                Some(mode) => MaskedObjective::new(objective, cfg.plan.clone(), mode)?,
                None => MaskedObjective::auto(objective, cfg.plan.clone(), 12, 256, cfg.seed)?,
            };
            if cfg.solve_optimum && objective.spec().is_convex() {
                wstar = Some(h.solve_masked_optimum(&cfg.ball)?);
            }
            masked = Some(h);
        }
        Ok(Self {
            objective,
            masked,
            wstar,
            trajectory: Vec::new(),
            metrics: Vec::new(),
        })
    }

    fn record(&mut self, round: usize, w: &ParamVector) -> Result<()> {
        self.trajectory.push((round, w.clone()));
        let Some(h) = &self.masked else { return Ok(()) };
        let gf = self.objective.global_grad(w);
        let gm = h.gradient(w)?;
        let rec = MetricsRecord {
            round,
            f_value: self.objective.global_loss(w),
            fmask_value: h.value(w)?,
            grad_norm_sq_f: dot(&gf, &gf),
            grad_norm_sq_fmask: gm.norm_sq(),
            dist_to_wstar_mask: self.wstar.as_ref().map_or(f64::NAN, |s| s.distance(w)),
        };
        let finite = [rec.f_value, rec.fmask_value, rec.grad_norm_sq_f, rec.grad_norm_sq_fmask]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                context: format!("metrics at round {round}"),
            });
        }
        self.metrics.push(rec);
        Ok(())
    }
}
