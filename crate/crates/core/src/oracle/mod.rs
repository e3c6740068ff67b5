//! Exact and sampled evaluation of the masked objectives
//!
//! * random masking: `F_p(w) = (1/N) Σ_i E_{m_i ~ Ber(p_i)} f_i(m_i ⊙ w)`
//! * rolling masking: `F_m(w) = (1/N) Σ_i (1/R) Σ_j f_i(m_i^j ⊙ w)`
//!
//! together with their minimizers and the heterogeneity constants measured
//! on them.

mod dissimilarity;
mod optimum;

pub use dissimilarity::{d_max, default_eval_points, DissimilarityReport};
pub use optimum::minimize_quadratic_on_ball;

use nalgebra::{DMatrix, DVector};

use crate::data::{ConstantsReport, Objective, ObjectiveKind};
use crate::error::{check_dim, config_err, Error, Result};
use crate::masking::{sample_bernoulli_masks, MaskPlan};
use crate::params::{dot, Mask, ParamVector};
use crate::rng::{tags, Stream};

/// Largest dimension accepted by [`EvalMode::Enumerate`].
pub const MAX_ENUM_DIM: usize = 20;

/// How expectations over Bernoulli masks are computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMode {
    /// Exact weighted sum over all `2^d` masks per client.
    Enumerate,
    /// Exact closed form for quadratic objectives.
    ClosedQuadratic,
    /// Average over `samples` mask draws per client. The draws are fixed at
    /// construction, so every evaluation of one handle sees the same masks.
    MonteCarlo { samples: usize, seed: u64 },
}

/// Value with a Monte-Carlo standard error (zero for exact modes).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

/// Per-client first and second moments of the masked gradient.
#[derive(Debug, Clone)]
pub(crate) struct ClientMoments {
    pub value: f64,
    pub grad_mean: Vec<f64>,
    pub grad_sq: f64,
}

/// The masked objective induced by a [`MaskPlan`] on an [`Objective`].
#[derive(Debug, Clone)]
pub struct MaskedObjective<'a> {
    objective: &'a Objective,
    plan: MaskPlan,
    mode: EvalMode,
    probs: Vec<f64>,
    rolling: Option<Vec<Vec<Mask>>>,
    // [sample][client]
    mc_masks: Option<Vec<Vec<Mask>>>,
}

impl<'a> MaskedObjective<'a> {
    pub fn new(objective: &'a Objective, plan: MaskPlan, mode: EvalMode) -> Result<Self> {
        let n = objective.n_clients();
        let d = objective.dim();
        plan.validate(n, d)?;
        let probs = plan.keep_fractions(n, d);
        let rolling = if plan.is_rolling() {
            Some(plan.rolling_masks(d)?)
        } else {
            None
        };
        let mut mc_masks = None;
        if rolling.is_none() {
            match mode {
                EvalMode::Enumerate if d > MAX_ENUM_DIM => {
                    return Err(Error::Unsupported(format!(
                        "mask enumeration needs d <= {MAX_ENUM_DIM}, got d = {d} (2^d masks per client)"
                    )))
                }
                EvalMode::ClosedQuadratic if objective.spec().kind != ObjectiveKind::Quadratic => {
                    return Err(config_err(format!(
                        "closed-form evaluation requires a quadratic objective, got {}",
                        objective.spec().kind.name()
                    )))
                }
                EvalMode::MonteCarlo { samples, seed } => {
                    if samples < 1 {
                        return Err(config_err("Monte-Carlo evaluation needs at least one sample"));
                    }
                    let mut rng = Stream::new(seed).child(tags::EVAL).rng();
                    mc_masks = Some(
                        (0..samples)
                            .map(|_| sample_bernoulli_masks(&probs, d, &mut rng))
                            .collect::<Result<Vec<_>>>()?,
                    );
                }
                _ => {}
            }
        }
        Ok(Self {
            objective,
            plan,
            mode,
            probs,
            rolling,
            mc_masks,
        })
    }

    /// Picks an exact mode when one is available: closed form for
    /// quadratics, enumeration up to `enum_limit` dimensions, Monte-Carlo
    /// with `mc_samples` draws otherwise.
    pub fn auto(objective: &'a Objective, plan: MaskPlan, enum_limit: usize, mc_samples: usize, seed: u64) -> Result<Self> {
        let mode = if objective.spec().kind == ObjectiveKind::Quadratic {
            EvalMode::ClosedQuadratic
        } else if objective.dim() <= enum_limit.min(MAX_ENUM_DIM) {
            EvalMode::Enumerate
        } else {
            EvalMode::MonteCarlo {
                samples: mc_samples,
                seed,
            }
        };
        Self::new(objective, plan, mode)
    }

    pub fn objective(&self) -> &Objective {
        self.objective
    }

    pub fn plan(&self) -> &MaskPlan {
        &self.plan
    }

    pub fn mode(&self) -> EvalMode {
        self.mode
    }

    /// Per-client keep probabilities (`s_i / d` for rolling plans).
    pub fn keep_probs(&self) -> &[f64] {
        &self.probs
    }

    /// Canonical rolling masks, `[client][window]`.
    pub fn rolling_masks(&self) -> Option<&[Vec<Mask>]> {
        self.rolling.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.objective.dim()
    }

    fn check_w(&self, w: &[f64]) -> Result<()> {
        check_dim(self.dim(), w.len())
    }

    fn require_random(&self) -> Result<()> {
        if self.rolling.is_some() {
            return Err(config_err("F_p requested for a rolling plan"));
        }
        Ok(())
    }

    fn require_rolling(&self) -> Result<()> {
        if self.rolling.is_none() {
            return Err(config_err("F_m requested for a non-rolling plan"));
        }
        Ok(())
    }

    /// `F_p(w)` with its standard error.
    pub fn fp_estimate(&self, w: &[f64]) -> Result<Estimate> {
        self.require_random()?;
        self.check_w(w)?;
        if let Some(draws) = &self.mc_masks {
            let n = self.objective.n_clients() as f64;
            let vals: Vec<f64> = draws
                .iter()
                .map(|masks| {
                    masks
                        .iter()
                        .enumerate()
                        .map(|(i, m)| self.objective.masked_local_loss(i, m, w))
                        .sum::<f64>()
                        / n
                })
                .collect();
            let s = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / s;
            let var = if vals.len() > 1 {
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (s - 1.0)
            } else {
                0.0
            };
            return Ok(Estimate {
                value: mean,
                std_error: (var / s).sqrt(),
            });
        }
        Ok(Estimate {
            value: self.value_unchecked(w),
            std_error: 0.0,
        })
    }

    pub fn fp_value(&self, w: &[f64]) -> Result<f64> {
        Ok(self.fp_estimate(w)?.value)
    }

    pub fn fp_gradient(&self, w: &[f64]) -> Result<ParamVector> {
        self.require_random()?;
        self.check_w(w)?;
        ParamVector::new(self.gradient_unchecked(w))
    }

    pub fn fm_value(&self, w: &[f64]) -> Result<f64> {
        self.require_rolling()?;
        self.check_w(w)?;
        Ok(self.value_unchecked(w))
    }

    pub fn fm_gradient(&self, w: &[f64]) -> Result<ParamVector> {
        self.require_rolling()?;
        self.check_w(w)?;
        ParamVector::new(self.gradient_unchecked(w))
    }

    /// `F_p` or `F_m`, whichever the plan induces.
    pub fn value(&self, w: &[f64]) -> Result<f64> {
        self.check_w(w)?;
        Ok(self.value_unchecked(w))
    }

    /// Gradient of [`Self::value`].
    pub fn gradient(&self, w: &[f64]) -> Result<ParamVector> {
        self.check_w(w)?;
        ParamVector::new(self.gradient_unchecked(w))
    }

    fn value_unchecked(&self, w: &[f64]) -> f64 {
        let n = self.objective.n_clients();
        (0..n).map(|i| self.client_moments(i, w, false).value).sum::<f64>() / n as f64
    }

    fn gradient_unchecked(&self, w: &[f64]) -> Vec<f64> {
        let n = self.objective.n_clients();
        let mut acc = vec![0.0; self.dim()];
        for i in 0..n {
            let m = self.client_moments(i, w, false);
            for (a, g) in acc.iter_mut().zip(&m.grad_mean) {
                *a += g;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        acc
    }

    /// Moments of `m ⊙ ∇f_i(m ⊙ w)` and the expected loss for client `i`.
    pub(crate) fn client_moments(&self, i: usize, w: &[f64], want_sq: bool) -> ClientMoments {
        if let Some(windows) = &self.rolling {
            let wts = 1.0 / windows[i].len() as f64;
            return self.accumulate(i, w, windows[i].iter().map(|m| (wts, m.clone())));
        }
        match self.mode {
            EvalMode::ClosedQuadratic => self.closed_moments(i, w, want_sq),
            EvalMode::MonteCarlo { .. } => {
                let draws = self.mc_masks.as_ref().expect("mc masks built in new");
                let wt = 1.0 / draws.len() as f64;
                self.accumulate(i, w, draws.iter().map(|ms| (wt, ms[i].clone())))
            }
            EvalMode::Enumerate => self.accumulate(i, w, enumerate_masks(self.dim(), self.probs[i])),
        }
    }

    fn accumulate(&self, i: usize, w: &[f64], masks: impl Iterator<Item = (f64, Mask)>) -> ClientMoments {
        let d = self.dim();
        let mut out = ClientMoments {
            value: 0.0,
            grad_mean: vec![0.0; d],
            grad_sq: 0.0,
        };
        let mut g = vec![0.0; d];
        let mut wm = vec![0.0; d];
        let spec = self.objective.spec();
        let samples = &self.objective.clients()[i].samples;
        for (weight, mask) in masks {
            wm.copy_from_slice(w);
            mask.apply_in_place(&mut wm);
            out.value += weight * spec.mean_loss(samples, &wm);
            spec.mean_grad_into(samples, &wm, &mut g);
            mask.apply_in_place(&mut g);
            for (a, x) in out.grad_mean.iter_mut().zip(&g) {
                *a += weight * x;
            }
            out.grad_sq += weight * dot(&g, &g);
        }
        out
    }

    fn closed_moments(&self, i: usize, w: &[f64], want_sq: bool) -> ClientMoments {
        let q = &self.objective.quadratic_parts().expect("checked quadratic in new")[i];
        let p = self.probs[i];
        let d = self.dim();
        let a = &q.a;
        // row sums of A w split into diagonal and off-diagonal parts
        let mut off = vec![0.0; d];
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                if k != j {
                    s += a[(j, k)] * w[k];
                }
            }
            off[j] = s;
        }
        let mut grad_mean = vec![0.0; d];
        let mut quad = 0.0;
        for j in 0..d {
            let hw = p * a[(j, j)] * w[j] + p * p * off[j];
            grad_mean[j] = hw - p * q.b[j];
            quad += w[j] * hw;
        }
        let lin: f64 = (0..d).map(|j| q.b[j] * w[j]).sum::<f64>() * p;
        let value = 0.5 * quad - lin + q.c;
        let mut grad_sq = 0.0;
        if want_sq {
            for j in 0..d {
                let mean = a[(j, j)] * w[j] + p * off[j] - q.b[j];
                let var: f64 = (0..d)
                    .filter(|&k| k != j)
                    .map(|k| {
                        let t = a[(j, k)] * w[k];
                        t * t
                    })
                    .sum::<f64>()
                    * p
                    * (1.0 - p);
                grad_sq += p * (mean * mean + var);
            }
        }
        ClientMoments {
            value,
            grad_mean,
            grad_sq,
        }
    }

    /// Hessian of a quadratic masked objective:
    /// `(1/N) Σ_i (p_i² A_i + (p_i − p_i²) diag(A_i))` for random plans and
    /// `(1/NR) Σ_i Σ_j M_i^j A_i M_i^j` for rolling plans.
    pub fn expected_hessian(&self) -> Result<DMatrix<f64>> {
        Ok(self.expected_quadratic()?.0)
    }

    /// `(H, g)` such that the masked quadratic is `½ wᵀHw − gᵀw + const`.
    pub(crate) fn expected_quadratic(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let parts = self.objective.quadratic_parts()?;
        let d = self.dim();
        let n = parts.len() as f64;
        let mut h = DMatrix::<f64>::zeros(d, d);
        let mut g = DVector::<f64>::zeros(d);
        for (i, q) in parts.iter().enumerate() {
            if let Some(windows) = &self.rolling {
                let r = windows[i].len() as f64;
                for m in &windows[i] {
                    for j in 0..d {
                        if !m.get(j) {
                            continue;
                        }
                        g[j] += q.b[j] / (n * r);
                        for k in 0..d {
                            if m.get(k) {
                                h[(j, k)] += q.a[(j, k)] / (n * r);
                            }
                        }
                    }
                }
            } else {
                let p = self.probs[i];
                for j in 0..d {
                    g[j] += p * q.b[j] / n;
                    for k in 0..d {
                        let e = if j == k { p } else { p * p };
                        h[(j, k)] += e * q.a[(j, k)] / n;
                    }
                }
            }
        }
        Ok((h, g))
    }

    /// Right-hand side of the bound translating stationarity of the masked
    /// objective into stationarity of `F`:
    ///
    /// `||∇F(w)||² <= 2 eps_sq + (1/N) Σ_i D_i (G² + L²||w||²)`
    ///
    /// where `D_i = d (1 − p_i)` for random plans and the exact average
    /// window deficit `(1/R) Σ_j ||1 − m_i^j||²` for rolling plans.
    pub fn stationarity_bound(&self, w: &[f64], eps_sq: f64, report: &ConstantsReport) -> Result<f64> {
        self.check_w(w)?;
        let d = self.dim() as f64;
        let n = self.objective.n_clients();
        let deficit: f64 = match &self.rolling {
            Some(windows) => windows
                .iter()
                .map(|ms| ms.iter().map(|m| m.deficit() as f64).sum::<f64>() / ms.len() as f64)
                .sum::<f64>(),
            None => self.probs.iter().map(|p| d * (1.0 - p)).sum::<f64>(),
        } / n as f64;
        let scale = report.g * report.g + report.l * report.l * dot(w, w);
        Ok(2.0 * eps_sq + deficit * scale)
    }
}

/// All `2^d` masks with their Bernoulli(`p`) probabilities; zero-probability
/// masks are skipped.
fn enumerate_masks(d: usize, p: f64) -> impl Iterator<Item = (f64, Mask)> {
    (0u64..(1u64 << d)).filter_map(move |code| {
        let mut weight = 1.0;
        let mut bits = vec![0u8; d];
        for (j, b) in bits.iter_mut().enumerate() {
            if code >> j & 1 == 1 {
                *b = 1;
                weight *= p;
            } else {
                weight *= 1.0 - p;
            }
        }
        (weight > 0.0).then(|| (weight, Mask::from_bits_unchecked(bits)))
    })
}
