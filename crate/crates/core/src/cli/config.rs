//! Experiment files: TOML with a strict schema.
//!
//! ```toml
//! [objective]
//! kind = "quadratic"      # quadratic | logistic | mlp
//! ridge = 0.1
//!
//! [data]
//! clients = 4
//! samples = 100
//! dim = 10
//! heterogeneity = 0.5
//! seed = 1
//!
//! [plan]
//! mode = "random"         # random | rolling | full
//! p = 0.5                 # one value or one per client
//!
//! [trainer]
//! K = 5
//! R = 200
//! eta = "thm1"            # number or thm1..thm4 / stability
//! W = 10.0
//! seed = 7
//! record_every = 10
//!
//! [output]
//! dir = "runs/example"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{GenOptions, ObjectiveKind, ObjectiveSpec};
use crate::error::{config_err, Error, Result};
use crate::masking::MaskPlan;
use crate::oracle::EvalMode;
use crate::params::DomainBall;
use crate::trainer::{StepSize, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub objective: ObjectiveSection,
    pub data: DataSection,
    pub plan: PlanSection,
    pub trainer: TrainerSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<ConstantsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability: Option<StabilitySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    pub kind: String,
    #[serde(default)]
    pub ridge: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub clients: usize,
    pub samples: usize,
    pub dim: usize,
    #[serde(default)]
    pub heterogeneity: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_shift: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_separation: Option<f64>,
}

/// A scalar applied to every client or one value per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerClient<T> {
    One(T),
    Each(Vec<T>),
}

impl<T: Clone> PerClient<T> {
    pub fn expand(&self, n: usize) -> Vec<T> {
        match self {
            PerClient::One(v) => vec![v.clone(); n],
            PerClient::Each(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<PerClient<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<PerClient<usize>>,
    /// Rounds per epoch; must agree with `trainer.R` when given.
    #[serde(default, rename = "R", skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaSetting {
    Value(f64),
    Preset(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    #[serde(rename = "K")]
    pub local_steps: usize,
    #[serde(rename = "R")]
    pub rounds: usize,
    #[serde(default = "one", rename = "T")]
    pub epochs: usize,
    pub eta: EtaSetting,
    #[serde(rename = "W")]
    pub radius: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub record_every: usize,
    /// auto | enum | closed | mc
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_samples: Option<usize>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsSection {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_trials() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// p | s | K | R | T | eta | heterogeneity
    pub param: String,
    pub values: Vec<f64>,
    #[serde(default = "one")]
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySection {
    pub n: Vec<usize>,
    #[serde(default = "one")]
    pub seeds: usize,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
}

fn default_test_samples() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

pub const SWEEP_PARAMS: [&str; 7] = ["p", "s", "K", "R", "T", "eta", "heterogeneity"];

impl ExperimentConfig {
    /// Parses and validates a config.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.objective_spec()?.validate()?;
        let d = &self.data;
        if d.clients < 1 || d.samples < 1 || d.dim < 1 {
            return Err(config_err("data.clients, data.samples and data.dim must be at least 1"));
        }
        if !(0.0..=1.0).contains(&d.heterogeneity) {
            return Err(config_err(format!("data.heterogeneity = {} must lie in [0, 1]", d.heterogeneity)));
        }
        let model_dim = self.model_dim()?;
        self.mask_plan()?.validate(d.clients, model_dim)?;
        let t = &self.trainer;
        if t.local_steps < 1 || t.rounds < 1 || t.epochs < 1 {
            return Err(config_err("trainer.K, trainer.R and trainer.T must be at least 1"));
        }
        if self.plan.mode != "rolling" && t.epochs != 1 {
            return Err(config_err("trainer.T must be 1 unless plan.mode = \"rolling\""));
        }
        if let Some(r) = self.plan.rounds {
            if r != t.rounds {
                return Err(config_err(format!("plan.R = {r} differs from trainer.R = {}", t.rounds)));
            }
        }
        DomainBall::new(t.radius).map_err(|_| config_err(format!("trainer.W = {} must be positive", t.radius)))?;
        self.step_size()?;
        self.eval_mode()?;
        if let Some(c) = &self.constants {
            if c.trials < 1 {
                return Err(config_err("constants.trials must be at least 1"));
            }
        }
        if let Some(s) = &self.sweep {
            if !SWEEP_PARAMS.contains(&s.param.as_str()) {
                return Err(config_err(format!(
                    "sweep.param = \"{}\" is not one of {}",
                    s.param,
                    SWEEP_PARAMS.join(", ")
                )));
            }
            if s.values.is_empty() {
                return Err(config_err("sweep.values must not be empty"));
            }
            if s.seeds < 1 {
                return Err(config_err("sweep.seeds must be at least 1"));
            }
            for (c, &v) in s.values.iter().enumerate() {
                self.with_sweep_value(&s.param, v)
                    .map_err(|e| config_err(format!("sweep.values[{c}]: {e}")))?;
            }
        }
        if let Some(s) = &self.stability {
            if s.n.is_empty() || s.n.contains(&0) {
                return Err(config_err("stability.n must be a nonempty list of positive sizes"));
            }
            if s.seeds < 1 || s.test_samples < 1 {
                return Err(config_err("stability.seeds and stability.test_samples must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn objective_spec(&self) -> Result<ObjectiveSpec> {
        let o = &self.objective;
        let spec = match o.kind.as_str() {
            "quadratic" => ObjectiveSpec::quadratic(o.ridge),
            "logistic" => ObjectiveSpec::logistic(o.ridge),
            "mlp" => ObjectiveSpec::mlp(
                o.hidden.ok_or_else(|| config_err("objective.hidden is required for kind = \"mlp\""))?,
                o.ridge,
            ),
            other => {
                return Err(config_err(format!(
                    "objective.kind = \"{other}\" is not one of quadratic, logistic, mlp"
                )))
            }
        };
        if o.hidden.is_some() && spec.kind != ObjectiveKind::Mlp {
            return Err(config_err("objective.hidden only applies to kind = \"mlp\""));
        }
        Ok(spec)
    }

    pub fn model_dim(&self) -> Result<usize> {
        Ok(self.objective_spec()?.param_dim(self.data.dim))
    }

    pub fn gen_options(&self) -> GenOptions {
        let base = GenOptions::default();
        GenOptions {
            noise: self.data.noise.unwrap_or(base.noise),
            feature_scale: self.data.feature_scale.unwrap_or(base.feature_scale),
            max_shift: self.data.max_shift.unwrap_or(base.max_shift),
            class_separation: self.data.class_separation.unwrap_or(base.class_separation),
        }
    }

    pub fn mask_plan(&self) -> Result<MaskPlan> {
        let n = self.data.clients;
        let plan = match self.plan.mode.as_str() {
            "full" => {
                if self.plan.p.is_some() || self.plan.s.is_some() {
                    return Err(config_err("plan.p and plan.s do not apply to mode = \"full\""));
                }
                MaskPlan::Full
            }
            "random" => {
                let p = self
                    .plan
                    .p
                    .as_ref()
                    .ok_or_else(|| config_err("plan.p is required for mode = \"random\""))?;
                if self.plan.s.is_some() {
                    return Err(config_err("plan.s does not apply to mode = \"random\""));
                }
                MaskPlan::Random { probs: p.expand(n) }
            }
            "rolling" => {
                let s = self
                    .plan
                    .s
                    .as_ref()
                    .ok_or_else(|| config_err("plan.s is required for mode = \"rolling\""))?;
                if self.plan.p.is_some() {
                    return Err(config_err("plan.p does not apply to mode = \"rolling\""));
                }
                MaskPlan::Rolling {
                    sizes: s.expand(n),
                    rounds_per_epoch: self.trainer.rounds,
                }
            }
            other => {
                return Err(config_err(format!(
                    "plan.mode = \"{other}\" is not one of random, rolling, full"
                )))
            }
        };
        Ok(plan)
    }

    pub fn step_size(&self) -> Result<StepSize> {
        match &self.trainer.eta {
            EtaSetting::Value(v) if v.is_finite() && *v >= 0.0 => Ok(StepSize::Constant(*v)),
            EtaSetting::Value(v) => Err(config_err(format!("trainer.eta = {v} must be a nonnegative number"))),
            EtaSetting::Preset(name) => StepSize::from_name(name).ok_or_else(|| {
                config_err(format!(
                    "trainer.eta = \"{name}\" is not a number or one of thm1, thm2, thm3, thm4, stability"
                ))
            }),
        }
    }

    pub fn eval_mode(&self) -> Result<Option<EvalMode>> {
        let samples = self.trainer.mc_samples.unwrap_or(256);
        Ok(match self.trainer.eval.as_deref() {
            None | Some("auto") => None,
            Some("enum") => Some(EvalMode::Enumerate),
            Some("closed") => Some(EvalMode::ClosedQuadratic),
            Some("mc") => Some(EvalMode::MonteCarlo {
                samples,
                seed: self.trainer.seed,
            }),
            Some(other) => {
                return Err(config_err(format!(
                    "trainer.eval = \"{other}\" is not one of auto, enum, closed, mc"
                )))
            }
        })
    }

    pub fn constants_trials(&self) -> usize {
        self.constants.as_ref().map_or(default_trials(), |c| c.trials)
    }

    pub fn constants_seed(&self) -> u64 {
        self.constants.as_ref().and_then(|c| c.seed).unwrap_or(self.data.seed)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.trainer;
        let mut cfg = TrainConfig::new(
            self.mask_plan()?,
            t.local_steps,
            t.rounds,
            t.epochs,
            self.step_size()?,
            DomainBall::new(t.radius)?,
            t.seed,
        );
        cfg.record_every = t.record_every;
        cfg.eval_mode = self.eval_mode()?;
        Ok(cfg)
    }

    /// Copy of this config with the sweep parameter set to `value`.
    pub fn with_sweep_value(&self, param: &str, value: f64) -> Result<Self> {
        let mut c = self.clone();
        let as_count = |v: f64, name: &str| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(config_err(format!("{name} = {v} must be a positive integer")))
            }
        };
        match param {
            "p" => {
                if c.plan.mode == "full" {
                    c.plan.mode = "random".into();
                }
                c.plan.p = Some(PerClient::One(value));
            }
            "s" => c.plan.s = Some(PerClient::One(as_count(value, "plan.s")?)),
            "K" => c.trainer.local_steps = as_count(value, "trainer.K")?,
            "R" => {
                c.trainer.rounds = as_count(value, "trainer.R")?;
                c.plan.rounds = None;
            }
            "T" => c.trainer.epochs = as_count(value, "trainer.T")?,
            "eta" => c.trainer.eta = EtaSetting::Value(value),
            "heterogeneity" => c.data.heterogeneity = value,
            other => return Err(config_err(format!("unknown sweep parameter `{other}`"))),
        }
        c.sweep = None;
        c.validate()?;
        Ok(c)
    }
}
