//! Synthetic heterogeneous client data, loss oracles and problem constants.

mod constants;
mod io;
mod objective;

pub(crate) use constants::ball_point;
pub use constants::{estimate_constants, ConstantsReport};
pub use io::{
    decode_datasets, encode_datasets, read_datasets, write_datasets, DATASET_MAGIC, DATASET_VERSION,
};
pub use objective::{
    gradient, loss, stochastic_gradient, Objective, ObjectiveKind, ObjectiveSpec, QuadraticParts,
};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, Result};
use crate::rng::{tags, Stream, StreamRng};

/// One data point. For classification the target is a label in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Regression,
    Classification,
}

/// Distribution a client draws its samples from.
///
/// Features are `mean_shift + feature_scale * z` with `z ~ N(0, I)`.
/// Regression targets are `<a, teacher> + noise * eps`. Classification
/// labels are `+1` with probability `(1 + label_bias) / 2` and shift the
/// features by `label * class_separation * feature_scale * teacher`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientGenerator {
    pub target: TargetKind,
    pub mean_shift: Vec<f64>,
    pub label_bias: f64,
    pub teacher: Vec<f64>,
    pub feature_scale: f64,
    pub noise: f64,
    pub class_separation: f64,
}

impl ClientGenerator {
    pub fn dim(&self) -> usize {
        self.mean_shift.len()
    }

    /// Draws one i.i.d. sample.
    pub fn sample(&self, rng: &mut StreamRng) -> Sample {
        let d = self.dim();
        match self.target {
            TargetKind::Regression => {
                let features: Vec<f64> = (0..d)
                    .map(|j| self.mean_shift[j] + self.feature_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let clean: f64 = features.iter().zip(&self.teacher).map(|(a, t)| a * t).sum();
                let eps: f64 = rng.sample(StandardNormal);
                Sample {
                    features,
                    target: clean + self.noise * eps,
                }
            }
            TargetKind::Classification => {
                let positive = rng.gen::<f64>() < 0.5 * (1.0 + self.label_bias);
                let y = if positive { 1.0 } else { -1.0 };
                let features = (0..d)
                    .map(|j| {
                        let z: f64 = rng.sample(StandardNormal);
                        self.mean_shift[j]
                            + self.feature_scale * (z + y * self.class_separation * self.teacher[j])
                    })
                    .collect();
                Sample { features, target: y }
            }
        }
    }
}

/// The training samples of one client together with their generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub samples: Vec<Sample>,
    pub generator: ClientGenerator,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.generator.dim()
    }
}

/// Knobs of the synthetic generator beyond the heterogeneity level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenOptions {
    /// Standard deviation of the regression target noise.
    pub noise: f64,
    /// Standard deviation of every feature.
    pub feature_scale: f64,
    /// Norm of a client's feature-mean shift at heterogeneity 1, in units of
    /// `feature_scale`.
    pub max_shift: f64,
    pub class_separation: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            noise: 0.1,
            feature_scale: 1.0,
            max_shift: 1.0,
            class_separation: 1.0,
        }
    }
}

/// [`gen_clients_with`] using [`GenOptions::default`].
pub fn gen_clients(
    n_clients: usize,
    n_samples: usize,
    dim: usize,
    heterogeneity: f64,
    kind: ObjectiveKind,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    gen_clients_with(n_clients, n_samples, dim, heterogeneity, kind, seed, &GenOptions::default())
}

/// Generates `n_clients` datasets of `n_samples` points with feature
/// dimension `dim`.
///
/// `heterogeneity` in `[0, 1]` scales every client's feature-mean shift and,
/// for classification, the skew of its label proportions. At 0 all clients
/// share one distribution.
pub fn gen_clients_with(
    n_clients: usize,
    n_samples: usize,
    dim: usize,
    heterogeneity: f64,
    kind: ObjectiveKind,
    seed: u64,
    opts: &GenOptions,
) -> Result<Vec<ClientDataset>> {
    if n_clients < 1 || n_samples < 1 || dim < 1 {
        return Err(config_err(format!(
            "data sizes must be positive (clients={n_clients}, samples={n_samples}, dim={dim})"
        )));
    }
    if !(0.0..=1.0).contains(&heterogeneity) {
        return Err(config_err(format!("data.heterogeneity = {heterogeneity} must lie in [0, 1]")));
    }
    if !(opts.noise >= 0.0 && opts.feature_scale > 0.0 && opts.max_shift >= 0.0) {
        return Err(config_err("generator options must be non-negative with positive feature_scale"));
    }
    let root = Stream::new(seed).child(tags::DATA);
    let teacher = {
        let mut rng = root.child(0).rng();
        let mut t: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut t);
        t
    };
    let target = match kind {
        ObjectiveKind::Logistic => TargetKind::Classification,
        ObjectiveKind::Quadratic | ObjectiveKind::Mlp => TargetKind::Regression,
    };
    let mut out = Vec::with_capacity(n_clients);
    for i in 0..n_clients {
        let mut prng = root.path(&[1, i as u64]).rng();
        let mut direction: Vec<f64> = (0..dim).map(|_| prng.sample(StandardNormal)).collect();
        normalize(&mut direction);
        let skew: f64 = prng.gen_range(-1.0..=1.0);
        let (mean_shift, label_bias) = if heterogeneity == 0.0 {
            (vec![0.0; dim], 0.0)
        } else {
            let mag = heterogeneity * opts.max_shift * opts.feature_scale;
            (direction.iter().map(|u| u * mag).collect(), heterogeneity * skew)
        };
        let generator = ClientGenerator {
            target,
            mean_shift,
            label_bias,
            teacher: teacher.clone(),
            feature_scale: opts.feature_scale,
            noise: opts.noise,
            class_separation: opts.class_separation,
        };
        let mut srng = root.path(&[2, i as u64]).rng();
        let samples = (0..n_samples).map(|_| generator.sample(&mut srng)).collect();
        out.push(ClientDataset {
            client_id: i,
            samples,
            generator,
        });
    }
    Ok(out)
}

/// Fresh held-out sets drawn from each client's own generator.
pub fn draw_test_sets(clients: &[ClientDataset], n_samples: usize, seed: u64) -> Result<Vec<ClientDataset>> {
    if n_samples < 1 {
        return Err(config_err("test sets need at least one sample"));
    }
    let root = Stream::new(seed).child(tags::EVAL);
    Ok(clients
        .iter()
        .map(|c| {
            let mut rng = root.child(c.client_id as u64).rng();
            ClientDataset {
                client_id: c.client_id,
                samples: (0..n_samples).map(|_| c.generator.sample(&mut rng)).collect(),
                generator: c.generator.clone(),
            }
        })
        .collect())
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}
