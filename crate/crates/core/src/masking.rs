//! Sub-model selection: Bernoulli masks, rolling windows and epoch shuffles.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{config_err, Result};
use crate::params::Mask;
use crate::rng::StreamRng;

/// How clients select their sub-models.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskPlan {
    /// Every client trains the whole model (random masking with `p_i = 1`).
    Full,
    /// Client `i` keeps each coordinate independently with probability `probs[i]`.
    Random { probs: Vec<f64> },
    /// Client `i` cycles through `rounds_per_epoch` windows of `sizes[i]`
    /// contiguous coordinates, in an order reshuffled every epoch.
    Rolling {
        sizes: Vec<usize>,
        rounds_per_epoch: usize,
    },
}

impl MaskPlan {
    pub fn uniform_random(n_clients: usize, p: f64) -> Self {
        MaskPlan::Random {
            probs: vec![p; n_clients],
        }
    }

    pub fn uniform_rolling(n_clients: usize, size: usize, rounds_per_epoch: usize) -> Self {
        MaskPlan::Rolling {
            sizes: vec![size; n_clients],
            rounds_per_epoch,
        }
    }

    pub fn is_rolling(&self) -> bool {
        matches!(self, MaskPlan::Rolling { .. })
    }

    /// Checks the plan against `n_clients` clients and model dimension `dim`.
    pub fn validate(&self, n_clients: usize, dim: usize) -> Result<()> {
        match self {
            MaskPlan::Full => Ok(()),
            MaskPlan::Random { probs } => {
                if probs.len() != n_clients {
                    return Err(config_err(format!(
                        "plan.p has {} entries but there are {n_clients} clients",
                        probs.len()
                    )));
                }
                validate_probs(probs)
            }
            MaskPlan::Rolling {
                sizes,
                rounds_per_epoch,
            } => {
                if sizes.len() != n_clients {
                    return Err(config_err(format!(
                        "plan.sizes has {} entries but there are {n_clients} clients",
                        sizes.len()
                    )));
                }
                if *rounds_per_epoch < 1 {
                    return Err(config_err("plan.rounds_per_epoch must be at least 1"));
                }
                for (i, &s) in sizes.iter().enumerate() {
                    if s < 1 || s > dim {
                        return Err(config_err(format!(
                            "plan.sizes[{i}] = {s} must lie in [1, {dim}]"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// Per-client keep probabilities. Rolling plans report the fraction of
    /// coordinates each window keeps, `s_i / d`.
    pub fn keep_fractions(&self, n_clients: usize, dim: usize) -> Vec<f64> {
        match self {
            MaskPlan::Full => vec![1.0; n_clients],
            MaskPlan::Random { probs } => probs.clone(),
            MaskPlan::Rolling { sizes, .. } => {
                sizes.iter().map(|&s| s as f64 / dim as f64).collect()
            }
        }
    }

    /// Canonical rolling masks for every client (`[client][window]`).
    pub fn rolling_masks(&self, dim: usize) -> Result<Vec<Vec<Mask>>> {
        match self {
            MaskPlan::Rolling {
                sizes,
                rounds_per_epoch,
            } => sizes
                .iter()
                .map(|&s| build_rolling_masks(dim, s, *rounds_per_epoch))
                .collect(),
            _ => Err(config_err("rolling masks requested from a non-rolling plan")),
        }
    }
}

pub(crate) fn validate_probs(probs: &[f64]) -> Result<()> {
    for (i, &p) in probs.iter().enumerate() {
        if !(p > 0.0 && p <= 1.0) {
            return Err(config_err(format!(
                "plan.p[{i}] = {p} must lie in (0, 1]"
            )));
        }
    }
    Ok(())
}

/// Draws one mask per client; coordinate `j` of mask `i` is 1 with
/// probability `probs[i]`. Clients consume `rng` in ascending order.
///
/// A mask with `p_i < 1` may come out empty (probability `(1 - p_i)^d`); the
/// draw is not conditioned on being non-empty so that its law stays exactly
/// Bernoulli.
pub fn sample_bernoulli_masks(probs: &[f64], dim: usize, rng: &mut StreamRng) -> Result<Vec<Mask>> {
    validate_probs(probs)?;
    Ok(probs
        .iter()
        .map(|&p| {
            let bits = (0..dim).map(|_| u8::from(rng.gen::<f64>() < p)).collect();
            Mask::from_bits_unchecked(bits)
        })
        .collect())
}

/// The `rounds` cyclic windows of a client with sub-model size `size`.
///
/// Window `j` (0-based) keeps exactly `size` consecutive coordinates starting
/// at `(j * ceil(dim / rounds)) mod dim`, wrapping around the end. When
/// `rounds * size >= dim` the windows jointly cover every coordinate.
pub fn build_rolling_masks(dim: usize, size: usize, rounds: usize) -> Result<Vec<Mask>> {
    if dim == 0 {
        return Err(config_err("model dimension must be positive"));
    }
    if size < 1 || size > dim {
        return Err(config_err(format!("sub-model size {size} must lie in [1, {dim}]")));
    }
    if rounds < 1 {
        return Err(config_err("rounds per epoch must be at least 1"));
    }
    let stride = dim.div_ceil(rounds);
    Ok((0..rounds)
        .map(|j| {
            let start = (j * stride) % dim;
            let mut bits = vec![0u8; dim];
            for k in 0..size {
                bits[(start + k) % dim] = 1;
            }
            Mask::from_bits_unchecked(bits)
        })
        .collect())
}

/// A bijection on `0..len`, stored as `sigma[r] = index assigned to round r`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    sigma: Vec<usize>,
}

impl Permutation {
    pub fn identity(len: usize) -> Self {
        Self {
            sigma: (0..len).collect(),
        }
    }

    pub fn from_vec(sigma: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; sigma.len()];
        for &s in &sigma {
            if s >= sigma.len() || seen[s] {
                return Err(config_err(format!("{sigma:?} is not a permutation")));
            }
            seen[s] = true;
        }
        Ok(Self { sigma })
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn get(&self, r: usize) -> usize {
        self.sigma[r]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.sigma
    }
}

/// Uniform random permutation of `0..len` (Fisher–Yates).
pub fn shuffle_permutation(len: usize, rng: &mut StreamRng) -> Permutation {
    let mut sigma: Vec<usize> = (0..len).collect();
    sigma.shuffle(rng);
    Permutation { sigma }
}
