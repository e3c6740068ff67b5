//! On-average stability and generalization gaps.
//!
//! A neighbouring dataset replaces one sample of one client by a fresh draw
//! from the same client's generator. [`coupled_run`] trains on both datasets
//! with the same master seed, so masks, permutations and sample indices
//! coincide and only the replaced sample's contents differ.

use rayon::prelude::*;

use crate::data::{
    draw_test_sets, estimate_constants, gen_clients_with, ClientDataset, ConstantsReport, GenOptions, Objective,
    ObjectiveSpec, Sample,
};
use crate::error::{config_err, Error, Result};
use crate::params::ParamVector;
use crate::rng::{derive_seed, tags, Stream, StreamRng};
use crate::trainer::{run, TrainConfig};

/// Fresh evaluation samples averaged in the loss divergence.
pub const LOSS_EVAL_DRAWS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborPair {
    pub base: Vec<ClientDataset>,
    pub perturbed: Vec<ClientDataset>,
    pub perturbed_client: usize,
    pub perturbed_index: usize,
    pub replacement: Sample,
}

/// Replaces sample `j` of client `i` with a fresh draw from that client's
/// generator.
pub fn make_neighbor(datasets: &[ClientDataset], i: usize, j: usize, rng: &mut StreamRng) -> Result<NeighborPair> {
    let client = datasets.get(i).ok_or(Error::IndexOutOfRange {
        index: i,
        len: datasets.len(),
    })?;
    let replacement = client.generator.sample(rng);
    neighbor_with(datasets, i, j, replacement)
}

/// Neighbour whose replacement is the original sample, i.e. `perturbed == base`.
pub fn identity_neighbor(datasets: &[ClientDataset], i: usize, j: usize) -> Result<NeighborPair> {
    let client = datasets.get(i).ok_or(Error::IndexOutOfRange {
        index: i,
        len: datasets.len(),
    })?;
    let original = client
        .samples
        .get(j)
        .ok_or(Error::IndexOutOfRange {
            index: j,
            len: client.len(),
        })?
        .clone();
    neighbor_with(datasets, i, j, original)
}

fn neighbor_with(datasets: &[ClientDataset], i: usize, j: usize, replacement: Sample) -> Result<NeighborPair> {
    let mut perturbed = datasets.to_vec();
    let slot = perturbed[i].samples.get_mut(j).ok_or(Error::IndexOutOfRange {
        index: j,
        len: datasets[i].len(),
    })?;
    *slot = replacement.clone();
    Ok(NeighborPair {
        base: datasets.to_vec(),
        perturbed,
        perturbed_client: i,
        perturbed_index: j,
        replacement,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityResult {
    /// `||ŵ − ŵ'||`.
    pub param_divergence: f64,
    /// `G · ||ŵ − ŵ'||`.
    pub lipschitz_surrogate: f64,
    /// `|ℓ(ŵ; z) − ℓ(ŵ'; z)|` averaged over fresh `z` from the perturbed
    /// client's generator.
    pub loss_divergence: f64,
    pub w_hat: ParamVector,
    pub w_hat_perturbed: ParamVector,
}

/// Trains on both datasets of `pair` with `cfg` and compares the outputs.
///
/// Fails if the two runs consumed different randomness.
pub fn coupled_run(
    spec: &ObjectiveSpec,
    constants: &ConstantsReport,
    cfg: &TrainConfig,
    pair: &NeighborPair,
) -> Result<StabilityResult> {
    let base = Objective::new(*spec, pair.base.clone())?;
    let pert = Objective::new(*spec, pair.perturbed.clone())?;
    let a = run(&base, constants, cfg)?;
    let b = run(&pert, constants, cfg)?;
    if a.stream_digest != b.stream_digest {
        return Err(Error::Unsupported(
            "coupled runs consumed different randomness streams".into(),
        ));
    }
    let div = a.w_hat.distance(&b.w_hat);
    let gen = &pair.base[pair.perturbed_client].generator;
    let mut rng = Stream::new(cfg.seed).child(tags::NEIGHBOR).child(1).rng();
    let loss_div = (0..LOSS_EVAL_DRAWS)
        .map(|_| {
            let z = gen.sample(&mut rng);
            (spec.sample_loss(&a.w_hat, &z) - spec.sample_loss(&b.w_hat, &z)).abs()
        })
        .sum::<f64>()
        / LOSS_EVAL_DRAWS as f64;
    Ok(StabilityResult {
        param_divergence: div,
        lipschitz_surrogate: constants.g * div,
        loss_divergence: loss_div,
        w_hat: a.w_hat,
        w_hat_perturbed: b.w_hat,
    })
}

/// `|train loss − test loss|` per client, averaged over clients.
pub fn generalization_gap(spec: &ObjectiveSpec, w: &ParamVector, train: &[ClientDataset], test: &[ClientDataset]) -> Result<f64> {
    if train.len() != test.len() || train.is_empty() {
        return Err(config_err(format!(
            "generalization gap needs matching nonempty client lists ({} train, {} test)",
            train.len(),
            test.len()
        )));
    }
    let mut total = 0.0;
    for (tr, te) in train.iter().zip(test) {
        if tr.is_empty() || te.is_empty() {
            return Err(config_err(format!("client {} has an empty train or test set", tr.client_id)));
        }
        let l_tr = crate::data::loss(spec, tr, w)?;
        let l_te = crate::data::loss(spec, te, w)?;
        total += (l_tr - l_te).abs();
    }
    Ok(total / train.len() as f64)
}

/// A grid of coupled runs over dataset sizes and seeds.
#[derive(Debug, Clone)]
pub struct StabilitySetup {
    pub spec: ObjectiveSpec,
    pub n_clients: usize,
    pub dim: usize,
    pub heterogeneity: f64,
    pub gen: GenOptions,
    pub data_seed: u64,
    /// Template; `seed` is replaced per pair.
    pub train: TrainConfig,
    pub n_list: Vec<usize>,
    pub seeds: usize,
    pub constants_trials: usize,
    pub test_samples: usize,
    /// Replace the sample by itself (divergence must be exactly zero).
    pub identity_perturbation: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRow {
    pub seed: u64,
    pub n: usize,
    pub n_clients: usize,
    /// Mean keep probability of the plan.
    pub p: f64,
    pub divergence: f64,
    pub loss_divergence: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilitySweep {
    pub rows: Vec<StabilityRow>,
    /// `(n, mean divergence)` in the order of the n list.
    pub means: Vec<(usize, f64)>,
    /// Least-squares slope of log mean divergence against log n (`NaN` when
    /// fewer than two positive means exist).
    pub slope: f64,
}

/// One coupled pair of the grid: dataset, neighbour and trainer seed all
/// derive from `(n, seed_index)`.
pub fn stability_pair(setup: &StabilitySetup, n: usize, seed_index: usize) -> Result<StabilityRow> {
    let data_seed = derive_seed(setup.data_seed, n as u64, seed_index as u64);
    let train_seed = derive_seed(setup.train.seed, n as u64, seed_index as u64);
    let clients = gen_clients_with(
        setup.n_clients,
        n,
        setup.dim,
        setup.heterogeneity,
        setup.spec.kind,
        data_seed,
        &setup.gen,
    )?;
    let objective = Objective::new(setup.spec, clients)?;
    let probs = setup.train.plan.keep_fractions(setup.n_clients, objective.dim());
    let constants = estimate_constants(&objective, &setup.train.ball, &probs, setup.constants_trials, data_seed)?;
    let mut rng = Stream::new(data_seed).child(tags::NEIGHBOR).rng();
    let i = seed_index % setup.n_clients;
    let j = rand::Rng::gen_range(&mut rng, 0..n);
    let clients = objective.into_clients();
    let pair = if setup.identity_perturbation {
        identity_neighbor(&clients, i, j)?
    } else {
        make_neighbor(&clients, i, j, &mut rng)?
    };
    let mut cfg = setup.train.clone();
    cfg.seed = train_seed;
    cfg.metrics = false;
    let res = coupled_run(&setup.spec, &constants, &cfg, &pair)?;
    let test = draw_test_sets(&pair.base, setup.test_samples.max(1), data_seed)?;
    let gap = generalization_gap(&setup.spec, &res.w_hat, &pair.base, &test)?;
    Ok(StabilityRow {
        seed: train_seed,
        n,
        n_clients: setup.n_clients,
        p: probs.iter().sum::<f64>() / probs.len() as f64,
        divergence: res.param_divergence,
        loss_divergence: res.loss_divergence,
        gap,
    })
}

/// Runs every `(n, seed)` pair in parallel and fits the divergence slope.
pub fn run_stability_sweep(setup: &StabilitySetup) -> Result<StabilitySweep> {
    if setup.n_list.is_empty() || setup.seeds == 0 {
        return Err(config_err("stability needs a nonempty n list and at least one seed"));
    }
    let jobs: Vec<(usize, usize)> = setup
        .n_list
        .iter()
        .flat_map(|&n| (0..setup.seeds).map(move |s| (n, s)))
        .collect();
    let rows: Vec<StabilityRow> = jobs
        .par_iter()
        .map(|&(n, s)| stability_pair(setup, n, s))
        .collect::<Result<_>>()?;
    let means: Vec<(usize, f64)> = setup
        .n_list
        .iter()
        .map(|&n| {
            let ds: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.divergence).collect();
            (n, ds.iter().sum::<f64>() / ds.len() as f64)
        })
        .collect();
    let pts: Vec<(f64, f64)> = means
        .iter()
        .filter(|(_, m)| *m > 0.0)
        .map(|&(n, m)| ((n as f64).ln(), m.ln()))
        .collect();
    Ok(StabilitySweep {
        rows,
        means,
        slope: fit_slope(&pts),
    })
}

/// Ordinary least-squares slope through `(x, y)` points.
pub fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    if pts.len() < 2 {
        return f64::NAN;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_clients, ObjectiveKind};

    #[test]
    fn neighbor_differs_in_one_sample() {
        let clients = gen_clients(3, 10, 4, 0.5, ObjectiveKind::Quadratic, 2).unwrap();
        let mut rng = Stream::new(1).rng();
        let pair = make_neighbor(&clients, 1, 7, &mut rng).unwrap();
        let diffs: usize = pair
            .base
            .iter()
            .zip(&pair.perturbed)
            .map(|(a, b)| a.samples.iter().zip(&b.samples).filter(|(x, y)| x != y).count())
            .sum();
        assert_eq!(diffs, 1);
        assert_eq!(pair.perturbed[1].samples[7], pair.replacement);
        assert_eq!(pair.perturbed[1].generator, clients[1].generator);
        assert!(make_neighbor(&clients, 3, 0, &mut rng).is_err());
        assert!(make_neighbor(&clients, 0, 10, &mut rng).is_err());
    }

    #[test]
    fn identity_neighbor_is_equal() {
        let clients = gen_clients(2, 5, 3, 0.5, ObjectiveKind::Logistic, 2).unwrap();
        let pair = identity_neighbor(&clients, 1, 4).unwrap();
        assert_eq!(pair.base, pair.perturbed);
    }

    #[test]
    fn gap_of_train_against_itself_is_zero() {
        let clients = gen_clients(2, 5, 3, 0.5, ObjectiveKind::Logistic, 2).unwrap();
        let spec = ObjectiveSpec::logistic(0.1);
        let w = ParamVector::new(vec![0.3, -1.0, 0.2]).unwrap();
        assert_eq!(generalization_gap(&spec, &w, &clients, &clients).unwrap(), 0.0);
        assert!(generalization_gap(&spec, &w, &clients, &clients[..1]).is_err());
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [50.0f64, 100.0, 200.0, 400.0]
            .iter()
            .map(|n| (n.ln(), (3.0 * n.powf(-0.5)).ln()))
            .collect();
        assert!((fit_slope(&pts) + 0.5).abs() < 1e-12);
        assert!(fit_slope(&pts[..1]).is_nan());
    }
}
