use std::fmt::Write as _;

use super::MaskedObjective;
use crate::data::{ClientDataset, TargetKind};
use crate::error::{check_dim, config_err, Error, Result};
use crate::params::{dot, DomainBall, ParamVector};
use crate::rng::{tags, Stream};

/// Quantile buckets per feature (and per regression target) used by [`d_max`].
pub const TV_BUCKETS: usize = 16;

/// Heterogeneity constants measured on a masked objective.
///
/// The gradient dissimilarities are maxima over a finite set of evaluation
/// points, recorded in `eval_description`.
#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityReport {
    /// `(1/N) Σ_i E||m_i ⊙ ∇f_i(m_i ⊙ w*)||²`, when the optimum is available.
    pub sigma_star_sq: Option<f64>,
    /// Random plans: `max_w (1/N) Σ_i E||m_i ⊙ ∇f_i(m_i ⊙ w) − ∇F_p(w)||²`.
    pub zeta_p_sq: Option<f64>,
    /// Rolling plans: `max_w (1/NR) Σ_{i,j} ||m_i^j ⊙ ∇f_i(m_i^j ⊙ w) − ∇F_m(w)||²`.
    pub zeta_m_sq: Option<f64>,
    /// Same spread maximized over clients instead of averaged.
    pub zeta_max_sq: f64,
    /// Largest pairwise total-variation distance between client histograms.
    pub d_max: f64,
    pub eval_points: usize,
    pub eval_description: String,
}

impl DissimilarityReport {
    pub fn to_kv_string(&self) -> String {
        let mut s = String::from("# dissimilarity report\n");
        let opt = |x: Option<f64>| x.map_or("none".to_string(), |v| format!("{v:.16e}"));
        let _ = writeln!(s, "sigma_star_sq={}", opt(self.sigma_star_sq));
        let _ = writeln!(s, "zeta_p_sq={}", opt(self.zeta_p_sq));
        let _ = writeln!(s, "zeta_m_sq={}", opt(self.zeta_m_sq));
        let _ = writeln!(s, "zeta_max_sq={:.16e}", self.zeta_max_sq);
        let _ = writeln!(s, "d_max={:.16e}", self.d_max);
        let _ = writeln!(s, "eval_points={}", self.eval_points);
        let _ = writeln!(s, "eval_description={}", self.eval_description);
        s
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let kv = crate::cli::parse_kv(text)?;
        let get = |k: &str| -> Result<&String> {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("dissimilarity report lacks `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("dissimilarity `{k}`: {e}")))
        };
        let opt = |k: &str| -> Result<Option<f64>> {
            match get(k)?.as_str() {
                "none" => Ok(None),
                _ => num(k).map(Some),
            }
        };
        Ok(Self {
            sigma_star_sq: opt("sigma_star_sq")?,
            zeta_p_sq: opt("zeta_p_sq")?,
            zeta_m_sq: opt("zeta_m_sq")?,
            zeta_max_sq: num("zeta_max_sq")?,
            d_max: num("d_max")?,
            eval_points: get("eval_points")?
                .parse()
                .map_err(|e| Error::Format(format!("dissimilarity `eval_points`: {e}")))?,
            eval_description: get("eval_description")?.clone(),
        })
    }
}

impl MaskedObjective<'_> {
    /// Gradient dissimilarity over `eval_points`, plus `d_max` of the data.
    /// `sigma_star_sq` is left empty; see [`Self::full_report`].
    pub fn zeta_hat(&self, eval_points: &[ParamVector]) -> Result<DissimilarityReport> {
        if eval_points.is_empty() {
            return Err(config_err("dissimilarity needs at least one evaluation point"));
        }
        let n = self.objective().n_clients();
        let mut avg_max = 0.0f64;
        let mut client_max = 0.0f64;
        for w in eval_points {
            check_dim(self.dim(), w.dim())?;
            let moments: Vec<_> = (0..n).map(|i| self.client_moments(i, w, true)).collect();
            let mut center = vec![0.0; self.dim()];
            for m in &moments {
                for (c, g) in center.iter_mut().zip(&m.grad_mean) {
                    *c += g / n as f64;
                }
            }
            let cc = dot(&center, &center);
            let mut sum = 0.0;
            for m in &moments {
                let spread = (m.grad_sq - 2.0 * dot(&m.grad_mean, &center) + cc).max(0.0);
                sum += spread;
                client_max = client_max.max(spread);
            }
            avg_max = avg_max.max(sum / n as f64);
        }
        let rolling = self.rolling_masks().is_some();
        Ok(DissimilarityReport {
            sigma_star_sq: None,
            zeta_p_sq: (!rolling).then_some(avg_max),
            zeta_m_sq: rolling.then_some(avg_max),
            zeta_max_sq: client_max,
            d_max: d_max(self.objective().clients())?,
            eval_points: eval_points.len(),
            eval_description: format!("{} supplied points, mode {:?}", eval_points.len(), self.mode()),
        })
    }

    /// [`Self::zeta_hat`] with `sigma_star_sq` filled in for convex objectives.
    pub fn full_report(&self, eval_points: &[ParamVector], ball: &DomainBall) -> Result<DissimilarityReport> {
        let mut report = self.zeta_hat(eval_points)?;
        if self.objective().spec().is_convex() {
            report.sigma_star_sq = Some(self.sigma_star(ball)?);
        }
        Ok(report)
    }
}

/// Evaluation set for [`MaskedObjective::zeta_hat`]: the given trajectory
/// points followed by `n_boundary` uniform points on the sphere of radius W.
pub fn default_eval_points(
    trajectory: &[ParamVector],
    ball: &DomainBall,
    dim: usize,
    n_boundary: usize,
    seed: u64,
) -> Vec<ParamVector> {
    let mut rng = Stream::new(seed).child(tags::EVAL).child(1).rng();
    let mut out: Vec<ParamVector> = trajectory.to_vec();
    for t in 0..n_boundary {
        let v = crate::data::ball_point(dim, ball, 2 * t + 1, &mut rng);
        out.push(ParamVector::from_vec_unchecked(v));
    }
    out
}

/// Largest pairwise total-variation distance between clients.
///
/// Each client is summarized per feature by the joint histogram of
/// (feature bucket, label cell), using `TV_BUCKETS` quantile buckets of the
/// pooled feature values. Labels are the two classes for classification
/// and `TV_BUCKETS` pooled quantile buckets of the target for regression.
/// The distance between two clients is the largest per-feature TV distance.
pub fn d_max(clients: &[ClientDataset]) -> Result<f64> {
    let first = clients.first().ok_or_else(|| config_err("d_max needs at least one client"))?;
    if clients.iter().any(|c| c.is_empty()) {
        return Err(config_err("d_max needs nonempty datasets"));
    }
    let d = first.feature_dim();
    let classification = first.generator.target == TargetKind::Classification;

    let label_cells: Vec<Vec<usize>> = if classification {
        clients
            .iter()
            .map(|c| c.samples.iter().map(|s| usize::from(s.target > 0.0)).collect())
            .collect()
    } else {
        let edges = quantile_edges(clients.iter().flat_map(|c| c.samples.iter().map(|s| s.target)));
        clients
            .iter()
            .map(|c| c.samples.iter().map(|s| bucket(&edges, s.target)).collect())
            .collect()
    };
    let n_labels = if classification { 2 } else { TV_BUCKETS };

    let mut worst = 0.0f64;
    for f in 0..d {
        let edges = quantile_edges(clients.iter().flat_map(|c| c.samples.iter().map(move |s| s.features[f])));
        let hists: Vec<Vec<f64>> = clients
            .iter()
            .zip(&label_cells)
            .map(|(c, labels)| {
                let mut h = vec![0.0; TV_BUCKETS * n_labels];
                let w = 1.0 / c.len() as f64;
                for (s, &l) in c.samples.iter().zip(labels) {
                    h[bucket(&edges, s.features[f]) * n_labels + l] += w;
                }
                h
            })
            .collect();
        for a in 0..hists.len() {
            for b in a + 1..hists.len() {
                let tv = 0.5 * hists[a].iter().zip(&hists[b]).map(|(x, y)| (x - y).abs()).sum::<f64>();
                worst = worst.max(tv);
            }
        }
    }
    Ok(worst.min(1.0))
}

fn quantile_edges(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    (1..TV_BUCKETS).map(|k| v[(k * v.len() / TV_BUCKETS).min(v.len() - 1)]).collect()
}

fn bucket(edges: &[f64], x: f64) -> usize {
    edges.partition_point(|&e| e <= x)
}
