use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use super::{ClientDataset, Sample};
use crate::error::{check_dim, config_err, Error, Result};
use crate::params::{dot, Mask, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectiveKind {
    /// `½(aᵀw − b)²`
    Quadratic,
    /// `log(1 + exp(−y aᵀw))`
    Logistic,
    /// One hidden tanh layer with squared loss.
    Mlp,
}

impl ObjectiveKind {
    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveKind::Quadratic => "quadratic",
            ObjectiveKind::Logistic => "logistic",
            ObjectiveKind::Mlp => "mlp",
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            ObjectiveKind::Quadratic => 0,
            ObjectiveKind::Logistic => 1,
            ObjectiveKind::Mlp => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ObjectiveKind::Quadratic),
            1 => Some(ObjectiveKind::Logistic),
            2 => Some(ObjectiveKind::Mlp),
            _ => None,
        }
    }
}

/// Per-sample loss family plus the ridge term `(λ/2)||w||²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub ridge: f64,
    /// Hidden width (mlp only).
    pub hidden: usize,
}

impl ObjectiveSpec {
    pub fn quadratic(ridge: f64) -> Self {
        Self {
            kind: ObjectiveKind::Quadratic,
            ridge,
            hidden: 0,
        }
    }

    pub fn logistic(ridge: f64) -> Self {
        Self {
            kind: ObjectiveKind::Logistic,
            ridge,
            hidden: 0,
        }
    }

    pub fn mlp(hidden: usize, ridge: f64) -> Self {
        Self {
            kind: ObjectiveKind::Mlp,
            ridge,
            hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(config_err(format!("objective.ridge = {} must be >= 0", self.ridge)));
        }
        if self.kind == ObjectiveKind::Mlp && self.hidden == 0 {
            return Err(config_err("objective.hidden must be positive for mlp"));
        }
        Ok(())
    }

    /// Model dimension for inputs of dimension `feature_dim`. The mlp stores
    /// the `hidden × feature_dim` input weights row-major followed by the
    /// `hidden` output weights.
    pub fn param_dim(&self, feature_dim: usize) -> usize {
        match self.kind {
            ObjectiveKind::Quadratic | ObjectiveKind::Logistic => feature_dim,
            ObjectiveKind::Mlp => self.hidden * feature_dim + self.hidden,
        }
    }

    pub fn is_convex(&self) -> bool {
        self.kind != ObjectiveKind::Mlp
    }

    /// Loss of one sample without the ridge term.
    pub fn data_loss(&self, w: &[f64], s: &Sample) -> f64 {
        match self.kind {
            ObjectiveKind::Quadratic => {
                let r = dot(&s.features, w) - s.target;
                0.5 * r * r
            }
            ObjectiveKind::Logistic => softplus(-s.target * dot(&s.features, w)),
            ObjectiveKind::Mlp => {
                let r = self.mlp_forward(w, &s.features) - s.target;
                0.5 * r * r
            }
        }
    }

    /// Adds `scale * ∇(data loss)` at `w` into `out`.
    pub fn add_data_grad(&self, w: &[f64], s: &Sample, scale: f64, out: &mut [f64]) {
        match self.kind {
            ObjectiveKind::Quadratic => {
                let r = scale * (dot(&s.features, w) - s.target);
                for (o, a) in out.iter_mut().zip(&s.features) {
                    *o += r * a;
                }
            }
            ObjectiveKind::Logistic => {
                let y = s.target;
                let coef = -scale * y * sigmoid(-y * dot(&s.features, w));
                for (o, a) in out.iter_mut().zip(&s.features) {
                    *o += coef * a;
                }
            }
            ObjectiveKind::Mlp => {
                let h = self.hidden;
                let din = s.features.len();
                let (u, v) = w.split_at(h * din);
                let mut act = vec![0.0; h];
                let mut pred = 0.0;
                for k in 0..h {
                    act[k] = dot(&u[k * din..(k + 1) * din], &s.features).tanh();
                    pred += v[k] * act[k];
                }
                let r = scale * (pred - s.target);
                let (gu, gv) = out.split_at_mut(h * din);
                for k in 0..h {
                    gv[k] += r * act[k];
                    let c = r * v[k] * (1.0 - act[k] * act[k]);
                    for (g, a) in gu[k * din..(k + 1) * din].iter_mut().zip(&s.features) {
                        *g += c * a;
                    }
                }
            }
        }
    }

    /// Per-sample loss including the ridge term.
    pub fn sample_loss(&self, w: &[f64], s: &Sample) -> f64 {
        self.data_loss(w, s) + 0.5 * self.ridge * dot(w, w)
    }

    fn mlp_forward(&self, w: &[f64], x: &[f64]) -> f64 {
        let h = self.hidden;
        let din = x.len();
        let (u, v) = w.split_at(h * din);
        (0..h).map(|k| v[k] * dot(&u[k * din..(k + 1) * din], x).tanh()).sum()
    }

    /// Mean loss over `samples` plus ridge.
    pub(crate) fn mean_loss(&self, samples: &[Sample], w: &[f64]) -> f64 {
        let data: f64 = samples.iter().map(|s| self.data_loss(w, s)).sum::<f64>() / samples.len() as f64;
        data + 0.5 * self.ridge * dot(w, w)
    }

    /// Writes the gradient of [`Self::mean_loss`] into `out`.
    pub(crate) fn mean_grad_into(&self, samples: &[Sample], w: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let scale = 1.0 / samples.len() as f64;
        for s in samples {
            self.add_data_grad(w, s, scale, out);
        }
        for (o, x) in out.iter_mut().zip(w) {
            *o += self.ridge * x;
        }
    }

    /// Writes the single-sample gradient (plus ridge) into `out`.
    pub(crate) fn sample_grad_into(&self, s: &Sample, w: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        self.add_data_grad(w, s, 1.0, out);
        for (o, x) in out.iter_mut().zip(w) {
            *o += self.ridge * x;
        }
    }
}

fn check_dataset(spec: &ObjectiveSpec, dataset: &ClientDataset, w: &ParamVector) -> Result<()> {
    if dataset.is_empty() {
        return Err(config_err(format!("client {} has no samples", dataset.client_id)));
    }
    check_dim(spec.param_dim(dataset.feature_dim()), w.dim())
}

/// Empirical loss of `dataset` at `w`, ridge included.
pub fn loss(spec: &ObjectiveSpec, dataset: &ClientDataset, w: &ParamVector) -> Result<f64> {
    check_dataset(spec, dataset, w)?;
    Ok(spec.mean_loss(&dataset.samples, w))
}

/// Exact gradient of [`loss`].
pub fn gradient(spec: &ObjectiveSpec, dataset: &ClientDataset, w: &ParamVector) -> Result<ParamVector> {
    check_dataset(spec, dataset, w)?;
    let mut out = vec![0.0; w.dim()];
    spec.mean_grad_into(&dataset.samples, w, &mut out);
    ParamVector::new(out)
}

/// Gradient of sample `index`'s loss plus ridge. Its mean over all indices
/// is [`gradient`].
pub fn stochastic_gradient(
    spec: &ObjectiveSpec,
    dataset: &ClientDataset,
    w: &ParamVector,
    index: usize,
) -> Result<ParamVector> {
    check_dataset(spec, dataset, w)?;
    let s = dataset.samples.get(index).ok_or(Error::IndexOutOfRange {
        index,
        len: dataset.len(),
    })?;
    let mut out = vec![0.0; w.dim()];
    spec.sample_grad_into(s, w, &mut out);
    ParamVector::new(out)
}

/// `f(w) = ½ wᵀ A w − bᵀ w + c` for a quadratic client.
#[derive(Debug, Clone)]
pub struct QuadraticParts {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: f64,
}

/// A loss family together with the datasets of all clients:
/// `F(w) = (1/N) Σ_i f_i(w)`.
#[derive(Debug, Clone)]
pub struct Objective {
    spec: ObjectiveSpec,
    clients: Vec<ClientDataset>,
    dim: usize,
    quad: OnceLock<Vec<QuadraticParts>>,
}

impl Objective {
    pub fn new(spec: ObjectiveSpec, clients: Vec<ClientDataset>) -> Result<Self> {
        spec.validate()?;
        let first = clients.first().ok_or_else(|| config_err("at least one client is required"))?;
        let fdim = first.feature_dim();
        for c in &clients {
            if c.is_empty() {
                return Err(config_err(format!("client {} has no samples", c.client_id)));
            }
            check_dim(fdim, c.feature_dim())?;
            for s in &c.samples {
                check_dim(fdim, s.features.len())?;
                if !s.target.is_finite() || s.features.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("sample of client {}", c.client_id),
                    });
                }
            }
        }
        Ok(Self {
            dim: spec.param_dim(fdim),
            spec,
            clients,
            quad: OnceLock::new(),
        })
    }

    pub fn spec(&self) -> &ObjectiveSpec {
        &self.spec
    }

    pub fn clients(&self) -> &[ClientDataset] {
        &self.clients
    }

    pub fn into_clients(self) -> Vec<ClientDataset> {
        self.clients
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    /// Model dimension `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn local_loss(&self, i: usize, w: &[f64]) -> f64 {
        self.spec.mean_loss(&self.clients[i].samples, w)
    }

    pub fn local_grad_into(&self, i: usize, w: &[f64], out: &mut [f64]) {
        self.spec.mean_grad_into(&self.clients[i].samples, w, out)
    }

    pub fn local_grad(&self, i: usize, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.local_grad_into(i, w, &mut out);
        out
    }

    /// `f_i(m ⊙ w)`.
    pub fn masked_local_loss(&self, i: usize, mask: &Mask, w: &[f64]) -> f64 {
        let mut wm = w.to_vec();
        mask.apply_in_place(&mut wm);
        self.local_loss(i, &wm)
    }

    /// `m ⊙ ∇f_i(m ⊙ w)` written into `out`.
    pub fn masked_local_grad_into(&self, i: usize, mask: &Mask, w: &[f64], out: &mut [f64]) {
        let mut wm = w.to_vec();
        mask.apply_in_place(&mut wm);
        self.local_grad_into(i, &wm, out);
        mask.apply_in_place(out);
    }

    /// `F(w)`.
    pub fn global_loss(&self, w: &[f64]) -> f64 {
        (0..self.n_clients()).map(|i| self.local_loss(i, w)).sum::<f64>() / self.n_clients() as f64
    }

    /// `∇F(w)`, reduced in ascending client order.
    pub fn global_grad(&self, w: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        let mut g = vec![0.0; self.dim];
        for i in 0..self.n_clients() {
            self.local_grad_into(i, w, &mut g);
            for (a, x) in acc.iter_mut().zip(&g) {
                *a += x;
            }
        }
        let n = self.n_clients() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Exact `(A_i, b_i, c_i)` for every client of a quadratic objective.
    pub fn quadratic_parts(&self) -> Result<&[QuadraticParts]> {
        if self.spec.kind != ObjectiveKind::Quadratic {
            return Err(Error::Unsupported(format!(
                "quadratic decomposition of a {} objective",
                self.spec.kind.name()
            )));
        }
        Ok(self.quad.get_or_init(|| {
            self.clients
                .iter()
                .map(|c| {
                    let d = self.dim;
                    let n = c.len() as f64;
                    let mut a = DMatrix::<f64>::zeros(d, d);
                    let mut b = DVector::<f64>::zeros(d);
                    let mut cc = 0.0;
                    for s in &c.samples {
                        let x = DVector::from_column_slice(&s.features);
                        a.ger(1.0 / n, &x, &x, 1.0);
                        b.axpy(s.target / n, &x, 1.0);
                        cc += 0.5 * s.target * s.target / n;
                    }
                    for j in 0..d {
                        a[(j, j)] += self.spec.ridge;
                    }
                    QuadraticParts { a, b, c: cc }
                })
                .collect()
        }))
    }

    /// Upper bound on the Hessian norm of client `i` valid over all of `R^d`
    /// (`None` for the mlp).
    pub fn smoothness_bound(&self, i: usize) -> Option<f64> {
        let weight = match self.spec.kind {
            ObjectiveKind::Quadratic => 1.0,
            ObjectiveKind::Logistic => 0.25,
            ObjectiveKind::Mlp => return None,
        };
        let d = self.dim;
        let c = &self.clients[i];
        let mut a = DMatrix::<f64>::zeros(d, d);
        for s in &c.samples {
            let x = DVector::from_column_slice(&s.features);
            a.ger(weight / c.len() as f64, &x, &x, 1.0);
        }
        let top = a.symmetric_eigenvalues().max();
        Some(top + self.spec.ridge)
    }

    /// Exact Hessian of client `i` at `w` (quadratic and logistic only).
    pub fn local_hessian(&self, i: usize, w: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.dim;
        match self.spec.kind {
            ObjectiveKind::Quadratic => Ok(self.quadratic_parts()?[i].a.clone()),
            ObjectiveKind::Logistic => {
                let c = &self.clients[i];
                let mut h = DMatrix::<f64>::zeros(d, d);
                for s in &c.samples {
                    let z = s.target * dot(&s.features, w);
                    let sg = sigmoid(z);
                    let x = DVector::from_column_slice(&s.features);
                    h.ger(sg * (1.0 - sg) / c.len() as f64, &x, &x, 1.0);
                }
                for j in 0..d {
                    h[(j, j)] += self.spec.ridge;
                }
                Ok(h)
            }
            ObjectiveKind::Mlp => Err(Error::Unsupported("explicit mlp Hessian".into())),
        }
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
