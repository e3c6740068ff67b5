use nalgebra::{DMatrix, DVector};

use super::MaskedObjective;
use crate::data::ObjectiveKind;
use crate::error::{check_dim, Error, Result};
use crate::params::{dot, DomainBall, ParamVector};

const GRAD_MAP_TOL: f64 = 1e-8;
const MAX_ITERS: usize = 200_000;

/// Minimizes `½ wᵀHw − gᵀw` over `||w|| <= radius` for symmetric positive
/// semidefinite `H`.
///
/// Works in the eigenbasis of `H`: the unconstrained minimizer is returned
/// when it lies in the ball, otherwise the multiplier `ν > 0` of the
/// boundary solution `(H + νI)⁻¹ g` is found by bisection on the secular
/// equation `||(H + νI)⁻¹ g|| = radius`.
pub fn minimize_quadratic_on_ball(h: &DMatrix<f64>, g: &DVector<f64>, radius: f64) -> Result<DVector<f64>> {
    let d = g.len();
    check_dim(d, h.nrows())?;
    check_dim(d, h.ncols())?;
    let eig = h.clone().symmetric_eigen();
    let c = eig.eigenvectors.transpose() * g;
    let lam = &eig.eigenvalues;
    let scale = lam.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let tiny = 1e-13 * scale;

    let coords = |nu: f64| -> DVector<f64> { DVector::from_iterator(d, (0..d).map(|k| c[k] / (lam[k] + nu))) };

    // interior candidate: needs a solvable stationarity condition
    let singular_rhs = (0..d).any(|k| lam[k] <= tiny && c[k].abs() > tiny);
    if !singular_rhs {
        let y = DVector::from_iterator(d, (0..d).map(|k| if lam[k] > tiny { c[k] / lam[k] } else { 0.0 }));
        if y.norm() <= radius {
            return Ok(&eig.eigenvectors * y);
        }
    }

    let lam_min = lam.min();
    let mut lo = (-lam_min).max(0.0);
    let mut hi = lo + c.norm() / radius + 1.0;
    while coords(hi).norm() > radius {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if coords(mid).norm() > radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut w = &eig.eigenvectors * coords(hi);
    let n = w.norm();
    if n > radius {
        w *= radius / n;
    }
    Ok(w)
}

impl MaskedObjective<'_> {
    /// Minimizer of the masked objective over `ball`.
    ///
    /// Quadratic objectives are solved exactly from the expected quadratic.
    /// Logistic objectives use accelerated projected gradient with adaptive
    /// restart until the gradient mapping falls below `1e-8`. The mlp is
    /// refused since its optimum is not unique.
    pub fn solve_masked_optimum(&self, ball: &DomainBall) -> Result<ParamVector> {
        match self.objective().spec().kind {
            ObjectiveKind::Mlp => Err(Error::Unsupported(
                "masked optimum of a nonconvex objective is not unique".into(),
            )),
            ObjectiveKind::Quadratic => {
                let (h, g) = self.expected_quadratic()?;
                let w = minimize_quadratic_on_ball(&h, &g, ball.radius())?;
                ParamVector::new(w.iter().copied().collect())
            }
            ObjectiveKind::Logistic => self.projected_descent(ball),
        }
    }

    /// Upper bound on the smoothness of the masked objective.
    pub(crate) fn smoothness(&self) -> f64 {
        let obj = self.objective();
        let n = obj.n_clients();
        let weights: Vec<f64> = if self.rolling_masks().is_some() {
            vec![1.0; n]
        } else {
            self.keep_probs().to_vec()
        };
        (0..n)
            .map(|i| weights[i] * obj.smoothness_bound(i).expect("convex kinds have a bound"))
            .sum::<f64>()
            / n as f64
    }

    /// `||w − P(w − ∇F(w))||` for the masked objective `F`; zero exactly at
    /// the constrained optimum of a convex objective.
    pub fn optimality_residual(&self, w: &[f64], ball: &DomainBall) -> Result<f64> {
        let g = self.gradient(w)?;
        let mut y: Vec<f64> = w.iter().zip(g.iter()).map(|(a, b)| a - b).collect();
        ball.project_in_place(&mut y);
        Ok(w.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }

    fn projected_descent(&self, ball: &DomainBall) -> Result<ParamVector> {
        let d = self.dim();
        let lip = self.smoothness().max(f64::MIN_POSITIVE);
        let step = 1.0 / lip;
        let mut x = vec![0.0; d];
        let mut y = x.clone();
        let mut t = 1.0f64;
        let mut residual = f64::INFINITY;
        for it in 0..MAX_ITERS {
            let gx = self.gradient(&x)?;
            // gradient mapping at the current iterate
            let mut px: Vec<f64> = x.iter().zip(gx.iter()).map(|(a, b)| a - step * b).collect();
            ball.project_in_place(&mut px);
            residual = lip * x.iter().zip(&px).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if residual < GRAD_MAP_TOL {
                log::debug!("masked optimum converged after {it} iterations");
                return ParamVector::new(x);
            }
            let gy = self.gradient(&y)?;
            let mut next: Vec<f64> = y.iter().zip(gy.iter()).map(|(a, b)| a - step * b).collect();
            ball.project_in_place(&mut next);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let diff: Vec<f64> = next.iter().zip(&x).map(|(a, b)| a - b).collect();
            // restart when momentum points uphill
            let uphill = dot(&gy, &diff) > 0.0;
            if uphill {
                t = 1.0;
                y = next.clone();
            } else {
                let beta = (t - 1.0) / t_next;
                y = next.iter().zip(&diff).map(|(a, b)| a + beta * b).collect();
                ball.project_in_place(&mut y);
                t = t_next;
            }
            x = next;
        }
        Err(Error::NotConverged {
            iterations: MAX_ITERS,
            residual,
        })
    }

    /// Masked heterogeneity at the optimum,
    /// `(1/N) Σ_i E||m_i ⊙ ∇f_i(m_i ⊙ w*)||²`.
    pub fn sigma_star(&self, ball: &DomainBall) -> Result<f64> {
        let w = self.solve_masked_optimum(ball)?;
        self.sigma_sq_at(&w)
    }

    /// The quantity of [`Self::sigma_star`] evaluated at an arbitrary point.
    pub fn sigma_sq_at(&self, w: &[f64]) -> Result<f64> {
        check_dim(self.dim(), w.len())?;
        let n = self.objective().n_clients();
        Ok((0..n).map(|i| self.client_moments(i, w, true).grad_sq).sum::<f64>() / n as f64)
    }
}
