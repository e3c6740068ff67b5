//! Independent reference computations for the integration tests.
//!
//! Nothing here calls into the library's linear algebra or expectation code;
//! objectives are rebuilt from raw samples with plain loops.
#![allow(dead_code)]

use maskfl::{ClientDataset, Mask, Objective, ObjectiveKind, ObjectiveSpec, ParamVector};

pub type Mat = Vec<Vec<f64>>;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(mut a: Mat) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Mat, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for k in col..n {
                a[r][k] -= f * a[col][k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// `(A, b, c)` with `f(w) = ½ wᵀAw − bᵀw + c` for one quadratic client.
pub struct Quad {
    pub a: Mat,
    pub b: Vec<f64>,
    pub c: f64,
}

pub fn quad_of(ds: &ClientDataset, ridge: f64) -> Quad {
    let d = ds.feature_dim();
    let n = ds.samples.len() as f64;
    let mut a = vec![vec![0.0; d]; d];
    let mut b = vec![0.0; d];
    let mut c = 0.0;
    for s in &ds.samples {
        for j in 0..d {
            for k in 0..d {
                a[j][k] += s.features[j] * s.features[k] / n;
            }
            b[j] += s.target * s.features[j] / n;
        }
        c += 0.5 * s.target * s.target / n;
    }
    for (j, row) in a.iter_mut().enumerate() {
        row[j] += ridge;
    }
    Quad { a, b, c }
}

impl Quad {
    pub fn value(&self, w: &[f64]) -> f64 {
        let d = w.len();
        let mut q = 0.0;
        for j in 0..d {
            for k in 0..d {
                q += w[j] * self.a[j][k] * w[k];
            }
        }
        0.5 * q - (0..d).map(|j| self.b[j] * w[j]).sum::<f64>() + self.c
    }

    pub fn grad(&self, w: &[f64]) -> Vec<f64> {
        let d = w.len();
        (0..d)
            .map(|j| (0..d).map(|k| self.a[j][k] * w[k]).sum::<f64>() - self.b[j])
            .collect()
    }
}

pub fn masked(bits: &[u8], w: &[f64]) -> Vec<f64> {
    w.iter().zip(bits).map(|(x, &b)| if b == 1 { *x } else { 0.0 }).collect()
}

/// Every mask of dimension `d` with its Bernoulli(`p`) probability.
pub fn all_masks(d: usize, p: f64) -> Vec<(f64, Vec<u8>)> {
    (0u32..(1 << d))
        .map(|code| {
            let bits: Vec<u8> = (0..d).map(|j| ((code >> j) & 1) as u8).collect();
            let k = bits.iter().filter(|&&b| b == 1).count() as i32;
            (p.powi(k) * (1.0 - p).powi(d as i32 - k), bits)
        })
        .collect()
}

/// `F_p` by brute-force enumeration over all masks, through the public loss.
pub fn enum_fp_value(obj: &Objective, probs: &[f64], w: &[f64]) -> f64 {
    let d = w.len();
    let mut total = 0.0;
    for (i, ds) in obj.clients().iter().enumerate() {
        for (wt, bits) in all_masks(d, probs[i]) {
            let wm = ParamVector::new(masked(&bits, w)).unwrap();
            total += wt * maskfl::loss(obj.spec(), ds, &wm).unwrap();
        }
    }
    total / obj.n_clients() as f64
}

/// `∇F_p` by brute-force enumeration over all masks.
pub fn enum_fp_grad(obj: &Objective, probs: &[f64], w: &[f64]) -> Vec<f64> {
    let d = w.len();
    let mut total = vec![0.0; d];
    for (i, ds) in obj.clients().iter().enumerate() {
        for (wt, bits) in all_masks(d, probs[i]) {
            let wm = ParamVector::new(masked(&bits, w)).unwrap();
            let g = maskfl::gradient(obj.spec(), ds, &wm).unwrap();
            for j in 0..d {
                total[j] += wt * bits[j] as f64 * g[j];
            }
        }
    }
    total.iter().map(|x| x / obj.n_clients() as f64).collect()
}

/// `(1/N) Σ_i E||m ⊙ ∇f_i(m ⊙ w)||²` by enumeration.
pub fn enum_sigma_sq(obj: &Objective, probs: &[f64], w: &[f64]) -> f64 {
    let d = w.len();
    let mut total = 0.0;
    for (i, ds) in obj.clients().iter().enumerate() {
        for (wt, bits) in all_masks(d, probs[i]) {
            let wm = ParamVector::new(masked(&bits, w)).unwrap();
            let g = maskfl::gradient(obj.spec(), ds, &wm).unwrap();
            total += wt * (0..d).map(|j| bits[j] as f64 * g[j] * g[j]).sum::<f64>();
        }
    }
    total / obj.n_clients() as f64
}

/// Expected Hessian of a quadratic `F_p`, assembled entrywise:
/// `E[m_j m_k] A_jk` with `E[m_j m_k] = p` on the diagonal and `p²` off it.
pub fn expected_quadratic(quads: &[Quad], probs: &[f64]) -> (Mat, Vec<f64>) {
    let d = quads[0].b.len();
    let n = quads.len() as f64;
    let mut h = vec![vec![0.0; d]; d];
    let mut g = vec![0.0; d];
    for (q, &p) in quads.iter().zip(probs) {
        for j in 0..d {
            g[j] += p * q.b[j] / n;
            for k in 0..d {
                let e = if j == k { p } else { p * p };
                h[j][k] += e * q.a[j][k] / n;
            }
        }
    }
    (h, g)
}

/// Central finite-difference gradient.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, w: &[f64]) -> Vec<f64> {
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let h = 1e-5 * (1.0 + norm);
    (0..w.len())
        .map(|j| {
            let mut a = w.to_vec();
            let mut b = w.to_vec();
            a[j] += h;
            b[j] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

/// Largest per-coordinate relative error, with an absolute floor for tiny
/// coordinates.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-8);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-3 * scale))
        .fold(0.0, f64::max)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[k]] {
            e += 1;
        }
        let avg = (k + e) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=e] {
            r[i] = avg;
        }
        k = e + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

pub fn mask_from(bits: &[u8]) -> Mask {
    Mask::new(bits.to_vec()).unwrap()
}

pub fn quadratic_objective(n_clients: usize, n: usize, d: usize, h: f64, ridge: f64, seed: u64) -> Objective {
    let clients = maskfl::gen_clients(n_clients, n, d, h, ObjectiveKind::Quadratic, seed).unwrap();
    Objective::new(ObjectiveSpec::quadratic(ridge), clients).unwrap()
}

pub fn logistic_objective(n_clients: usize, n: usize, d: usize, h: f64, ridge: f64, seed: u64) -> Objective {
    let clients = maskfl::gen_clients(n_clients, n, d, h, ObjectiveKind::Logistic, seed).unwrap();
    Objective::new(ObjectiveSpec::logistic(ridge), clients).unwrap()
}

pub fn mlp_objective(n_clients: usize, n: usize, d: usize, hidden: usize, seed: u64) -> Objective {
    let clients = maskfl::gen_clients(n_clients, n, d, 0.5, ObjectiveKind::Mlp, seed).unwrap();
    Objective::new(ObjectiveSpec::mlp(hidden, 0.01), clients).unwrap()
}
