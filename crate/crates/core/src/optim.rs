//! Small dense solvers shared by the vault and the market agents.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct L1Solution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
}

pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// `‖target − J·x‖² + λ‖x‖₁`.
pub fn l1_objective(target: &DVector<f64>, jac: &DMatrix<f64>, lambda: f64, x: &DVector<f64>) -> f64 {
    (target - jac * x).norm_squared() + lambda * x.lp_norm(1)
}

pub fn largest_singular_value_sq(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().fold(0.0f64, |a, &s| a.max(s * s))
}

/// Proximal gradient (accelerated, with monotone restarts) for the lasso
/// objective `‖target − J·x‖² + λ‖x‖₁`, followed by an exact solve on the
/// detected support.
///
/// Step size is `1 / (2·σ_max(J)²)`, the reciprocal Lipschitz constant of the
/// smooth term. Stops after `max_iter` iterations or when the objective moves
/// less than `tol`.
pub fn lasso(
    target: &DVector<f64>,
    jac: &DMatrix<f64>,
    lambda: f64,
    max_iter: usize,
    tol: f64,
) -> L1Solution {
    let n = jac.ncols();
    let lip = 2.0 * largest_singular_value_sq(jac);
    let zero = DVector::zeros(n);
    if lip == 0.0 || n == 0 {
        let objective = l1_objective(target, jac, lambda, &zero);
        return L1Solution { x: zero, objective, iterations: 0 };
    }
    let step = 1.0 / lip;
    let jt = jac.transpose();
    let prox = |v: DVector<f64>| v.map(|e| soft_threshold(e, lambda * step));

    let mut x = zero.clone();
    let mut y = zero;
    let mut t = 1.0f64;
    let mut f_prev = l1_objective(target, jac, lambda, &x);
    let mut iterations = 0;
    for k in 0..max_iter {
        iterations = k + 1;
        let grad = &jt * (jac * &y - target) * 2.0;
        let x_next = prox(&y - grad * step);
        let f_next = l1_objective(target, jac, lambda, &x_next);
        if f_next > f_prev {
            // Restart momentum from the last accepted point.
            y = x.clone();
            t = 1.0;
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        y = &x_next + (&x_next - &x) * ((t - 1.0) / t_next);
        x = x_next;
        t = t_next;
        let converged = (f_prev - f_next).abs() < tol;
        f_prev = f_next;
        if converged {
            break;
        }
    }

    let polished = polish_support(target, jac, lambda, &x);
    let mut objective = f_prev;
    if let Some(p) = polished {
        let fp = l1_objective(target, jac, lambda, &p);
        if fp < objective {
            x = p;
            objective = fp;
        }
    }
    L1Solution { x, objective, iterations }
}

/// Solves the stationarity condition on the support and sign pattern of `x`:
/// `J_Sᵀ J_S x_S = J_Sᵀ target − (λ/2)·sign(x_S)`. Returns `None` when the
/// reduced system is singular or the signs flip.
fn polish_support(
    target: &DVector<f64>,
    jac: &DMatrix<f64>,
    lambda: f64,
    x: &DVector<f64>,
) -> Option<DVector<f64>> {
    let support: Vec<usize> = (0..x.len()).filter(|&i| x[i] != 0.0).collect();
    if support.is_empty() {
        return None;
    }
    let js = jac.select_columns(&support);
    let signs = DVector::from_iterator(support.len(), support.iter().map(|&i| x[i].signum()));
    let lhs = js.transpose() * &js;
    let rhs = js.transpose() * target - signs.clone() * (lambda / 2.0);
    let xs = lhs.lu().solve(&rhs)?;
    if xs.iter().zip(signs.iter()).any(|(v, s)| v * s <= 0.0) {
        return None;
    }
    let mut out = DVector::zeros(x.len());
    for (k, &i) in support.iter().enumerate() {
        out[i] = xs[k];
    }
    Some(out)
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let mut sorted: Vec<f64> = v.iter().copied().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (i as f64 + 1.0);
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.map(|e| (e - theta).max(0.0))
}

/// Minimizes `‖D·w‖² + λ‖w‖₁` over the probability simplex by accelerated
/// projected gradient, then re-solves exactly on the final face.
pub fn simplex_qp(deltas: &DMatrix<f64>, lambda: f64, max_iter: usize, tol: f64) -> (DVector<f64>, f64) {
    let n = deltas.ncols();
    let objective = |w: &DVector<f64>| (deltas * w).norm_squared() + lambda * w.lp_norm(1);
    let mut w = DVector::from_element(n, 1.0 / n as f64);
    let lip = 2.0 * largest_singular_value_sq(deltas);
    if lip > 0.0 {
        let step = 1.0 / lip;
        let gram = deltas.transpose() * deltas;
        let mut y = w.clone();
        let mut t = 1.0f64;
        let mut f_prev = objective(&w);
        for _ in 0..max_iter {
            // On the simplex the L1 term is constant, so only the quadratic
            // contributes to the gradient.
            let grad = &gram * &y * 2.0;
            let w_next = project_simplex(&(&y - grad * step));
            let f_next = objective(&w_next);
            if f_next > f_prev {
                y = w.clone();
                t = 1.0;
                continue;
            }
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            y = &w_next + (&w_next - &w) * ((t - 1.0) / t_next);
            w = w_next;
            t = t_next;
            let converged = (f_prev - f_next).abs() < tol;
            f_prev = f_next;
            if converged {
                break;
            }
        }
    }
    if let Some(face) = polish_face(deltas, &w) {
        if objective(&face) < objective(&w) {
            w = face;
        }
    }
    let f = objective(&w);
    (w, f)
}

/// Minimum of `‖D_S w_S‖²` subject to `Σ w_S = 1` on the support of `w`,
/// via the KKT system solved in the least-squares sense.
fn polish_face(deltas: &DMatrix<f64>, w: &DVector<f64>) -> Option<DVector<f64>> {
    let support: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 1e-12).collect();
    let k = support.len();
    if k < 2 {
        return None;
    }
    let ds = deltas.select_columns(&support);
    let gram = ds.transpose() * &ds * 2.0;
    let mut kkt = DMatrix::zeros(k + 1, k + 1);
    kkt.view_mut((0, 0), (k, k)).copy_from(&gram);
    for i in 0..k {
        kkt[(i, k)] = 1.0;
        kkt[(k, i)] = 1.0;
    }
    let mut rhs = DVector::zeros(k + 1);
    rhs[k] = 1.0;
    let sol = kkt.svd(true, true).solve(&rhs, 1e-12).ok()?;
    if (0..k).any(|i| sol[i] < 0.0) {
        return None;
    }
    let mut out = DVector::zeros(w.len());
    for (j, &i) in support.iter().enumerate() {
        out[i] = sol[j];
    }
    let s = out.sum();
    (s > 0.0).then(|| out / s)
}
