//! Local Hopf-Lax subproblem on one face opposite the updated vertex.
//!
//! The face is parameterized by barycentric weights `w` (sum 1, nonnegative),
//! the arrival time on it is the linear interpolant `w . tau`, and the
//! travel time from the face point to the vertex is `sqrt(w^T Q w)` where
//! `Q_ij = e_i^T D e_j`, `e_k = x_k - x_v` and `D` is the element metric.
//!
//! Only causal candidates are accepted: every face vertex carrying positive
//! weight must have a strictly smaller arrival time than the candidate. This
//! keeps the provenance graph ordered by arrival time.

use crate::geometry::{Mat3, Vec3};

/// Face-level minimizer used inside the fixed-point update.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LocalSolver {
    /// Closed-form minimization over face interior, edges and vertices.
    Exact,
    /// Projected FISTA on the barycentric simplex with a fixed iteration count.
    Fista { iterations: usize },
}

impl Default for LocalSolver {
    fn default() -> Self {
        LocalSolver::Exact
    }
}

/// Winning point on a face: value and barycentric weights on the three face vertices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceMin {
    pub value: f64,
    pub weights: [f64; 3],
}

/// Gram matrix of face edge vectors under `metric`.
pub fn face_gram(xv: &Vec3, face: [&Vec3; 3], metric: &Mat3) -> [[f64; 3]; 3] {
    let e = [face[0] - xv, face[1] - xv, face[2] - xv];
    let de = [metric * e[0], metric * e[1], metric * e[2]];
    let mut q = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let v = e[i].dot(&de[j]);
            q[i][j] = v;
            q[j][i] = v;
        }
    }
    q
}

fn quad(q: &[[f64; 3]; 3], w: &[f64; 3]) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += w[i] * q[i][j] * w[j];
        }
    }
    s.max(0.0)
}

/// Objective `w . tau + sqrt(w^T Q w)` for finite `tau` on the support of `w`.
pub fn face_objective(q: &[[f64; 3]; 3], tau: &[f64; 3], w: &[f64; 3]) -> f64 {
    let mut lin = 0.0;
    for k in 0..3 {
        if w[k] != 0.0 {
            lin += w[k] * tau[k];
        }
    }
    lin + quad(q, w).sqrt()
}

fn causal(tau: &[f64; 3], w: &[f64; 3], value: f64) -> bool {
    (0..3).all(|k| w[k] <= 0.0 || tau[k] < value)
}

struct Best(Option<FaceMin>);

impl Best {
    fn offer(&mut self, value: f64, weights: [f64; 3], tau: &[f64; 3]) {
        if !value.is_finite() || !causal(tau, &weights, value) {
            return;
        }
        if self.0.map_or(true, |b| value < b.value) {
            self.0 = Some(FaceMin { value, weights });
        }
    }
}

/// Interior stationary point of the edge `i -> j`, parameter `s` in (0, 1).
fn edge_stationary(q: &[[f64; 3]; 3], tau: &[f64; 3], i: usize, j: usize) -> Option<[f64; 3]> {
    let gamma = q[i][i];
    let beta = q[i][j] - q[i][i];
    let alpha = q[i][i] - 2.0 * q[i][j] + q[j][j];
    if !(alpha > 1e-14 * (q[i][i] + q[j][j])) {
        return None;
    }
    let d = tau[j] - tau[i];
    let slack = alpha - d * d;
    if !(slack > 0.0) {
        return None;
    }
    let kappa = (alpha * gamma - beta * beta).max(0.0);
    let u = -d * (kappa / slack).sqrt();
    let s = (u - beta) / alpha;
    if !(s > 0.0 && s < 1.0) {
        return None;
    }
    let mut w = [0.0; 3];
    w[i] = 1.0 - s;
    w[j] = s;
    Some(w)
}

/// Interior stationary point of the whole face, if it lies strictly inside.
fn face_stationary(q: &[[f64; 3]; 3], tau: &[f64; 3]) -> Option<[f64; 3]> {
    let h00 = q[1][1] - 2.0 * q[0][1] + q[0][0];
    let h01 = q[1][2] - q[0][1] - q[0][2] + q[0][0];
    let h11 = q[2][2] - 2.0 * q[0][2] + q[0][0];
    let det = h00 * h11 - h01 * h01;
    if !(det > 1e-14 * (h00 * h11).abs()) || !(h00 > 0.0) {
        return None;
    }
    let inv = [[h11 / det, -h01 / det], [-h01 / det, h00 / det]];
    let apply = |v: [f64; 2]| {
        [
            inv[0][0] * v[0] + inv[0][1] * v[1],
            inv[1][0] * v[0] + inv[1][1] * v[1],
        ]
    };
    let g = [tau[1] - tau[0], tau[2] - tau[0]];
    let b = [q[0][1] - q[0][0], q[0][2] - q[0][0]];
    let hg = apply(g);
    let hb = apply(b);
    let rho = g[0] * hg[0] + g[1] * hg[1];
    if !(rho < 1.0) {
        return None;
    }
    let kappa = (q[0][0] - (b[0] * hb[0] + b[1] * hb[1])).max(0.0);
    let root = (kappa / (1.0 - rho)).sqrt();
    let mu = [-hg[0] * root - hb[0], -hg[1] * root - hb[1]];
    let w0 = 1.0 - mu[0] - mu[1];
    if mu[0] > 0.0 && mu[1] > 0.0 && w0 > 0.0 {
        Some([w0, mu[0], mu[1]])
    } else {
        None
    }
}

/// Minimizer of the objective over the closed sub-face where `support` is set,
/// found among the stationary points of it and of its edges and vertices.
pub fn minimize_on_support(q: &[[f64; 3]; 3], tau: &[f64; 3], support: &[bool; 3]) -> Option<[f64; 3]> {
    let mut best: Option<(f64, [f64; 3])> = None;
    for mask in 1u8..8 {
        let sub = [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0];
        if (0..3).any(|k| sub[k] && !support[k]) {
            continue;
        }
        if let Some(w) = stationary_on_support(q, tau, &sub) {
            let value = face_objective(q, tau, &w);
            if value.is_finite() && best.map_or(true, |b| value < b.0) {
                best = Some((value, w));
            }
        }
    }
    best.map(|b| b.1)
}

/// Stationary point of the objective on the sub-face where `support` is set,
/// if it lies strictly inside that sub-face.
fn stationary_on_support(q: &[[f64; 3]; 3], tau: &[f64; 3], support: &[bool; 3]) -> Option<[f64; 3]> {
    let idx: Vec<usize> = (0..3).filter(|&k| support[k]).collect();
    match idx[..] {
        [k] => {
            let mut w = [0.0; 3];
            w[k] = 1.0;
            Some(w)
        }
        [i, j] => edge_stationary(q, tau, i, j),
        [_, _, _] => face_stationary(q, tau),
        _ => None,
    }
}

/// Minimizes `w . tau + sqrt(w^T Q w)` over the face. Infinite entries of `tau`
/// restrict the search to the finite sub-face. `None` if nothing is finite.
pub fn solve_face(solver: LocalSolver, q: &[[f64; 3]; 3], tau: &[f64; 3]) -> Option<FaceMin> {
    let finite = [tau[0].is_finite(), tau[1].is_finite(), tau[2].is_finite()];
    let mut best = Best(None);
    for k in 0..3 {
        if finite[k] {
            let mut w = [0.0; 3];
            w[k] = 1.0;
            best.offer(tau[k] + q[k][k].max(0.0).sqrt(), w, tau);
        }
    }
    best.0?;
    match solver {
        LocalSolver::Exact => {
            for (i, j) in [(0, 1), (0, 2), (1, 2)] {
                if finite[i] && finite[j] {
                    if let Some(w) = edge_stationary(q, tau, i, j) {
                        best.offer(face_objective(q, tau, &w), w, tau);
                    }
                }
            }
            if finite.iter().all(|&f| f) {
                if let Some(w) = face_stationary(q, tau) {
                    best.offer(face_objective(q, tau, &w), w, tau);
                }
            }
        }
        LocalSolver::Fista { iterations } => {
            if let Some(w) = fista(q, tau, &finite, best.0.unwrap().weights, iterations) {
                best.offer(face_objective(q, tau, &w), w, tau);
            }
        }
    }
    best.0
}

fn fista(
    q: &[[f64; 3]; 3],
    tau: &[f64; 3],
    finite: &[bool; 3],
    start: [f64; 3],
    iterations: usize,
) -> Option<[f64; 3]> {
    let support: Vec<usize> = (0..3).filter(|&k| finite[k]).collect();
    if support.len() < 2 || iterations == 0 {
        return None;
    }
    // Lower bound of the travel time over the supporting plane or line.
    let qmin = match support.len() {
        2 => {
            let (i, j) = (support[0], support[1]);
            let alpha = q[i][i] - 2.0 * q[i][j] + q[j][j];
            let beta = q[i][j] - q[i][i];
            if alpha > 0.0 {
                (q[i][i] - beta * beta / alpha).max(0.0)
            } else {
                q[i][i]
            }
        }
        _ => {
            let h00 = q[1][1] - 2.0 * q[0][1] + q[0][0];
            let h01 = q[1][2] - q[0][1] - q[0][2] + q[0][0];
            let h11 = q[2][2] - 2.0 * q[0][2] + q[0][0];
            let det = h00 * h11 - h01 * h01;
            let b = [q[0][1] - q[0][0], q[0][2] - q[0][0]];
            if det > 0.0 {
                let bhb = (h11 * b[0] * b[0] - 2.0 * h01 * b[0] * b[1] + h00 * b[1] * b[1]) / det;
                (q[0][0] - bhb).max(0.0)
            } else {
                0.0
            }
        }
    };
    if !(qmin > 0.0) {
        return None;
    }
    let trace: f64 = support.iter().map(|&k| q[k][k]).sum();
    let step = qmin.sqrt() / trace;
    let grad = |w: &[f64; 3]| {
        let s = quad(q, w).sqrt().max(1e-300);
        let mut g = [0.0; 3];
        for &i in &support {
            let mut qw = 0.0;
            for &j in &support {
                qw += q[i][j] * w[j];
            }
            g[i] = tau[i] + qw / s;
        }
        g
    };
    let mut x = start;
    let mut y = start;
    let mut t = 1.0f64;
    for _ in 0..iterations {
        let g = grad(&y);
        let mut z = [0.0; 3];
        for &k in &support {
            z[k] = y[k] - step * g[k];
        }
        let xn = project_simplex(&z, finite);
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        for &k in &support {
            y[k] = xn[k] + (t - 1.0) / tn * (xn[k] - x[k]);
        }
        x = xn;
        t = tn;
    }
    Some(x)
}

/// Euclidean projection onto the probability simplex restricted to `support`.
pub fn project_simplex(z: &[f64; 3], support: &[bool; 3]) -> [f64; 3] {
    let mut vals: Vec<f64> = (0..3).filter(|&k| support[k]).map(|k| z[k]).collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &v) in vals.iter().enumerate() {
        cumsum += v;
        let t = (cumsum - 1.0) / (i as f64 + 1.0);
        if v - t > 0.0 {
            theta = t;
        }
    }
    let mut out = [0.0; 3];
    for k in 0..3 {
        if support[k] {
            out[k] = (z[k] - theta).max(0.0);
        }
    }
    out
}
