//! Jacobi-preconditioned conjugate gradients for symmetric positive
//! (semi-)definite systems.

use super::sparse::{dot, norm, Csr};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CgConfig {
    /// Relative residual `|r| / |b|` at which to stop.
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig {
            tolerance: 1e-10,
            max_iters: 20_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgStats {
    pub iterations: usize,
    pub residual: f64,
}

fn remove_mean(r: &mut [f64]) {
    let m = super::sparse::det_sum(r.len(), |i| r[i]) / r.len() as f64;
    for x in r.iter_mut() {
        *x -= m;
    }
}

/// Solves `A x = b` starting from `x`. With `singular`, `A` is assumed to have
/// the constants as its null space and every residual is orthogonalized
/// against them, so `b` must have zero sum.
pub fn pcg(a: &Csr, b: &[f64], x: &mut [f64], singular: bool, config: &CgConfig) -> Result<CgStats> {
    let n = a.n();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgStats {
            iterations: 0,
            residual: 0.0,
        });
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut r = a.mul(x);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    if singular {
        remove_mean(&mut r);
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut residual = norm(&r) / bnorm;
    let mut it = 0;
    while residual >= config.tolerance {
        if it == config.max_iters {
            return Err(Error::CgNotConverged {
                iterations: it,
                residual,
            });
        }
        it += 1;
        a.mul_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Singular(format!(
                "conjugate gradients broke down (p.Ap = {pap:.3e})"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if singular {
            remove_mean(&mut r);
        }
        residual = norm(&r) / bnorm;
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok(CgStats {
        iterations: it,
        residual,
    })
}
