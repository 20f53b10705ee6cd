//! Distances between ECGs, body-surface maps and activation maps, plus
//! ensemble statistics.

use rayon::prelude::*;

use crate::ecg::{EcgTrace, TemporalGrid};
use crate::error::{Error, Result};
use crate::fem::sparse::det_sum;

/// Trapezoid weights on a uniform grid.
fn trapezoid(grid: &TemporalGrid, k: usize) -> f64 {
    if k == 0 || k == grid.n {
        0.5 * grid.dt
    } else {
        grid.dt
    }
}

/// Space-time RMSD of two ECGs (mV), trapezoid quadrature in time.
pub fn dist_ecg(a: &EcgTrace, b: &EcgTrace) -> Result<f64> {
    a.check_compatible(b)?;
    let g = a.grid;
    let mut s = 0.0;
    for (x, y) in a.values.iter().zip(&b.values) {
        for k in 0..g.num_samples() {
            let d = x[k] - y[k];
            s += trapezoid(&g, k) * d * d;
        }
    }
    Ok((s / (a.num_leads() as f64 * g.duration())).sqrt())
}

/// `dist_ecg(sim, target) / dist_ecg(target, 0)`.
pub fn relative_dist_ecg(sim: &EcgTrace, target: &EcgTrace) -> Result<f64> {
    let zero = EcgTrace::zeros(target.leads.clone(), target.grid);
    let scale = dist_ecg(target, &zero)?;
    if !(scale > 0.0) {
        return Err(Error::InvalidInput("target ECG is identically zero".into()));
    }
    Ok(dist_ecg(sim, target)? / scale)
}

/// Potentials on the torso surface: `values[sample][vertex]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bspm {
    /// Mesh ids of the surface vertices.
    pub vertices: Vec<usize>,
    pub grid: TemporalGrid,
    pub values: Vec<Vec<f64>>,
}

impl Bspm {
    fn check(&self, other: &Bspm, weights: &[f64]) -> Result<()> {
        if self.vertices != other.vertices || self.grid != other.grid {
            return Err(Error::Mismatch("BSPMs are on different surfaces or grids".into()));
        }
        if weights.len() != self.vertices.len() {
            return Err(Error::Mismatch("one area weight per surface vertex required".into()));
        }
        if self.values.len() != self.grid.num_samples() || other.values.len() != self.grid.num_samples() {
            return Err(Error::Mismatch("BSPM snapshot count does not match its grid".into()));
        }
        Ok(())
    }
}

/// Space-time RMSD over the torso surface (mV), with lumped area weights
/// (summing to the surface area) and trapezoid quadrature in time.
pub fn dist_bspm(a: &Bspm, b: &Bspm, area_weights: &[f64]) -> Result<f64> {
    a.check(b, area_weights)?;
    let area: f64 = area_weights.iter().sum();
    let g = a.grid;
    let mut s = 0.0;
    for k in 0..g.num_samples() {
        let snap: f64 = a.values[k]
            .iter()
            .zip(&b.values[k])
            .zip(area_weights)
            .map(|((x, y), w)| w * (x - y) * (x - y))
            .sum();
        s += trapezoid(&g, k) * snap;
    }
    Ok((s / (area * g.duration())).sqrt())
}

/// Volume-weighted RMSD of two activation maps (ms).
pub fn dist_lat(a: &[f64], b: &[f64], volumes: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() != volumes.len() {
        return Err(Error::Mismatch("activation maps and volumes differ in length".into()));
    }
    let total = det_sum(volumes.len(), |i| volumes[i]);
    let s = det_sum(a.len(), |i| {
        let d = if a[i] == b[i] { 0.0 } else { a[i] - b[i] };
        volumes[i] * d * d
    });
    if !s.is_finite() {
        return Err(Error::InvalidInput("activation maps differ in reached vertices".into()));
    }
    Ok((s / total).sqrt())
}

/// Pooled product-moment correlation over all leads and samples.
pub fn pearson(a: &EcgTrace, b: &EcgTrace) -> Result<f64> {
    a.check_compatible(b)?;
    let x: Vec<f64> = a.values.iter().flatten().copied().collect();
    let y: Vec<f64> = b.values.iter().flatten().copied().collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (xi, yi) in x.iter().zip(&y) {
        let (dx, dy) = (xi - mx, yi - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::InvalidInput("Pearson correlation of a constant signal".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Extreme pair of an ensemble under one distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

/// Closest and farthest pair from a symmetric distance function; ties go to
/// the lexicographically first pair.
pub fn extreme_pairs(n: usize, dist: impl Fn(usize, usize) -> Result<f64> + Sync) -> Result<(Pair, Pair)> {
    if n < 2 {
        return Err(Error::InvalidInput("pair statistics need at least two members".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let values = pairs
        .par_iter()
        .map(|&(i, j)| dist(i, j))
        .collect::<Result<Vec<f64>>>()?;
    let mut min = Pair { i: 0, j: 1, value: f64::INFINITY };
    let mut max = Pair { i: 0, j: 1, value: f64::NEG_INFINITY };
    for (&(i, j), &v) in pairs.iter().zip(&values) {
        if v < min.value {
            min = Pair { i, j, value: v };
        }
        if v > max.value {
            max = Pair { i, j, value: v };
        }
    }
    Ok((min, max))
}

/// Pointwise ensemble mean and population deviation of activation maps and ECGs.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub tau_mu: Vec<f64>,
    pub tau_sigma: Vec<f64>,
    /// Volume-weighted mean of `tau_sigma` (ms).
    pub tau_sigma_bar: f64,
    pub ecg_mu: Vec<Vec<f64>>,
    pub ecg_sigma: Vec<Vec<f64>>,
    /// Member closest to `tau_mu` in `dist_lat`.
    pub representative: usize,
    pub lat_min_pair: Pair,
    pub lat_max_pair: Pair,
    pub ecg_min_pair: Pair,
    pub ecg_max_pair: Pair,
}

fn mean_sigma(samples: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let len = samples[0].len();
    let mut mu = vec![0.0; len];
    let mut sigma = vec![0.0; len];
    for i in 0..len {
        let m = samples.iter().map(|s| s[i]).sum::<f64>() / n;
        let v = samples.iter().map(|s| (s[i] - m) * (s[i] - m)).sum::<f64>() / n;
        mu[i] = m;
        sigma[i] = v.sqrt();
    }
    (mu, sigma)
}

pub fn ensemble_stats(taus: &[Vec<f64>], ecgs: &[EcgTrace], volumes: &[f64]) -> Result<EnsembleStats> {
    if taus.len() < 2 || taus.len() != ecgs.len() {
        return Err(Error::InvalidInput(
            "ensemble statistics need at least two members with one ECG each".into(),
        ));
    }
    if taus.iter().any(|t| t.len() != volumes.len()) {
        return Err(Error::Mismatch("ensemble activation maps are on different meshes".into()));
    }
    for e in &ecgs[1..] {
        e.check_compatible(&ecgs[0])?;
    }
    let refs: Vec<&[f64]> = taus.iter().map(|t| t.as_slice()).collect();
    let (tau_mu, tau_sigma) = mean_sigma(&refs);
    let total = det_sum(volumes.len(), |i| volumes[i]);
    let tau_sigma_bar = det_sum(volumes.len(), |i| volumes[i] * tau_sigma[i]) / total;

    let mut ecg_mu = Vec::new();
    let mut ecg_sigma = Vec::new();
    for l in 0..ecgs[0].num_leads() {
        let rows: Vec<&[f64]> = ecgs.iter().map(|e| e.values[l].as_slice()).collect();
        let (m, s) = mean_sigma(&rows);
        ecg_mu.push(m);
        ecg_sigma.push(s);
    }

    let mut representative = 0;
    let mut best = f64::INFINITY;
    for (i, t) in taus.iter().enumerate() {
        let d = dist_lat(t, &tau_mu, volumes)?;
        if d < best {
            best = d;
            representative = i;
        }
    }
    let (lat_min_pair, lat_max_pair) = extreme_pairs(taus.len(), |i, j| dist_lat(&taus[i], &taus[j], volumes))?;
    let (ecg_min_pair, ecg_max_pair) = extreme_pairs(ecgs.len(), |i, j| dist_ecg(&ecgs[i], &ecgs[j]))?;
    Ok(EnsembleStats {
        tau_mu,
        tau_sigma,
        tau_sigma_bar,
        ecg_mu,
        ecg_sigma,
        representative,
        lat_min_pair,
        lat_max_pair,
        ecg_min_pair,
        ecg_max_pair,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(values: Vec<Vec<f64>>) -> EcgTrace {
        let n = values[0].len() - 1;
        EcgTrace {
            leads: (0..values.len()).map(|i| format!("L{i}")).collect(),
            grid: TemporalGrid::new(0.0, 0.5, n).unwrap(),
            values,
        }
    }

    #[test]
    fn ecg_distance_of_constant_offset() {
        let a = trace(vec![(0..41).map(|k| (k as f64).sin()).collect(); 3]);
        let mut b = a.clone();
        b.values.iter_mut().flatten().for_each(|v| *v += 1.5);
        assert!((dist_ecg(&a, &b).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(dist_ecg(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn bspm_distance_of_constant_offset() {
        let grid = TemporalGrid::new(0.0, 2.0, 4).unwrap();
        let a = Bspm {
            vertices: vec![3, 7, 9],
            grid,
            values: (0..5).map(|k| vec![k as f64, 1.0, -2.0]).collect(),
        };
        let mut b = a.clone();
        b.values.iter_mut().flatten().for_each(|v| *v -= 0.25);
        let w = [1.0, 2.0, 0.5];
        assert!((dist_bspm(&a, &b, &w).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(dist_bspm(&a, &a, &w).unwrap(), 0.0);
    }

    #[test]
    fn lat_distance_of_shift() {
        let a = vec![1.0, 5.0, 9.0, 2.0];
        let b: Vec<f64> = a.iter().map(|t| t + 10.0).collect();
        let w = [0.3, 1.0, 2.0, 0.7];
        assert!((dist_lat(&a, &b, &w).unwrap() - 10.0).abs() < 1e-12);
        let inf = vec![f64::INFINITY; 4];
        assert_eq!(dist_lat(&inf, &inf, &w).unwrap(), 0.0);
        assert!(dist_lat(&a, &inf, &w).is_err());
    }

    #[test]
    fn pearson_is_affine_invariant() {
        let a = trace(vec![(0..21).map(|k| (k as f64 * 0.3).sin()).collect(), (0..21).map(|k| k as f64).collect()]);
        let mut b = a.clone();
        b.values.iter_mut().flatten().for_each(|v| *v *= 2.0);
        assert!((pearson(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        b.values.iter_mut().flatten().for_each(|v| *v *= -1.0);
        assert!((pearson(&a, &b).unwrap() + 1.0).abs() < 1e-12);
        let flat = trace(vec![vec![1.0; 21]; 2]);
        assert!(pearson(&a, &flat).is_err());
    }

    #[test]
    fn ensemble_of_symmetric_offsets() {
        let base: Vec<f64> = (0..6).map(|i| i as f64 * 3.0).collect();
        let taus = vec![base.iter().map(|t| t + 5.0).collect(), base.iter().map(|t| t - 5.0).collect()];
        let e = trace(vec![vec![0.0; 11]]);
        let s = ensemble_stats(&taus, &[e.clone(), e], &[1.0; 6]).unwrap();
        assert!(s.tau_sigma.iter().all(|&x| (x - 5.0).abs() < 1e-12));
        assert!((s.tau_sigma_bar - 5.0).abs() < 1e-12);
        assert!(s.tau_mu.iter().zip(&base).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!((s.lat_max_pair.value - 10.0).abs() < 1e-12);
    }

    #[test]
    fn copies_have_zero_spread() {
        let tau = vec![1.0, 2.0, 3.0];
        let e = trace(vec![vec![1.0, 2.0, 0.0]]);
        let s = ensemble_stats(&vec![tau.clone(); 4], &vec![e; 4], &[1.0; 3]).unwrap();
        assert_eq!(s.representative, 0);
        assert!(s.tau_sigma.iter().all(|&x| x == 0.0));
        assert_eq!(s.lat_max_pair.value, 0.0);
    }

    proptest! {
        #[test]
        fn distances_are_metrics(
            a in prop::collection::vec(-50.0f64..50.0, 12),
            b in prop::collection::vec(-50.0f64..50.0, 12),
            c in prop::collection::vec(-50.0f64..50.0, 12),
            w in prop::collection::vec(0.1f64..3.0, 12),
        ) {
            let dab = dist_lat(&a, &b, &w).unwrap();
            prop_assert!(dab >= 0.0);
            prop_assert_eq!(dab, dist_lat(&b, &a, &w).unwrap());
            prop_assert!(dab <= dist_lat(&a, &c, &w).unwrap() + dist_lat(&c, &b, &w).unwrap() + 1e-9);
            let (ta, tb, tc) = (trace(vec![a.clone(), b.clone()]), trace(vec![b.clone(), c.clone()]), trace(vec![c.clone(), a.clone()]));
            let e = dist_ecg(&ta, &tb).unwrap();
            prop_assert_eq!(e, dist_ecg(&tb, &ta).unwrap());
            prop_assert!(e <= dist_ecg(&ta, &tc).unwrap() + dist_ecg(&tc, &tb).unwrap() + 1e-9);
        }

        #[test]
        fn lat_distance_ignores_vertex_order(
            a in prop::collection::vec(0.0f64..100.0, 10),
            b in prop::collection::vec(0.0f64..100.0, 10),
            w in prop::collection::vec(0.1f64..3.0, 10),
            rot in 0usize..10,
        ) {
            let r = |v: &[f64]| { let mut v = v.to_vec(); v.rotate_left(rot); v };
            let d = dist_lat(&a, &b, &w).unwrap();
            let dr = dist_lat(&r(&a), &r(&b), &r(&w)).unwrap();
            prop_assert!((d - dr).abs() <= 1e-12 * (1.0 + d));
        }
    }
}
