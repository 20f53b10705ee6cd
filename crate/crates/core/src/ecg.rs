//! ECG from an activation map through precomputed lead vectors.
//!
//! The transmembrane voltage at a vertex is a tanh upstroke centred at its
//! activation time; lead `l` at time `t` is `B_l . V_m(t)`. Outside
//! `|t - tau| <= 10 eps` the upstroke is saturated to the last bit, so each
//! vertex only touches the samples in that window explicitly and contributes
//! a constant before and after it.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Beyond this value of `|2 (t - tau) / eps|`, `tanh` rounds to exactly +-1.
const SATURATION: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveformParams {
    /// Resting potential (mV).
    pub v_rest: f64,
    /// Plateau potential (mV).
    pub v_plateau: f64,
    /// Upstroke width (ms).
    pub upstroke: f64,
}

impl Default for WaveformParams {
    fn default() -> Self {
        WaveformParams {
            v_rest: -85.0,
            v_plateau: 30.0,
            upstroke: 1.0,
        }
    }
}

impl WaveformParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_plateau > self.v_rest) || !(self.upstroke > 0.0) || !self.v_rest.is_finite() || !self.v_plateau.is_finite() {
            return Err(Error::InvalidInput(
                "waveform needs v_plateau > v_rest and a positive upstroke".into(),
            ));
        }
        Ok(())
    }

    fn amplitude(&self) -> f64 {
        self.v_plateau - self.v_rest
    }

    /// Sample-index window `[lo, hi]` in which the upstroke at `tau` is not saturated.
    fn window(&self, tau: f64, grid: &TemporalGrid) -> Option<(usize, usize)> {
        if !tau.is_finite() {
            return None;
        }
        let half = SATURATION * self.upstroke / 2.0;
        let lo = ((tau - half - grid.t0) / grid.dt).floor().max(0.0);
        let hi = ((tau + half - grid.t0) / grid.dt).ceil().min(grid.n as f64);
        if lo > grid.n as f64 {
            return None;
        }
        Some((lo as usize, hi.max(lo) as usize))
    }
}

/// `V_m` at time `t` for activation time `tau` (mV).
pub fn transmembrane(tau: f64, t: f64, p: &WaveformParams) -> f64 {
    p.v_rest + p.amplitude() / 2.0 * ((2.0 * (t - tau) / p.upstroke).tanh() + 1.0)
}

/// `d V_m / d tau`.
pub fn transmembrane_dtau(tau: f64, t: f64, p: &WaveformParams) -> f64 {
    let c = (2.0 * (t - tau) / p.upstroke).cosh();
    -p.amplitude() / p.upstroke / (c * c)
}

/// Uniform samples `t0 + k dt`, `k = 0..=n`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TemporalGrid {
    pub t0: f64,
    pub dt: f64,
    pub n: usize,
}

impl TemporalGrid {
    pub fn new(t0: f64, dt: f64, n: usize) -> Result<Self> {
        if !(dt > 0.0) || n == 0 || !t0.is_finite() {
            return Err(Error::InvalidInput("temporal grid needs dt > 0 and n >= 1".into()));
        }
        Ok(TemporalGrid { t0, dt, n })
    }

    /// Grid from `t0` covering `t_end` (rounded up to a whole step).
    pub fn covering(t0: f64, dt: f64, t_end: f64) -> Result<Self> {
        let n = ((t_end - t0) / dt - 1e-9).ceil().max(1.0) as usize;
        Self::new(t0, dt, n)
    }

    pub fn t_end(&self) -> f64 {
        self.t0 + self.n as f64 * self.dt
    }

    /// Duration `|T| = n dt`.
    pub fn duration(&self) -> f64 {
        self.n as f64 * self.dt
    }

    pub fn num_samples(&self) -> usize {
        self.n + 1
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n).map(|k| self.time(k))
    }

    fn same_as(&self, other: &TemporalGrid) -> bool {
        self.n == other.n
            && (self.t0 - other.t0).abs() <= 1e-12 * (1.0 + self.t0.abs())
            && (self.dt - other.dt).abs() <= 1e-12 * self.dt
    }
}

/// Multi-lead potentials (mV) on a shared grid; `values[lead][sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgTrace {
    pub leads: Vec<String>,
    pub grid: TemporalGrid,
    pub values: Vec<Vec<f64>>,
}

impl EcgTrace {
    pub fn zeros(leads: Vec<String>, grid: TemporalGrid) -> Self {
        let values = vec![vec![0.0; grid.num_samples()]; leads.len()];
        EcgTrace { leads, grid, values }
    }

    pub fn num_leads(&self) -> usize {
        self.leads.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.leads.len() {
            return Err(Error::Mismatch("one value row per lead required".into()));
        }
        if self.values.iter().any(|v| v.len() != self.grid.num_samples()) {
            return Err(Error::Mismatch("lead rows must match the temporal grid".into()));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("ECG contains non-finite samples".into()));
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &EcgTrace) -> Result<()> {
        if self.leads != other.leads {
            return Err(Error::Mismatch(format!(
                "lead sets differ: {:?} vs {:?}",
                self.leads, other.leads
            )));
        }
        if !self.grid.same_as(&other.grid) {
            return Err(Error::Mismatch(format!(
                "temporal grids differ: {:?} vs {:?}",
                self.grid, other.grid
            )));
        }
        Ok(())
    }

    /// Lead `name` as a slice.
    pub fn lead(&self, name: &str) -> Option<&[f64]> {
        self.leads.iter().position(|l| l == name).map(|i| self.values[i].as_slice())
    }
}

fn check_vectors(tau: &[f64], b: &[Vec<f64>], names: &[String]) -> Result<()> {
    if b.len() != names.len() {
        return Err(Error::Mismatch(format!(
            "{} lead vectors for {} leads",
            b.len(),
            names.len()
        )));
    }
    if let Some(bl) = b.iter().find(|bl| bl.len() != tau.len()) {
        return Err(Error::Mismatch(format!(
            "lead vector has {} entries, activation map has {} vertices",
            bl.len(),
            tau.len()
        )));
    }
    Ok(())
}

/// `V_l(t_k) = B_l . V_m(t_k)` for every lead and sample.
pub fn ecg_from_activation(
    tau: &[f64],
    b: &[Vec<f64>],
    names: &[String],
    grid: &TemporalGrid,
    params: &WaveformParams,
) -> Result<EcgTrace> {
    check_vectors(tau, b, names)?;
    params.validate()?;
    let ns = grid.num_samples();
    let amp = params.amplitude();
    // Per-vertex window and unsaturated upstroke values, shared by all leads.
    let windows: Vec<Option<(usize, Vec<f64>)>> = tau
        .par_iter()
        .map(|&t| {
            params.window(t, grid).map(|(lo, hi)| {
                let u = (lo..=hi).map(|k| transmembrane(t, grid.time(k), params) - params.v_rest).collect();
                (lo, u)
            })
        })
        .collect();
    let values = b
        .par_iter()
        .map(|bl| {
            let mut trace = vec![0.0; ns];
            let mut step = vec![0.0; ns + 1];
            let mut total = 0.0;
            for (j, w) in windows.iter().enumerate() {
                let bj = bl[j];
                total += bj;
                if bj == 0.0 {
                    continue;
                }
                if let Some((lo, u)) = w {
                    for (i, x) in u.iter().enumerate() {
                        trace[lo + i] += bj * x;
                    }
                    step[lo + u.len()] += bj * amp;
                }
            }
            let base = params.v_rest * total;
            let mut plateau = 0.0;
            for k in 0..ns {
                plateau += step[k];
                trace[k] += base + plateau;
            }
            trace
        })
        .collect();
    Ok(EcgTrace {
        leads: names.to_vec(),
        grid: *grid,
        values,
    })
}

/// Least-squares mismatch `1/(L |T|) sum_l sum_k (V - V_hat)^2` (mV^2 / ms).
pub fn loss(simulated: &EcgTrace, target: &EcgTrace) -> Result<f64> {
    simulated.check_compatible(target)?;
    let mut s = 0.0;
    for (a, b) in simulated.values.iter().zip(&target.values) {
        for (x, y) in a.iter().zip(b) {
            s += (x - y) * (x - y);
        }
    }
    Ok(s / (simulated.num_leads() as f64 * simulated.grid.duration()))
}

/// Gradient of [`loss`] with respect to every vertex activation time.
pub fn loss_gradient_wrt_tau(
    simulated: &EcgTrace,
    target: &EcgTrace,
    tau: &[f64],
    b: &[Vec<f64>],
    params: &WaveformParams,
) -> Result<Vec<f64>> {
    simulated.check_compatible(target)?;
    check_vectors(tau, b, &simulated.leads)?;
    let grid = simulated.grid;
    let scale = 2.0 / (simulated.num_leads() as f64 * grid.duration());
    let residual: Vec<Vec<f64>> = simulated
        .values
        .iter()
        .zip(&target.values)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
        .collect();
    Ok(tau
        .par_iter()
        .enumerate()
        .map(|(j, &t)| {
            let Some((lo, hi)) = params.window(t, &grid) else {
                return 0.0;
            };
            let d: Vec<f64> = (lo..=hi).map(|k| transmembrane_dtau(t, grid.time(k), params)).collect();
            let mut g = 0.0;
            for (bl, r) in b.iter().zip(&residual) {
                let bj = bl[j];
                if bj == 0.0 {
                    continue;
                }
                let mut s = 0.0;
                for (i, dk) in d.iter().enumerate() {
                    s += r[lo + i] * dk;
                }
                g += bj * s;
            }
            scale * g
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TemporalGrid {
        TemporalGrid::new(0.0, 0.5, 120).unwrap()
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("L{i}")).collect()
    }

    /// Direct evaluation of every vertex at every sample.
    fn dense(tau: &[f64], b: &[Vec<f64>], g: &TemporalGrid, p: &WaveformParams) -> Vec<Vec<f64>> {
        b.iter()
            .map(|bl| {
                g.times()
                    .map(|t| bl.iter().zip(tau).map(|(bj, &tj)| bj * transmembrane(tj, t, p)).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn waveform_values() {
        let p = WaveformParams::default();
        assert_eq!(transmembrane(10.0, 10.0, &p), -27.5);
        assert_eq!(transmembrane(10.0, -1e6, &p), -85.0);
        let expect = -85.0 + 115.0 / 2.0 * (2.0f64.tanh() + 1.0);
        assert!((transmembrane(3.0, 4.0, &p) - expect).abs() < 1e-12);
        assert!((expect - 27.932).abs() < 1e-3);
    }

    #[test]
    fn windowed_trace_matches_dense_evaluation() {
        let p = WaveformParams::default();
        let g = grid();
        let tau: Vec<f64> = (0..50).map(|i| (i as f64 * 7.3) % 55.0 + 0.13).collect();
        let b: Vec<Vec<f64>> = (0..3)
            .map(|l| (0..50).map(|j| ((j * (l + 2)) as f64 * 0.7).sin()).collect())
            .collect();
        let fast = ecg_from_activation(&tau, &b, &names(3), &g, &p).unwrap();
        let slow = dense(&tau, &b, &g, &p);
        for (a, b) in fast.values.iter().zip(&slow) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn zero_vectors_give_zero_trace() {
        let tau = vec![5.0; 10];
        let b = vec![vec![0.0; 10]; 2];
        let t = ecg_from_activation(&tau, &b, &names(2), &grid(), &WaveformParams::default()).unwrap();
        assert!(t.values.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let r = ecg_from_activation(&[1.0; 4], &[vec![1.0; 5]], &names(1), &grid(), &WaveformParams::default());
        assert!(matches!(r, Err(Error::Mismatch(_))));
    }

    #[test]
    fn loss_of_constant_offset() {
        let g = grid();
        let a = EcgTrace::zeros(names(4), g);
        let mut b = a.clone();
        b.values[2].iter_mut().for_each(|v| *v = 0.7);
        let expect = 0.49 * (g.n as f64 + 1.0) / (4.0 * g.duration());
        assert!((loss(&a, &b).unwrap() - expect).abs() < 1e-15);
        assert_eq!(loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = WaveformParams::default();
        let g = grid();
        let tau: Vec<f64> = (0..30).map(|i| (i as f64 * 3.1) % 50.0 + 2.0).collect();
        let b: Vec<Vec<f64>> = (0..2)
            .map(|l| (0..30).map(|j| ((j + 3 * l) as f64 * 1.3).cos()).collect())
            .collect();
        let target_tau: Vec<f64> = tau.iter().map(|t| t + 1.7).collect();
        let target = ecg_from_activation(&target_tau, &b, &names(2), &g, &p).unwrap();
        let f = |tau: &[f64]| loss(&ecg_from_activation(tau, &b, &names(2), &g, &p).unwrap(), &target).unwrap();
        let sim = ecg_from_activation(&tau, &b, &names(2), &g, &p).unwrap();
        let grad = loss_gradient_wrt_tau(&sim, &target, &tau, &b, &p).unwrap();
        let h = 1e-3;
        for j in [0, 7, 19] {
            let mut up = tau.clone();
            up[j] += h;
            let mut dn = tau.clone();
            dn[j] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - grad[j]).abs() < 1e-4 * fd.abs().max(1e-8), "{fd} vs {}", grad[j]);
        }
        let self_grad = loss_gradient_wrt_tau(&target, &target, &target_tau, &b, &p).unwrap();
        assert!(self_grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shifting_tau_by_whole_steps_shifts_samples() {
        let p = WaveformParams::default();
        let g = grid();
        let tau: Vec<f64> = (0..20).map(|i| 10.0 + i as f64 * 0.37).collect();
        let b = vec![(0..20).map(|j| (j as f64).sin()).collect::<Vec<_>>()];
        let a = ecg_from_activation(&tau, &b, &names(1), &g, &p).unwrap();
        let shifted: Vec<f64> = tau.iter().map(|t| t + 4.0 * g.dt).collect();
        let s = ecg_from_activation(&shifted, &b, &names(1), &g, &p).unwrap();
        for k in 0..g.n - 4 {
            assert!((s.values[0][k + 4] - a.values[0][k]).abs() < 1e-9);
        }
    }
}
