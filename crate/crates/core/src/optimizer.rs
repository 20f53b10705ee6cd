//! Projected ADAM on PMJ positions and timings, plus multi-start drivers.

use std::time::Instant;

use rayon::prelude::*;

use crate::adjoint::{region_of_influence, PmjGradient, RegionOfInfluence};
use crate::ecg::{ecg_from_activation, loss, loss_gradient_wrt_tau, EcgTrace, WaveformParams};
use crate::eikonal::{ActivationMap, EikonalSolver, PmjSet};
use crate::error::{Error, Result};
use crate::feasible::FeasibleRegion;
use crate::metrics::relative_dist_ecg;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub iterations: usize,
    /// Step size for positions (mm) and, unless overridden, timings (ms).
    pub learning_rate: f64,
    pub learning_rate_time: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Number of PMJs per initial set.
    pub n_pmj: usize,
    /// Stop once the relative ECG distance falls below this value.
    pub early_stop: Option<f64>,
    /// Cosine decay of both learning rates down to this fraction at the last
    /// iteration; `None` keeps them constant.
    pub lr_final_fraction: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            iterations: 400,
            learning_rate: 0.75,
            learning_rate_time: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            n_pmj: 300,
            early_stop: None,
            lr_final_fraction: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let lr_ok = |x: f64| x > 0.0 && x.is_finite();
        if self.iterations == 0 {
            return Err(Error::InvalidInput("optimizer.iterations must be at least 1".into()));
        }
        if !lr_ok(self.learning_rate) || !self.learning_rate_time.map_or(true, lr_ok) {
            return Err(Error::InvalidInput("optimizer learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::InvalidInput(
                "optimizer needs beta1, beta2 in [0, 1) and epsilon > 0".into(),
            ));
        }
        if self.lr_final_fraction.is_some_and(|f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::InvalidInput("optimizer.lr_final_fraction must lie in (0, 1]".into()));
        }
        if self.n_pmj == 0 {
            return Err(Error::InvalidInput("optimizer.n_pmj must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything a run reads but never mutates.
pub struct Problem<'a> {
    pub solver: &'a EikonalSolver<'a>,
    pub region: &'a FeasibleRegion,
    /// Lead vectors on the solver mesh, one per target lead.
    pub lead_vectors: &'a [Vec<f64>],
    pub target: &'a EcgTrace,
    pub waveform: WaveformParams,
}

/// Forward pass for one PMJ set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub map: ActivationMap,
    pub ecg: EcgTrace,
    pub loss: f64,
}

impl<'a> Problem<'a> {
    pub fn new(
        solver: &'a EikonalSolver<'a>,
        region: &'a FeasibleRegion,
        lead_vectors: &'a [Vec<f64>],
        target: &'a EcgTrace,
        waveform: WaveformParams,
    ) -> Result<Self> {
        target.validate()?;
        waveform.validate()?;
        if lead_vectors.len() != target.num_leads() {
            return Err(Error::Mismatch(format!(
                "{} lead vectors for a {}-lead target",
                lead_vectors.len(),
                target.num_leads()
            )));
        }
        let n = solver.mesh().num_vertices();
        if lead_vectors.iter().any(|b| b.len() != n) {
            return Err(Error::Mismatch("lead vectors do not match the ventricular mesh".into()));
        }
        Ok(Problem {
            solver,
            region,
            lead_vectors,
            target,
            waveform,
        })
    }

    pub fn simulate(&self, map: &ActivationMap) -> Result<EcgTrace> {
        ecg_from_activation(
            &map.tau,
            self.lead_vectors,
            &self.target.leads,
            &self.target.grid,
            &self.waveform,
        )
    }

    pub fn evaluate(&self, pmjs: &PmjSet) -> Result<Evaluation> {
        let map = self.solver.solve(pmjs)?;
        let ecg = self.simulate(&map)?;
        let loss = loss(&ecg, self.target)?;
        Ok(Evaluation { map, ecg, loss })
    }

    /// Gradient of the loss with respect to every PMJ position and timing.
    pub fn gradient(&self, pmjs: &PmjSet, eval: &Evaluation) -> Result<PmjGradient> {
        let cot = loss_gradient_wrt_tau(&eval.ecg, self.target, &eval.map.tau, self.lead_vectors, &self.waveform)?;
        eval.map
            .tape()
            .backward(self.solver.mesh(), self.solver.velocity(), pmjs, &cot)
    }

    pub fn roi(&self, pmjs: &PmjSet, map: &ActivationMap) -> Result<RegionOfInfluence> {
        region_of_influence(map.tape(), self.solver.mesh(), self.solver.velocity(), pmjs)
    }
}

/// Outcome of one calibration run, reported at its best-loss iterate.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub seed: u64,
    pub initial: PmjSet,
    /// Loss before the first step and after every step.
    pub loss_history: Vec<f64>,
    pub iteration_seconds: Vec<f64>,
    pub best_iteration: usize,
    pub pmjs: PmjSet,
    pub map: ActivationMap,
    pub ecg: EcgTrace,
    pub loss: f64,
    pub relative_dist_ecg: f64,
    pub roi: RegionOfInfluence,
    /// Iterations whose gradient had non-finite entries and were not applied.
    pub skipped: Vec<usize>,
    /// Error that ended the run early, if any.
    pub failure: Option<String>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

fn with_activity(mut pmjs: PmjSet, map: &ActivationMap) -> PmjSet {
    pmjs.active = map.active.clone();
    pmjs
}

/// Runs projected ADAM from `initial` and returns the best-loss iterate.
pub fn optimize(problem: &Problem, initial: &PmjSet, config: &OptimizerConfig, seed: u64) -> Result<RunRecord> {
    config.validate()?;
    let mesh = problem.solver.mesh();
    let lr_t = config.learning_rate_time.unwrap_or(config.learning_rate);
    let mut x = problem.region.project(mesh, initial)?;
    let mut adam = Adam::new(4 * x.len());
    let mut history = Vec::with_capacity(config.iterations + 1);
    let mut seconds = Vec::with_capacity(config.iterations + 1);
    let mut skipped = Vec::new();
    let mut failure = None;
    let mut best: Option<(usize, PmjSet, Evaluation)> = None;

    for it in 0..=config.iterations {
        let start = Instant::now();
        let eval = match problem.evaluate(&x) {
            Ok(e) => e,
            Err(e) if best.is_some() => {
                failure = Some(format!("iteration {it}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        history.push(eval.loss);
        let improved = best.as_ref().map_or(true, |b| eval.loss < b.2.loss);
        let stop = it == config.iterations
            || config
                .early_stop
                .is_some_and(|thr| relative_dist_ecg(&eval.ecg, problem.target).is_ok_and(|d| d < thr));
        let grad = if stop { None } else { Some(problem.gradient(&x, &eval)) };
        let active = eval.map.active.clone();
        if improved {
            best = Some((it, with_activity(x.clone(), &eval.map), eval));
        }
        let Some(grad) = grad else {
            seconds.push(start.elapsed().as_secs_f64());
            break;
        };
        let grad = match grad {
            Ok(g) => g,
            Err(e) => {
                failure = Some(format!("iteration {it}: {e}"));
                seconds.push(start.elapsed().as_secs_f64());
                break;
            }
        };
        let finite = grad.timings.iter().all(|g| g.is_finite())
            && grad.positions.iter().all(|p| p.iter().all(|c| c.is_finite()));
        if !finite {
            log::warn!("non-finite gradient at iteration {it}; step skipped");
            skipped.push(it);
            seconds.push(start.elapsed().as_secs_f64());
            continue;
        }
        adam.t += 1;
        let decay = config.lr_final_fraction.map_or(1.0, |f| {
            let progress = it as f64 / config.iterations.max(2).saturating_sub(1) as f64;
            f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
        });
        let b1t = 1.0 - config.beta1.powi(adam.t);
        let b2t = 1.0 - config.beta2.powi(adam.t);
        let mut next = x.clone();
        for (j, pmj) in next.pmjs.iter_mut().enumerate() {
            // Inactive PMJs have an identically zero gradient; leave them and
            // their moments untouched.
            if !active[j] {
                continue;
            }
            let g = [grad.positions[j].x, grad.positions[j].y, grad.positions[j].z, grad.timings[j]];
            let mut step = [0.0; 4];
            for (c, gc) in g.iter().enumerate() {
                let i = 4 * j + c;
                adam.m[i] = config.beta1 * adam.m[i] + (1.0 - config.beta1) * gc;
                adam.v[i] = config.beta2 * adam.v[i] + (1.0 - config.beta2) * gc * gc;
                let mhat = adam.m[i] / b1t;
                let vhat = adam.v[i] / b2t;
                let lr = decay * if c == 3 { lr_t } else { config.learning_rate };
                step[c] = lr * mhat / (vhat.sqrt() + config.epsilon);
            }
            pmj.position.x -= step[0];
            pmj.position.y -= step[1];
            pmj.position.z -= step[2];
            pmj.time -= step[3];
        }
        x = problem.region.project(mesh, &next)?;
        seconds.push(start.elapsed().as_secs_f64());
    }

    let (best_iteration, pmjs, eval) = best.expect("the first iteration either succeeds or returns");
    let roi = problem.roi(&pmjs, &eval.map)?;
    let relative = relative_dist_ecg(&eval.ecg, problem.target)?;
    Ok(RunRecord {
        seed,
        initial: initial.clone(),
        loss_history: history,
        iteration_seconds: seconds,
        best_iteration,
        pmjs,
        loss: eval.loss,
        relative_dist_ecg: relative,
        map: eval.map,
        ecg: eval.ecg,
        roi,
        skipped,
        failure,
    })
}

/// Initial PMJ set for a run: area-uniform on the region's source surface,
/// timings uniform over the target window.
pub fn initial_set(problem: &Problem, n: usize, seed: u64) -> Result<PmjSet> {
    let g = problem.target.grid;
    problem
        .region
        .sample_initial(problem.solver.mesh(), n, (g.t0, g.t_end()), seed)
}

/// Seed of ensemble member `i`.
pub fn member_seed(base: u64, i: usize) -> u64 {
    base.wrapping_add(i as u64)
}

/// `count` independent runs with seeds `base, base + 1, ...`, in parallel.
/// A failing run is reported as `Err` without stopping the others.
pub fn run_ensemble(problem: &Problem, config: &OptimizerConfig, count: usize, base_seed: u64) -> Vec<Result<RunRecord>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = member_seed(base_seed, i);
            let init = initial_set(problem, config.n_pmj, seed)?;
            optimize(problem, &init, config, seed)
        })
        .collect()
}

/// Runs of one PMJ count in a sweep.
#[derive(Debug)]
pub struct SweepCell {
    pub n_pmj: usize,
    pub runs: Vec<Result<RunRecord>>,
}

/// Ensembles of `runs` members for each PMJ count in `counts`.
pub fn sweep_pmj_count(
    problem: &Problem,
    config: &OptimizerConfig,
    counts: &[usize],
    runs: usize,
    base_seed: u64,
) -> Result<Vec<SweepCell>> {
    if counts.iter().any(|&n| n == 0) {
        return Err(Error::InvalidInput("PMJ counts must be at least 1".into()));
    }
    Ok(counts
        .iter()
        .map(|&n| {
            let cfg = OptimizerConfig {
                n_pmj: n,
                ..config.clone()
            };
            SweepCell {
                n_pmj: n,
                runs: run_ensemble(problem, &cfg, runs, base_seed),
            }
        })
        .collect())
}
