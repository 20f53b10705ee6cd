//! Glue shared by the command-line driver and the acceptance suite: anatomy
//! setup, ground-truth fabrication and body-surface maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::anatomy::{generate, AnatomyParams, TORSO_SKIN};
use crate::ecg::{ecg_from_activation, transmembrane, EcgTrace, TemporalGrid, WaveformParams};
use crate::eikonal::{ActivationMap, EikonalConfig, EikonalSolver, PmjSet};
use crate::error::{Error, Result};
use crate::feasible::{ConstraintSpec, FeasibleRegion};
use crate::fem::TorsoModel;
use crate::leads::LeadSet;
use crate::mesh::{region, TetMesh};
use crate::metrics::Bspm;
use crate::velocity::{Speeds, VelocityField};

/// Torso mesh plus the ventricular submesh the eikonal model runs on.
#[derive(Debug, Clone)]
pub struct Anatomy {
    pub torso: TetMesh,
    pub heart: TetMesh,
    /// Torso vertex id of each heart vertex.
    pub heart_ids: Vec<usize>,
}

impl Anatomy {
    pub fn from_torso(torso: TetMesh) -> Result<Self> {
        torso.surface(TORSO_SKIN)?;
        let (heart, heart_ids) = torso.extract_region(&[region::VENTRICLE])?;
        if heart.num_tets() == 0 {
            return Err(Error::InvalidInput("mesh has no ventricular elements".into()));
        }
        Ok(Anatomy {
            torso,
            heart,
            heart_ids,
        })
    }

    pub fn generate(params: &AnatomyParams) -> Result<Self> {
        Self::from_torso(generate(params)?)
    }
}

/// Settings for fabricating the ground truth.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSpec {
    /// Number of hidden PMJs, placed in the subendocardial band.
    pub hidden_pmjs: usize,
    /// Range of hidden PMJ timings (ms).
    pub timing_range: [f64; 2],
    pub speeds: Speeds,
    /// Relative speed change applied to the ground-truth model only.
    pub cv_perturbation: f64,
    /// Standard deviation of additive Gaussian noise on the target (mV).
    pub noise_mv: f64,
    /// Sampling step (ms).
    pub dt: f64,
    /// Time after the last activation covered by the target (ms).
    pub guard_ms: f64,
    /// Every `bspm_stride`-th ECG sample gets a body-surface snapshot.
    pub bspm_stride: usize,
    pub waveform: WaveformParams,
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec {
            hidden_pmjs: 20,
            timing_range: [0.0, 20.0],
            speeds: Speeds::myocardium(),
            cv_perturbation: 0.0,
            noise_mv: 0.0,
            dt: 0.5,
            guard_ms: 10.0,
            bspm_stride: 4,
            waveform: WaveformParams::default(),
        }
    }
}

impl TargetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("target: {m}")));
        if self.hidden_pmjs == 0 {
            return bad("hidden_pmjs must be at least 1");
        }
        let [a, b] = self.timing_range;
        if !(a >= 0.0 && b >= a && b.is_finite()) {
            return bad("timing_range must satisfy 0 <= t0 <= t1");
        }
        let s = self.speeds;
        if !(s.fiber > 0.0 && s.sheet > 0.0 && s.normal > 0.0) {
            return bad("speeds must be positive");
        }
        if !(self.cv_perturbation > -1.0 && self.cv_perturbation.is_finite()) {
            return bad("cv_perturbation must exceed -1");
        }
        if !(self.noise_mv >= 0.0) || !(self.dt > 0.0) || !(self.guard_ms >= 0.0) || self.bspm_stride == 0 {
            return bad("need noise_mv >= 0, dt > 0, guard_ms >= 0 and bspm_stride >= 1");
        }
        self.waveform.validate()
    }

    /// Speeds of the ground-truth model.
    pub fn gt_speeds(&self) -> Speeds {
        self.speeds.scaled(1.0 + self.cv_perturbation)
    }
}

pub fn velocity_field(heart: &TetMesh, speeds: Speeds) -> Result<VelocityField> {
    VelocityField::uniform(heart, speeds)
}

/// Grid from 0 covering the latest finite activation time plus `guard`.
pub fn target_grid(tau: &[f64], dt: f64, guard: f64) -> Result<TemporalGrid> {
    let last = tau.iter().copied().filter(|t| t.is_finite()).fold(0.0, f64::max);
    TemporalGrid::covering(0.0, dt, last + guard)
}

/// Hidden PMJs: uniform on the band source surface, timings uniform in range.
pub fn hidden_pmjs(heart: &TetMesh, spec: &TargetSpec, seed: u64) -> Result<PmjSet> {
    let band = FeasibleRegion::build(heart, &ConstraintSpec::default())?;
    band.sample_initial(heart, spec.hidden_pmjs, (spec.timing_range[0], spec.timing_range[1]), seed)
}

/// Adds i.i.d. Gaussian noise to every sample.
pub fn add_noise(trace: &mut EcgTrace, sigma: f64, seed: u64) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(format!("noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in trace.values.iter_mut().flatten() {
        *v += normal.sample(&mut rng);
    }
    Ok(())
}

/// Snapshot grid for body-surface maps: every `stride`-th sample of `ecg`.
pub fn bspm_grid(ecg: &TemporalGrid, stride: usize) -> Result<TemporalGrid> {
    let n = ecg.n / stride;
    TemporalGrid::new(ecg.t0, ecg.dt * stride as f64, n.max(1))
}

/// Torso-surface potentials for an activation map, one pseudo-bidomain solve
/// per snapshot, each warm-started from the previous one.
pub fn bspm_from_activation(
    model: &TorsoModel,
    tau: &[f64],
    grid: &TemporalGrid,
    waveform: &WaveformParams,
) -> Result<Bspm> {
    let mut values = Vec::with_capacity(grid.num_samples());
    let mut warm: Option<Vec<f64>> = None;
    for t in grid.times() {
        let vm: Vec<f64> = tau.iter().map(|&ti| transmembrane(ti, t, waveform)).collect();
        let pot = model.solve_pseudo_bidomain(&vm, warm.as_deref())?;
        values.push(model.skin_vertices().iter().map(|&v| pot.phi[v]).collect());
        warm = Some(pot.phi);
    }
    Ok(Bspm {
        vertices: model.skin_vertices().to_vec(),
        grid: *grid,
        values,
    })
}

/// Ground-truth bundle.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub pmjs: PmjSet,
    pub map: ActivationMap,
    pub ecg: EcgTrace,
}

/// Runs the forward model on hidden PMJs and samples the target ECG.
pub fn fabricate(
    anatomy: &Anatomy,
    leads: &LeadSet,
    spec: &TargetSpec,
    eikonal: EikonalConfig,
    seed: u64,
) -> Result<GroundTruth> {
    spec.validate()?;
    if !leads.has_vectors() || leads.b[0].len() != anatomy.heart.num_vertices() {
        return Err(Error::Mismatch("lead set has no vectors for this anatomy".into()));
    }
    let pmjs = hidden_pmjs(&anatomy.heart, spec, seed)?;
    let velocity = velocity_field(&anatomy.heart, spec.gt_speeds())?;
    let solver = EikonalSolver::new(&anatomy.heart, &velocity, eikonal)?;
    let map = solver.solve(&pmjs)?;
    let grid = target_grid(&map.tau, spec.dt, spec.guard_ms)?;
    let mut ecg = ecg_from_activation(&map.tau, &leads.b, &leads.lead_names, &grid, &spec.waveform)?;
    add_noise(&mut ecg, spec.noise_mv, seed ^ 0x6e6f697365)?;
    let mut pmjs = pmjs;
    pmjs.active = map.active.clone();
    Ok(GroundTruth { pmjs, map, ecg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{CgConfig, ConductivityTable};
    use crate::leads::{make_leadset, LeadLayout, Placement};

    fn small() -> AnatomyParams {
        AnatomyParams {
            outer_radius: 12.0,
            outer_height: 18.0,
            wall: 5.0,
            heart_h: 1.5,
            torso_h: 8.0,
            torso_min: [-40.0, -35.0, -40.0],
            torso_max: [40.0, 35.0, 20.0],
            lungs: false,
            ..Default::default()
        }
    }

    #[test]
    fn ground_truth_is_reproducible_and_consistent() {
        let anatomy = Anatomy::generate(&small()).unwrap();
        let model = TorsoModel::new(
            &anatomy.torso,
            &anatomy.heart_ids,
            &ConductivityTable::default(),
            TORSO_SKIN,
            CgConfig::default(),
        )
        .unwrap();
        let mut leads = make_leadset(&anatomy.torso, TORSO_SKIN, LeadLayout::Limb4, &Placement::default()).unwrap();
        model.precompute_lead_vectors(&mut leads).unwrap();
        let spec = TargetSpec {
            hidden_pmjs: 5,
            ..Default::default()
        };
        let a = fabricate(&anatomy, &leads, &spec, EikonalConfig::default(), 3).unwrap();
        let b = fabricate(&anatomy, &leads, &spec, EikonalConfig::default(), 3).unwrap();
        assert_eq!(a.ecg, b.ecg);
        assert_eq!(a.pmjs, b.pmjs);
        let last = a.map.tau.iter().cloned().fold(0.0, f64::max);
        assert!(a.ecg.grid.t_end() >= last + 10.0 && a.ecg.grid.t_end() < last + 10.5);

        // A perturbed model keeps the PMJs but changes the trace.
        let fast = TargetSpec {
            cv_perturbation: 0.1,
            ..spec.clone()
        };
        let c = fabricate(&anatomy, &leads, &fast, EikonalConfig::default(), 3).unwrap();
        assert_eq!(c.pmjs.pmjs, a.pmjs.pmjs);
        assert_ne!(c.map.tau, a.map.tau);

        // The lead projection agrees with direct readout of the surface map.
        let grid = bspm_grid(&a.ecg.grid, 8).unwrap();
        let maps = bspm_from_activation(&model, &a.map.tau, &grid, &spec.waveform).unwrap();
        let sub = ecg_from_activation(&a.map.tau, &leads.b, &leads.lead_names, &grid, &spec.waveform).unwrap();
        let lead = 1;
        for k in 0..grid.num_samples() {
            let direct: f64 = leads.scale
                * leads.weights[lead]
                    .iter()
                    .zip(&leads.electrode_vertices)
                    .map(|(w, &v)| w * maps.values[k][maps.vertices.iter().position(|&x| x == v).unwrap()])
                    .sum::<f64>();
            let via_b = sub.values[lead][k];
            assert!((direct - via_b).abs() < 1e-6 * (1.0 + via_b.abs()), "{direct} vs {via_b}");
        }
    }

    #[test]
    fn noise_is_seeded() {
        let grid = TemporalGrid::new(0.0, 1.0, 10).unwrap();
        let mut a = EcgTrace::zeros(vec!["I".into()], grid);
        let mut b = a.clone();
        add_noise(&mut a, 0.1, 4).unwrap();
        add_noise(&mut b, 0.1, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.values[0].iter().any(|&v| v != 0.0));
    }
}
