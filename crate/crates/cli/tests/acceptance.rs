//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers to run a subset, e.g.
//! `cargo test --release --test acceptance -- 1 5`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use eikonal_twin::adjoint::{region_of_influence, Provenance};
use eikonal_twin::anatomy::{AnatomyParams, TORSO_SKIN};
use eikonal_twin::ecg::{ecg_from_activation, EcgTrace, TemporalGrid, WaveformParams};
use eikonal_twin::eikonal::{ActivationMap, EikonalConfig, EikonalSolver, Pmj, PmjSet};
use eikonal_twin::feasible::{ConstraintMode, ConstraintSpec, FeasibleRegion};
use eikonal_twin::fem::{CgConfig, ConductivityTable, TorsoModel};
use eikonal_twin::geometry::Vec3;
use eikonal_twin::leads::{make_leadset, LeadLayout, LeadSet, Placement};
use eikonal_twin::mesh::{box_mesh, Location, TetMesh};
use eikonal_twin::metrics::{ensemble_stats, pearson, Bspm};
use eikonal_twin::optimizer::{run_ensemble, OptimizerConfig, Problem, RunRecord};
use eikonal_twin::pipeline::{bspm_from_activation, bspm_grid, fabricate, velocity_field, Anatomy, GroundTruth, TargetSpec};
use eikonal_twin::velocity::{metric_norm, Speeds, VelocityField};
use eikonal_twin_cli::commands::median;
use eikonal_twin_cli::report::{mean_se, score_run, RunData, Scoring};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

// ---------------------------------------------------------------- 1

fn eikonal_accuracy() -> Outcome {
    // 31^3 = 29,791 vertices, source at the central vertex.
    let mesh = box_mesh([30, 30, 30], 1.0, Vec3::new(-15.0, -15.0, -15.0));
    let source = PmjSet::new(vec![Pmj::new(Vec3::zeros(), 0.0)]);
    let run = |speeds: Speeds, seed_radius: f64| {
        let v = VelocityField::uniform(&mesh, speeds).unwrap();
        let cfg = EikonalConfig {
            seed_radius,
            ..Default::default()
        };
        let solver = EikonalSolver::new(&mesh, &v, cfg).unwrap();
        let t = Instant::now();
        let map = solver.solve(&source).unwrap();
        let secs = t.elapsed().as_secs_f64();
        let metric = v.metric(0);
        let worst = mesh
            .vertices()
            .iter()
            .zip(&map.tau)
            .filter_map(|(p, &tau)| {
                let d = metric_norm(metric, p);
                (d > 0.0).then(|| (tau - d).abs() / d)
            })
            .fold(0.0, f64::max);
        (worst, secs)
    };
    let (iso, t_iso) = run(Speeds::isotropic(1.0), 6.0);
    let aniso_speeds = Speeds::myocardium();
    let (aniso, t_aniso) = run(aniso_speeds, 6.0 / aniso_speeds.sheet);
    let (raw_iso, _) = run(Speeds::isotropic(1.0), 0.0);
    let (raw_aniso, _) = run(aniso_speeds, 0.0);
    let pass = iso < 0.02 && aniso < 0.03 && t_iso < 5.0 && t_aniso < 5.0;
    (
        pass,
        format!(
            "{} vertices; isotropic max rel err {:.2}% ({t_iso:.2} s), anisotropic {:.2}% ({t_aniso:.2} s); \
             seed radius 6 h; tet-only seeding gives {:.2}% / {:.2}%",
            mesh.num_vertices(),
            100.0 * iso,
            100.0 * aniso,
            100.0 * raw_iso,
            100.0 * raw_aniso
        ),
    )
}

// ---------------------------------------------------------------- shared small heart

fn small_heart() -> TetMesh {
    let params = AnatomyParams {
        outer_radius: 12.0,
        outer_height: 18.0,
        wall: 5.0,
        heart_h: 1.5,
        torso_h: 8.0,
        torso_min: [-30.0, -30.0, -30.0],
        torso_max: [30.0, 30.0, 15.0],
        lungs: false,
        ..Default::default()
    };
    Anatomy::generate(&params).unwrap().heart
}

fn strict() -> EikonalConfig {
    EikonalConfig {
        tolerance: 1e-12,
        max_iters: 100_000,
        ..Default::default()
    }
}

fn random_times(pmjs: &mut PmjSet, range: (f64, f64), rng: &mut ChaCha8Rng) {
    for p in &mut pmjs.pmjs {
        p.time = rng.random_range(range.0..range.1);
    }
}

// ---------------------------------------------------------------- 2

/// PMJs at random interior points of random tets.
fn interior_pmjs(mesh: &TetMesh, n: usize, times: (f64, f64), rng: &mut ChaCha8Rng) -> PmjSet {
    let pmjs = (0..n)
        .map(|_| {
            let k = rng.random_range(0..mesh.num_tets());
            let w: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.05..1.0));
            let s: f64 = w.iter().sum();
            let p = mesh.tet_points(k).iter().zip(w).fold(Vec3::zeros(), |acc, (q, wi)| acc + *q * (wi / s));
            Pmj::new(p, rng.random_range(times.0..times.1))
        })
        .collect();
    PmjSet::new(pmjs)
}

/// Discrete branch of a solve: seed tets plus, per vertex, which candidate
/// won and on which support. Equal branches mean the arrival times are one
/// smooth function across the finite-difference stencil.
fn branch(map: &ActivationMap, n_pmj: usize) -> (Vec<Option<usize>>, Vec<bool>, Vec<(u8, u32, [u32; 3], [bool; 3])>) {
    let tape = map.tape();
    let seeds = (0..n_pmj).map(|j| tape.seed_site(j).map(|s| s.tet)).collect();
    let prov = tape
        .provenance()
        .iter()
        .map(|p| match *p {
            Provenance::Unreached => (0, 0, [0; 3], [false; 3]),
            Provenance::Seed { pmj } => (1, pmj, [0; 3], [false; 3]),
            Provenance::Face { tet, upstream, weights } => (2, tet, upstream, weights.map(|w| w > 0.0)),
        })
        .collect();
    (seeds, map.active.clone(), prov)
}

fn gradient_check() -> Outcome {
    let mesh = small_heart();
    let velocity = velocity_field(&mesh, Speeds::myocardium()).unwrap();
    let solver = EikonalSolver::new(&mesh, &velocity, strict()).unwrap();
    let region = FeasibleRegion::build(&mesh, &ConstraintSpec::unrestricted()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let nv = mesh.num_vertices();
    let names: Vec<String> = (0..3).map(|i| format!("L{i}")).collect();
    let b: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..nv).map(|_| rng.random_range(-1.0..1.0) * 1e-3).collect())
        .collect();
    let waveform = WaveformParams::default();
    let grid = TemporalGrid::new(0.0, 0.5, 120).unwrap();
    let (ht, hx) = (1e-3, 1e-3);
    let (mut worst_t, mut worst_x) = (0.0f64, 0.0f64);
    let (mut ok_t, mut ok_x, mut tried) = (0, 0, 0);
    let mut filtered = (0, 0);
    while (ok_t < 50 || ok_x < 50) && tried < 400 {
        tried += 1;
        let seed = rng.random::<u64>();
        let n = rng.random_range(2..8);
        let mut truth = region.sample_initial(&mesh, n, (0.0, 15.0), seed).unwrap();
        random_times(&mut truth, (0.0, 15.0), &mut rng);
        let target_map = solver.solve(&truth).unwrap();
        let target = ecg_from_activation(&target_map.tau, &b, &names, &grid, &waveform).unwrap();
        let problem = Problem::new(&solver, &region, &b, &target, waveform).unwrap();
        let x = interior_pmjs(&mesh, n, (0.0, 15.0), &mut rng);
        let base = problem.evaluate(&x).unwrap();
        let g = problem.gradient(&x, &base).unwrap();
        if g.one_sided.iter().any(|&s| s) {
            continue;
        }
        let key = branch(&base.map, n);
        let unit = |len: usize, rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        // Central difference, provided both stencil points share the base branch.
        let stencil = |shift: &dyn Fn(&mut PmjSet, f64)| -> Option<f64> {
            let mut loss = [0.0; 2];
            for (l, s) in loss.iter_mut().zip([1.0, -1.0]) {
                let mut p = x.clone();
                shift(&mut p, s);
                // A stencil point outside the mesh also counts as a branch change.
                let e = problem.evaluate(&p).ok()?;
                if branch(&e.map, n) != key {
                    return None;
                }
                *l = e.loss;
            }
            Some(loss[0] - loss[1])
        };
        if ok_t < 50 {
            let u = unit(n, &mut rng);
            let fd = stencil(&|p: &mut PmjSet, s: f64| {
                for (q, d) in p.pmjs.iter_mut().zip(&u) {
                    q.time += s * ht * d;
                }
            });
            let an: f64 = g.timings.iter().zip(&u).map(|(a, b)| a * b).sum();
            match fd {
                Some(d) if an.abs() > 1e-12 => {
                    worst_t = worst_t.max((d / (2.0 * ht) - an).abs() / an.abs());
                    ok_t += 1;
                }
                _ => filtered.0 += 1,
            }
        }
        if ok_x < 50 {
            let u = unit(3 * n, &mut rng);
            let fd = stencil(&|p: &mut PmjSet, s: f64| {
                for (j, q) in p.pmjs.iter_mut().enumerate() {
                    q.position += Vec3::new(u[3 * j], u[3 * j + 1], u[3 * j + 2]) * (s * hx);
                }
            });
            let an: f64 = g
                .positions
                .iter()
                .enumerate()
                .map(|(j, gp)| gp.x * u[3 * j] + gp.y * u[3 * j + 1] + gp.z * u[3 * j + 2])
                .sum();
            match fd {
                Some(d) if an.abs() > 1e-12 => {
                    worst_x = worst_x.max((d / (2.0 * hx) - an).abs() / an.abs());
                    ok_x += 1;
                }
                _ => filtered.1 += 1,
            }
        }
    }
    let pass = ok_t >= 50 && ok_x >= 50 && worst_t < 1e-3 && worst_x < 1e-2;
    (
        pass,
        format!(
            "{ok_t} timing / {ok_x} position configurations ({} / {} excluded for branch changes); \
             max rel err timings {worst_t:.2e}, positions {worst_x:.2e}",
            filtered.0, filtered.1
        ),
    )
}

// ---------------------------------------------------------------- 3

fn roi_partition() -> Outcome {
    let mesh = small_heart();
    let velocity = velocity_field(&mesh, Speeds::myocardium()).unwrap();
    let solver = EikonalSolver::new(&mesh, &velocity, EikonalConfig::default()).unwrap();
    let region = FeasibleRegion::build(&mesh, &ConstraintSpec::unrestricted()).unwrap();
    let total = mesh.total_volume();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (mut worst, mut consistent, mut inactive) = (0.0f64, true, 0);
    for _ in 0..20 {
        let n = rng.random_range(5..60);
        let mut pmjs = region.sample_initial(&mesh, n, (0.0, 1.0), rng.random()).unwrap();
        random_times(&mut pmjs, (0.0, 40.0), &mut rng);
        let map = solver.solve(&pmjs).unwrap();
        let roi = region_of_influence(map.tape(), &mesh, &velocity, &pmjs).unwrap();
        let sum: f64 = roi.volumes.iter().sum();
        worst = worst.max((sum - total).abs() / total);
        inactive += roi.active.iter().filter(|a| !**a).count();
        consistent &= roi
            .active
            .iter()
            .zip(&roi.volumes)
            .zip(&map.active)
            .all(|((&a, &v), &m)| a == m && (a == (v > 0.0)));
    }
    (
        worst < 1e-9 && consistent && inactive > 0,
        format!("20 sets; max |sum ROI - |Omega|| / |Omega| = {worst:.2e}; {inactive} inactive PMJs, all with ROI 0: {consistent}"),
    )
}

// ---------------------------------------------------------------- 4

fn compatibility() -> Outcome {
    let mesh = small_heart();
    let velocity = velocity_field(&mesh, Speeds::myocardium()).unwrap();
    let cfg = EikonalConfig::default();
    let solver = EikonalSolver::new(&mesh, &velocity, cfg).unwrap();
    let region = FeasibleRegion::build(&mesh, &ConstraintSpec::unrestricted()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let (mut worst, mut all_off, mut kept) = (0.0f64, true, true);
    for _ in 0..20 {
        let mut base = region.sample_initial(&mesh, 5, (0.0, 1.0), rng.random()).unwrap();
        random_times(&mut base, (0.0, 10.0), &mut rng);
        let map = solver.solve(&base).unwrap();
        let extra = region.sample_initial(&mesh, 5, (0.0, 1.0), rng.random()).unwrap();
        let mut all = base.pmjs.clone();
        for p in &extra.pmjs {
            let Location::Inside { tet, bary } = mesh.locate_point(&p.position).unwrap() else {
                continue;
            };
            // Later than the front's arrival interpolated at the site.
            let arrival: f64 = mesh.tets()[tet].iter().zip(bary).map(|(&v, w)| w * map.tau[v]).sum();
            all.push(Pmj::new(p.position, arrival + 2.0));
        }
        let joined = solver.solve(&PmjSet::new(all)).unwrap();
        all_off &= joined.active[base.len()..].iter().all(|a| !a);
        kept &= joined.active[..base.len()] == map.active[..];
        worst = worst.max(joined.tau.iter().zip(&map.tau).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    (
        all_off && kept && worst <= cfg.tolerance,
        format!(
            "20 trials x 5 injected late PMJs; all deactivated: {all_off}; original flags kept: {kept}; \
             max |delta tau| = {worst:.2e} ms (tolerance {:.0e})",
            cfg.tolerance
        ),
    )
}

// ---------------------------------------------------------------- desk anatomy

struct Desk {
    anatomy: Anatomy,
    model: TorsoModel,
    leads: BTreeMap<String, LeadSet>,
    truth: BTreeMap<String, GroundTruth>,
    velocity: VelocityField,
    volumes: Vec<f64>,
    bspm: Bspm,
    setup_seconds: f64,
}

const LAYOUTS: [LeadLayout; 3] = [LeadLayout::Limb4, LeadLayout::Ecg12, LeadLayout::Vest(64)];
const GT_SEED: u64 = 1;

fn desk_params() -> AnatomyParams {
    let d = AnatomyParams::default();
    AnatomyParams {
        heart_h: 2.0,
        outer_radius: 18.0,
        outer_height: 30.0,
        wall: 6.0,
        torso_h: 8.0,
        torso_min: d.torso_min.map(|x| x * 0.75),
        torso_max: d.torso_max.map(|x| x * 0.75),
        ..d
    }
}

impl Desk {
    fn build() -> Desk {
        let t = Instant::now();
        let anatomy = Anatomy::generate(&desk_params()).unwrap();
        let model = TorsoModel::new(
            &anatomy.torso,
            &anatomy.heart_ids,
            &ConductivityTable::default(),
            TORSO_SKIN,
            CgConfig::default(),
        )
        .unwrap();
        let spec = TargetSpec::default();
        let mut leads = BTreeMap::new();
        let mut truth = BTreeMap::new();
        for layout in LAYOUTS {
            let mut set = make_leadset(&anatomy.torso, TORSO_SKIN, layout, &Placement::default()).unwrap();
            model.precompute_lead_vectors(&mut set).unwrap();
            let gt = fabricate(&anatomy, &set, &spec, EikonalConfig::default(), GT_SEED).unwrap();
            truth.insert(layout.to_string(), gt);
            leads.insert(layout.to_string(), set);
        }
        let gt = &truth["ecg12"];
        let grid = bspm_grid(&gt.ecg.grid, 8).unwrap();
        let bspm = bspm_from_activation(&model, &gt.map.tau, &grid, &spec.waveform).unwrap();
        let velocity = velocity_field(&anatomy.heart, spec.speeds).unwrap();
        let volumes = anatomy.heart.lumped_vertex_volumes();
        let setup_seconds = t.elapsed().as_secs_f64();
        println!(
            "  desk anatomy: torso {} vertices, ventricle {} vertices, activation ends at {:.1} ms, setup {setup_seconds:.1} s",
            anatomy.torso.num_vertices(),
            anatomy.heart.num_vertices(),
            gt.map.tau.iter().cloned().fold(0.0, f64::max)
        );
        Desk {
            anatomy,
            model,
            leads,
            truth,
            velocity,
            volumes,
            bspm,
            setup_seconds,
        }
    }

    fn optimizer(n_pmj: usize) -> OptimizerConfig {
        OptimizerConfig {
            n_pmj,
            beta2: 0.99,
            ..Default::default()
        }
    }

    fn ensemble(&self, mode: ConstraintMode, layout: &str, n_pmj: usize, count: usize) -> Vec<RunRecord> {
        let solver = EikonalSolver::new(&self.anatomy.heart, &self.velocity, EikonalConfig::default()).unwrap();
        let spec = ConstraintSpec {
            mode,
            ..Default::default()
        };
        let region = FeasibleRegion::build(&self.anatomy.heart, &spec).unwrap();
        let target = &self.truth[layout].ecg;
        let problem = Problem::new(&solver, &region, &self.leads[layout].b, target, WaveformParams::default()).unwrap();
        let t = Instant::now();
        let runs: Vec<RunRecord> = run_ensemble(&problem, &Self::optimizer(n_pmj), count, 1)
            .into_iter()
            .map(|r| r.unwrap())
            .collect();
        println!(
            "  ensemble {mode:?} {layout} N={n_pmj}: {count} runs in {:.0} s, relative dist_ECG {}",
            t.elapsed().as_secs_f64(),
            runs.iter().map(|r| format!("{:.3}", r.relative_dist_ecg)).collect::<Vec<_>>().join(" ")
        );
        runs
    }

    fn lat_to_gt(&self, runs: &[RunRecord]) -> Vec<f64> {
        let tau = &self.truth["ecg12"].map.tau;
        runs.iter()
            .map(|r| eikonal_twin::metrics::dist_lat(&r.map.tau, tau, &self.volumes).unwrap())
            .collect()
    }
}

/// Ensembles shared between criteria, computed on first use.
#[derive(Default)]
struct Cache {
    desk: Option<Desk>,
    runs: BTreeMap<(bool, String, usize), Vec<RunRecord>>,
}

impl Cache {
    fn desk(&mut self) -> &Desk {
        self.desk.get_or_insert_with(Desk::build)
    }

    fn runs(&mut self, mode: ConstraintMode, layout: &str, n: usize, count: usize) -> &[RunRecord] {
        let key = (mode == ConstraintMode::Band, layout.to_string(), n);
        if self.runs.get(&key).is_none_or(|r| r.len() < count) {
            let runs = self.desk().ensemble(mode, layout, n, count);
            self.runs.insert(key.clone(), runs);
        }
        &self.runs[&key][..count]
    }
}

// ---------------------------------------------------------------- 5

fn reciprocity(cache: &mut Cache) -> Outcome {
    let desk = cache.desk();
    let leads = &desk.leads["ecg12"];
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let nh = desk.anatomy.heart.num_vertices();
    let (mut num, mut den, mut worst_mean) = (0.0, 0.0, 0.0f64);
    for _ in 0..5 {
        let vm: Vec<f64> = (0..nh).map(|_| rng.random_range(-85.0..30.0)).collect();
        let pot = desk.model.solve_pseudo_bidomain(&vm, None).unwrap();
        for (l, w) in leads.weights.iter().enumerate() {
            let direct = desk.model.readout(&pot.phi, &leads.electrode_vertices, w, leads.scale);
            let via_b: f64 = leads.b[l].iter().zip(&vm).map(|(b, v)| b * v).sum();
            num += (direct - via_b).powi(2);
            den += direct.powi(2);
        }
        let max = pot.phi.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        worst_mean = worst_mean.max(desk.model.skin_integral(&pot.phi).abs() / (desk.model.skin_area() * max));
    }
    let rel = (num / den).sqrt();
    (
        rel < 1e-6 && worst_mean < 1e-10,
        format!("5 random V_m fields x 12 leads: relative RMSD {rel:.2e}; skin mean / max|phi| = {worst_mean:.2e}"),
    )
}

// ---------------------------------------------------------------- 6

fn fit_quality(cache: &mut Cache) -> Outcome {
    let setup = cache.desk().setup_seconds;
    let runs = cache.runs(ConstraintMode::Band, "ecg12", 100, 10).to_vec();
    let desk = cache.desk();
    let r = &runs[0];
    let rho = pearson(&r.ecg, &desk.truth["ecg12"].ecg).unwrap();
    let secs: f64 = r.iteration_seconds.iter().sum();
    (
        r.relative_dist_ecg < 0.05 && rho > 0.99 && secs + setup < 900.0,
        format!(
            "seed {}: relative dist_ECG {:.2}%, pooled Pearson {rho:.5}, {} iterations in {secs:.0} s (+{setup:.0} s setup)",
            r.seed,
            100.0 * r.relative_dist_ecg,
            r.loss_history.len() - 1
        ),
    )
}

// ---------------------------------------------------------------- 7

fn non_identifiability(cache: &mut Cache) -> Outcome {
    let runs = cache.runs(ConstraintMode::Unrestricted, "ecg12", 100, 10).to_vec();
    let desk = cache.desk();
    let taus: Vec<Vec<f64>> = runs.iter().map(|r| r.map.tau.clone()).collect();
    let ecgs: Vec<EcgTrace> = runs.iter().map(|r| r.ecg.clone()).collect();
    let st = ensemble_stats(&taus, &ecgs, &desk.volumes).unwrap();
    let worst = runs.iter().map(|r| r.relative_dist_ecg).fold(0.0, f64::max);
    let (lo, hi) = (st.lat_min_pair, st.lat_max_pair);
    (
        worst < 0.05 && hi.value > 3.0 * lo.value,
        format!(
            "10 unrestricted runs, max relative dist_ECG {:.2}%; dist_LAT min pair ({},{}) {:.2} ms, max pair ({},{}) {:.2} ms, ratio {:.2}",
            100.0 * worst,
            lo.i,
            lo.j,
            lo.value,
            hi.i,
            hi.j,
            hi.value,
            hi.value / lo.value
        ),
    )
}

// ---------------------------------------------------------------- 8

fn constraint_benefit(cache: &mut Cache) -> Outcome {
    let mut cell = |mode| {
        let runs = cache.runs(mode, "ecg12", 100, 10).to_vec();
        let desk = cache.desk();
        let taus: Vec<Vec<f64>> = runs.iter().map(|r| r.map.tau.clone()).collect();
        let ecgs: Vec<EcgTrace> = runs.iter().map(|r| r.ecg.clone()).collect();
        let sigma = ensemble_stats(&taus, &ecgs, &desk.volumes).unwrap().tau_sigma_bar;
        (sigma, mean_se(&desk.lat_to_gt(&runs)).0)
    };
    let (rs, rl) = cell(ConstraintMode::Band);
    let (us, ul) = cell(ConstraintMode::Unrestricted);
    (
        rs < us && rl < ul,
        format!(
            "tau_sigma_bar restricted {rs:.2} ms vs unrestricted {us:.2} ms; mean dist_LAT to GT {rl:.2} vs {ul:.2} ms (10 runs each)"
        ),
    )
}

// ---------------------------------------------------------------- 9

fn electrode_density(cache: &mut Cache) -> Outcome {
    let mut rows = Vec::new();
    for layout in LAYOUTS.map(|l| l.to_string()) {
        let runs = cache.runs(ConstraintMode::Band, &layout, 100, 10).to_vec();
        let desk = cache.desk();
        let target = &desk.truth[&layout].ecg;
        let tau_gt = &desk.truth[&layout].map.tau;
        let scoring = Scoring {
            target,
            volumes: &desk.volumes,
            tau_gt: Some(tau_gt),
            bspm: Some((&desk.model, &desk.bspm, WaveformParams::default())),
        };
        let scores: Vec<_> = runs
            .iter()
            .map(|r| {
                let data = RunData {
                    seed: r.seed,
                    ecg: r.ecg.clone(),
                    tau: r.map.tau.clone(),
                    active_fraction: 0.0,
                    loss_history: Vec::new(),
                };
                score_run(&data, &scoring).unwrap()
            })
            .collect();
        let (lat, se) = mean_se(&scores.iter().map(|s| s.dist_lat.unwrap()).collect::<Vec<_>>());
        let phi = mean_se(&scores.iter().map(|s| s.dist_bspm.unwrap()).collect::<Vec<_>>()).0;
        rows.push((layout, lat, se, phi));
    }
    let lat_ok = rows.windows(2).all(|w| w[1].1 <= w[0].1 + w[0].2.max(w[1].2));
    let phi_ok = rows.windows(2).all(|w| w[1].3 < w[0].3);
    let detail = rows
        .iter()
        .map(|(l, lat, se, phi)| format!("{l}: dist_LAT {lat:.2} +/- {se:.2} ms, dist_phi {phi:.4} mV"))
        .collect::<Vec<_>>()
        .join("; ");
    (lat_ok && phi_ok, detail)
}

// ---------------------------------------------------------------- 10

fn pmj_count_sweep(cache: &mut Cache) -> Outcome {
    let counts = [1usize, 10, 50];
    let medians: Vec<f64> = counts
        .iter()
        .map(|&n| median(&cache.runs(ConstraintMode::Band, "ecg12", n, 5).iter().map(|r| r.relative_dist_ecg).collect::<Vec<_>>()))
        .collect();
    let pass = medians[0] > medians[1] && medians[1] > medians[2] && medians[2] < 0.05 && medians[0] >= 0.05;
    (
        pass,
        format!(
            "median relative dist_ECG over 5 runs: N=1 {:.2}%, N=10 {:.2}%, N=50 {:.2}%",
            100.0 * medians[0],
            100.0 * medians[1],
            100.0 * medians[2]
        ),
    )
}

// ---------------------------------------------------------------- 11

const TINY: &str = r#"
seed = 5
[mesh.params]
outer_radius = 12.0
outer_height = 18.0
wall = 5.0
heart_h = 1.5
torso_h = 8.0
torso_min = [-40.0, -35.0, -40.0]
torso_max = [40.0, 35.0, 20.0]
lungs = false
[leads]
layouts = ["limb4", "ecg12"]
[target]
hidden_pmjs = 6
noise_mv = 0.01
bspm_stride = 16
[optimizer]
iterations = 15
n_pmj = 12
[ensemble]
count = 3
[sweep]
n = [1, 4]
runs = 2
"#;

fn csv_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let exe = env!("CARGO_BIN_EXE_eikonal-twin");
    let pipeline = |out: &Path, jobs: usize| -> Result<(), String> {
        let steps: [&[&str]; 7] = [
            &["genmesh"],
            &["leads"],
            &["gt"],
            &["fit"],
            &["ensemble", "--unrestricted"],
            &["sweep"],
            &["report", "--score-vs-gt"],
        ];
        for step in steps {
            let status = Command::new(exe)
                .args(step)
                .arg("--config")
                .arg(&config)
                .arg("--out")
                .arg(out)
                .arg("--jobs")
                .arg(jobs.to_string())
                .env("RUST_LOG", "warn")
                .status()
                .map_err(|e| e.to_string())?;
            if !status.success() {
                return Err(format!("`{}` with --jobs {jobs} exited with {status}", step.join(" ")));
            }
        }
        Ok(())
    };
    let dirs = [(tmp.path().join("a"), 1), (tmp.path().join("b"), 4), (tmp.path().join("c"), 1)];
    for (d, j) in &dirs {
        if let Err(e) = pipeline(d, *j) {
            return (false, e);
        }
    }
    let sets: Vec<_> = dirs.iter().map(|(d, _)| csv_files(d)).collect();
    let differing: Vec<String> = sets[0]
        .iter()
        .filter(|(k, v)| sets[1].get(*k) != Some(v) || sets[2].get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let same_sets = sets[0].keys().eq(sets[1].keys()) && sets[0].keys().eq(sets[2].keys());
    (
        differing.is_empty() && same_sets,
        format!(
            "all 7 commands, --jobs 1 vs 4 vs 1 again: {} CSV files compared, {} differ{}",
            sets[0].len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(" ({})", differing.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- driver

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    if selected.len() != args.len() {
        // A name filter meant for other test targets.
        println!("acceptance: skipped (filter {:?})", args);
        return;
    }
    let want = |k: usize| selected.is_empty() || selected.contains(&k);
    let mut cache = Cache::default();
    let criteria: [(usize, &str, Box<dyn Fn(&mut Cache) -> Outcome>); 11] = [
        (1, "eikonal accuracy", Box::new(|_| eikonal_accuracy())),
        (2, "gradient vs finite differences", Box::new(|_| gradient_check())),
        (3, "ROI partition", Box::new(|_| roi_partition())),
        (4, "compatibility condition", Box::new(|_| compatibility())),
        (5, "FEM reciprocity", Box::new(reciprocity)),
        (6, "ECG fit quality", Box::new(fit_quality)),
        (7, "non-identifiability", Box::new(non_identifiability)),
        (8, "constraint benefit", Box::new(constraint_benefit)),
        (9, "electrode density", Box::new(electrode_density)),
        (10, "PMJ-count sweep", Box::new(pmj_count_sweep)),
        (11, "determinism", Box::new(|_| determinism())),
    ];
    let start = Instant::now();
    let mut failed = Vec::new();
    for (k, name, f) in &criteria {
        if !want(*k) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = f(&mut cache);
        println!(
            "criterion {k:2} {} {name}: {detail} [{:.0} s]",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
        if !pass {
            failed.push(*k);
        }
    }
    println!("acceptance: {} failed {:?}, total {:.0} s", failed.len(), failed, start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
