//! The subcommands. Each reads its inputs from the output tree written by
//! the previous stage and writes plain-text files plus a `meta` record.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use eikonal_twin::anatomy::{generate, mean_edge_length, TORSO_SKIN};
use eikonal_twin::ecg::{EcgTrace, TemporalGrid};
use eikonal_twin::eikonal::EikonalSolver;
use eikonal_twin::feasible::{ConstraintMode, FeasibleRegion};
use eikonal_twin::fem::TorsoModel;
use eikonal_twin::io;
use eikonal_twin::leads::{make_leadset, LeadLayout, LeadSet};
use eikonal_twin::mesh::region;
use eikonal_twin::metrics::Bspm;
use eikonal_twin::optimizer::{
    initial_set, member_seed, optimize, run_ensemble, sweep_pmj_count, OptimizerConfig, Problem, RunRecord,
};
use eikonal_twin::pipeline::{bspm_from_activation, bspm_grid, fabricate, velocity_field, Anatomy};
use log::{info, warn};
use toml::Table;

use crate::config::{constraint_label, ExperimentConfig, LoadedConfig};
use crate::failure::{config_error, numerical_error, Failure};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Resolved settings shared by all commands.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub out: PathBuf,
    pub score_vs_gt: bool,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub count: Option<usize>,
    pub mode: Option<ConstraintMode>,
    pub n: Option<Vec<usize>>,
    pub runs: Option<usize>,
    pub layout: Option<LeadLayout>,
    pub score_vs_gt: bool,
}

impl Context {
    pub fn new(loaded: LoadedConfig, o: Overrides) -> Result<Self, Failure> {
        let mut config = loaded.config;
        if let Some(c) = o.count {
            config.ensemble.count = c;
        }
        if let Some(m) = o.mode {
            config.constraint.mode = m;
        }
        if let Some(n) = o.n {
            config.sweep.n = n;
        }
        if let Some(r) = o.runs {
            config.sweep.runs = r;
        }
        if let Some(l) = o.layout {
            config.fit.layout = Some(l);
        }
        config.validate()?;
        let seed = o
            .seed
            .or(config.seed)
            .ok_or_else(|| config_error("a seed is required (set `seed` in the config or pass --seed)"))?;
        let out = o.out.or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
        Ok(Context {
            config,
            config_hash: loaded.hash,
            seed,
            out,
            score_vs_gt: o.score_vs_gt,
        })
    }

    pub fn mesh_path(&self) -> PathBuf {
        self.config.mesh.path.clone().unwrap_or_else(|| self.out.join("mesh").join("torso.mesh"))
    }

    pub fn leads_path(&self, layout: LeadLayout) -> PathBuf {
        self.out.join("leads").join(format!("{layout}.leads"))
    }

    pub fn target_path(&self, layout: LeadLayout) -> PathBuf {
        self.out.join("gt").join(format!("target_{layout}.csv"))
    }

    pub fn gt_bspm_dir(&self) -> PathBuf {
        self.out.join("gt").join("bspm")
    }

    pub fn hidden_dir(&self) -> PathBuf {
        self.out.join("hidden")
    }

    /// Directory of one experiment cell.
    pub fn cell_dir(&self, command: &str, mode: ConstraintMode, layout: LeadLayout, n_pmj: usize) -> PathBuf {
        self.out
            .join(command)
            .join(format!("{}_{layout}_n{n_pmj}", constraint_label(mode)))
    }

    fn base_meta(&self, command: &str) -> Table {
        let mut t = Table::new();
        t.insert("command".into(), command.into());
        t.insert("version".into(), VERSION.into());
        t.insert("config_sha256".into(), self.config_hash.clone().into());
        t.insert("seed".into(), seed_value(self.seed));
        t
    }
}

/// TOML integers are signed; seeds beyond that range are stored as strings.
fn seed_value(seed: u64) -> toml::Value {
    i64::try_from(seed).map_or_else(|_| seed.to_string().into(), toml::Value::Integer)
}

fn write_meta(path: &Path, meta: &Table) -> Result<(), Failure> {
    let text = toml::to_string(meta).map_err(|e| numerical_error(format!("meta: {e}")))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| config_error(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| config_error(format!("cannot write {}: {e}", path.display())))
}

pub fn read_meta(path: &Path) -> Result<Table, Failure> {
    let text = fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    text.parse().map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn needs(path: &Path, stage: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(config_error(format!("{} not found; run `{stage}` first", path.display())))
    }
}

pub fn load_anatomy(ctx: &Context) -> Result<Anatomy, Failure> {
    let path = ctx.mesh_path();
    needs(&path, "genmesh")?;
    Ok(Anatomy::from_torso(io::read_mesh(&path)?)?)
}

pub fn torso_model(ctx: &Context, anatomy: &Anatomy) -> Result<TorsoModel, Failure> {
    let l = &ctx.config.leads;
    Ok(TorsoModel::new(
        &anatomy.torso,
        &anatomy.heart_ids,
        &l.conductivities,
        TORSO_SKIN,
        l.cg,
    )?)
}

pub fn load_leads(ctx: &Context, layout: LeadLayout, anatomy: &Anatomy) -> Result<LeadSet, Failure> {
    let path = ctx.leads_path(layout);
    needs(&path, "leads")?;
    let leads = io::read_leadset(&path)?;
    if !leads.has_vectors() || leads.b[0].len() != anatomy.heart.num_vertices() {
        return Err(config_error(format!(
            "{} does not match the mesh ({} heart vertices); rerun `leads`",
            path.display(),
            anatomy.heart.num_vertices()
        )));
    }
    Ok(leads)
}

pub fn load_target(ctx: &Context, layout: LeadLayout) -> Result<EcgTrace, Failure> {
    let path = ctx.target_path(layout);
    needs(&path, "gt")?;
    Ok(io::read_ecg(&path)?)
}

// ---------------------------------------------------------------- genmesh

pub fn genmesh(ctx: &Context) -> Result<(), Failure> {
    let p = &ctx.config.mesh.params;
    p.validate()?;
    let t0 = Instant::now();
    let torso = generate(p)?;
    let dir = ctx.out.join("mesh");
    let path = dir.join("torso.mesh");
    io::write_mesh(&path, &torso)?;
    let labels: Vec<f64> = torso.labels().iter().map(|&l| l as f64).collect();
    io::write_vtk(dir.join("torso.vtk"), &torso, &[], &[("label", &labels)])?;
    let anatomy = Anatomy::from_torso(torso)?;
    let heart = &anatomy.heart;
    let fiber: [Vec<f64>; 3] = std::array::from_fn(|c| heart.fibers().iter().map(|f| f.fiber[c]).collect());
    io::write_vtk(
        dir.join("heart.vtk"),
        heart,
        &[],
        &[("fiber_x", &fiber[0]), ("fiber_y", &fiber[1]), ("fiber_z", &fiber[2])],
    )?;
    let edge = mean_edge_length(&anatomy.torso, region::VENTRICLE);
    let volume = heart.total_volume();
    info!(
        "torso: {} vertices, {} tets; ventricle: {} vertices, mean edge {edge:.3} mm, volume {volume:.1} mm^3 (analytic {:.1})",
        anatomy.torso.num_vertices(),
        anatomy.torso.num_tets(),
        heart.num_vertices(),
        p.shell_volume()
    );
    let mut meta = ctx.base_meta("genmesh");
    meta.insert("torso_vertices".into(), (anatomy.torso.num_vertices() as i64).into());
    meta.insert("heart_vertices".into(), (heart.num_vertices() as i64).into());
    meta.insert("mean_edge_mm".into(), edge.into());
    meta.insert("shell_volume_mm3".into(), volume.into());
    meta.insert("analytic_volume_mm3".into(), p.shell_volume().into());
    meta.insert("wall_seconds".into(), t0.elapsed().as_secs_f64().into());
    write_meta(&dir.join("meta"), &meta)
}

// ---------------------------------------------------------------- leads

pub fn leads(ctx: &Context) -> Result<(), Failure> {
    let t0 = Instant::now();
    let anatomy = load_anatomy(ctx)?;
    let model = torso_model(ctx, &anatomy)?;
    let mut meta = ctx.base_meta("leads");
    for &layout in &ctx.config.leads.layouts {
        let mut set = make_leadset(&anatomy.torso, TORSO_SKIN, layout, &ctx.config.leads.placement)?;
        model.precompute_lead_vectors(&mut set)?;
        io::write_leadset(ctx.leads_path(layout), &set)?;
        info!("{layout}: {} leads, {} electrodes", set.num_leads(), set.electrodes.len());
    }
    let names: Vec<toml::Value> = ctx.config.leads.layouts.iter().map(|l| l.to_string().into()).collect();
    meta.insert("layouts".into(), names.into());
    meta.insert("wall_seconds".into(), t0.elapsed().as_secs_f64().into());
    write_meta(&ctx.out.join("leads").join("meta"), &meta)
}

// ---------------------------------------------------------------- gt

/// Reads a BSPM directory written by `gt`.
pub fn read_bspm(dir: &Path) -> Result<Bspm, Failure> {
    let grid_path = dir.join("grid.csv");
    needs(&grid_path, "gt")?;
    let (_, rows) = io::read_string_table(&grid_path)?;
    let row = rows.first().ok_or_else(|| config_error(format!("{} is empty", grid_path.display())))?;
    let num = |i: usize| -> Result<f64, Failure> {
        row.get(i)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| config_error(format!("{}: bad row", grid_path.display())))
    };
    let grid = TemporalGrid::new(num(0)?, num(1)?, num(2)? as usize)?;
    let mut vertices = Vec::new();
    let mut values = Vec::with_capacity(grid.num_samples());
    for k in 0..grid.num_samples() {
        let (v, phi) = io::read_bspm_snapshot(io::bspm_snapshot_path(dir, k))?;
        if k > 0 && v != vertices {
            return Err(config_error(format!("BSPM snapshot {k} in {} has different vertices", dir.display())));
        }
        vertices = v;
        values.push(phi);
    }
    Ok(Bspm { vertices, grid, values })
}

pub fn write_bspm(dir: &Path, bspm: &Bspm) -> Result<(), Failure> {
    let g = &bspm.grid;
    io::write_columns(
        dir.join("grid.csv"),
        &["t0_ms", "dt_ms", "samples"],
        &[&[g.t0], &[g.dt], &[g.n as f64]],
    )?;
    for (k, phi) in bspm.values.iter().enumerate() {
        io::write_bspm_snapshot(io::bspm_snapshot_path(dir, k), &bspm.vertices, phi)?;
    }
    Ok(())
}

pub fn gt(ctx: &Context) -> Result<(), Failure> {
    let t0 = Instant::now();
    let anatomy = load_anatomy(ctx)?;
    let spec = &ctx.config.target;
    let mut first = None;
    for &layout in &ctx.config.leads.layouts {
        let leads = load_leads(ctx, layout, &anatomy)?;
        let truth = fabricate(&anatomy, &leads, spec, ctx.config.eikonal, ctx.seed)?;
        io::write_ecg(ctx.target_path(layout), &truth.ecg)?;
        match &first {
            None => first = Some(truth),
            Some(f) if f.map.tau != truth.map.tau => {
                return Err(numerical_error("ground-truth activation differs between layouts"));
            }
            Some(_) => {}
        }
    }
    let truth = first.expect("at least one layout");
    let hidden = ctx.hidden_dir();
    io::write_pmjs(hidden.join("pmj_gt.csv"), &truth.pmjs)?;
    io::write_activation(hidden.join("tau_gt.csv"), &truth.map)?;
    io::write_vtk(hidden.join("tau_gt.vtk"), &anatomy.heart, &[("tau_ms", &truth.map.tau)], &[])?;

    let model = torso_model(ctx, &anatomy)?;
    let grid = bspm_grid(&truth.ecg.grid, spec.bspm_stride)?;
    let bspm = bspm_from_activation(&model, &truth.map.tau, &grid, &spec.waveform)?;
    write_bspm(&ctx.gt_bspm_dir(), &bspm)?;

    let last = truth.map.tau.iter().copied().filter(|t| t.is_finite()).fold(0.0, f64::max);
    let first_act = truth.map.tau.iter().copied().fold(f64::INFINITY, f64::min);
    info!(
        "ground truth: {} hidden PMJs ({} active), activation {first_act:.1}-{last:.1} ms, {} samples, {} BSPM snapshots",
        truth.pmjs.len(),
        truth.map.num_active(),
        truth.ecg.grid.num_samples(),
        grid.num_samples()
    );
    let mut meta = ctx.base_meta("gt");
    meta.insert("hidden_pmjs".into(), (truth.pmjs.len() as i64).into());
    meta.insert("active_hidden_pmjs".into(), (truth.map.num_active() as i64).into());
    meta.insert("activation_span_ms".into(), (last - first_act).into());
    meta.insert("t_end_ms".into(), truth.ecg.grid.t_end().into());
    meta.insert("wall_seconds".into(), t0.elapsed().as_secs_f64().into());
    write_meta(&ctx.out.join("gt").join("meta"), &meta)
}

// ---------------------------------------------------------------- fitting

/// Builds the calibration problem for the configured target and hands it to `f`.
pub fn with_problem<T>(
    ctx: &Context,
    f: impl FnOnce(&Problem, &Anatomy) -> Result<T, Failure>,
) -> Result<T, Failure> {
    let layout = ctx.config.fit_layout();
    let anatomy = load_anatomy(ctx)?;
    let leads = load_leads(ctx, layout, &anatomy)?;
    let target = load_target(ctx, layout)?;
    if leads.lead_names != target.leads {
        return Err(config_error(format!(
            "target leads {:?} do not match lead set {layout} ({:?})",
            target.leads, leads.lead_names
        )));
    }
    let velocity = velocity_field(&anatomy.heart, ctx.config.target.speeds)?;
    let solver = EikonalSolver::new(&anatomy.heart, &velocity, ctx.config.eikonal)?;
    let region = FeasibleRegion::build(&anatomy.heart, &ctx.config.constraint)?;
    let problem = Problem::new(&solver, &region, &leads.b, &target, ctx.config.target.waveform)?;
    f(&problem, &anatomy)
}

pub fn run_dir(cell: &Path, seed: u64) -> PathBuf {
    cell.join(format!("run_{seed}"))
}

/// Writes a complete run record. Timings go to `meta` only, so the CSV
/// files depend on the inputs and the seed alone.
pub fn write_run(ctx: &Context, command: &str, dir: &Path, n_pmj: usize, seed: u64, rec: &Result<RunRecord, eikonal_twin::Error>) -> Result<(), Failure> {
    let mut meta = ctx.base_meta(command);
    meta.insert("seed".into(), seed_value(seed));
    meta.insert("constraint".into(), constraint_label(ctx.config.constraint.mode).into());
    meta.insert("leads".into(), ctx.config.fit_layout().to_string().into());
    meta.insert("n_pmj".into(), (n_pmj as i64).into());
    match rec {
        Ok(r) => {
            let iters: Vec<f64> = (0..r.loss_history.len()).map(|i| i as f64).collect();
            io::write_columns(dir.join("loss.csv"), &["iteration", "loss"], &[&iters, &r.loss_history])?;
            io::write_pmjs(dir.join("pmj_initial.csv"), &r.initial)?;
            io::write_pmjs(dir.join("pmj_final.csv"), &r.pmjs)?;
            io::write_activation(dir.join("tau_final.csv"), &r.map)?;
            io::write_ecg(dir.join("ecg_final.csv"), &r.ecg)?;
            io::write_roi(dir.join("roi.csv"), &r.pmjs, &r.roi)?;
            meta.insert("status".into(), if r.failure.is_some() { "partial" } else { "ok" }.into());
            meta.insert("best_iteration".into(), (r.best_iteration as i64).into());
            meta.insert("loss".into(), r.loss.into());
            meta.insert("relative_dist_ecg".into(), r.relative_dist_ecg.into());
            meta.insert("active_pmjs".into(), (r.map.num_active() as i64).into());
            meta.insert("skipped_iterations".into(), (r.skipped.len() as i64).into());
            if let Some(f) = &r.failure {
                meta.insert("failure".into(), f.clone().into());
            }
            let total: f64 = r.iteration_seconds.iter().sum();
            meta.insert("wall_seconds".into(), total.into());
            meta.insert(
                "mean_iteration_seconds".into(),
                (total / r.iteration_seconds.len().max(1) as f64).into(),
            );
        }
        Err(e) => {
            meta.insert("status".into(), "failed".into());
            meta.insert("failure".into(), e.to_string().into());
        }
    }
    write_meta(&dir.join("meta"), &meta)
}

/// Removes a cell left over from an earlier invocation so that reports
/// never mix runs of different configurations.
fn fresh_cell(cell: &Path) -> Result<(), Failure> {
    if cell.exists() {
        warn!("replacing {}", cell.display());
        fs::remove_dir_all(cell).map_err(|e| config_error(format!("cannot clear {}: {e}", cell.display())))?;
    }
    Ok(())
}

fn count_failures<'a>(runs: impl Iterator<Item = &'a Result<RunRecord, eikonal_twin::Error>>) -> usize {
    runs.filter(|r| r.as_ref().map_or(true, |r| r.failure.is_some())).count()
}

fn summarize(label: &str, rec: &Result<RunRecord, eikonal_twin::Error>) {
    match rec {
        Ok(r) => info!(
            "{label}: loss {:.4e} at iteration {}, relative dist_ECG {:.4}, {} of {} PMJs active",
            r.loss,
            r.best_iteration,
            r.relative_dist_ecg,
            r.map.num_active(),
            r.pmjs.len()
        ),
        Err(e) => warn!("{label}: failed: {e}"),
    }
}

pub fn fit(ctx: &Context) -> Result<(), Failure> {
    let cfg = &ctx.config.optimizer;
    let seed = ctx.seed;
    let given = match &ctx.config.fit.initial {
        Some(p) => {
            needs(p, "a run that writes PMJs")?;
            Some(io::read_pmjs(p)?)
        }
        None => None,
    };
    let n_pmj = given.as_ref().map_or(cfg.n_pmj, |g| g.len());
    let cell = ctx.cell_dir("fit", ctx.config.constraint.mode, ctx.config.fit_layout(), n_pmj);
    let rec = with_problem(ctx, |problem, _| {
        let init = match given {
            Some(g) => Ok(g),
            None => initial_set(problem, cfg.n_pmj, seed),
        };
        Ok(init.and_then(|init| optimize(problem, &init, cfg, seed)))
    })?;
    let dir = run_dir(&cell, seed);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| config_error(format!("cannot clear {}: {e}", dir.display())))?;
    }
    write_run(ctx, "fit", &dir, n_pmj, seed, &rec)?;
    summarize(&format!("run {seed}"), &rec);
    match rec {
        Ok(r) if r.failure.is_none() => Ok(()),
        Ok(r) => Err(numerical_error(r.failure.unwrap_or_default())),
        Err(e) => Err(numerical_error(e)),
    }
}

fn write_cell(
    ctx: &Context,
    command: &str,
    cell: &Path,
    n_pmj: usize,
    runs: &[Result<RunRecord, eikonal_twin::Error>],
) -> Result<(), Failure> {
    fresh_cell(cell)?;
    for (i, rec) in runs.iter().enumerate() {
        let seed = member_seed(ctx.seed, i);
        write_run(ctx, command, &run_dir(cell, seed), n_pmj, seed, rec)?;
        summarize(&format!("n={n_pmj} run {seed}"), rec);
    }
    Ok(())
}

pub fn ensemble(ctx: &Context) -> Result<(), Failure> {
    let cfg = &ctx.config.optimizer;
    let count = ctx.config.ensemble.count;
    let runs = with_problem(ctx, |problem, _| Ok(run_ensemble(problem, cfg, count, ctx.seed)))?;
    let cell = ctx.cell_dir("ensemble", ctx.config.constraint.mode, ctx.config.fit_layout(), cfg.n_pmj);
    write_cell(ctx, "ensemble", &cell, cfg.n_pmj, &runs)?;
    match count_failures(runs.iter()) {
        0 => Ok(()),
        k => Err(numerical_error(format!("{k} of {count} ensemble runs failed"))),
    }
}

/// Median of the finite values.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn sweep(ctx: &Context) -> Result<(), Failure> {
    let cfg: &OptimizerConfig = &ctx.config.optimizer;
    let s = &ctx.config.sweep;
    let cells = with_problem(ctx, |problem, _| Ok(sweep_pmj_count(problem, cfg, &s.n, s.runs, ctx.seed)?))?;
    let mode = ctx.config.constraint.mode;
    let layout = ctx.config.fit_layout();
    let mut rows = Vec::new();
    let mut failed_total = 0;
    for c in &cells {
        let dir = ctx.cell_dir("sweep", mode, layout, c.n_pmj);
        write_cell(ctx, "sweep", &dir, c.n_pmj, &c.runs)?;
        let ok: Vec<&RunRecord> = c.runs.iter().filter_map(|r| r.as_ref().ok()).collect();
        let rel: Vec<f64> = ok.iter().map(|r| r.relative_dist_ecg).collect();
        let active: Vec<f64> = ok.iter().map(|r| r.map.num_active() as f64 / r.pmjs.len() as f64).collect();
        let failed = count_failures(c.runs.iter());
        failed_total += failed;
        rows.push(vec![
            c.n_pmj.to_string(),
            c.runs.len().to_string(),
            failed.to_string(),
            median(&rel).to_string(),
            rel.iter().copied().fold(f64::INFINITY, f64::min).to_string(),
            rel.iter().copied().fold(f64::NEG_INFINITY, f64::max).to_string(),
            (active.iter().sum::<f64>() / active.len().max(1) as f64).to_string(),
        ]);
    }
    io::write_table(
        ctx.out.join("sweep").join(format!("summary_{}_{layout}.csv", constraint_label(mode))),
        &[
            "n_pmj",
            "runs",
            "failed",
            "rel_dist_ecg_median",
            "rel_dist_ecg_min",
            "rel_dist_ecg_max",
            "active_fraction_mean",
        ],
        &rows,
    )?;
    match failed_total {
        0 => Ok(()),
        k => Err(numerical_error(format!("{k} sweep runs failed"))),
    }
}

