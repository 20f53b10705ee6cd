//! Aggregates run records into metric tables and plots. Everything here is
//! recomputed from the files under the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use eikonal_twin::ecg::{EcgTrace, WaveformParams};
use eikonal_twin::fem::TorsoModel;
use eikonal_twin::io;
use eikonal_twin::leads::LeadLayout;
use eikonal_twin::metrics::{dist_bspm, dist_ecg, dist_lat, ensemble_stats, pearson, relative_dist_ecg, Bspm, Pair};
use eikonal_twin::pipeline::bspm_from_activation;
use log::info;

use crate::commands::{load_anatomy, load_target, median, read_bspm, read_meta, torso_model, Context};
use crate::failure::{config_error, Failure};
use crate::svg::{box_plot, line_plot, Series};

/// What a scored run contributes.
#[derive(Debug, Clone)]
pub struct RunData {
    pub seed: u64,
    pub ecg: EcgTrace,
    pub tau: Vec<f64>,
    pub active_fraction: f64,
    pub loss_history: Vec<f64>,
}

/// References a run is scored against. The ground-truth parts are optional.
pub struct Scoring<'a> {
    pub target: &'a EcgTrace,
    pub volumes: &'a [f64],
    pub tau_gt: Option<&'a [f64]>,
    pub bspm: Option<(&'a TorsoModel, &'a Bspm, WaveformParams)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunScore {
    pub seed: u64,
    pub dist_ecg: f64,
    pub rel_dist_ecg: f64,
    pub pearson: f64,
    pub dist_lat: Option<f64>,
    pub dist_bspm: Option<f64>,
    pub active_fraction: f64,
}

pub fn score_run(run: &RunData, s: &Scoring) -> Result<RunScore, Failure> {
    let lat = s.tau_gt.map(|gt| dist_lat(&run.tau, gt, s.volumes)).transpose()?;
    let bspm = match &s.bspm {
        Some((model, gt, waveform)) => {
            let sim = bspm_from_activation(model, &run.tau, &gt.grid, waveform)?;
            Some(dist_bspm(&sim, gt, model.skin_weights())?)
        }
        None => None,
    };
    Ok(RunScore {
        seed: run.seed,
        dist_ecg: dist_ecg(&run.ecg, s.target)?,
        rel_dist_ecg: relative_dist_ecg(&run.ecg, s.target)?,
        pearson: pearson(&run.ecg, s.target)?,
        dist_lat: lat,
        dist_bspm: bspm,
        active_fraction: run.active_fraction,
    })
}

/// Mean and standard error (sample deviation over sqrt(n)).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (m, f64::NAN);
    }
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[derive(Debug, Clone)]
pub struct CellSummary {
    pub source: String,
    pub cell: String,
    pub constraint: String,
    pub leads: String,
    pub n_pmj: usize,
    pub runs: usize,
    pub failed: usize,
    pub dist_ecg: f64,
    pub rel_median: f64,
    pub rel_max: f64,
    pub pearson: f64,
    pub dist_lat: Option<(f64, f64)>,
    pub dist_bspm: Option<f64>,
    pub tau_sigma_bar: Option<f64>,
    pub lat_pairs: Option<(Pair, Pair)>,
    pub seeds: Vec<u64>,
    pub active_fraction: f64,
}

fn opt_mean(v: &[Option<f64>]) -> Option<Vec<f64>> {
    v.iter().copied().collect()
}

/// Cell-level aggregates of scored runs.
pub fn summarize_cell(runs: &[RunData], scores: &[RunScore], volumes: &[f64]) -> Result<CellSummary, Failure> {
    let mean = |f: &dyn Fn(&RunScore) -> f64| mean_se(&scores.iter().map(f).collect::<Vec<_>>()).0;
    let rel: Vec<f64> = scores.iter().map(|s| s.rel_dist_ecg).collect();
    let lat = opt_mean(&scores.iter().map(|s| s.dist_lat).collect::<Vec<_>>()).filter(|v| !v.is_empty());
    let bspm = opt_mean(&scores.iter().map(|s| s.dist_bspm).collect::<Vec<_>>()).filter(|v| !v.is_empty());
    let (sigma, pairs) = if runs.len() >= 2 {
        let taus: Vec<Vec<f64>> = runs.iter().map(|r| r.tau.clone()).collect();
        let ecgs: Vec<EcgTrace> = runs.iter().map(|r| r.ecg.clone()).collect();
        let st = ensemble_stats(&taus, &ecgs, volumes)?;
        (Some(st.tau_sigma_bar), Some((st.lat_min_pair, st.lat_max_pair)))
    } else {
        (None, None)
    };
    Ok(CellSummary {
        source: String::new(),
        cell: String::new(),
        constraint: String::new(),
        leads: String::new(),
        n_pmj: 0,
        runs: runs.len(),
        failed: 0,
        dist_ecg: mean(&|s| s.dist_ecg),
        rel_median: median(&rel),
        rel_max: rel.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        pearson: mean(&|s| s.pearson),
        dist_lat: lat.map(|v| mean_se(&v)),
        dist_bspm: bspm.map(|v| mean_se(&v).0),
        tau_sigma_bar: sigma,
        lat_pairs: pairs,
        seeds: runs.iter().map(|r| r.seed).collect(),
        active_fraction: mean(&|s| s.active_fraction),
    })
}

struct RunDir {
    path: PathBuf,
    seed: u64,
    meta: toml::Table,
}

fn meta_str(meta: &toml::Table, key: &str, path: &Path) -> Result<String, Failure> {
    match meta.get(key) {
        Some(toml::Value::String(s)) => Ok(s.clone()),
        Some(toml::Value::Integer(i)) => Ok(i.to_string()),
        _ => Err(config_error(format!("{}: meta lacks `{key}`", path.display()))),
    }
}

/// Run directories of one cell, ordered by seed.
fn run_dirs(cell: &Path) -> Result<Vec<RunDir>, Failure> {
    let mut out = Vec::new();
    for entry in fs::read_dir(cell).map_err(|e| config_error(format!("{}: {e}", cell.display())))? {
        let path = entry.map_err(|e| config_error(format!("{}: {e}", cell.display())))?.path();
        let meta_path = path.join("meta");
        if !path.is_dir() || !meta_path.exists() {
            continue;
        }
        let meta = read_meta(&meta_path)?;
        let seed = meta_str(&meta, "seed", &meta_path)?
            .parse()
            .map_err(|_| config_error(format!("{}: bad seed", meta_path.display())))?;
        out.push(RunDir { path, seed, meta });
    }
    out.sort_by_key(|r| r.seed);
    Ok(out)
}

fn read_run(dir: &RunDir) -> Result<RunData, Failure> {
    let ecg = io::read_ecg(dir.path.join("ecg_final.csv"))?;
    let tau = io::read_activation(dir.path.join("tau_final.csv"))?;
    let pmjs = io::read_pmjs(dir.path.join("pmj_final.csv"))?;
    let (_, rows) = io::read_string_table(dir.path.join("loss.csv"))?;
    let loss_history = rows.iter().filter_map(|r| r.get(1)?.parse().ok()).collect();
    let active = pmjs.active.iter().filter(|&&a| a).count();
    Ok(RunData {
        seed: dir.seed,
        ecg,
        tau,
        active_fraction: active as f64 / pmjs.len().max(1) as f64,
        loss_history,
    })
}

fn cell_dirs(ctx: &Context) -> Result<Vec<(String, PathBuf)>, Failure> {
    let mut cells = Vec::new();
    for source in ["fit", "ensemble", "sweep"] {
        let dir = ctx.out.join(source);
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        found.sort();
        cells.extend(found.into_iter().map(|p| (source.to_string(), p)));
    }
    Ok(cells)
}

fn fmt(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite()).map_or_else(String::new, |x| x.to_string())
}

/// `seed_i-seed_j:value`
fn pair_str(p: &Pair, seeds: &[u64]) -> String {
    format!("{}-{}:{}", seeds[p.i], seeds[p.j], p.value)
}

pub fn report(ctx: &Context) -> Result<Vec<CellSummary>, Failure> {
    let anatomy = load_anatomy(ctx)?;
    let volumes = anatomy.heart.lumped_vertex_volumes();
    let (tau_gt, gt_bspm, model) = if ctx.score_vs_gt {
        let tau = io::read_activation(ctx.hidden_dir().join("tau_gt.csv"))
            .map_err(|e| Failure::from(e).context("scoring against the ground truth needs `gt` output"))?;
        (Some(tau), Some(read_bspm(&ctx.gt_bspm_dir())?), Some(torso_model(ctx, &anatomy)?))
    } else {
        (None, None, None)
    };
    let mut targets: BTreeMap<String, EcgTrace> = BTreeMap::new();
    let mut summaries = Vec::new();
    let mut run_rows = Vec::new();
    let mut loss_series = Vec::new();
    let mut rel_groups = Vec::new();
    let mut lat_groups = Vec::new();
    for (source, cell) in cell_dirs(ctx)? {
        let dirs = run_dirs(&cell)?;
        let Some(first) = dirs.first() else { continue };
        let meta_path = first.path.join("meta");
        let constraint = meta_str(&first.meta, "constraint", &meta_path)?;
        let leads = meta_str(&first.meta, "leads", &meta_path)?;
        let n_pmj: usize = meta_str(&first.meta, "n_pmj", &meta_path)?
            .parse()
            .map_err(|_| config_error(format!("{}: bad n_pmj", meta_path.display())))?;
        if !targets.contains_key(&leads) {
            let layout: LeadLayout = leads.parse()?;
            targets.insert(leads.clone(), load_target(ctx, layout)?);
        }
        let target = &targets[&leads];
        let scoring = Scoring {
            target,
            volumes: &volumes,
            tau_gt: tau_gt.as_deref(),
            bspm: model
                .as_ref()
                .zip(gt_bspm.as_ref())
                .map(|(m, b)| (m, b, ctx.config.target.waveform)),
        };
        let mut runs = Vec::new();
        let mut scores = Vec::new();
        let mut failed = 0;
        for d in &dirs {
            if d.meta.get("status").and_then(|s| s.as_str()) == Some("failed") {
                failed += 1;
                continue;
            }
            let run = read_run(d)?;
            let score = score_run(&run, &scoring)?;
            run_rows.push(vec![
                source.clone(),
                cell.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                run.seed.to_string(),
                score.dist_ecg.to_string(),
                score.rel_dist_ecg.to_string(),
                score.pearson.to_string(),
                fmt(score.dist_lat),
                fmt(score.dist_bspm),
                score.active_fraction.to_string(),
            ]);
            runs.push(run);
            scores.push(score);
        }
        if runs.is_empty() {
            continue;
        }
        let name = format!("{source}/{}", cell.file_name().unwrap_or_default().to_string_lossy());
        let mut s = summarize_cell(&runs, &scores, &volumes)?;
        s.source = source.clone();
        s.cell = name.clone();
        s.constraint = constraint;
        s.leads = leads;
        s.n_pmj = n_pmj;
        s.failed = failed;
        // Median loss curve across the cell's runs.
        let len = runs.iter().map(|r| r.loss_history.len()).min().unwrap_or(0);
        let points = (0..len)
            .map(|i| (i as f64, median(&runs.iter().map(|r| r.loss_history[i]).collect::<Vec<_>>())))
            .collect();
        loss_series.push(Series {
            label: name.clone(),
            points,
        });
        rel_groups.push((name.clone(), scores.iter().map(|s| s.rel_dist_ecg).collect::<Vec<_>>()));
        if let Some(v) = scores.iter().map(|s| s.dist_lat).collect::<Option<Vec<f64>>>() {
            lat_groups.push((name, v));
        }
        info!(
            "{}: {} runs, median relative dist_ECG {:.4}, tau_sigma_bar {}",
            s.cell,
            s.runs,
            s.rel_median,
            fmt(s.tau_sigma_bar)
        );
        summaries.push(s);
    }
    if summaries.is_empty() {
        return Err(config_error(format!(
            "no run records under {}; run `fit`, `ensemble` or `sweep` first",
            ctx.out.display()
        )));
    }
    let dir = ctx.out.join("report");
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            vec![
                s.constraint.clone(),
                s.leads.clone(),
                s.n_pmj.to_string(),
                s.dist_ecg.to_string(),
                fmt(s.dist_lat.map(|d| d.0)),
                fmt(s.dist_bspm),
                fmt(s.tau_sigma_bar),
                s.pearson.to_string(),
                s.source.clone(),
                s.runs.to_string(),
                s.failed.to_string(),
                s.rel_median.to_string(),
                s.rel_max.to_string(),
                fmt(s.dist_lat.map(|d| d.1)),
                s.lat_pairs.as_ref().map_or_else(String::new, |p| pair_str(&p.0, &s.seeds)),
                s.lat_pairs.as_ref().map_or_else(String::new, |p| pair_str(&p.1, &s.seeds)),
                s.active_fraction.to_string(),
            ]
        })
        .collect();
    io::write_table(
        dir.join("metrics.csv"),
        &[
            "constraint",
            "leads",
            "n_pmj",
            "dist_ecg",
            "dist_lat",
            "dist_bspm",
            "tau_sigma_bar",
            "pearson",
            "source",
            "runs",
            "failed",
            "rel_dist_ecg_median",
            "rel_dist_ecg_max",
            "dist_lat_se",
            "lat_min_pair",
            "lat_max_pair",
            "active_fraction",
        ],
        &rows,
    )?;
    io::write_table(
        dir.join("runs.csv"),
        &[
            "source",
            "cell",
            "seed",
            "dist_ecg",
            "rel_dist_ecg",
            "pearson",
            "dist_lat",
            "dist_bspm",
            "active_fraction",
        ],
        &run_rows,
    )?;
    let write = |name: &str, text: String| {
        fs::write(dir.join(name), text).map_err(|e| config_error(format!("cannot write {name}: {e}")))
    };
    write("loss.svg", line_plot("median loss per cell", "iteration", "loss", &loss_series, true))?;
    write("dist_ecg.svg", box_plot("relative dist_ECG per cell", "relative dist_ECG", &rel_groups))?;
    if !lat_groups.is_empty() {
        write("dist_lat.svg", box_plot("dist_LAT to ground truth", "dist_LAT (ms)", &lat_groups))?;
    }
    let mut sweep_lines: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for s in summaries.iter().filter(|s| s.source == "sweep") {
        sweep_lines
            .entry(format!("{} {}", s.constraint, s.leads))
            .or_default()
            .push((s.n_pmj as f64, s.rel_median));
    }
    if !sweep_lines.is_empty() {
        let series: Vec<Series> = sweep_lines
            .into_iter()
            .map(|(label, mut points)| {
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series { label, points }
            })
            .collect();
        write("sweep.svg", line_plot("PMJ-count sweep", "N", "median relative dist_ECG", &series, true))?;
    }
    Ok(summaries)
}
