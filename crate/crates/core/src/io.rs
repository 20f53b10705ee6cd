//! Plain-text file formats: ASCII meshes, legacy VTK, CSV tables and the
//! lead-set archive. Floats are written in shortest round-trip form, so
//! write-then-read is exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::ecg::{EcgTrace, TemporalGrid};
use crate::eikonal::{ActivationMap, Pmj, PmjSet};
use crate::adjoint::RegionOfInfluence;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::leads::LeadSet;
use crate::mesh::{FiberFrame, TetMesh};

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn finish(path: &Path, mut w: BufWriter<fs::File>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => parse_err(path, line, format!("{kind:?}")),
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<fs::File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_finish(path: &Path, w: csv::Writer<BufWriter<fs::File>>) -> Result<()> {
    let inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    finish(path, inner)
}

/// Header and rows of a CSV file; row numbers are 1-based file lines.
fn read_table(path: &Path) -> Result<(Vec<String>, Vec<(usize, Vec<String>)>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let header = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok((header, rows))
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, row: &[String], i: usize) -> Result<T> {
    let s = row
        .get(i)
        .ok_or_else(|| parse_err(path, line, format!("missing column {}", i + 1)))?;
    s.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("cannot parse `{s}`")))
}

fn expect_header(path: &Path, header: &[String], want: &[&str]) -> Result<()> {
    if header.iter().map(String::as_str).ne(want.iter().copied()) {
        return Err(parse_err(path, 1, format!("expected header `{}`", want.join(","))));
    }
    Ok(())
}

// ---------------------------------------------------------------- meshes

/// Writes the ASCII mesh format with `#vertices`, `#tets`, `#fibers` and
/// `#surface <name>` sections.
pub fn write_mesh(path: impl AsRef<Path>, mesh: &TetMesh) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let mut s = String::new();
    let _ = writeln!(s, "#vertices {}", mesh.num_vertices());
    for v in mesh.vertices() {
        let _ = writeln!(s, "{} {} {}", v.x, v.y, v.z);
    }
    let _ = writeln!(s, "#tets {}", mesh.num_tets());
    for (t, l) in mesh.tets().iter().zip(mesh.labels()) {
        let _ = writeln!(s, "{} {} {} {} {}", t[0], t[1], t[2], t[3], l);
    }
    let _ = writeln!(s, "#fibers {}", mesh.num_tets());
    for f in mesh.fibers() {
        let _ = writeln!(s, "{} {} {} {} {} {}", f.fiber.x, f.fiber.y, f.fiber.z, f.sheet.x, f.sheet.y, f.sheet.z);
    }
    for (name, tris) in mesh.surfaces() {
        let _ = writeln!(s, "#surface {name} {}", tris.len());
        for t in tris {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
    }
    w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))?;
    finish(path, w)
}

pub fn read_mesh(path: impl AsRef<Path>) -> Result<TetMesh> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut vertices = Vec::new();
    let mut tets = Vec::new();
    let mut labels = Vec::new();
    let mut fibers = Vec::new();
    let mut surfaces: BTreeMap<String, Vec<[usize; 3]>> = BTreeMap::new();
    enum Section {
        None,
        Vertices,
        Tets,
        Fibers,
        Surface(String),
    }
    let mut section = Section::None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let ln = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(head) = line.strip_prefix('#') {
            let mut parts = head.split_whitespace();
            section = match parts.next() {
                Some("vertices") => Section::Vertices,
                Some("tets") => Section::Tets,
                Some("fibers") => Section::Fibers,
                Some("surface") => {
                    let name = parts
                        .next()
                        .ok_or_else(|| parse_err(path, ln, "surface section needs a name"))?;
                    surfaces.entry(name.to_string()).or_default();
                    Section::Surface(name.to_string())
                }
                other => return Err(parse_err(path, ln, format!("unknown section {other:?}"))),
            };
            continue;
        }
        let nums: Vec<&str> = line.split_whitespace().collect();
        let f = |k: usize| -> Result<f64> {
            nums[k].parse().map_err(|_| parse_err(path, ln, format!("bad number `{}`", nums[k])))
        };
        let u = |k: usize| -> Result<usize> {
            nums[k].parse().map_err(|_| parse_err(path, ln, format!("bad index `{}`", nums[k])))
        };
        let want = match section {
            Section::None => return Err(parse_err(path, ln, "data before the first section")),
            Section::Vertices => 3,
            Section::Tets => 5,
            Section::Fibers => 6,
            Section::Surface(_) => 3,
        };
        if nums.len() != want {
            return Err(parse_err(path, ln, format!("expected {want} fields, found {}", nums.len())));
        }
        match &section {
            Section::Vertices => vertices.push(Vec3::new(f(0)?, f(1)?, f(2)?)),
            Section::Tets => {
                tets.push([u(0)?, u(1)?, u(2)?, u(3)?]);
                labels.push(
                    nums[4]
                        .parse()
                        .map_err(|_| parse_err(path, ln, format!("bad label `{}`", nums[4])))?,
                );
            }
            Section::Fibers => fibers.push(FiberFrame {
                fiber: Vec3::new(f(0)?, f(1)?, f(2)?),
                sheet: Vec3::new(f(3)?, f(4)?, f(5)?),
            }),
            Section::Surface(name) => surfaces.get_mut(name).expect("section registered").push([u(0)?, u(1)?, u(2)?]),
            Section::None => unreachable!(),
        }
    }
    if fibers.is_empty() {
        fibers = vec![FiberFrame::identity(); tets.len()];
    }
    TetMesh::new(vertices, tets, labels, fibers, surfaces)
}

/// Legacy ASCII VTK unstructured grid with optional point and cell scalars.
pub fn write_vtk(
    path: impl AsRef<Path>,
    mesh: &TetMesh,
    point_data: &[(&str, &[f64])],
    cell_data: &[(&str, &[f64])],
) -> Result<()> {
    let path = path.as_ref();
    for (name, d) in point_data {
        if d.len() != mesh.num_vertices() {
            return Err(Error::Mismatch(format!("point field {name} has {} values", d.len())));
        }
    }
    for (name, d) in cell_data {
        if d.len() != mesh.num_tets() {
            return Err(Error::Mismatch(format!("cell field {name} has {} values", d.len())));
        }
    }
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0\neikonal-twin\nASCII\nDATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {} double", mesh.num_vertices());
    for v in mesh.vertices() {
        let _ = writeln!(s, "{} {} {}", v.x, v.y, v.z);
    }
    let _ = writeln!(s, "CELLS {} {}", mesh.num_tets(), 5 * mesh.num_tets());
    for t in mesh.tets() {
        let _ = writeln!(s, "4 {} {} {} {}", t[0], t[1], t[2], t[3]);
    }
    let _ = writeln!(s, "CELL_TYPES {}", mesh.num_tets());
    for _ in mesh.tets() {
        s.push_str("10\n");
    }
    let scalar = |s: &mut String, name: &str, d: &[f64]| {
        let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
        for x in d {
            // VTK readers do not accept `inf`.
            let x = if x.is_finite() { *x } else { -1.0 };
            let _ = writeln!(s, "{x}");
        }
    };
    let _ = writeln!(s, "CELL_DATA {}", mesh.num_tets());
    let labels: Vec<f64> = mesh.labels().iter().map(|&l| l as f64).collect();
    scalar(&mut s, "region", &labels);
    for (name, d) in cell_data {
        scalar(&mut s, name, d);
    }
    if !point_data.is_empty() {
        let _ = writeln!(s, "POINT_DATA {}", mesh.num_vertices());
        for (name, d) in point_data {
            scalar(&mut s, name, d);
        }
    }
    let mut w = create(path)?;
    w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))?;
    finish(path, w)
}

// ---------------------------------------------------------------- ECGs

pub fn write_ecg(path: impl AsRef<Path>, trace: &EcgTrace) -> Result<()> {
    let path = path.as_ref();
    trace.validate()?;
    let mut w = csv_writer(path)?;
    let mut header = vec!["time_ms".to_string()];
    header.extend(trace.leads.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for k in 0..trace.grid.num_samples() {
        let mut row = vec![trace.grid.time(k).to_string()];
        row.extend(trace.values.iter().map(|l| l[k].to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    csv_finish(path, w)
}

/// Reads an ECG CSV; the time column must be uniform.
pub fn read_ecg(path: impl AsRef<Path>) -> Result<EcgTrace> {
    let path = path.as_ref();
    let (header, rows) = read_table(path)?;
    if header.first().map(String::as_str) != Some("time_ms") || header.len() < 2 {
        return Err(parse_err(path, 1, "expected header `time_ms,<lead names>`"));
    }
    if rows.len() < 2 {
        return Err(parse_err(path, 1, "an ECG needs at least two samples"));
    }
    let leads: Vec<String> = header[1..].to_vec();
    let mut times = Vec::with_capacity(rows.len());
    let mut values = vec![Vec::with_capacity(rows.len()); leads.len()];
    for (line, row) in &rows {
        if row.len() != header.len() {
            return Err(parse_err(path, *line, "row length differs from header"));
        }
        times.push(field::<f64>(path, *line, row, 0)?);
        for (l, v) in values.iter_mut().enumerate() {
            v.push(field(path, *line, row, l + 1)?);
        }
    }
    let n = times.len() - 1;
    let dt = (times[n] - times[0]) / n as f64;
    let grid = TemporalGrid::new(times[0], dt, n).map_err(|e| parse_err(path, 2, e.to_string()))?;
    for (k, t) in times.iter().enumerate() {
        if (t - grid.time(k)).abs() > 1e-9 * (1.0 + t.abs()) {
            return Err(parse_err(path, rows[k].0, "time column is not uniform"));
        }
    }
    let trace = EcgTrace { leads, grid, values };
    trace.validate()?;
    Ok(trace)
}

// ---------------------------------------------------------------- PMJs, maps, ROI

/// `pmj_id,x,y,z,t_ms,active`
pub fn write_pmjs(path: impl AsRef<Path>, pmjs: &PmjSet) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(["pmj_id", "x", "y", "z", "t_ms", "active"]).map_err(|e| csv_err(path, e))?;
    for (i, p) in pmjs.pmjs.iter().enumerate() {
        let active = pmjs.active.get(i).copied().unwrap_or(true);
        w.write_record([
            i.to_string(),
            p.position.x.to_string(),
            p.position.y.to_string(),
            p.position.z.to_string(),
            p.time.to_string(),
            (active as u8).to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    csv_finish(path, w)
}

pub fn read_pmjs(path: impl AsRef<Path>) -> Result<PmjSet> {
    let path = path.as_ref();
    let (header, rows) = read_table(path)?;
    expect_header(path, &header, &["pmj_id", "x", "y", "z", "t_ms", "active"])?;
    let mut pmjs = Vec::new();
    let mut active = Vec::new();
    for (line, row) in &rows {
        let id: usize = field(path, *line, row, 0)?;
        if id != pmjs.len() {
            return Err(parse_err(path, *line, "PMJ ids must be 0, 1, 2, ..."));
        }
        let p = Vec3::new(field(path, *line, row, 1)?, field(path, *line, row, 2)?, field(path, *line, row, 3)?);
        pmjs.push(Pmj::new(p, field(path, *line, row, 4)?));
        active.push(field::<u8>(path, *line, row, 5)? != 0);
    }
    Ok(PmjSet { pmjs, active })
}

/// `vertex_id,tau_ms,activator` (activator `-1` for unreached vertices).
pub fn write_activation(path: impl AsRef<Path>, map: &ActivationMap) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(["vertex_id", "tau_ms", "activator"]).map_err(|e| csv_err(path, e))?;
    for (i, (t, a)) in map.tau.iter().zip(&map.activator).enumerate() {
        let a = a.map_or("-1".to_string(), |a| a.to_string());
        w.write_record([i.to_string(), t.to_string(), a]).map_err(|e| csv_err(path, e))?;
    }
    csv_finish(path, w)
}

/// Activation times from a `vertex_id,tau_ms,activator` file.
pub fn read_activation(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let (header, rows) = read_table(path)?;
    expect_header(path, &header, &["vertex_id", "tau_ms", "activator"])?;
    let mut tau = Vec::with_capacity(rows.len());
    for (line, row) in &rows {
        if field::<usize>(path, *line, row, 0)? != tau.len() {
            return Err(parse_err(path, *line, "vertex ids must be 0, 1, 2, ..."));
        }
        tau.push(field(path, *line, row, 1)?);
    }
    Ok(tau)
}

/// `pmj_id,x,y,z,t_ms,roi_mm3,active`
pub fn write_roi(path: impl AsRef<Path>, pmjs: &PmjSet, roi: &RegionOfInfluence) -> Result<()> {
    let path = path.as_ref();
    if roi.volumes.len() != pmjs.len() {
        return Err(Error::Mismatch("one ROI volume per PMJ required".into()));
    }
    let mut w = csv_writer(path)?;
    w.write_record(["pmj_id", "x", "y", "z", "t_ms", "roi_mm3", "active"]).map_err(|e| csv_err(path, e))?;
    for (i, p) in pmjs.pmjs.iter().enumerate() {
        w.write_record([
            i.to_string(),
            p.position.x.to_string(),
            p.position.y.to_string(),
            p.position.z.to_string(),
            p.time.to_string(),
            roi.volumes[i].to_string(),
            (roi.active[i] as u8).to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    csv_finish(path, w)
}

/// One-column-per-field numeric table with a header.
pub fn write_columns(path: impl AsRef<Path>, header: &[&str], columns: &[&[f64]]) -> Result<()> {
    let path = path.as_ref();
    if header.len() != columns.len() || columns.iter().any(|c| c.len() != columns[0].len()) {
        return Err(Error::Mismatch("columns must match the header and share a length".into()));
    }
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for k in 0..columns.first().map_or(0, |c| c.len()) {
        w.write_record(columns.iter().map(|c| c[k].to_string())).map_err(|e| csv_err(path, e))?;
    }
    csv_finish(path, w)
}

/// Generic CSV with string cells.
pub fn write_table(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    csv_finish(path, w)
}

/// Reads any CSV as header plus string rows.
pub fn read_string_table(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let (h, rows) = read_table(path.as_ref())?;
    Ok((h, rows.into_iter().map(|(_, r)| r).collect()))
}

// ---------------------------------------------------------------- BSPM

/// `vertex_id,phi_mV` for one snapshot.
pub fn write_bspm_snapshot(path: impl AsRef<Path>, vertices: &[usize], phi: &[f64]) -> Result<()> {
    let path = path.as_ref();
    if vertices.len() != phi.len() {
        return Err(Error::Mismatch("one potential per surface vertex required".into()));
    }
    let mut w = csv_writer(path)?;
    w.write_record(["vertex_id", "phi_mV"]).map_err(|e| csv_err(path, e))?;
    for (v, p) in vertices.iter().zip(phi) {
        w.write_record([v.to_string(), p.to_string()]).map_err(|e| csv_err(path, e))?;
    }
    csv_finish(path, w)
}

pub fn read_bspm_snapshot(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f64>)> {
    let path = path.as_ref();
    let (header, rows) = read_table(path)?;
    expect_header(path, &header, &["vertex_id", "phi_mV"])?;
    let mut v = Vec::with_capacity(rows.len());
    let mut p = Vec::with_capacity(rows.len());
    for (line, row) in &rows {
        v.push(field(path, *line, row, 0)?);
        p.push(field(path, *line, row, 1)?);
    }
    Ok((v, p))
}

/// Name of snapshot `k` inside a BSPM directory.
pub fn bspm_snapshot_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("t{k:05}.csv"))
}

// ---------------------------------------------------------------- lead sets

/// Writes the ASCII lead-set archive.
pub fn write_leadset(path: impl AsRef<Path>, leads: &LeadSet) -> Result<()> {
    let path = path.as_ref();
    leads.validate()?;
    let mut s = String::new();
    let _ = writeln!(s, "#layout {}", leads.layout);
    let _ = writeln!(s, "#scale {}", leads.scale);
    let _ = writeln!(s, "#electrodes {}", leads.electrodes.len());
    for ((n, p), v) in leads.electrode_names.iter().zip(&leads.electrodes).zip(&leads.electrode_vertices) {
        let _ = writeln!(s, "{n} {v} {} {} {}", p.x, p.y, p.z);
    }
    let _ = writeln!(s, "#leads {}", leads.num_leads());
    for (n, w) in leads.lead_names.iter().zip(&leads.weights) {
        let _ = write!(s, "{n}");
        for x in w {
            let _ = write!(s, " {x}");
        }
        s.push('\n');
    }
    for (n, b) in leads.lead_names.iter().zip(&leads.b) {
        let _ = writeln!(s, "#vector {n} {}", b.len());
        for x in b {
            let _ = writeln!(s, "{x}");
        }
    }
    let mut w = create(path)?;
    w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))?;
    finish(path, w)
}

pub fn read_leadset(path: impl AsRef<Path>) -> Result<LeadSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = LeadSet {
        layout: String::new(),
        electrode_names: Vec::new(),
        electrodes: Vec::new(),
        electrode_vertices: Vec::new(),
        lead_names: Vec::new(),
        weights: Vec::new(),
        scale: 1.0,
        b: Vec::new(),
    };
    let mut section = "";
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let num = |k: usize| -> Result<f64> {
            parts
                .get(k)
                .ok_or_else(|| parse_err(path, ln, "missing field"))?
                .parse()
                .map_err(|_| parse_err(path, ln, format!("bad number in `{line}`")))
        };
        if let Some(head) = parts[0].strip_prefix('#') {
            match head {
                "layout" => out.layout = parts.get(1).unwrap_or(&"").to_string(),
                "scale" => out.scale = num(1)?,
                "electrodes" | "leads" => section = if head == "leads" { "leads" } else { "electrodes" },
                "vector" => {
                    let name = parts.get(1).ok_or_else(|| parse_err(path, ln, "vector needs a lead name"))?;
                    if out.lead_names.get(out.b.len()).map(String::as_str) != Some(*name) {
                        return Err(parse_err(path, ln, "vectors must follow the lead order"));
                    }
                    out.b.push(Vec::new());
                    section = "vector";
                }
                _ => return Err(parse_err(path, ln, format!("unknown section `{head}`"))),
            }
            continue;
        }
        match section {
            "electrodes" => {
                if parts.len() != 5 {
                    return Err(parse_err(path, ln, "electrode lines are `name vertex x y z`"));
                }
                out.electrode_names.push(parts[0].to_string());
                out.electrode_vertices.push(
                    parts[1].parse().map_err(|_| parse_err(path, ln, "bad vertex id"))?,
                );
                out.electrodes.push(Vec3::new(num(2)?, num(3)?, num(4)?));
            }
            "leads" => {
                out.lead_names.push(parts[0].to_string());
                out.weights.push((1..parts.len()).map(num).collect::<Result<_>>()?);
            }
            "vector" => out.b.last_mut().expect("vector section open").push(num(0)?),
            _ => return Err(parse_err(path, ln, "data before the first section")),
        }
    }
    out.validate()?;
    Ok(out)
}
