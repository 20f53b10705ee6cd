//! Electrode layouts and lead definitions on a box torso.
//!
//! Electrode sites are fractions of the torso bounding box and snap to the
//! nearest torso-surface vertex. Unipolar leads are referenced to Wilson's
//! central terminal (mean of RA, LA and LL).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::mesh::TetMesh;

/// Supported electrode configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LeadLayout {
    Limb4,
    Ecg12,
    Vest(usize),
}

impl LeadLayout {
    pub const VEST_SIZES: [usize; 3] = [32, 64, 128];
}

impl FromStr for LeadLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "limb4" => Ok(LeadLayout::Limb4),
            "ecg12" => Ok(LeadLayout::Ecg12),
            _ => {
                let n = s
                    .strip_prefix("vest")
                    .and_then(|n| n.trim_start_matches(['(', '_']).trim_end_matches(')').parse().ok())
                    .ok_or_else(|| Error::InvalidInput(format!("unknown lead layout `{s}`")))?;
                if LeadLayout::VEST_SIZES.contains(&n) {
                    Ok(LeadLayout::Vest(n))
                } else {
                    Err(Error::InvalidInput(format!(
                        "vest size {n} not supported (use 32, 64 or 128)"
                    )))
                }
            }
        }
    }
}

impl fmt::Display for LeadLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LeadLayout::Limb4 => write!(f, "limb4"),
            LeadLayout::Ecg12 => write!(f, "ecg12"),
            LeadLayout::Vest(n) => write!(f, "vest{n}"),
        }
    }
}

impl serde::Serialize for LeadLayout {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for LeadLayout {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Placement parameters, as fractions of the torso bounding box. The anterior
/// face is `y = min`, the patient's left is `+x`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Placement {
    /// Height fraction of the precordial row.
    pub chest_level: f64,
    /// Height fractions of the shoulder and hip electrodes.
    pub shoulder_level: f64,
    pub hip_level: f64,
    /// Height range covered by the vest grids.
    pub vest_bottom: f64,
    pub vest_top: f64,
    /// Width range covered by the vest grids.
    pub vest_left: f64,
    pub vest_right: f64,
}

impl Default for Placement {
    fn default() -> Self {
        Placement {
            chest_level: 0.55,
            shoulder_level: 0.95,
            hip_level: 0.05,
            vest_bottom: 0.25,
            vest_top: 0.85,
            vest_left: 0.1,
            vest_right: 0.9,
        }
    }
}

/// Electrodes, lead weights and (once computed) the per-lead projection vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadSet {
    pub layout: String,
    pub electrode_names: Vec<String>,
    /// Snapped electrode positions (mm).
    pub electrodes: Vec<Vec3>,
    pub electrode_vertices: Vec<usize>,
    pub lead_names: Vec<String>,
    /// Lead-by-electrode weights; each row sums to zero.
    pub weights: Vec<Vec<f64>>,
    pub scale: f64,
    /// Lead-by-heart-vertex projection vectors; empty until precomputed.
    pub b: Vec<Vec<f64>>,
}

/// Default scale applied to the lead vectors.
pub const LEAD_SCALE: f64 = 0.32;

impl LeadSet {
    pub fn num_leads(&self) -> usize {
        self.lead_names.len()
    }

    pub fn has_vectors(&self) -> bool {
        self.b.len() == self.lead_names.len() && !self.b.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let ne = self.electrodes.len();
        if self.electrode_names.len() != ne || self.electrode_vertices.len() != ne {
            return Err(Error::Mismatch("electrode arrays differ in length".into()));
        }
        if self.weights.len() != self.lead_names.len() {
            return Err(Error::Mismatch("one weight row per lead required".into()));
        }
        for (name, w) in self.lead_names.iter().zip(&self.weights) {
            if w.len() != ne {
                return Err(Error::Mismatch(format!("lead {name} has {} weights for {ne} electrodes", w.len())));
            }
            let s: f64 = w.iter().sum();
            if s.abs() > 1e-12 {
                return Err(Error::InvalidInput(format!("weights of lead {name} sum to {s:.3e}")));
            }
        }
        if !self.b.is_empty() {
            if self.b.len() != self.lead_names.len() {
                return Err(Error::Mismatch("one lead vector per lead required".into()));
            }
            let nh = self.b[0].len();
            if self.b.iter().any(|b| b.len() != nh) {
                return Err(Error::Mismatch("lead vectors differ in length".into()));
            }
        }
        Ok(())
    }

    /// Keeps only the named leads, in the given order.
    pub fn select(&self, names: &[&str]) -> Result<LeadSet> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.lead_names
                    .iter()
                    .position(|m| m == n)
                    .ok_or_else(|| Error::InvalidInput(format!("no lead named {n}")))
            })
            .collect::<Result<_>>()?;
        let mut out = self.clone();
        out.lead_names = idx.iter().map(|&i| self.lead_names[i].clone()).collect();
        out.weights = idx.iter().map(|&i| self.weights[i].clone()).collect();
        if !self.b.is_empty() {
            out.b = idx.iter().map(|&i| self.b[i].clone()).collect();
        }
        Ok(out)
    }
}

struct Builder {
    names: Vec<String>,
    sites: Vec<Vec3>,
    leads: Vec<(String, Vec<(usize, f64)>)>,
}

impl Builder {
    fn electrode(&mut self, name: &str, p: Vec3) -> usize {
        self.names.push(name.to_string());
        self.sites.push(p);
        self.names.len() - 1
    }

    fn lead(&mut self, name: &str, terms: Vec<(usize, f64)>) {
        self.leads.push((name.to_string(), terms));
    }
}

/// Builds a layout on the torso surface `skin` of `mesh`.
pub fn make_leadset(mesh: &TetMesh, skin: &str, layout: LeadLayout, placement: &Placement) -> Result<LeadSet> {
    let verts = mesh.surface_vertices(skin)?;
    if verts.is_empty() {
        return Err(Error::EmptySurface(skin.into()));
    }
    let mut lo = *mesh.vertex(verts[0]);
    let mut hi = lo;
    for &v in &verts {
        lo = lo.inf(mesh.vertex(v));
        hi = hi.sup(mesh.vertex(v));
    }
    let size = hi - lo;
    let front = |u: f64, h: f64| Vec3::new(lo.x + u * size.x, lo.y, lo.z + h * size.z);
    let back = |u: f64, h: f64| Vec3::new(lo.x + u * size.x, hi.y, lo.z + h * size.z);
    let left_side = |d: f64, h: f64| Vec3::new(hi.x, lo.y + d * size.y, lo.z + h * size.z);

    let mut b = Builder {
        names: Vec::new(),
        sites: Vec::new(),
        leads: Vec::new(),
    };
    let ra = b.electrode("RA", front(0.08, placement.shoulder_level));
    let la = b.electrode("LA", front(0.92, placement.shoulder_level));
    let ll = b.electrode("LL", front(0.85, placement.hip_level));
    // Right leg is the ground electrode and carries no lead weight.
    b.electrode("RL", front(0.15, placement.hip_level));
    let third = 1.0 / 3.0;
    let wct = |e: usize| vec![(e, 1.0), (ra, -third), (la, -third), (ll, -third)];
    let limb = |b: &mut Builder| {
        b.lead("I", vec![(la, 1.0), (ra, -1.0)]);
        b.lead("II", vec![(ll, 1.0), (ra, -1.0)]);
        b.lead("III", vec![(ll, 1.0), (la, -1.0)]);
        b.lead("aVR", vec![(ra, 1.0), (la, -0.5), (ll, -0.5)]);
        b.lead("aVL", vec![(la, 1.0), (ra, -0.5), (ll, -0.5)]);
        b.lead("aVF", vec![(ll, 1.0), (ra, -0.5), (la, -0.5)]);
    };
    match layout {
        LeadLayout::Limb4 => limb(&mut b),
        LeadLayout::Ecg12 => {
            limb(&mut b);
            let c = placement.chest_level;
            let sites = [
                front(0.44, c),
                front(0.56, c),
                front(0.64, c - 0.03),
                front(0.72, c - 0.06),
                front(0.86, c - 0.06),
                left_side(0.5, c - 0.06),
            ];
            for (k, p) in sites.into_iter().enumerate() {
                let name = format!("V{}", k + 1);
                let e = b.electrode(&name, p);
                b.lead(&name, wct(e));
            }
        }
        LeadLayout::Vest(n) => {
            let (rows, cols) = match n {
                32 => (4, 4),
                64 => (4, 8),
                128 => (8, 8),
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "vest size {n} not supported (use 32, 64 or 128)"
                    )))
                }
            };
            let frac = |i: usize, m: usize, a: f64, z: f64| a + (z - a) * (i as f64 + 0.5) / m as f64;
            for (side, tag) in [(0, "F"), (1, "B")] {
                for r in 0..rows {
                    for c in 0..cols {
                        let u = frac(c, cols, placement.vest_left, placement.vest_right);
                        let h = frac(r, rows, placement.vest_bottom, placement.vest_top);
                        let p = if side == 0 { front(u, h) } else { back(u, h) };
                        let name = format!("{tag}{r}_{c}");
                        let e = b.electrode(&name, p);
                        b.lead(&name, wct(e));
                    }
                }
            }
        }
    }

    let mut electrode_vertices = Vec::with_capacity(b.sites.len());
    let mut electrodes = Vec::with_capacity(b.sites.len());
    for p in &b.sites {
        let v = *verts
            .iter()
            .min_by(|&&i, &&j| {
                (mesh.vertex(i) - p)
                    .norm_squared()
                    .total_cmp(&(mesh.vertex(j) - p).norm_squared())
                    .then(i.cmp(&j))
            })
            .expect("nonempty surface");
        electrode_vertices.push(v);
        electrodes.push(*mesh.vertex(v));
    }
    let ne = b.names.len();
    let mut lead_names = Vec::new();
    let mut weights = Vec::new();
    for (name, terms) in b.leads {
        let mut w = vec![0.0; ne];
        for (e, x) in terms {
            w[e] += x;
        }
        lead_names.push(name);
        weights.push(w);
    }
    let set = LeadSet {
        layout: layout.to_string(),
        electrode_names: b.names,
        electrodes,
        electrode_vertices,
        lead_names,
        weights,
        scale: LEAD_SCALE,
        b: Vec::new(),
    };
    set.validate()?;
    Ok(set)
}
