//! Synthetic ventricle-in-torso anatomy.
//!
//! The ventricle is a half-ellipsoidal shell below the base plane `z = 0`
//! with its apex at `z = -outer_height`. It encloses a blood cavity and sits
//! in a box torso with two ellipsoidal lungs. The mesh is a graded tensor grid
//! (fine around the heart, coarse elsewhere) split into tets that are labelled
//! by centroid, so every material interface is a union of mesh faces.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::mesh::{region, sorted3, structured_tets, tet_faces, FiberFrame, TetMesh};

pub const ENDO: &str = "endo";
pub const EPI: &str = "epi";
pub const BASE: &str = "base";
pub const TORSO_SKIN: &str = "torso_skin";

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnatomyParams {
    /// Equatorial radius of the epicardium (mm).
    pub outer_radius: f64,
    /// Base-to-apex length of the epicardium (mm).
    pub outer_height: f64,
    /// Wall thickness (mm), uniform at the equator and the apex.
    pub wall: f64,
    /// Grid spacing around the heart (mm).
    pub heart_h: f64,
    /// Largest grid spacing in the torso (mm).
    pub torso_h: f64,
    /// Ratio between consecutive cells when coarsening away from the heart.
    pub grading: f64,
    /// Torso box corners (mm); the heart base center is the origin.
    pub torso_min: [f64; 3],
    pub torso_max: [f64; 3],
    pub lungs: bool,
    /// Fiber angle at the endocardium (degrees); the epicardium gets the negative.
    pub fiber_angle: f64,
}

impl Default for AnatomyParams {
    fn default() -> Self {
        AnatomyParams {
            outer_radius: 24.0,
            outer_height: 40.0,
            wall: 8.0,
            heart_h: 1.25,
            torso_h: 6.0,
            grading: 1.3,
            torso_min: [-90.0, -70.0, -120.0],
            torso_max: [90.0, 70.0, 60.0],
            lungs: true,
            fiber_angle: 60.0,
        }
    }
}

impl AnatomyParams {
    pub fn inner_radius(&self) -> f64 {
        self.outer_radius - self.wall
    }

    pub fn inner_height(&self) -> f64 {
        self.outer_height - self.wall
    }

    /// Volume of the half-ellipsoidal shell.
    pub fn shell_volume(&self) -> f64 {
        let ri = self.inner_radius();
        let hi = self.inner_height();
        2.0 / 3.0 * PI * (self.outer_radius.powi(2) * self.outer_height - ri * ri * hi)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("anatomy: {m}")));
        let finite = [
            self.outer_radius,
            self.outer_height,
            self.wall,
            self.heart_h,
            self.torso_h,
            self.grading,
            self.fiber_angle,
        ]
        .iter()
        .chain(&self.torso_min)
        .chain(&self.torso_max)
        .all(|x| x.is_finite());
        if !finite {
            return bad("non-finite parameter");
        }
        if !(self.outer_radius > 0.0 && self.outer_height > 0.0) {
            return bad("outer radius and height must be positive");
        }
        if !(self.wall > 0.0 && self.inner_radius() > 0.0 && self.inner_height() > 0.0) {
            return bad("wall must be positive and thinner than the outer radius and height");
        }
        if !(self.heart_h > 0.0 && self.torso_h >= self.heart_h) {
            return bad("need 0 < heart_h <= torso_h");
        }
        if self.wall < 2.0 * self.heart_h {
            return bad("wall must span at least two heart cells");
        }
        if !(self.grading > 1.0) {
            return bad("grading must exceed 1");
        }
        let (lo, hi) = self.heart_box();
        for k in 0..3 {
            if !(self.torso_min[k] < lo[k] - self.torso_h && self.torso_max[k] > hi[k] + self.torso_h) {
                return bad("torso box must enclose the heart with a margin of one torso cell");
            }
        }
        if self.lungs {
            for (c, r) in self.lung_ellipsoids() {
                if (c.x.abs() - r.x) < self.outer_radius + self.heart_h {
                    return bad("lungs overlap the heart");
                }
                for k in 0..3 {
                    if c[k] - r[k] <= self.torso_min[k] || c[k] + r[k] >= self.torso_max[k] {
                        return bad("lungs must lie inside the torso");
                    }
                }
            }
        }
        Ok(())
    }

    fn margin(&self) -> f64 {
        2.0 * self.heart_h
    }

    fn heart_box(&self) -> (Vec3, Vec3) {
        let m = self.margin();
        (
            Vec3::new(-self.outer_radius - m, -self.outer_radius - m, -self.outer_height - m),
            Vec3::new(self.outer_radius + m, self.outer_radius + m, m),
        )
    }

    /// Centers and semi-axes of the two lungs, placed left and right of the heart.
    pub fn lung_ellipsoids(&self) -> [(Vec3, Vec3); 2] {
        let width = self.torso_max[0] - self.outer_radius - 2.0 * self.heart_h;
        let rx = 0.4 * width;
        let cx = self.outer_radius + 2.0 * self.heart_h + 0.5 * width;
        let ry = 0.35 * (self.torso_max[1] - self.torso_min[1]);
        let cy = 0.5 * (self.torso_max[1] + self.torso_min[1]);
        let rz = 0.3 * (self.torso_max[2] - self.torso_min[2]);
        let cz = -0.25 * self.outer_height;
        let r = Vec3::new(rx, ry, rz);
        [(Vec3::new(-cx, cy, cz), r), (Vec3::new(cx, cy, cz), r)]
    }

    /// Tissue label of a point.
    pub fn label(&self, p: &Vec3) -> i32 {
        if p.z < 0.0 && ellipsoid(p, self.outer_radius, self.outer_height) <= 1.0 {
            if ellipsoid(p, self.inner_radius(), self.inner_height()) < 1.0 {
                region::BLOOD
            } else {
                region::VENTRICLE
            }
        } else if self.lungs
            && self.lung_ellipsoids().iter().any(|(c, r)| {
                let d = p - c;
                (d.x / r.x).powi(2) + (d.y / r.y).powi(2) + (d.z / r.z).powi(2) <= 1.0
            })
        {
            region::LUNG
        } else {
            region::TORSO
        }
    }

    /// Normalized apico-basal coordinate: 0 at the apex, 1 at the base plane.
    pub fn apicobasal(&self, p: &Vec3) -> f64 {
        ((p.z + self.outer_height) / self.outer_height).clamp(0.0, 1.0)
    }

    /// Transmural coordinate in [0, 1] (0 endocardium, 1 epicardium) and the
    /// outward normal of the interpolating ellipsoid through `p`.
    pub fn transmural(&self, p: &Vec3) -> (f64, Vec3) {
        let (ri, hi) = (self.inner_radius(), self.inner_height());
        let axes = |l: f64| {
            (
                ri + l * (self.outer_radius - ri),
                hi + l * (self.outer_height - hi),
            )
        };
        let f = |l: f64| {
            let (a, c) = axes(l);
            ellipsoid(p, a, c) - 1.0
        };
        let (mut lo, mut hi_) = (0.0, 1.0);
        let l = if f(lo) <= 0.0 {
            0.0
        } else if f(hi_) >= 0.0 {
            1.0
        } else {
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi_);
                if f(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi_ = mid;
                }
            }
            0.5 * (lo + hi_)
        };
        let (a, c) = axes(l);
        let g = Vec3::new(p.x / (a * a), p.y / (a * a), p.z / (c * c));
        let n = if g.norm() > 0.0 { g.normalize() } else { -Vec3::z() };
        (l, n)
    }

    /// Rule-based fiber frame: sheet along the transmural normal, fiber rotating
    /// from `+fiber_angle` (endocardium) to `-fiber_angle` (epicardium) about it.
    pub fn fiber_frame(&self, p: &Vec3) -> FiberFrame {
        let (l, n) = self.transmural(p);
        let mut circ = Vec3::z().cross(&n);
        if circ.norm() < 1e-6 {
            circ = Vec3::x() - n * n.x;
        }
        let circ = circ.normalize();
        let long = n.cross(&circ).normalize();
        let alpha = (self.fiber_angle * (1.0 - 2.0 * l)).to_radians();
        let fiber = (circ * alpha.cos() + long * alpha.sin()).normalize();
        let sheet = (n - fiber * fiber.dot(&n)).normalize();
        FiberFrame { fiber, sheet }
    }
}

fn ellipsoid(p: &Vec3, a: f64, c: f64) -> f64 {
    (p.x * p.x + p.y * p.y) / (a * a) + p.z * p.z / (c * c)
}

/// Azimuth of `p` about the long axis, degrees in [0, 360).
pub fn azimuth_deg(p: &Vec3) -> f64 {
    p.y.atan2(p.x).to_degrees().rem_euclid(360.0)
}

/// Grid lines on `[lo, hi]`: uniform spacing `h` on the multiples of `h` inside
/// `[flo, fhi]`, growing geometrically up to `coarse` outside.
fn graded_axis(lo: f64, hi: f64, flo: f64, fhi: f64, h: f64, coarse: f64, growth: f64) -> Vec<f64> {
    let first = (flo / h).floor() as i64;
    let last = (fhi / h).ceil() as i64;
    let mut mid: Vec<f64> = (first..=last).map(|k| k as f64 * h).collect();
    let grow = |start: f64, end: f64| {
        let dir = (end - start).signum();
        let mut out = Vec::new();
        let mut x = start;
        let mut s = h;
        loop {
            s = (s * growth).min(coarse);
            let remaining = (end - x).abs();
            if remaining <= 1.5 * s {
                if remaining > 0.5 * s {
                    out.push(x + dir * remaining * 0.5);
                }
                out.push(end);
                break;
            }
            x += dir * s;
            out.push(x);
        }
        out
    };
    let mut left = grow(mid[0], lo);
    left.reverse();
    let right = grow(*mid.last().unwrap(), hi);
    left.append(&mut mid);
    left.extend(right);
    left
}

/// Builds the labelled mesh with fiber frames and the named surfaces
/// `endo`, `epi`, `base` and `torso_skin`.
pub fn generate(params: &AnatomyParams) -> Result<TetMesh> {
    params.validate()?;
    let (blo, bhi) = params.heart_box();
    let axis = |k: usize| {
        graded_axis(
            params.torso_min[k],
            params.torso_max[k],
            blo[k],
            bhi[k],
            params.heart_h,
            params.torso_h,
            params.grading,
        )
    };
    let (xs, ys, zs) = (axis(0), axis(1), axis(2));
    let (vertices, tets) = structured_tets(&xs, &ys, &zs, Vec3::zeros());
    let mut labels = Vec::with_capacity(tets.len());
    let mut fibers = Vec::with_capacity(tets.len());
    for t in &tets {
        let c = t.iter().fold(Vec3::zeros(), |a, &i| a + vertices[i]) / 4.0;
        let l = params.label(&c);
        labels.push(l);
        fibers.push(if l == region::VENTRICLE {
            params.fiber_frame(&c)
        } else {
            FiberFrame::identity()
        });
    }

    let mut sides: HashMap<[usize; 3], Vec<(usize, [usize; 3])>> = HashMap::new();
    for (k, t) in tets.iter().enumerate() {
        for f in tet_faces(t) {
            sides.entry(sorted3(f)).or_default().push((k, f));
        }
    }
    let mut endo = Vec::new();
    let mut epi = Vec::new();
    let mut base = Vec::new();
    let mut skin = Vec::new();
    for (key, s) in &sides {
        match s.as_slice() {
            [(_, f)] => skin.push((*key, *f)),
            [(a, fa), (b, fb)] => {
                let (la, lb) = (labels[*a], labels[*b]);
                if (la == region::VENTRICLE) == (lb == region::VENTRICLE) {
                    continue;
                }
                let (f, other) = if la == region::VENTRICLE { (*fa, lb) } else { (*fb, la) };
                if other == region::BLOOD {
                    endo.push((*key, f));
                } else if f.iter().all(|&i| vertices[i].z.abs() < 1e-9) {
                    base.push((*key, f));
                } else {
                    epi.push((*key, f));
                }
            }
            _ => {
                return Err(Error::Geometry("face shared by more than two tets".into()));
            }
        }
    }
    let mut surfaces = BTreeMap::new();
    for (name, mut tris) in [(ENDO, endo), (EPI, epi), (BASE, base), (TORSO_SKIN, skin)] {
        tris.sort_unstable_by_key(|(k, _)| *k);
        surfaces.insert(name.to_string(), tris.into_iter().map(|(_, f)| f).collect());
    }
    let mesh = TetMesh::new(vertices, tets, labels, fibers, surfaces)?;
    for name in [ENDO, EPI, TORSO_SKIN] {
        if mesh.surface(name)?.is_empty() {
            return Err(Error::EmptySurface(name.into()));
        }
    }
    Ok(mesh)
}

/// Mean edge length of the tets carrying `label`.
pub fn mean_edge_length(mesh: &TetMesh, label: i32) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (k, t) in mesh.tets().iter().enumerate() {
        if mesh.labels()[k] != label {
            continue;
        }
        for a in 0..4 {
            for b in a + 1..4 {
                sum += (mesh.vertex(t[a]) - mesh.vertex(t[b])).norm();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}
