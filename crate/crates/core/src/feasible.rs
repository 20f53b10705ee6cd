//! Admissible PMJ region: the whole myocardium, or a subendocardial band
//! around a masked endocardial source surface.

use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anatomy::{azimuth_deg, ENDO, EPI};
use crate::eikonal::{Pmj, PmjSet};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::mesh::{sample_triangles_indexed, SurfacePoint, TetMesh, TriangleIndex};

/// Fraction of the way from a boundary point to its tet centroid used to
/// pull surface points strictly inside the mesh.
const NUDGE: f64 = 1e-6;
/// Slack on the band-membership test (mm).
const BAND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintMode {
    Unrestricted,
    #[serde(alias = "restricted")]
    Band,
}

impl FromStr for ConstraintMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unrestricted" => Ok(ConstraintMode::Unrestricted),
            "band" | "restricted" => Ok(ConstraintMode::Band),
            _ => Err(Error::InvalidInput(format!(
                "unknown constraint mode `{s}` (expected unrestricted or band)"
            ))),
        }
    }
}

/// Run-config view of the region.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintSpec {
    pub mode: ConstraintMode,
    /// Band depth below the source surface (mm).
    pub d_pmj_mm: f64,
    /// Basal share of the apico-basal extent excluded from the source surface.
    pub basal_cutoff: f64,
    /// Azimuth sector `[from, to]` (degrees about the long axis, wrapping
    /// through 360) excluded from the source surface. Empty list disables it.
    pub rv_inferior_mask: Vec<f64>,
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        ConstraintSpec {
            mode: ConstraintMode::Band,
            d_pmj_mm: 2.5,
            basal_cutoff: 0.1,
            rv_inferior_mask: vec![200.0, 250.0],
        }
    }
}

impl ConstraintSpec {
    pub fn unrestricted() -> Self {
        ConstraintSpec {
            mode: ConstraintMode::Unrestricted,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_pmj_mm > 0.0) {
            return Err(Error::InvalidInput("constraint.d_pmj_mm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.basal_cutoff) {
            return Err(Error::InvalidInput("constraint.basal_cutoff must lie in [0, 1)".into()));
        }
        match self.rv_inferior_mask.as_slice() {
            [] => Ok(()),
            [a, b] if a.is_finite() && b.is_finite() => Ok(()),
            _ => Err(Error::InvalidInput(
                "constraint.rv_inferior_mask must be [] or [from_deg, to_deg]".into(),
            )),
        }
    }

    fn masked(&self, azimuth: f64) -> bool {
        match self.rv_inferior_mask.as_slice() {
            [a, b] => {
                let a = a.rem_euclid(360.0);
                let b = b.rem_euclid(360.0);
                if a <= b {
                    (a..=b).contains(&azimuth)
                } else {
                    azimuth >= a || azimuth <= b
                }
            }
            _ => false,
        }
    }
}

/// Triangle set together with the tet each triangle bounds.
#[derive(Debug, Clone)]
struct AnchoredSurface {
    tris: Vec<[usize; 3]>,
    tets: Vec<usize>,
    index: TriangleIndex,
}

impl AnchoredSurface {
    fn new(mesh: &TetMesh, tris: Vec<[usize; 3]>) -> Result<Self> {
        let tets = tris
            .iter()
            .map(|t| {
                mesh.vertex_tets(t[0])
                    .iter()
                    .copied()
                    .find(|&k| {
                        let tet = &mesh.tets()[k];
                        t.iter().all(|v| tet.contains(v))
                    })
                    .ok_or_else(|| Error::Geometry(format!("surface triangle {t:?} bounds no tet")))
            })
            .collect::<Result<Vec<_>>>()?;
        let index = TriangleIndex::new(mesh.vertices(), &tris);
        Ok(AnchoredSurface { tris, tets, index })
    }

    fn closest(&self, p: &Vec3) -> SurfacePoint {
        self.index.closest(p).expect("anchored surfaces are nonempty")
    }
}

/// Immutable admissible region on the ventricular mesh.
#[derive(Debug, Clone)]
pub struct FeasibleRegion {
    spec: ConstraintSpec,
    /// Masked source surface in band mode; the whole endo + epi boundary otherwise.
    source: AnchoredSurface,
    boundary: AnchoredSurface,
    source_area: f64,
}

impl FeasibleRegion {
    /// Builds the region on the ventricular mesh, which must carry the
    /// `endo` and `epi` surfaces. The long axis is vertical through the
    /// centre of the mesh's bounding box.
    pub fn build(mesh: &TetMesh, spec: &ConstraintSpec) -> Result<Self> {
        spec.validate()?;
        let endo = mesh.surface(ENDO)?;
        let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
        for v in mesh.vertices() {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        let centre = (lo + hi) / 2.0;
        let source_tris: Vec<[usize; 3]> = match spec.mode {
            ConstraintMode::Band => endo
                .iter()
                .copied()
                .filter(|t| {
                    let c = t.iter().fold(Vec3::zeros(), |a, &i| a + mesh.vertex(i)) / 3.0;
                    let ab = (c.z - lo.z) / (hi.z - lo.z);
                    let az = azimuth_deg(&(c - centre));
                    ab <= 1.0 - spec.basal_cutoff && !spec.masked(az)
                })
                .collect(),
            ConstraintMode::Unrestricted => {
                endo.iter().chain(mesh.surface(EPI)?).copied().collect()
            }
        };
        if source_tris.is_empty() {
            return Err(Error::EmptySurface("PMJ source surface after masking".into()));
        }
        let source_area = source_tris
            .iter()
            .map(|t| crate::geometry::triangle_area(mesh.vertex(t[0]), mesh.vertex(t[1]), mesh.vertex(t[2])))
            .sum();
        let source = AnchoredSurface::new(mesh, source_tris)?;
        let boundary = AnchoredSurface::new(mesh, mesh.boundary().to_vec())?;
        Ok(FeasibleRegion {
            spec: spec.clone(),
            source,
            boundary,
            source_area,
        })
    }

    pub fn spec(&self) -> &ConstraintSpec {
        &self.spec
    }

    pub fn mode(&self) -> ConstraintMode {
        self.spec.mode
    }

    /// Triangles of the source surface (mesh vertex ids).
    pub fn source_triangles(&self) -> &[[usize; 3]] {
        &self.source.tris
    }

    pub fn source_area(&self) -> f64 {
        self.source_area
    }

    /// Distance from `p` to the source surface.
    pub fn source_distance(&self, p: &Vec3) -> f64 {
        self.source.closest(p).distance
    }

    pub fn contains(&self, mesh: &TetMesh, p: &Vec3) -> Result<bool> {
        if !mesh.contains(p)? {
            return Ok(false);
        }
        Ok(match self.spec.mode {
            ConstraintMode::Unrestricted => true,
            ConstraintMode::Band => self.source_distance(p) <= self.spec.d_pmj_mm + BAND_SLACK,
        })
    }

    fn nudge(mesh: &TetMesh, q: &Vec3, tet: usize) -> Vec3 {
        let c = mesh.tet_points(tet).iter().fold(Vec3::zeros(), |a, &v| a + v) / 4.0;
        q + (c - q) * NUDGE
    }

    /// Farthest point along `from -> to` that is still in the mesh, assuming
    /// `from` is inside.
    fn last_inside(mesh: &TetMesh, from: &Vec3, to: &Vec3) -> Result<Vec3> {
        if mesh.contains(to)? {
            return Ok(*to);
        }
        let (mut a, mut b) = (0.0, 1.0);
        for _ in 0..50 {
            let m = 0.5 * (a + b);
            if mesh.contains(&(from + (to - from) * m))? {
                a = m;
            } else {
                b = m;
            }
        }
        Ok(from + (to - from) * a)
    }

    /// Closest admissible position to `p`.
    ///
    /// Members are returned unchanged. In band mode the point is moved to its
    /// closest point on the source surface and pushed back towards `p` by at
    /// most the band depth while staying in the mesh.
    pub fn project_point(&self, mesh: &TetMesh, p: &Vec3) -> Result<Vec3> {
        if self.contains(mesh, p)? {
            return Ok(*p);
        }
        match self.spec.mode {
            ConstraintMode::Unrestricted => {
                let sp = self.boundary.closest(p);
                Ok(Self::nudge(mesh, &sp.point, self.boundary.tets[sp.triangle]))
            }
            ConstraintMode::Band => {
                let sp = self.source.closest(p);
                let anchor = Self::nudge(mesh, &sp.point, self.source.tets[sp.triangle]);
                let d = sp.distance;
                let target = if d > self.spec.d_pmj_mm {
                    sp.point + (p - sp.point) * (self.spec.d_pmj_mm / d)
                } else {
                    *p
                };
                let q = Self::last_inside(mesh, &anchor, &target)?;
                // Numerical guard: the band test must hold for the result.
                if self.contains(mesh, &q)? {
                    Ok(q)
                } else {
                    Ok(anchor)
                }
            }
        }
    }

    /// Projects every PMJ position and clamps timings at zero.
    pub fn project(&self, mesh: &TetMesh, pmjs: &PmjSet) -> Result<PmjSet> {
        let mut out = pmjs.clone();
        for pmj in &mut out.pmjs {
            pmj.position = self.project_point(mesh, &pmj.position)?;
            pmj.time = pmj.time.max(0.0);
        }
        Ok(out)
    }

    /// `count` PMJs area-uniform on the source surface, timings uniform on
    /// `[t0, t1]`.
    pub fn sample_initial(&self, mesh: &TetMesh, count: usize, times: (f64, f64), seed: u64) -> Result<PmjSet> {
        if count == 0 {
            return Err(Error::InvalidInput("PMJ count must be at least 1".into()));
        }
        if !(times.1 >= times.0) {
            return Err(Error::InvalidInput("timing range must satisfy t0 <= t1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sites = sample_triangles_indexed(mesh.vertices(), &self.source.tris, count, &mut rng)
            .ok_or_else(|| Error::EmptySurface("PMJ source surface".into()))?;
        let pmjs = sites
            .into_iter()
            .map(|(p, tri)| {
                let t = times.0 + (times.1 - times.0) * rng.random::<f64>();
                Pmj::new(Self::nudge(mesh, &p, self.source.tets[tri]), t)
            })
            .collect();
        Ok(PmjSet::new(pmjs))
    }
}
