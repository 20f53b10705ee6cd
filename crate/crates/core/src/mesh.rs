//! Tetrahedral mesh container and geometric queries.

use std::collections::{BTreeMap, HashMap};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rstar::{PointDistance, RTree, RTreeObject, AABB};

use crate::error::{Error, Result};
use crate::geometry::{
    closest_point_on_triangle, tet_barycentric, tet_signed_volume, triangle_area, Vec3,
    INSIDE_TOLERANCE,
};

/// Integer tissue labels carried per tet.
pub mod region {
    pub const VENTRICLE: i32 = 1;
    pub const TORSO: i32 = 2;
    pub const BLOOD: i32 = 3;
    pub const LUNG: i32 = 4;
}

/// Per-tet fiber and sheet direction; the normal direction is `f x s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiberFrame {
    pub fiber: Vec3,
    pub sheet: Vec3,
}

impl FiberFrame {
    pub fn identity() -> Self {
        FiberFrame {
            fiber: Vec3::x(),
            sheet: Vec3::y(),
        }
    }

    pub fn normal(&self) -> Vec3 {
        self.fiber.cross(&self.sheet)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Location {
    Inside { tet: usize, bary: [f64; 4] },
    Outside { nearest: Vec3, distance: f64 },
}

/// Closest point of a triangle set to a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub point: Vec3,
    pub triangle: usize,
    pub distance: f64,
}

#[derive(Debug, Clone)]
struct TriObj {
    id: usize,
    a: Vec3,
    b: Vec3,
    c: Vec3,
}

impl RTreeObject for TriObj {
    type Envelope = AABB<[f64; 3]>;

    fn envelope(&self) -> Self::Envelope {
        let lo = self.a.inf(&self.b).inf(&self.c);
        let hi = self.a.sup(&self.b).sup(&self.c);
        AABB::from_corners([lo.x, lo.y, lo.z], [hi.x, hi.y, hi.z])
    }
}

impl PointDistance for TriObj {
    fn distance_2(&self, p: &[f64; 3]) -> f64 {
        let p = Vec3::new(p[0], p[1], p[2]);
        (closest_point_on_triangle(&p, &self.a, &self.b, &self.c) - p).norm_squared()
    }
}

#[derive(Debug, Clone)]
struct TetObj {
    id: usize,
    env: AABB<[f64; 3]>,
}

impl RTreeObject for TetObj {
    type Envelope = AABB<[f64; 3]>;

    fn envelope(&self) -> Self::Envelope {
        self.env
    }
}

/// Spatial index over a triangle set.
#[derive(Debug, Clone)]
pub struct TriangleIndex {
    tree: RTree<TriObj>,
}

impl TriangleIndex {
    pub fn new(vertices: &[Vec3], tris: &[[usize; 3]]) -> Self {
        let objs = tris
            .iter()
            .enumerate()
            .map(|(id, t)| TriObj {
                id,
                a: vertices[t[0]],
                b: vertices[t[1]],
                c: vertices[t[2]],
            })
            .collect();
        TriangleIndex {
            tree: RTree::bulk_load(objs),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tree.size() == 0
    }

    pub fn closest(&self, p: &Vec3) -> Option<SurfacePoint> {
        let tri = self.tree.nearest_neighbor([p.x, p.y, p.z])?;
        let q = closest_point_on_triangle(p, &tri.a, &tri.b, &tri.c);
        Some(SurfacePoint {
            point: q,
            triangle: tri.id,
            distance: (q - p).norm(),
        })
    }
}

/// Tetrahedral mesh with labelled regions, fiber frames and named surfaces.
///
/// Immutable after construction; all queries take `&self`.
#[derive(Debug, Clone)]
pub struct TetMesh {
    vertices: Vec<Vec3>,
    tets: Vec<[usize; 4]>,
    labels: Vec<i32>,
    fibers: Vec<FiberFrame>,
    surfaces: BTreeMap<String, Vec<[usize; 3]>>,
    vertex_tets: Vec<Vec<usize>>,
    volumes: Vec<f64>,
    boundary: Vec<[usize; 3]>,
    tet_index: RTree<TetObj>,
    boundary_index: TriangleIndex,
    surface_index: BTreeMap<String, TriangleIndex>,
}

impl TetMesh {
    pub fn new(
        vertices: Vec<Vec3>,
        tets: Vec<[usize; 4]>,
        labels: Vec<i32>,
        fibers: Vec<FiberFrame>,
        surfaces: BTreeMap<String, Vec<[usize; 3]>>,
    ) -> Result<Self> {
        let nv = vertices.len();
        if labels.len() != tets.len() || fibers.len() != tets.len() {
            return Err(Error::Mismatch(format!(
                "{} tets but {} labels and {} fiber frames",
                tets.len(),
                labels.len(),
                fibers.len()
            )));
        }
        let mut volumes = Vec::with_capacity(tets.len());
        for (k, t) in tets.iter().enumerate() {
            if t.iter().any(|&i| i >= nv) {
                return Err(Error::Geometry(format!("tet {k} references a missing vertex")));
            }
            let v = tet_signed_volume(
                &vertices[t[0]],
                &vertices[t[1]],
                &vertices[t[2]],
                &vertices[t[3]],
            );
            if !(v > 0.0) {
                return Err(Error::Geometry(format!(
                    "tet {k} has non-positive signed volume {v:.3e}"
                )));
            }
            volumes.push(v);
        }
        for (name, tris) in &surfaces {
            if tris.iter().flatten().any(|&i| i >= nv) {
                return Err(Error::Geometry(format!(
                    "surface `{name}` references a missing vertex"
                )));
            }
        }

        let mut vertex_tets = vec![Vec::new(); nv];
        for (k, t) in tets.iter().enumerate() {
            for &i in t {
                vertex_tets[i].push(k);
            }
        }

        let boundary = boundary_faces(&tets);
        let tet_index = RTree::bulk_load(
            tets.iter()
                .enumerate()
                .map(|(id, t)| {
                    let mut lo = vertices[t[0]];
                    let mut hi = lo;
                    for &i in &t[1..] {
                        lo = lo.inf(&vertices[i]);
                        hi = hi.sup(&vertices[i]);
                    }
                    TetObj {
                        id,
                        env: AABB::from_corners([lo.x, lo.y, lo.z], [hi.x, hi.y, hi.z]),
                    }
                })
                .collect(),
        );
        let boundary_index = TriangleIndex::new(&vertices, &boundary);
        let surface_index = surfaces
            .iter()
            .map(|(name, tris)| (name.clone(), TriangleIndex::new(&vertices, tris)))
            .collect();

        Ok(TetMesh {
            vertices,
            tets,
            labels,
            fibers,
            surfaces,
            vertex_tets,
            volumes,
            boundary,
            tet_index,
            boundary_index,
            surface_index,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_tets(&self) -> usize {
        self.tets.len()
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn vertex(&self, i: usize) -> &Vec3 {
        &self.vertices[i]
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn fibers(&self) -> &[FiberFrame] {
        &self.fibers
    }

    pub fn tet_volume(&self, k: usize) -> f64 {
        self.volumes[k]
    }

    pub fn tet_volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn vertex_tets(&self, i: usize) -> &[usize] {
        &self.vertex_tets[i]
    }

    pub fn tet_points(&self, k: usize) -> [&Vec3; 4] {
        let t = &self.tets[k];
        [
            &self.vertices[t[0]],
            &self.vertices[t[1]],
            &self.vertices[t[2]],
            &self.vertices[t[3]],
        ]
    }

    pub fn total_volume(&self) -> f64 {
        self.volumes.iter().sum()
    }

    /// Each tet contributes a quarter of its volume to each of its vertices.
    pub fn lumped_vertex_volumes(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.vertices.len()];
        for (t, v) in self.tets.iter().zip(&self.volumes) {
            for &i in t {
                out[i] += 0.25 * v;
            }
        }
        out
    }

    pub fn surface_names(&self) -> impl Iterator<Item = &str> {
        self.surfaces.keys().map(String::as_str)
    }

    pub fn surfaces(&self) -> &BTreeMap<String, Vec<[usize; 3]>> {
        &self.surfaces
    }

    pub fn surface(&self, name: &str) -> Result<&[[usize; 3]]> {
        self.surfaces
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownSurface(name.to_string()))
    }

    /// Faces belonging to exactly one tet.
    pub fn boundary(&self) -> &[[usize; 3]] {
        &self.boundary
    }

    /// Sorted, deduplicated vertex ids of a named surface.
    pub fn surface_vertices(&self, name: &str) -> Result<Vec<usize>> {
        let mut ids: Vec<usize> = self.surface(name)?.iter().flatten().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        Ok(ids)
    }

    pub fn surface_area(&self, name: &str) -> Result<f64> {
        Ok(self
            .surface(name)?
            .iter()
            .map(|t| triangle_area(&self.vertices[t[0]], &self.vertices[t[1]], &self.vertices[t[2]]))
            .sum())
    }

    /// Locates `p` in the mesh. Points outside report the nearest boundary point.
    pub fn locate_point(&self, p: &Vec3) -> Result<Location> {
        let eps = 1e-9 * (1.0 + p.abs().max());
        let probe = AABB::from_corners(
            [p.x - eps, p.y - eps, p.z - eps],
            [p.x + eps, p.y + eps, p.z + eps],
        );
        let mut candidates: Vec<usize> = self
            .tet_index
            .locate_in_envelope_intersecting(probe)
            .map(|o| o.id)
            .collect();
        candidates.sort_unstable();
        for k in candidates {
            let bary = tet_barycentric(p, self.tet_points(k))?;
            if bary.iter().all(|&b| b >= -INSIDE_TOLERANCE) {
                return Ok(Location::Inside {
                    tet: k,
                    bary: clamp_barycentric(bary),
                });
            }
        }
        let sp = self
            .boundary_index
            .closest(p)
            .ok_or_else(|| Error::Geometry("mesh has no boundary".into()))?;
        Ok(Location::Outside {
            nearest: sp.point,
            distance: sp.distance,
        })
    }

    pub fn contains(&self, p: &Vec3) -> Result<bool> {
        Ok(matches!(self.locate_point(p)?, Location::Inside { .. }))
    }

    /// Closest point on the mesh boundary.
    pub fn closest_boundary_point(&self, p: &Vec3) -> Result<SurfacePoint> {
        self.boundary_index
            .closest(p)
            .ok_or_else(|| Error::Geometry("mesh has no boundary".into()))
    }

    pub fn closest_surface_point(&self, p: &Vec3, surface: &str) -> Result<SurfacePoint> {
        let index = self
            .surface_index
            .get(surface)
            .ok_or_else(|| Error::UnknownSurface(surface.to_string()))?;
        index
            .closest(p)
            .ok_or_else(|| Error::EmptySurface(surface.to_string()))
    }

    /// Exact Euclidean distance from `p` to a named triangle set.
    pub fn surface_distance(&self, p: &Vec3, surface: &str) -> Result<f64> {
        Ok(self.closest_surface_point(p, surface)?.distance)
    }

    /// Area-weighted uniform samples on a named surface.
    pub fn sample_surface_uniform(&self, surface: &str, count: usize, seed: u64) -> Result<Vec<Vec3>> {
        let tris = self.surface(surface)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_triangles(&self.vertices, tris, count, &mut rng)
            .ok_or_else(|| Error::EmptySurface(surface.to_string()))
    }

    /// Submesh made of the tets whose label is in `keep`.
    ///
    /// Returns the submesh and the global id of each of its vertices. Surfaces
    /// whose vertices all survive are carried over.
    pub fn extract_region(&self, keep: &[i32]) -> Result<(TetMesh, Vec<usize>)> {
        let mut local = vec![usize::MAX; self.vertices.len()];
        let mut global = Vec::new();
        let mut tets = Vec::new();
        let mut labels = Vec::new();
        let mut fibers = Vec::new();
        for (k, t) in self.tets.iter().enumerate() {
            if !keep.contains(&self.labels[k]) {
                continue;
            }
            let mut lt = [0usize; 4];
            for (j, &i) in t.iter().enumerate() {
                if local[i] == usize::MAX {
                    local[i] = global.len();
                    global.push(i);
                }
                lt[j] = local[i];
            }
            tets.push(lt);
            labels.push(self.labels[k]);
            fibers.push(self.fibers[k]);
        }
        let vertices = global.iter().map(|&i| self.vertices[i]).collect();
        let mut surfaces = BTreeMap::new();
        for (name, tris) in &self.surfaces {
            if tris.iter().flatten().all(|&i| local[i] != usize::MAX) {
                let mapped = tris
                    .iter()
                    .map(|t| [local[t[0]], local[t[1]], local[t[2]]])
                    .collect();
                surfaces.insert(name.clone(), mapped);
            }
        }
        Ok((TetMesh::new(vertices, tets, labels, fibers, surfaces)?, global))
    }

    /// Checks the structural invariants that construction does not already enforce.
    pub fn validate(&self) -> Result<()> {
        for (i, ts) in self.vertex_tets.iter().enumerate() {
            for &k in ts {
                if !self.tets[k].contains(&i) {
                    return Err(Error::Geometry(format!(
                        "adjacency of vertex {i} lists tet {k} which does not contain it"
                    )));
                }
            }
        }
        let mut faces: HashMap<[usize; 3], ()> = HashMap::new();
        for t in &self.tets {
            for f in tet_faces(t) {
                faces.insert(sorted3(f), ());
            }
        }
        for (name, tris) in &self.surfaces {
            if let Some(t) = tris.iter().find(|t| !faces.contains_key(&sorted3(**t))) {
                return Err(Error::Geometry(format!(
                    "surface `{name}` triangle {t:?} is not a face of the mesh"
                )));
            }
        }
        Ok(())
    }
}

/// The four faces of a tet; face `i` is opposite local vertex `i`.
pub fn tet_faces(t: &[usize; 4]) -> [[usize; 3]; 4] {
    [
        [t[1], t[2], t[3]],
        [t[0], t[2], t[3]],
        [t[0], t[1], t[3]],
        [t[0], t[1], t[2]],
    ]
}

pub(crate) fn sorted3(mut f: [usize; 3]) -> [usize; 3] {
    f.sort_unstable();
    f
}

fn boundary_faces(tets: &[[usize; 4]]) -> Vec<[usize; 3]> {
    let mut count: HashMap<[usize; 3], (usize, [usize; 3])> = HashMap::new();
    for t in tets {
        for f in tet_faces(t) {
            count.entry(sorted3(f)).or_insert((0, f)).0 += 1;
        }
    }
    let mut out: Vec<[usize; 3]> = count
        .into_values()
        .filter(|(n, _)| *n == 1)
        .map(|(_, f)| f)
        .collect();
    out.sort_unstable_by_key(|f| sorted3(*f));
    out
}

fn clamp_barycentric(b: [f64; 4]) -> [f64; 4] {
    let mut c = b.map(|x| x.clamp(0.0, 1.0));
    let s: f64 = c.iter().sum();
    for x in &mut c {
        *x /= s;
    }
    c
}

/// Draws `count` area-uniform points on a triangle set; `None` if the set has no area.
pub fn sample_triangles<R: rand::Rng>(
    vertices: &[Vec3],
    tris: &[[usize; 3]],
    count: usize,
    rng: &mut R,
) -> Option<Vec<Vec3>> {
    sample_triangles_indexed(vertices, tris, count, rng).map(|v| v.into_iter().map(|(p, _)| p).collect())
}

/// As [`sample_triangles`], also returning the triangle each point lies on.
pub fn sample_triangles_indexed<R: rand::Rng>(
    vertices: &[Vec3],
    tris: &[[usize; 3]],
    count: usize,
    rng: &mut R,
) -> Option<Vec<(Vec3, usize)>> {
    let mut cumulative = Vec::with_capacity(tris.len());
    let mut total = 0.0;
    for t in tris {
        total += triangle_area(&vertices[t[0]], &vertices[t[1]], &vertices[t[2]]);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return None;
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.random::<f64>() * total;
        let k = cumulative.partition_point(|&c| c <= u).min(tris.len() - 1);
        let t = &tris[k];
        let r1: f64 = rng.random::<f64>().sqrt();
        let r2: f64 = rng.random();
        let (a, b, c) = (&vertices[t[0]], &vertices[t[1]], &vertices[t[2]]);
        out.push((a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2), k));
    }
    Some(out)
}

/// Structured unit-spaced box mesh, each hexahedron split into six tets
/// around its main diagonal. `n` cells per axis with spacing `h`.
pub fn box_mesh(n: [usize; 3], h: f64, origin: Vec3) -> TetMesh {
    let axis = |k: usize| (0..=n[k]).map(|i| i as f64 * h).collect::<Vec<_>>();
    let (xs, ys, zs) = (axis(0), axis(1), axis(2));
    let (vertices, tets) = structured_tets(&xs, &ys, &zs, origin);
    let m = tets.len();
    let boundary = boundary_faces(&tets);
    let mut surfaces = BTreeMap::new();
    surfaces.insert("boundary".to_string(), boundary);
    TetMesh::new(vertices, tets, vec![region::VENTRICLE; m], vec![FiberFrame::identity(); m], surfaces)
        .expect("structured box mesh is valid")
}

/// Vertices and positively oriented Kuhn tets of a rectilinear grid.
pub(crate) fn structured_tets(
    xs: &[f64],
    ys: &[f64],
    zs: &[f64],
    origin: Vec3,
) -> (Vec<Vec3>, Vec<[usize; 4]>) {
    let (nx, ny, nz) = (xs.len(), ys.len(), zs.len());
    let id = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
    let mut vertices = Vec::with_capacity(nx * ny * nz);
    for &z in zs {
        for &y in ys {
            for &x in xs {
                vertices.push(origin + Vec3::new(x, y, z));
            }
        }
    }
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut tets = Vec::with_capacity(6 * (nx - 1) * (ny - 1) * (nz - 1));
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                // Mirroring the split in alternate cells keeps the mesh
                // conforming and removes the single preferred diagonal.
                let flip = [i % 2 == 1, j % 2 == 1, k % 2 == 1];
                let start = [i + flip[0] as usize, j + flip[1] as usize, k + flip[2] as usize];
                for p in PERMS {
                    let mut c = start;
                    let mut t = [id(c[0], c[1], c[2]), 0, 0, 0];
                    for (s, &axis) in p.iter().enumerate() {
                        if flip[axis] {
                            c[axis] -= 1;
                        } else {
                            c[axis] += 1;
                        }
                        t[s + 1] = id(c[0], c[1], c[2]);
                    }
                    let v = tet_signed_volume(
                        &vertices[t[0]],
                        &vertices[t[1]],
                        &vertices[t[2]],
                        &vertices[t[3]],
                    );
                    if v < 0.0 {
                        t.swap(2, 3);
                    }
                    tets.push(t);
                }
            }
        }
    }
    (vertices, tets)
}
