//! Anisotropic eikonal solver on tetrahedral meshes.
//!
//! Arrival times are computed by a synchronous (two-buffer) fixed-point
//! iteration of the Hopf-Lax update
//!
//! ```text
//! tau(x_i) <- min( tau(x_i), min_{y on faces opposite x_i} tau(y) + delta(x_i, y) )
//! ```
//!
//! where `delta` is the element travel-time metric. Only vertices with a
//! neighbor that changed in the previous sweep are re-evaluated; vertices whose
//! neighborhood is unchanged would reproduce their previous value, so the
//! result is identical to a full sweep.
//!
//! After convergence the winning candidate of every vertex is replayed in
//! increasing arrival-time order. The replayed values are the returned map and
//! the recorded provenance is the adjoint tape used for backpropagation.

pub mod local;

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeSet;
use std::hash::{Hash, Hasher};

use rayon::prelude::*;

use crate::adjoint::{AdjointTape, Provenance, SeedSite};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::mesh::{Location, TetMesh};
use crate::velocity::{metric_norm, VelocityField};

pub use local::{FaceMin, LocalSolver};

/// One Purkinje-myocardial junction: an initiation site and its timing (ms).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pmj {
    pub position: Vec3,
    pub time: f64,
}

impl Pmj {
    pub fn new(position: Vec3, time: f64) -> Self {
        Pmj { position, time }
    }
}

/// The optimization variable: a list of PMJs plus the activity flags of the last solve.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PmjSet {
    pub pmjs: Vec<Pmj>,
    pub active: Vec<bool>,
}

impl PmjSet {
    pub fn new(pmjs: Vec<Pmj>) -> Self {
        let n = pmjs.len();
        PmjSet {
            pmjs,
            active: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.pmjs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pmjs.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = &Vec3> {
        self.pmjs.iter().map(|p| &p.position)
    }

    pub fn timings(&self) -> impl Iterator<Item = f64> + '_ {
        self.pmjs.iter().map(|p| p.time)
    }

    /// Hash over positions and timings, used to detect stale tapes.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.pmjs.len().hash(&mut h);
        for p in &self.pmjs {
            for c in p.position.iter() {
                c.to_bits().hash(&mut h);
            }
            p.time.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EikonalConfig {
    /// Convergence threshold on the largest per-vertex decrease in one sweep (ms).
    pub tolerance: f64,
    pub max_iters: usize,
    pub local_solver: LocalSolver,
    /// Vertices graph-connected to a PMJ and within this travel time (ms) of
    /// it are initialized with the direct travel time under the PMJ's element
    /// metric. Zero seeds only the vertices of the containing tet.
    pub seed_radius: f64,
}

impl Default for EikonalConfig {
    fn default() -> Self {
        EikonalConfig {
            tolerance: 1e-4,
            max_iters: 5000,
            local_solver: LocalSolver::Exact,
            seed_radius: 0.0,
        }
    }
}

/// Boundary timings produced by an off-node PMJ on the vertices of its tet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Seed {
    pub tet: usize,
    pub bary: [f64; 4],
    pub vertices: [usize; 4],
    pub times: [f64; 4],
}

/// Solves the local eikonal problem inside the tet containing `pmj`.
pub fn seed_offnode(mesh: &TetMesh, velocity: &VelocityField, pmj: &Pmj) -> Result<Seed> {
    match mesh.locate_point(&pmj.position)? {
        Location::Inside { tet, bary } => {
            let vertices = mesh.tets()[tet];
            let metric = velocity.metric(tet);
            let times = vertices.map(|v| pmj.time + metric_norm(metric, &(mesh.vertex(v) - pmj.position)));
            Ok(Seed {
                tet,
                bary,
                vertices,
                times,
            })
        }
        Location::Outside { distance, .. } => Err(Error::InvalidInput(format!(
            "PMJ at {:?} lies {distance:.3e} mm outside the mesh; project it first",
            pmj.position
        ))),
    }
}

/// Per-solve output: arrival times, activating PMJ per vertex and solve metadata.
#[derive(Debug, Clone)]
pub struct ActivationMap {
    pub tau: Vec<f64>,
    pub activator: Vec<Option<usize>>,
    /// Per PMJ: does it win at least one vertex.
    pub active: Vec<bool>,
    pub iterations: usize,
    /// Largest per-vertex decrease in the final sweep (ms).
    pub residual: f64,
    pub converged: bool,
    tape: AdjointTape,
}

impl ActivationMap {
    pub fn tape(&self) -> &AdjointTape {
        &self.tape
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

#[derive(Debug, Clone, Copy)]
struct FaceRef {
    tet: u32,
    verts: [u32; 3],
}

/// Precomputed update stencils for one mesh and velocity field.
pub struct EikonalSolver<'a> {
    mesh: &'a TetMesh,
    velocity: &'a VelocityField,
    config: EikonalConfig,
    face_offsets: Vec<usize>,
    faces: Vec<FaceRef>,
    neighbor_offsets: Vec<usize>,
    neighbors: Vec<u32>,
}

impl<'a> EikonalSolver<'a> {
    pub fn new(mesh: &'a TetMesh, velocity: &'a VelocityField, config: EikonalConfig) -> Result<Self> {
        if velocity.len() != mesh.num_tets() {
            return Err(Error::Mismatch(format!(
                "velocity field has {} elements, mesh has {} tets",
                velocity.len(),
                mesh.num_tets()
            )));
        }
        if !(config.seed_radius >= 0.0) {
            return Err(Error::InvalidInput("seed radius must be nonnegative".into()));
        }
        if !(config.tolerance >= 0.0) {
            return Err(Error::InvalidInput("eikonal tolerance must be nonnegative".into()));
        }
        let n = mesh.num_vertices();
        let mut face_offsets = Vec::with_capacity(n + 1);
        let mut faces = Vec::new();
        let mut neighbor_offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        face_offsets.push(0);
        neighbor_offsets.push(0);
        let mut nb: Vec<u32> = Vec::new();
        for v in 0..n {
            nb.clear();
            for &k in mesh.vertex_tets(v) {
                let t = mesh.tets()[k];
                let opp: Vec<u32> = t.iter().filter(|&&i| i != v).map(|&i| i as u32).collect();
                faces.push(FaceRef {
                    tet: k as u32,
                    verts: [opp[0], opp[1], opp[2]],
                });
                nb.extend_from_slice(&opp);
            }
            nb.sort_unstable();
            nb.dedup();
            neighbors.extend_from_slice(&nb);
            face_offsets.push(faces.len());
            neighbor_offsets.push(neighbors.len());
        }
        Ok(EikonalSolver {
            mesh,
            velocity,
            config,
            face_offsets,
            faces,
            neighbor_offsets,
            neighbors,
        })
    }

    pub fn mesh(&self) -> &TetMesh {
        self.mesh
    }

    pub fn velocity(&self) -> &VelocityField {
        self.velocity
    }

    pub fn config(&self) -> &EikonalConfig {
        &self.config
    }

    fn neighbors_of(&self, v: usize) -> &[u32] {
        &self.neighbors[self.neighbor_offsets[v]..self.neighbor_offsets[v + 1]]
    }

    /// Vertices connected to `start` through the mesh graph inside the seed ball.
    fn ball(&self, start: &[usize; 4], center: &Vec3, tet: usize) -> Vec<usize> {
        let r = self.config.seed_radius;
        let mut seen: BTreeSet<usize> = start.iter().copied().collect();
        let mut queue: Vec<usize> = start.to_vec();
        while let Some(v) = queue.pop() {
            for &u in self.neighbors_of(v) {
                let u = u as usize;
                if self.velocity.travel_time(tet, center, self.mesh.vertex(u)) <= r && seen.insert(u) {
                    queue.push(u);
                }
            }
        }
        seen.into_iter().collect()
    }

    /// Best Hopf-Lax candidate for `v` that strictly improves on `tau[v]`.
    fn update(&self, v: usize, tau: &[f64]) -> Option<(f64, Provenance)> {
        let xv = self.mesh.vertex(v);
        let mut best = tau[v];
        let mut prov = None;
        for face in &self.faces[self.face_offsets[v]..self.face_offsets[v + 1]] {
            let ft = face.verts.map(|i| tau[i as usize]);
            if ft.iter().all(|t| !t.is_finite()) {
                continue;
            }
            // The face value is at least min(ft); skip faces that cannot win.
            if ft.iter().copied().fold(f64::INFINITY, f64::min) >= best {
                continue;
            }
            let pts = face.verts.map(|i| self.mesh.vertex(i as usize));
            let metric = self.velocity.metric(face.tet as usize);
            let q = local::face_gram(xv, pts, metric);
            if let Some(m) = local::solve_face(self.config.local_solver, &q, &ft) {
                if m.value < best {
                    best = m.value;
                    prov = Some(Provenance::Face {
                        tet: face.tet,
                        upstream: face.verts,
                        weights: m.weights,
                    });
                }
            }
        }
        prov.map(|p| (best, p))
    }

    /// Re-solves every face update over its recorded support (closed, so the
    /// support may shrink) against the final upstream times, in arrival order.
    ///
    /// The causal filter can leave a vertex holding weights found against
    /// upstream times that have since decreased. Replaying those stale weights
    /// gives times that are no longer local minima, so the arrival times
    /// would depend on the weights and the fixed-weight adjoint would be
    /// wrong. After this pass every face weight is stationary for the times
    /// the tape replays. Order stays topological since the support never grows.
    fn polish(&self, order: &[u32], prov: &mut [Provenance], jacobi: &[f64]) {
        let mut tau = jacobi.to_vec();
        for &v in order {
            let v = v as usize;
            if let Provenance::Face { tet, upstream, weights } = &mut prov[v] {
                let ft = upstream.map(|i| tau[i as usize]);
                let pts = upstream.map(|i| self.mesh.vertex(i as usize));
                let q = local::face_gram(self.mesh.vertex(v), pts, self.velocity.metric(*tet as usize));
                let support = weights.map(|w| w > 0.0);
                if let Some(w) = local::minimize_on_support(&q, &ft, &support) {
                    *weights = w;
                }
                tau[v] = local::face_objective(&q, &ft, weights);
            }
        }
    }

    /// Computes the activation map for `pmjs`.
    ///
    /// PMJs outside the mesh are ignored and reported inactive; at least one
    /// must lie inside. Non-convergence within `max_iters` is reported through
    /// `converged = false`, not as an error.
    pub fn solve(&self, pmjs: &PmjSet) -> Result<ActivationMap> {
        let n = self.mesh.num_vertices();
        let mut tau = vec![f64::INFINITY; n];
        let mut prov = vec![Provenance::Unreached; n];
        let mut seeds = Vec::with_capacity(pmjs.len());
        for (j, pmj) in pmjs.pmjs.iter().enumerate() {
            if !pmj.time.is_finite() || !pmj.position.iter().all(|c| c.is_finite()) {
                seeds.push(None);
                continue;
            }
            match seed_offnode(self.mesh, self.velocity, pmj) {
                Ok(seed) => {
                    for (&v, &t) in seed.vertices.iter().zip(&seed.times) {
                        if t < tau[v] {
                            tau[v] = t;
                            prov[v] = Provenance::Seed { pmj: j as u32 };
                        }
                    }
                    if self.config.seed_radius > 0.0 {
                        for v in self.ball(&seed.vertices, &pmj.position, seed.tet) {
                            let t = pmj.time + self.velocity.travel_time(seed.tet, &pmj.position, self.mesh.vertex(v));
                            if t < tau[v] {
                                tau[v] = t;
                                prov[v] = Provenance::Seed { pmj: j as u32 };
                            }
                        }
                    }
                    seeds.push(Some(SeedSite {
                        tet: seed.tet,
                        bary: seed.bary,
                    }));
                }
                Err(Error::InvalidInput(_)) => seeds.push(None),
                Err(e) => return Err(e),
            }
        }
        if seeds.iter().all(Option::is_none) {
            return Err(Error::NoPmjInside);
        }

        let mut stamp = vec![0usize; n];
        let mut generation = 1usize;
        let mut active: Vec<usize> = Vec::new();
        for v in 0..n {
            if tau[v].is_finite() {
                for &u in std::iter::once(&(v as u32)).chain(self.neighbors_of(v)) {
                    let u = u as usize;
                    if stamp[u] != generation {
                        stamp[u] = generation;
                        active.push(u);
                    }
                }
            }
        }
        active.sort_unstable();

        let mut iterations = 0;
        let mut residual = f64::INFINITY;
        let mut converged = false;
        while iterations < self.config.max_iters {
            iterations += 1;
            let updates: Vec<Option<(f64, Provenance)>> =
                active.par_iter().map(|&v| self.update(v, &tau)).collect();
            let mut changed = Vec::new();
            let mut max_decrease = 0.0f64;
            for (&v, upd) in active.iter().zip(updates) {
                if let Some((value, p)) = upd {
                    max_decrease = max_decrease.max(tau[v] - value);
                    tau[v] = value;
                    prov[v] = p;
                    changed.push(v);
                }
            }
            residual = max_decrease;
            if changed.is_empty() || max_decrease < self.config.tolerance {
                converged = true;
                break;
            }
            generation += 1;
            active.clear();
            for &v in &changed {
                for &u in self.neighbors_of(v) {
                    let u = u as usize;
                    if stamp[u] != generation {
                        stamp[u] = generation;
                        active.push(u);
                    }
                }
            }
            active.sort_unstable();
        }
        if !converged {
            log::warn!(
                "eikonal solve stopped after {iterations} sweeps with residual {residual:.3e} ms"
            );
        }

        // Arrival-time order is topological for the causal provenance graph.
        let mut order: Vec<u32> = (0..n as u32).filter(|&v| tau[v as usize].is_finite()).collect();
        order.sort_by(|&a, &b| tau[a as usize].total_cmp(&tau[b as usize]).then(a.cmp(&b)));

        self.polish(&order, &mut prov, &tau);
        let tape = AdjointTape::new(order, prov, seeds, pmjs.fingerprint(), n);
        let (tau, activator) = tape.replay(self.mesh, self.velocity, pmjs);
        let mut active_pmj = vec![false; pmjs.len()];
        for p in tape.provenance() {
            if let Provenance::Seed { pmj } = p {
                active_pmj[*pmj as usize] = true;
            }
        }
        Ok(ActivationMap {
            tau,
            activator,
            active: active_pmj,
            iterations,
            residual,
            converged,
            tape,
        })
    }
}

/// One-shot convenience wrapper around [`EikonalSolver`].
pub fn solve(
    mesh: &TetMesh,
    velocity: &VelocityField,
    pmjs: &PmjSet,
    config: EikonalConfig,
) -> Result<ActivationMap> {
    EikonalSolver::new(mesh, velocity, config)?.solve(pmjs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::box_mesh;
    use crate::velocity::Speeds;

    fn cube(n: usize, h: f64) -> TetMesh {
        box_mesh([n, n, n], h, Vec3::zeros())
    }

    fn strict() -> EikonalConfig {
        EikonalConfig {
            tolerance: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn seed_at_vertex_has_zero_offset() {
        let m = cube(3, 1.0);
        let v = VelocityField::uniform(&m, Speeds::isotropic(1.0)).unwrap();
        let p = Pmj::new(*m.vertex(5), 2.5);
        let s = seed_offnode(&m, &v, &p).unwrap();
        let local = s.vertices.iter().position(|&i| i == 5).unwrap();
        assert_eq!(s.times[local], 2.5);
    }

    #[test]
    fn seed_at_centroid_isotropic() {
        let m = cube(3, 1.0);
        let v = VelocityField::uniform(&m, Speeds::isotropic(1.0)).unwrap();
        let k = 40;
        let c = m.tet_points(k).iter().fold(Vec3::zeros(), |a, p| a + **p) / 4.0;
        let s = seed_offnode(&m, &v, &Pmj::new(c, 1.0)).unwrap();
        assert_eq!(s.tet, k);
        for (i, &vi) in s.vertices.iter().enumerate() {
            assert!((s.times[i] - 1.0 - (m.vertex(vi) - c).norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn seed_anisotropic_matches_quadratic_form() {
        let m = cube(2, 1.0);
        let v = VelocityField::uniform(&m, Speeds::myocardium()).unwrap();
        let x = Vec3::new(0.61, 0.33, 0.27);
        let s = seed_offnode(&m, &v, &Pmj::new(x, 3.0)).unwrap();
        let inv = v.element_tensor(s.tet).1;
        for (i, &vi) in s.vertices.iter().enumerate() {
            let d = m.vertex(vi) - x;
            let dense = (0..3)
                .flat_map(|a| (0..3).map(move |b| (a, b)))
                .map(|(a, b)| d[a] * inv[(a, b)] * d[b])
                .sum::<f64>()
                .sqrt();
            assert!((s.times[i] - 3.0 - dense).abs() < 1e-12);
        }
    }

    #[test]
    fn outside_pmj_is_rejected_by_seeding() {
        let m = cube(2, 1.0);
        let v = VelocityField::uniform(&m, Speeds::isotropic(1.0)).unwrap();
        let r = seed_offnode(&m, &v, &Pmj::new(Vec3::new(5.0, 0.0, 0.0), 0.0));
        assert!(matches!(r, Err(Error::InvalidInput(_))));
        let r = solve(&m, &v, &PmjSet::new(vec![Pmj::new(Vec3::new(5.0, 0.0, 0.0), 0.0)]), strict());
        assert!(matches!(r, Err(Error::NoPmjInside)));
    }

    #[test]
    fn isotropic_point_source_is_close_to_distance() {
        let m = cube(12, 1.0);
        let v = VelocityField::uniform(&m, Speeds::isotropic(1.0)).unwrap();
        let cfg = EikonalConfig {
            seed_radius: 6.0,
            ..strict()
        };
        let map = solve(&m, &v, &PmjSet::new(vec![Pmj::new(Vec3::zeros(), 0.0)]), cfg).unwrap();
        assert!(map.converged);
        let mut worst = 0.0f64;
        for (i, p) in m.vertices().iter().enumerate() {
            let d = p.norm();
            assert!(map.tau[i] >= d - 1e-9, "solver below analytic distance");
            if d > 0.0 {
                worst = worst.max((map.tau[i] - d) / d);
            }
        }
        assert!(worst < 0.02, "max relative error {worst}");
    }

    #[test]
    fn raw_seeding_overestimates_near_the_source() {
        // Linear interpolation of a convex distance field only ever overshoots.
        let m = cube(6, 1.0);
        let v = VelocityField::uniform(&m, Speeds::myocardium()).unwrap();
        let map = solve(&m, &v, &PmjSet::new(vec![Pmj::new(Vec3::zeros(), 0.0)]), strict()).unwrap();
        let inv = v.metric(0);
        for (i, p) in m.vertices().iter().enumerate() {
            assert!(map.tau[i] >= metric_norm(inv, p) - 1e-9);
        }
    }

    #[test]
    fn compatibility_violation_deactivates_pmj() {
        let m = cube(6, 1.0);
        let v = VelocityField::uniform(&m, Speeds::isotropic(1.0)).unwrap();
        let x1 = Vec3::zeros();
        let x2 = Vec3::new(4.0, 0.0, 0.0);
        // Straight axis edges make the discrete travel time exact: 4 ms.
        let pmjs = PmjSet::new(vec![Pmj::new(x1, 0.0), Pmj::new(x2, 4.5)]);
        let map = solve(&m, &v, &pmjs, strict()).unwrap();
        let v2 = m.vertices().iter().position(|p| (p - x2).norm() < 1e-12).unwrap();
        assert_eq!(map.activator[v2], Some(0));
        assert!(map.active[0]);
        assert!(!map.active[1]);
        assert!((map.tau[v2] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn shifting_timings_shifts_tau() {
        let m = cube(5, 1.0);
        let v = VelocityField::uniform(&m, Speeds::myocardium()).unwrap();
        let base = PmjSet::new(vec![
            Pmj::new(Vec3::new(0.3, 0.4, 0.2), 1.0),
            Pmj::new(Vec3::new(4.1, 3.3, 2.2), 4.0),
        ]);
        let mut shifted = base.clone();
        for p in &mut shifted.pmjs {
            p.time += 7.25;
        }
        let a = solve(&m, &v, &base, strict()).unwrap();
        let b = solve(&m, &v, &shifted, strict()).unwrap();
        for (x, y) in a.tau.iter().zip(&b.tau) {
            assert!((y - x - 7.25).abs() < 1e-9);
        }
    }

    #[test]
    fn tau_is_monotone_under_added_pmjs() {
        let m = cube(5, 1.0);
        let v = VelocityField::uniform(&m, Speeds::myocardium()).unwrap();
        let one = PmjSet::new(vec![Pmj::new(Vec3::new(0.3, 0.4, 0.2), 1.0)]);
        let mut two = one.clone();
        two.pmjs.push(Pmj::new(Vec3::new(4.1, 3.3, 2.2), 2.0));
        two.active.push(true);
        let a = solve(&m, &v, &one, strict()).unwrap();
        let b = solve(&m, &v, &two, strict()).unwrap();
        for (x, y) in a.tau.iter().zip(&b.tau) {
            assert!(y <= x);
        }
    }

    #[test]
    fn worker_count_does_not_change_result() {
        let m = cube(7, 1.0);
        let v = VelocityField::uniform(&m, Speeds::myocardium()).unwrap();
        let pmjs = PmjSet::new(vec![
            Pmj::new(Vec3::new(0.3, 0.4, 0.2), 1.0),
            Pmj::new(Vec3::new(6.1, 3.3, 2.2), 3.0),
        ]);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| solve(&m, &v, &pmjs, EikonalConfig::default()).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.tau, b.tau);
        assert_eq!(a.activator, b.activator);
    }

    #[test]
    fn recorded_weights_minimize_on_final_times() {
        let m = cube(8, 1.0);
        let v = VelocityField::uniform(&m, Speeds::myocardium()).unwrap();
        let pmjs = PmjSet::new(vec![
            Pmj::new(Vec3::new(0.3, 0.4, 0.2), 1.0),
            Pmj::new(Vec3::new(7.1, 3.3, 2.2), 2.5),
            Pmj::new(Vec3::new(3.7, 6.6, 5.1), 0.5),
        ]);
        let a = solve(&m, &v, &pmjs, strict()).unwrap();
        for (i, p) in a.tape().provenance().iter().enumerate() {
            if let Provenance::Face { tet, upstream, weights } = *p {
                let ft = upstream.map(|u| a.tau[u as usize]);
                let pts = upstream.map(|u| m.vertex(u as usize));
                let q = local::face_gram(m.vertex(i), pts, v.metric(tet as usize));
                let best = local::minimize_on_support(&q, &ft, &[true; 3]).unwrap();
                let here = local::face_objective(&q, &ft, &weights);
                assert!((here - a.tau[i]).abs() < 1e-12);
                let support = weights.map(|w| w > 0.0);
                let own = local::minimize_on_support(&q, &ft, &support).unwrap();
                assert!((local::face_objective(&q, &ft, &own) - here).abs() < 1e-12, "vertex {i}");
                assert!(local::face_objective(&q, &ft, &best) <= here + 1e-12);
            }
        }
    }
}
