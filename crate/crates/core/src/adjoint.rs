//! Backpropagation of arrival-time cotangents to PMJ timings and positions.
//!
//! Every reached vertex records the candidate that won its last Hopf-Lax
//! update: either a PMJ seed, or a point on a face given by barycentric
//! weights on three upstream vertices. Holding those weights fixed (the
//! envelope theorem applied to the local minimization), the map from PMJ
//! parameters to arrival times is a composition of
//!
//! ```text
//! tau_v = t_j + delta_K(x_j, x_v)                          (seed)
//! tau_v = sum_k w_k tau_{u_k} + delta_K(x_v, sum_k w_k x_{u_k})  (face)
//! ```
//!
//! evaluated in increasing arrival time, and its reverse-mode derivative is a
//! single pass over the vertices in the opposite order.

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::eikonal::PmjSet;
use crate::mesh::TetMesh;
use crate::velocity::{metric_norm, VelocityField};

/// How a vertex obtained its arrival time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Provenance {
    Unreached,
    Seed {
        pmj: u32,
    },
    Face {
        tet: u32,
        upstream: [u32; 3],
        weights: [f64; 3],
    },
}

/// Tet containing a seeded PMJ and its barycentric coordinates there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedSite {
    pub tet: usize,
    pub bary: [f64; 4],
}

impl SeedSite {
    /// A PMJ on a face, edge or vertex of its tet only has one-sided position gradients.
    pub fn on_boundary(&self) -> bool {
        self.bary.iter().any(|&b| b <= 1e-9)
    }
}

/// Provenance structure recorded by a converged forward solve.
#[derive(Debug, Clone)]
pub struct AdjointTape {
    order: Vec<u32>,
    provenance: Vec<Provenance>,
    seeds: Vec<Option<SeedSite>>,
    fingerprint: u64,
    num_vertices: usize,
}

/// Gradients of a scalar with respect to each PMJ.
#[derive(Debug, Clone, PartialEq)]
pub struct PmjGradient {
    pub timings: Vec<f64>,
    pub positions: Vec<Vec3>,
    /// PMJs whose position gradient is one-sided (on a tet face, edge or vertex).
    pub one_sided: Vec<bool>,
}

/// Volume activated by each PMJ.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionOfInfluence {
    pub volumes: Vec<f64>,
    pub active: Vec<bool>,
}

impl RegionOfInfluence {
    pub fn active_fraction(&self) -> f64 {
        if self.volumes.is_empty() {
            return 0.0;
        }
        self.active.iter().filter(|&&a| a).count() as f64 / self.volumes.len() as f64
    }

    /// Smallest number of PMJs whose combined volume reaches `share` of the total.
    pub fn count_covering(&self, share: f64) -> usize {
        let total: f64 = self.volumes.iter().sum();
        let mut v = self.volumes.clone();
        v.sort_by(|a, b| b.total_cmp(a));
        let mut acc = 0.0;
        for (i, x) in v.iter().enumerate() {
            acc += x;
            if acc >= share * total {
                return i + 1;
            }
        }
        v.len()
    }
}

impl AdjointTape {
    pub(crate) fn new(
        order: Vec<u32>,
        provenance: Vec<Provenance>,
        seeds: Vec<Option<SeedSite>>,
        fingerprint: u64,
        num_vertices: usize,
    ) -> Self {
        AdjointTape {
            order,
            provenance,
            seeds,
            fingerprint,
            num_vertices,
        }
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    /// Reached vertices in increasing arrival time.
    pub fn order(&self) -> &[u32] {
        &self.order
    }

    pub fn seed_site(&self, pmj: usize) -> Option<&SeedSite> {
        self.seeds.get(pmj).and_then(Option::as_ref)
    }

    pub fn num_pmjs(&self) -> usize {
        self.seeds.len()
    }

    fn check(&self, mesh: &TetMesh, pmjs: &PmjSet) -> Result<()> {
        if pmjs.fingerprint() != self.fingerprint
            || pmjs.len() != self.seeds.len()
            || mesh.num_vertices() != self.num_vertices
        {
            return Err(Error::StaleTape);
        }
        Ok(())
    }

    /// Re-evaluates arrival times from the recorded provenance.
    pub(crate) fn replay(
        &self,
        mesh: &TetMesh,
        velocity: &VelocityField,
        pmjs: &PmjSet,
    ) -> (Vec<f64>, Vec<Option<usize>>) {
        let mut tau = vec![f64::INFINITY; self.num_vertices];
        let mut activator = vec![None; self.num_vertices];
        for &v in &self.order {
            let v = v as usize;
            match self.provenance[v] {
                Provenance::Unreached => {}
                Provenance::Seed { pmj } => {
                    let j = pmj as usize;
                    let site = self.seeds[j].expect("seeded PMJ has a site");
                    let p = &pmjs.pmjs[j];
                    tau[v] = p.time + velocity.travel_time(site.tet, &p.position, mesh.vertex(v));
                    activator[v] = Some(j);
                }
                Provenance::Face {
                    tet,
                    upstream,
                    weights,
                } => {
                    let mut t = 0.0;
                    let mut y = Vec3::zeros();
                    let mut dominant = (f64::NEG_INFINITY, None);
                    for k in 0..3 {
                        let w = weights[k];
                        if w > 0.0 {
                            let u = upstream[k] as usize;
                            t += w * tau[u];
                            y += mesh.vertex(u) * w;
                            if w > dominant.0 {
                                dominant = (w, activator[u]);
                            }
                        }
                    }
                    tau[v] = t + velocity.travel_time(tet as usize, mesh.vertex(v), &y);
                    activator[v] = dominant.1;
                }
            }
        }
        (tau, activator)
    }

    /// Reverse-mode pass: gradient of `sum_v cotangent[v] * tau[v]` with respect to
    /// every PMJ timing and position.
    pub fn backward(
        &self,
        mesh: &TetMesh,
        velocity: &VelocityField,
        pmjs: &PmjSet,
        cotangent: &[f64],
    ) -> Result<PmjGradient> {
        self.check(mesh, pmjs)?;
        if cotangent.len() != self.num_vertices {
            return Err(Error::Mismatch(format!(
                "cotangent has {} entries, mesh has {} vertices",
                cotangent.len(),
                self.num_vertices
            )));
        }
        let n = pmjs.len();
        let mut adj = cotangent.to_vec();
        let mut timings = vec![0.0; n];
        let mut positions = vec![Vec3::zeros(); n];
        for &v in self.order.iter().rev() {
            let v = v as usize;
            let a = adj[v];
            if a == 0.0 {
                continue;
            }
            match self.provenance[v] {
                Provenance::Unreached => {}
                Provenance::Seed { pmj } => {
                    let j = pmj as usize;
                    timings[j] += a;
                    let site = self.seeds[j].expect("seeded PMJ has a site");
                    let d = mesh.vertex(v) - pmjs.pmjs[j].position;
                    let metric = velocity.metric(site.tet);
                    let dist = metric_norm(metric, &d);
                    if dist > 0.0 {
                        positions[j] -= (metric * d) * (a / dist);
                    }
                }
                Provenance::Face {
                    upstream, weights, ..
                } => {
                    for k in 0..3 {
                        if weights[k] > 0.0 {
                            adj[upstream[k] as usize] += a * weights[k];
                        }
                    }
                }
            }
        }
        let one_sided = (0..n)
            .map(|j| self.seeds[j].map_or(false, |s| s.on_boundary()))
            .collect();
        Ok(PmjGradient {
            timings,
            positions,
            one_sided,
        })
    }
}

pub fn grad_tau_wrt_timings(
    tape: &AdjointTape,
    mesh: &TetMesh,
    velocity: &VelocityField,
    pmjs: &PmjSet,
    cotangent: &[f64],
) -> Result<Vec<f64>> {
    Ok(tape.backward(mesh, velocity, pmjs, cotangent)?.timings)
}

pub fn grad_tau_wrt_positions(
    tape: &AdjointTape,
    mesh: &TetMesh,
    velocity: &VelocityField,
    pmjs: &PmjSet,
    cotangent: &[f64],
) -> Result<(Vec<Vec3>, Vec<bool>)> {
    let g = tape.backward(mesh, velocity, pmjs, cotangent)?;
    Ok((g.positions, g.one_sided))
}

/// Volume activated by each PMJ: the timing gradient of `int tau dx` with
/// lumped vertex volumes.
pub fn region_of_influence(
    tape: &AdjointTape,
    mesh: &TetMesh,
    velocity: &VelocityField,
    pmjs: &PmjSet,
) -> Result<RegionOfInfluence> {
    let lumped = mesh.lumped_vertex_volumes();
    let volumes = grad_tau_wrt_timings(tape, mesh, velocity, pmjs, &lumped)?;
    let active = volumes.iter().map(|&v| v > 0.0).collect();
    Ok(RegionOfInfluence { volumes, active })
}
