//! P1 finite elements on the torso: pseudo-bidomain potentials and lead fields.
//!
//! Both problems share the bulk operator `K` (stiffness of `G = G_i + G_e` in
//! the ventricle and of the isotropic tissue conductivities elsewhere), with
//! homogeneous Neumann conditions on the torso surface. `K` has the constants
//! as null space; solutions are normalized by `int_{torso_skin} phi = 0`.
//!
//! With `A_i` the stiffness of `G_i` on the ventricle, the potential is
//! `K phi = -A_i V_m` and a lead field is `K Z = P^T w` for point loads `w` at
//! the electrodes. Symmetry of `K` gives the reciprocity identity
//! `sum_e w_e phi(x_e) = -Z^T A_i V_m`, which is what the lead vectors
//! `B = -scale A_i Z` encode.

pub mod cg;
pub mod sparse;

use crate::error::{Error, Result};
use crate::geometry::{p1_gradients, Mat3};
use crate::leads::LeadSet;
use crate::mesh::{region, FiberFrame, TetMesh};

pub use cg::{pcg, CgConfig, CgStats};
pub use sparse::Csr;

/// Tissue conductivities (S/m).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConductivityTable {
    pub intra_fiber: f64,
    pub intra_sheet: f64,
    pub intra_normal: f64,
    pub extra_fiber: f64,
    pub extra_sheet: f64,
    pub extra_normal: f64,
    pub torso: f64,
    pub blood: f64,
    pub lung: f64,
}

impl Default for ConductivityTable {
    fn default() -> Self {
        ConductivityTable {
            intra_fiber: 0.34,
            intra_sheet: 0.06,
            intra_normal: 0.06,
            extra_fiber: 0.12,
            extra_sheet: 0.08,
            extra_normal: 0.08,
            torso: 0.22,
            blood: 0.7,
            lung: 0.0389,
        }
    }
}

fn frame_tensor(frame: &FiberFrame, g: [f64; 3]) -> Mat3 {
    let outer = |v: &crate::geometry::Vec3| v * v.transpose();
    outer(&frame.fiber) * g[0] + outer(&frame.sheet) * g[1] + outer(&frame.normal()) * g[2]
}

impl ConductivityTable {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.intra_fiber,
            self.intra_sheet,
            self.intra_normal,
            self.extra_fiber,
            self.extra_sheet,
            self.extra_normal,
            self.torso,
            self.blood,
            self.lung,
        ];
        if all.iter().all(|g| *g > 0.0 && g.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput("conductivities must be positive".into()))
        }
    }

    pub fn intracellular(&self, frame: &FiberFrame) -> Mat3 {
        frame_tensor(frame, [self.intra_fiber, self.intra_sheet, self.intra_normal])
    }

    pub fn extracellular(&self, frame: &FiberFrame) -> Mat3 {
        frame_tensor(frame, [self.extra_fiber, self.extra_sheet, self.extra_normal])
    }

    /// Bulk tensor of a tet: `G_i + G_e` in the ventricle, isotropic elsewhere.
    pub fn bulk(&self, label: i32, frame: &FiberFrame) -> Result<Mat3> {
        let iso = |g: f64| Ok(Mat3::identity() * g);
        match label {
            region::VENTRICLE => Ok(self.intracellular(frame) + self.extracellular(frame)),
            region::TORSO => iso(self.torso),
            region::BLOOD => iso(self.blood),
            region::LUNG => iso(self.lung),
            other => Err(Error::InvalidInput(format!("no conductivity for region label {other}"))),
        }
    }
}

fn pattern(mesh: &TetMesh, rows: &[bool]) -> Vec<Vec<usize>> {
    let mut pat: Vec<Vec<usize>> = vec![Vec::new(); mesh.num_vertices()];
    for (i, row) in pat.iter_mut().enumerate() {
        if !rows[i] {
            continue;
        }
        for &k in mesh.vertex_tets(i) {
            row.extend_from_slice(&mesh.tets()[k]);
        }
        row.sort_unstable();
        row.dedup();
    }
    pat
}

/// Stiffness matrix `int G grad(psi_a) . grad(psi_b)` over the tets for which
/// `tensor` returns a value. Accumulated in tet order, so the result is
/// reproducible bit for bit.
pub fn assemble_stiffness(mesh: &TetMesh, tensor: impl Fn(usize) -> Result<Option<Mat3>>) -> Result<Csr> {
    let mut tensors = Vec::with_capacity(mesh.num_tets());
    let mut rows = vec![false; mesh.num_vertices()];
    for k in 0..mesh.num_tets() {
        let g = tensor(k)?;
        if g.is_some() {
            for &i in &mesh.tets()[k] {
                rows[i] = true;
            }
        }
        tensors.push(g);
    }
    let mut a = Csr::from_pattern(pattern(mesh, &rows));
    for (k, g) in tensors.iter().enumerate() {
        let Some(g) = g else { continue };
        let t = mesh.tets()[k];
        let (grads, vol) = p1_gradients(mesh.tet_points(k))?;
        let gg = grads.map(|d| g * d);
        for a_ in 0..4 {
            for b_ in 0..4 {
                a.add(t[a_], t[b_], vol * grads[a_].dot(&gg[b_]));
            }
        }
    }
    Ok(a)
}

fn check_connected(mesh: &TetMesh) -> Result<()> {
    let n = mesh.num_vertices();
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(v) = stack.pop() {
        for &k in mesh.vertex_tets(v) {
            for &u in &mesh.tets()[k] {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    stack.push(u);
                }
            }
        }
    }
    if count == n {
        Ok(())
    } else {
        Err(Error::Singular(format!(
            "mesh is disconnected: {count} of {n} vertices reachable from vertex 0"
        )))
    }
}

/// Torso potential with its solver statistics.
#[derive(Debug, Clone)]
pub struct Potential {
    pub phi: Vec<f64>,
    pub stats: CgStats,
}

/// Assembled torso operators for one mesh and conductivity table.
#[derive(Debug, Clone)]
pub struct TorsoModel {
    k: Csr,
    a_i: Csr,
    heart: Vec<usize>,
    skin_vertices: Vec<usize>,
    skin_weights: Vec<f64>,
    skin_area: f64,
    cg: CgConfig,
}

impl TorsoModel {
    /// `heart` lists the global vertex ids of the heart submesh in its local order.
    pub fn new(
        mesh: &TetMesh,
        heart: &[usize],
        conductivities: &ConductivityTable,
        skin: &str,
        cg: CgConfig,
    ) -> Result<Self> {
        conductivities.validate()?;
        check_connected(mesh)?;
        let k = assemble_stiffness(mesh, |t| {
            conductivities
                .bulk(mesh.labels()[t], &mesh.fibers()[t])
                .map(Some)
        })?;
        let a_i = assemble_stiffness(mesh, |t| {
            Ok((mesh.labels()[t] == region::VENTRICLE)
                .then(|| conductivities.intracellular(&mesh.fibers()[t])))
        })?;
        let mut weights = vec![0.0; mesh.num_vertices()];
        for tri in mesh.surface(skin)? {
            let area = crate::geometry::triangle_area(
                mesh.vertex(tri[0]),
                mesh.vertex(tri[1]),
                mesh.vertex(tri[2]),
            );
            for &i in tri {
                weights[i] += area / 3.0;
            }
        }
        let skin_vertices = mesh.surface_vertices(skin)?;
        let skin_weights: Vec<f64> = skin_vertices.iter().map(|&i| weights[i]).collect();
        let skin_area = skin_weights.iter().sum();
        if !(skin_area > 0.0) {
            return Err(Error::EmptySurface(skin.into()));
        }
        if heart.iter().any(|&i| i >= mesh.num_vertices()) {
            return Err(Error::Mismatch("heart vertex id outside the torso mesh".into()));
        }
        Ok(TorsoModel {
            k,
            a_i,
            heart: heart.to_vec(),
            skin_vertices,
            skin_weights,
            skin_area,
            cg,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.k.n()
    }

    pub fn heart_vertices(&self) -> &[usize] {
        &self.heart
    }

    pub fn skin_vertices(&self) -> &[usize] {
        &self.skin_vertices
    }

    /// Lumped area of each skin vertex, aligned with [`Self::skin_vertices`].
    pub fn skin_weights(&self) -> &[f64] {
        &self.skin_weights
    }

    pub fn skin_area(&self) -> f64 {
        self.skin_area
    }

    pub fn stiffness(&self) -> &Csr {
        &self.k
    }

    pub fn intracellular_stiffness(&self) -> &Csr {
        &self.a_i
    }

    pub fn cg_config(&self) -> &CgConfig {
        &self.cg
    }

    /// `int_{skin} phi`.
    pub fn skin_integral(&self, phi: &[f64]) -> f64 {
        self.skin_vertices
            .iter()
            .zip(&self.skin_weights)
            .map(|(&i, w)| w * phi[i])
            .sum()
    }

    fn normalize(&self, phi: &mut [f64]) {
        let shift = self.skin_integral(phi) / self.skin_area;
        for x in phi.iter_mut() {
            *x -= shift;
        }
    }

    fn solve(&self, rhs: &[f64], warm: Option<&[f64]>) -> Result<Potential> {
        let mut phi = warm.map_or_else(|| vec![0.0; rhs.len()], <[f64]>::to_vec);
        let stats = pcg(&self.k, rhs, &mut phi, true, &self.cg)?;
        self.normalize(&mut phi);
        Ok(Potential { phi, stats })
    }

    /// Extends heart-vertex values to the full mesh (zero elsewhere).
    pub fn scatter_heart(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.heart.len() {
            return Err(Error::Mismatch(format!(
                "{} values for {} heart vertices",
                values.len(),
                self.heart.len()
            )));
        }
        let mut full = vec![0.0; self.num_vertices()];
        for (&g, &v) in self.heart.iter().zip(values) {
            full[g] = v;
        }
        Ok(full)
    }

    /// Torso potential for a transmembrane voltage given on the heart vertices.
    pub fn solve_pseudo_bidomain(&self, vm: &[f64], warm: Option<&[f64]>) -> Result<Potential> {
        let full = self.scatter_heart(vm)?;
        let mut rhs = self.a_i.mul(&full);
        for x in &mut rhs {
            *x = -*x;
        }
        self.solve(&rhs, warm)
    }

    /// Lead field for point loads `weights` at mesh vertices `electrodes`.
    pub fn solve_lead_field(&self, electrodes: &[usize], weights: &[f64]) -> Result<Potential> {
        if electrodes.len() != weights.len() {
            return Err(Error::Mismatch("one weight per electrode required".into()));
        }
        let sum: f64 = weights.iter().sum();
        let scale: f64 = weights.iter().map(|w| w.abs()).sum::<f64>().max(1.0);
        if sum.abs() > 1e-12 * scale {
            return Err(Error::InvalidInput(format!(
                "lead weights must sum to zero (sum = {sum:.3e})"
            )));
        }
        let mut rhs = vec![0.0; self.num_vertices()];
        for (&e, &w) in electrodes.iter().zip(weights) {
            if e >= rhs.len() {
                return Err(Error::Mismatch(format!("electrode vertex {e} outside the mesh")));
            }
            rhs[e] += w;
        }
        self.solve(&rhs, None)
    }

    /// Lead vector on the heart vertices: `B = -scale A_i Z`.
    pub fn lead_vector(&self, z: &[f64], scale: f64) -> Vec<f64> {
        let az = self.a_i.mul(z);
        self.heart.iter().map(|&g| -scale * az[g]).collect()
    }

    /// Solves one lead field per electrode (referenced to the last one) and
    /// combines them into the lead vectors of `leads`, filling `leads.b`.
    pub fn precompute_lead_vectors(&self, leads: &mut LeadSet) -> Result<()> {
        let ne = leads.electrode_vertices.len();
        if ne < 2 {
            return Err(Error::InvalidInput("a lead set needs at least two electrodes".into()));
        }
        let reference = leads.electrode_vertices[ne - 1];
        let basis: Vec<Vec<f64>> = (0..ne - 1)
            .map(|e| {
                let z = self.solve_lead_field(&[leads.electrode_vertices[e], reference], &[1.0, -1.0])?;
                Ok(self.lead_vector(&z.phi, leads.scale))
            })
            .collect::<Result<_>>()?;
        let nh = self.heart.len();
        leads.b = leads
            .weights
            .iter()
            .map(|w| {
                let mut b = vec![0.0; nh];
                for (e, be) in basis.iter().enumerate() {
                    if w[e] != 0.0 {
                        for (x, y) in b.iter_mut().zip(be) {
                            *x += w[e] * y;
                        }
                    }
                }
                b
            })
            .collect();
        Ok(())
    }

    /// `scale * sum_e w_e phi(x_e)`.
    pub fn readout(&self, phi: &[f64], electrodes: &[usize], weights: &[f64], scale: f64) -> f64 {
        scale * electrodes.iter().zip(weights).map(|(&e, w)| w * phi[e]).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::mesh::box_mesh;
    use std::collections::BTreeMap;

    /// Box whose central cells are relabelled as ventricle.
    fn slab() -> (TetMesh, Vec<usize>) {
        let b = box_mesh([6, 6, 6], 1.0, Vec3::zeros());
        let labels: Vec<i32> = (0..b.num_tets())
            .map(|k| {
                let c = b.tet_points(k).iter().fold(Vec3::zeros(), |a, p| a + **p) / 4.0;
                if (c - Vec3::new(3.0, 3.0, 3.0)).amax() < 1.5 {
                    region::VENTRICLE
                } else {
                    region::TORSO
                }
            })
            .collect();
        let mut surfaces = BTreeMap::new();
        surfaces.insert("skin".to_string(), b.boundary().to_vec());
        let fibers = vec![FiberFrame::identity(); b.num_tets()];
        let m = TetMesh::new(b.vertices().to_vec(), b.tets().to_vec(), labels, fibers, surfaces).unwrap();
        let (_, heart) = m.extract_region(&[region::VENTRICLE]).unwrap();
        (m, heart)
    }

    #[test]
    fn operators_are_symmetric_and_annihilate_constants() {
        let (m, heart) = slab();
        let t = TorsoModel::new(&m, &heart, &ConductivityTable::default(), "skin", CgConfig::default()).unwrap();
        assert!(t.stiffness().asymmetry() < 1e-12);
        assert!(t.intracellular_stiffness().asymmetry() < 1e-12);
        let ones = vec![1.0; m.num_vertices()];
        assert!(t.stiffness().mul(&ones).iter().all(|x| x.abs() < 1e-12));
        assert!(t.intracellular_stiffness().mul(&ones).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn constant_vm_gives_zero_potential() {
        let (m, heart) = slab();
        let t = TorsoModel::new(&m, &heart, &ConductivityTable::default(), "skin", CgConfig::default()).unwrap();
        let p = t.solve_pseudo_bidomain(&vec![-85.0; heart.len()], None).unwrap();
        assert!(p.phi.iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn lead_field_is_linear_in_weights() {
        let (m, heart) = slab();
        let t = TorsoModel::new(&m, &heart, &ConductivityTable::default(), "skin", CgConfig::default()).unwrap();
        let e = [0usize, 6, 48];
        let z = |w: [f64; 3]| t.solve_lead_field(&e, &w).unwrap().phi;
        let zero = z([0.0; 3]);
        assert!(zero.iter().all(|&x| x == 0.0));
        let a = z([1.0, -1.0, 0.0]);
        let b = z([-1.0, 1.0, 0.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x + y).abs() < 1e-9);
        }
        // Einthoven-style superposition: (e1 - e0) + (e2 - e1) = e2 - e0.
        let i = z([-1.0, 1.0, 0.0]);
        let iii = z([0.0, -1.0, 1.0]);
        let ii = z([-1.0, 0.0, 1.0]);
        let max = ii.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        for k in 0..ii.len() {
            assert!((i[k] + iii[k] - ii[k]).abs() < 1e-8 * max);
        }
        assert!(matches!(
            t.solve_lead_field(&e, &[1.0, 0.0, 0.0]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn disconnected_mesh_is_singular() {
        let a = box_mesh([1, 1, 1], 1.0, Vec3::zeros());
        let b = box_mesh([1, 1, 1], 1.0, Vec3::new(5.0, 0.0, 0.0));
        let mut v = a.vertices().to_vec();
        let off = v.len();
        v.extend_from_slice(b.vertices());
        let mut tets = a.tets().to_vec();
        tets.extend(b.tets().iter().map(|t| t.map(|i| i + off)));
        let n = tets.len();
        let mut s = BTreeMap::new();
        s.insert("skin".to_string(), a.boundary().to_vec());
        let m = TetMesh::new(v, tets, vec![region::TORSO; n], vec![FiberFrame::identity(); n], s).unwrap();
        let r = TorsoModel::new(&m, &[], &ConductivityTable::default(), "skin", CgConfig::default());
        assert!(matches!(r, Err(Error::Singular(_))));
    }
}
