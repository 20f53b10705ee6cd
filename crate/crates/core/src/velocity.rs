//! Per-element anisotropic conduction velocity tensors.

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};
use crate::mesh::{FiberFrame, TetMesh};

/// Conduction speeds along fiber, sheet and normal directions (m/s == mm/ms).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Speeds {
    pub fiber: f64,
    pub sheet: f64,
    pub normal: f64,
}

impl Speeds {
    pub const fn isotropic(v: f64) -> Self {
        Speeds {
            fiber: v,
            sheet: v,
            normal: v,
        }
    }

    /// Myocardial values used for the ground-truth model.
    pub const fn myocardium() -> Self {
        Speeds {
            fiber: 0.61,
            sheet: 0.225,
            normal: 0.225,
        }
    }

    pub fn scaled(self, factor: f64) -> Self {
        Speeds {
            fiber: self.fiber * factor,
            sheet: self.sheet * factor,
            normal: self.normal * factor,
        }
    }
}

impl Default for Speeds {
    fn default() -> Self {
        Speeds::myocardium()
    }
}

/// Piecewise-constant velocity tensor field `M = sum v_k^2 e_k (x) e_k`.
#[derive(Debug, Clone)]
pub struct VelocityField {
    tensors: Vec<Mat3>,
    metrics: Vec<Mat3>,
}

const ORTHONORMAL_TOLERANCE: f64 = 1e-10;

impl VelocityField {
    /// Uses the mesh fiber frames with the same speeds in every element.
    pub fn uniform(mesh: &TetMesh, speeds: Speeds) -> Result<Self> {
        Self::from_frames(mesh.fibers(), |_| speeds)
    }

    pub fn from_frames(frames: &[FiberFrame], speeds: impl Fn(usize) -> Speeds) -> Result<Self> {
        let mut tensors = Vec::with_capacity(frames.len());
        let mut metrics = Vec::with_capacity(frames.len());
        for (k, frame) in frames.iter().enumerate() {
            let s = speeds(k);
            if !(s.fiber > 0.0 && s.sheet > 0.0 && s.normal > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "non-positive conduction speed in tet {k}"
                )));
            }
            let (m, inv) = tensor_pair(frame, s).map_err(|deviation| Error::NonOrthonormalFrame {
                tet: k,
                deviation,
            })?;
            tensors.push(m);
            metrics.push(inv);
        }
        Ok(VelocityField { tensors, metrics })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// `M` and `M^{-1}` of element `k`.
    pub fn element_tensor(&self, k: usize) -> (Mat3, Mat3) {
        (self.tensors[k], self.metrics[k])
    }

    /// The travel-time metric `M^{-1}` of element `k`.
    pub fn metric(&self, k: usize) -> &Mat3 {
        &self.metrics[k]
    }

    /// Anisotropic travel time between two points under element `k`'s metric.
    pub fn travel_time(&self, k: usize, from: &Vec3, to: &Vec3) -> f64 {
        metric_norm(&self.metrics[k], &(to - from))
    }
}

pub fn metric_norm(metric: &Mat3, d: &Vec3) -> f64 {
    d.dot(&(metric * d)).max(0.0).sqrt()
}

fn tensor_pair(frame: &FiberFrame, s: Speeds) -> std::result::Result<(Mat3, Mat3), f64> {
    let f = frame.fiber;
    let sh = frame.sheet;
    let n = frame.normal();
    let deviation = [
        (f.norm_squared() - 1.0).abs(),
        (sh.norm_squared() - 1.0).abs(),
        f.dot(&sh).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    if deviation > ORTHONORMAL_TOLERANCE {
        return Err(deviation);
    }
    let outer = |v: &Vec3| v * v.transpose();
    let m = outer(&f) * s.fiber.powi(2) + outer(&sh) * s.sheet.powi(2) + outer(&n) * s.normal.powi(2);
    let inv = outer(&f) / s.fiber.powi(2) + outer(&sh) / s.sheet.powi(2) + outer(&n) / s.normal.powi(2);
    Ok((m, inv))
}
