//! Small geometric kernels on points, triangles and tetrahedra.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Barycentric coordinates >= this value count as inside a tet.
pub const INSIDE_TOLERANCE: f64 = 1e-9;

pub fn tet_signed_volume(a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3) -> f64 {
    (b - a).cross(&(c - a)).dot(&(d - a)) / 6.0
}

pub fn triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Barycentric coordinates of `p` with respect to tet `(a, b, c, d)`.
pub fn tet_barycentric(p: &Vec3, v: [&Vec3; 4]) -> Result<[f64; 4]> {
    let t = Mat3::from_columns(&[v[1] - v[0], v[2] - v[0], v[3] - v[0]]);
    let det = t.determinant();
    let scale = (v[1] - v[0]).norm() * (v[2] - v[0]).norm() * (v[3] - v[0]).norm();
    if !(det.abs() > 1e-14 * scale) {
        return Err(Error::Geometry(format!(
            "degenerate tetrahedron (det {det:.3e})"
        )));
    }
    let inv = t
        .try_inverse()
        .ok_or_else(|| Error::Geometry("singular tetrahedron".into()))?;
    let l = inv * (p - v[0]);
    Ok([1.0 - l.x - l.y - l.z, l.x, l.y, l.z])
}

/// Closest point to `p` on triangle `(a, b, c)`.
///
/// Region-based method from Ericson, "Real-Time Collision Detection", 5.1.5.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Gradients of the four P1 hat functions on a tet, and its volume.
pub fn p1_gradients(v: [&Vec3; 4]) -> Result<([Vec3; 4], f64)> {
    let t = Mat3::from_columns(&[v[1] - v[0], v[2] - v[0], v[3] - v[0]]);
    let vol = t.determinant() / 6.0;
    let inv = t
        .try_inverse()
        .ok_or_else(|| Error::Geometry("singular tetrahedron".into()))?;
    // Rows of T^{-1} are the gradients of barycentric coordinates 1..3.
    let g1 = inv.row(0).transpose();
    let g2 = inv.row(1).transpose();
    let g3 = inv.row(2).transpose();
    let g0 = -(g1 + g2 + g3);
    Ok(([g0, g1, g2, g3], vol.abs()))
}
