//! Small rigid-motion helpers shared by the skinning code.

use nalgebra::{Matrix3, Matrix4, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;

/// Rodrigues' formula for an axis-angle vector.
pub fn axis_angle_to_matrix(r: &Vec3) -> Mat3 {
    let angle = r.norm();
    if angle < 1e-12 {
        // first-order expansion keeps the map smooth through zero
        let k = skew(r);
        return Mat3::identity() + k;
    }
    let axis = r / angle;
    let k = skew(&axis);
    Mat3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn rigid(rot: &Mat3, t: &Vec3) -> Mat4 {
    let mut m = Mat4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(rot);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

#[inline]
pub fn transform_point(m: &Mat4, p: &Vec3) -> Vec3 {
    Vec3::new(
        m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)] * p.z + m[(0, 3)],
        m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)] * p.z + m[(1, 3)],
        m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)] * p.z + m[(2, 3)],
    )
}

#[inline]
pub fn linear_part(m: &Mat4) -> Mat3 {
    m.fixed_view::<3, 3>(0, 0).into_owned()
}

/// Inverse of a rigid transform (rotation + translation).
pub fn rigid_inverse(m: &Mat4) -> Mat4 {
    let r = linear_part(m);
    let t = Vec3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
    let rt = r.transpose();
    rigid(&rt, &(-(rt * t)))
}

pub fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Wendland C2 bump: compactly supported on `r < 1`.
pub fn wendland(r: f64) -> f64 {
    if r >= 1.0 {
        0.0
    } else {
        let a = 1.0 - r;
        a * a * a * a * (4.0 * r + 1.0)
    }
}

/// Pairwise summation; result does not depend on how callers chunk work.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}
