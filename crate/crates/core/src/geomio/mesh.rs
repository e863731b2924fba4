use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;

/// Triangle mesh with optional per-vertex attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub colors: Option<Vec<Vec3>>,
    pub normals: Option<Vec<Vec3>>,
}

/// A point drawn on a mesh surface.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub position: Vec3,
    pub face: usize,
    pub bary: [f64; 3],
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Self {
        Mesh {
            vertices,
            faces,
            colors: None,
            normals: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v as usize >= n) {
                return Err(Error::invalid(format!("face {i} references vertex out of range")));
            }
        }
        if let Some(c) = &self.colors {
            if c.len() != n {
                return Err(Error::invalid("color count does not match vertex count"));
            }
        }
        if let Some(nr) = &self.normals {
            if nr.len() != n {
                return Err(Error::invalid("normal count does not match vertex count"));
            }
        }
        Ok(())
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Area-weighted vertex normals.
    pub fn compute_vertex_normals(&self) -> Vec<Vec3> {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for (f, tri) in self.faces.iter().enumerate() {
            let [a, b, c] = self.triangle(f);
            let n = (b - a).cross(&(c - a));
            for &v in tri {
                acc[v as usize] += n;
            }
        }
        acc.into_iter()
            .map(|n| {
                let l = n.norm();
                if l > 0.0 {
                    n / l
                } else {
                    Vec3::new(0.0, 0.0, 1.0)
                }
            })
            .collect()
    }

    pub fn with_vertex_normals(mut self) -> Self {
        self.normals = Some(self.compute_vertex_normals());
        self
    }

    pub fn bbox(&self) -> (Vec3, Vec3) {
        bbox_of(&self.vertices)
    }

    /// Number of edges used by exactly one face.
    pub fn boundary_edge_count(&self) -> usize {
        let mut counts = std::collections::HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0usize) += 1;
            }
        }
        counts.values().filter(|&&c| c == 1).count()
    }

    pub fn is_watertight(&self) -> bool {
        !self.faces.is_empty() && self.boundary_edge_count() == 0
    }

    /// V - E + F over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges = std::collections::HashSet::new();
        let mut verts = std::collections::HashSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
                verts.insert(a);
            }
        }
        verts.len() as i64 - edges.len() as i64 + self.faces.len() as i64
    }

    /// Drops zero-area faces and unreferenced vertices.
    pub fn remove_degenerate_faces(&mut self) {
        let keep: Vec<[u32; 3]> = (0..self.faces.len())
            .filter(|&f| {
                let [a, b, c] = self.faces[f];
                a != b && b != c && a != c && self.face_area(f) > 0.0
            })
            .map(|f| self.faces[f])
            .collect();
        self.faces = keep;
        self.compact();
    }

    fn compact(&mut self) {
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut next = 0u32;
        for f in &self.faces {
            for &v in f {
                if remap[v as usize] == u32::MAX {
                    remap[v as usize] = next;
                    next += 1;
                }
            }
        }
        let mut order = vec![0usize; next as usize];
        for (old, &new) in remap.iter().enumerate() {
            if new != u32::MAX {
                order[new as usize] = old;
            }
        }
        let pick = |src: &Vec<Vec3>| order.iter().map(|&o| src[o]).collect::<Vec<_>>();
        self.colors = self.colors.as_ref().map(pick);
        self.normals = self.normals.as_ref().map(pick);
        self.vertices = pick(&self.vertices);
        for f in &mut self.faces {
            for v in f.iter_mut() {
                *v = remap[*v as usize];
            }
        }
    }

    pub fn interpolate(&self, values: &[Vec3], face: usize, bary: [f64; 3]) -> Vec3 {
        let [a, b, c] = self.faces[face];
        values[a as usize] * bary[0] + values[b as usize] * bary[1] + values[c as usize] * bary[2]
    }

    /// Area-uniform surface samples.
    pub fn sample_surface<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<SurfacePoint> {
        if self.faces.is_empty() || n == 0 {
            return Vec::new();
        }
        let mut cdf = Vec::with_capacity(self.faces.len());
        let mut total = 0.0;
        for f in 0..self.faces.len() {
            total += self.face_area(f);
            cdf.push(total);
        }
        (0..n)
            .map(|_| {
                let r = rng.gen::<f64>() * total;
                let face = cdf.partition_point(|&c| c <= r).min(self.faces.len() - 1);
                let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                let bary = [1.0 - u - v, u, v];
                let [a, b, c] = self.triangle(face);
                SurfacePoint {
                    position: a * bary[0] + b * bary[1] + c * bary[2],
                    face,
                    bary,
                }
            })
            .collect()
    }
}

pub fn bbox_of(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// Closest point on triangle `abc` to `p`, with barycentric coordinates.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> (Vec3, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, [1.0, 0.0, 0.0]);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, [1.0 - v, v, 0.0]);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, [0.0, 1.0 - w, w]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

/// Axis-aligned unit cube centered at the origin, outward-facing triangles.
pub fn unit_cube() -> Mesh {
    let v = (0..8)
        .map(|i| Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
        .map(|p| p - Vec3::repeat(0.5))
        .collect();
    let faces = vec![
        [0, 2, 1], [1, 2, 3], [4, 5, 6], [5, 7, 6],
        [0, 1, 4], [1, 5, 4], [2, 6, 3], [3, 6, 7],
        [0, 4, 2], [2, 4, 6], [1, 3, 5], [3, 7, 5],
    ];
    Mesh::new(v, faces)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_is_closed_with_euler_two() {
        let m = unit_cube();
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
        assert!((m.surface_area() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn closest_point_regions() {
        let a = Vec3::new(0.0, 0.0, 0.0);
        let b = Vec3::new(1.0, 0.0, 0.0);
        let c = Vec3::new(0.0, 1.0, 0.0);
        let (q, w) = closest_point_on_triangle(&Vec3::new(0.25, 0.25, 1.0), &a, &b, &c);
        assert!((q - Vec3::new(0.25, 0.25, 0.0)).norm() < 1e-12);
        assert!((w[0] - 0.5).abs() < 1e-12);
        let (q, _) = closest_point_on_triangle(&Vec3::new(-1.0, -1.0, 0.0), &a, &b, &c);
        assert_eq!(q, a);
        let (q, w) = closest_point_on_triangle(&Vec3::new(0.5, -1.0, 0.0), &a, &b, &c);
        assert!((q - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-12);
        assert!((w[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_faces_are_removed() {
        let mut m = unit_cube();
        m.vertices.push(Vec3::new(3.0, 3.0, 3.0));
        m.faces.push([8, 8, 0]);
        m.remove_degenerate_faces();
        assert_eq!(m.faces.len(), 12);
        assert_eq!(m.vertices.len(), 8);
    }
}
