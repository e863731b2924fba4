//! Inside/outside classification for closed (or nearly closed) meshes.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::par;

use super::mesh::Mesh;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum InsideTest {
    /// Generalized winding number; `w >= 0.5` counts as inside.
    #[default]
    WindingNumber,
    /// Ray-crossing parity. Requires a watertight mesh.
    RayParity,
}

/// Signed solid angle of triangle `abc` seen from `p`, divided by 4π.
pub fn winding_number(mesh: &Mesh, p: &Vec3) -> f64 {
    let mut total = 0.0;
    for f in &mesh.faces {
        let a = mesh.vertices[f[0] as usize] - p;
        let b = mesh.vertices[f[1] as usize] - p;
        let c = mesh.vertices[f[2] as usize] - p;
        let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
        let num = a.dot(&b.cross(&c));
        let den = la * lb * lc + a.dot(&b) * lc + b.dot(&c) * la + c.dot(&a) * lb;
        total += 2.0 * num.atan2(den);
    }
    total / (4.0 * PI)
}

const RAY_DIR: [f64; 3] = [0.5773502691896258, 0.5773502691896257, 0.577350269189626];

fn ray_parity_inside(mesh: &Mesh, p: &Vec3) -> bool {
    // skewed direction so that grid-aligned inputs rarely graze edges
    let d = Vec3::new(RAY_DIR[0] + 0.0123, RAY_DIR[1] - 0.0071, RAY_DIR[2]).normalize();
    let mut hits = 0usize;
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.triangle(f);
        if ray_hits_triangle(p, &d, &a, &b, &c).is_some() {
            hits += 1;
        }
    }
    hits % 2 == 1
}

/// Möller–Trumbore intersection; returns the ray parameter of the hit.
pub fn ray_hits_triangle(o: &Vec3, d: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let pv = d.cross(&e2);
    let det = e1.dot(&pv);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let tv = o - a;
    let u = tv.dot(&pv) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qv = tv.cross(&e1);
    let v = d.dot(&qv) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&qv) * inv;
    (t > 0.0).then_some(t)
}

/// Labels each point 1 (inside) or 0 (outside).
pub fn label_occupancy(mesh: &Mesh, points: &[Vec3], mode: InsideTest) -> Result<Vec<u8>> {
    match mode {
        InsideTest::WindingNumber => Ok(par::map(points, |p| {
            u8::from(winding_number(mesh, p) >= 0.5)
        })),
        InsideTest::RayParity => {
            if !mesh.is_watertight() {
                return Err(Error::contract(
                    "ray-parity labeling requires a watertight mesh",
                ));
            }
            Ok(par::map(points, |p| u8::from(ray_parity_inside(mesh, p))))
        }
    }
}

/// Inside labels of all cell centers of `grid` (x-fastest), by crossing parity along +z
/// columns. Requires a watertight mesh.
pub fn label_cell_centers(mesh: &Mesh, grid: &super::marching::Grid) -> Result<Vec<u8>> {
    if !mesh.is_watertight() {
        return Err(Error::contract("column labeling requires a watertight mesh"));
    }
    let h = grid.cell_size();
    let n = grid.res;
    let tris: Vec<([Vec3; 3], [f64; 4])> = (0..mesh.faces.len())
        .map(|f| {
            let t = mesh.triangle(f);
            let bb = [
                t[0].x.min(t[1].x).min(t[2].x),
                t[0].x.max(t[1].x).max(t[2].x),
                t[0].y.min(t[1].y).min(t[2].y),
                t[0].y.max(t[1].y).max(t[2].y),
            ];
            (t, bb)
        })
        .collect();
    let z0 = grid.lo.z - 1.0;
    let columns = par::map_range(n * n, |c| {
        let (i, j) = (c % n, c / n);
        // off-center so that grid-aligned edges are not hit exactly
        let x = grid.lo.x + (i as f64 + 0.5 + 1.37e-7) * h.x;
        let y = grid.lo.y + (j as f64 + 0.5 + 2.91e-7) * h.y;
        let o = Vec3::new(x, y, z0);
        let mut hits: Vec<f64> = tris
            .iter()
            .filter(|(_, bb)| x >= bb[0] && x <= bb[1] && y >= bb[2] && y <= bb[3])
            .filter_map(|(t, _)| ray_hits_triangle(&o, &Vec3::z(), &t[0], &t[1], &t[2]))
            .map(|t| z0 + t)
            .collect();
        hits.sort_by(|a, b| a.total_cmp(b));
        (0..n)
            .map(|k| {
                let z = grid.lo.z + (k as f64 + 0.5) * h.z;
                u8::from(hits.iter().take_while(|&&t| t < z).count() % 2 == 1)
            })
            .collect::<Vec<u8>>()
    });
    let mut out = vec![0u8; n * n * n];
    for (c, col) in columns.into_iter().enumerate() {
        let (i, j) = (c % n, c / n);
        for (k, v) in col.into_iter().enumerate() {
            out[(k * n + j) * n + i] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomio::mesh::unit_cube;

    #[test]
    fn column_labels_match_winding_numbers() {
        let cube = unit_cube();
        let grid = crate::geomio::marching::Grid::cube(0.8, 9);
        let a = label_cell_centers(&cube, &grid).unwrap();
        let b = label_occupancy(&cube, &grid.cell_centers(), InsideTest::WindingNumber).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().any(|&v| v == 1));
    }

    #[test]
    fn cube_center_inside_far_point_outside() {
        let cube = unit_cube();
        let pts = [Vec3::zeros(), Vec3::new(2.0, 2.0, 2.0)];
        for mode in [InsideTest::WindingNumber, InsideTest::RayParity] {
            assert_eq!(label_occupancy(&cube, &pts, mode).unwrap(), vec![1, 0]);
        }
        assert!((winding_number(&cube, &Vec3::zeros()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn on_surface_point_uses_half_threshold() {
        let cube = unit_cube();
        // face center: solid angle is exactly half
        let p = Vec3::new(0.0, 0.0, 0.5);
        let w = winding_number(&cube, &p);
        assert!((w - 0.5).abs() < 1e-9);
        let a = label_occupancy(&cube, &[p], InsideTest::WindingNumber).unwrap();
        let b = label_occupancy(&cube, &[p], InsideTest::WindingNumber).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parity_mode_rejects_open_mesh() {
        let mut cube = unit_cube();
        cube.faces.pop();
        let err = label_occupancy(&cube, &[Vec3::zeros()], InsideTest::RayParity).unwrap_err();
        assert!(matches!(err, Error::ContractViolation(_)));
        // the winding number still works on the open mesh
        let l = label_occupancy(&cube, &[Vec3::zeros()], InsideTest::WindingNumber).unwrap();
        assert_eq!(l, vec![1]);
    }

    #[test]
    fn vertex_order_does_not_change_labels() {
        let cube = unit_cube();
        let perm = [3usize, 7, 1, 0, 5, 2, 6, 4];
        let mut inv = [0u32; 8];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new as u32;
        }
        let mut shuffled = Mesh::new(perm.iter().map(|&o| cube.vertices[o]).collect(), vec![]);
        shuffled.faces = cube
            .faces
            .iter()
            .map(|f| [inv[f[0] as usize], inv[f[1] as usize], inv[f[2] as usize]])
            .collect();
        let pts: Vec<Vec3> = (0..64)
            .map(|i| Vec3::new((i % 4) as f64 * 0.4 - 0.6, ((i / 4) % 4) as f64 * 0.4 - 0.6, (i / 16) as f64 * 0.4 - 0.6))
            .collect();
        assert_eq!(
            label_occupancy(&cube, &pts, InsideTest::WindingNumber).unwrap(),
            label_occupancy(&shuffled, &pts, InsideTest::WindingNumber).unwrap()
        );
    }
}
