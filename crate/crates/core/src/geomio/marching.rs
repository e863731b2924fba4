//! Isosurface extraction of occupancy fields at the 0.5 level.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::math::Vec3;

use super::mc_table::TRI_TABLE;
use super::mesh::Mesh;

pub const OCCUPANCY_LEVEL: f64 = 0.5;

/// Cube corner offsets: bottom ring 0..3, top ring 4..7 directly above.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Regular sampling grid over an axis-aligned box; `res` cells per axis.
#[derive(Clone, Debug)]
pub struct Grid {
    pub lo: Vec3,
    pub hi: Vec3,
    pub res: usize,
}

impl Grid {
    pub fn new(lo: Vec3, hi: Vec3, res: usize) -> Self {
        Grid { lo, hi, res }
    }

    pub fn cube(half: f64, res: usize) -> Self {
        Grid::new(Vec3::repeat(-half), Vec3::repeat(half), res)
    }

    pub fn cell_size(&self) -> Vec3 {
        (self.hi - self.lo) / self.res as f64
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let h = self.cell_size();
        Vec3::new(
            self.lo.x + i as f64 * h.x,
            self.lo.y + j as f64 * h.y,
            self.lo.z + k as f64 * h.z,
        )
    }

    /// All grid nodes in x-fastest order.
    pub fn nodes(&self) -> Vec<Vec3> {
        let n = self.res + 1;
        let mut out = Vec::with_capacity(n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    out.push(self.point(i, j, k));
                }
            }
        }
        out
    }

    /// Centers of all cells, x-fastest.
    pub fn cell_centers(&self) -> Vec<Vec3> {
        let h = self.cell_size();
        let mut out = Vec::with_capacity(self.res.pow(3));
        for k in 0..self.res {
            for j in 0..self.res {
                for i in 0..self.res {
                    out.push(self.point(i, j, k) + h * 0.5);
                }
            }
        }
        out
    }
}

/// Extracts the 0.5 isosurface of `field` (inside where value > 0.5).
///
/// `field` receives batches of query points and returns one value per point.
pub fn marching_cubes<F>(field: F, grid: &Grid) -> Result<Mesh>
where
    F: Fn(&[Vec3]) -> Vec<f64>,
{
    if grid.res < 8 {
        return Err(Error::invalid(format!(
            "marching cubes resolution must be at least 8, got {}",
            grid.res
        )));
    }
    let nodes = grid.nodes();
    let values = field(&nodes);
    if values.len() != nodes.len() {
        return Err(Error::contract("field returned wrong number of values"));
    }
    Ok(polygonize(&values, grid))
}

/// Marching cubes over precomputed node values (x-fastest, `(res+1)^3`).
pub fn polygonize(values: &[f64], grid: &Grid) -> Mesh {
    let n = grid.res + 1;
    let idx = |i: usize, j: usize, k: usize| (k * n + j) * n + i;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut edge_vertex: HashMap<usize, u32> = HashMap::new();

    for k in 0..grid.res {
        for j in 0..grid.res {
            for i in 0..grid.res {
                let mut case = 0usize;
                let mut vals = [0.0; 8];
                for (c, off) in CORNERS.iter().enumerate() {
                    vals[c] = values[idx(i + off[0], j + off[1], k + off[2])];
                    if vals[c] > OCCUPANCY_LEVEL {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRI_TABLE[case];
                let mut ids = [0u32; 12];
                let mut have = [false; 12];
                for t in row.iter().take_while(|&&e| e >= 0) {
                    let e = *t as usize;
                    if have[e] {
                        continue;
                    }
                    let [ca, cb] = EDGES[e];
                    let (oa, ob) = (CORNERS[ca], CORNERS[cb]);
                    let base = [i + oa[0].min(ob[0]), j + oa[1].min(ob[1]), k + oa[2].min(ob[2])];
                    let axis = (0..3).find(|&a| oa[a] != ob[a]).unwrap();
                    let key = idx(base[0], base[1], base[2]) * 3 + axis;
                    let id = *edge_vertex.entry(key).or_insert_with(|| {
                        let pa = grid.point(i + oa[0], j + oa[1], k + oa[2]);
                        let pb = grid.point(i + ob[0], j + ob[1], k + ob[2]);
                        let (va, vb) = (vals[ca], vals[cb]);
                        let t = ((OCCUPANCY_LEVEL - va) / (vb - va)).clamp(1e-7, 1.0 - 1e-7);
                        vertices.push(pa + (pb - pa) * t);
                        (vertices.len() - 1) as u32
                    });
                    ids[e] = id;
                    have[e] = true;
                }
                for tri in row.chunks(3).take_while(|c| c[0] >= 0) {
                    // table winding is for "inside below level"; flip for occupancy
                    faces.push([ids[tri[0] as usize], ids[tri[2] as usize], ids[tri[1] as usize]]);
                }
            }
        }
    }
    let mut mesh = Mesh::new(vertices, faces);
    mesh.remove_degenerate_faces();
    mesh
}
