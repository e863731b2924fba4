//! Reconstruction metrics: symmetric Chamfer distance, F-Score and color distance.
//!
//! Mesh metrics compare area-uniform samples of one surface against the other
//! surface (point-to-triangle). Each mesh's sample set is seeded from its own
//! content hash mixed with the caller's seed, so swapping the arguments gives
//! bit-identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math::{pairwise_sum, Vec3};
use crate::par;

use super::bvh::{Bvh, PointTree};
use super::mesh::{Mesh, SurfacePoint};

pub const DEFAULT_SAMPLES: usize = 10_000;
pub const DEFAULT_TAU: f64 = 0.05;
/// Color distances are reported as mean absolute per-channel difference × 100.
pub const COLOR_SCALE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryScores {
    pub chamfer: f64,
    /// F-Score in percent.
    pub fscore: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Restricts metric samples to a neighbourhood of a point set (e.g. the face).
#[derive(Clone, Debug)]
pub struct RegionMask {
    tree: PointTree,
    radius: f64,
}

impl RegionMask {
    pub fn new(centers: &[Vec3], radius: f64) -> Self {
        RegionMask {
            tree: PointTree::build(centers),
            radius,
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.tree
            .nearest(p)
            .is_some_and(|(_, d2)| d2 <= self.radius * self.radius)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MetricOptions<'a> {
    pub tau: f64,
    pub samples: usize,
    pub seed: u64,
    pub region: Option<&'a RegionMask>,
}

impl Default for MetricOptions<'_> {
    fn default() -> Self {
        MetricOptions {
            tau: DEFAULT_TAU,
            samples: DEFAULT_SAMPLES,
            seed: 0,
            region: None,
        }
    }
}

pub fn mesh_hash(mesh: &Mesh) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in &mesh.vertices {
        for k in 0..3 {
            h.update(v[k].to_le_bytes());
        }
    }
    for f in &mesh.faces {
        for k in 0..3 {
            h.update(f[k].to_le_bytes());
        }
    }
    if let Some(c) = &mesh.colors {
        for v in c {
            for k in 0..3 {
                h.update(v[k].to_le_bytes());
            }
        }
    }
    h.finalize().into()
}

fn sample_seed(mesh: &Mesh, seed: u64) -> u64 {
    let h = mesh_hash(mesh);
    u64::from_le_bytes(h[..8].try_into().unwrap()) ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Area-uniform samples a mesh metric draws from `mesh`, restricted to `opts.region`.
pub fn metric_samples(mesh: &Mesh, opts: &MetricOptions) -> Vec<SurfacePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(mesh, opts.seed));
    let pts = mesh.sample_surface(opts.samples, &mut rng);
    match opts.region {
        Some(r) => pts.into_iter().filter(|s| r.contains(&s.position)).collect(),
        None => pts,
    }
}

fn scores_from_distances(d_ab: &[f64], d_ba: &[f64], tau: f64) -> GeometryScores {
    let mean = |d: &[f64]| {
        if d.is_empty() {
            0.0
        } else {
            pairwise_sum(d) / d.len() as f64
        }
    };
    let frac = |d: &[f64]| {
        if d.is_empty() {
            0.0
        } else {
            d.iter().filter(|&&x| x < tau).count() as f64 / d.len() as f64
        }
    };
    let precision = frac(d_ab);
    let recall = frac(d_ba);
    let fscore = if precision + recall > 0.0 {
        200.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    GeometryScores {
        chamfer: 0.5 * (mean(d_ab) + mean(d_ba)),
        fscore,
        precision: 100.0 * precision,
        recall: 100.0 * recall,
    }
}

fn non_empty(mesh: &Mesh, name: &str) -> Result<()> {
    if mesh.is_empty() {
        return Err(Error::invalid(format!("{name} mesh is empty")));
    }
    Ok(())
}

/// Symmetric Chamfer distance and F-Score at `opts.tau` between two surfaces.
pub fn chamfer_and_fscore(a: &Mesh, b: &Mesh, opts: &MetricOptions) -> Result<GeometryScores> {
    non_empty(a, "first")?;
    non_empty(b, "second")?;
    let (bvh_a, bvh_b) = (Bvh::build(a), Bvh::build(b));
    let sa = metric_samples(a, opts);
    let sb = metric_samples(b, opts);
    let d_ab = par::map(&sa, |s| bvh_b.closest(&s.position).unwrap().distance());
    let d_ba = par::map(&sb, |s| bvh_a.closest(&s.position).unwrap().distance());
    Ok(scores_from_distances(&d_ab, &d_ba, opts.tau))
}

/// Point-cloud variant: nearest-point distances in both directions.
pub fn chamfer_and_fscore_points(a: &[Vec3], b: &[Vec3], tau: f64) -> Result<GeometryScores> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("point clouds must be non-empty"));
    }
    let (ta, tb) = (PointTree::build(a), PointTree::build(b));
    let d_ab = par::map(a, |p| tb.nearest(p).unwrap().1.sqrt());
    let d_ba = par::map(b, |p| ta.nearest(p).unwrap().1.sqrt());
    Ok(scores_from_distances(&d_ab, &d_ba, tau))
}

fn one_way_color(src: &Mesh, src_samples: &[SurfacePoint], dst: &Mesh, dst_bvh: &Bvh) -> Vec<f64> {
    let (sc, dc) = (src.colors.as_ref().unwrap(), dst.colors.as_ref().unwrap());
    par::map(src_samples, |s| {
        let c = src.interpolate(sc, s.face, s.bary);
        let hit = dst_bvh.closest(&s.position).unwrap();
        let d = dst.interpolate(dc, hit.face, hit.bary);
        ((c - d).abs().sum() / 3.0) * COLOR_SCALE
    })
}

/// Symmetric color distance: mean absolute per-channel RGB difference × 100
/// against the color of the nearest point on the other surface.
pub fn color_distance(a: &Mesh, b: &Mesh, opts: &MetricOptions) -> Result<f64> {
    non_empty(a, "first")?;
    non_empty(b, "second")?;
    if a.colors.is_none() || b.colors.is_none() {
        return Err(Error::invalid("color distance needs per-vertex colors on both meshes"));
    }
    let (bvh_a, bvh_b) = (Bvh::build(a), Bvh::build(b));
    let sa = metric_samples(a, opts);
    let sb = metric_samples(b, opts);
    let d_ab = one_way_color(a, &sa, b, &bvh_b);
    let d_ba = one_way_color(b, &sb, a, &bvh_a);
    let mean = |d: &[f64]| if d.is_empty() { 0.0 } else { pairwise_sum(d) / d.len() as f64 };
    Ok(0.5 * (mean(&d_ab) + mean(&d_ba)))
}

/// Grid intersection-over-union of two boolean occupancy grids.
pub fn occupancy_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        uni += usize::from(x || y);
    }
    if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomio::mesh::unit_cube;

    #[test]
    fn identical_meshes_score_perfectly() {
        let m = unit_cube();
        let opts = MetricOptions { samples: 2000, ..Default::default() };
        let s = chamfer_and_fscore(&m, &m, &opts).unwrap();
        assert!(s.chamfer < 1e-12);
        assert_eq!(s.fscore, 100.0);
    }

    #[test]
    fn translated_mesh_loses_fscore_and_metrics_are_symmetric() {
        let a = unit_cube();
        let mut b = unit_cube();
        for v in &mut b.vertices {
            v.z += 0.08;
        }
        let opts = MetricOptions { samples: 3000, ..Default::default() };
        let ab = chamfer_and_fscore(&a, &b, &opts).unwrap();
        let ba = chamfer_and_fscore(&b, &a, &opts).unwrap();
        assert!(ab.fscore < 100.0);
        assert!(ab.chamfer > 0.0);
        assert_eq!(ab.chamfer, ba.chamfer);
        assert_eq!(ab.fscore, ba.fscore);
    }

    #[test]
    fn uniform_gray_vs_black_is_fifty() {
        let mut a = unit_cube();
        let mut b = unit_cube();
        a.colors = Some(vec![Vec3::repeat(0.5); 8]);
        b.colors = Some(vec![Vec3::zeros(); 8]);
        let opts = MetricOptions { samples: 500, ..Default::default() };
        let d = color_distance(&a, &b, &opts).unwrap();
        assert!((d - 50.0).abs() < 1e-9);
        assert!(color_distance(&a, &a, &opts).unwrap() < 1e-12);
    }

    #[test]
    fn errors_on_empty_or_uncolored() {
        let a = unit_cube();
        let empty = Mesh::default();
        let opts = MetricOptions::default();
        assert!(matches!(chamfer_and_fscore(&a, &empty, &opts), Err(Error::InvalidArgument(_))));
        assert!(matches!(color_distance(&a, &a, &opts), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn iou_of_identical_grids_is_one() {
        let g = vec![true, false, true, true];
        assert_eq!(occupancy_iou(&g, &g), 1.0);
        assert_eq!(occupancy_iou(&g, &[false, false, true, false]), 1.0 / 3.0);
    }
}
