//! Textured scans and their occupancy/color/normal supervision samples.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::headmodel::HeadParams;
use crate::math::Vec3;

use super::metrics::mesh_hash;
use super::winding::{label_occupancy, InsideTest};
use super::Mesh;

/// Standard deviation of near-surface perturbations, in box units.
pub const NEAR_SIGMA: f64 = 0.01;
const SIDECAR_MAGIC: &[u8; 4] = b"HFSS";
const SIDECAR_VERSION: u32 = 1;

/// Number of samples drawn per stratum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleCounts {
    pub near: usize,
    pub uniform: usize,
    pub surface: usize,
}

impl SampleCounts {
    /// 50% near-surface, 30% uniform, 20% on-surface; sums to `total`.
    pub fn from_total(total: usize) -> Self {
        let near = total / 2;
        let uniform = total * 3 / 10;
        SampleCounts {
            near,
            uniform,
            surface: total - near - uniform,
        }
    }

    pub fn total(&self) -> usize {
        self.near + self.uniform + self.surface
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    /// Near-surface points first, then uniform points.
    pub points: Vec<Vec3>,
    pub occ: Vec<u8>,
    pub surface_points: Vec<Vec3>,
    pub surface_colors: Vec<Vec3>,
    pub surface_normals: Vec<Vec3>,
    pub bbox: (Vec3, Vec3),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scan {
    pub mesh: Mesh,
    pub params: HeadParams,
    pub subject_id: usize,
    pub watertight: bool,
    pub samples: Option<SampleSet>,
}

impl Scan {
    /// Validates the mesh and fills normals when missing.
    pub fn new(mut mesh: Mesh, params: HeadParams, subject_id: usize) -> Result<Self> {
        mesh.validate()?;
        let colors_ok = mesh.colors.as_ref().is_some_and(|c| c.len() == mesh.vertices.len());
        if !colors_ok {
            return Err(Error::invalid("scan needs one color per vertex"));
        }
        if mesh.normals.as_ref().map_or(true, |n| n.len() != mesh.vertices.len()) {
            mesh.normals = Some(mesh.compute_vertex_normals());
        }
        let watertight = mesh.is_watertight();
        Ok(Scan {
            mesh,
            params,
            subject_id,
            watertight,
            samples: None,
        })
    }

    pub fn hash(&self) -> [u8; 32] {
        mesh_hash(&self.mesh)
    }

    pub fn colors(&self) -> &[Vec3] {
        self.mesh.colors.as_deref().unwrap_or(&[])
    }

    pub fn normals(&self) -> &[Vec3] {
        self.mesh.normals.as_deref().unwrap_or(&[])
    }

    pub fn label_occupancy(&self, points: &[Vec3]) -> Result<Vec<u8>> {
        label_occupancy(&self.mesh, points, InsideTest::WindingNumber)
    }

    /// Attaches samples, reusing a sidecar cache in `cache_dir` when present.
    pub fn ensure_samples(&mut self, seed: u64, counts: SampleCounts, cache_dir: Option<&Path>) -> Result<()> {
        if let Some(dir) = cache_dir {
            let path = dir.join(sidecar_name(&self.hash(), seed, counts));
            if let Some(s) = SampleSet::load_sidecar(&path, &self.hash(), seed, counts)? {
                self.samples = Some(s);
                return Ok(());
            }
            let s = sample_training_points(self, seed, counts)?;
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            s.save_sidecar(&path, &self.hash(), seed, counts)?;
            self.samples = Some(s);
        } else {
            self.samples = Some(sample_training_points(self, seed, counts)?);
        }
        Ok(())
    }
}

/// Draws the mixed supervision sample set for a scan.
pub fn sample_training_points(scan: &Scan, seed: u64, counts: SampleCounts) -> Result<SampleSet> {
    let mesh = &scan.mesh;
    if mesh.faces.is_empty() {
        return Err(Error::invalid("cannot sample an empty scan"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = mesh.bbox();
    let center = (lo + hi) * 0.5;
    let half = (hi - lo) * 0.55;
    let noise = Normal::new(0.0, NEAR_SIGMA).expect("valid sigma");

    let mut points = Vec::with_capacity(counts.near + counts.uniform);
    for sp in mesh.sample_surface(counts.near, &mut rng) {
        let d = Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
        points.push(sp.position + d);
    }
    for _ in 0..counts.uniform {
        let u = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        points.push(center + half.component_mul(&u));
    }
    let occ = scan.label_occupancy(&points)?;

    let colors = scan.colors();
    let normals = scan.normals();
    let surf = mesh.sample_surface(counts.surface, &mut rng);
    let surface_points = surf.iter().map(|s| s.position).collect();
    let surface_colors = surf.iter().map(|s| mesh.interpolate(colors, s.face, s.bary)).collect();
    let surface_normals = surf
        .iter()
        .map(|s| {
            let n = mesh.interpolate(normals, s.face, s.bary);
            let l = n.norm();
            if l > 1e-12 {
                n / l
            } else {
                n
            }
        })
        .collect();
    Ok(SampleSet {
        points,
        occ,
        surface_points,
        surface_colors,
        surface_normals,
        bbox: (lo, hi),
    })
}

pub fn sidecar_name(hash: &[u8; 32], seed: u64, counts: SampleCounts) -> String {
    format!(
        "{}-{seed}-{}-{}-{}.hfss",
        hex::encode(&hash[..8]),
        counts.near,
        counts.uniform,
        counts.surface
    )
}

fn put_vecs(out: &mut Vec<u8>, v: &[Vec3]) {
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for p in v {
        for k in 0..3 {
            out.extend_from_slice(&p[k].to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn vecs(&mut self) -> Option<Vec<Vec3>> {
        let n = self.u64()? as usize;
        if n > self.buf.len() / 24 {
            return None;
        }
        (0..n).map(|_| Some(Vec3::new(self.f64()?, self.f64()?, self.f64()?))).collect()
    }
}

impl SampleSet {
    pub fn to_bytes(&self, hash: &[u8; 32], seed: u64, counts: SampleCounts) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SIDECAR_MAGIC);
        out.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
        out.extend_from_slice(hash);
        for x in [seed, counts.near as u64, counts.uniform as u64, counts.surface as u64] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        put_vecs(&mut out, &[self.bbox.0, self.bbox.1]);
        put_vecs(&mut out, &self.points);
        out.extend_from_slice(&self.occ);
        put_vecs(&mut out, &self.surface_points);
        put_vecs(&mut out, &self.surface_colors);
        put_vecs(&mut out, &self.surface_normals);
        out
    }

    /// Decodes a sidecar; `Ok(None)` when it belongs to a different key or version.
    pub fn from_bytes(bytes: &[u8], hash: &[u8; 32], seed: u64, counts: SampleCounts) -> Option<Option<Self>> {
        let mut c = Cursor { buf: bytes, pos: 0 };
        if c.take(4)? != SIDECAR_MAGIC {
            return None;
        }
        let version = u32::from_le_bytes(c.take(4)?.try_into().ok()?);
        let stored_hash: [u8; 32] = c.take(32)?.try_into().ok()?;
        let key = [c.u64()?, c.u64()?, c.u64()?, c.u64()?];
        let want = [seed, counts.near as u64, counts.uniform as u64, counts.surface as u64];
        if version != SIDECAR_VERSION || &stored_hash != hash || key != want {
            return Some(None);
        }
        let bb = c.vecs()?;
        if bb.len() != 2 {
            return None;
        }
        let points = c.vecs()?;
        let occ = c.take(points.len())?.to_vec();
        let surface_points = c.vecs()?;
        let surface_colors = c.vecs()?;
        let surface_normals = c.vecs()?;
        if c.pos != bytes.len() || occ.iter().any(|&o| o > 1) {
            return None;
        }
        Some(Some(SampleSet {
            points,
            occ,
            surface_points,
            surface_colors,
            surface_normals,
            bbox: (bb[0], bb[1]),
        }))
    }

    pub fn save_sidecar(&self, path: &Path, hash: &[u8; 32], seed: u64, counts: SampleCounts) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes(hash, seed, counts)).map_err(|e| Error::io(path, e))
    }

    /// Missing files and key mismatches yield `Ok(None)`; corrupt files are format errors.
    pub fn load_sidecar(path: &Path, hash: &[u8; 32], seed: u64, counts: SampleCounts) -> Result<Option<Self>> {
        let mut f = match std::fs::File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(path, e)),
        };
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        SampleSet::from_bytes(&bytes, hash, seed, counts).ok_or_else(|| Error::format(path, "corrupt sample sidecar"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomio::mesh::unit_cube;
    use crate::geomio::Bvh;

    fn cube_scan() -> Scan {
        let mut m = unit_cube();
        m.colors = Some(vec![Vec3::new(0.2, 0.4, 0.6); m.vertices.len()]);
        Scan::new(m, HeadParams::zeros(4), 0).unwrap()
    }

    #[test]
    fn counts_are_exact() {
        let scan = cube_scan();
        for total in [10usize, 97, 1000] {
            let c = SampleCounts::from_total(total);
            assert_eq!(c.total(), total);
            let s = sample_training_points(&scan, 3, c).unwrap();
            assert_eq!(s.points.len(), c.near + c.uniform);
            assert_eq!(s.occ.len(), s.points.len());
            assert_eq!(s.surface_points.len(), c.surface);
            assert_eq!(s.surface_colors.len(), c.surface);
        }
    }

    #[test]
    fn near_points_stay_close() {
        let scan = cube_scan();
        let c = SampleCounts::from_total(4000);
        let s = sample_training_points(&scan, 9, c).unwrap();
        let bvh = Bvh::build(&scan.mesh);
        let within = s.points[..c.near]
            .iter()
            .filter(|p| bvh.closest(p).unwrap().distance() <= 4.0 * NEAR_SIGMA)
            .count();
        assert!(within as f64 >= 0.99 * c.near as f64);
    }

    #[test]
    fn labels_match_the_box() {
        let scan = cube_scan();
        let s = sample_training_points(&scan, 1, SampleCounts::from_total(2000)).unwrap();
        for (p, &o) in s.points.iter().zip(&s.occ) {
            let m = p.abs().max();
            if m < 0.499 {
                assert_eq!(o, 1);
            } else if m > 0.501 {
                assert_eq!(o, 0);
            }
        }
        for c in &s.surface_colors {
            assert!((c - Vec3::new(0.2, 0.4, 0.6)).norm() < 1e-12);
        }
    }

    #[test]
    fn seed_determinism() {
        let scan = cube_scan();
        let c = SampleCounts::from_total(300);
        assert_eq!(sample_training_points(&scan, 5, c).unwrap(), sample_training_points(&scan, 5, c).unwrap());
        assert_ne!(sample_training_points(&scan, 5, c).unwrap(), sample_training_points(&scan, 6, c).unwrap());
    }

    #[test]
    fn sidecar_roundtrip_and_key_mismatch() {
        let mut scan = cube_scan();
        let dir = tempfile::tempdir().unwrap();
        let c = SampleCounts::from_total(200);
        scan.ensure_samples(4, c, Some(dir.path())).unwrap();
        let first = scan.samples.clone().unwrap();
        let path = dir.path().join(sidecar_name(&scan.hash(), 4, c));
        assert!(path.exists());
        let loaded = SampleSet::load_sidecar(&path, &scan.hash(), 4, c).unwrap().unwrap();
        assert_eq!(loaded, first);
        assert!(SampleSet::load_sidecar(&path, &scan.hash(), 5, c).unwrap().is_none());
        std::fs::write(&path, b"HFSS\x01\x00").unwrap();
        assert!(matches!(
            SampleSet::load_sidecar(&path, &scan.hash(), 4, c),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn scan_requires_colors() {
        assert!(Scan::new(unit_cube(), HeadParams::zeros(1), 0).is_err());
    }
}
