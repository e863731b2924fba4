//! Cameras, a mesh rasterizer and a ray-marching renderer for occupancy fields.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geomio::mesh::Mesh;
use crate::geomio::Scan;
use crate::math::Vec3;

/// Color of pixels without a surface hit.
pub const BACKGROUND: f64 = 1.0;
pub const MARCH_STEPS: usize = 128;
pub const SECANT_STEPS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Projection {
    /// Parallel rays; `half_extent` is half the image height in world units.
    Orthographic { half_extent: f64 },
    /// Focal length in pixels; principal point at the image center.
    Pinhole { focal: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub projection: Projection,
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
    /// Eye position (pinhole) or image-plane center (orthographic).
    pub position: Vec3,
    pub width: usize,
    pub height: usize,
    /// Ray parameter range searched by the field renderer.
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Orthographic camera at `distance` from the origin looking at it along `-dir`.
    pub fn orthographic(dir: Vec3, up_hint: Vec3, distance: f64, half_extent: f64, res: usize) -> Result<Self> {
        let (right, up, forward) = frame(dir, up_hint)?;
        Ok(Camera {
            projection: Projection::Orthographic { half_extent },
            right,
            up,
            forward,
            position: dir.normalize() * distance,
            width: res,
            height: res,
            near: 0.0,
            far: 2.0 * distance,
        })
    }

    pub fn pinhole(eye: Vec3, target: Vec3, up_hint: Vec3, fov_y: f64, width: usize, height: usize) -> Result<Self> {
        let (right, up, forward) = frame(eye - target, up_hint)?;
        let dist = (eye - target).norm();
        Ok(Camera {
            projection: Projection::Pinhole {
                focal: 0.5 * height as f64 / (0.5 * fov_y).tan(),
            },
            right,
            up,
            forward,
            position: eye,
            width,
            height,
            near: 0.0,
            far: 2.0 * dist,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.abs() < 1e-8;
        let f = [&self.right, &self.up, &self.forward];
        for (i, a) in f.iter().enumerate() {
            if !ok(a.norm() - 1.0) {
                return Err(Error::invalid("camera frame vectors must be unit length"));
            }
            for b in &f[i + 1..] {
                if !ok(a.dot(b)) {
                    return Err(Error::invalid("camera frame must be orthogonal"));
                }
            }
        }
        if self.width == 0 || self.height == 0 || self.far <= self.near {
            return Err(Error::invalid("camera needs a positive image size and ray range"));
        }
        Ok(())
    }

    /// Image-plane offsets of a pixel center in the camera's right/up units.
    fn plane(&self, px: f64, py: f64) -> (f64, f64) {
        let cx = 0.5 * self.width as f64;
        let cy = 0.5 * self.height as f64;
        match self.projection {
            Projection::Orthographic { half_extent } => {
                let s = half_extent / cy;
                ((px - cx) * s, (cy - py) * s)
            }
            Projection::Pinhole { focal } => ((px - cx) / focal, (cy - py) / focal),
        }
    }

    /// Ray through the center of pixel `(i, j)` (column, row; row 0 at the top).
    pub fn ray(&self, i: usize, j: usize) -> (Vec3, Vec3) {
        let (u, v) = self.plane(i as f64 + 0.5, j as f64 + 0.5);
        match self.projection {
            Projection::Orthographic { .. } => (self.position + self.right * u + self.up * v, self.forward),
            Projection::Pinhole { .. } => (self.position, (self.forward + self.right * u + self.up * v).normalize()),
        }
    }

    /// Continuous pixel coordinates and view depth of a world point.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let d = p - self.position;
        let z = d.dot(&self.forward);
        let (x, y) = (d.dot(&self.right), d.dot(&self.up));
        let cx = 0.5 * self.width as f64;
        let cy = 0.5 * self.height as f64;
        match self.projection {
            Projection::Orthographic { half_extent } => {
                let s = cy / half_extent;
                Some((cx + x * s, cy - y * s, z))
            }
            Projection::Pinhole { focal } => {
                if z <= 1e-9 {
                    return None;
                }
                Some((cx + focal * x / z, cy - focal * y / z, z))
            }
        }
    }
}

fn frame(back: Vec3, up_hint: Vec3) -> Result<(Vec3, Vec3, Vec3)> {
    let forward = -back;
    let fl = forward.norm();
    if fl < 1e-12 {
        return Err(Error::invalid("camera direction must be nonzero"));
    }
    let forward = forward / fl;
    let right = forward.cross(&up_hint);
    let rl = right.norm();
    if rl < 1e-9 {
        return Err(Error::invalid("camera up hint is parallel to the view direction"));
    }
    let right = right / rl;
    let up = right.cross(&forward);
    Ok((right, up, forward))
}

/// Front, left, right and back orthographic views.
pub fn camera_rig(half_extent: f64, res: usize) -> Vec<Camera> {
    let y = Vec3::y();
    [Vec3::z(), -Vec3::x(), Vec3::x(), -Vec3::z()]
        .into_iter()
        .map(|d| Camera::orthographic(d, y, 2.0, half_extent, res).expect("fixed rig"))
        .collect()
}

/// Rendered images plus per-pixel surface data.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOut {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB in `[0, 1]`; background pixels are `BACKGROUND`.
    pub rgb: Vec<Vec3>,
    /// Unit normals; background pixels are zero.
    pub normal: Vec<Vec3>,
    pub mask: Vec<bool>,
    /// Ray parameter of the hit (infinite on background).
    pub depth: Vec<f64>,
    pub points: Vec<Option<Vec3>>,
    /// Canonical correspondence of the hit, when known.
    pub canonical: Vec<Option<Vec3>>,
    /// False where the secant refinement did not reach the level-set tolerance.
    pub converged: Vec<bool>,
}

impl RenderOut {
    pub fn background(width: usize, height: usize) -> Self {
        let n = width * height;
        RenderOut {
            width,
            height,
            rgb: vec![Vec3::repeat(BACKGROUND); n],
            normal: vec![Vec3::zeros(); n],
            mask: vec![false; n],
            depth: vec![f64::INFINITY; n],
            points: vec![None; n],
            canonical: vec![None; n],
            converged: vec![false; n],
        }
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    pub fn coverage(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn mask_iou(&self, other: &RenderOut) -> f64 {
        let inter = self.mask.iter().zip(&other.mask).filter(|(a, b)| **a && **b).count();
        let union = self.mask.iter().zip(&other.mask).filter(|(a, b)| **a || **b).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    fn rgb8(&self, which: Channel) -> Vec<u8> {
        let to8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let mut out = Vec::with_capacity(self.rgb.len() * 3);
        for p in 0..self.rgb.len() {
            let c = match which {
                Channel::Rgb => self.rgb[p],
                Channel::Normal => (self.normal[p] + Vec3::repeat(1.0)) * 0.5,
                Channel::Mask => Vec3::repeat(if self.mask[p] { 1.0 } else { 0.0 }),
            };
            out.extend([to8(c.x), to8(c.y), to8(c.z)]);
        }
        out
    }

    pub fn save_png(&self, path: &Path, which: Channel) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::format(path, e.to_string()))?;
        w.write_image_data(&self.rgb8(which))
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Which image a PNG export writes. Normals are encoded as `(n + 1) / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Rgb,
    Normal,
    Mask,
}

/// Rasterizes a colored mesh with per-vertex normals.
///
/// `canonical` optionally carries per-vertex canonical positions interpolated into
/// `RenderOut::canonical`.
pub fn render_mesh(mesh: &Mesh, colors: &[Vec3], normals: &[Vec3], canonical: Option<&[Vec3]>, camera: &Camera) -> Result<RenderOut> {
    camera.validate()?;
    mesh.validate()?;
    let n = mesh.vertices.len();
    if colors.len() != n || normals.len() != n || canonical.is_some_and(|c| c.len() != n) {
        return Err(Error::invalid("per-vertex attribute counts must match the vertex count"));
    }
    let (w, h) = (camera.width, camera.height);
    let mut out = RenderOut::background(w, h);
    let proj: Vec<Option<(f64, f64, f64)>> = mesh.vertices.iter().map(|v| camera.project(v)).collect();
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut hit: Vec<Option<(usize, [f64; 3])>> = vec![None; w * h];
    for (fi, f) in mesh.faces.iter().enumerate() {
        let (Some(a), Some(b), Some(c)) = (proj[f[0] as usize], proj[f[1] as usize], proj[f[2] as usize]) else {
            continue;
        };
        let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
        if area.abs() < 1e-14 {
            continue;
        }
        let x0 = a.0.min(b.0).min(c.0).floor().max(0.0) as usize;
        let x1 = (a.0.max(b.0).max(c.0).ceil().max(0.0) as usize).min(w);
        let y0 = a.1.min(b.1).min(c.1).floor().max(0.0) as usize;
        let y1 = (a.1.max(b.1).max(c.1).ceil().max(0.0) as usize).min(h);
        for j in y0..y1 {
            for i in x0..x1 {
                let (px, py) = (i as f64 + 0.5, j as f64 + 0.5);
                let l0 = ((b.0 - px) * (c.1 - py) - (b.1 - py) * (c.0 - px)) / area;
                let l1 = ((c.0 - px) * (a.1 - py) - (c.1 - py) * (a.0 - px)) / area;
                let l2 = 1.0 - l0 - l1;
                let eps = -1e-12;
                if l0 < eps || l1 < eps || l2 < eps {
                    continue;
                }
                let z = l0 * a.2 + l1 * b.2 + l2 * c.2;
                let p = j * w + i;
                if z < zbuf[p] {
                    zbuf[p] = z;
                    hit[p] = Some((fi, [l0, l1, l2]));
                }
            }
        }
    }
    for p in 0..w * h {
        let Some((fi, bary)) = hit[p] else { continue };
        let f = mesh.faces[fi];
        let interp = |vals: &[Vec3]| {
            vals[f[0] as usize] * bary[0] + vals[f[1] as usize] * bary[1] + vals[f[2] as usize] * bary[2]
        };
        let nrm = interp(normals);
        let nl = nrm.norm();
        out.mask[p] = true;
        out.converged[p] = true;
        out.rgb[p] = interp(colors);
        out.normal[p] = if nl > 0.0 { nrm / nl } else { -camera.forward };
        let pt = interp(&mesh.vertices);
        out.depth[p] = match camera.projection {
            Projection::Orthographic { .. } => zbuf[p],
            Projection::Pinhole { .. } => (pt - camera.position).norm(),
        };
        out.points[p] = Some(pt);
        out.canonical[p] = canonical.map(interp);
    }
    Ok(out)
}

/// Rasterizes a scan with its vertex colors and normals.
pub fn render_scan(scan: &Scan, camera: &Camera) -> Result<RenderOut> {
    render_mesh(&scan.mesh, scan.colors(), scan.normals(), None, camera)
}

/// Surface attributes returned by a field at a hit point.
#[derive(Clone, Debug, PartialEq)]
pub struct Shade {
    pub color: Vec3,
    pub normal: Vec3,
    pub canonical: Option<Vec3>,
}

/// An occupancy field that can be ray marched.
pub trait SurfaceField: Sync {
    fn occupancy(&self, x: &Vec3) -> f64;
    fn shade(&self, x: &Vec3) -> Shade;
}

/// Per-pixel ray-parameter window for guided marching.
pub type Guide<'a> = &'a (dyn Fn(usize) -> Option<(f64, f64)> + Sync);

/// Ray marches the 0.5 level set with fixed stepping then secant refinement.
///
/// With a guide, only pixels with a window are marched and stepping covers that
/// window; other pixels stay background.
pub fn render_field(field: &dyn SurfaceField, camera: &Camera, guide: Option<Guide>) -> Result<RenderOut> {
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    let pixels = crate::par::map_range(w * h, |p| {
        let range = match guide {
            Some(g) => g(p)?,
            None => (camera.near, camera.far),
        };
        let (o, d) = camera.ray(p % w, p / w);
        march(field, &o, &d, range)
    });
    let mut out = RenderOut::background(w, h);
    for (p, hit) in pixels.into_iter().enumerate() {
        let Some((t, x, converged)) = hit else { continue };
        let s = field.shade(&x);
        out.mask[p] = true;
        out.rgb[p] = s.color;
        out.normal[p] = s.normal;
        out.depth[p] = t;
        out.points[p] = Some(x);
        out.canonical[p] = s.canonical;
        out.converged[p] = converged;
    }
    Ok(out)
}

fn march(field: &dyn SurfaceField, o: &Vec3, d: &Vec3, (t0, t1): (f64, f64)) -> Option<(f64, Vec3, bool)> {
    let level = crate::geomio::marching::OCCUPANCY_LEVEL;
    let dt = (t1 - t0) / MARCH_STEPS as f64;
    let f = |t: f64| field.occupancy(&(o + d * t)) - level;
    let mut ta = t0;
    let mut fa = f(ta);
    if fa >= 0.0 {
        return Some((ta, o + d * ta, fa.abs() < 1e-3));
    }
    for s in 1..=MARCH_STEPS {
        let tb = t0 + dt * s as f64;
        let fb = f(tb);
        if fb >= 0.0 {
            let (mut a, mut b, mut fa, mut fb) = (ta, tb, fa, fb);
            let mut t = b;
            let mut ft = fb;
            for _ in 0..SECANT_STEPS {
                t = if fb != fa { b - fb * (b - a) / (fb - fa) } else { 0.5 * (a + b) };
                ft = f(t);
                if ft.abs() < 1e-12 {
                    break;
                }
                if ft < 0.0 {
                    a = t;
                    fa = ft;
                } else {
                    b = t;
                    fb = ft;
                }
            }
            return Some((t, o + d * t, ft.abs() < 1e-3));
        }
        ta = tb;
        fa = fb;
    }
    None
}
