//! Compact FLAME-style parametric head model.
//!
//! Holds a template shell, linear shape/expression/pose-corrective bases,
//! skinning weights for a five-joint chain (global → neck → {jaw, left eye,
//! right eye}) and a joint regressor. The model is both the source of
//! ground-truth deformation components and the synthetic scan generator.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::deform::DeformBundle;
use crate::error::{ensure_dim, Error, Result};
use crate::geomio::{Bvh, Mesh, Scan};
use crate::math::{axis_angle_to_matrix, rigid, smoothstep, transform_point, wendland, Mat3, Mat4, Vec3};

pub const NUM_JOINTS: usize = 5;
pub const POSE_DIM: usize = 3 * NUM_JOINTS;
pub const EXPR_DIM: usize = 50;
/// 4 non-global joints × 9 rotation-matrix residual entries.
pub const POSE_FEATURE_DIM: usize = 36;
pub const JOINT_PARENTS: [Option<usize>; NUM_JOINTS] = [None, Some(0), Some(1), Some(1), Some(1)];
pub const JOINT_NAMES: [&str; NUM_JOINTS] = ["global", "neck", "jaw", "left_eye", "right_eye"];
pub const GLOBAL: usize = 0;
pub const NECK: usize = 1;
pub const JAW: usize = 2;

pub const MODEL_FORMAT: &str = "headfield-model";
pub const MODEL_VERSION: u32 = 1;

/// Shape (β), pose (θ, axis-angle per joint) and expression (ψ) coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(n_beta: usize) -> Self {
        HeadParams {
            beta: vec![0.0; n_beta],
            theta: vec![0.0; POSE_DIM],
            psi: vec![0.0; EXPR_DIM],
        }
    }

    /// Rest configuration with the jaw opened by `jaw_angle` radians.
    pub fn with_jaw(n_beta: usize, jaw_angle: f64) -> Self {
        let mut p = Self::zeros(n_beta);
        p.theta[3 * JAW] = jaw_angle;
        p
    }

    pub fn joint_rotation(&self, j: usize) -> Vec3 {
        Vec3::new(self.theta[3 * j], self.theta[3 * j + 1], self.theta[3 * j + 2])
    }

    pub fn validate(&self, n_beta: usize) -> Result<()> {
        ensure_dim("beta", self.beta.len(), n_beta)?;
        ensure_dim("theta", self.theta.len(), POSE_DIM)?;
        ensure_dim("psi", self.psi.len(), EXPR_DIM)?;
        let finite = self.beta.iter().chain(&self.theta).chain(&self.psi).all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("head parameters must be finite"));
        }
        Ok(())
    }
}

/// Flattened `R(θ_j) - I` for the four non-global joints.
pub fn pose_features(theta: &[f64]) -> [f64; POSE_FEATURE_DIM] {
    let mut out = [0.0; POSE_FEATURE_DIM];
    for j in 1..NUM_JOINTS {
        let r = axis_angle_to_matrix(&Vec3::new(theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]))
            - Mat3::identity();
        for row in 0..3 {
            for col in 0..3 {
                out[(j - 1) * 9 + row * 3 + col] = r[(row, col)];
            }
        }
    }
    out
}

/// World transforms `A_k` mapping rest-pose points to posed points for each joint.
pub fn joint_transforms(joints: &[Vec3; NUM_JOINTS], theta: &[f64]) -> [Mat4; NUM_JOINTS] {
    let mut global = [Mat4::identity(); NUM_JOINTS];
    for k in 0..NUM_JOINTS {
        let rot = axis_angle_to_matrix(&Vec3::new(theta[3 * k], theta[3 * k + 1], theta[3 * k + 2]));
        global[k] = match JOINT_PARENTS[k] {
            None => rigid(&rot, &joints[k]),
            Some(p) => global[p] * rigid(&rot, &(joints[k] - joints[p])),
        };
    }
    let mut out = [Mat4::identity(); NUM_JOINTS];
    for k in 0..NUM_JOINTS {
        out[k] = global[k] * rigid(&Mat3::identity(), &(-joints[k]));
    }
    out
}

pub(crate) fn check_weight_row(w: &[f64; NUM_JOINTS], i: usize) -> Result<()> {
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-6 || w.iter().any(|&x| x < -1e-12 || !x.is_finite()) {
        return Err(Error::contract(format!(
            "skinning weights of point {i} are not a convex combination (sum {s})"
        )));
    }
    Ok(())
}

#[inline]
pub fn blend_transform(weights: &[f64; NUM_JOINTS], transforms: &[Mat4; NUM_JOINTS]) -> Mat4 {
    let mut m = Mat4::zeros();
    for k in 0..NUM_JOINTS {
        if weights[k] != 0.0 {
            m += transforms[k] * weights[k];
        }
    }
    m
}

/// Standard linear blend skinning of rest-pose points.
pub fn lbs_deform(
    points: &[Vec3],
    weights: &[[f64; NUM_JOINTS]],
    joints: &[Vec3; NUM_JOINTS],
    theta: &[f64],
) -> Result<Vec<Vec3>> {
    ensure_dim("theta", theta.len(), POSE_DIM)?;
    ensure_dim("weights", weights.len(), points.len())?;
    for (i, w) in weights.iter().enumerate() {
        check_weight_row(w, i)?;
    }
    let a = joint_transforms(joints, theta);
    Ok(points
        .iter()
        .zip(weights)
        .map(|(p, w)| transform_point(&blend_transform(w, &a), p))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadModelConfig {
    /// Geodesic subdivision frequency; vertex count is `10 f^2 + 2`.
    pub frequency: usize,
    pub n_beta: usize,
    pub seed: u64,
}

impl Default for HeadModelConfig {
    fn default() -> Self {
        HeadModelConfig {
            frequency: 8,
            n_beta: 100,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipLandmarks {
    pub upper: u32,
    pub lower: u32,
}

/// Template shell with its linear bases, skinning weights and joint regressor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateModel {
    pub format: String,
    pub version: u32,
    pub n_beta: usize,
    pub template: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// `[V][3][n_beta]`
    pub shape_basis: Vec<f64>,
    /// `[V][3][EXPR_DIM]`
    pub expr_basis: Vec<f64>,
    /// `[V][3][POSE_FEATURE_DIM]`
    pub pose_basis: Vec<f64>,
    pub lbs_weights: Vec<[f64; NUM_JOINTS]>,
    /// `[NUM_JOINTS][V]`
    pub joint_regressor: Vec<Vec<f64>>,
    /// Vertices of the facial region used for face-only metrics.
    pub face_region: Vec<u32>,
    pub lips: LipLandmarks,
}

/// Nearest-surface lookup of ground-truth components on one posed model surface.
#[derive(Clone, Debug)]
pub struct ComponentSample {
    pub bundle: DeformBundle,
    pub distance: f64,
    pub face: usize,
    pub bary: [f64; 3],
}

impl TemplateModel {
    pub fn num_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn synthesize(cfg: &HeadModelConfig) -> Result<Self> {
        if cfg.frequency < 2 {
            return Err(Error::invalid("geodesic frequency must be at least 2"));
        }
        if cfg.n_beta == 0 {
            return Err(Error::invalid("n_beta must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (dirs, faces) = geodesic_sphere(cfg.frequency);
        let template = sculpt_head(&dirs);
        let mesh = Mesh::new(template.clone(), faces.clone());
        let normals = mesh.compute_vertex_normals();
        let nv = template.len();
        let ymin = template.iter().map(|p| p.y).fold(f64::MAX, f64::min);

        let eye_l = front_point(&template, 0.13, 0.08);
        let eye_r = front_point(&template, -0.13, 0.08);

        // skinning weights by region
        let mut lbs_weights = Vec::with_capacity(nv);
        for p in &template {
            let g = smoothstep(ymin + 0.12, ymin + 0.04, p.y);
            let jaw = smoothstep(-0.10, -0.16, p.y) * smoothstep(0.0, 0.15, p.z);
            let el = smoothstep(0.09, 0.05, (p - eye_l).norm());
            let er = smoothstep(0.09, 0.05, (p - eye_r).norm());
            let rem = 1.0 - g;
            let rem2 = rem * (1.0 - jaw);
            let mut w = [g, rem2 * (1.0 - el - er), rem * jaw, rem2 * el, rem2 * er];
            for x in &mut w {
                if *x < 1e-3 {
                    *x = 0.0;
                }
            }
            let s: f64 = w.iter().sum();
            for x in &mut w {
                *x /= s;
            }
            lbs_weights.push(w);
        }

        // joint regressor: normalized kernels over vertices
        let kernels: [Box<dyn Fn(&Vec3) -> f64>; NUM_JOINTS] = [
            Box::new(move |p: &Vec3| (-((p.y - ymin) / 0.05).powi(2)).exp()),
            Box::new(|p: &Vec3| (-((p.y + 0.25) / 0.05).powi(2)).exp()),
            Box::new(|p: &Vec3| (-((p.y + 0.10) / 0.05).powi(2)).exp()),
            Box::new(move |p: &Vec3| (-(p - eye_l).norm_squared() / (2.0 * 0.04f64.powi(2))).exp()),
            Box::new(move |p: &Vec3| (-(p - eye_r).norm_squared() / (2.0 * 0.04f64.powi(2))).exp()),
        ];
        let joint_regressor: Vec<Vec<f64>> = kernels
            .iter()
            .map(|k| {
                let row: Vec<f64> = template.iter().map(|p| k(p)).collect();
                let s: f64 = row.iter().sum();
                row.into_iter().map(|x| x / s).collect()
            })
            .collect();

        let n_beta = cfg.n_beta;
        let mut shape_basis = vec![0.0; nv * 3 * n_beta];
        for b in 0..n_beta {
            let field: Box<dyn Fn(usize) -> Vec3> = match b {
                0 => Box::new(|v| Vec3::new(0.10 * template[v].x, 0.0, 0.0)),
                1 => Box::new(|v| Vec3::new(0.0, 0.08 * template[v].y, 0.0)),
                2 => Box::new(|v| Vec3::new(0.0, 0.0, 0.08 * template[v].z)),
                _ => {
                    let center = random_unit(&mut rng);
                    let radius = rng.gen_range(0.5..1.0);
                    let amp = 0.03 * (-((b - 3) as f64) / 15.0).exp() * if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    let dirs = &dirs;
                    let normals = &normals;
                    Box::new(move |v| normals[v] * (amp * wendland(angle(&dirs[v], &center) / radius)))
                }
            };
            for v in 0..nv {
                let d = field(v);
                for k in 0..3 {
                    shape_basis[(v * 3 + k) * n_beta + b] = d[k];
                }
            }
        }

        let face_region: Vec<u32> = (0..nv)
            .filter(|&v| template[v].z > 0.1 && template[v].y > -0.38 && template[v].y < 0.22)
            .map(|v| v as u32)
            .collect();

        let mut expr_basis = vec![0.0; nv * 3 * EXPR_DIM];
        for j in 0..EXPR_DIM {
            let c = dirs[face_region[rng.gen_range(0..face_region.len())] as usize];
            let radius = rng.gen_range(0.2..0.45);
            let amp = 0.025 / (1.0 + j as f64 / 6.0);
            let tangent = Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            for v in 0..nv {
                let s = wendland(angle(&dirs[v], &c) / radius);
                if s == 0.0 {
                    continue;
                }
                let d = (normals[v] + tangent) * (amp * s);
                for k in 0..3 {
                    expr_basis[(v * 3 + k) * EXPR_DIM + j] = d[k];
                }
            }
        }

        let mut pose_basis = vec![0.0; nv * 3 * POSE_FEATURE_DIM];
        for col in 0..POSE_FEATURE_DIM {
            let joint = 1 + col / 9;
            let c0 = random_gauss3(&mut rng);
            let c1 = Mat3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            for v in 0..nv {
                let w = lbs_weights[v][joint];
                if w == 0.0 {
                    continue;
                }
                let d = (c0 + c1 * template[v]) * (0.01 * w);
                for k in 0..3 {
                    pose_basis[(v * 3 + k) * POSE_FEATURE_DIM + col] = d[k];
                }
            }
        }

        let lips = LipLandmarks {
            upper: nearest_front_vertex(&template, -0.07),
            lower: nearest_front_vertex(&template, -0.21),
        };

        let model = TemplateModel {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            n_beta,
            template,
            faces,
            shape_basis,
            expr_basis,
            pose_basis,
            lbs_weights,
            joint_regressor,
            face_region,
            lips,
        };
        model.validate()?;
        Ok(model)
    }

    /// Checks every structural invariant of the asset.
    pub fn validate(&self) -> Result<()> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model asset {} v{}",
                self.format, self.version
            )));
        }
        let nv = self.template.len();
        ensure_dim("shape basis", self.shape_basis.len(), nv * 3 * self.n_beta)?;
        ensure_dim("expression basis", self.expr_basis.len(), nv * 3 * EXPR_DIM)?;
        ensure_dim("pose basis", self.pose_basis.len(), nv * 3 * POSE_FEATURE_DIM)?;
        ensure_dim("skinning weights", self.lbs_weights.len(), nv)?;
        ensure_dim("joint regressor rows", self.joint_regressor.len(), NUM_JOINTS)?;
        for (i, w) in self.lbs_weights.iter().enumerate() {
            check_weight_row(w, i)?;
        }
        for row in &self.joint_regressor {
            ensure_dim("joint regressor columns", row.len(), nv)?;
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!("joint regressor row sums to {s}")));
            }
        }
        if self.faces.iter().flatten().any(|&v| v as usize >= nv) {
            return Err(Error::invalid("face index out of range"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_vec(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: TemplateModel = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn template_mesh(&self) -> Mesh {
        Mesh::new(self.template.clone(), self.faces.clone())
    }

    /// `T + B_S(β)`.
    pub fn shaped_vertices(&self, beta: &[f64]) -> Result<Vec<Vec3>> {
        ensure_dim("beta", beta.len(), self.n_beta)?;
        let nb = self.n_beta;
        Ok((0..self.num_vertices())
            .map(|v| {
                let mut p = self.template[v];
                for k in 0..3 {
                    let row = &self.shape_basis[(v * 3 + k) * nb..(v * 3 + k + 1) * nb];
                    p[k] += row.iter().zip(beta).map(|(s, b)| s * b).sum::<f64>();
                }
                p
            })
            .collect())
    }

    /// `T + B_S(β) + B_P(θ) + B_E(ψ)`.
    pub fn blend_shape(&self, params: &HeadParams) -> Result<Vec<Vec3>> {
        params.validate(self.n_beta)?;
        let shaped = self.shaped_vertices(&params.beta)?;
        let r = pose_features(&params.theta);
        Ok(shaped
            .into_iter()
            .enumerate()
            .map(|(v, mut p)| {
                for k in 0..3 {
                    let prow = &self.pose_basis[(v * 3 + k) * POSE_FEATURE_DIM..(v * 3 + k + 1) * POSE_FEATURE_DIM];
                    let erow = &self.expr_basis[(v * 3 + k) * EXPR_DIM..(v * 3 + k + 1) * EXPR_DIM];
                    p[k] += prow.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
                        + erow.iter().zip(&params.psi).map(|(a, b)| a * b).sum::<f64>();
                }
                p
            })
            .collect())
    }

    /// Joint locations `J(β)` regressed from the shaped rest mesh.
    pub fn joints(&self, beta: &[f64]) -> Result<[Vec3; NUM_JOINTS]> {
        let shaped = self.shaped_vertices(beta)?;
        let mut out = [Vec3::zeros(); NUM_JOINTS];
        for (j, row) in self.joint_regressor.iter().enumerate() {
            out[j] = row.iter().zip(&shaped).map(|(w, p)| p * *w).sum();
        }
        Ok(out)
    }

    pub fn posed_vertices(&self, params: &HeadParams) -> Result<Vec<Vec3>> {
        let blended = self.blend_shape(params)?;
        let joints = self.joints(&params.beta)?;
        lbs_deform(&blended, &self.lbs_weights, &joints, &params.theta)
    }

    /// Full forward model; the output shares the template's face topology.
    pub fn flame_forward(&self, params: &HeadParams) -> Result<Mesh> {
        Ok(Mesh::new(self.posed_vertices(params)?, self.faces.clone()))
    }

    /// Procedural albedo of template vertex `v` for a given texture seed.
    pub fn vertex_color(&self, v: usize, texture_seed: u64) -> Vec3 {
        let tex = Texture::new(texture_seed);
        tex.color(&self.template[v], &self.lbs_weights[v])
    }

    /// Posed, textured mesh of the model as a scan.
    pub fn make_synthetic_scan(&self, params: &HeadParams, subject_id: usize, texture_seed: u64) -> Result<Scan> {
        let mut mesh = self.flame_forward(params)?;
        let tex = Texture::new(texture_seed);
        mesh.colors = Some(
            self.template
                .iter()
                .zip(&self.lbs_weights)
                .map(|(p, w)| tex.color(p, w))
                .collect(),
        );
        mesh.normals = Some(mesh.compute_vertex_normals());
        Scan::new(mesh, params.clone(), subject_id)
    }

    /// Ground-truth bundle rows of vertex `v`.
    pub fn vertex_bundle(&self, v: usize) -> DeformBundle {
        let mut b = DeformBundle::zeros();
        for k in 0..3 {
            for j in 0..EXPR_DIM {
                b.expr[k * EXPR_DIM + j] = self.expr_basis[(v * 3 + k) * EXPR_DIM + j];
            }
            for i in 0..POSE_FEATURE_DIM {
                b.pose[i * 3 + k] = self.pose_basis[(v * 3 + k) * POSE_FEATURE_DIM + i];
            }
        }
        b.weights = self.lbs_weights[v];
        b
    }

    /// Barycentric blend of vertex bundles at `(face, bary)`.
    pub fn interpolate_bundle(&self, face: usize, bary: [f64; 3]) -> DeformBundle {
        let mut out = DeformBundle::zeros();
        for (c, &v) in self.faces[face].iter().enumerate() {
            if bary[c] == 0.0 {
                continue;
            }
            out.add_scaled(&self.vertex_bundle(v as usize), bary[c]);
        }
        out
    }

    pub fn component_lookup(&self, params: &HeadParams) -> Result<ComponentLookup<'_>> {
        ComponentLookup::new(self, self.flame_forward(params)?)
    }

    /// Ground-truth E, P, W at the nearest point of the posed model surface.
    pub fn sample_components_at(&self, params: &HeadParams, query: &[Vec3]) -> Result<Vec<ComponentSample>> {
        let lookup = self.component_lookup(params)?;
        Ok(crate::par::map(query, |q| lookup.sample(q)))
    }
}

/// Closest-point transfer of model components from a fixed surface of the template topology.
#[derive(Clone, Debug)]
pub struct ComponentLookup<'a> {
    model: &'a TemplateModel,
    bvh: Bvh,
}

impl<'a> ComponentLookup<'a> {
    pub fn new(model: &'a TemplateModel, surface: Mesh) -> Result<Self> {
        if surface.faces != model.faces {
            return Err(Error::invalid("lookup surface must share the template topology"));
        }
        Ok(ComponentLookup {
            model,
            bvh: Bvh::build(&surface),
        })
    }

    pub fn sample(&self, q: &Vec3) -> ComponentSample {
        let hit = self.bvh.closest(q).expect("template surface has faces");
        ComponentSample {
            bundle: self.model.interpolate_bundle(hit.face, hit.bary),
            distance: hit.distance(),
            face: hit.face,
            bary: hit.bary,
        }
    }
}

struct Texture {
    skin: Vec3,
    hair: Vec3,
    waves: Vec<(Vec3, f64, Vec3)>,
}

impl Texture {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_u64);
        let skin = Vec3::new(
            rng.gen_range(0.62..0.85),
            rng.gen_range(0.45..0.62),
            rng.gen_range(0.35..0.52),
        );
        let hair = Vec3::new(rng.gen_range(0.08..0.45), rng.gen_range(0.05..0.3), rng.gen_range(0.03..0.2));
        let waves = (0..6)
            .map(|_| {
                let k = random_unit(&mut rng) * rng.gen_range(6.0..14.0);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp = Vec3::new(rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04));
                (k, phase, amp)
            })
            .collect();
        Texture { skin, hair, waves }
    }

    fn color(&self, p: &Vec3, w: &[f64; NUM_JOINTS]) -> Vec3 {
        let mut c = self.skin;
        for (k, phase, amp) in &self.waves {
            c += amp * (k.dot(p) + phase).sin();
        }
        let hair = smoothstep(0.12, 0.24, p.y).max(smoothstep(-0.05, -0.2, p.z) * smoothstep(-0.2, 0.0, p.y));
        c = c * (1.0 - hair) + self.hair * hair;
        let lips = smoothstep(0.1, 0.05, p.x.abs()) * smoothstep(-0.05, -0.09, p.y) * smoothstep(-0.26, -0.2, p.y)
            * smoothstep(0.15, 0.3, p.z);
        c = c * (1.0 - lips) + Vec3::new(0.7, 0.3, 0.3) * lips;
        let eye = w[3] + w[4];
        c = c * (1.0 - eye) + Vec3::new(0.15, 0.1, 0.1) * eye;
        c.map(|x| x.clamp(0.0, 1.0))
    }
}

fn angle(a: &Vec3, b: &Vec3) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos()
}

fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = random_gauss3(rng);
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn random_gauss3<R: Rng>(rng: &mut R) -> Vec3 {
    Vec3::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    )
}

fn front_point(template: &[Vec3], x: f64, y: f64) -> Vec3 {
    let best = template
        .iter()
        .filter(|p| p.z > 0.0)
        .min_by(|a, b| {
            let da = (a.x - x).powi(2) + (a.y - y).powi(2);
            let db = (b.x - x).powi(2) + (b.y - y).powi(2);
            da.total_cmp(&db)
        })
        .unwrap();
    *best
}

fn nearest_front_vertex(template: &[Vec3], y: f64) -> u32 {
    (0..template.len())
        .filter(|&v| template[v].z > 0.0)
        .min_by(|&a, &b| {
            let da = template[a].x.powi(2) + (template[a].y - y).powi(2);
            let db = template[b].x.powi(2) + (template[b].y - y).powi(2);
            da.total_cmp(&db)
        })
        .unwrap() as u32
}

/// Class-I geodesic subdivision of the icosahedron (outward winding).
pub fn geodesic_sphere(frequency: usize) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let base: Vec<Vec3> = [
        [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
        [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
        [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Vec3::new(p[0], p[1], p[2]).normalize())
    .collect();
    let ico: [[usize; 3]; 20] = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    let n = frequency;
    let mut verts: Vec<Vec3> = Vec::new();
    let mut index: HashMap<(i64, i64, i64), u32> = HashMap::new();
    let mut id_of = |p: Vec3, verts: &mut Vec<Vec3>| -> u32 {
        let p = p.normalize();
        let key = ((p.x * 1e9).round() as i64, (p.y * 1e9).round() as i64, (p.z * 1e9).round() as i64);
        *index.entry(key).or_insert_with(|| {
            verts.push(p);
            (verts.len() - 1) as u32
        })
    };
    let mut faces = Vec::new();
    for f in &ico {
        let (a, b, c) = (base[f[0]], base[f[1]], base[f[2]]);
        let mut grid = vec![vec![0u32; n + 1]; n + 1];
        for i in 0..=n {
            for j in 0..=(n - i) {
                let k = n - i - j;
                let p = (a * k as f64 + b * i as f64 + c * j as f64) / n as f64;
                grid[i][j] = id_of(p, &mut verts);
            }
        }
        for i in 0..n {
            for j in 0..(n - i) {
                faces.push([grid[i][j], grid[i + 1][j], grid[i][j + 1]]);
                if i + j + 1 < n {
                    faces.push([grid[i + 1][j], grid[i + 1][j + 1], grid[i][j + 1]]);
                }
            }
        }
    }
    (verts, faces)
}

/// Deforms unit-sphere directions into a head-like closed shell.
fn sculpt_head(dirs: &[Vec3]) -> Vec<Vec3> {
    let nose = Vec3::new(0.0, -0.05, 1.0).normalize();
    let chin = Vec3::new(0.0, -0.75, 0.65).normalize();
    let occiput = Vec3::new(0.0, 0.5, -0.85).normalize();
    let pts: Vec<Vec3> = dirs
        .iter()
        .map(|d| {
            let base = Vec3::new(0.36 * d.x, 0.44 * d.y, 0.40 * d.z);
            let bump = 0.07 * wendland(angle(d, &nose) / 0.35)
                + 0.04 * wendland(angle(d, &chin) / 0.4)
                + 0.03 * wendland(angle(d, &occiput) / 0.6);
            base + d * bump
        })
        .collect();
    let (lo, hi) = crate::geomio::mesh::bbox_of(&pts);
    let center = (lo + hi) * 0.5;
    pts.into_iter().map(|p| p - center).collect()
}

/// Draws a plausible subject/expression configuration.
pub fn sample_params<R: Rng>(rng: &mut R, n_beta: usize, beta: Option<&[f64]>) -> HeadParams {
    let mut p = HeadParams::zeros(n_beta);
    match beta {
        Some(b) => p.beta.copy_from_slice(b),
        None => {
            for b in &mut p.beta {
                *b = StandardNormal.sample(rng);
            }
        }
    }
    for v in &mut p.psi {
        let g: f64 = StandardNormal.sample(rng);
        *v = 0.8 * g;
    }
    for k in 0..3 {
        p.theta[k] = rng.gen_range(-0.12..0.12);
        p.theta[3 + k] = rng.gen_range(-0.2..0.2);
    }
    p.theta[3 * JAW] = rng.gen_range(0.0..0.35);
    p.theta[3 * JAW + 1] = rng.gen_range(-0.03..0.03);
    p.theta[3 * JAW + 2] = rng.gen_range(-0.03..0.03);
    for k in 9..15 {
        p.theta[k] = rng.gen_range(-0.1..0.1);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> TemplateModel {
        TemplateModel::synthesize(&HeadModelConfig { frequency: 6, n_beta: 8, seed: 3 }).unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng, n_beta: usize) -> HeadParams {
        sample_params(rng, n_beta, None)
    }

    #[test]
    fn geodesic_sphere_is_closed() {
        for f in [2usize, 5, 8] {
            let (v, faces) = geodesic_sphere(f);
            assert_eq!(v.len(), 10 * f * f + 2);
            let m = Mesh::new(v, faces);
            assert!(m.is_watertight());
            assert_eq!(m.euler_characteristic(), 2);
        }
    }

    #[test]
    fn synthesized_model_satisfies_invariants() {
        let m = small_model();
        m.validate().unwrap();
        for w in &m.lbs_weights {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(w.iter().all(|&x| x >= 0.0));
        }
        let (lo, hi) = m.template_mesh().bbox();
        assert!(lo.iter().all(|&c| c >= -0.5) && hi.iter().all(|&c| c <= 0.5));
        let mesh = m.template_mesh();
        assert!(mesh.is_watertight());
        // eyes, jaw, global and neck all own some vertices
        for j in 0..NUM_JOINTS {
            assert!(m.lbs_weights.iter().any(|w| w[j] > 0.5), "joint {j} unused");
        }
        assert!(m.lbs_weights[m.lips.lower as usize][JAW] > 0.5);
        assert_eq!(m.lbs_weights[m.lips.upper as usize][JAW], 0.0);
    }

    #[test]
    fn joints_lie_inside_the_shell() {
        let m = small_model();
        let joints = m.joints(&vec![0.0; 8]).unwrap();
        let mesh = m.template_mesh();
        let labels = crate::geomio::label_occupancy(&mesh, &joints, crate::geomio::InsideTest::WindingNumber).unwrap();
        assert_eq!(labels, vec![1; NUM_JOINTS]);
    }

    #[test]
    fn zero_params_return_template() {
        let m = small_model();
        let p = HeadParams::zeros(8);
        assert_eq!(m.blend_shape(&p).unwrap(), m.template);
        for (a, b) in m.flame_forward(&p).unwrap().vertices.iter().zip(&m.template) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn first_shape_coefficient_adds_first_basis() {
        let m = small_model();
        let mut p = HeadParams::zeros(8);
        p.beta[0] = 1.0;
        let out = m.blend_shape(&p).unwrap();
        for v in 0..m.num_vertices() {
            for k in 0..3 {
                let want = m.template[v][k] + m.shape_basis[(v * 3 + k) * 8];
                assert_eq!(out[v][k], want);
            }
        }
    }

    #[test]
    fn blend_shape_matches_triple_loop_oracle() {
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let p = random_params(&mut rng, 8);
            let out = m.blend_shape(&p).unwrap();
            // independent oracle: explicit loops with rotation residuals built by hand
            let mut feats = vec![0.0; POSE_FEATURE_DIM];
            for j in 1..NUM_JOINTS {
                let r = p.joint_rotation(j);
                let th = r.norm();
                let k = r / th;
                let kx = Mat3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
                let rm = Mat3::identity() + kx * th.sin() + kx * kx * (1.0 - th.cos());
                for a in 0..3 {
                    for b in 0..3 {
                        feats[(j - 1) * 9 + a * 3 + b] = rm[(a, b)] - if a == b { 1.0 } else { 0.0 };
                    }
                }
            }
            for v in 0..m.num_vertices() {
                for k in 0..3 {
                    let mut acc = m.template[v][k];
                    for b in 0..8 {
                        acc += m.shape_basis[(v * 3 + k) * 8 + b] * p.beta[b];
                    }
                    for i in 0..POSE_FEATURE_DIM {
                        acc += m.pose_basis[(v * 3 + k) * POSE_FEATURE_DIM + i] * feats[i];
                    }
                    for e in 0..EXPR_DIM {
                        acc += m.expr_basis[(v * 3 + k) * EXPR_DIM + e] * p.psi[e];
                    }
                    assert!((acc - out[v][k]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn blend_shape_rejects_wrong_dims() {
        let m = small_model();
        let mut p = HeadParams::zeros(8);
        p.psi.pop();
        assert!(matches!(m.blend_shape(&p), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn lbs_identity_at_rest_and_rigid_for_one_hot() {
        let m = small_model();
        let joints = m.joints(&vec![0.0; 8]).unwrap();
        let pts: Vec<Vec3> = m.template.iter().take(50).copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let weights: Vec<[f64; 5]> = (0..50)
            .map(|_| {
                let mut w = [0.0; 5];
                for x in &mut w {
                    *x = rng.gen::<f64>();
                }
                let s: f64 = w.iter().sum();
                w.map(|x| x / s)
            })
            .collect();
        let out = lbs_deform(&pts, &weights, &joints, &[0.0; POSE_DIM]).unwrap();
        for (a, b) in out.iter().zip(&pts) {
            assert!((a - b).norm() < 1e-9);
        }
        let mut theta = [0.0; POSE_DIM];
        theta[0..3].copy_from_slice(&[0.2, -0.4, 0.1]);
        let hot = vec![[1.0, 0.0, 0.0, 0.0, 0.0]; 50];
        let out = lbs_deform(&pts, &hot, &joints, &theta).unwrap();
        let r = axis_angle_to_matrix(&Vec3::new(0.2, -0.4, 0.1));
        for (a, p) in out.iter().zip(&pts) {
            let want = r * (p - joints[0]) + joints[0];
            assert!((a - want).norm() < 1e-12);
        }
    }

    #[test]
    fn lbs_rejects_unnormalized_weights() {
        let joints = [Vec3::zeros(); 5];
        let err = lbs_deform(&[Vec3::zeros()], &[[0.5, 0.0, 0.0, 0.0, 0.0]], &joints, &[0.0; 15]).unwrap_err();
        assert!(matches!(err, Error::ContractViolation(_)));
    }

    #[test]
    fn lbs_matches_homogeneous_blend_oracle() {
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let p = random_params(&mut rng, 8);
            let joints = m.joints(&p.beta).unwrap();
            let pts = m.blend_shape(&p).unwrap();
            let out = lbs_deform(&pts, &m.lbs_weights, &joints, &p.theta).unwrap();
            // oracle: build each chain transform from scratch, transform the point by
            // every bone, then blend the transformed homogeneous points
            let mut g = vec![Mat4::identity(); 5];
            for k in 0..5 {
                let rot = axis_angle_to_matrix(&p.joint_rotation(k));
                let mut local = Mat4::identity();
                local.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
                let off = match JOINT_PARENTS[k] {
                    None => joints[k],
                    Some(par) => joints[k] - joints[par],
                };
                local[(0, 3)] = off.x;
                local[(1, 3)] = off.y;
                local[(2, 3)] = off.z;
                g[k] = match JOINT_PARENTS[k] {
                    None => local,
                    Some(par) => g[par] * local,
                };
            }
            for (v, x) in pts.iter().enumerate() {
                let mut acc = nalgebra::Vector4::zeros();
                for k in 0..5 {
                    let rel = x - joints[k];
                    let h = g[k] * nalgebra::Vector4::new(rel.x, rel.y, rel.z, 1.0);
                    acc += h * m.lbs_weights[v][k];
                }
                assert!((Vec3::new(acc.x, acc.y, acc.z) - out[v]).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn jaw_rotation_moves_only_jaw_region() {
        let m = small_model();
        let rest = m.flame_forward(&HeadParams::zeros(8)).unwrap();
        let posed = m.flame_forward(&HeadParams::with_jaw(8, 0.2)).unwrap();
        let mut moved = 0;
        for v in 0..m.num_vertices() {
            let d = (rest.vertices[v] - posed.vertices[v]).norm();
            let wj = m.lbs_weights[v][JAW];
            if wj > 0.5 {
                assert!(d > 1e-4);
                moved += 1;
            }
            if wj < 1e-3 {
                assert!(d < 1e-6, "vertex {v} moved {d}");
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn rescaled_shape_bases_give_identical_output() {
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_params(&mut rng, 8);
        let mut m2 = m.clone();
        for s in &mut m2.shape_basis {
            *s *= 2.0;
        }
        let mut p2 = p.clone();
        for b in &mut p2.beta {
            *b /= 2.0;
        }
        let a = m.flame_forward(&p).unwrap();
        let b = m2.flame_forward(&p2).unwrap();
        for (x, y) in a.vertices.iter().zip(&b.vertices) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn global_rotation_is_equivariant() {
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut p = random_params(&mut rng, 8);
        p.theta[0..3].copy_from_slice(&[0.0, 0.0, 0.0]);
        let base = m.flame_forward(&p).unwrap();
        let r = Vec3::new(0.3, -0.2, 0.5);
        p.theta[0..3].copy_from_slice(r.as_slice());
        let rotated = m.flame_forward(&p).unwrap();
        let j0 = m.joints(&p.beta).unwrap()[0];
        let rm = axis_angle_to_matrix(&r);
        for (a, b) in base.vertices.iter().zip(&rotated.vertices) {
            assert!((rm * (a - j0) + j0 - b).norm() < 1e-6);
        }
    }

    #[test]
    fn blend_shape_superposes_in_beta_and_psi() {
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_params(&mut rng, 8);
        let b = random_params(&mut rng, 8);
        let zero = m.blend_shape(&HeadParams::zeros(8)).unwrap();
        for pick in [0usize, 1] {
            let (mut pa, mut pb, mut pab) = (HeadParams::zeros(8), HeadParams::zeros(8), HeadParams::zeros(8));
            if pick == 0 {
                pa.beta = a.beta.clone();
                pb.beta = b.beta.clone();
                pab.beta = a.beta.iter().zip(&b.beta).map(|(x, y)| x + y).collect();
            } else {
                pa.psi = a.psi.clone();
                pb.psi = b.psi.clone();
                pab.psi = a.psi.iter().zip(&b.psi).map(|(x, y)| x + y).collect();
            }
            let (va, vb, vab) = (m.blend_shape(&pa).unwrap(), m.blend_shape(&pb).unwrap(), m.blend_shape(&pab).unwrap());
            for v in 0..m.num_vertices() {
                let lhs = vab[v] - zero[v];
                let rhs = (va[v] - zero[v]) + (vb[v] - zero[v]);
                assert!((lhs - rhs).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn component_lookup_at_vertices_and_edges() {
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_params(&mut rng, 8);
        let posed = m.flame_forward(&p).unwrap();
        let v = m.faces[10][0] as usize;
        let s = m.sample_components_at(&p, &[posed.vertices[v]]).unwrap();
        let want = m.vertex_bundle(v);
        assert_eq!(s[0].distance, 0.0);
        assert!(s[0].bundle.max_abs_diff(&want) < 1e-15);

        let [a, b, _] = m.faces[10];
        let mid = (posed.vertices[a as usize] + posed.vertices[b as usize]) * 0.5;
        let s = m.sample_components_at(&p, &[mid]).unwrap();
        let mut avg = m.vertex_bundle(a as usize);
        avg.scale(0.5);
        avg.add_scaled(&m.vertex_bundle(b as usize), 0.5);
        assert!(s[0].bundle.max_abs_diff(&avg) < 1e-9);
    }

    #[test]
    fn component_lookup_matches_brute_force_and_is_convex() {
        use crate::geomio::mesh::closest_point_on_triangle;
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = random_params(&mut rng, 8);
        let posed = m.flame_forward(&p).unwrap();
        let queries: Vec<Vec3> = (0..100)
            .map(|_| Vec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)))
            .collect();
        let got = m.sample_components_at(&p, &queries).unwrap();
        for (q, s) in queries.iter().zip(&got) {
            let mut best = (usize::MAX, f64::INFINITY, [0.0; 3]);
            for f in 0..posed.faces.len() {
                let [a, b, c] = posed.triangle(f);
                let (x, bary) = closest_point_on_triangle(q, &a, &b, &c);
                let d = (x - q).norm_squared();
                if d < best.1 {
                    best = (f, d, bary);
                }
            }
            assert_eq!(s.face, best.0);
            let want = m.interpolate_bundle(best.0, best.2);
            assert_eq!(s.bundle.max_abs_diff(&want), 0.0);
            assert!((s.bundle.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn synthetic_scan_is_deterministic_and_textured() {
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&mut rng, 8);
        let a = m.make_synthetic_scan(&p, 2, 99).unwrap();
        let b = m.make_synthetic_scan(&p, 2, 99).unwrap();
        assert_eq!(
            crate::geomio::io::ply_bytes(&a.mesh, crate::geomio::io::PlyFormat::BinaryLittleEndian),
            crate::geomio::io::ply_bytes(&b.mesh, crate::geomio::io::PlyFormat::BinaryLittleEndian)
        );
        assert_eq!(a, b);
        assert!(a.watertight);
        let c = m.make_synthetic_scan(&p, 2, 100).unwrap();
        assert_ne!(a.mesh.colors, c.mesh.colors);
        for col in a.colors() {
            assert!(col.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn asset_roundtrip_validates() {
        let m = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        assert_eq!(TemplateModel::load(&path).unwrap(), m);
        let mut bad = m.clone();
        bad.lbs_weights[0][0] += 0.1;
        bad.save(&path).unwrap();
        assert!(TemplateModel::load(&path).is_err());
    }
}
