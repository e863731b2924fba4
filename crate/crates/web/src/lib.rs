//! Static-page demo: the template head posed, blended between two identities and
//! remeshed through winding-number voxelization, rasterized to RGBA buffers.

use headfield::geomio::marching::{polygonize, Grid};
use headfield::geomio::winding::{label_occupancy, InsideTest};
use headfield::geomio::Mesh;
use headfield::headmodel::{HeadModelConfig, HeadParams, TemplateModel, EXPR_DIM, JAW, NECK};
use headfield::math::Vec3;
use headfield::render::{Camera, RenderOut};
use headfield::train::model::JOINT_PALETTE;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const VIEW_HALF: f64 = 0.6;

/// Slider state of the pose view.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoseInput {
    pub jaw: f64,
    pub neck_yaw: f64,
    /// Scale of the fixed expression direction.
    pub expression: f64,
    /// 0 gives identity A, 1 identity B.
    pub blend: f64,
    /// Rotation of the camera about the vertical axis.
    pub view_yaw: f64,
    /// Color by the dominant skinning joint instead of the albedo.
    pub weights: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RemeshStats {
    pub res: usize,
    pub vertices: usize,
    pub faces: usize,
    pub watertight: bool,
    /// Silhouette IoU between the remeshed and the original head.
    pub silhouette_iou: f64,
    pub mouth_gap: f64,
}

#[wasm_bindgen]
pub struct Demo {
    head: TemplateModel,
    beta_a: Vec<f64>,
    beta_b: Vec<f64>,
    expression: Vec<f64>,
    texture_seed: u64,
    size: usize,
}

#[wasm_bindgen]
impl Demo {
    /// Synthesizes the template and two identities from `seed`; images are `size`².
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize) -> Result<Demo, JsError> {
        if !(8..=1024).contains(&size) {
            return Err(JsError::new("size must be in 8..=1024"));
        }
        let cfg = HeadModelConfig { frequency: 8, n_beta: 20, seed: seed as u64 };
        let head = TemplateModel::synthesize(&cfg).map_err(js)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let mut draw = |n: usize, s: f64| (0..n).map(|_| s * rng.gen_range(-1.5..1.5)).collect::<Vec<f64>>();
        let beta_a = draw(cfg.n_beta, 1.0);
        let beta_b = draw(cfg.n_beta, 1.0);
        let expression = draw(EXPR_DIM, 0.5);
        Ok(Demo { head, beta_a, beta_b, expression, texture_seed: seed as u64, size })
    }

    /// RGBA pixels of the posed head.
    pub fn render_pose(&self, jaw: f64, neck_yaw: f64, expression: f64, blend: f64, view_yaw: f64, weights: bool) -> Result<Vec<u8>, JsError> {
        let input = PoseInput { jaw, neck_yaw, expression, blend, view_yaw, weights };
        let mesh = self.posed_mesh(&input).map_err(js)?;
        let colors = if weights { self.weight_colors() } else { self.albedo() };
        Ok(rgba(&self.render(&mesh, &colors, view_yaw).map_err(js)?))
    }

    /// RGBA pixels of the posed head remeshed at `res`; statistics via `remesh_stats`.
    pub fn render_remesh(&self, jaw: f64, neck_yaw: f64, expression: f64, blend: f64, view_yaw: f64, res: usize) -> Result<Vec<u8>, JsError> {
        let input = PoseInput { jaw, neck_yaw, expression, blend, view_yaw, weights: false };
        let (img, _) = self.remesh(&input, res).map_err(js)?;
        Ok(rgba(&img))
    }

    /// JSON statistics of the remeshing at `res`.
    pub fn remesh_stats(&self, jaw: f64, neck_yaw: f64, expression: f64, blend: f64, res: usize) -> Result<String, JsError> {
        let input = PoseInput { jaw, neck_yaw, expression, blend, view_yaw: 0.0, weights: false };
        let (_, stats) = self.remesh(&input, res).map_err(js)?;
        serde_json::to_string(&stats).map_err(|e| JsError::new(&e.to_string()))
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

fn js(e: headfield::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Packs an image as RGBA8.
pub fn rgba(img: &RenderOut) -> Vec<u8> {
    let to8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    img.rgb.iter().flat_map(|c| [to8(c.x), to8(c.y), to8(c.z), 255]).collect()
}

impl Demo {
    pub fn params(&self, input: &PoseInput) -> HeadParams {
        let t = input.blend.clamp(0.0, 1.0);
        let mut p = HeadParams::zeros(self.head.n_beta);
        for (k, b) in p.beta.iter_mut().enumerate() {
            *b = (1.0 - t) * self.beta_a[k] + t * self.beta_b[k];
        }
        p.theta[3 * JAW] = input.jaw;
        p.theta[3 * NECK + 1] = input.neck_yaw;
        for (k, v) in p.psi.iter_mut().enumerate() {
            *v = input.expression * self.expression[k];
        }
        p
    }

    pub fn posed_mesh(&self, input: &PoseInput) -> headfield::Result<Mesh> {
        Ok(self.head.flame_forward(&self.params(input))?.with_vertex_normals())
    }

    pub fn albedo(&self) -> Vec<Vec3> {
        (0..self.head.num_vertices()).map(|v| self.head.vertex_color(v, self.texture_seed)).collect()
    }

    pub fn weight_colors(&self) -> Vec<Vec3> {
        self.head
            .lbs_weights
            .iter()
            .map(|w| Vec3::from(JOINT_PALETTE[headfield::train::model::argmax(w)]))
            .collect()
    }

    pub fn camera(&self, view_yaw: f64) -> Camera {
        let dir = Vec3::new(view_yaw.sin(), 0.0, view_yaw.cos());
        Camera::orthographic(dir, Vec3::y(), 2.0, VIEW_HALF, self.size).expect("horizontal view")
    }

    pub fn render(&self, mesh: &Mesh, colors: &[Vec3], view_yaw: f64) -> headfield::Result<RenderOut> {
        let normals = mesh.normals.clone().unwrap_or_else(|| mesh.compute_vertex_normals());
        headfield::render::render_mesh(mesh, colors, &normals, None, &self.camera(view_yaw))
    }

    /// Voxelizes the posed head by winding number on a `res`³ grid and re-extracts it.
    pub fn remesh(&self, input: &PoseInput, res: usize) -> headfield::Result<(RenderOut, RemeshStats)> {
        if !(4..=96).contains(&res) {
            return Err(headfield::Error::invalid("remesh resolution must be in 4..=96"));
        }
        let posed = self.posed_mesh(input)?;
        let grid = Grid::cube(VIEW_HALF, res);
        let labels = label_occupancy(&posed, &grid.nodes(), InsideTest::WindingNumber)?;
        let values: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let remeshed = polygonize(&values, &grid).with_vertex_normals();
        let grey = vec![Vec3::repeat(0.75); remeshed.vertices.len()];
        let original = self.render(&posed, &self.albedo(), input.view_yaw)?;
        let img = if remeshed.is_empty() {
            RenderOut::background(self.size, self.size)
        } else {
            self.render(&remeshed, &grey, input.view_yaw)?
        };
        let lips = &self.head.lips;
        let stats = RemeshStats {
            res,
            vertices: remeshed.vertices.len(),
            faces: remeshed.faces.len(),
            watertight: remeshed.is_watertight(),
            silhouette_iou: img.mask_iou(&original),
            mouth_gap: (posed.vertices[lips.upper as usize] - posed.vertices[lips.lower as usize]).norm(),
        };
        Ok((img, stats))
    }
}
