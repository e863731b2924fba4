//! The trainable head-field model: canonical fields, deformation and latent table.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::canonical::{CanonicalConfig, CanonicalModel, LatentTable, LatentTriplet, ShapeContext};
use crate::deform::{DeformConfig, DeformNet, PoseContext};
use crate::error::{Error, Result};
use crate::geomio::marching::{marching_cubes, Grid};
use crate::geomio::Mesh;
use crate::headmodel::{HeadParams, TemplateModel, EXPR_DIM, NUM_JOINTS};
use crate::math::Vec3;

/// Half-size of the cube in which meshes are extracted.
pub const EXTRACT_HALF: f64 = 0.6;

/// Palette for argmax-joint coloring: global, neck, jaw, left eye, right eye.
pub const JOINT_PALETTE: [[f64; 3]; NUM_JOINTS] = [
    [0.55, 0.55, 0.55],
    [0.2, 0.45, 0.85],
    [0.9, 0.3, 0.2],
    [0.2, 0.75, 0.3],
    [0.95, 0.8, 0.15],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub canonical: CanonicalConfig,
    pub deform: DeformConfig,
    /// Standard deviation of the initial latent codes.
    pub latent_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            canonical: CanonicalConfig {
                geometry_hidden: vec![128, 128],
                normal_hidden: vec![64],
                texture_hidden: vec![64, 64],
                ..Default::default()
            },
            deform: DeformConfig {
                n_beta: 8,
                shape_hidden: vec![32, 32],
                bases_hidden: vec![128, 128, 128],
                ..Default::default()
            },
            latent_std: 0.01,
        }
    }
}

/// How deformed-space meshes are extracted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extraction {
    /// Extract in canonical space and push vertices through the forward deformation.
    #[default]
    Forward,
    /// Marching cubes over the deformed occupancy (one correspondence search per node).
    Implicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadFieldModel {
    pub config: ModelConfig,
    pub canonical: CanonicalModel,
    pub deform: DeformNet,
    pub latents: LatentTable,
    pub head: TemplateModel,
}

impl HeadFieldModel {
    pub fn new<R: Rng>(config: ModelConfig, head: TemplateModel, subjects: usize, rng: &mut R) -> Result<Self> {
        if config.deform.n_beta != head.n_beta {
            return Err(Error::invalid(format!(
                "deformation expects {} shape coefficients, head model has {}",
                config.deform.n_beta, head.n_beta
            )));
        }
        let canonical = CanonicalModel::new(config.canonical.clone(), rng)?;
        let deform = DeformNet::new(config.deform.clone(), rng)?;
        let latents = LatentTable::new(&config.canonical, subjects, config.latent_std, rng);
        Ok(HeadFieldModel {
            config,
            canonical,
            deform,
            latents,
            head,
        })
    }

    pub fn rebuild(&mut self) -> Result<()> {
        self.canonical.rebuild()?;
        self.deform.rebuild()
    }

    pub fn latent(&self, subject: usize) -> Result<&LatentTriplet> {
        self.latents
            .entries
            .get(subject)
            .ok_or_else(|| Error::invalid(format!("no latent code for subject {subject}")))
    }

    pub fn pose_context(&self, params: &HeadParams) -> Result<PoseContext<'_>> {
        self.deform.pose_context(&self.head, params)
    }

    /// Canonical parameters of a subject: canonical pose, neutral expression.
    pub fn canonical_params(&self, beta: &[f64]) -> HeadParams {
        HeadParams {
            beta: beta.to_vec(),
            theta: self.config.deform.canonical_theta.clone(),
            psi: vec![0.0; EXPR_DIM],
        }
    }

    pub fn canonical_occupancy(&self, shape: &ShapeContext, points: &[Vec3]) -> Vec<f64> {
        crate::par::map(points, |x| self.canonical.occupancy(x, shape))
    }

    /// Occupancy at `points` in the deformed space of `params`.
    pub fn deformed_occupancy(&self, shape: &ShapeContext, ctx: &PoseContext, points: &[Vec3]) -> Vec<f64> {
        crate::par::map(points, |x| {
            let occ = |c: &Vec3| self.canonical.occupancy(c, shape);
            match self.deform.canonical_correspondence(x, ctx, Some(&occ)).x_c {
                Some(c) => occ(&c),
                None => 0.0,
            }
        })
    }

    /// Canonical surface mesh (no attributes).
    pub fn canonical_geometry(&self, latents: &LatentTriplet, res: usize) -> Result<Mesh> {
        let shape = self.canonical.shape_context(&latents.z_shape)?;
        let grid = Grid::cube(EXTRACT_HALF, res);
        marching_cubes(|pts| self.canonical_occupancy(&shape, pts), &grid)
    }

    /// Colors and canonical normals at canonical points under `(θ, ψ)`.
    pub fn shade_canonical(&self, latents: &LatentTriplet, points: &[Vec3], theta: &[f64], psi: &[f64]) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
        let shape = self.canonical.shape_context(&latents.z_shape)?;
        let s = crate::par::map(points, |x| {
            let e = self.canonical.evaluate(x, latents, &shape, theta, psi);
            (e.color, e.normal)
        });
        Ok(s.into_iter().unzip())
    }

    /// Canonical mesh colored at the canonical pose.
    pub fn canonical_mesh(&self, latents: &LatentTriplet, res: usize) -> Result<Mesh> {
        let mut mesh = self.canonical_geometry(latents, res)?;
        let theta = self.config.deform.canonical_theta.clone();
        let (colors, _) = self.shade_canonical(latents, &mesh.vertices, &theta, &[0.0; EXPR_DIM])?;
        mesh.colors = Some(colors);
        Ok(mesh.with_vertex_normals())
    }

    /// Mesh of the avatar deformed to `params` (shape coefficients included).
    pub fn deformed_mesh(&self, latents: &LatentTriplet, params: &HeadParams, res: usize, how: Extraction) -> Result<Mesh> {
        let ctx = self.pose_context(params)?;
        match how {
            Extraction::Forward => {
                let canon = self.canonical_geometry(latents, res)?;
                let (colors, _) = self.shade_canonical(latents, &canon.vertices, &params.theta, &params.psi)?;
                let mut mesh = Mesh::new(self.deform.deform_points(&canon.vertices, &ctx), canon.faces);
                mesh.colors = Some(colors);
                Ok(mesh.with_vertex_normals())
            }
            Extraction::Implicit => {
                let shape = self.canonical.shape_context(&latents.z_shape)?;
                let grid = Grid::cube(EXTRACT_HALF, res);
                let mut mesh = marching_cubes(|pts| self.deformed_occupancy(&shape, &ctx, pts), &grid)?;
                let colors = crate::par::map(&mesh.vertices, |x| {
                    self.deform
                        .deformed_field_eval(&self.canonical, latents, &shape, &ctx, x)
                        .sample
                        .color
                });
                mesh.colors = Some(colors);
                Ok(mesh.with_vertex_normals())
            }
        }
    }

    /// Per-vertex colors from the argmax learned skinning weight.
    pub fn weight_colors(&self, canonical_points: &[Vec3], beta: &[f64]) -> Vec<Vec3> {
        crate::par::map(canonical_points, |x| {
            let w = self.deform.continuous_bases(x, beta).weights;
            let k = argmax(&w);
            Vec3::from(JOINT_PALETTE[k])
        })
    }
}

pub fn argmax(w: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in w.iter().enumerate() {
        if *v > w[best] {
            best = i;
        }
    }
    best
}
