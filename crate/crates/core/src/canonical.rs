//! Canonical-space fields: occupancy G, detail normal N and texture T, conditioned on latent codes.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::headmodel::{EXPR_DIM, POSE_DIM};
use crate::math::Vec3;
use crate::neuralnet::{sigmoid, Activation, Adam, FeatureGrid, FeatureVolume, FeatureVolumeConfig, Mlp, MlpConfig, Stencil, Tape};

/// Pose entries seen by the texture network (global rotation excluded).
pub const TEX_POSE_DIM: usize = POSE_DIM - 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalConfig {
    pub n_shape: usize,
    pub n_detail: usize,
    pub n_color: usize,
    pub n_feature: usize,
    pub volume_resolution: usize,
    pub volume_channels: usize,
    pub volume_extent: f64,
    pub volume_hidden: usize,
    pub geometry_hidden: Vec<usize>,
    pub normal_hidden: Vec<usize>,
    pub texture_hidden: Vec<usize>,
    /// Semi-axes of the initial occupancy ellipsoid.
    pub init_axes: [f64; 3],
    /// Logit slope of the initial occupancy.
    pub init_sharpness: f64,
    /// Fixed gain applied to the geometry net output to form the logit.
    pub logit_scale: f64,
    /// Adam steps regressing the initial logit onto the ellipsoid.
    pub init_fit_steps: usize,
    /// When false the texture net sees zero pose.
    pub texture_pose: bool,
}

impl Default for CanonicalConfig {
    fn default() -> Self {
        CanonicalConfig {
            n_shape: 64,
            n_detail: 64,
            n_color: 64,
            n_feature: 32,
            volume_resolution: 8,
            volume_channels: 32,
            volume_extent: 0.7,
            volume_hidden: 64,
            geometry_hidden: vec![128, 128],
            normal_hidden: vec![128],
            texture_hidden: vec![128, 128],
            init_axes: [0.36, 0.44, 0.40],
            init_sharpness: 40.0,
            logit_scale: 8.0,
            init_fit_steps: 300,
            texture_pose: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTriplet {
    pub z_shape: Vec<f64>,
    pub z_detail: Vec<f64>,
    pub z_color: Vec<f64>,
    pub subject_id: Option<usize>,
}

impl LatentTriplet {
    pub fn zeros(cfg: &CanonicalConfig) -> Self {
        LatentTriplet {
            z_shape: vec![0.0; cfg.n_shape],
            z_detail: vec![0.0; cfg.n_detail],
            z_color: vec![0.0; cfg.n_color],
            subject_id: None,
        }
    }

    pub fn random<R: Rng>(cfg: &CanonicalConfig, std: f64, rng: &mut R) -> Self {
        let n = Normal::new(0.0, std).expect("finite std");
        LatentTriplet {
            z_shape: (0..cfg.n_shape).map(|_| n.sample(rng)).collect(),
            z_detail: (0..cfg.n_detail).map(|_| n.sample(rng)).collect(),
            z_color: (0..cfg.n_color).map(|_| n.sample(rng)).collect(),
            subject_id: None,
        }
    }

    pub fn validate(&self, cfg: &CanonicalConfig) -> Result<()> {
        ensure_dim("z_shape", self.z_shape.len(), cfg.n_shape)?;
        ensure_dim("z_detail", self.z_detail.len(), cfg.n_detail)?;
        ensure_dim("z_color", self.z_color.len(), cfg.n_color)?;
        if !self.flat().iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("latent codes must be finite"));
        }
        Ok(())
    }

    /// Concatenated `[z_shape, z_detail, z_color]`.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.z_shape.clone();
        v.extend_from_slice(&self.z_detail);
        v.extend_from_slice(&self.z_color);
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let (a, b) = (self.z_shape.len(), self.z_detail.len());
        self.z_shape.copy_from_slice(&v[..a]);
        self.z_detail.copy_from_slice(&v[a..a + b]);
        self.z_color.copy_from_slice(&v[a + b..]);
    }

    /// Squared norms `(‖z_shape‖², ‖z_detail‖², ‖z_color‖²)`.
    pub fn energies(&self) -> (f64, f64, f64) {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        (sq(&self.z_shape), sq(&self.z_detail), sq(&self.z_color))
    }
}

/// Componentwise linear interpolation of two triplets.
pub fn interpolate_latents(a: &LatentTriplet, b: &LatentTriplet, t: f64) -> Result<LatentTriplet> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("interpolation parameter {t} outside [0, 1]")));
    }
    ensure_dim("z_shape", b.z_shape.len(), a.z_shape.len())?;
    ensure_dim("z_detail", b.z_detail.len(), a.z_detail.len())?;
    ensure_dim("z_color", b.z_color.len(), a.z_color.len())?;
    let lerp = |x: &[f64], y: &[f64]| -> Vec<f64> {
        if t == 0.0 {
            x.to_vec()
        } else if t == 1.0 {
            y.to_vec()
        } else {
            x.iter().zip(y).map(|(p, q)| p + t * (q - p)).collect()
        }
    };
    Ok(LatentTriplet {
        z_shape: lerp(&a.z_shape, &b.z_shape),
        z_detail: lerp(&a.z_detail, &b.z_detail),
        z_color: lerp(&a.z_color, &b.z_color),
        subject_id: if t == 0.0 {
            a.subject_id
        } else if t == 1.0 {
            b.subject_id
        } else {
            None
        },
    })
}

/// Per-subject learnable codes of the auto-decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTable {
    pub entries: Vec<LatentTriplet>,
    /// Set once the table has been optimized.
    pub trained: bool,
}

impl LatentTable {
    pub fn new<R: Rng>(cfg: &CanonicalConfig, subjects: usize, std: f64, rng: &mut R) -> Self {
        LatentTable {
            entries: (0..subjects)
                .map(|s| {
                    let mut t = LatentTriplet::random(cfg, std, rng);
                    t.subject_id = Some(s);
                    t
                })
                .collect(),
            trained: false,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn require_trained(&self) -> Result<()> {
        if !self.trained || self.entries.is_empty() {
            return Err(Error::Unavailable("latent table has not been trained".into()));
        }
        Ok(())
    }

    /// Mean triplet of the table.
    pub fn mean(&self) -> Result<LatentTriplet> {
        if self.entries.is_empty() {
            return Err(Error::Unavailable("latent table is empty".into()));
        }
        let n = self.entries.len() as f64;
        let base = self.entries[0].flat();
        // offsets from the first entry keep a constant column exact
        let mut acc = vec![0.0; base.len()];
        for e in &self.entries[1..] {
            for ((a, v), b) in acc.iter_mut().zip(e.flat()).zip(&base) {
                *a += v - b;
            }
        }
        let flat: Vec<f64> = base.iter().zip(&acc).map(|(b, a)| b + a / n).collect();
        let mut m = self.entries[0].clone();
        m.set_flat(&flat);
        m.subject_id = None;
        Ok(m)
    }

    /// Per-dimension mean and standard deviation of the flattened codes.
    pub fn statistics(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mean = self.mean()?.flat();
        let n = self.entries.len() as f64;
        let mut var = vec![0.0; mean.len()];
        for e in &self.entries {
            for ((v, x), m) in var.iter_mut().zip(e.flat()).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        Ok((mean, var.into_iter().map(|v| (v / n).sqrt()).collect()))
    }

    /// Draws from a diagonal Gaussian fit to the table.
    pub fn sample_latents<R: Rng>(&self, rng: &mut R) -> Result<LatentTriplet> {
        self.require_trained()?;
        let (mean, std) = self.statistics()?;
        let mut t = self.entries[0].clone();
        let flat: Vec<f64> = mean
            .iter()
            .zip(&std)
            .map(|(m, s)| {
                let g: f64 = StandardNormal.sample(rng);
                m + s * g
            })
            .collect();
        t.set_flat(&flat);
        t.subject_id = None;
        Ok(t)
    }
}

/// Geometry conditioning derived from a shape code.
#[derive(Clone, Debug)]
pub struct ShapeContext {
    pub grid: FeatureGrid,
    pub tape: Option<Tape>,
}

/// Recorded geometry evaluation at one point.
#[derive(Clone, Debug)]
pub struct GeometryTape {
    pub x: Vec3,
    stencil: Stencil,
    tape: Tape,
    scale: f64,
}

impl GeometryTape {
    pub fn logit(&self) -> f64 {
        self.scale * self.tape.output()[0]
    }

    pub fn occupancy(&self) -> f64 {
        sigmoid(self.logit())
    }

    pub fn f_s(&self) -> &[f64] {
        self.tape.penultimate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalSample {
    pub occ: f64,
    pub f_s: Vec<f64>,
    pub normal: Vec3,
    pub f_n: Vec<f64>,
    pub color: Vec3,
}

/// Gradient buffers for the canonical networks.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalGrads {
    pub volume: Vec<f64>,
    pub geometry: Vec<f64>,
    pub normal: Vec<f64>,
    pub texture: Vec<f64>,
}

impl CanonicalGrads {
    pub fn add(&mut self, other: &CanonicalGrads) {
        for (a, b) in [
            (&mut self.volume, &other.volume),
            (&mut self.geometry, &other.geometry),
            (&mut self.normal, &other.normal),
            (&mut self.texture, &other.texture),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalModel {
    pub config: CanonicalConfig,
    pub volume: FeatureVolume,
    pub geometry: Mlp,
    pub normal: Mlp,
    pub texture: Mlp,
}

pub fn texture_pose(theta: &[f64], enabled: bool) -> [f64; TEX_POSE_DIM] {
    let mut p = [0.0; TEX_POSE_DIM];
    if enabled {
        p.copy_from_slice(&theta[3..POSE_DIM]);
    }
    p
}

impl CanonicalModel {
    pub fn new<R: Rng>(config: CanonicalConfig, rng: &mut R) -> Result<Self> {
        if !(config.logit_scale.is_finite() && config.logit_scale > 0.0) {
            return Err(Error::invalid("logit_scale must be positive"));
        }
        let nf = config.n_feature;
        let volume = FeatureVolume::new(
            FeatureVolumeConfig {
                latent_dim: config.n_shape,
                resolution: config.volume_resolution,
                channels: config.volume_channels,
                extent: config.volume_extent,
                hidden: config.volume_hidden,
            },
            rng,
        )?;

        let mut gh = config.geometry_hidden.clone();
        gh.push(nf);
        let geometry = geometric_init(
            MlpConfig::new(3 + config.volume_channels, &gh, 1),
            config.init_axes,
            config.init_sharpness / config.logit_scale,
            config.init_fit_steps,
            rng,
        )?;

        let mut nh = config.normal_hidden.clone();
        nh.push(nf);
        let normal = Mlp::new(MlpConfig::new(3 + config.n_detail + nf, &nh, 3), rng)?;

        let t_in = 3 + config.n_color + 2 * nf + TEX_POSE_DIM + EXPR_DIM;
        let texture = Mlp::new(MlpConfig::new(t_in, &config.texture_hidden, 3), rng)?;
        Ok(CanonicalModel {
            config,
            volume,
            geometry,
            normal,
            texture,
        })
    }

    pub fn rebuild(&mut self) -> Result<()> {
        self.volume.generator.rebuild()?;
        self.geometry.rebuild()?;
        self.normal.rebuild()?;
        self.texture.rebuild()
    }

    pub fn zero_grads(&self) -> CanonicalGrads {
        CanonicalGrads {
            volume: vec![0.0; self.volume.generator.parameter_count()],
            geometry: vec![0.0; self.geometry.parameter_count()],
            normal: vec![0.0; self.normal.parameter_count()],
            texture: vec![0.0; self.texture.parameter_count()],
        }
    }

    pub fn shape_context(&self, z_shape: &[f64]) -> Result<ShapeContext> {
        Ok(ShapeContext {
            grid: self.volume.generate(z_shape)?,
            tape: None,
        })
    }

    pub fn shape_context_tape(&self, z_shape: &[f64]) -> Result<ShapeContext> {
        let (grid, tape) = self.volume.generate_tape(z_shape)?;
        Ok(ShapeContext { grid, tape: Some(tape) })
    }

    /// Backpropagates accumulated grid gradients; returns `dL/dz_shape`.
    pub fn shape_backward(&self, ctx: &ShapeContext, grid_grad: &[f64], grads: Option<&mut CanonicalGrads>) -> Result<Vec<f64>> {
        let tape = ctx
            .tape
            .as_ref()
            .ok_or_else(|| Error::contract("shape context was built without a tape"))?;
        self.volume.backward(tape, grid_grad, grads.map(|g| g.volume.as_mut_slice()))
    }

    fn geometry_input(&self, x: &Vec3, ctx: &ShapeContext) -> (Stencil, Vec<f64>) {
        let st = ctx.grid.stencil(x);
        let mut input = Vec::with_capacity(3 + ctx.grid.channels);
        input.extend_from_slice(x.as_slice());
        input.extend(ctx.grid.sample_stencil(&st));
        (st, input)
    }

    /// Occupancy logit at `x`.
    pub fn logit(&self, x: &Vec3, ctx: &ShapeContext) -> f64 {
        let (_, input) = self.geometry_input(x, ctx);
        self.config.logit_scale * self.geometry.eval(&input)[0]
    }

    pub fn occupancy(&self, x: &Vec3, ctx: &ShapeContext) -> f64 {
        sigmoid(self.logit(x, ctx))
    }

    /// `(occ, f_s)`.
    pub fn geometry_eval(&self, x: &Vec3, ctx: &ShapeContext) -> (f64, Vec<f64>) {
        let t = self.geometry_tape(x, ctx);
        (t.occupancy(), t.f_s().to_vec())
    }

    pub fn geometry_tape(&self, x: &Vec3, ctx: &ShapeContext) -> GeometryTape {
        let (stencil, input) = self.geometry_input(x, ctx);
        GeometryTape {
            x: *x,
            stencil,
            tape: self.geometry.record(&input),
            scale: self.config.logit_scale,
        }
    }

    /// Reverse pass of the geometry net; returns `dL/dx`.
    pub fn geometry_backward(
        &self,
        ctx: &ShapeContext,
        gt: &GeometryTape,
        d_logit: f64,
        d_fs: Option<&[f64]>,
        grad: Option<&mut [f64]>,
        grid_grad: Option<&mut [f64]>,
    ) -> Result<Vec3> {
        let d_in = self.geometry.backward(&gt.tape, &[d_logit * gt.scale], d_fs, grad)?;
        let d_feat = &d_in[3..];
        if let Some(gg) = grid_grad {
            ctx.grid.accumulate(&gt.stencil, d_feat, gg);
        }
        Ok(Vec3::new(d_in[0], d_in[1], d_in[2]) + ctx.grid.grad_x(&gt.stencil, d_feat))
    }

    /// `∂ logit / ∂ x`.
    pub fn logit_gradient(&self, x: &Vec3, ctx: &ShapeContext) -> Vec3 {
        let gt = self.geometry_tape(x, ctx);
        self.geometry_backward(ctx, &gt, 1.0, None, None, None)
            .expect("fresh tape")
    }

    fn normal_input(&self, x: &Vec3, z_detail: &[f64], f_s: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.normal.input_dim());
        v.extend_from_slice(x.as_slice());
        v.extend_from_slice(z_detail);
        v.extend_from_slice(f_s);
        v
    }

    /// Unit normal, `f_n` and whether the occupancy-gradient fallback was used.
    pub fn detail_normal(&self, x: &Vec3, z_detail: &[f64], f_s: &[f64], ctx: &ShapeContext) -> (Vec3, Vec<f64>, bool) {
        let tape = self.normal.record(&self.normal_input(x, z_detail, f_s));
        let raw = Vec3::new(tape.output()[0], tape.output()[1], tape.output()[2]);
        let f_n = tape.penultimate().to_vec();
        let n = raw.norm();
        if n > 1e-12 && n.is_finite() {
            (raw / n, f_n, false)
        } else {
            let g = -self.logit_gradient(x, ctx);
            let gn = g.norm();
            let dir = if gn > 0.0 { g / gn } else { Vec3::z() };
            (dir, f_n, true)
        }
    }

    pub fn normal_tape(&self, x: &Vec3, z_detail: &[f64], f_s: &[f64]) -> Tape {
        self.normal.record(&self.normal_input(x, z_detail, f_s))
    }

    pub fn texture_input(&self, x: &Vec3, z_color: &[f64], f_s: &[f64], f_n: &[f64], theta: &[f64], psi: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.texture.input_dim());
        v.extend_from_slice(x.as_slice());
        v.extend_from_slice(z_color);
        v.extend_from_slice(f_s);
        v.extend_from_slice(f_n);
        v.extend_from_slice(&texture_pose(theta, self.config.texture_pose));
        v.extend_from_slice(psi);
        v
    }

    pub fn texture_color(&self, x: &Vec3, z_color: &[f64], f_s: &[f64], f_n: &[f64], theta: &[f64], psi: &[f64]) -> Vec3 {
        let o = self.texture.eval(&self.texture_input(x, z_color, f_s, f_n, theta, psi));
        Vec3::new(sigmoid(o[0]), sigmoid(o[1]), sigmoid(o[2]))
    }

    /// Full canonical evaluation at `x`.
    pub fn evaluate(&self, x: &Vec3, latents: &LatentTriplet, ctx: &ShapeContext, theta: &[f64], psi: &[f64]) -> CanonicalSample {
        let (occ, f_s) = self.geometry_eval(x, ctx);
        let (normal, f_n, _) = self.detail_normal(x, &latents.z_detail, &f_s, ctx);
        let color = self.texture_color(x, &latents.z_color, &f_s, &f_n, theta, psi);
        CanonicalSample {
            occ,
            f_s,
            normal,
            f_n,
            color,
        }
    }
}

/// Regresses the logit onto `sharpness * (1 - |x / axes|)` with a short Adam run.
fn fit_ellipsoid<R: Rng>(net: &mut Mlp, axes: [f64; 3], sharpness: f64, steps: usize, rng: &mut R) -> Result<()> {
    let in_dim = net.input_dim();
    let target = |p: &Vec3| sharpness * (1.0 - Vec3::new(p.x / axes[0], p.y / axes[1], p.z / axes[2]).norm());
    let mut adam = Adam::new(net.parameter_count(), 3e-3);
    let batch = 128;
    let mut input = vec![0.0; in_dim];
    for _ in 0..steps {
        let mut grad = vec![0.0; net.parameter_count()];
        for b in 0..batch {
            let p = if b % 2 == 0 {
                let d: Vec3 = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let d = d / d.norm().max(1e-9);
                let r = rng.gen_range(0.6..1.4);
                Vec3::new(d.x * axes[0], d.y * axes[1], d.z * axes[2]) * r
            } else {
                Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            };
            input[..3].copy_from_slice(p.as_slice());
            let tape = net.record(&input);
            let err = tape.output()[0] - target(&p);
            net.backward(&tape, &[2.0 * err / batch as f64], None, Some(&mut grad))?;
        }
        // feature inputs stay disconnected at initialization
        let (w0, _) = net.layer_offsets(0);
        for o in 0..net.config().layer_out(0) {
            for i in 3..in_dim {
                grad[w0 + o * in_dim + i] = 0.0;
            }
        }
        let mut params = net.params().to_vec();
        adam.update(&mut params, &grad)?;
        net.params_mut().copy_from_slice(&params);
    }
    Ok(())
}

/// Geometric initialization: the 0.5 level set starts near an ellipsoid with the
/// given semi-axes and feature inputs start disconnected.
pub fn geometric_init<R: Rng>(
    mut cfg: MlpConfig,
    axes: [f64; 3],
    sharpness: f64,
    fit_steps: usize,
    rng: &mut R,
) -> Result<Mlp> {
    cfg.activation = Activation::SOFTPLUS;
    cfg.output_activation = Activation::None;
    cfg.skip = None;
    let mut net = Mlp::zeros(cfg)?;
    let n_layers = net.num_layers();
    for l in 0..n_layers {
        let (n_in, n_out) = (net.config().layer_in(l), net.config().layer_out(l));
        if l + 1 < n_layers {
            let std = 2f64.sqrt() / (n_out as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let w = net.layer_weights_mut(l);
            for o in 0..n_out {
                for i in 0..n_in {
                    w[o * n_in + i] = if l == 0 {
                        if i < 3 {
                            normal.sample(rng) / axes[i]
                        } else {
                            0.0
                        }
                    } else {
                        normal.sample(rng)
                    };
                }
            }
        } else {
            let mean = std::f64::consts::PI.sqrt() / (n_in as f64).sqrt();
            let normal = Normal::new(mean, 1e-4).expect("finite std");
            let w = net.layer_weights_mut(l);
            for x in w.iter_mut() {
                *x = -sharpness * normal.sample(rng);
            }
        }
    }
    fit_ellipsoid(&mut net, axes, sharpness, fit_steps, rng)?;
    Ok(net)
}
