//! Learned deformation: shape removal D, continuous bases C, forward skinning and
//! canonical-correspondence search.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::canonical::{CanonicalModel, CanonicalSample, LatentTriplet, ShapeContext};
use crate::error::{ensure_dim, Error, Result};
use crate::headmodel::{
    joint_transforms, pose_features, ComponentLookup, HeadParams, TemplateModel, EXPR_DIM, JAW, NUM_JOINTS, POSE_DIM,
    POSE_FEATURE_DIM,
};
use crate::math::{linear_part, rigid_inverse, transform_point, Mat3, Mat4, Vec3};
use crate::neuralnet::{Mlp, MlpConfig, Tape};

pub const BUNDLE_DIM: usize = 3 * EXPR_DIM + 3 * POSE_FEATURE_DIM + NUM_JOINTS;
const EXPR_OFF: usize = 0;
const POSE_OFF: usize = 3 * EXPR_DIM;
const W_OFF: usize = 3 * EXPR_DIM + 3 * POSE_FEATURE_DIM;

/// Per-point expression bases `E` (3×50), pose correctives `P` (36×3) and skinning weights `W`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformBundle {
    /// Row-major 3×50: `expr[k * 50 + j]`.
    pub expr: Vec<f64>,
    /// Row-major 36×3: `pose[i * 3 + k]`.
    pub pose: Vec<f64>,
    pub weights: [f64; NUM_JOINTS],
}

impl DeformBundle {
    pub fn zeros() -> Self {
        DeformBundle {
            expr: vec![0.0; 3 * EXPR_DIM],
            pose: vec![0.0; 3 * POSE_FEATURE_DIM],
            weights: [0.0; NUM_JOINTS],
        }
    }

    pub fn add_scaled(&mut self, other: &DeformBundle, s: f64) {
        for (a, b) in self.expr.iter_mut().zip(&other.expr) {
            *a += s * b;
        }
        for (a, b) in self.pose.iter_mut().zip(&other.pose) {
            *a += s * b;
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.expr.iter_mut().chain(self.pose.iter_mut()).chain(self.weights.iter_mut()).for_each(|x| *x *= s);
    }

    pub fn max_abs_diff(&self, other: &DeformBundle) -> f64 {
        self.flat().iter().zip(other.flat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// `[E | P | W]` concatenated.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(BUNDLE_DIM);
        v.extend_from_slice(&self.expr);
        v.extend_from_slice(&self.pose);
        v.extend_from_slice(&self.weights);
        v
    }

    /// `B_E(ψ) + B_P(r)` for pose features `r` and expression `psi`.
    pub fn offset(&self, pose_feat: &[f64], psi: &[f64]) -> Vec3 {
        let mut o = Vec3::zeros();
        for k in 0..3 {
            let row = &self.expr[k * EXPR_DIM..(k + 1) * EXPR_DIM];
            o[k] = row.iter().zip(psi).map(|(a, b)| a * b).sum::<f64>();
        }
        for (i, r) in pose_feat.iter().enumerate() {
            if *r != 0.0 {
                for k in 0..3 {
                    o[k] += self.pose[i * 3 + k] * r;
                }
            }
        }
        o
    }

    /// Squared distances `(‖E−E'‖², ‖P−P'‖², ‖W−W'‖²)`.
    pub fn squared_errors(&self, gt: &DeformBundle) -> (f64, f64, f64) {
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        (sq(&self.expr, &gt.expr), sq(&self.pose, &gt.pose), sq(&self.weights, &gt.weights))
    }
}

pub fn softmax(logits: &[f64]) -> [f64; NUM_JOINTS] {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w = [0.0; NUM_JOINTS];
    let mut s = 0.0;
    for k in 0..NUM_JOINTS {
        w[k] = (logits[k] - m).exp();
        s += w[k];
    }
    for x in &mut w {
        *x /= s;
    }
    w
}

/// Which deformation path is active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeformMode {
    /// Learned bases and weights.
    #[default]
    Full,
    /// Learned skinning weights only; no expression or pose offsets.
    HeadFs,
    /// Ground-truth components looked up on the subject's canonical model surface.
    FDef,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootSelection {
    #[default]
    MinResidual,
    MaxOccupancy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformConfig {
    pub n_beta: usize,
    pub shape_hidden: Vec<usize>,
    pub bases_hidden: Vec<usize>,
    /// Expression-basis outputs are `expr_scale * raw`.
    pub expr_scale: f64,
    /// Pose-corrective outputs are `pose_scale * raw`.
    pub pose_scale: f64,
    /// Pose defining canonical space (zero of the deformation).
    pub canonical_theta: Vec<f64>,
    pub mode: DeformMode,
    pub max_iter: usize,
    pub tol: f64,
    pub selection: RootSelection,
}

impl Default for DeformConfig {
    fn default() -> Self {
        DeformConfig {
            n_beta: 100,
            shape_hidden: vec![64, 64],
            bases_hidden: vec![128, 128],
            expr_scale: 0.05,
            pose_scale: 0.02,
            canonical_theta: canonical_theta(0.1),
            mode: DeformMode::Full,
            max_iter: 30,
            tol: 1e-5,
            selection: RootSelection::MinResidual,
        }
    }
}

/// Canonical pose with the jaw opened by `jaw` radians.
pub fn canonical_theta(jaw: f64) -> Vec<f64> {
    let mut t = vec![0.0; POSE_DIM];
    t[3 * JAW] = jaw;
    t
}

/// Parameter gradients of the deformation networks.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformGrads {
    pub shape: Vec<f64>,
    pub bases: Vec<f64>,
}

impl DeformGrads {
    pub fn add(&mut self, o: &DeformGrads) {
        for (a, b) in self.shape.iter_mut().zip(&o.shape) {
            *a += b;
        }
        for (a, b) in self.bases.iter_mut().zip(&o.bases) {
            *a += b;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformNet {
    pub config: DeformConfig,
    /// Shape-removal network D.
    pub shape_net: Mlp,
    /// Continuous-bases network C.
    pub bases_net: Mlp,
}

/// Contraction of C's last layer with the current `(ψ, r)`: offset rows then logit rows.
#[derive(Clone, Debug)]
struct ContractedHead {
    hidden: usize,
    m: Vec<f64>,
    b: [f64; 3 + NUM_JOINTS],
}

/// Everything about one `(β, θ, ψ)` needed to deform points.
#[derive(Clone, Debug)]
pub struct PoseContext<'a> {
    pub params: HeadParams,
    pub joints: [Vec3; NUM_JOINTS],
    /// `A_k(θ) A_k(θ_c)^{-1}`.
    pub transforms: [Mat4; NUM_JOINTS],
    pub rotations: [Mat3; NUM_JOINTS],
    pub inverses: [Mat4; NUM_JOINTS],
    /// `R(θ) − R(θ_c)` features.
    pub pose_rel: [f64; POSE_FEATURE_DIM],
    /// Canonical pose and neutral expression: the deformation is the identity.
    pub identity: bool,
    pub mode: DeformMode,
    head: Option<ContractedHead>,
    lookup: Option<ComponentLookup<'a>>,
}

/// Recorded shape removal and bases evaluation at one canonical point.
#[derive(Clone, Debug)]
pub struct BundleTape {
    pub x_c: Vec3,
    pub x_neutral: Vec3,
    d_tape: Tape,
    c_tape: Tape,
    pub bundle: DeformBundle,
}

/// Recorded forward deformation of one canonical point.
#[derive(Clone, Debug)]
pub struct DeformTape {
    pub x_c: Vec3,
    pub x_p: Vec3,
    pub x_d: Vec3,
    pub weights: [f64; NUM_JOINTS],
    bundle: Option<BundleTape>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceResult {
    pub x_c: Option<Vec3>,
    pub iterations: usize,
    pub residual: f64,
    pub candidate_count: usize,
    /// Bone whose initialization produced the selected root.
    pub bone: Option<usize>,
}

/// Canonical evaluation at the correspondence of a deformed-space query.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformedSample {
    pub x_c: Option<Vec3>,
    /// Fields at `x_c`; the normal is mapped into deformed space.
    pub sample: CanonicalSample,
}

impl DeformNet {
    pub fn new<R: Rng>(config: DeformConfig, rng: &mut R) -> Result<Self> {
        ensure_dim("canonical pose", config.canonical_theta.len(), POSE_DIM)?;
        if config.tol <= 0.0 {
            return Err(Error::invalid("root-finding tolerance must be positive"));
        }
        let mut shape_net = Mlp::new(MlpConfig::new(3 + config.n_beta, &config.shape_hidden, 3), rng)?;
        let l = shape_net.num_layers() - 1;
        shape_net.layer_weights_mut(l).iter_mut().for_each(|w| *w *= 0.01);
        let mut bases_net = Mlp::new(MlpConfig::new(3, &config.bases_hidden, BUNDLE_DIM), rng)?;
        let l = bases_net.num_layers() - 1;
        bases_net.layer_weights_mut(l).iter_mut().for_each(|w| *w *= 0.1);
        Ok(DeformNet {
            config,
            shape_net,
            bases_net,
        })
    }

    pub fn rebuild(&mut self) -> Result<()> {
        self.shape_net.rebuild()?;
        self.bases_net.rebuild()
    }

    pub fn zero_grads(&self) -> DeformGrads {
        DeformGrads {
            shape: vec![0.0; self.shape_net.parameter_count()],
            bases: vec![0.0; self.bases_net.parameter_count()],
        }
    }

    fn shape_input(x_c: &Vec3, beta: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 + beta.len());
        v.extend_from_slice(x_c.as_slice());
        v.extend_from_slice(beta);
        v
    }

    /// Shape-neutral point `x_c + D(x_c, β)`.
    pub fn remove_shape(&self, x_c: &Vec3, beta: &[f64]) -> Vec3 {
        let d = self.shape_net.eval(&Self::shape_input(x_c, beta));
        x_c + Vec3::new(d[0], d[1], d[2])
    }

    pub fn remove_shape_tape(&self, x_c: &Vec3, beta: &[f64]) -> (Vec3, Tape) {
        let tape = self.shape_net.record(&Self::shape_input(x_c, beta));
        let o = tape.output();
        (x_c + Vec3::new(o[0], o[1], o[2]), tape)
    }

    /// Reverse pass of shape removal for a cotangent on the neutral point; returns `dL/dx_c`.
    pub fn remove_shape_backward(&self, tape: &Tape, d_neutral: &Vec3, grads: Option<&mut DeformGrads>) -> Result<Vec3> {
        let d_in = self
            .shape_net
            .backward(tape, d_neutral.as_slice(), None, grads.map(|g| g.shape.as_mut_slice()))?;
        Ok(d_neutral + Vec3::new(d_in[0], d_in[1], d_in[2]))
    }

    fn decode(&self, raw: &[f64]) -> DeformBundle {
        let logits = &raw[W_OFF..W_OFF + NUM_JOINTS];
        DeformBundle {
            expr: raw[EXPR_OFF..POSE_OFF].iter().map(|v| v * self.config.expr_scale).collect(),
            pose: raw[POSE_OFF..W_OFF].iter().map(|v| v * self.config.pose_scale).collect(),
            weights: softmax(logits),
        }
    }

    /// Learned bundle `C(x_c + D(x_c, β))`.
    pub fn continuous_bases(&self, x_c: &Vec3, beta: &[f64]) -> DeformBundle {
        let xn = self.remove_shape(x_c, beta);
        self.decode(&self.bases_net.eval(xn.as_slice()))
    }

    pub fn bundle_tape(&self, x_c: &Vec3, beta: &[f64]) -> BundleTape {
        let (xn, d_tape) = self.remove_shape_tape(x_c, beta);
        let c_tape = self.bases_net.record(xn.as_slice());
        let bundle = self.decode(c_tape.output());
        BundleTape {
            x_c: *x_c,
            x_neutral: xn,
            d_tape,
            c_tape,
            bundle,
        }
    }

    /// Reverse pass for cotangents on `E`, `P` and post-softmax `W`; returns `dL/dx_c`.
    pub fn bundle_backward(
        &self,
        bt: &BundleTape,
        d_expr: Option<&[f64]>,
        d_pose: Option<&[f64]>,
        d_weights: &[f64; NUM_JOINTS],
        mut grads: Option<&mut DeformGrads>,
    ) -> Result<Vec3> {
        let mut d_raw = vec![0.0; BUNDLE_DIM];
        if let Some(de) = d_expr {
            for (o, v) in d_raw[EXPR_OFF..POSE_OFF].iter_mut().zip(de) {
                *o = v * self.config.expr_scale;
            }
        }
        if let Some(dp) = d_pose {
            for (o, v) in d_raw[POSE_OFF..W_OFF].iter_mut().zip(dp) {
                *o = v * self.config.pose_scale;
            }
        }
        let w = &bt.bundle.weights;
        let dot: f64 = (0..NUM_JOINTS).map(|k| w[k] * d_weights[k]).sum();
        for k in 0..NUM_JOINTS {
            d_raw[W_OFF + k] = w[k] * (d_weights[k] - dot);
        }
        let d_xn = self
            .bases_net
            .backward(&bt.c_tape, &d_raw, None, grads.as_deref_mut().map(|g| g.bases.as_mut_slice()))?;
        self.remove_shape_backward(&bt.d_tape, &Vec3::new(d_xn[0], d_xn[1], d_xn[2]), grads)
    }

    pub fn pose_context<'a>(&self, model: &'a TemplateModel, params: &HeadParams) -> Result<PoseContext<'a>> {
        params.validate(model.n_beta)?;
        ensure_dim("n_beta", model.n_beta, self.config.n_beta)?;
        let theta_c = &self.config.canonical_theta;
        let joints = model.joints(&params.beta)?;
        let a = joint_transforms(&joints, &params.theta);
        let a_c = joint_transforms(&joints, theta_c);
        let identity = params.theta == *theta_c && params.psi.iter().all(|&v| v == 0.0);
        let mut transforms = [Mat4::identity(); NUM_JOINTS];
        let mut rotations = [Mat3::identity(); NUM_JOINTS];
        let mut inverses = [Mat4::identity(); NUM_JOINTS];
        if !identity {
            for k in 0..NUM_JOINTS {
                transforms[k] = a[k] * rigid_inverse(&a_c[k]);
                rotations[k] = linear_part(&transforms[k]);
                inverses[k] = rigid_inverse(&transforms[k]);
            }
        }
        let (r, r_c) = (pose_features(&params.theta), pose_features(theta_c));
        let mut pose_rel = [0.0; POSE_FEATURE_DIM];
        for i in 0..POSE_FEATURE_DIM {
            pose_rel[i] = r[i] - r_c[i];
        }
        let mode = self.config.mode;
        let head = match mode {
            DeformMode::FDef => None,
            _ => Some(self.contract(&pose_rel, &params.psi, mode == DeformMode::HeadFs)),
        };
        let lookup = match mode {
            DeformMode::FDef => {
                let canon = HeadParams {
                    beta: params.beta.clone(),
                    theta: theta_c.clone(),
                    psi: vec![0.0; EXPR_DIM],
                };
                Some(model.component_lookup(&canon)?)
            }
            _ => None,
        };
        Ok(PoseContext {
            params: params.clone(),
            joints,
            transforms,
            rotations,
            inverses,
            pose_rel,
            identity,
            mode,
            head,
            lookup,
        })
    }

    fn contract(&self, pose_rel: &[f64; POSE_FEATURE_DIM], psi: &[f64], no_offsets: bool) -> ContractedHead {
        let net = &self.bases_net;
        let l = net.num_layers() - 1;
        let hidden = net.config().layer_in(l);
        let w = net.layer_weights(l);
        let b = net.layer_bias(l);
        let mut m = vec![0.0; (3 + NUM_JOINTS) * hidden];
        let mut bb = [0.0; 3 + NUM_JOINTS];
        if !no_offsets {
            let (se, sp) = (self.config.expr_scale, self.config.pose_scale);
            for k in 0..3 {
                let row = &mut m[k * hidden..(k + 1) * hidden];
                for (j, &p) in psi.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let o = EXPR_OFF + k * EXPR_DIM + j;
                    let c = se * p;
                    bb[k] += c * b[o];
                    for (r, wv) in row.iter_mut().zip(&w[o * hidden..(o + 1) * hidden]) {
                        *r += c * wv;
                    }
                }
                for (i, &r_i) in pose_rel.iter().enumerate() {
                    if r_i == 0.0 {
                        continue;
                    }
                    let o = POSE_OFF + i * 3 + k;
                    let c = sp * r_i;
                    bb[k] += c * b[o];
                    for (r, wv) in row.iter_mut().zip(&w[o * hidden..(o + 1) * hidden]) {
                        *r += c * wv;
                    }
                }
            }
        }
        for k in 0..NUM_JOINTS {
            let o = W_OFF + k;
            m[(3 + k) * hidden..(4 + k) * hidden].copy_from_slice(&w[o * hidden..(o + 1) * hidden]);
            bb[3 + k] = b[o];
        }
        ContractedHead { hidden, m, b: bb }
    }

    /// Offset and skinning weights at `x_c`.
    fn offset_and_weights(&self, x_c: &Vec3, ctx: &PoseContext) -> (Vec3, [f64; NUM_JOINTS]) {
        match (&ctx.head, &ctx.lookup) {
            (Some(head), _) => {
                let xn = self.remove_shape(x_c, &ctx.params.beta);
                let h = self.bases_net.eval_hidden(xn.as_slice());
                let out = apply_head(head, &h);
                (Vec3::new(out[0], out[1], out[2]), softmax(&out[3..]))
            }
            (None, Some(lookup)) => {
                let b = lookup.sample(x_c).bundle;
                (b.offset(&ctx.pose_rel, &ctx.params.psi), b.weights)
            }
            (None, None) => unreachable!("pose context without a deformation source"),
        }
    }

    fn skin(x_p: &Vec3, w: &[f64; NUM_JOINTS], ctx: &PoseContext) -> Vec3 {
        let mut out = Vec3::zeros();
        for k in 0..NUM_JOINTS {
            if w[k] != 0.0 {
                out += transform_point(&ctx.transforms[k], x_p) * w[k];
            }
        }
        out
    }

    fn eval_with_weights(&self, x_c: &Vec3, ctx: &PoseContext) -> (Vec3, [f64; NUM_JOINTS]) {
        let (off, w) = self.offset_and_weights(x_c, ctx);
        (Self::skin(&(x_c + off), &w, ctx), w)
    }

    /// Forward deformation of one canonical point.
    pub fn deform_point(&self, x_c: &Vec3, ctx: &PoseContext) -> Vec3 {
        if ctx.identity {
            return *x_c;
        }
        self.eval_with_weights(x_c, ctx).0
    }

    pub fn deform_points(&self, xs: &[Vec3], ctx: &PoseContext) -> Vec<Vec3> {
        crate::par::map(xs, |x| self.deform_point(x, ctx))
    }

    /// Deforms points with externally supplied bundles (ground-truth substitution).
    pub fn deform_with_bundles(xs: &[Vec3], bundles: &[DeformBundle], ctx: &PoseContext) -> Result<Vec<Vec3>> {
        ensure_dim("bundles", bundles.len(), xs.len())?;
        if ctx.identity {
            return Ok(xs.to_vec());
        }
        Ok(xs
            .iter()
            .zip(bundles)
            .map(|(x, b)| {
                let off = if ctx.mode == DeformMode::HeadFs {
                    Vec3::zeros()
                } else {
                    b.offset(&ctx.pose_rel, &ctx.params.psi)
                };
                Self::skin(&(x + off), &b.weights, ctx)
            })
            .collect())
    }

    /// Deformation with recorded intermediates for reverse-mode gradients.
    pub fn deform_tape(&self, x_c: &Vec3, ctx: &PoseContext) -> DeformTape {
        if ctx.identity {
            return DeformTape {
                x_c: *x_c,
                x_p: *x_c,
                x_d: *x_c,
                weights: [0.0; NUM_JOINTS],
                bundle: None,
            };
        }
        match ctx.mode {
            DeformMode::FDef => {
                let (off, w) = self.offset_and_weights(x_c, ctx);
                let x_p = x_c + off;
                DeformTape {
                    x_c: *x_c,
                    x_p,
                    x_d: Self::skin(&x_p, &w, ctx),
                    weights: w,
                    bundle: None,
                }
            }
            mode => {
                let bt = self.bundle_tape(x_c, &ctx.params.beta);
                let off = if mode == DeformMode::HeadFs {
                    Vec3::zeros()
                } else {
                    bt.bundle.offset(&ctx.pose_rel, &ctx.params.psi)
                };
                let x_p = x_c + off;
                let w = bt.bundle.weights;
                DeformTape {
                    x_c: *x_c,
                    x_p,
                    x_d: Self::skin(&x_p, &w, ctx),
                    weights: w,
                    bundle: Some(bt),
                }
            }
        }
    }

    /// Vector-Jacobian product for a cotangent `u` on the deformed point.
    /// Accumulates network gradients and returns `dL/dx_c`.
    pub fn deform_backward(&self, tape: &DeformTape, ctx: &PoseContext, u: &Vec3, grads: Option<&mut DeformGrads>) -> Result<Vec3> {
        if ctx.identity {
            return Ok(*u);
        }
        let mut g_p = Vec3::zeros();
        let mut d_w = [0.0; NUM_JOINTS];
        for k in 0..NUM_JOINTS {
            g_p += ctx.rotations[k].transpose() * u * tape.weights[k];
            d_w[k] = u.dot(&transform_point(&ctx.transforms[k], &tape.x_p));
        }
        let Some(bt) = &tape.bundle else {
            return Ok(g_p);
        };
        let psi = &ctx.params.psi;
        let (d_expr, d_pose) = if ctx.mode == DeformMode::HeadFs {
            (None, None)
        } else {
            let mut de = vec![0.0; 3 * EXPR_DIM];
            let mut dp = vec![0.0; 3 * POSE_FEATURE_DIM];
            for k in 0..3 {
                for j in 0..EXPR_DIM {
                    de[k * EXPR_DIM + j] = g_p[k] * psi[j];
                }
                for i in 0..POSE_FEATURE_DIM {
                    dp[i * 3 + k] = g_p[k] * ctx.pose_rel[i];
                }
            }
            (Some(de), Some(dp))
        };
        let d_x = self.bundle_backward(bt, d_expr.as_deref(), d_pose.as_deref(), &d_w, grads)?;
        Ok(g_p + d_x)
    }

    /// `∂x_d / ∂x_c` (exact for the learned paths; blended rotation for ground-truth lookup).
    pub fn jacobian(&self, x_c: &Vec3, ctx: &PoseContext) -> Mat3 {
        if ctx.identity {
            return Mat3::identity();
        }
        let Some(head) = &ctx.head else {
            let (_, w) = self.offset_and_weights(x_c, ctx);
            return blended_rotation(&w, ctx);
        };
        let beta = &ctx.params.beta;
        let n_in = 3 + beta.len();
        let unit: Vec<Vec<f64>> = (0..3)
            .map(|a| {
                let mut t = vec![0.0; n_in];
                t[a] = 1.0;
                t
            })
            .collect();
        let (d_out, d_jac) = self.shape_net.jvp(&Self::shape_input(x_c, beta), &unit);
        let xn = x_c + Vec3::new(d_out[0], d_out[1], d_out[2]);
        // columns of d x_neutral / d x_c
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|a| {
                let mut c = d_jac[a].clone();
                c[a] += 1.0;
                c
            })
            .collect();
        let (h, dh) = self.bases_net.jvp_hidden(xn.as_slice(), &cols);
        let out = apply_head(head, &h);
        let w = softmax(&out[3..]);
        let x_p = x_c + Vec3::new(out[0], out[1], out[2]);
        let mut j = Mat3::zeros();
        for a in 0..3 {
            let d = apply_head_linear(head, &dh[a]);
            let dx_p = {
                let mut e = Vec3::new(d[0], d[1], d[2]);
                e[a] += 1.0;
                e
            };
            let dl = &d[3..];
            let dot: f64 = (0..NUM_JOINTS).map(|k| w[k] * dl[k]).sum();
            let mut col = Vec3::zeros();
            for k in 0..NUM_JOINTS {
                let dwk = w[k] * (dl[k] - dot);
                col += ctx.rotations[k] * dx_p * w[k] + transform_point(&ctx.transforms[k], &x_p) * dwk;
            }
            j.set_column(a, &col);
        }
        j
    }

    fn solve_from(&self, x0: Vec3, x_d: &Vec3, ctx: &PoseContext) -> (Vec3, f64, usize, bool) {
        let tol = self.config.tol;
        let (y0, w0) = self.eval_with_weights(&x0, ctx);
        let mut f = y0 - x_d;
        let mut res = f.norm();
        if res <= tol {
            return (x0, res, 0, true);
        }
        let mut jinv = blended_rotation(&w0, ctx).try_inverse().unwrap_or_else(Mat3::identity);
        let mut x = x0;
        for it in 1..=self.config.max_iter {
            let dx = -(jinv * f);
            let x_new = x + dx;
            let f_new = self.eval_with_weights(&x_new, ctx).0 - x_d;
            let r_new = f_new.norm();
            if !r_new.is_finite() {
                return (x, res, it, false);
            }
            if r_new <= tol {
                return (x_new, r_new, it, true);
            }
            let df = f_new - f;
            let jdf = jinv * df;
            let denom = dx.dot(&jdf);
            if denom.abs() > 1e-30 {
                jinv += (dx - jdf) * (dx.transpose() * jinv) / denom;
            }
            x = x_new;
            f = f_new;
            res = r_new;
        }
        (x, res, self.config.max_iter, false)
    }

    /// Solves `deform(x_c) = x_d` from one initialization per bone.
    pub fn canonical_correspondence(
        &self,
        x_d: &Vec3,
        ctx: &PoseContext,
        occupancy: Option<&dyn Fn(&Vec3) -> f64>,
    ) -> CorrespondenceResult {
        if ctx.identity {
            return CorrespondenceResult {
                x_c: Some(*x_d),
                iterations: 0,
                residual: 0.0,
                candidate_count: 1,
                bone: None,
            };
        }
        let mut best: Option<(f64, f64, usize, Vec3, usize)> = None;
        let mut count = 0;
        for k in 0..NUM_JOINTS {
            if (0..k).any(|j| ctx.transforms[j] == ctx.transforms[k]) {
                continue;
            }
            count += 1;
            let x0 = transform_point(&ctx.inverses[k], x_d);
            let (x, res, it, ok) = self.solve_from(x0, x_d, ctx);
            if !ok {
                continue;
            }
            let key = match (self.config.selection, occupancy) {
                (RootSelection::MaxOccupancy, Some(occ)) => -occ(&x),
                _ => res,
            };
            let better = match &best {
                None => true,
                Some((bk, br, ..)) => key < *bk || (key == *bk && res < *br),
            };
            if better {
                best = Some((key, res, it, x, k));
            }
        }
        match best {
            Some((_, res, it, x, k)) => CorrespondenceResult {
                x_c: Some(x),
                iterations: it,
                residual: res,
                candidate_count: count,
                bone: Some(k),
            },
            None => CorrespondenceResult {
                x_c: None,
                iterations: self.config.max_iter,
                residual: f64::INFINITY,
                candidate_count: count,
                bone: None,
            },
        }
    }

    pub fn correspondences(&self, xs: &[Vec3], ctx: &PoseContext) -> Vec<CorrespondenceResult> {
        crate::par::map(xs, |x| self.canonical_correspondence(x, ctx, None))
    }

    /// Canonical fields at the correspondence of `x_d`; empty space when none is found.
    pub fn deformed_field_eval(
        &self,
        canonical: &CanonicalModel,
        latents: &LatentTriplet,
        shape: &ShapeContext,
        ctx: &PoseContext,
        x_d: &Vec3,
    ) -> DeformedSample {
        let occ_fn = |x: &Vec3| canonical.occupancy(x, shape);
        let corr = self.canonical_correspondence(x_d, ctx, Some(&occ_fn));
        let theta = &ctx.params.theta;
        let psi = &ctx.params.psi;
        match corr.x_c {
            Some(x_c) => {
                let mut sample = canonical.evaluate(&x_c, latents, shape, theta, psi);
                if !ctx.identity {
                    sample.normal = map_normal(&self.jacobian(&x_c, ctx), &sample.normal);
                }
                DeformedSample { x_c: Some(x_c), sample }
            }
            None => DeformedSample {
                x_c: None,
                sample: CanonicalSample {
                    occ: 0.0,
                    f_s: vec![0.0; canonical.config.n_feature],
                    normal: Vec3::zeros(),
                    f_n: vec![0.0; canonical.config.n_feature],
                    color: Vec3::zeros(),
                },
            },
        }
    }
}

/// Maps a canonical normal through the deformation Jacobian (`J^{-T} n`, normalized).
pub fn map_normal(j: &Mat3, n: &Vec3) -> Vec3 {
    match j.try_inverse() {
        Some(inv) => {
            let m = inv.transpose() * n;
            let l = m.norm();
            if l > 0.0 {
                m / l
            } else {
                *n
            }
        }
        None => *n,
    }
}

fn blended_rotation(w: &[f64; NUM_JOINTS], ctx: &PoseContext) -> Mat3 {
    let mut m = Mat3::zeros();
    for k in 0..NUM_JOINTS {
        m += ctx.rotations[k] * w[k];
    }
    m
}

fn apply_head(head: &ContractedHead, h: &[f64]) -> [f64; 3 + NUM_JOINTS] {
    let mut out = head.b;
    for (r, o) in out.iter_mut().enumerate() {
        let row = &head.m[r * head.hidden..(r + 1) * head.hidden];
        *o += row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
    }
    out
}

fn apply_head_linear(head: &ContractedHead, dh: &[f64]) -> [f64; 3 + NUM_JOINTS] {
    let mut out = [0.0; 3 + NUM_JOINTS];
    for (r, o) in out.iter_mut().enumerate() {
        let row = &head.m[r * head.hidden..(r + 1) * head.hidden];
        *o = row.iter().zip(dh).map(|(a, b)| a * b).sum::<f64>();
    }
    out
}
