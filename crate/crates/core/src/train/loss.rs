//! Stage-1 and stage-2 objectives with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::canonical::{CanonicalGrads, CanonicalModel, LatentTriplet};
use crate::deform::{DeformBundle, DeformGrads, PoseContext};
use crate::error::{Error, Result};
use crate::headmodel::{HeadParams, NUM_JOINTS};
use crate::math::{Mat3, Vec3};
use crate::neuralnet::{sigmoid, Tape};

use super::model::HeadFieldModel;

/// BCE charged for an inside label whose correspondence search failed.
pub const BCE_CAP: f64 = 16.118_095_650_958_32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub deshape: f64,
    pub lbs: f64,
    pub reg: f64,
    pub pose: f64,
    pub expr: f64,
    pub color: f64,
    pub normal: f64,
    /// Weight of the 3D point term inside the color loss.
    pub color_point: f64,
    /// Weight of the 3D point term inside the normal loss.
    pub normal_point: f64,
    /// Weight of `‖z_color‖²` relative to `‖z_detail‖²`.
    pub color_reg: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            deshape: 10.0,
            lbs: 10.0,
            reg: 1e-3,
            pose: 1e4,
            expr: 1e4,
            color: 1.0,
            normal: 1.0,
            color_point: 1.0,
            normal_point: 1.0,
            color_reg: 1.0,
            aux: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.deshape,
            self.lbs,
            self.reg,
            self.pose,
            self.expr,
            self.color,
            self.normal,
            self.color_point,
            self.normal_point,
            self.color_reg,
            self.aux,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Gradients for every trainable quantity.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub canonical: CanonicalGrads,
    pub deform: DeformGrads,
    /// Per subject, flattened `[z_shape, z_detail, z_color]`.
    pub latents: Vec<Vec<f64>>,
}

impl ModelGrads {
    pub fn zeros(model: &HeadFieldModel) -> Self {
        ModelGrads {
            canonical: model.canonical.zero_grads(),
            deform: model.deform.zero_grads(),
            latents: model.latents.entries.iter().map(|e| vec![0.0; e.flat().len()]).collect(),
        }
    }

    pub fn add(&mut self, o: &ModelGrads) {
        self.canonical.add(&o.canonical);
        self.deform.add(&o.deform);
        for (a, b) in self.latents.iter_mut().zip(&o.latents) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        let c = &self.canonical;
        [&c.volume, &c.geometry, &c.normal, &c.texture, &self.deform.shape, &self.deform.bases]
            .into_iter()
            .chain(self.latents.iter())
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// `softplus(l) - y l`, the BCE of `sigmoid(l)` against `y`.
pub fn bce_logit(l: f64, y: f64) -> f64 {
    l.max(0.0) - y * l + (-l.abs()).exp().ln_1p()
}

/// Ground truth shared by all scans of a dataset.
#[derive(Clone, Debug)]
pub struct SharedTargets {
    /// Ground-truth bundles per template vertex.
    pub bundles: Vec<DeformBundle>,
    /// Template vertices at the canonical pose with zero shape.
    pub neutral: Vec<Vec3>,
}

/// Stage-1 supervision of one scan.
#[derive(Clone, Debug)]
pub struct Stage1Target {
    pub subject: usize,
    pub params: HeadParams,
    pub points: Vec<Vec3>,
    pub labels: Vec<u8>,
    /// The subject's vertices at the canonical pose.
    pub canonical_vertices: Vec<Vec3>,
    /// Canonical points inside bone capsules.
    pub bone_points: Vec<Vec3>,
    /// Canonical points near each joint with the joint index.
    pub joint_points: Vec<(Vec3, usize)>,
}

/// Subset of a stage-1 target evaluated in one step.
#[derive(Clone, Debug)]
pub struct Stage1Item<'a> {
    pub target: &'a Stage1Target,
    pub points: Vec<usize>,
    pub vertices: Vec<usize>,
    pub aux: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Terms {
    pub total: f64,
    pub occ: f64,
    pub deshape: f64,
    /// Unweighted bases error (mean over supervised vertices).
    pub lbs: f64,
    pub reg: f64,
    pub aux: f64,
    pub converged: usize,
    pub points: usize,
}

impl Stage1Terms {
    fn accumulate(&mut self, o: &Stage1Terms, w: f64) {
        self.total += w * o.total;
        self.occ += w * o.occ;
        self.deshape += w * o.deshape;
        self.lbs += w * o.lbs;
        self.reg += w * o.reg;
        self.aux += w * o.aux;
        self.converged += o.converged;
        self.points += o.points;
    }
}

/// Bases error `λ_e‖E−E_gt‖² + λ_p‖P−P_gt‖² + ‖W−W_gt‖²`.
pub fn bases_error(pred: &DeformBundle, gt: &DeformBundle, w: &LossWeights) -> f64 {
    let (e, p, s) = pred.squared_errors(gt);
    w.expr * e + w.pose * p + s
}

/// Occupancy BCE at one deformed point; accumulates gradients scaled by `scale`.
#[allow(clippy::too_many_arguments)]
fn occupancy_point(
    model: &HeadFieldModel,
    shape: &crate::canonical::ShapeContext,
    ctx: &PoseContext,
    x_d: &Vec3,
    label: f64,
    scale: f64,
    grads: Option<(&mut ModelGrads, &mut Vec<f64>)>,
) -> Result<(f64, bool)> {
    let canonical = &model.canonical;
    let occ = |c: &Vec3| canonical.occupancy(c, shape);
    let corr = model.deform.canonical_correspondence(x_d, ctx, Some(&occ));
    let Some(x_c) = corr.x_c else {
        return Ok((if label > 0.5 { BCE_CAP } else { 0.0 }, false));
    };
    let gt = canonical.geometry_tape(&x_c, shape);
    let l = gt.logit();
    let loss = bce_logit(l, label);
    if let Some((g, grid_grad)) = grads {
        let dl = (sigmoid(l) - label) * scale;
        let dx = canonical.geometry_backward(shape, &gt, dl, None, Some(&mut g.canonical.geometry), Some(grid_grad))?;
        if !ctx.identity {
            let j = model.deform.jacobian(&x_c, ctx);
            if let Some(jt_inv) = j.transpose().try_inverse() {
                let u = -(jt_inv * dx);
                let tape = model.deform.deform_tape(&x_c, ctx);
                model.deform.deform_backward(&tape, ctx, &u, Some(&mut g.deform))?;
            }
        }
    }
    Ok((loss, true))
}

/// Stage-1 loss of one scan; gradients are scaled by `scale` and accumulated.
pub fn stage1_item(
    model: &HeadFieldModel,
    shared: &SharedTargets,
    item: &Stage1Item,
    w: &LossWeights,
    scale: f64,
    mut grads: Option<&mut ModelGrads>,
) -> Result<Stage1Terms> {
    let t = item.target;
    let z = model.latent(t.subject)?;
    let beta = &t.params.beta;
    let canonical = &model.canonical;
    let deform = &model.deform;
    let shape = if grads.is_some() {
        canonical.shape_context_tape(&z.z_shape)?
    } else {
        canonical.shape_context(&z.z_shape)?
    };
    let ctx = model.pose_context(&t.params)?;
    let mut grid_grad = vec![0.0; shape.grid.values.len()];
    let mut terms = Stage1Terms {
        points: item.points.len(),
        ..Default::default()
    };

    let kp = item.points.len().max(1) as f64;
    for &i in &item.points {
        let g = grads.as_deref_mut().map(|g| (g, &mut grid_grad));
        let (loss, ok) = occupancy_point(model, &shape, &ctx, &t.points[i], t.labels[i] as f64, scale / kp, g)?;
        terms.occ += loss / kp;
        terms.converged += ok as usize;
    }

    let kv = item.vertices.len().max(1) as f64;
    for &v in &item.vertices {
        let x = &t.canonical_vertices[v];
        let (xn, d_tape) = deform.remove_shape_tape(x, beta);
        let r = xn - shared.neutral[v];
        terms.deshape += r.norm_squared() / kv;
        if let Some(g) = grads.as_deref_mut() {
            if w.deshape > 0.0 {
                let d = r * (2.0 * w.deshape * scale / kv);
                deform.remove_shape_backward(&d_tape, &d, Some(&mut g.deform))?;
            }
        }
        let bt = deform.bundle_tape(x, beta);
        let gt = &shared.bundles[v];
        terms.lbs += bases_error(&bt.bundle, gt, w) / kv;
        if let Some(g) = grads.as_deref_mut() {
            if w.lbs > 0.0 {
                let c = 2.0 * w.lbs * scale / kv;
                let de: Vec<f64> = bt.bundle.expr.iter().zip(&gt.expr).map(|(a, b)| c * w.expr * (a - b)).collect();
                let dp: Vec<f64> = bt.bundle.pose.iter().zip(&gt.pose).map(|(a, b)| c * w.pose * (a - b)).collect();
                let mut dw = [0.0; NUM_JOINTS];
                for k in 0..NUM_JOINTS {
                    dw[k] = c * (bt.bundle.weights[k] - gt.weights[k]);
                }
                deform.bundle_backward(&bt, Some(&de), Some(&dp), &dw, Some(&mut g.deform))?;
            }
        }
    }

    if item.aux {
        let nb = t.bone_points.len().max(1) as f64;
        for p in &t.bone_points {
            let gt = canonical.geometry_tape(p, &shape);
            let l = gt.logit();
            terms.aux += bce_logit(l, 1.0) / nb;
            if let Some(g) = grads.as_deref_mut() {
                let dl = (sigmoid(l) - 1.0) * w.aux * scale / nb;
                canonical.geometry_backward(&shape, &gt, dl, None, Some(&mut g.canonical.geometry), Some(&mut grid_grad))?;
            }
        }
        let nj = t.joint_points.len().max(1) as f64;
        for (p, k) in &t.joint_points {
            let bt = deform.bundle_tape(p, beta);
            let mut dw = [0.0; NUM_JOINTS];
            for (j, d) in dw.iter_mut().enumerate() {
                let e = bt.bundle.weights[j] - if j == *k { 1.0 } else { 0.0 };
                terms.aux += e * e / nj;
                *d = 2.0 * e * w.aux * scale / nj;
            }
            if let Some(g) = grads.as_deref_mut() {
                deform.bundle_backward(&bt, None, None, &dw, Some(&mut g.deform))?;
            }
        }
    }

    terms.reg = z.z_shape.iter().map(|v| v * v).sum();
    if let Some(g) = grads {
        let dz = canonical.shape_backward(&shape, &grid_grad, Some(&mut g.canonical))?;
        let gl = &mut g.latents[t.subject];
        for (i, (d, zv)) in dz.iter().zip(&z.z_shape).enumerate() {
            gl[i] += d + 2.0 * w.reg * zv * scale;
        }
    }
    terms.total = terms.occ + w.deshape * terms.deshape + w.lbs * terms.lbs + w.reg * terms.reg + w.aux * terms.aux;
    Ok(terms)
}

/// Mean stage-1 loss over a batch with gradients of that mean.
pub fn loss_stage1(
    model: &HeadFieldModel,
    shared: &SharedTargets,
    batch: &[Stage1Item],
    w: &LossWeights,
    with_grads: bool,
) -> Result<(Stage1Terms, Option<ModelGrads>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let results = crate::par::map(batch, |item| {
        let mut g = with_grads.then(|| ModelGrads::zeros(model));
        stage1_item(model, shared, item, w, scale, g.as_mut()).map(|t| (t, g))
    });
    let mut terms = Stage1Terms::default();
    let mut grads = with_grads.then(|| ModelGrads::zeros(model));
    for r in results {
        let (t, g) = r?;
        terms.accumulate(&t, scale);
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            acc.add(&g);
        }
    }
    if terms.points > 0 && terms.converged == 0 {
        return Err(Error::contract("no correspondence converged in the batch"));
    }
    Ok((terms, grads))
}

/// A surface sample with a fixed canonical correspondence.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceTarget {
    pub x_c: Vec3,
    /// Maps canonical normals into deformed space (`J^{-T}`).
    pub normal_map: Mat3,
    pub f_s: Vec<f64>,
    pub color: Vec3,
    pub normal: Vec3,
}

/// Stage-2 supervision of one scan.
#[derive(Clone, Debug)]
pub struct Stage2Target {
    pub subject: usize,
    pub params: HeadParams,
    pub points: Vec<SurfaceTarget>,
    /// Pixels covered by the model render, with the ground-truth image values.
    pub pixels: Vec<SurfaceTarget>,
    /// Squared color / normal error summed over pixels the model leaves empty.
    pub const_color: f64,
    pub const_normal: f64,
    pub total_pixels: usize,
}

#[derive(Clone, Debug)]
pub struct Stage2Item<'a> {
    pub target: &'a Stage2Target,
    pub points: Vec<usize>,
    pub pixels: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Terms {
    pub total: f64,
    pub color_image: f64,
    pub color_point: f64,
    pub normal_image: f64,
    pub normal_point: f64,
    pub reg: f64,
}

impl Stage2Terms {
    fn accumulate(&mut self, o: &Stage2Terms, w: f64) {
        self.total += w * o.total;
        self.color_image += w * o.color_image;
        self.color_point += w * o.color_point;
        self.normal_image += w * o.normal_image;
        self.normal_point += w * o.normal_point;
        self.reg += w * o.reg;
    }
}

/// Color and deformed-space normal at a fixed correspondence, with tapes.
pub struct ShadeTape {
    pub color: Vec3,
    pub normal: Vec3,
    n_tape: Tape,
    t_tape: Tape,
    raw: Vec3,
    mapped: Vec3,
}

pub fn shade_tape(canonical: &CanonicalModel, t: &SurfaceTarget, z: &LatentTriplet, params: &HeadParams) -> ShadeTape {
    let n_tape = canonical.normal_tape(&t.x_c, &z.z_detail, &t.f_s);
    let o = n_tape.output();
    let raw = Vec3::new(o[0], o[1], o[2]);
    let nhat = raw / raw.norm().max(1e-12);
    let mapped = t.normal_map * nhat;
    let normal = mapped / mapped.norm().max(1e-12);
    let input = canonical.texture_input(&t.x_c, &z.z_color, &t.f_s, n_tape.penultimate(), &params.theta, &params.psi);
    let t_tape = canonical.texture.record(&input);
    let c = t_tape.output();
    let color = Vec3::new(sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2]));
    ShadeTape {
        color,
        normal,
        n_tape,
        t_tape,
        raw,
        mapped,
    }
}

/// Input cotangents of a shading evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadeGrads {
    pub dz_detail: Vec<f64>,
    pub dz_color: Vec<f64>,
    pub d_fs: Vec<f64>,
}

/// Backpropagates color and normal cotangents into the normal and texture nets.
pub fn shade_backward(
    canonical: &CanonicalModel,
    t: &SurfaceTarget,
    st: &ShadeTape,
    d_color: &Vec3,
    d_normal: &Vec3,
    grads: &mut CanonicalGrads,
) -> Result<ShadeGrads> {
    let cfg = &canonical.config;
    let c = st.color;
    let d_o = [
        d_color.x * c.x * (1.0 - c.x),
        d_color.y * c.y * (1.0 - c.y),
        d_color.z * c.z * (1.0 - c.z),
    ];
    let d_in = canonical.texture.backward(&st.t_tape, &d_o, None, Some(&mut grads.texture))?;
    let nc = cfg.n_color;
    let nf = cfg.n_feature;
    let dz_color = d_in[3..3 + nc].to_vec();
    let mut d_fs = d_in[3 + nc..3 + nc + nf].to_vec();
    let d_fn = &d_in[3 + nc + nf..3 + nc + 2 * nf];

    let ml = st.mapped.norm();
    let rl = st.raw.norm();
    let d_raw = if ml > 1e-12 && rl > 1e-12 {
        let n = st.normal;
        let d_m = (d_normal - n * n.dot(d_normal)) / ml;
        let d_nhat = t.normal_map.transpose() * d_m;
        let nhat = st.raw / rl;
        (d_nhat - nhat * nhat.dot(&d_nhat)) / rl
    } else {
        Vec3::zeros()
    };
    let d_n_in = canonical
        .normal
        .backward(&st.n_tape, d_raw.as_slice(), Some(d_fn), Some(&mut grads.normal))?;
    let nd = cfg.n_detail;
    for (a, b) in d_fs.iter_mut().zip(&d_n_in[3 + nd..]) {
        *a += b;
    }
    Ok(ShadeGrads {
        dz_detail: d_n_in[3..3 + nd].to_vec(),
        dz_color,
        d_fs,
    })
}

pub fn stage2_item(
    model: &HeadFieldModel,
    item: &Stage2Item,
    w: &LossWeights,
    scale: f64,
    mut grads: Option<&mut ModelGrads>,
) -> Result<Stage2Terms> {
    let t = item.target;
    let z = model.latent(t.subject)?;
    let canonical = &model.canonical;
    let cfg = &canonical.config;
    let (ns, nd) = (cfg.n_shape, cfg.n_detail);
    let mut terms = Stage2Terms::default();
    let mut dz_detail = vec![0.0; nd];
    let mut dz_color = vec![0.0; cfg.n_color];

    let mut run = |targets: &[SurfaceTarget], idx: &[usize], wc: f64, wn: f64, image: bool, terms_c: &mut f64, terms_n: &mut f64| -> Result<()> {
        for &i in idx {
            let st_t = &targets[i];
            let st = shade_tape(canonical, st_t, z, &t.params);
            let dc = st.color - st_t.color;
            *terms_c += wc * dc.norm_squared();
            let (ln, dn) = if image {
                let e = st.normal - st_t.normal;
                (e.norm_squared(), e * 2.0)
            } else {
                (1.0 - st_t.normal.dot(&st.normal), -st_t.normal)
            };
            *terms_n += wn * ln;
            if let Some(g) = grads.as_deref_mut() {
                let (cw, nw) = if image { (w.color, w.normal) } else { (w.color * w.color_point, w.normal * w.normal_point) };
                let d_color = dc * (2.0 * cw * wc * scale);
                let d_normal = dn * (nw * wn * scale);
                let sg = shade_backward(canonical, st_t, &st, &d_color, &d_normal, &mut g.canonical)?;
                for (x, y) in dz_detail.iter_mut().zip(sg.dz_detail) {
                    *x += y;
                }
                for (x, y) in dz_color.iter_mut().zip(sg.dz_color) {
                    *x += y;
                }
            }
        }
        Ok(())
    };

    let np = item.points.len().max(1) as f64;
    let (mut cp, mut npt) = (0.0, 0.0);
    run(&t.points, &item.points, 1.0 / np, 1.0 / np, false, &mut cp, &mut npt)?;
    terms.color_point = cp;
    terms.normal_point = npt;

    let tp = t.total_pixels.max(1) as f64;
    let sampled = item.pixels.len();
    let pix_w = if sampled > 0 { t.pixels.len() as f64 / (sampled as f64 * tp) } else { 0.0 };
    let (mut ci, mut ni) = (t.const_color / tp, t.const_normal / tp);
    run(&t.pixels, &item.pixels, pix_w, pix_w, true, &mut ci, &mut ni)?;
    terms.color_image = ci;
    terms.normal_image = ni;

    let (_, ed, ec) = z.energies();
    terms.reg = ed + w.color_reg * ec;
    if let Some(g) = grads {
        let gl = &mut g.latents[t.subject];
        for i in 0..nd {
            gl[ns + i] += dz_detail[i] + 2.0 * w.reg * z.z_detail[i] * scale;
        }
        for i in 0..cfg.n_color {
            gl[ns + nd + i] += dz_color[i] + 2.0 * w.reg * w.color_reg * z.z_color[i] * scale;
        }
    }
    terms.total = w.color * (terms.color_image + w.color_point * terms.color_point)
        + w.normal * (terms.normal_image + w.normal_point * terms.normal_point)
        + w.reg * terms.reg;
    Ok(terms)
}

pub fn loss_stage2(
    model: &HeadFieldModel,
    batch: &[Stage2Item],
    w: &LossWeights,
    with_grads: bool,
) -> Result<(Stage2Terms, Option<ModelGrads>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let results = crate::par::map(batch, |item| {
        let mut g = with_grads.then(|| ModelGrads::zeros(model));
        stage2_item(model, item, w, scale, g.as_mut()).map(|t| (t, g))
    });
    let mut terms = Stage2Terms::default();
    let mut grads = with_grads.then(|| ModelGrads::zeros(model));
    for r in results {
        let (t, g) = r?;
        terms.accumulate(&t, scale);
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            acc.add(&g);
        }
    }
    Ok((terms, grads))
}
