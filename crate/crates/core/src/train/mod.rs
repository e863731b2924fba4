//! Two-stage training: geometry and deformation first, then normals and texture.

pub mod checkpoint;
pub mod data;
pub mod loss;
pub mod model;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform::DeformMode;
use crate::error::{Error, Result};
use crate::geomio::marching::Grid;
use crate::geomio::metrics::occupancy_iou;
use crate::geomio::{label_cell_centers, label_occupancy, InsideTest, Mesh, Scan};
use crate::headmodel::{HeadParams, TemplateModel, EXPR_DIM, JOINT_PARENTS};
use crate::math::Vec3;
use crate::neuralnet::Adam;
use crate::render::{camera_rig, render_mesh, render_scan, BACKGROUND};

pub use checkpoint::{Checkpoint, DirLock};
pub use data::{DataConfig, Dataset};
pub use loss::{
    bases_error, loss_stage1, loss_stage2, LossWeights, ModelGrads, SharedTargets, Stage1Item, Stage1Target, Stage1Terms,
    Stage2Item, Stage2Target, Stage2Terms, SurfaceTarget,
};
pub use model::{Extraction, HeadFieldModel, ModelConfig, EXTRACT_HALF};

/// Mutually exclusive model variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Pure forward skinning with learned weights.
    HeadFs,
    /// Ground-truth components looked up on the fitted model surface.
    FDef,
    /// Bases trained without the bases supervision term.
    NoLbsLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_stage1: usize,
    pub batch_stage2: usize,
    pub lr: f64,
    pub lr_latent: f64,
    /// Occupancy points per scan per step.
    pub points_per_scan: usize,
    /// Canonical vertices per scan per step for the shape-removal and bases terms.
    pub vertices_per_scan: usize,
    /// Epochs at the start of stage 1 with the auxiliary losses on.
    pub aux_epochs: usize,
    /// Steps of shape-removal and bases supervision alone before the first stage-1 epoch.
    pub warmup_steps: usize,
    /// Stage-2 image resolution per rig view.
    pub render_res: usize,
    /// Marching-cubes resolution of the canonical meshes rasterized in stage 2.
    pub stage2_mesh_res: usize,
    /// Surface samples per scan with precomputed correspondences.
    pub stage2_points: usize,
    pub points_per_step: usize,
    pub pixels_per_step: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            ablation: Ablation::Full,
            epochs_stage1: 50,
            epochs_stage2: 30,
            batch_stage1: 1,
            batch_stage2: 2,
            lr: 1e-3,
            lr_latent: 1e-3,
            points_per_scan: 256,
            vertices_per_scan: 512,
            aux_epochs: 1,
            warmup_steps: 1000,
            render_res: 32,
            stage2_mesh_res: 48,
            stage2_points: 256,
            points_per_step: 128,
            pixels_per_step: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_stage1 == 0 || self.batch_stage2 == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if !(self.lr > 0.0 && self.lr_latent > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.render_res == 0 || self.stage2_mesh_res < 8 {
            return Err(Error::invalid("render_res must be positive and stage2_mesh_res at least 8"));
        }
        Ok(())
    }

    /// Model config and loss weights with the ablation applied.
    pub fn resolved(&self) -> (ModelConfig, LossWeights) {
        let mut m = self.model.clone();
        let mut w = self.weights.clone();
        match self.ablation {
            Ablation::Full => {}
            Ablation::HeadFs => m.deform.mode = DeformMode::HeadFs,
            Ablation::FDef => m.deform.mode = DeformMode::FDef,
            Ablation::NoLbsLoss => w.lbs = 0.0,
        }
        (m, w)
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
}

pub fn shared_targets(head: &TemplateModel, theta_c: &[f64]) -> Result<SharedTargets> {
    let neutral = head.posed_vertices(&HeadParams {
        beta: vec![0.0; head.n_beta],
        theta: theta_c.to_vec(),
        psi: vec![0.0; EXPR_DIM],
    })?;
    Ok(SharedTargets {
        bundles: (0..head.num_vertices()).map(|v| head.vertex_bundle(v)).collect(),
        neutral,
    })
}

/// Ground-truth canonical mesh of a subject with shape `beta`.
pub fn canonical_gt_mesh(head: &TemplateModel, beta: &[f64], theta_c: &[f64]) -> Result<Mesh> {
    head.flame_forward(&HeadParams {
        beta: beta.to_vec(),
        theta: theta_c.to_vec(),
        psi: vec![0.0; EXPR_DIM],
    })
}

pub fn stage1_target(head: &TemplateModel, scan: &Scan, theta_c: &[f64]) -> Result<Stage1Target> {
    let samples = scan
        .samples
        .as_ref()
        .ok_or_else(|| Error::contract("scan has no training samples"))?;
    let beta = &scan.params.beta;
    let canon = canonical_gt_mesh(head, beta, theta_c)?;
    let joints = head.joints(beta)?;
    let mut bone = Vec::new();
    for (k, parent) in JOINT_PARENTS.iter().enumerate() {
        if let Some(p) = parent {
            for t in [0.25, 0.5, 0.75] {
                bone.push(joints[*p] + (joints[k] - joints[*p]) * t);
            }
        }
    }
    let inside = label_occupancy(&canon, &bone, InsideTest::WindingNumber)?;
    let bone_points = bone.into_iter().zip(inside).filter(|(_, i)| *i == 1).map(|(p, _)| p).collect();
    let r = 0.01;
    let mut joint_points = Vec::new();
    for (k, j) in joints.iter().enumerate() {
        joint_points.push((*j, k));
        for a in 0..3 {
            for s in [-r, r] {
                let mut d = Vec3::zeros();
                d[a] = s;
                joint_points.push((j + d, k));
            }
        }
    }
    Ok(Stage1Target {
        subject: scan.subject_id,
        params: scan.params.clone(),
        points: samples.points.clone(),
        labels: samples.occ.clone(),
        canonical_vertices: canon.vertices,
        bone_points,
        joint_points,
    })
}

/// Correspondence-bearing surface target at deformed point `x_d`, if the search converges.
fn surface_target(model: &HeadFieldModel, ctx: &crate::deform::PoseContext, shape: &crate::canonical::ShapeContext, x_c: Vec3, color: Vec3, normal: Vec3) -> SurfaceTarget {
    let j = model.deform.jacobian(&x_c, ctx);
    let normal_map = j.try_inverse().map(|m| m.transpose()).unwrap_or_else(crate::math::Mat3::identity);
    let (_, f_s) = model.canonical.geometry_eval(&x_c, shape);
    SurfaceTarget {
        x_c,
        normal_map,
        f_s,
        color,
        normal,
    }
}

/// Stage-2 targets of one scan given the subject's extracted canonical mesh.
pub fn stage2_target(model: &HeadFieldModel, scan: &Scan, canonical_mesh: &Mesh, cfg: &TrainConfig) -> Result<Stage2Target> {
    let samples = scan
        .samples
        .as_ref()
        .ok_or_else(|| Error::contract("scan has no training samples"))?;
    let z = model.latent(scan.subject_id)?;
    let shape = model.canonical.shape_context(&z.z_shape)?;
    let ctx = model.pose_context(&scan.params)?;
    let n = samples.surface_points.len().min(cfg.stage2_points);
    let idx: Vec<usize> = (0..n).collect();
    let points: Vec<SurfaceTarget> = crate::par::map(&idx, |&i| {
        let x_d = samples.surface_points[i];
        let occ = |c: &Vec3| model.canonical.occupancy(c, &shape);
        model
            .deform
            .canonical_correspondence(&x_d, &ctx, Some(&occ))
            .x_c
            .map(|x_c| surface_target(model, &ctx, &shape, x_c, samples.surface_colors[i], samples.surface_normals[i]))
    })
    .into_iter()
    .flatten()
    .collect();

    let mut pixels = Vec::new();
    let (mut const_color, mut const_normal, mut total) = (0.0, 0.0, 0);
    if !canonical_mesh.is_empty() {
        let deformed = Mesh::new(model.deform.deform_points(&canonical_mesh.vertices, &ctx), canonical_mesh.faces.clone());
        let normals = deformed.compute_vertex_normals();
        let colors = vec![Vec3::zeros(); deformed.vertices.len()];
        for cam in camera_rig(EXTRACT_HALF, cfg.render_res) {
            let gt = render_scan(scan, &cam)?;
            let r = render_mesh(&deformed, &colors, &normals, Some(&canonical_mesh.vertices), &cam)?;
            total += gt.rgb.len();
            let masked: Vec<usize> = (0..gt.rgb.len()).filter(|&p| r.mask[p]).collect();
            for p in 0..gt.rgb.len() {
                if !r.mask[p] {
                    const_color += (gt.rgb[p] - Vec3::repeat(BACKGROUND)).norm_squared();
                    const_normal += gt.normal[p].norm_squared();
                }
            }
            pixels.extend(crate::par::map(&masked, |&p| {
                let x_c = r.canonical[p].expect("rasterized with canonical positions");
                surface_target(model, &ctx, &shape, x_c, gt.rgb[p], gt.normal[p])
            }));
        }
    } else {
        for cam in camera_rig(EXTRACT_HALF, cfg.render_res) {
            let gt = render_scan(scan, &cam)?;
            total += gt.rgb.len();
            for p in 0..gt.rgb.len() {
                const_color += (gt.rgb[p] - Vec3::repeat(BACKGROUND)).norm_squared();
                const_normal += gt.normal[p].norm_squared();
            }
        }
    }
    Ok(Stage2Target {
        subject: scan.subject_id,
        params: scan.params.clone(),
        points,
        pixels,
        const_color,
        const_normal,
        total_pixels: total,
    })
}

pub fn stage2_targets(model: &HeadFieldModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<Stage2Target>> {
    let mut meshes: BTreeMap<usize, Mesh> = BTreeMap::new();
    let mut out = Vec::new();
    for scan in &dataset.train {
        if !meshes.contains_key(&scan.subject_id) {
            let m = model.canonical_geometry(model.latent(scan.subject_id)?, cfg.stage2_mesh_res)?;
            meshes.insert(scan.subject_id, m);
        }
        out.push(stage2_target(model, scan, &meshes[&scan.subject_id], cfg)?);
    }
    Ok(out)
}

pub fn init_model(dataset: &Dataset, cfg: &TrainConfig) -> Result<HeadFieldModel> {
    let (mc, _) = cfg.resolved();
    let subjects = dataset.train.iter().map(|s| s.subject_id + 1).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    HeadFieldModel::new(mc, dataset.head.clone(), subjects, &mut rng)
}

fn epoch_rng(seed: u64, stage: u8, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((stage as u64) << 40)
            .wrapping_add(epoch as u64),
    )
}

fn subset<R: Rng>(rng: &mut R, len: usize, k: usize) -> Vec<usize> {
    if k >= len {
        return (0..len).collect();
    }
    let mut v = rand::seq::index::sample(rng, len, k).into_vec();
    v.sort_unstable();
    v
}

/// Latent slices trained in a stage: `z_shape` in stage 1, `[z_detail, z_color]` in stage 2.
fn latent_range(model: &HeadFieldModel, stage: u8) -> std::ops::Range<usize> {
    let c = &model.config.canonical;
    if stage == 1 {
        0..c.n_shape
    } else {
        c.n_shape..c.n_shape + c.n_detail + c.n_color
    }
}

fn init_optimizer(model: &HeadFieldModel, stage: u8, cfg: &TrainConfig) -> Vec<Adam> {
    let lat = latent_range(model, stage).len() * model.latents.len();
    if stage == 1 {
        vec![
            Adam::new(model.canonical.volume.generator.parameter_count(), cfg.lr),
            Adam::new(model.canonical.geometry.parameter_count(), cfg.lr),
            Adam::new(model.deform.shape_net.parameter_count(), cfg.lr),
            Adam::new(model.deform.bases_net.parameter_count(), cfg.lr),
            Adam::new(lat, cfg.lr_latent),
        ]
    } else {
        vec![
            Adam::new(model.canonical.normal.parameter_count(), cfg.lr),
            Adam::new(model.canonical.texture.parameter_count(), cfg.lr),
            Adam::new(lat, cfg.lr_latent),
        ]
    }
}

fn step(model: &mut HeadFieldModel, grads: &ModelGrads, opt: &mut [Adam], stage: u8) -> Result<()> {
    fn upd(net: &mut crate::neuralnet::Mlp, g: &[f64], adam: &mut Adam) -> Result<()> {
        let mut p = net.params().to_vec();
        adam.update(&mut p, g)?;
        net.params_mut().copy_from_slice(&p);
        Ok(())
    }
    let range = latent_range(model, stage);
    let (nets, lat_opt) = opt.split_at_mut(opt.len() - 1);
    if stage == 1 {
        upd(&mut model.canonical.volume.generator, &grads.canonical.volume, &mut nets[0])?;
        upd(&mut model.canonical.geometry, &grads.canonical.geometry, &mut nets[1])?;
        upd(&mut model.deform.shape_net, &grads.deform.shape, &mut nets[2])?;
        upd(&mut model.deform.bases_net, &grads.deform.bases, &mut nets[3])?;
    } else {
        upd(&mut model.canonical.normal, &grads.canonical.normal, &mut nets[0])?;
        upd(&mut model.canonical.texture, &grads.canonical.texture, &mut nets[1])?;
    }
    let mut p = Vec::new();
    let mut g = Vec::new();
    for (e, ge) in model.latents.entries.iter().zip(&grads.latents) {
        p.extend_from_slice(&e.flat()[range.clone()]);
        g.extend_from_slice(&ge[range.clone()]);
    }
    lat_opt[0].update(&mut p, &g)?;
    let w = range.len();
    for (s, e) in model.latents.entries.iter_mut().enumerate() {
        let mut flat = e.flat();
        flat[range.clone()].copy_from_slice(&p[s * w..(s + 1) * w]);
        e.set_flat(&flat);
    }
    Ok(())
}

fn nan_abort(dir: Option<&Path>, stage: u8, epoch: usize, scans: &[usize], detail: serde_json::Value) -> Error {
    if let Some(d) = dir {
        let dump = serde_json::json!({ "stage": stage, "epoch": epoch, "scans": scans, "terms": detail });
        let _ = data::write_json(&d.join(checkpoint::NAN_DUMP_FILE), &dump);
    }
    Error::NumericFailure(format!("non-finite loss in stage {stage}, epoch {epoch}, scans {scans:?}"))
}

fn terms_map<T: Serialize>(t: &T) -> BTreeMap<String, f64> {
    let v = serde_json::to_value(t).expect("plain struct");
    v.as_object()
        .map(|o| o.iter().filter_map(|(k, v)| v.as_f64().map(|x| (k.clone(), x))).collect())
        .unwrap_or_default()
}

/// Runs (or resumes) one training stage.
///
/// Stage 1 starts fresh when `from` is `None`; stage 2 requires a stage-1 checkpoint.
/// With `dir`, a checkpoint and a metrics line are written after every epoch.
pub fn train_stage(
    stage: u8,
    dataset: &Dataset,
    cfg: &TrainConfig,
    from: Option<Checkpoint>,
    dir: Option<&Path>,
    progress: Option<&dyn Fn(&EpochLog)>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let _lock = dir.map(checkpoint::DirLock::acquire).transpose()?;
    if let Some(d) = dir {
        data::write_json(&d.join(checkpoint::CONFIG_FILE), cfg)?;
    }
    let (mc, w) = cfg.resolved();
    let mut ck = match (stage, from) {
        (1, None) => {
            let model = init_model(dataset, cfg)?;
            Checkpoint {
                stage: 1,
                epochs_done: 0,
                config: cfg.clone(),
                optimizer: init_optimizer(&model, 1, cfg),
                model,
                log: Vec::new(),
            }
        }
        (1, Some(ck)) if ck.stage == 1 => ck,
        (2, Some(ck)) if ck.stage == 1 => Checkpoint {
            stage: 2,
            epochs_done: 0,
            config: cfg.clone(),
            optimizer: init_optimizer(&ck.model, 2, cfg),
            model: ck.model,
            log: ck.log,
        },
        (2, Some(ck)) if ck.stage == 2 => ck,
        (2, None) => return Err(Error::contract("stage 2 requires a stage-1 checkpoint")),
        (s, Some(ck)) => {
            return Err(Error::contract(format!(
                "cannot run stage {s} from a stage-{} checkpoint",
                ck.stage
            )))
        }
        (s, None) => return Err(Error::invalid(format!("unknown stage {s}"))),
    };
    if ck.model.config != mc {
        return Err(Error::invalid("model configuration differs from the checkpoint"));
    }
    ck.config = cfg.clone();
    let theta_c = mc.deform.canonical_theta.clone();
    let epochs = if stage == 1 { cfg.epochs_stage1 } else { cfg.epochs_stage2 };

    if stage == 1 {
        let shared = shared_targets(&dataset.head, &theta_c)?;
        let targets: Vec<Stage1Target> = dataset
            .train
            .iter()
            .map(|s| stage1_target(&dataset.head, s, &theta_c))
            .collect::<Result<_>>()?;
        let nv = dataset.head.num_vertices();
        if ck.epochs_done == 0 && cfg.warmup_steps > 0 && w.lbs + w.deshape > 0.0 {
            let mut rng = epoch_rng(cfg.seed, 1, usize::MAX);
            let mut order: Vec<usize> = Vec::new();
            for _ in 0..cfg.warmup_steps {
                if order.len() < cfg.batch_stage1 {
                    let mut more: Vec<usize> = (0..targets.len()).collect();
                    more.shuffle(&mut rng);
                    order.extend(more);
                }
                let chunk: Vec<usize> = order.drain(..cfg.batch_stage1.min(order.len())).collect();
                let items: Vec<Stage1Item> = chunk
                    .iter()
                    .map(|&i| Stage1Item {
                        target: &targets[i],
                        points: Vec::new(),
                        vertices: subset(&mut rng, nv, cfg.vertices_per_scan),
                        aux: false,
                    })
                    .collect();
                let (terms, grads) = loss_stage1(&ck.model, &shared, &items, &w, true)?;
                let grads = grads.expect("requested");
                if !terms.total.is_finite() || !grads.all_finite() {
                    return Err(nan_abort(dir, 1, 0, &chunk, serde_json::to_value(&terms).unwrap_or_default()));
                }
                step(&mut ck.model, &grads, &mut ck.optimizer, 1)?;
            }
        }
        for epoch in ck.epochs_done..epochs {
            let mut rng = epoch_rng(cfg.seed, 1, epoch);
            let mut order: Vec<usize> = (0..targets.len()).collect();
            order.shuffle(&mut rng);
            let mut sum = Stage1Terms::default();
            let mut batches = 0.0;
            for chunk in order.chunks(cfg.batch_stage1) {
                let items: Vec<Stage1Item> = chunk
                    .iter()
                    .map(|&i| Stage1Item {
                        target: &targets[i],
                        points: subset(&mut rng, targets[i].points.len(), cfg.points_per_scan),
                        vertices: subset(&mut rng, nv, cfg.vertices_per_scan),
                        aux: epoch < cfg.aux_epochs && w.aux > 0.0,
                    })
                    .collect();
                let (terms, grads) = loss_stage1(&ck.model, &shared, &items, &w, true)?;
                let grads = grads.expect("requested");
                if !terms.total.is_finite() || !grads.all_finite() {
                    return Err(nan_abort(dir, 1, epoch, chunk, serde_json::to_value(&terms).unwrap_or_default()));
                }
                step(&mut ck.model, &grads, &mut ck.optimizer, 1)?;
                add_terms1(&mut sum, &terms);
                batches += 1.0;
            }
            ck.model.latents.trained = true;
            let mut m = terms_map(&scale_terms1(&sum, 1.0 / batches));
            m.insert(
                "converged_fraction".into(),
                sum.converged as f64 / sum.points.max(1) as f64,
            );
            finish_epoch(&mut ck, 1, epoch, m, dir, progress)?;
        }
    } else {
        let targets = stage2_targets(&ck.model, dataset, cfg)?;
        for epoch in ck.epochs_done..epochs {
            let mut rng = epoch_rng(cfg.seed, 2, epoch);
            let mut order: Vec<usize> = (0..targets.len()).collect();
            order.shuffle(&mut rng);
            let mut sum = Stage2Terms::default();
            let mut batches = 0.0;
            for chunk in order.chunks(cfg.batch_stage2) {
                let items: Vec<Stage2Item> = chunk
                    .iter()
                    .map(|&i| Stage2Item {
                        target: &targets[i],
                        points: subset(&mut rng, targets[i].points.len(), cfg.points_per_step),
                        pixels: subset(&mut rng, targets[i].pixels.len(), cfg.pixels_per_step),
                    })
                    .collect();
                let (terms, grads) = loss_stage2(&ck.model, &items, &w, true)?;
                let grads = grads.expect("requested");
                if !terms.total.is_finite() || !grads.all_finite() {
                    return Err(nan_abort(dir, 2, epoch, chunk, serde_json::to_value(&terms).unwrap_or_default()));
                }
                step(&mut ck.model, &grads, &mut ck.optimizer, 2)?;
                sum.total += terms.total;
                sum.color_image += terms.color_image;
                sum.color_point += terms.color_point;
                sum.normal_image += terms.normal_image;
                sum.normal_point += terms.normal_point;
                sum.reg += terms.reg;
                batches += 1.0;
            }
            let mut m = terms_map(&sum);
            m.values_mut().for_each(|v| *v /= batches);
            finish_epoch(&mut ck, 2, epoch, m, dir, progress)?;
        }
    }
    Ok(ck)
}

fn add_terms1(sum: &mut Stage1Terms, t: &Stage1Terms) {
    sum.total += t.total;
    sum.occ += t.occ;
    sum.deshape += t.deshape;
    sum.lbs += t.lbs;
    sum.reg += t.reg;
    sum.aux += t.aux;
    sum.converged += t.converged;
    sum.points += t.points;
}

fn scale_terms1(t: &Stage1Terms, s: f64) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("total", t.total * s),
        ("occ", t.occ * s),
        ("deshape", t.deshape * s),
        ("lbs", t.lbs * s),
        ("reg", t.reg * s),
        ("aux", t.aux * s),
    ])
}

fn finish_epoch(
    ck: &mut Checkpoint,
    stage: u8,
    epoch: usize,
    terms: BTreeMap<String, f64>,
    dir: Option<&Path>,
    progress: Option<&dyn Fn(&EpochLog)>,
) -> Result<()> {
    let log = EpochLog {
        stage,
        epoch,
        loss: terms.get("total").copied().unwrap_or(f64::NAN),
        terms,
    };
    ck.epochs_done = epoch + 1;
    ck.log.push(log.clone());
    if let Some(d) = dir {
        ck.save(&d.join(checkpoint::checkpoint_file(stage)))?;
        checkpoint::append_metrics(d, &log)?;
    }
    if let Some(p) = progress {
        p(&log);
    }
    Ok(())
}

/// End-of-stage-1 quality measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Eval {
    /// Mean per-point BCE over the evaluated training points.
    pub bce: f64,
    /// Mean bases error over all canonical vertices of all training subjects.
    pub bases_mse: f64,
    /// Canonical occupancy IoU per training subject.
    pub iou: Vec<f64>,
    pub converged_fraction: f64,
}

/// Bases error of the learned bundle at every canonical vertex, averaged over subjects.
pub fn bases_mse(model: &HeadFieldModel, dataset: &Dataset, w: &LossWeights) -> Result<f64> {
    let theta_c = &model.config.deform.canonical_theta;
    let shared = shared_targets(&dataset.head, theta_c)?;
    let mut subjects: Vec<(usize, &[f64])> = dataset.train.iter().map(|s| (s.subject_id, s.params.beta.as_slice())).collect();
    subjects.dedup_by_key(|s| s.0);
    let mut total = 0.0;
    for (_, beta) in &subjects {
        let canon = canonical_gt_mesh(&dataset.head, beta, theta_c)?;
        let errs = crate::par::map_range(canon.vertices.len(), |v| {
            bases_error(&model.deform.continuous_bases(&canon.vertices[v], beta), &shared.bundles[v], w)
        });
        total += errs.iter().sum::<f64>() / errs.len() as f64;
    }
    Ok(total / subjects.len().max(1) as f64)
}

/// Canonical occupancy IoU of one subject against its ground-truth canonical mesh.
pub fn canonical_iou(model: &HeadFieldModel, head: &TemplateModel, subject: usize, beta: &[f64], res: usize) -> Result<f64> {
    let canon = canonical_gt_mesh(head, beta, &model.config.deform.canonical_theta)?;
    let grid = Grid::cube(EXTRACT_HALF, res);
    let gt: Vec<bool> = label_cell_centers(&canon, &grid)?.into_iter().map(|v| v == 1).collect();
    let shape = model.canonical.shape_context(&model.latent(subject)?.z_shape)?;
    let pred: Vec<bool> = model
        .canonical_occupancy(&shape, &grid.cell_centers())
        .into_iter()
        .map(|o| o > crate::geomio::marching::OCCUPANCY_LEVEL)
        .collect();
    Ok(occupancy_iou(&pred, &gt))
}

pub fn evaluate_stage1(model: &HeadFieldModel, dataset: &Dataset, cfg: &TrainConfig, points_per_scan: usize, iou_res: usize) -> Result<Stage1Eval> {
    let (_, w) = cfg.resolved();
    let theta_c = model.config.deform.canonical_theta.clone();
    let shared = shared_targets(&dataset.head, &theta_c)?;
    let mut bce = 0.0;
    let mut conv = 0;
    let mut pts = 0;
    for scan in &dataset.train {
        let t = stage1_target(&dataset.head, scan, &theta_c)?;
        let n = t.points.len();
        let k = points_per_scan.min(n).max(1);
        let idx: Vec<usize> = (0..k).map(|i| i * n / k).collect();
        let item = Stage1Item {
            target: &t,
            points: idx,
            vertices: Vec::new(),
            aux: false,
        };
        let terms = loss::stage1_item(model, &shared, &item, &w, 1.0, None)?;
        bce += terms.occ;
        conv += terms.converged;
        pts += terms.points;
    }
    let mut iou = Vec::new();
    let mut seen = Vec::new();
    for scan in &dataset.train {
        if seen.contains(&scan.subject_id) {
            continue;
        }
        seen.push(scan.subject_id);
        iou.push(canonical_iou(model, &dataset.head, scan.subject_id, &scan.params.beta, iou_res)?);
    }
    Ok(Stage1Eval {
        bce: bce / dataset.train.len().max(1) as f64,
        bases_mse: bases_mse(model, dataset, &w)?,
        iou,
        converged_fraction: conv as f64 / pts.max(1) as f64,
    })
}
