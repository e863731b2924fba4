//! Fitting latent codes of a trained model to an unseen scan, and reconstruction metrics.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canonical::LatentTriplet;
use crate::error::{Error, Result};
use crate::geomio::metrics::{chamfer_and_fscore, color_distance, MetricOptions, RegionMask, DEFAULT_SAMPLES, DEFAULT_TAU};
use crate::geomio::{Mesh, Scan};
use crate::headmodel::{HeadParams, TemplateModel};
use crate::math::{Mat3, Vec3};
use crate::neuralnet::{sigmoid, Adam};
use crate::train::loss::{bce_logit, shade_backward, shade_tape, SurfaceTarget};
use crate::train::{Extraction, HeadFieldModel};

/// Distance from the posed facial vertices that still counts as face.
pub const FACE_RADIUS: f64 = 0.05;
/// Chamfer values are reported multiplied by this factor.
pub const CHAMFER_REPORT_SCALE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Occupancy points per iteration.
    pub occ_points: usize,
    /// Colored surface points per iteration.
    pub surface_points: usize,
    pub lambda_color: f64,
    pub lambda_normal: f64,
    pub lambda_reg: f64,
    /// Abort when the loss exceeds this multiple of the initial loss.
    pub divergence_factor: f64,
    /// Marching-cubes resolution for evaluation meshes.
    pub eval_res: usize,
    pub metric_samples: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 400,
            lr: 5e-3,
            occ_points: 512,
            surface_points: 256,
            lambda_color: 1.0,
            lambda_normal: 1.0,
            lambda_reg: 1e-3,
            divergence_factor: 10.0,
            eval_res: 128,
            metric_samples: DEFAULT_SAMPLES,
            seed: 0,
        }
    }
}

/// One metrics row per (scan, region). Failed rows carry NaN values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scan: String,
    pub region: String,
    /// Symmetric Chamfer distance times [`CHAMFER_REPORT_SCALE`].
    pub chamfer: f64,
    pub fscore: f64,
    pub color: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub latents: LatentTriplet,
    /// Loss before every update followed by the final loss.
    pub trace: Vec<f64>,
    pub metrics: Vec<MetricsRow>,
}

/// Face region of a model posed with `params`.
pub fn face_mask(head: &TemplateModel, params: &HeadParams) -> Result<RegionMask> {
    let posed = head.posed_vertices(params)?;
    let centers: Vec<Vec3> = head.face_region.iter().map(|&v| posed[v as usize]).collect();
    Ok(RegionMask::new(&centers, FACE_RADIUS))
}

struct FitData {
    occ: Vec<(Vec3, f64)>,
    surface: Vec<(Vec3, Mat3, Vec3, Vec3)>,
}

fn prepare(model: &HeadFieldModel, scan: &Scan, init: &LatentTriplet) -> Result<FitData> {
    let samples = scan
        .samples
        .as_ref()
        .ok_or_else(|| Error::contract("scan has no samples"))?;
    let ctx = model.pose_context(&scan.params)?;
    let shape = model.canonical.shape_context(&init.z_shape)?;
    let occ_fn = |c: &Vec3| model.canonical.occupancy(c, &shape);
    let occ = crate::par::map_range(samples.points.len(), |i| {
        model
            .deform
            .canonical_correspondence(&samples.points[i], &ctx, Some(&occ_fn))
            .x_c
            .map(|c| (c, samples.occ[i] as f64))
    })
    .into_iter()
    .flatten()
    .collect();
    let surface = crate::par::map_range(samples.surface_points.len(), |i| {
        let r = model.deform.canonical_correspondence(&samples.surface_points[i], &ctx, Some(&occ_fn));
        r.x_c.map(|c| {
            let j = model.deform.jacobian(&c, &ctx);
            let m = j.try_inverse().map(|m| m.transpose()).unwrap_or_else(Mat3::identity);
            (c, m, samples.surface_colors[i], samples.surface_normals[i])
        })
    })
    .into_iter()
    .flatten()
    .collect();
    Ok(FitData { occ, surface })
}

/// Fitting objective and its gradient with respect to the flattened codes.
fn fit_loss(
    model: &HeadFieldModel,
    data: &FitData,
    z: &LatentTriplet,
    params: &HeadParams,
    occ_idx: &[usize],
    surf_idx: &[usize],
    cfg: &FitConfig,
) -> Result<(f64, Vec<f64>)> {
    let canonical = &model.canonical;
    let c = &canonical.config;
    let shape = canonical.shape_context_tape(&z.z_shape)?;
    let mut grid_grad = vec![0.0; shape.grid.values.len()];
    let mut scratch = canonical.zero_grads();
    let mut loss = 0.0;
    let no = occ_idx.len().max(1) as f64;
    for &i in occ_idx {
        let (x, y) = data.occ[i];
        let gt = canonical.geometry_tape(&x, &shape);
        let l = gt.logit();
        loss += bce_logit(l, y) / no;
        canonical.geometry_backward(&shape, &gt, (sigmoid(l) - y) / no, None, None, Some(&mut grid_grad))?;
    }
    let ns = surf_idx.len().max(1) as f64;
    let mut dz_detail = vec![0.0; c.n_detail];
    let mut dz_color = vec![0.0; c.n_color];
    for &i in surf_idx {
        let (x, m, col, nrm) = data.surface[i];
        let gt = canonical.geometry_tape(&x, &shape);
        let target = SurfaceTarget {
            x_c: x,
            normal_map: m,
            f_s: gt.f_s().to_vec(),
            color: col,
            normal: nrm,
        };
        let st = shade_tape(canonical, &target, z, params);
        let dc = st.color - col;
        loss += (cfg.lambda_color * dc.norm_squared() + cfg.lambda_normal * (1.0 - nrm.dot(&st.normal))) / ns;
        let sg = shade_backward(
            canonical,
            &target,
            &st,
            &(dc * (2.0 * cfg.lambda_color / ns)),
            &(-nrm * (cfg.lambda_normal / ns)),
            &mut scratch,
        )?;
        for (a, b) in dz_detail.iter_mut().zip(&sg.dz_detail) {
            *a += b;
        }
        for (a, b) in dz_color.iter_mut().zip(&sg.dz_color) {
            *a += b;
        }
        canonical.geometry_backward(&shape, &gt, 0.0, Some(&sg.d_fs), None, Some(&mut grid_grad))?;
    }
    let (es, ed, ec) = z.energies();
    loss += cfg.lambda_reg * (es + ed + ec);
    let dz_shape = canonical.shape_backward(&shape, &grid_grad, None)?;
    let mut grad = Vec::with_capacity(c.n_shape + c.n_detail + c.n_color);
    grad.extend(dz_shape);
    grad.extend(dz_detail);
    grad.extend(dz_color);
    for (g, v) in grad.iter_mut().zip(z.flat()) {
        *g += 2.0 * cfg.lambda_reg * v;
    }
    Ok((loss, grad))
}

fn pick(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<usize> {
    if k >= len {
        return (0..len).collect();
    }
    let mut v = rand::seq::index::sample(rng, len, k).into_vec();
    v.sort_unstable();
    v
}

/// Optimizes the three codes of `model` (weights frozen) to explain `scan`.
pub fn fit_scan(scan: &Scan, model: &HeadFieldModel, cfg: &FitConfig, name: &str) -> Result<FitResult> {
    let latents = fit_latents(scan, model, cfg)?;
    let metrics = eval_fit(model, &latents.0, scan, cfg, name)?;
    Ok(FitResult {
        latents: latents.0,
        trace: latents.1,
        metrics,
    })
}

/// The optimization part of [`fit_scan`]: returns the codes and the loss trace.
pub fn fit_latents(scan: &Scan, model: &HeadFieldModel, cfg: &FitConfig) -> Result<(LatentTriplet, Vec<f64>)> {
    scan.params.validate(model.head.n_beta)?;
    let mut z = model.latents.mean()?;
    let data = prepare(model, scan, &z)?;
    if data.occ.is_empty() {
        return Err(Error::contract("no occupancy sample has a canonical correspondence"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(z.flat().len(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    for it in 0..=cfg.iterations {
        let oi = pick(&mut rng, data.occ.len(), cfg.occ_points);
        let si = pick(&mut rng, data.surface.len(), cfg.surface_points);
        let (loss, grad) = fit_loss(model, &data, &z, &scan.params, &oi, &si, cfg)?;
        trace.push(loss);
        if !loss.is_finite() || loss > cfg.divergence_factor * trace[0] {
            let tail: Vec<String> = trace.iter().rev().take(5).rev().map(|v| format!("{v:.6}")).collect();
            return Err(Error::NumericFailure(format!(
                "fit diverged at iteration {it}: loss trace ... {}",
                tail.join(", ")
            )));
        }
        if it == cfg.iterations {
            break;
        }
        let mut flat = z.flat();
        adam.update(&mut flat, &grad)?;
        z.set_flat(&flat);
    }
    Ok((z, trace))
}

/// Deformed reconstruction of `latents` under the scan's parameters.
pub fn reconstruct(model: &HeadFieldModel, latents: &LatentTriplet, scan: &Scan, res: usize) -> Result<Mesh> {
    model.deformed_mesh(latents, &scan.params, res, Extraction::Forward)
}

/// Metric rows (full avatar, face) of a predicted mesh against a scan.
pub fn metric_rows(pred: &Mesh, scan: &Scan, head: &TemplateModel, cfg: &FitConfig, name: &str) -> Result<Vec<MetricsRow>> {
    let face = face_mask(head, &scan.params)?;
    let mut rows = Vec::new();
    for (region, mask) in [("full", None), ("face", Some(&face))] {
        let opts = MetricOptions {
            tau: DEFAULT_TAU,
            samples: cfg.metric_samples,
            seed: cfg.seed,
            region: mask,
        };
        let row = if pred.is_empty() {
            MetricsRow {
                scan: name.to_string(),
                region: region.into(),
                chamfer: f64::NAN,
                fscore: f64::NAN,
                color: f64::NAN,
                ok: false,
            }
        } else {
            let g = chamfer_and_fscore(pred, &scan.mesh, &opts)?;
            let c = color_distance(pred, &scan.mesh, &opts)?;
            MetricsRow {
                scan: name.to_string(),
                region: region.into(),
                chamfer: g.chamfer * CHAMFER_REPORT_SCALE,
                fscore: g.fscore,
                color: c,
                ok: true,
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Extracts the fitted avatar at `cfg.eval_res` and scores it against the scan.
pub fn eval_fit(model: &HeadFieldModel, latents: &LatentTriplet, scan: &Scan, cfg: &FitConfig, name: &str) -> Result<Vec<MetricsRow>> {
    let pred = reconstruct(model, latents, scan, cfg.eval_res)?;
    metric_rows(&pred, scan, &model.head, cfg, name)
}

/// Best full-avatar Chamfer (reporting scale) among training-subject reconstructions.
pub fn nearest_training_baseline(model: &HeadFieldModel, scan: &Scan, cfg: &FitConfig) -> Result<(usize, f64)> {
    let mut best = (usize::MAX, f64::INFINITY);
    for (s, z) in model.latents.entries.iter().enumerate() {
        let pred = reconstruct(model, z, scan, cfg.eval_res)?;
        if pred.is_empty() {
            continue;
        }
        let opts = MetricOptions {
            tau: DEFAULT_TAU,
            samples: cfg.metric_samples,
            seed: cfg.seed,
            region: None,
        };
        let c = chamfer_and_fscore(&pred, &scan.mesh, &opts)?.chamfer * CHAMFER_REPORT_SCALE;
        if c < best.1 {
            best = (s, c);
        }
    }
    if best.0 == usize::MAX {
        return Err(Error::contract("no training subject produced a surface"));
    }
    Ok(best)
}

pub const CSV_HEADER: &str = "scan,region,chamfer_x100,fscore,color,status";

pub fn write_csv(rows: &[MetricsRow], out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.scan,
            r.region,
            r.chamfer,
            r.fscore,
            r.color,
            if r.ok { "ok" } else { "failed" }
        )?;
    }
    Ok(())
}

pub fn save_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(rows, &mut f).map_err(|e| Error::io(path, e))
}

/// Mean row per region over successful rows, in first-seen region order.
pub fn aggregate(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    let mut regions: Vec<String> = Vec::new();
    for r in rows {
        if !regions.contains(&r.region) {
            regions.push(r.region.clone());
        }
    }
    regions
        .into_iter()
        .map(|reg| {
            let ok: Vec<&MetricsRow> = rows.iter().filter(|r| r.region == reg && r.ok).collect();
            let n = ok.len() as f64;
            let mean = |f: fn(&MetricsRow) -> f64| if ok.is_empty() { f64::NAN } else { ok.iter().map(|r| f(r)).sum::<f64>() / n };
            MetricsRow {
                scan: "mean".into(),
                region: reg,
                chamfer: mean(|r| r.chamfer),
                fscore: mean(|r| r.fscore),
                color: mean(|r| r.color),
                ok: !ok.is_empty(),
            }
        })
        .collect()
}
