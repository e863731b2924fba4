//! Command implementations shared by the binary and the tests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use headfield::canonical::{interpolate_latents, LatentTriplet};
use headfield::fit::{self, MetricsRow};
use headfield::geomio::io::{write_obj, write_ply, PlyFormat};
use headfield::geomio::marching::{polygonize, Grid};
use headfield::geomio::metrics::occupancy_iou;
use headfield::geomio::Mesh;
use headfield::headmodel::{HeadParams, EXPR_DIM, JAW, NECK};
use headfield::math::Vec3;
use headfield::render::{camera_rig, render_mesh, Channel};
use headfield::train::checkpoint::checkpoint_file;
use headfield::train::data::{prepare_output_dir, write_json};
use headfield::train::{self, Checkpoint, Dataset, EpochLog, HeadFieldModel, EXTRACT_HALF};
use headfield::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Preset, Settings};

pub const GENERATE_LOG: &str = "generate.jsonl";
pub const FRAMES_LOG: &str = "frames.jsonl";
pub const INTERP_LOG: &str = "interp.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const BASELINE_CSV: &str = "baseline.csv";
pub const TRACES_LOG: &str = "traces.jsonl";

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let line = serde_json::to_string(value).map_err(|e| Error::format(path, e.to_string()))?;
    writeln!(f, "{line}").map_err(io_err(path))
}

fn load_model(checkpoint: &Path) -> Result<HeadFieldModel> {
    Ok(Checkpoint::load(checkpoint)?.model)
}

/// Writes a scaled dataset: scans, parameters, sample caches and a hashed manifest.
pub fn cmd_synth_data(s: &Settings, out: &Path, force: bool) -> Result<train::data::Manifest> {
    let ds = Dataset::synthesize(&s.data)?;
    prepare_output_dir(out, force)?;
    s.snapshot(out)?;
    ds.save(out, true)
}

/// Options of the `train` command beyond the settings.
#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub stage: u8,
    pub data: PathBuf,
    /// Continue from the stage's own checkpoint in the output directory.
    pub resume: bool,
    /// Stage-1 checkpoint for stage 2 (defaults to the one in the output directory).
    pub from: Option<PathBuf>,
    pub quiet: bool,
}

pub fn cmd_train(s: &Settings, args: &TrainArgs, out: &Path, force: bool) -> Result<Checkpoint> {
    let ds = Dataset::load(&args.data)?;
    let own = out.join(checkpoint_file(args.stage));
    let from = match args.stage {
        1 if args.resume && own.exists() => Some(Checkpoint::load(&own)?),
        1 => {
            prepare_output_dir(out, force)?;
            None
        }
        2 if args.resume && own.exists() => Some(Checkpoint::load(&own)?),
        2 => {
            let p = args.from.clone().unwrap_or_else(|| out.join(checkpoint_file(1)));
            if !p.exists() {
                return Err(Error::contract(format!(
                    "stage 2 requires a stage-1 checkpoint ({} not found)",
                    p.display()
                )));
            }
            fs::create_dir_all(out).map_err(io_err(out))?;
            Some(Checkpoint::load(&p)?)
        }
        s => return Err(Error::invalid(format!("unknown stage {s}"))),
    };
    s.snapshot(out)?;
    let quiet = args.quiet;
    let progress = move |l: &EpochLog| {
        if !quiet {
            eprintln!("stage {} epoch {} loss {:.6}", l.stage, l.epoch, l.loss);
        }
    };
    train::train_stage(args.stage, &ds, &s.train, from, Some(out), Some(&progress))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateRecord {
    pub index: usize,
    pub vertices: usize,
    pub faces: usize,
    pub area: f64,
    pub mean_color: [f64; 3],
    /// Covered pixels per rig view.
    pub coverage: Vec<usize>,
    /// Vertices per argmax skinning joint.
    pub joint_counts: Vec<usize>,
}

/// Samples codes from the latent statistics and exports canonical meshes with renders.
pub fn cmd_generate(s: &Settings, checkpoint: &Path, out: &Path, force: bool) -> Result<Vec<GenerateRecord>> {
    let model = load_model(checkpoint)?;
    let g = &s.generate;
    if g.res < 8 || g.render_res == 0 {
        return Err(Error::invalid("generate.res must be at least 8 and generate.render_res positive"));
    }
    prepare_output_dir(out, force)?;
    s.snapshot(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let beta = vec![0.0; model.head.n_beta];
    let mut records = Vec::with_capacity(g.count);
    for i in 0..g.count {
        let z = model.latents.sample_latents(&mut rng)?;
        write_json(&out.join(format!("sample_{i:03}.latents.json")), &z)?;
        let mesh = model.canonical_mesh(&z, g.res)?;
        let stem = out.join(format!("sample_{i:03}"));
        write_obj(&mesh, &stem.with_extension("obj"))?;
        write_ply(&mesh, &stem.with_extension("ply"), PlyFormat::BinaryLittleEndian)?;
        let weight_colors = model.weight_colors(&mesh.vertices, &beta);
        let mut joint_counts = vec![0; headfield::headmodel::NUM_JOINTS];
        for c in &weight_colors {
            let k = train::model::JOINT_PALETTE
                .iter()
                .position(|p| Vec3::from(*p) == *c)
                .expect("palette color");
            joint_counts[k] += 1;
        }
        let mut weights_mesh = mesh.clone();
        weights_mesh.colors = Some(weight_colors);
        write_ply(&weights_mesh, &out.join(format!("sample_{i:03}_weights.ply")), PlyFormat::BinaryLittleEndian)?;
        let mut coverage = Vec::new();
        if !mesh.is_empty() {
            let colors = mesh.colors.clone().unwrap_or_default();
            let normals = mesh.normals.clone().unwrap_or_default();
            for (v, cam) in camera_rig(EXTRACT_HALF, g.render_res).iter().enumerate() {
                let r = render_mesh(&mesh, &colors, &normals, None, cam)?;
                r.save_png(&out.join(format!("sample_{i:03}_view{v}.png")), Channel::Rgb)?;
                coverage.push(r.coverage());
            }
        }
        let mean_color = match &mesh.colors {
            Some(c) if !c.is_empty() => {
                let m = c.iter().fold(Vec3::zeros(), |a, b| a + b) / c.len() as f64;
                [m.x, m.y, m.z]
            }
            _ => [f64::NAN; 3],
        };
        let rec = GenerateRecord {
            index: i,
            vertices: mesh.vertices.len(),
            faces: mesh.faces.len(),
            area: mesh.surface_area(),
            mean_color,
            coverage,
            joint_counts,
        };
        append_line(&out.join(GENERATE_LOG), &rec)?;
        records.push(rec);
    }
    Ok(records)
}

/// Which codes and shape coefficients drive an animation.
#[derive(Clone, Debug, Default)]
pub struct AnimateArgs {
    /// Latent triplet JSON; a training subject's code when absent.
    pub latents: Option<PathBuf>,
    pub subject: usize,
    /// Dataset providing the subject's shape coefficients (zero otherwise).
    pub data: Option<PathBuf>,
    /// JSON list of frame parameters replacing the preset.
    pub params: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub jaw: f64,
    pub vertices: usize,
    pub faces: usize,
    /// Distance between the deformed upper and lower lip landmarks.
    pub mouth_gap: f64,
}

/// Frame parameters of a preset sweep.
pub fn preset_frames(preset: Preset, frames: usize, beta: &[f64], theta_c: &[f64]) -> Vec<HeadParams> {
    (0..frames)
        .map(|f| {
            let t = if frames > 1 { f as f64 / (frames - 1) as f64 } else { 0.0 };
            let mut p = HeadParams {
                beta: beta.to_vec(),
                theta: theta_c.to_vec(),
                psi: vec![0.0; EXPR_DIM],
            };
            p.theta[3 * JAW] = theta_c[3 * JAW] + 0.6 * t;
            if preset == Preset::Extreme {
                p.theta[3 * NECK + 1] = 0.6 * (2.0 * std::f64::consts::PI * t).sin();
                p.theta[3 * NECK] = 0.3 * t;
                for (j, v) in p.psi.iter_mut().take(10).enumerate() {
                    *v = 2.5 * t * if j % 2 == 0 { 1.0 } else { -1.0 };
                }
            }
            p
        })
        .collect()
}

pub fn cmd_animate(s: &Settings, checkpoint: &Path, args: &AnimateArgs, out: &Path, force: bool) -> Result<Vec<FrameRecord>> {
    let model = load_model(checkpoint)?;
    let a = &s.animate;
    if a.res < 8 {
        return Err(Error::invalid("animate.res must be at least 8"));
    }
    let z: LatentTriplet = match &args.latents {
        Some(p) => headfield::train::data::read_json(p)?,
        None => model.latent(args.subject)?.clone(),
    };
    let beta = match &args.data {
        Some(d) => {
            let ds = Dataset::load(d)?;
            let beta = ds
                .subject_scans(args.subject)
                .next()
                .map(|sc| sc.params.beta.clone());
            beta.ok_or_else(|| Error::invalid(format!("dataset has no scans of subject {}", args.subject)))?
        }
        None => vec![0.0; model.head.n_beta],
    };
    let theta_c = model.config.deform.canonical_theta.clone();
    let frames = match &args.params {
        Some(p) => headfield::train::data::read_json::<Vec<HeadParams>>(p)?,
        None => preset_frames(a.preset, a.frames, &beta, &theta_c),
    };
    for f in &frames {
        f.validate(model.head.n_beta)?;
    }
    prepare_output_dir(out, force)?;
    s.snapshot(out)?;
    write_json(&out.join("frames.params.json"), &frames)?;
    let canon = model.head.posed_vertices(&model.canonical_params(&beta))?;
    let lips = [canon[model.head.lips.upper as usize], canon[model.head.lips.lower as usize]];
    let mut records = Vec::with_capacity(frames.len());
    for (i, p) in frames.iter().enumerate() {
        let mesh = model.deformed_mesh(&z, p, a.res, a.extraction)?;
        write_ply(&mesh, &out.join(format!("frame_{i:03}.ply")), PlyFormat::BinaryLittleEndian)?;
        let ctx = model.pose_context(p)?;
        let gap = (model.deform.deform_point(&lips[0], &ctx) - model.deform.deform_point(&lips[1], &ctx)).norm();
        let rec = FrameRecord {
            frame: i,
            jaw: p.theta[3 * JAW],
            vertices: mesh.vertices.len(),
            faces: mesh.faces.len(),
            mouth_gap: gap,
        };
        append_line(&out.join(FRAMES_LOG), &rec)?;
        records.push(rec);
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpLog {
    pub subject_a: usize,
    pub subject_b: usize,
    pub steps: usize,
    /// Grid IoU between frames `i` and `i + 1`.
    pub consecutive_iou: Vec<f64>,
    pub endpoint_iou: f64,
}

/// Canonical occupancy at the nodes of the extraction grid.
pub fn node_occupancy(model: &HeadFieldModel, z: &LatentTriplet, grid: &Grid) -> Result<Vec<f64>> {
    let shape = model.canonical.shape_context(&z.z_shape)?;
    Ok(model.canonical_occupancy(&shape, &grid.nodes()))
}

pub fn cmd_interp(s: &Settings, checkpoint: &Path, a: usize, b: usize, out: &Path, force: bool) -> Result<InterpLog> {
    let model = load_model(checkpoint)?;
    let c = &s.interp;
    if c.steps < 2 || c.res < 8 {
        return Err(Error::invalid("interp.steps must be at least 2 and interp.res at least 8"));
    }
    let (za, zb) = (model.latent(a)?.clone(), model.latent(b)?.clone());
    prepare_output_dir(out, force)?;
    s.snapshot(out)?;
    let grid = Grid::cube(EXTRACT_HALF, c.res);
    let mut masks: Vec<Vec<bool>> = Vec::with_capacity(c.steps);
    for i in 0..c.steps {
        let t = i as f64 / (c.steps - 1) as f64;
        let z = interpolate_latents(&za, &zb, t)?;
        let occ = node_occupancy(&model, &z, &grid)?;
        let mesh = polygonize(&occ, &grid);
        write_ply(&mesh, &out.join(format!("frame_{i:03}.ply")), PlyFormat::BinaryLittleEndian)?;
        masks.push(occ.iter().map(|&o| o > 0.5).collect());
    }
    let log = InterpLog {
        subject_a: a,
        subject_b: b,
        steps: c.steps,
        consecutive_iou: masks.windows(2).map(|w| occupancy_iou(&w[0], &w[1])).collect(),
        endpoint_iou: occupancy_iou(&masks[0], &masks[c.steps - 1]),
    };
    write_json(&out.join(INTERP_LOG), &log)?;
    Ok(log)
}

/// Which dataset scans a fit or evaluation runs on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Split {
    #[default]
    HeldOut,
    Train,
}

fn scan_name(split: Split, i: usize, subject: usize) -> String {
    match split {
        Split::HeldOut => format!("held{i:02}_s{subject:02}"),
        Split::Train => format!("train{i:03}_s{subject:02}"),
    }
}

fn write_tables(rows: &[MetricsRow], out: &Path) -> Result<()> {
    fit::save_csv(rows, &out.join(METRICS_CSV))?;
    write_json(&out.join(METRICS_JSON), &rows)?;
    fit::save_csv(&fit::aggregate(rows), &out.join(SUMMARY_CSV))
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    scan: &'a str,
    trace: &'a [f64],
}

/// Fits the codes of every scan in `split`; writes codes, traces and metric tables.
pub fn cmd_fit(s: &Settings, checkpoint: &Path, data: &Path, split: Split, out: &Path, force: bool) -> Result<Vec<MetricsRow>> {
    let model = load_model(checkpoint)?;
    let ds = Dataset::load(data)?;
    let scans = match split {
        Split::HeldOut => &ds.held_out,
        Split::Train => &ds.train,
    };
    prepare_output_dir(out, force)?;
    s.snapshot(out)?;
    let mut rows = Vec::new();
    for (i, scan) in scans.iter().enumerate() {
        let name = scan_name(split, i, scan.subject_id);
        let r = fit::fit_scan(scan, &model, &s.fit, &name)?;
        write_json(&out.join(format!("{name}.latents.json")), &r.latents)?;
        append_line(&out.join(TRACES_LOG), &TraceRecord { scan: &name, trace: &r.trace })?;
        rows.extend(r.metrics);
    }
    write_tables(&rows, out)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub scan: String,
    pub fitted_chamfer: f64,
    pub baseline_subject: usize,
    pub baseline_chamfer: f64,
}

/// Scores reconstructions: fitted codes from `fits` on held-out scans, or the
/// subjects' own codes on the training scans when `fits` is absent.
pub fn cmd_eval(s: &Settings, checkpoint: &Path, data: &Path, fits: Option<&Path>, out: &Path, force: bool) -> Result<Vec<MetricsRow>> {
    let model = load_model(checkpoint)?;
    let ds = Dataset::load(data)?;
    prepare_output_dir(out, force)?;
    s.snapshot(out)?;
    let mut rows = Vec::new();
    match fits {
        Some(dir) => {
            let mut base = String::from("scan,fitted_chamfer_x100,baseline_subject,baseline_chamfer_x100\n");
            for (i, scan) in ds.held_out.iter().enumerate() {
                let name = scan_name(Split::HeldOut, i, scan.subject_id);
                let z: LatentTriplet = headfield::train::data::read_json(&dir.join(format!("{name}.latents.json")))?;
                let r = fit::eval_fit(&model, &z, scan, &s.fit, &name)?;
                let (bs, bc) = fit::nearest_training_baseline(&model, scan, &s.fit)?;
                base.push_str(&format!("{name},{},{bs},{bc}\n", r[0].chamfer));
                rows.extend(r);
            }
            fs::write(out.join(BASELINE_CSV), base).map_err(io_err(out))?;
        }
        None => {
            for (i, scan) in ds.train.iter().enumerate() {
                let name = scan_name(Split::Train, i, scan.subject_id);
                let z = model.latent(scan.subject_id)?;
                rows.extend(fit::eval_fit(&model, z, scan, &s.fit, &name)?);
            }
        }
    }
    write_tables(&rows, out)?;
    Ok(rows)
}

/// Exports every training subject's canonical mesh, the latent table and the head model.
pub fn cmd_export(s: &Settings, checkpoint: &Path, out: &Path, force: bool) -> Result<Vec<PathBuf>> {
    let model = load_model(checkpoint)?;
    if s.export.res < 8 {
        return Err(Error::invalid("export.res must be at least 8"));
    }
    prepare_output_dir(out, force)?;
    s.snapshot(out)?;
    let mut written = Vec::new();
    for (k, z) in model.latents.entries.iter().enumerate() {
        let mesh: Mesh = model.canonical_mesh(z, s.export.res)?;
        let obj = out.join(format!("subject_{k:02}.obj"));
        let ply = out.join(format!("subject_{k:02}.ply"));
        write_obj(&mesh, &obj)?;
        write_ply(&mesh, &ply, PlyFormat::BinaryLittleEndian)?;
        written.extend([obj, ply]);
    }
    let lat = out.join("latents.json");
    write_json(&lat, &model.latents)?;
    let head = out.join("head_model.json");
    model.head.save(&head)?;
    written.extend([lat, head]);
    Ok(written)
}
