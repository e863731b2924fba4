#![allow(dead_code)]

use std::collections::BTreeMap;

use headfield::train::loss::*;
use headfield::train::*;

/// Two single-expression subjects and a small network configuration.
pub fn tiny() -> (Dataset, TrainConfig) {
    let data = DataConfig {
        subjects: 2,
        expressions: 1,
        held_out: 1,
        samples_per_scan: 200,
        ..DataConfig::default()
    };
    let ds = Dataset::synthesize(&data).unwrap();
    let mut cfg = TrainConfig::default();
    let c = &mut cfg.model.canonical;
    c.geometry_hidden = vec![16, 16];
    c.normal_hidden = vec![8];
    c.texture_hidden = vec![8];
    c.volume_hidden = 8;
    c.volume_channels = 4;
    c.n_shape = 6;
    c.n_detail = 4;
    c.n_color = 4;
    c.n_feature = 6;
    c.init_fit_steps = 50;
    cfg.model.deform.shape_hidden = vec![8];
    cfg.model.deform.bases_hidden = vec![12];
    cfg.epochs_stage1 = 2;
    cfg.epochs_stage2 = 2;
    cfg.batch_stage1 = 2;
    cfg.batch_stage2 = 2;
    cfg.points_per_scan = 32;
    cfg.vertices_per_scan = 16;
    cfg.render_res = 12;
    cfg.stage2_mesh_res = 20;
    cfg.stage2_points = 32;
    cfg.points_per_step = 16;
    cfg.pixels_per_step = 16;
    (ds, cfg)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()) + 1e-4)
}

/// Central difference of `loss` along one scalar parameter reached through `set`.
pub fn central_difference(
    model: &mut HeadFieldModel,
    eps: f64,
    loss: &dyn Fn(&HeadFieldModel) -> f64,
    set: &dyn Fn(&mut HeadFieldModel, f64),
) -> f64 {
    set(model, eps);
    model.rebuild().unwrap();
    let lp = loss(model);
    set(model, -2.0 * eps);
    model.rebuild().unwrap();
    let lm = loss(model);
    set(model, eps);
    model.rebuild().unwrap();
    (lp - lm) / (2.0 * eps)
}

/// Worst relative error and number of non-trivial entries per parameter group.
#[derive(Debug, Default)]
pub struct GradReport {
    pub groups: BTreeMap<String, (f64, usize)>,
    /// Stage 2 only: no gradient reached the stage-1 groups.
    pub stage1_untouched: bool,
}

impl GradReport {
    fn record(&mut self, group: &str, analytic: f64, fd: f64) {
        let e = self.groups.entry(group.to_string()).or_insert((0.0, 0));
        if analytic.abs() > 1e-7 || fd.abs() > 1e-7 {
            e.0 = e.0.max(rel_err(analytic, fd));
            e.1 += 1;
        }
    }

    pub fn worst(&self) -> f64 {
        self.groups.values().map(|g| g.0).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.groups.values().map(|g| g.1).sum()
    }

    /// Every group had at least one non-trivial entry.
    pub fn all_groups_checked(&self) -> bool {
        self.groups.values().all(|g| g.1 > 0)
    }
}

/// Analytic stage-1 gradient against central differences on a micro-batch.
pub fn stage1_gradient_check() -> GradReport {
    let (ds, mut cfg) = tiny();
    cfg.model.deform.tol = 1e-12;
    cfg.model.deform.max_iter = 100;
    let (_, w) = cfg.resolved();
    let mut model = init_model(&ds, &cfg).unwrap();
    // move the latents off zero so every path carries signal
    for (s, e) in model.latents.entries.iter_mut().enumerate() {
        for (i, v) in e.z_shape.iter_mut().enumerate() {
            *v = 0.3 * ((i + 3 * s) as f64).sin();
        }
    }
    // the ellipsoid init zeroes the feature inputs, which would hide the volume path
    for (i, p) in model.canonical.geometry.params_mut().iter_mut().enumerate() {
        *p += 0.05 * (0.7 * i as f64).sin();
    }
    model.rebuild().unwrap();
    let theta_c = cfg.model.deform.canonical_theta.clone();
    let shared = shared_targets(&ds.head, &theta_c).unwrap();
    let targets: Vec<_> = ds.train.iter().map(|s| stage1_target(&ds.head, s, &theta_c).unwrap()).collect();
    let nv = ds.head.num_vertices();
    let items: Vec<Stage1Item> = targets
        .iter()
        .map(|t| Stage1Item {
            target: t,
            points: (0..t.points.len()).step_by(5).collect(),
            vertices: (0..nv).step_by(nv / 16).collect(),
            aux: true,
        })
        .collect();
    let loss = |m: &HeadFieldModel| loss_stage1(m, &shared, &items, &w, false).unwrap().0.total;
    let (_, g) = loss_stage1(&model, &shared, &items, &w, true).unwrap();
    let g = g.unwrap();
    let eps = 1e-5;

    let mut report = GradReport::default();
    let mut check = |group: &str, model: &mut HeadFieldModel, analytic: f64, set: &dyn Fn(&mut HeadFieldModel, f64)| {
        let fd = central_difference(model, eps, &loss, set);
        report.record(group, analytic, fd);
    };
    for i in (0..model.canonical.geometry.parameter_count()).step_by(37) {
        let a = g.canonical.geometry[i];
        check("geometry", &mut model, a, &|m, d| m.canonical.geometry.params_mut()[i] += d);
    }
    // most generator outputs land on grid nodes no sample touches
    let nv = model.canonical.volume.generator.parameter_count();
    let touched: Vec<usize> = (0..nv).filter(|&i| g.canonical.volume[i] != 0.0).collect();
    let picks: Vec<usize> = touched.iter().copied().step_by((touched.len() / 20).max(1)).chain((0..nv).step_by(53)).collect();
    for i in picks {
        let a = g.canonical.volume[i];
        check("volume", &mut model, a, &|m, d| m.canonical.volume.generator.params_mut()[i] += d);
    }
    for i in (0..model.deform.shape_net.parameter_count()).step_by(11) {
        let a = g.deform.shape[i];
        check("shape_removal", &mut model, a, &|m, d| m.deform.shape_net.params_mut()[i] += d);
    }
    for i in (0..model.deform.bases_net.parameter_count()).step_by(97) {
        let a = g.deform.bases[i];
        check("bases", &mut model, a, &|m, d| m.deform.bases_net.params_mut()[i] += d);
    }
    for s in 0..model.latents.len() {
        for i in 0..cfg.model.canonical.n_shape {
            let a = g.latents[s][i];
            check(&format!("z_shape[{s}]"), &mut model, a, &|m, d| m.latents.entries[s].z_shape[i] += d);
        }
    }
    report
}


/// Analytic stage-2 gradient against central differences on a micro-batch.
pub fn stage2_gradient_check() -> GradReport {
    let (ds, cfg) = tiny();
    let (_, w) = cfg.resolved();
    let mut model = init_model(&ds, &cfg).unwrap();
    for (s, e) in model.latents.entries.iter_mut().enumerate() {
        for (i, v) in e.z_detail.iter_mut().chain(e.z_color.iter_mut()).enumerate() {
            *v = 0.4 * ((2 * i + s) as f64).cos();
        }
    }
    let targets = stage2_targets(&model, &ds, &cfg).unwrap();
    assert!(targets.iter().all(|t| !t.points.is_empty() && !t.pixels.is_empty()));
    let items: Vec<Stage2Item> = targets
        .iter()
        .map(|t| Stage2Item {
            target: t,
            points: (0..t.points.len()).collect(),
            pixels: (0..t.pixels.len()).step_by(2).collect(),
        })
        .collect();
    let loss = |m: &HeadFieldModel| loss_stage2(m, &items, &w, false).unwrap().0.total;
    let (_, g) = loss_stage2(&model, &items, &w, true).unwrap();
    let g = g.unwrap();
    let eps = 1e-6;
    let (ns, nd, nc) = (cfg.model.canonical.n_shape, cfg.model.canonical.n_detail, cfg.model.canonical.n_color);

    let mut report = GradReport::default();
    let mut check = |group: &str, model: &mut HeadFieldModel, analytic: f64, set: &dyn Fn(&mut HeadFieldModel, f64)| {
        let fd = central_difference(model, eps, &loss, set);
        report.record(group, analytic, fd);
    };
    for i in (0..model.canonical.normal.parameter_count()).step_by(7) {
        let a = g.canonical.normal[i];
        check("normal", &mut model, a, &|m, d| m.canonical.normal.params_mut()[i] += d);
    }
    for i in (0..model.canonical.texture.parameter_count()).step_by(13) {
        let a = g.canonical.texture[i];
        check("texture", &mut model, a, &|m, d| m.canonical.texture.params_mut()[i] += d);
    }
    for s in 0..model.latents.len() {
        for i in 0..nd {
            let a = g.latents[s][ns + i];
            check(&format!("z_detail[{s}]"), &mut model, a, &|m, d| m.latents.entries[s].z_detail[i] += d);
        }
        for i in 0..nc {
            let a = g.latents[s][ns + nd + i];
            check(&format!("z_color[{s}]"), &mut model, a, &|m, d| m.latents.entries[s].z_color[i] += d);
        }
    }
    report.stage1_untouched = g.canonical.geometry.iter().chain(&g.canonical.volume).all(|v| *v == 0.0)
        && g.deform.shape.iter().chain(&g.deform.bases).all(|v| *v == 0.0);
    report
}
