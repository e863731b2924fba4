#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use headfield_cli::{cmd_synth_data, cmd_train, Settings, TrainArgs};

/// Overrides that shrink data and networks to test size.
pub const TINY: &[&str] = &[
    "data.subjects=2",
    "data.expressions=1",
    "data.held_out=1",
    "data.samples_per_scan=200",
    "train.model.canonical.geometry_hidden=[16,16]",
    "train.model.canonical.normal_hidden=[8]",
    "train.model.canonical.texture_hidden=[8]",
    "train.model.canonical.volume_hidden=8",
    "train.model.canonical.volume_channels=4",
    "train.model.canonical.n_shape=6",
    "train.model.canonical.n_detail=4",
    "train.model.canonical.n_color=4",
    "train.model.canonical.n_feature=6",
    "train.model.canonical.init_fit_steps=50",
    "train.model.deform.shape_hidden=[8]",
    "train.model.deform.bases_hidden=[12]",
    "train.warmup_steps=5",
    "train.epochs_stage1=2",
    "train.epochs_stage2=1",
    "train.batch_stage1=2",
    "train.batch_stage2=2",
    "train.points_per_scan=32",
    "train.vertices_per_scan=16",
    "train.render_res=12",
    "train.stage2_mesh_res=20",
    "train.stage2_points=32",
    "train.points_per_step=16",
    "train.pixels_per_step=16",
    "fit.iterations=3",
    "fit.occ_points=32",
    "fit.surface_points=16",
    "fit.eval_res=16",
    "fit.metric_samples=200",
    "generate.count=2",
    "generate.res=16",
    "generate.render_res=16",
    "animate.res=16",
    "animate.frames=3",
    "interp.steps=3",
    "interp.res=12",
    "export.res=16",
];

pub fn tiny_overrides(extra: &[&str]) -> Vec<String> {
    TINY.iter().chain(extra).map(|s| s.to_string()).collect()
}

pub fn tiny_settings(extra: &[&str]) -> Settings {
    Settings::resolve(None, &tiny_overrides(extra), Some(7)).unwrap()
}

/// Dataset plus stage-1 and stage-2 checkpoints trained once per test binary.
pub struct Fixture {
    _root: tempfile::TempDir,
    pub data: PathBuf,
    pub stage1: PathBuf,
    pub stage2: PathBuf,
}

impl Fixture {
    pub fn stage1_checkpoint(&self) -> PathBuf {
        self.stage1.join("stage1.hfck")
    }
    pub fn stage2_checkpoint(&self) -> PathBuf {
        self.stage2.join("stage2.hfck")
    }
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let s = tiny_settings(&[]);
        let data = root.path().join("data");
        cmd_synth_data(&s, &data, false).unwrap();
        let stage1 = root.path().join("stage1");
        let args = TrainArgs { stage: 1, data: data.clone(), quiet: true, ..TrainArgs::default() };
        cmd_train(&s, &args, &stage1, false).unwrap();
        let stage2 = root.path().join("stage2");
        let args = TrainArgs {
            stage: 2,
            data: data.clone(),
            from: Some(stage1.join("stage1.hfck")),
            quiet: true,
            ..TrainArgs::default()
        };
        cmd_train(&s, &args, &stage2, false).unwrap();
        Fixture { _root: root, data, stage1, stage2 }
    })
}

/// Every file below `dir` with its contents, sorted by relative path.
pub fn snapshot_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
