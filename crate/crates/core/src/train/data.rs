//! Synthetic scan datasets and their on-disk layout.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geomio::io::{read_ply, write_ply, PlyFormat};
use crate::geomio::{SampleCounts, Scan};
use crate::headmodel::{sample_params, HeadModelConfig, HeadParams, TemplateModel};

pub const MANIFEST: &str = "manifest.json";
pub const HEAD_MODEL_FILE: &str = "head_model.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub subjects: usize,
    pub expressions: usize,
    pub held_out: usize,
    pub head: HeadModelConfig,
    /// Occupancy and surface samples per scan.
    pub samples_per_scan: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            subjects: 8,
            expressions: 5,
            held_out: 4,
            head: HeadModelConfig {
                frequency: 8,
                n_beta: 8,
                seed: 7,
            },
            samples_per_scan: 4000,
            seed: 1,
        }
    }
}

impl DataConfig {
    pub fn counts(&self) -> SampleCounts {
        SampleCounts::from_total(self.samples_per_scan)
    }

    pub fn texture_seed(&self, subject: usize) -> u64 {
        self.seed.wrapping_mul(1000).wrapping_add(subject as u64)
    }

    pub fn sample_seed(&self, scan_index: usize) -> u64 {
        self.seed.wrapping_mul(7919).wrapping_add(scan_index as u64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.expressions == 0 {
            return Err(Error::invalid("dataset needs at least one subject and expression"));
        }
        if self.samples_per_scan < 10 {
            return Err(Error::invalid("samples_per_scan must be at least 10"));
        }
        Ok(())
    }
}

/// Training scans (subject-major) and held-out scans of unseen subjects.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DataConfig,
    pub head: TemplateModel,
    pub train: Vec<Scan>,
    pub held_out: Vec<Scan>,
}

impl Dataset {
    /// Generates all scans and their sample sets from the config seed.
    pub fn synthesize(config: &DataConfig) -> Result<Self> {
        config.validate()?;
        let head = TemplateModel::synthesize(&config.head)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n_beta = config.head.n_beta;
        let mut train = Vec::new();
        for s in 0..config.subjects {
            let beta = sample_params(&mut rng, n_beta, None).beta;
            for _ in 0..config.expressions {
                let p = sample_params(&mut rng, n_beta, Some(&beta));
                train.push(head.make_synthetic_scan(&p, s, config.texture_seed(s))?);
            }
        }
        let mut held_out = Vec::new();
        for h in 0..config.held_out {
            let p = sample_params(&mut rng, n_beta, None);
            let id = config.subjects + h;
            held_out.push(head.make_synthetic_scan(&p, id, config.texture_seed(id))?);
        }
        let mut ds = Dataset {
            config: config.clone(),
            head,
            train,
            held_out,
        };
        ds.ensure_samples(None)?;
        Ok(ds)
    }

    fn ensure_samples(&mut self, cache: Option<&Path>) -> Result<()> {
        let counts = self.config.counts();
        let seeds: Vec<u64> = (0..self.train.len() + self.held_out.len())
            .map(|i| self.config.sample_seed(i))
            .collect();
        for (scan, seed) in self.train.iter_mut().chain(self.held_out.iter_mut()).zip(seeds) {
            scan.ensure_samples(seed, counts, cache)?;
        }
        Ok(())
    }

    pub fn subject_scans(&self, subject: usize) -> impl Iterator<Item = &Scan> {
        self.train.iter().filter(move |s| s.subject_id == subject)
    }

    /// Writes scans, parameters, sample caches and a hashed manifest.
    pub fn save(&self, dir: &Path, force: bool) -> Result<Manifest> {
        prepare_output_dir(dir, force)?;
        let scans_dir = dir.join("scans");
        let cache_dir = dir.join("cache");
        for d in [&scans_dir, &cache_dir] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        self.head.save(&dir.join(HEAD_MODEL_FILE))?;
        let counts = self.config.counts();
        let mut entries = Vec::new();
        let all = self.train.iter().map(|s| (s, false)).chain(self.held_out.iter().map(|s| (s, true)));
        for (i, (scan, held)) in all.enumerate() {
            let stem = format!("scan_{i:03}_s{:02}", scan.subject_id);
            let mesh_rel = format!("scans/{stem}.ply");
            let params_rel = format!("scans/{stem}.params.json");
            write_ply(&scan.mesh, &dir.join(&mesh_rel), PlyFormat::BinaryLittleEndian)?;
            write_json(&dir.join(&params_rel), &scan.params)?;
            if let Some(s) = &scan.samples {
                let name = crate::geomio::scan::sidecar_name(&scan.hash(), self.config.sample_seed(i), counts);
                s.save_sidecar(&cache_dir.join(name), &scan.hash(), self.config.sample_seed(i), counts)?;
            }
            entries.push(ScanEntry {
                mesh: mesh_rel,
                params: params_rel,
                subject: scan.subject_id,
                held_out: held,
            });
        }
        let mut files = Vec::new();
        for rel in list_files(dir)? {
            let bytes = fs::read(dir.join(&rel)).map_err(|e| Error::io(dir.join(&rel), e))?;
            files.push(FileEntry {
                path: rel,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let manifest = Manifest {
            config: self.config.clone(),
            scans: entries,
            files,
        };
        write_json(&dir.join(MANIFEST), &manifest)?;
        Ok(manifest)
    }

    /// Loads a dataset directory written by [`Dataset::save`]; never modifies it.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
        manifest.config.validate()?;
        let head = TemplateModel::load(&dir.join(HEAD_MODEL_FILE))?;
        let counts = manifest.config.counts();
        let mut train = Vec::new();
        let mut held_out = Vec::new();
        for (i, e) in manifest.scans.iter().enumerate() {
            let mesh = read_ply(&dir.join(&e.mesh))?;
            let params: HeadParams = read_json(&dir.join(&e.params))?;
            params.validate(head.n_beta)?;
            let mut scan = Scan::new(mesh, params, e.subject)?;
            let seed = manifest.config.sample_seed(i);
            let path = dir.join("cache").join(crate::geomio::scan::sidecar_name(&scan.hash(), seed, counts));
            scan.samples = match crate::geomio::SampleSet::load_sidecar(&path, &scan.hash(), seed, counts) {
                Ok(Some(s)) => Some(s),
                _ => Some(crate::geomio::sample_training_points(&scan, seed, counts)?),
            };
            if e.held_out {
                held_out.push(scan);
            } else {
                train.push(scan);
            }
        }
        Ok(Dataset {
            config: manifest.config,
            head,
            train,
            held_out,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub mesh: String,
    pub params: String,
    pub subject: usize,
    pub held_out: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DataConfig,
    pub scans: Vec<ScanEntry>,
    pub files: Vec<FileEntry>,
}

/// Refuses a non-empty directory unless `force`; creates it otherwise.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::invalid(format!(
                "output directory {} is not empty (use --force)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Relative paths of all files under `dir`, sorted.
pub fn list_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, d: &Path, out: &mut Vec<String>) -> Result<()> {
        for e in fs::read_dir(d).map_err(|e| Error::io(d, e))? {
            let p = e.map_err(|e| Error::io(d, e))?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel: PathBuf = p.strip_prefix(root).expect("under root").into();
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_vec_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}
