//! Layered run configuration: defaults < config file < `key.path=value` overrides.

use std::path::Path;

use headfield::fit::FitConfig;
use headfield::train::data::{read_json, write_json};
use headfield::train::{DataConfig, Extraction, TrainConfig};
use headfield::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// File name of the resolved-config snapshot written by every command.
pub const SNAPSHOT_FILE: &str = "resolved_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub count: usize,
    /// Marching-cubes resolution of the exported meshes.
    pub res: usize,
    /// Pixels per side of each rig view.
    pub render_res: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            count: 3,
            res: 64,
            render_res: 128,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Jaw opening from the canonical pose well past the training range.
    Jaw,
    /// Jaw, neck and expression sweeps beyond the training range.
    Extreme,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnimateConfig {
    pub res: usize,
    pub frames: usize,
    pub preset: Preset,
    pub extraction: Extraction,
}

impl Default for AnimateConfig {
    fn default() -> Self {
        AnimateConfig {
            res: 64,
            frames: 8,
            preset: Preset::Jaw,
            extraction: Extraction::Forward,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpConfig {
    pub steps: usize,
    pub res: usize,
}

impl Default for InterpConfig {
    fn default() -> Self {
        InterpConfig { steps: 10, res: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportConfig {
    pub res: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig { res: 64 }
    }
}

/// Everything a command may read; `seed` is copied into every seeded section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub fit: FitConfig,
    pub generate: GenerateConfig,
    pub animate: AnimateConfig,
    pub interp: InterpConfig,
    pub export: ExportConfig,
}

impl Settings {
    /// Resolves defaults, an optional JSON file, dotted overrides and the seed.
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Settings> {
        let mut v = serde_json::to_value(Settings::default()).expect("settings serialize");
        if let Some(p) = file {
            let f: Value = read_json(p)?;
            merge(&mut v, &f, "")?;
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override `{o}` is not key=value")))?;
            set_path(&mut v, key.trim(), parse_value(raw.trim()))?;
        }
        let mut s: Settings =
            serde_json::from_value(v).map_err(|e| Error::invalid(format!("configuration: {e}")))?;
        if let Some(seed) = seed {
            s.seed = seed;
        }
        s.data.seed = s.seed;
        s.train.seed = s.seed;
        s.fit.seed = s.seed;
        s.data.validate()?;
        s.train.validate()?;
        Ok(s)
    }

    pub fn snapshot(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(SNAPSHOT_FILE), self)
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Overlays `src` onto `dst`; every key must already exist.
fn merge(dst: &mut Value, src: &Value, prefix: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, sv) in s {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let dv = d.get_mut(k).ok_or_else(|| Error::invalid(format!("unknown configuration key `{key}`")))?;
                merge(dv, sv, &key)?;
            }
            Ok(())
        }
        (d, s) => {
            *d = s.clone();
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(m) => m.get_mut(part),
            Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::invalid(format!("unknown configuration key `{key}`")))?;
    }
    *cur = value;
    Ok(())
}
