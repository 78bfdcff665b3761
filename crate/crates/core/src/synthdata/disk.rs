//! On-disk dataset layout:
//!
//! ```text
//! DIR/world.json
//! DIR/domain_<d>/trial_<k>_behavior.nswt   [T_b, J, 3] f32
//! DIR/domain_<d>/trial_<k>_neural.nswt     [T_n, H, W] f32
//! DIR/domain_<d>/trial_<k>_labels.json
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActionInterval, Dataset, Trial, WorldConfig};
use crate::error::{Error, Result};
use crate::tensor::io;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct WorldFile {
    schema_version: u32,
    seed: u64,
    config: WorldConfig,
}

#[derive(Serialize, Deserialize)]
struct LabelFile {
    domain: usize,
    trial: usize,
    behavior_fps: f64,
    neural_fps: f64,
    intervals: Vec<ActionInterval>,
    behavior_labels: Vec<usize>,
    neural_labels: Vec<usize>,
    behavior_timestamps_s: Vec<f64>,
    neural_timestamps_s: Vec<f64>,
}

fn stem(dir: &Path, t: &Trial) -> std::path::PathBuf {
    dir.join(format!("domain_{}", t.domain)).join(format!("trial_{}", t.index))
}

pub fn save(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let world = WorldFile { schema_version: SCHEMA_VERSION, seed: ds.seed, config: ds.config.clone() };
    fs::write(dir.join("world.json"), serde_json::to_string_pretty(&world)?)?;
    for t in &ds.trials {
        let base = stem(dir, t);
        fs::create_dir_all(base.parent().expect("domain dir"))?;
        let with = |suffix: &str| base.with_file_name(format!("trial_{}_{suffix}", t.index));
        io::save(&with("behavior.nswt"), &t.behavior)?;
        io::save(&with("neural.nswt"), &t.neural)?;
        let cfg = &ds.config;
        let labels = LabelFile {
            domain: t.domain,
            trial: t.index,
            behavior_fps: cfg.behavior_fps,
            neural_fps: cfg.neural_fps,
            intervals: t.intervals.clone(),
            behavior_labels: t.behavior_labels.clone(),
            neural_labels: t.neural_labels.clone(),
            behavior_timestamps_s: (0..t.behavior_frames()).map(|f| f as f64 / cfg.behavior_fps).collect(),
            neural_timestamps_s: (0..t.neural_frames()).map(|f| f as f64 / cfg.neural_fps).collect(),
        };
        fs::write(with("labels.json"), serde_json::to_string(&labels)?)?;
    }
    Ok(())
}

/// Loads a dataset written by [`save`]. Ground-truth latents are not stored.
pub fn load(dir: &Path) -> Result<Dataset> {
    let wpath = dir.join("world.json");
    let world: WorldFile = serde_json::from_str(&fs::read_to_string(&wpath)?)?;
    if world.schema_version != SCHEMA_VERSION {
        return Err(Error::Format { path: wpath, detail: format!("unsupported schema_version {}", world.schema_version) });
    }
    let cfg = world.config;
    cfg.validate()?;
    let mut trials = Vec::new();
    for d in 0..cfg.n_domains {
        for k in 0..cfg.trials_per_domain {
            let base = dir.join(format!("domain_{d}"));
            let f = |suffix: &str| base.join(format!("trial_{k}_{suffix}"));
            let behavior = io::load::<f32>(&f("behavior.nswt"))?;
            let neural = io::load::<f32>(&f("neural.nswt"))?;
            let lpath = f("labels.json");
            let labels: LabelFile = serde_json::from_str(&fs::read_to_string(&lpath)?)?;
            let bad = |detail: String| Error::Format { path: lpath.clone(), detail };
            if behavior.ndim() != 3 || behavior.shape()[1] != cfg.joints || behavior.shape()[2] != 3 {
                return Err(bad(format!("behavior shape {:?}", behavior.shape())));
            }
            if neural.ndim() != 3 || neural.shape()[1] != cfg.height || neural.shape()[2] != cfg.width {
                return Err(bad(format!("neural shape {:?}", neural.shape())));
            }
            if labels.behavior_labels.len() != behavior.shape()[0] || labels.neural_labels.len() != neural.shape()[0] {
                return Err(bad("label count does not match frame count".into()));
            }
            if labels.behavior_labels.iter().chain(&labels.neural_labels).any(|&a| a >= cfg.n_actions) {
                return Err(bad("action id out of range".into()));
            }
            trials.push(Trial {
                domain: d,
                index: k,
                behavior,
                neural,
                behavior_labels: labels.behavior_labels,
                neural_labels: labels.neural_labels,
                intervals: labels.intervals,
                truth: None,
            });
        }
    }
    Ok(Dataset { config: cfg, seed: world.seed, trials })
}
