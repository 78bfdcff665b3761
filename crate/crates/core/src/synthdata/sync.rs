//! Pairing of neural and behavior windows, and the per-domain trial split.

use log::warn;
use serde::{Deserialize, Serialize};

use super::{Dataset, Trial};
use crate::error::{config_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowSpec {
    pub neural_frames: usize,
    pub behavior_frames: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { neural_frames: 32, behavior_frames: 8, stride: 8 }
    }
}

/// A synchronized (behavior window, neural window) pair, stored by reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub domain: usize,
    /// Index into `Dataset::trials`.
    pub trial: usize,
    pub neural_start: usize,
    /// Behavior frame indices (at the behavior rate), one per paired pose.
    pub behavior_frames: Vec<usize>,
    /// Majority action over the neural window.
    pub label: usize,
    pub neural_center_s: f64,
    pub behavior_center_s: f64,
}

/// Slides neural windows over a trial and pairs each with the poses nearest to
/// the neural frame times at the window center.
pub fn synchronize(
    trial: &Trial,
    trial_index: usize,
    behavior_fps: f64,
    neural_fps: f64,
    n_actions: usize,
    spec: WindowSpec,
) -> Vec<PairedSample> {
    let (tn, tb) = (trial.neural_frames(), trial.behavior_frames());
    if spec.stride == 0 || spec.neural_frames == 0 || spec.behavior_frames > spec.neural_frames {
        warn!("invalid window spec {spec:?}");
        return Vec::new();
    }
    let behavior_end_s = tb as f64 / behavior_fps;
    if tn < spec.neural_frames || behavior_end_s <= 0.0 {
        warn!("trial {trial_index}: streams too short to form a window");
        return Vec::new();
    }
    let lead = (spec.neural_frames - spec.behavior_frames) / 2;
    let mut out = Vec::new();
    let mut start = 0;
    while start + spec.neural_frames <= tn {
        let neural_center_s = (start as f64 + (spec.neural_frames as f64 - 1.0) / 2.0) / neural_fps;
        let frames: Vec<usize> = (0..spec.behavior_frames)
            .map(|i| {
                let t = (start + lead + i) as f64 / neural_fps;
                ((t * behavior_fps).round() as usize).min(tb - 1)
            })
            .collect();
        let mut votes = vec![0usize; n_actions];
        for &a in &trial.neural_labels[start..start + spec.neural_frames] {
            votes[a] += 1;
        }
        // ties go to the lowest action id
        let label = (0..n_actions).rev().max_by_key(|&a| votes[a]).unwrap_or(0);
        let behavior_center_s = frames.iter().map(|&f| f as f64 / behavior_fps).sum::<f64>() / frames.len() as f64;
        if neural_center_s > behavior_end_s {
            break;
        }
        out.push(PairedSample {
            domain: trial.domain,
            trial: trial_index,
            neural_start: start,
            behavior_frames: frames,
            label,
            neural_center_s,
            behavior_center_s,
        });
        start += spec.stride;
    }
    if out.is_empty() {
        warn!("trial {trial_index}: no overlapping windows");
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitPolicy {
    /// Trials per domain held out for testing (the last ones).
    pub test_trials: usize,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        Self { test_trials: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
}

impl Split {
    /// Splits by whole trials, so no window spans the boundary.
    pub fn new(ds: &Dataset, spec: WindowSpec, policy: SplitPolicy) -> Result<Self> {
        let cfg = &ds.config;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for d in 0..ds.domains() {
            let trials: Vec<(usize, &Trial)> = ds.trials_of(d).collect();
            if trials.len() < 3 || policy.test_trials == 0 || policy.test_trials >= trials.len() {
                return Err(config_err(format!(
                    "domain {d}: {} trials cannot be split with {} held out (need ≥ 3 trials and ≥ 1 on each side)",
                    trials.len(),
                    policy.test_trials
                )));
            }
            let cut = trials.len() - policy.test_trials;
            let mut dom_test = Vec::new();
            for (pos, &(idx, t)) in trials.iter().enumerate() {
                let w = synchronize(t, idx, cfg.behavior_fps, cfg.neural_fps, cfg.n_actions, spec);
                if pos < cut {
                    train.extend(w);
                } else {
                    dom_test.extend(w);
                }
            }
            let mut seen: Vec<usize> = dom_test.iter().map(|s| s.label).collect();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() < 2 {
                return Err(config_err(format!("domain {d}: test split has fewer than 2 actions")));
            }
            test.extend(dom_test);
        }
        Ok(Self { train, test })
    }
}

impl Dataset {
    /// `[T_n, H, W]` neural window of a sample.
    pub fn neural_window(&self, s: &PairedSample, frames: usize) -> Tensor<f32> {
        let t = &self.trials[s.trial].neural;
        let hw = t.shape()[1] * t.shape()[2];
        let data = t.data()[s.neural_start * hw..(s.neural_start + frames) * hw].to_vec();
        Tensor::new([frames, t.shape()[1], t.shape()[2]], data).expect("window in range")
    }

    /// `[T_b, J, 3]` pose window of a sample.
    pub fn behavior_window(&self, s: &PairedSample) -> Tensor<f32> {
        let t = &self.trials[s.trial].behavior;
        let per = t.shape()[1] * 3;
        let mut data = Vec::with_capacity(s.behavior_frames.len() * per);
        for &f in &s.behavior_frames {
            data.extend_from_slice(&t.data()[f * per..(f + 1) * per]);
        }
        Tensor::new([s.behavior_frames.len(), t.shape()[1], 3], data).expect("window in range")
    }

    /// A single pose `[J, 3]`.
    pub fn pose(&self, trial: usize, frame: usize) -> &[f32] {
        let t = &self.trials[trial].behavior;
        let per = t.shape()[1] * 3;
        &t.data()[frame * per..(frame + 1) * per]
    }
}
