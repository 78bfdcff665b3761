//! Synthetic multi-animal world: per-domain pose and calcium-image streams
//! driven by a shared semi-Markov action process, with per-domain identity
//! signatures (skeleton scale, joint offsets, neuron layout, gain, background).

pub mod disk;
mod sync;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use rand_distr::{Bernoulli, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::par;
use crate::rng;
use crate::tensor::Tensor;

pub use sync::{synchronize, PairedSample, Split, SplitPolicy, WindowSpec};

/// World generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_domains: usize,
    pub n_actions: usize,
    pub joints: usize,
    pub height: usize,
    pub width: usize,
    pub neurons_per_domain: usize,
    pub behavior_fps: f64,
    pub neural_fps: f64,
    pub trials_per_domain: usize,
    pub trial_seconds: f64,
    pub dwell_min_s: f64,
    pub dwell_max_s: f64,
    /// Prior weight of action 0 relative to the others.
    pub action_skew: f64,
    pub gamma_gen: f64,
    pub alpha_gen: f64,
    /// Scales every per-domain signature; 0 makes domains statistically identical
    /// apart from the neuron layout (see `shared_layout`).
    pub identity_strength: f64,
    /// Maximum relative skeleton-scale deviation at strength 1.
    pub skeleton_scale_range: f64,
    pub joint_offset_sigma: f64,
    pub gain_range: f64,
    pub background_range: f64,
    /// All domains share one neuron layout.
    pub shared_layout: bool,
    pub pose_noise: f64,
    pub rest_rate: f64,
    pub active_rate: f64,
    pub blob_sigma_px: f64,
    pub background: f64,
    pub neuron_baseline: f64,
    /// Photons per fluorescence unit; sets the Poisson shot-noise level.
    pub photons: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_domains: 4,
            n_actions: 6,
            joints: 10,
            height: 64,
            width: 64,
            neurons_per_domain: 12,
            behavior_fps: 100.0,
            neural_fps: 16.0,
            trials_per_domain: 8,
            trial_seconds: 40.0,
            dwell_min_s: 0.5,
            dwell_max_s: 3.0,
            action_skew: 2.0,
            gamma_gen: 0.95,
            alpha_gen: 1.0,
            identity_strength: 1.0,
            skeleton_scale_range: 0.2,
            joint_offset_sigma: 0.05,
            gain_range: 0.3,
            background_range: 0.3,
            shared_layout: false,
            pose_noise: 0.01,
            rest_rate: 0.02,
            active_rate: 0.35,
            blob_sigma_px: 4.0,
            background: 0.5,
            neuron_baseline: 1.0,
            photons: 10.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_domains < 2 {
            return Err(config_err("a world needs at least 2 domains"));
        }
        if self.n_actions < 2 || self.joints < 2 || self.height == 0 || self.width == 0 {
            return Err(config_err("need ≥ 2 actions, ≥ 2 joints and non-empty images"));
        }
        if self.neurons_per_domain < self.n_actions {
            return Err(config_err("need at least one neuron per action"));
        }
        if !(self.behavior_fps > 0.0 && self.neural_fps > 0.0 && self.trial_seconds > 0.0) {
            return Err(config_err("rates and trial length must be positive"));
        }
        if !(0.0 < self.dwell_min_s && self.dwell_min_s <= self.dwell_max_s) {
            return Err(config_err("invalid dwell-time range"));
        }
        if !(0.0 < self.gamma_gen && self.gamma_gen < 1.0) {
            return Err(config_err("gamma_gen must lie in (0,1)"));
        }
        if self.trials_per_domain == 0 || self.photons <= 0.0 || self.action_skew <= 0.0 {
            return Err(config_err("trials, photons and action skew must be positive"));
        }
        if !(0.0..=1.0).contains(&self.rest_rate) || !(0.0..=1.0).contains(&self.active_rate) {
            return Err(config_err("firing rates must be probabilities"));
        }
        Ok(())
    }

    pub fn behavior_frames_per_trial(&self) -> usize {
        (self.trial_seconds * self.behavior_fps).round() as usize
    }

    pub fn neural_frames_per_trial(&self) -> usize {
        (self.trial_seconds * self.neural_fps).round() as usize
    }

    /// Neurons assigned to an action (role indices shared by every domain).
    pub fn action_neurons(&self, action: usize) -> std::ops::Range<usize> {
        let k = self.neurons_per_domain / self.n_actions;
        action * k..(action + 1) * k
    }

    /// Prior over the next action (before excluding self-repeats).
    pub fn action_prior(&self) -> Vec<f64> {
        (0..self.n_actions).map(|a| if a == 0 { self.action_skew } else { 1.0 }).collect()
    }
}

/// A contiguous action bout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionInterval {
    pub action: usize,
    pub start_s: f64,
    pub end_s: f64,
}

/// Ground-truth latent signals of one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `[T_n, neurons]` binary spikes.
    pub spikes: Tensor<f32>,
    /// `[T_n, neurons]` noiseless calcium.
    pub calcium: Tensor<f32>,
}

/// One recording of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub domain: usize,
    pub index: usize,
    /// `[T_b, J, 3]`, root-centered.
    pub behavior: Tensor<f32>,
    /// `[T_n, H, W]`.
    pub neural: Tensor<f32>,
    pub behavior_labels: Vec<usize>,
    pub neural_labels: Vec<usize>,
    pub intervals: Vec<ActionInterval>,
    pub truth: Option<GroundTruth>,
}

impl Trial {
    pub fn behavior_frames(&self) -> usize {
        self.behavior.shape()[0]
    }

    pub fn neural_frames(&self) -> usize {
        self.neural.shape()[0]
    }
}

/// Every trial of every domain, ordered by (domain, trial index).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub seed: u64,
    pub trials: Vec<Trial>,
}

impl Dataset {
    pub fn domains(&self) -> usize {
        self.config.n_domains
    }

    pub fn trials_of(&self, domain: usize) -> impl Iterator<Item = (usize, &Trial)> {
        self.trials.iter().enumerate().filter(move |(_, t)| t.domain == domain)
    }
}

// RNG stream tags
const WORLD: u64 = 1;
const DOMAIN: u64 = 2;
const LAYOUT: u64 = 3;
const TRIAL: u64 = 4;

/// Parameters shared by every domain: what each action looks like.
struct ActionModel {
    rest: Vec<[f64; 3]>,
    /// `[action][joint]` static posture.
    posture: Vec<Vec<[f64; 3]>>,
    /// `[action][joint][harmonic]` amplitude vectors.
    amp: Vec<Vec<[[f64; 3]; 2]>>,
    phase: Vec<Vec<[f64; 2]>>,
    freq: Vec<[f64; 2]>,
    vigor: Vec<f64>,
}

impl ActionModel {
    fn new(cfg: &WorldConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[WORLD]);
        let n01 = Normal::new(0.0, 1.0).expect("unit normal");
        let vec3 = |r: &mut rng::Rng, s: f64| [s * n01.sample(r), s * n01.sample(r), s * n01.sample(r)];
        let j = cfg.joints;
        let rest = (0..j).map(|i| if i == 0 { [0.0; 3] } else { vec3(&mut r, 0.3) }).collect();
        let posture = (0..cfg.n_actions)
            .map(|_| (0..j).map(|i| if i == 0 { [0.0; 3] } else { vec3(&mut r, 0.1) }).collect())
            .collect();
        let amp = (0..cfg.n_actions)
            .map(|_| (0..j).map(|i| if i == 0 { [[0.0; 3]; 2] } else { [vec3(&mut r, 0.12), vec3(&mut r, 0.06)] }).collect())
            .collect();
        let phase = (0..cfg.n_actions)
            .map(|_| (0..j).map(|_| [r.random_range(0.0..std::f64::consts::TAU), r.random_range(0.0..std::f64::consts::TAU)]).collect())
            .collect();
        let freq = (0..cfg.n_actions).map(|_| [r.random_range(0.5..1.5), r.random_range(1.5..3.0)]).collect();
        // evenly spread vigor, shuffled across actions
        let mut vigor: Vec<f64> =
            (0..cfg.n_actions).map(|a| 0.4 + 1.2 * a as f64 / (cfg.n_actions - 1).max(1) as f64).collect();
        for i in (1..vigor.len()).rev() {
            let k = r.random_range(0..=i);
            vigor.swap(i, k);
        }
        Self { rest, posture, amp, phase, freq, vigor }
    }

    fn joint(&self, action: usize, j: usize, t: f64) -> [f64; 3] {
        let mut p = [0.0; 3];
        let v = self.vigor[action];
        for (c, pc) in p.iter_mut().enumerate() {
            *pc = self.rest[j][c] + self.posture[action][j][c];
            for h in 0..2 {
                let w = std::f64::consts::TAU * self.freq[action][h] * t + self.phase[action][j][h];
                *pc += v * self.amp[action][j][h][c] * w.sin();
            }
        }
        p
    }
}

/// Identity signature of one domain.
struct DomainModel {
    scale: f64,
    offsets: Vec<[f64; 3]>,
    positions: Vec<(f64, f64)>,
    gain: f64,
    background: f64,
}

impl DomainModel {
    fn new(cfg: &WorldConfig, seed: u64, d: usize) -> Self {
        let mut r = rng::stream(seed, &[DOMAIN, d as u64]);
        let s = cfg.identity_strength;
        let scale = 1.0 + s * cfg.skeleton_scale_range * r.random_range(-1.0..=1.0);
        let sigma = (s * cfg.joint_offset_sigma).max(0.0);
        let offsets = (0..cfg.joints)
            .map(|_| {
                if sigma > 0.0 {
                    let n = Normal::new(0.0, sigma).expect("positive sigma");
                    [n.sample(&mut r), n.sample(&mut r), n.sample(&mut r)]
                } else {
                    [0.0; 3]
                }
            })
            .collect();
        let gain = 1.0 + s * cfg.gain_range * r.random_range(-1.0..=1.0);
        let background = cfg.background * (1.0 + s * cfg.background_range * r.random_range(-1.0..=1.0));
        let mut lr = if cfg.shared_layout { rng::stream(seed, &[LAYOUT]) } else { rng::stream(seed, &[LAYOUT, d as u64]) };
        let margin = (cfg.blob_sigma_px).min(cfg.height.min(cfg.width) as f64 / 4.0);
        let positions = (0..cfg.neurons_per_domain)
            .map(|_| {
                (
                    lr.random_range(margin..=(cfg.height as f64 - 1.0 - margin).max(margin)),
                    lr.random_range(margin..=(cfg.width as f64 - 1.0 - margin).max(margin)),
                )
            })
            .collect();
        Self { scale, offsets, positions, gain, background }
    }
}

/// Semi-Markov action sequence over `[0, seconds)`.
fn action_sequence(cfg: &WorldConfig, r: &mut rng::Rng) -> Vec<ActionInterval> {
    let prior = cfg.action_prior();
    let first = WeightedIndex::new(&prior).expect("positive prior").sample(r);
    let mut out = Vec::new();
    let mut t = 0.0;
    let mut a = first;
    while t < cfg.trial_seconds {
        let dwell = r.random_range(cfg.dwell_min_s..=cfg.dwell_max_s);
        let end = (t + dwell).min(cfg.trial_seconds);
        out.push(ActionInterval { action: a, start_s: t, end_s: end });
        t = end;
        let w: Vec<f64> = prior.iter().enumerate().map(|(k, &p)| if k == a { 0.0 } else { p }).collect();
        a = WeightedIndex::new(&w).expect("another action exists").sample(r);
    }
    out
}

fn label_at(intervals: &[ActionInterval], t: f64) -> usize {
    let i = intervals.partition_point(|iv| iv.end_s <= t);
    intervals[i.min(intervals.len() - 1)].action
}

fn generate_trial(cfg: &WorldConfig, seed: u64, actions: &ActionModel, dom: &DomainModel, d: usize, k: usize) -> Result<Trial> {
    let mut r = rng::stream(seed, &[TRIAL, d as u64, k as u64]);
    let intervals = action_sequence(cfg, &mut r);

    // behavior
    let tb = cfg.behavior_frames_per_trial();
    let j = cfg.joints;
    let noise = Normal::new(0.0, cfg.pose_noise.max(0.0)).map_err(|e| config_err(e.to_string()))?;
    let mut pose = vec![0f32; tb * j * 3];
    let mut behavior_labels = Vec::with_capacity(tb);
    for f in 0..tb {
        let t = f as f64 / cfg.behavior_fps;
        let a = label_at(&intervals, t);
        behavior_labels.push(a);
        let mut frame = vec![[0.0f64; 3]; j];
        for (ji, p) in frame.iter_mut().enumerate() {
            let base = actions.joint(a, ji, t);
            for c in 0..3 {
                p[c] = dom.scale * base[c] + dom.offsets[ji][c] + noise.sample(&mut r);
            }
        }
        let root = frame[0];
        for ji in 0..j {
            for c in 0..3 {
                pose[(f * j + ji) * 3 + c] = (frame[ji][c] - root[c]) as f32;
            }
        }
    }

    // spikes and calcium
    let tn = cfg.neural_frames_per_trial();
    let nn = cfg.neurons_per_domain;
    let mut spikes = vec![0f32; tn * nn];
    let mut calcium = vec![0f32; tn * nn];
    let mut neural_labels = Vec::with_capacity(tn);
    let mut state = vec![0f64; nn];
    for f in 0..tn {
        let t = f as f64 / cfg.neural_fps;
        let a = label_at(&intervals, t);
        neural_labels.push(a);
        let active = cfg.action_neurons(a);
        for n in 0..nn {
            let p = if active.contains(&n) { (cfg.active_rate * actions.vigor[a]).min(1.0) } else { cfg.rest_rate };
            let s = Bernoulli::new(p).expect("probability").sample(&mut r);
            let s = if s { 1.0 } else { 0.0 };
            state[n] = cfg.gamma_gen * state[n] + cfg.alpha_gen * s;
            spikes[f * nn + n] = s as f32;
            calcium[f * nn + n] = state[n] as f32;
        }
    }

    // rendering
    let (h, w) = (cfg.height, cfg.width);
    let inv = 1.0 / (2.0 * cfg.blob_sigma_px * cfg.blob_sigma_px);
    let blobs: Vec<Vec<f64>> = dom
        .positions
        .iter()
        .map(|&(py, px)| {
            (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    (-((y - py).powi(2) + (x - px).powi(2)) * inv).exp()
                })
                .collect()
        })
        .collect();
    let mut img = vec![0f32; tn * h * w];
    let mut lam = vec![0f64; h * w];
    for f in 0..tn {
        lam.iter_mut().for_each(|v| *v = dom.background);
        for n in 0..nn {
            let amp = dom.gain * (cfg.neuron_baseline + f64::from(calcium[f * nn + n]));
            for (l, b) in lam.iter_mut().zip(&blobs[n]) {
                *l += amp * b;
            }
        }
        for (i, &l) in lam.iter().enumerate() {
            let mean = (l * cfg.photons).max(1e-9);
            let count: f64 = Poisson::new(mean).map_err(|e| config_err(e.to_string()))?.sample(&mut r);
            img[f * h * w + i] = (count / cfg.photons) as f32;
        }
    }

    Ok(Trial {
        domain: d,
        index: k,
        behavior: Tensor::new([tb, j, 3], pose)?,
        neural: Tensor::new([tn, h, w], img)?,
        behavior_labels,
        neural_labels,
        intervals,
        truth: Some(GroundTruth { spikes: Tensor::new([tn, nn], spikes)?, calcium: Tensor::new([tn, nn], calcium)? }),
    })
}

/// Generates every trial of every domain. Trials are generated in parallel from
/// independent sub-seeded streams, so the result does not depend on threading.
pub fn generate_world(cfg: &WorldConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let actions = ActionModel::new(cfg, seed);
    let domains: Vec<DomainModel> = (0..cfg.n_domains).map(|d| DomainModel::new(cfg, seed, d)).collect();
    let k = cfg.trials_per_domain;
    let trials = par::try_map_range(cfg.n_domains * k, |i| {
        generate_trial(cfg, seed, &actions, &domains[i / k], i / k, i % k)
    })?;
    Ok(Dataset { config: cfg.clone(), seed, trials })
}

/// Per-action vigor (motion amplitude and firing-rate multiplier), for diagnostics.
pub fn action_vigor(cfg: &WorldConfig, seed: u64) -> Vec<f64> {
    ActionModel::new(cfg, seed).vigor
}


fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt().max(f64::MIN_POSITIVE)
}

/// Pearson correlation between behavioral and neural "energy" (distance between
/// consecutive frames at the neural rate), after a centered moving average.
pub fn energy_correlation(ds: &Dataset, trial: usize, smooth: usize) -> f64 {
    let t = &ds.trials[trial];
    let cfg = &ds.config;
    let tn = t.neural_frames();
    let per_img = cfg.height * cfg.width;
    let per_pose = cfg.joints * 3;
    let pose_at = |f: usize| {
        let b = ((f as f64 / cfg.neural_fps * cfg.behavior_fps).round() as usize).min(t.behavior_frames() - 1);
        &t.behavior.data()[b * per_pose..(b + 1) * per_pose]
    };
    let dist = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| f64::from(x - y).powi(2)).sum::<f64>().sqrt();
    let img = |f: usize| &t.neural.data()[f * per_img..(f + 1) * per_img];
    let eb: Vec<f64> = (1..tn).map(|f| dist(pose_at(f), pose_at(f - 1))).collect();
    let en: Vec<f64> = (1..tn).map(|f| dist(img(f), img(f - 1))).collect();
    pearson(&moving_average(&eb, smooth), &moving_average(&en, smooth))
}
