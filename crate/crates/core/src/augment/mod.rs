//! Swap, calcium, mix and jitter augmentations for paired windows.
//!
//! The pipeline runs swap → calcium → mix → jitter, each step gated by its own
//! probability, with one seeded sub-stream per batch item.

mod behavior;
mod neighbors;
mod neural;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use behavior::{jitter_behavior, BehaviorJitter, JitteredPose};
pub use neighbors::{swap_behavior, swap_neural, swap_probabilities, Neighbor, NeighborIndex, Pool, PoseRef, DEFAULT_NEIGHBORS};
pub use neural::{calcium_augment, color, gaussian_blur, jitter_neural, mix_augment, CalciumKernel, NeuralJitter};

use crate::error::{config_err, Result};
use crate::synthdata::{Dataset, PairedSample};
use crate::tensor::Tensor;

pub(crate) fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(config_err(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

pub(crate) fn check_range(name: &str, (lo, hi): (f64, f64), min: f64, max: f64) -> Result<()> {
    if !(lo >= min && hi >= lo && hi <= max) {
        return Err(config_err(format!("{name} = ({lo}, {hi}) must satisfy {min} ≤ lo ≤ hi ≤ {max}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Probability of swapping the poses of a behavior window.
    pub swap_behavior: f64,
    /// Probability of swapping the neural window for another animal's.
    pub swap_neural: f64,
    pub neighbors: usize,
    pub calcium: f64,
    pub calcium_kernel: CalciumKernel,
    pub mix: f64,
    pub mix_alpha: (f64, f64),
    pub neural_jitter: NeuralJitter,
    pub behavior_jitter: BehaviorJitter,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            swap_behavior: 0.5,
            swap_neural: 0.5,
            neighbors: DEFAULT_NEIGHBORS,
            calcium: 0.5,
            calcium_kernel: CalciumKernel::default(),
            mix: 0.5,
            mix_alpha: (0.0, 0.5),
            neural_jitter: NeuralJitter::default(),
            behavior_jitter: BehaviorJitter::default(),
        }
    }
}

impl AugmentConfig {
    /// Everything off.
    pub fn none() -> Self {
        Self {
            swap_behavior: 0.0,
            swap_neural: 0.0,
            calcium: 0.0,
            mix: 0.0,
            neural_jitter: NeuralJitter::disabled(),
            behavior_jitter: BehaviorJitter::disabled(),
            ..Default::default()
        }
    }

    /// Only the generic jitter families.
    pub fn jitter_only() -> Self {
        Self { neural_jitter: NeuralJitter::default(), behavior_jitter: BehaviorJitter::default(), ..Self::none() }
    }

    pub fn swaps(&self) -> bool {
        self.swap_behavior > 0.0 || self.swap_neural > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (n, p) in [
            ("swap_behavior", self.swap_behavior),
            ("swap_neural", self.swap_neural),
            ("calcium", self.calcium),
            ("mix", self.mix),
        ] {
            check_prob(n, p)?;
        }
        if self.neighbors == 0 {
            return Err(config_err("neighbors must be ≥ 1"));
        }
        check_range("mix_alpha", self.mix_alpha, 0.0, 1.0)?;
        if self.mix_alpha.1 >= 1.0 {
            return Err(config_err("mix_alpha must stay below 1"));
        }
        self.calcium_kernel.validate()?;
        self.neural_jitter.validate()?;
        self.behavior_jitter.validate()
    }
}

/// One augmented training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub behavior: Tensor<f32>,
    pub neural: Tensor<f32>,
    /// Domain of the original pair.
    pub domain: usize,
    /// Domain the neural window now comes from.
    pub neural_domain: usize,
    pub drop_mask: Tensor<f32>,
}

/// Applies the configured pipeline to samples of a fixed training set.
pub struct Augmenter<'a> {
    ds: &'a Dataset,
    samples: &'a [PairedSample],
    cfg: AugmentConfig,
    neural_frames: usize,
    index: Option<NeighborIndex>,
    by_domain: Vec<Vec<usize>>,
}

impl<'a> Augmenter<'a> {
    pub fn new(ds: &'a Dataset, samples: &'a [PairedSample], neural_frames: usize, cfg: AugmentConfig) -> Result<Self> {
        cfg.validate()?;
        let index = if cfg.swaps() { Some(NeighborIndex::build(ds, samples, cfg.neighbors)?) } else { None };
        let mut by_domain = vec![Vec::new(); ds.domains()];
        for (i, s) in samples.iter().enumerate() {
            by_domain[s.domain].push(i);
        }
        Ok(Self { ds, samples, cfg, neural_frames, index, by_domain })
    }

    pub fn config(&self) -> &AugmentConfig {
        &self.cfg
    }

    pub fn index(&self) -> Option<&NeighborIndex> {
        self.index.as_ref()
    }

    /// The unaugmented pair.
    pub fn raw(&self, i: usize) -> (Tensor<f32>, Tensor<f32>) {
        let s = &self.samples[i];
        (self.ds.behavior_window(s), self.ds.neural_window(s, self.neural_frames))
    }

    pub fn pair<R: Rng>(&self, i: usize, rng: &mut R) -> Result<AugmentedPair> {
        let s = &self.samples[i];
        let cfg = &self.cfg;
        let (mut b, mut n) = self.raw(i);
        let mut neural_domain = s.domain;
        let mut neural_src = i;

        if let Some(index) = &self.index {
            let orig_b = b.clone();
            if rng.random::<f64>() < cfg.swap_behavior {
                b = swap_behavior(&orig_b, s.domain, index, rng);
            }
            if rng.random::<f64>() < cfg.swap_neural {
                if let Some((d, j)) = swap_neural(&orig_b, s.domain, index, rng) {
                    n = self.ds.neural_window(&self.samples[j], self.neural_frames);
                    neural_domain = d;
                    neural_src = j;
                }
            }
        }
        if rng.random::<f64>() < cfg.calcium {
            if let Some(donor) = self.calcium_donor(neural_src, neural_domain, rng) {
                let delta = rng.random_range(0..self.neural_frames.max(1));
                n = calcium_augment(&n, &donor, &cfg.calcium_kernel, delta)?;
            }
        }
        if rng.random::<f64>() < cfg.mix {
            let d = rng.random_range(0..self.by_domain.len());
            if !self.by_domain[d].is_empty() {
                let j = self.by_domain[d][rng.random_range(0..self.by_domain[d].len())];
                let (lo, hi) = cfg.mix_alpha;
                let alpha = if hi > lo { rng.random_range(lo..hi) } else { lo };
                n = mix_augment(&n, &self.ds.neural_window(&self.samples[j], self.neural_frames), alpha)?;
            }
        }
        let n = jitter_neural(&n, &cfg.neural_jitter, rng)?;
        let jb = jitter_behavior(&b, &cfg.behavior_jitter, rng)?;
        Ok(AugmentedPair { behavior: jb.window, neural: n, domain: s.domain, neural_domain, drop_mask: jb.drop_mask })
    }

    /// A single frame of the domain, from outside the window of sample `i`.
    fn calcium_donor<R: Rng>(&self, i: usize, domain: usize, rng: &mut R) -> Option<Tensor<f32>> {
        let pool = &self.by_domain[domain];
        if pool.is_empty() {
            return None;
        }
        let own = &self.samples[i];
        for _ in 0..16 {
            let s = &self.samples[pool[rng.random_range(0..pool.len())]];
            let trial = &self.ds.trials[s.trial].neural;
            let f = rng.random_range(0..trial.shape()[0]);
            if s.trial == own.trial && (own.neural_start..own.neural_start + self.neural_frames).contains(&f) {
                continue;
            }
            return Some(trial.index_axis0(f));
        }
        None
    }

    /// Augments a batch in parallel; item `k` uses its own stream derived from
    /// `(seed, step, k)`, so the result does not depend on scheduling.
    pub fn batch(&self, ids: &[usize], seed: u64, step: u64) -> Result<Vec<AugmentedPair>> {
        crate::par::try_map_range(ids.len(), |k| {
            let mut rng = neighbors::item_stream(seed, step, k);
            self.pair(ids[k], &mut rng)
        })
    }
}
