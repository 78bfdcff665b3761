//! Exact nearest-neighbor pools for the swapping augmentations.

use std::collections::BTreeSet;
use std::sync::Once;

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{dim_err, Result};
use crate::rng;
use crate::synthdata::{Dataset, PairedSample};
use crate::tensor::Tensor;

pub const DEFAULT_NEIGHBORS: usize = 128;

/// Flat array of equally sized vectors, each with a back-reference `R`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pool<R> {
    dim: usize,
    data: Vec<f32>,
    refs: Vec<R>,
}

impl<R> Pool<R> {
    pub fn new(dim: usize, data: Vec<f32>, refs: Vec<R>) -> Result<Self> {
        if dim == 0 || data.len() != dim * refs.len() || refs.len() > u32::MAX as usize {
            return Err(dim_err("Pool::new", format!("{} values for {} entries of dim {dim}", data.len(), refs.len())));
        }
        Ok(Self { dim, data, refs })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, data: Vec::new(), refs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn reference(&self, i: usize) -> &R {
        &self.refs[i]
    }

    /// The `n` entries closest to `query`, ascending by Euclidean distance
    /// (ties by index).
    pub fn nearest(&self, query: &[f32], n: usize) -> Vec<Neighbor> {
        assert_eq!(query.len(), self.dim, "query dimension");
        let mut all: Vec<(f32, u32)> =
            self.data.chunks_exact(self.dim).enumerate().map(|(i, e)| (sq_dist(e, query), i as u32)).collect();
        let by_dist = |a: &(f32, u32), b: &(f32, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if n < all.len() {
            all.select_nth_unstable_by(n, by_dist);
            all.truncate(n);
        }
        all.sort_unstable_by(by_dist);
        all.into_iter().map(|(d2, i)| Neighbor { index: i as usize, distance: f64::from(d2).sqrt() }).collect()
    }
}

/// Squared Euclidean distance; eight independent lanes so the loop vectorizes.
fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| (x - y) * (x - y)).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    acc.iter().sum::<f32>() + tail
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// Where a pool pose came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct PoseRef {
    pub trial: usize,
    pub frame: usize,
}

/// Per-domain pools of single poses and of whole behavior windows. Immutable
/// once built.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    n_neighbors: usize,
    poses: Vec<Pool<PoseRef>>,
    /// References are indices into the sample list the index was built from.
    windows: Vec<Pool<usize>>,
}

impl NeighborIndex {
    pub fn from_pools(n_neighbors: usize, poses: Vec<Pool<PoseRef>>, windows: Vec<Pool<usize>>) -> Result<Self> {
        if poses.len() != windows.len() || n_neighbors == 0 {
            return Err(dim_err("NeighborIndex", "one pose pool and one window pool per domain, N ≥ 1"));
        }
        Ok(Self { n_neighbors, poses, windows })
    }

    /// Pools every pose and window referenced by `samples`.
    pub fn build(ds: &Dataset, samples: &[PairedSample], n_neighbors: usize) -> Result<Self> {
        let per = ds.config.joints * 3;
        let mut poses = Vec::new();
        let mut windows = Vec::new();
        for d in 0..ds.domains() {
            let refs: BTreeSet<PoseRef> = samples
                .iter()
                .filter(|s| s.domain == d)
                .flat_map(|s| s.behavior_frames.iter().map(move |&frame| PoseRef { trial: s.trial, frame }))
                .collect();
            let refs: Vec<PoseRef> = refs.into_iter().collect();
            let data = refs.iter().flat_map(|r| ds.pose(r.trial, r.frame).iter().copied()).collect();
            poses.push(Pool::new(per, data, refs)?);

            let ids: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].domain == d).collect();
            let wdim = samples.first().map_or(per, |s| s.behavior_frames.len() * per);
            let data = ids.iter().flat_map(|&i| ds.behavior_window(&samples[i]).into_data()).collect();
            windows.push(Pool::new(wdim, data, ids)?);
        }
        Self::from_pools(n_neighbors, poses, windows)
    }

    pub fn domains(&self) -> usize {
        self.poses.len()
    }

    pub fn n_neighbors(&self) -> usize {
        self.n_neighbors
    }

    pub fn poses(&self, domain: usize) -> &Pool<PoseRef> {
        &self.poses[domain]
    }

    pub fn windows(&self, domain: usize) -> &Pool<usize> {
        &self.windows[domain]
    }

    /// Uniform draw from the domains other than `source` that have candidates.
    fn other_domain<R: Rng>(&self, source: usize, windows: bool, rng: &mut R) -> Option<usize> {
        let ok: Vec<usize> = (0..self.domains())
            .filter(|&d| d != source && if windows { !self.windows[d].is_empty() } else { !self.poses[d].is_empty() })
            .collect();
        if ok.is_empty() {
            static ONCE: Once = Once::new();
            ONCE.call_once(|| warn!("swap: no other domain with candidates, leaving samples unchanged"));
            return None;
        }
        Some(ok[rng.random_range(0..ok.len())])
    }
}

/// Softmax over negative distances. `None` (with a warning) when there are no
/// candidates.
pub fn swap_probabilities(distances: &[f64]) -> Option<Vec<f64>> {
    if distances.is_empty() {
        warn!("swap: empty candidate set");
        return None;
    }
    let dmin = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = distances.iter().map(|&d| (-(d - dmin)).exp()).collect();
    let z: f64 = e.iter().sum();
    Some(e.into_iter().map(|v| v / z).collect())
}

fn sample_neighbor<R: Rng>(nb: &[Neighbor], rng: &mut R) -> Option<usize> {
    let p = swap_probabilities(&nb.iter().map(|n| n.distance).collect::<Vec<_>>())?;
    let w = WeightedIndex::new(&p).ok()?;
    Some(nb[w.sample(rng)].index)
}

/// Replaces every pose of a `[T, J, 3]` window with a neighbor drawn from a
/// uniformly chosen other domain.
pub fn swap_behavior<R: Rng>(b: &Tensor<f32>, source: usize, index: &NeighborIndex, rng: &mut R) -> Tensor<f32> {
    let mut out = b.clone();
    let per: usize = b.shape()[1..].iter().product();
    for k in 0..b.shape()[0] {
        let Some(d) = index.other_domain(source, false, rng) else { return out };
        let pool = index.poses(d);
        let query = &b.data()[k * per..(k + 1) * per];
        let nb = pool.nearest(query, index.n_neighbors);
        if let Some(i) = sample_neighbor(&nb, rng) {
            out.data_mut()[k * per..(k + 1) * per].copy_from_slice(pool.entry(i));
        }
    }
    out
}

/// Picks, from a uniformly chosen other domain, the sample whose behavior
/// window resembles `b`; its neural window is the replacement. Returns
/// `(domain, sample index)`.
pub fn swap_neural<R: Rng>(b: &Tensor<f32>, source: usize, index: &NeighborIndex, rng: &mut R) -> Option<(usize, usize)> {
    let d = index.other_domain(source, true, rng)?;
    let pool = index.windows(d);
    let nb = pool.nearest(b.data(), index.n_neighbors);
    sample_neighbor(&nb, rng).map(|i| (d, *pool.reference(i)))
}

/// Sub-stream for one batch item.
pub(crate) fn item_stream(seed: u64, step: u64, item: usize) -> rng::Rng {
    rng::stream(seed, &[0xa6, step, item as u64])
}
