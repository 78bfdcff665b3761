use rand::Rng;
use serde::{Deserialize, Serialize};

use super::neural::warn_degenerate;
use crate::error::{config_err, dim_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorJitter {
    pub scale_p: f64,
    /// Global scale factor drawn from `[1 - s, 1 + s]`.
    pub scale: f64,
    pub shear_p: f64,
    /// Off-diagonal shear coefficients drawn from `[-s, s]`.
    pub shear: f64,
    /// Per-frame drop probability.
    pub temporal_drop: f64,
    /// Per-joint drop probability (the joint is zeroed in every frame).
    pub spatial_drop: f64,
}

impl Default for BehaviorJitter {
    fn default() -> Self {
        Self { scale_p: 0.5, scale: 0.1, shear_p: 0.5, shear: 0.1, temporal_drop: 0.05, spatial_drop: 0.05 }
    }
}

impl BehaviorJitter {
    pub fn disabled() -> Self {
        Self { scale_p: 0.0, shear_p: 0.0, temporal_drop: 0.0, spatial_drop: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (n, p) in [
            ("scale_p", self.scale_p),
            ("shear_p", self.shear_p),
            ("temporal_drop", self.temporal_drop),
            ("spatial_drop", self.spatial_drop),
        ] {
            super::check_prob(n, p)?;
        }
        if !(0.0..1.0).contains(&self.scale) || !(self.shear >= 0.0) {
            return Err(config_err("pose scale must be in [0, 1) and shear ≥ 0"));
        }
        Ok(())
    }
}

/// Jittered `[T, J, 3]` window plus a `[T, J]` mask with 1 where values were
/// zero-filled.
#[derive(Clone, Debug, PartialEq)]
pub struct JitteredPose {
    pub window: Tensor<f32>,
    pub drop_mask: Tensor<f32>,
}

pub fn jitter_behavior<R: Rng>(b: &Tensor<f32>, cfg: &BehaviorJitter, rng: &mut R) -> Result<JitteredPose> {
    if b.ndim() != 3 || b.shape()[2] != 3 {
        return Err(dim_err("jitter_behavior", format!("expected [T, J, 3], got {:?}", b.shape())));
    }
    let (t, j) = (b.shape()[0], b.shape()[1]);
    let mut m = [[1.0f64, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    if rng.random::<f64>() < cfg.scale_p {
        let s = 1.0 + rng.random_range(-1.0..=1.0) * cfg.scale;
        for (i, row) in m.iter_mut().enumerate() {
            row[i] *= s;
        }
    }
    if rng.random::<f64>() < cfg.shear_p {
        let mut sh = [[1.0f64, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for (r, row) in sh.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                if r != c {
                    *v = rng.random_range(-1.0..=1.0) * cfg.shear;
                }
            }
        }
        let prev = m;
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = (0..3).map(|k| sh[r][k] * prev[k][c]).sum();
            }
        }
    }
    let frames: Vec<bool> = (0..t).map(|_| rng.random::<f64>() < cfg.temporal_drop).collect();
    let joints: Vec<bool> = (0..j).map(|_| rng.random::<f64>() < cfg.spatial_drop).collect();

    let mut out = b.clone();
    let mut mask = Tensor::zeros([t, j]);
    for f in 0..t {
        for k in 0..j {
            let o = (f * j + k) * 3;
            if frames[f] || joints[k] {
                out.data_mut()[o..o + 3].fill(0.0);
                mask.data_mut()[f * j + k] = 1.0;
                continue;
            }
            let p: Vec<f64> = b.data()[o..o + 3].iter().map(|&v| f64::from(v)).collect();
            for r in 0..3 {
                out.data_mut()[o + r] = (m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2]) as f32;
            }
        }
    }
    if t > 0 && frames.iter().all(|&d| d) {
        warn_degenerate("temporal drop");
    }
    Ok(JitteredPose { window: out, drop_mask: mask })
}
