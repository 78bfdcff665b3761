use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::tensor::Tensor;

/// `K_t = γ^t`, `t = 0..length`, scaled by the event amplitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalciumKernel {
    pub gamma: f64,
    pub length: usize,
    pub amplitude: f64,
}

impl Default for CalciumKernel {
    fn default() -> Self {
        Self { gamma: 0.95, length: 32, amplitude: 1.0 }
    }
}

impl CalciumKernel {
    pub fn new(gamma: f64, length: usize, amplitude: f64) -> Result<Self> {
        let k = Self { gamma, length, amplitude };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) || self.length == 0 || !(self.amplitude >= 0.0) {
            return Err(config_err(format!("calcium kernel needs γ ∈ (0,1), L ≥ 1, α ≥ 0; got {self:?}")));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.length).map(|t| self.gamma.powi(t as i32)).collect()
    }
}

fn frame_size(n: &Tensor<f32>, op: &'static str) -> Result<usize> {
    if n.ndim() != 3 {
        return Err(dim_err(op, format!("expected [T, H, W], got {:?}", n.shape())));
    }
    Ok(n.shape()[1] * n.shape()[2])
}

/// Adds a decaying copy of `donor` to every frame: `ñ_t = n_t + α·γ^(t+δ)·donor`,
/// then clamps at zero.
pub fn calcium_augment(n: &Tensor<f32>, donor: &Tensor<f32>, kernel: &CalciumKernel, delta: usize) -> Result<Tensor<f32>> {
    let hw = frame_size(n, "calcium_augment")?;
    if donor.len() != hw {
        return Err(dim_err("calcium_augment", format!("donor {:?} vs frame {:?}", donor.shape(), &n.shape()[1..])));
    }
    let mut out = n.clone();
    for (t, frame) in out.data_mut().chunks_mut(hw).enumerate() {
        let k = (kernel.amplitude * kernel.gamma.powi((t + delta) as i32)) as f32;
        for (v, &d) in frame.iter_mut().zip(donor.data()) {
            *v = (*v + k * d).max(0.0);
        }
    }
    Ok(out)
}

/// `ñ = n + α·donor` with one α for the whole window.
pub fn mix_augment(n: &Tensor<f32>, donor: &Tensor<f32>, alpha: f64) -> Result<Tensor<f32>> {
    if n.shape() != donor.shape() {
        return Err(dim_err("mix_augment", format!("{:?} vs {:?}", n.shape(), donor.shape())));
    }
    let a = alpha as f32;
    let data = n.data().iter().zip(donor.data()).map(|(&x, &y)| x + a * y).collect();
    Tensor::new(n.shape().to_vec(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuralJitter {
    /// Probability that Poisson resampling is applied to a window.
    pub poisson_p: f64,
    /// Photon-count scale range; larger means less noise.
    pub poisson_scale: (f64, f64),
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub color_p: f64,
    /// Additive brightness delta drawn from `[-b, b]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - c, 1 + c]`, around the window mean.
    pub contrast: f64,
}

impl Default for NeuralJitter {
    fn default() -> Self {
        Self {
            poisson_p: 0.5,
            poisson_scale: (10.0, 40.0),
            blur_p: 0.5,
            blur_sigma: (0.1, 1.0),
            color_p: 0.8,
            brightness: 0.1,
            contrast: 0.2,
        }
    }
}

impl NeuralJitter {
    pub fn disabled() -> Self {
        Self { poisson_p: 0.0, blur_p: 0.0, color_p: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        super::check_prob("poisson_p", self.poisson_p)?;
        super::check_prob("blur_p", self.blur_p)?;
        super::check_prob("color_p", self.color_p)?;
        super::check_range("poisson_scale", self.poisson_scale, 1e-9, f64::INFINITY)?;
        super::check_range("blur_sigma", self.blur_sigma, 0.0, f64::INFINITY)?;
        if !(0.0..1.0).contains(&self.contrast) || !(self.brightness >= 0.0) {
            return Err(config_err("contrast must be in [0, 1) and brightness ≥ 0"));
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo { rng.random_range(lo..hi) } else { lo }
}

/// Same parameter draw for every frame of the window.
pub fn jitter_neural<R: Rng>(n: &Tensor<f32>, cfg: &NeuralJitter, rng: &mut R) -> Result<Tensor<f32>> {
    let hw = frame_size(n, "jitter_neural")?;
    let (h, w) = (n.shape()[1], n.shape()[2]);
    let mut out = n.clone();
    if rng.random::<f64>() < cfg.poisson_p {
        let scale = uniform(rng, cfg.poisson_scale);
        for v in out.data_mut() {
            let lam = f64::from(*v).max(0.0) * scale;
            *v = if lam > 0.0 { (Poisson::new(lam).expect("positive rate").sample(rng) / scale) as f32 } else { 0.0 };
        }
    }
    if rng.random::<f64>() < cfg.blur_p {
        let sigma = uniform(rng, cfg.blur_sigma);
        for frame in out.data_mut().chunks_mut(hw) {
            gaussian_blur(frame, h, w, sigma);
        }
    }
    if rng.random::<f64>() < cfg.color_p {
        let b = uniform(rng, (-cfg.brightness, cfg.brightness));
        let c = uniform(rng, (1.0 - cfg.contrast, 1.0 + cfg.contrast));
        color(&mut out, b, c);
    }
    Ok(out)
}

/// `v ← mean + c·(v − mean) + b` with the window mean.
pub fn color(n: &mut Tensor<f32>, brightness: f64, contrast: f64) {
    let mean = n.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n.len().max(1) as f64;
    for v in n.data_mut() {
        *v = (mean + contrast * (f64::from(*v) - mean) + brightness) as f32;
    }
}

/// Separable Gaussian blur of one `h × w` frame, clamped at the borders.
pub fn gaussian_blur(frame: &mut [f32], h: usize, w: usize, sigma: f64) {
    if sigma < 1e-3 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = k.iter().sum();
    let k: Vec<f64> = k.into_iter().map(|v| v / z).collect();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r).map(|i| k[(i + r) as usize] * f64::from(frame[y * w + clamp(x as isize + i, w)])).sum();
            tmp[y * w + x] = s as f32;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r).map(|i| k[(i + r) as usize] * f64::from(tmp[clamp(y as isize + i, h) * w + x])).sum();
            frame[y * w + x] = s as f32;
        }
    }
}

pub(crate) fn warn_degenerate(what: &str) {
    warn!("{what}: augmentation produced an all-zero window");
}
