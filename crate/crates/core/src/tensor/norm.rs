//! Batch normalization over axis 1 of `[N,C,...]`.

use super::{s, Scalar, Tensor};
use crate::error::{config_err, dim_err, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics carried between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnRunning<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub(crate) struct BnSaved<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    n: usize,
    c: usize,
    inner: usize,
    train: bool,
}

pub(crate) fn bn_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: &mut BnRunning<T>,
    train: bool,
) -> Result<(Vec<T>, BnSaved<T>)> {
    let xs = x.shape();
    if xs.len() < 2 {
        return Err(dim_err("batch_norm", format!("expected [N,C,...], got {xs:?}")));
    }
    let (n, c) = (xs[0], xs[1]);
    let inner: usize = xs[2..].iter().product();
    if gamma.len() != c || beta.len() != c || running.channels() != c {
        return Err(dim_err("batch_norm", format!("{c} channels but gamma/beta/running sized {}/{}/{}", gamma.len(), beta.len(), running.channels())));
    }
    if train && n < 2 {
        return Err(config_err("batch_norm in train mode needs a batch of at least 2"));
    }
    let data = x.data();
    let m = n * inner;
    let eps = s::<T>(BN_EPS);
    let mut inv_std = vec![T::zero(); c];
    let mut mean = vec![T::zero(); c];
    if train {
        let mom = s::<T>(BN_MOMENTUM);
        let mf = s::<T>(m as f64);
        for ch in 0..c {
            let mut sum = T::zero();
            for b in 0..n {
                sum += data[(b * c + ch) * inner..][..inner].iter().copied().sum::<T>();
            }
            let mu = sum / mf;
            let mut sq = T::zero();
            for b in 0..n {
                sq += data[(b * c + ch) * inner..][..inner].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
            let var = sq / mf;
            mean[ch] = mu;
            inv_std[ch] = T::one() / (var + eps).sqrt();
            let unbiased = if m > 1 { sq / s::<T>((m - 1) as f64) } else { var };
            running.mean[ch] = (T::one() - mom) * running.mean[ch] + mom * mu;
            running.var[ch] = (T::one() - mom) * running.var[ch] + mom * unbiased;
        }
    } else {
        for ch in 0..c {
            mean[ch] = running.mean[ch];
            inv_std[ch] = T::one() / (running.var[ch] + eps).sqrt();
        }
    }
    let mut xhat = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                let h = (data[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    Ok((out, BnSaved { xhat, inv_std, n, c, inner, train }))
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn bn_backward<T: Scalar>(gy: &[T], gamma: &[T], sv: &BnSaved<T>) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, inner) = (sv.n, sv.c, sv.inner);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                dgamma[ch] += gy[i] * sv.xhat[i];
                dbeta[ch] += gy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); gy.len()];
    let mf = s::<T>((n * inner) as f64);
    for ch in 0..c {
        let k = gamma[ch] * sv.inv_std[ch];
        // sums of dxhat and dxhat*xhat over the channel
        let (sum_d, sum_dx) = (dbeta[ch] * gamma[ch], dgamma[ch] * gamma[ch]);
        for b in 0..n {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                dx[i] = if sv.train {
                    sv.inv_std[ch] * (gamma[ch] * gy[i] - (sum_d + sv.xhat[i] * sum_dx) / mf)
                } else {
                    k * gy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
