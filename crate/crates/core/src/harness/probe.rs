use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::rng;

/// Frozen feature rows, one per window.
///
/// Only built from the neural encoder output `h` ([`super::extract_features`])
/// or from raw inputs ([`super::raw_features`]); projection outputs have no way in.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    dim: usize,
    data: Vec<f32>,
}

impl Features {
    pub(crate) fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(dim_err("features", format!("{} values do not form rows of {dim}", data.len())));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Rows `ids`, in order.
    pub fn select(&self, ids: &[usize]) -> Self {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &i in ids {
            data.extend_from_slice(self.row(i));
        }
        Self { dim: self.dim, data }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Seeds the stratified subset for fractions below 1.
    pub seed: u64,
    /// Z-score features with training-set statistics before fitting.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 100, lr: 1e-2, seed: 0, standardize: true }
    }
}

/// Picks `⌈fraction·n_k⌉` indices of every class `k`, returned sorted.
pub fn stratified_subset(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(config_err(format!("label fraction must lie in (0, 1], got {fraction}")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut picked = Vec::new();
    for k in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        if idx.is_empty() {
            continue;
        }
        let keep = ((idx.len() as f64 * fraction).ceil() as usize).min(idx.len());
        if keep < idx.len() {
            idx.shuffle(&mut rng::stream(seed, &[0x5b, k as u64]));
            idx.truncate(keep);
        }
        picked.extend(idx);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// A fitted multinomial logistic regression on standardized features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    classes: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[dim, classes]`
    w: Vec<f64>,
    b: Vec<f64>,
}

impl LinearProbe {
    /// Full-batch Adam on the class-balanced softmax cross-entropy.
    ///
    /// Classes are weighted by inverse frequency, so a probe that learns nothing
    /// spreads its guesses evenly instead of always naming the majority class.
    pub fn fit(x: &Features, y: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        let (n, d) = (x.rows(), x.dim());
        if n != y.len() {
            return Err(dim_err("linear_probe", format!("{n} rows but {} labels", y.len())));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(config_err(format!("label {bad} out of range for {classes} classes")));
        }
        let mut counts = vec![0usize; classes];
        for &l in y {
            counts[l] += 1;
        }
        let present = counts.iter().filter(|&&c| c > 0).count();
        if present < 2 {
            return Err(config_err("linear probe needs at least 2 classes in its training labels"));
        }

        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(x.row(i)) {
                *m += f64::from(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for i in 0..n {
            for ((s, m), &v) in scale.iter_mut().zip(&mean).zip(x.row(i)) {
                *s += (f64::from(v) - m).powi(2);
            }
        }
        for s in &mut scale {
            let sd = (*s / n as f64).sqrt();
            *s = if sd > 1e-8 { 1.0 / sd } else { 0.0 };
        }
        if !cfg.standardize {
            mean.fill(0.0);
            scale.fill(1.0);
        }
        let xs: Vec<f64> = (0..n)
            .flat_map(|i| x.row(i).iter().zip(&mean).zip(&scale).map(|((&v, m), s)| (f64::from(v) - m) * s).collect::<Vec<_>>())
            .collect();
        let weight: Vec<f64> =
            counts.iter().map(|&c| if c > 0 { n as f64 / (present as f64 * c as f64) } else { 0.0 }).collect();
        let norm: f64 = y.iter().map(|&l| weight[l]).sum();

        let mut p = Self { classes, mean, scale, w: vec![0.0; d * classes], b: vec![0.0; classes] };
        let mut adam_w = Adam::new(d * classes);
        let mut adam_b = Adam::new(classes);
        let mut gw = vec![0.0; d * classes];
        let mut gb = vec![0.0; classes];
        let mut probs = vec![0.0; classes];
        for _ in 0..cfg.epochs {
            gw.fill(0.0);
            gb.fill(0.0);
            for i in 0..n {
                let row = &xs[i * d..(i + 1) * d];
                p.logits(row, &mut probs);
                softmax(&mut probs);
                let s = weight[y[i]] / norm;
                probs[y[i]] -= 1.0;
                for (k, g) in probs.iter().enumerate() {
                    gb[k] += s * g;
                }
                for (j, &v) in row.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    let gr = &mut gw[j * classes..(j + 1) * classes];
                    for (a, g) in gr.iter_mut().zip(&probs) {
                        *a += s * v * g;
                    }
                }
            }
            adam_w.step(&mut p.w, &gw, cfg.lr);
            adam_b.step(&mut p.b, &gb, cfg.lr);
        }
        Ok(p)
    }

    fn logits(&self, standardized: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.b);
        for (j, &v) in standardized.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(&self.w[j * self.classes..(j + 1) * self.classes]) {
                *o += v * w;
            }
        }
    }

    pub fn predict(&self, x: &Features) -> Vec<usize> {
        let mut row = vec![0.0; x.dim()];
        let mut out = vec![0.0; self.classes];
        (0..x.rows())
            .map(|i| {
                for ((r, &v), (m, s)) in row.iter_mut().zip(x.row(i)).zip(self.mean.iter().zip(&self.scale)) {
                    *r = (f64::from(v) - m) * s;
                }
                self.logits(&row, &mut out);
                // first maximum, so ties resolve the same way every time
                let mut best = 0;
                for k in 1..self.classes {
                    if out[k] > out[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    pub fn accuracy(&self, x: &Features, y: &[usize]) -> f64 {
        if y.is_empty() {
            return 0.0;
        }
        let hits = self.predict(x).iter().zip(y).filter(|(a, b)| a == b).count();
        hits as f64 / y.len() as f64
    }
}

fn softmax(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let (c1, c2) = (1.0 - B1.powi(self.t), 1.0 - B2.powi(self.t));
        for i in 0..p.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g[i] * g[i];
            p[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Fits on `fraction` of the training labels (class-stratified) and returns
/// held-out accuracy.
pub fn linear_probe(
    train: &Features,
    train_labels: &[usize],
    test: &Features,
    test_labels: &[usize],
    classes: usize,
    fraction: f64,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let ids = stratified_subset(train_labels, fraction, cfg.seed)?;
    let y: Vec<usize> = ids.iter().map(|&i| train_labels[i]).collect();
    let probe = LinearProbe::fit(&train.select(&ids), &y, classes, cfg)?;
    Ok(probe.accuracy(test, test_labels))
}
