//! Motion registration of imaging frames and ΔF/F normalization.
//!
//! Registration estimates a dense displacement field `w` that minimizes
//!
//! ```text
//! E(w) = Σ_x (I_t(x + w(x)) − I_r(x))² + λ Σ_x ‖∇w(x)‖²
//! ```
//!
//! with bilinear warping, a coarse-to-fine pyramid and Gauss-Newton steps
//! (conjugate-gradient inner solve, backtracking so `E` never increases).


use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, dim_err, Result};
use crate::par;
use crate::synthdata::Dataset;
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 800.0;
pub const DEFAULT_DFF_WINDOW: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub lambda: f64,
    pub levels: usize,
    /// Gauss-Newton iterations per pyramid level.
    pub iterations: usize,
    pub cg_iterations: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA, levels: 3, iterations: 20, cg_iterations: 200 }
    }
}

/// Displacement in pixels, `[H, W, 2]` with `(dx, dy)` per pixel. Warping
/// `I_t` by the field aligns it to the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub w: Tensor<f64>,
    pub reference: usize,
    pub lambda: f64,
    /// Full-resolution energy at zero flow and after each pyramid level.
    pub energies: Vec<f64>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize, reference: usize, lambda: f64) -> Self {
        Self { w: Tensor::zeros([h, w, 2]), reference, lambda, energies: Vec::new() }
    }

    pub fn mean(&self) -> (f64, f64) {
        let n = (self.w.len() / 2).max(1) as f64;
        let d = self.w.data();
        (d.iter().step_by(2).sum::<f64>() / n, d.iter().skip(1).step_by(2).sum::<f64>() / n)
    }
}

/// Plain `h × w` image in f64.
#[derive(Clone, Debug)]
struct Image {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Image {
    fn from_tensor(t: &Tensor<f32>, op: &'static str) -> Result<Self> {
        if t.ndim() != 2 {
            return Err(dim_err(op, format!("expected [H, W], got {:?}", t.shape())));
        }
        if !t.all_finite() {
            return Err(crate::Error::NonFinite { op });
        }
        Ok(Self { h: t.shape()[0], w: t.shape()[1], v: t.data().iter().map(|&x| f64::from(x)).collect() })
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.v[y * self.w + x]
    }

    /// Bilinear sample with border clamping.
    fn sample(&self, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.h - 1), (x0 + 1).min(self.w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x1) * fx;
        let bot = self.at(y1, x0) * (1.0 - fx) + self.at(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Central-difference gradients `(∂x, ∂y)` with clamped borders.
    fn gradients(&self) -> (Image, Image) {
        let (h, w) = (self.h, self.w);
        let mut gx = vec![0.0; h * w];
        let mut gy = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
                gx[y * w + x] = if xr > xl { (self.at(y, xr) - self.at(y, xl)) / (xr - xl) as f64 } else { 0.0 };
                gy[y * w + x] = if yd > yu { (self.at(yd, x) - self.at(yu, x)) / (yd - yu) as f64 } else { 0.0 };
            }
        }
        (Image { h, w, v: gx }, Image { h, w, v: gy })
    }

    fn downsample(&self) -> Image {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                v[y * w + x] =
                    0.25 * (self.at(2 * y, 2 * x) + self.at(2 * y, 2 * x + 1) + self.at(2 * y + 1, 2 * x) + self.at(2 * y + 1, 2 * x + 1));
            }
        }
        Image { h, w, v }
    }
}

/// Flow stored as interleaved `(dx, dy)`.
struct Problem<'a> {
    target: &'a Image,
    reference: &'a Image,
    gx: Image,
    gy: Image,
    lambda: f64,
}

impl<'a> Problem<'a> {
    fn new(target: &'a Image, reference: &'a Image, lambda: f64) -> Self {
        let (gx, gy) = target.gradients();
        Self { target, reference, gx, gy, lambda }
    }

    fn dims(&self) -> (usize, usize) {
        (self.reference.h, self.reference.w)
    }

    fn residuals(&self, flow: &[f64]) -> Vec<f64> {
        let (h, w) = self.dims();
        let mut r = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (sx, sy) = (x as f64 + flow[2 * p], y as f64 + flow[2 * p + 1]);
                r[p] = self.target.sample(sy, sx) - self.reference.at(y, x);
            }
        }
        r
    }

    fn energy(&self, flow: &[f64]) -> f64 {
        let data: f64 = self.residuals(flow).iter().map(|r| r * r).sum();
        data + self.lambda * smoothness(flow, self.dims())
    }

    /// One Gauss-Newton step with backtracking; returns false when no
    /// decrease was found.
    fn step(&self, flow: &mut [f64], cg_iterations: usize) -> bool {
        let (h, w) = self.dims();
        let n = h * w;
        let r = self.residuals(flow);
        // Jacobian of the warped target at the current flow
        let mut jx = vec![0.0; n];
        let mut jy = vec![0.0; n];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (sx, sy) = (x as f64 + flow[2 * p], y as f64 + flow[2 * p + 1]);
                jx[p] = self.gx.sample(sy, sx);
                jy[p] = self.gy.sample(sy, sx);
            }
        }
        let apply = |v: &[f64], out: &mut [f64]| {
            laplacian(v, (h, w), out);
            for p in 0..n {
                let jv = jx[p] * v[2 * p] + jy[p] * v[2 * p + 1];
                out[2 * p] = self.lambda * out[2 * p] + jx[p] * jv;
                out[2 * p + 1] = self.lambda * out[2 * p + 1] + jy[p] * jv;
            }
        };
        // b = −(Jᵀr + λ L w)
        let mut b = vec![0.0; 2 * n];
        laplacian(flow, (h, w), &mut b);
        for p in 0..n {
            b[2 * p] = -(self.lambda * b[2 * p] + jx[p] * r[p]);
            b[2 * p + 1] = -(self.lambda * b[2 * p + 1] + jy[p] * r[p]);
        }
        // 2×2 block-Jacobi preconditioner
        let inv: Vec<[f64; 3]> = (0..n)
            .map(|p| {
                let deg = self.lambda * degree(p / w, p % w, h, w) as f64 + 1e-9;
                let (a, c, d) = (jx[p] * jx[p] + deg, jx[p] * jy[p], jy[p] * jy[p] + deg);
                let det = a * d - c * c;
                [d / det, -c / det, a / det]
            })
            .collect();
        let precond = |v: &[f64], out: &mut [f64]| {
            for p in 0..n {
                let [a, c, d] = inv[p];
                out[2 * p] = a * v[2 * p] + c * v[2 * p + 1];
                out[2 * p + 1] = c * v[2 * p] + d * v[2 * p + 1];
            }
        };
        let delta = conjugate_gradient(&apply, &precond, &b, cg_iterations);

        let e0 = self.energy(flow);
        let mut t = 1.0;
        for _ in 0..12 {
            let cand: Vec<f64> = flow.iter().zip(&delta).map(|(f, d)| f + t * d).collect();
            if self.energy(&cand) < e0 {
                flow.copy_from_slice(&cand);
                return true;
            }
            t *= 0.5;
        }
        false
    }
}

fn degree(y: usize, x: usize, h: usize, w: usize) -> usize {
    usize::from(y > 0) + usize::from(y + 1 < h) + usize::from(x > 0) + usize::from(x + 1 < w)
}

/// `Σ` over grid edges of `‖w_p − w_q‖²` (forward differences, both components).
fn smoothness(flow: &[f64], (h, w): (usize, usize)) -> f64 {
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for q in [(x + 1 < w).then(|| p + 1), (y + 1 < h).then(|| p + w)].into_iter().flatten() {
                for c in 0..2 {
                    s += (flow[2 * p + c] - flow[2 * q + c]).powi(2);
                }
            }
        }
    }
    s
}

/// Graph Laplacian of the grid applied per component (half-gradient of the
/// smoothness term).
fn laplacian(v: &[f64], (h, w): (usize, usize), out: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let nbrs = [(y > 0).then(|| p - w), (y + 1 < h).then(|| p + w), (x > 0).then(|| p - 1), (x + 1 < w).then(|| p + 1)];
            for c in 0..2 {
                out[2 * p + c] = nbrs.iter().flatten().map(|&q| v[2 * p + c] - v[2 * q + c]).sum();
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conjugate_gradient(
    apply: &dyn Fn(&[f64], &mut [f64]),
    precond: &dyn Fn(&[f64], &mut [f64]),
    b: &[f64],
    iterations: usize,
) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let b_norm = dot(b, b).sqrt();
    let mut ap = vec![0.0; n];
    for _ in 0..iterations {
        if dot(&r, &r).sqrt() <= 1e-10 * b_norm.max(1e-300) {
            break;
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    x
}

/// Resamples a flow field to `(h, w)`, scaling displacements by `factor`.
fn resample_flow(flow: &[f64], (fh, fw): (usize, usize), (h, w): (usize, usize), factor: f64) -> Vec<f64> {
    let sy = fh as f64 / h as f64;
    let sx = fw as f64 / w as f64;
    let comp = |c: usize| Image { h: fh, w: fw, v: (0..fh * fw).map(|p| flow[2 * p + c]).collect() };
    let (cx, cy) = (comp(0), comp(1));
    let mut out = vec![0.0; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (yy, xx) = ((y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5);
            out[2 * (y * w + x)] = cx.sample(yy, xx) * factor;
            out[2 * (y * w + x) + 1] = cy.sample(yy, xx) * factor;
        }
    }
    out
}

/// Estimates the flow that warps `target` onto `reference`.
pub fn register_frame(target: &Tensor<f32>, reference: &Tensor<f32>, cfg: &RegistrationConfig) -> Result<FlowField> {
    if target.shape() != reference.shape() {
        return Err(dim_err("register_frame", format!("{:?} vs {:?}", target.shape(), reference.shape())));
    }
    if !(cfg.lambda >= 0.0) || cfg.levels == 0 {
        return Err(config_err("registration needs λ ≥ 0 and at least one level"));
    }
    let t0 = Image::from_tensor(target, "register_frame")?;
    let r0 = Image::from_tensor(reference, "register_frame")?;
    let (h, w) = (t0.h, t0.w);

    let mut pyramid = vec![(t0, r0)];
    while pyramid.len() < cfg.levels {
        let (t, r) = pyramid.last().expect("non-empty");
        if t.h < 8 || t.w < 8 {
            break;
        }
        let next = (t.downsample(), r.downsample());
        pyramid.push(next);
    }

    let full = Problem::new(&pyramid[0].0, &pyramid[0].1, cfg.lambda);
    let mut best = vec![0.0; 2 * h * w];
    let mut best_e = full.energy(&best);
    let mut energies = vec![best_e];

    for level in (0..pyramid.len()).rev() {
        let (t, r) = &pyramid[level];
        let scale = (1usize << level) as f64;
        let prob = Problem::new(t, r, cfg.lambda);
        let mut flow = if level == 0 { best.clone() } else { resample_flow(&best, (h, w), (t.h, t.w), 1.0 / scale) };
        for _ in 0..cfg.iterations {
            if !prob.step(&mut flow, cfg.cg_iterations) {
                break;
            }
        }
        let cand = if level == 0 { flow } else { resample_flow(&flow, (t.h, t.w), (h, w), scale) };
        let e = full.energy(&cand);
        // a coarse solution that does not help at full resolution is dropped
        if e <= best_e {
            best = cand;
            best_e = e;
        }
        energies.push(best_e);
    }
    Ok(FlowField { w: Tensor::new([h, w, 2], best)?, reference: 0, lambda: cfg.lambda, energies })
}

/// Samples `image` at `x + w(x)` with bilinear interpolation.
pub fn apply_flow(image: &Tensor<f32>, flow: &FlowField) -> Result<Tensor<f32>> {
    let img = Image::from_tensor(image, "apply_flow")?;
    if flow.w.shape() != [img.h, img.w, 2] {
        return Err(dim_err("apply_flow", format!("flow {:?} for image {:?}", flow.w.shape(), image.shape())));
    }
    if !flow.w.all_finite() {
        return Err(crate::Error::NonFinite { op: "apply_flow" });
    }
    let f = flow.w.data();
    let mut out = Vec::with_capacity(img.h * img.w);
    for y in 0..img.h {
        for x in 0..img.w {
            let p = y * img.w + x;
            out.push(img.sample(y as f64 + f[2 * p + 1], x as f64 + f[2 * p]) as f32);
        }
    }
    Tensor::new([img.h, img.w], out)
}

/// Registers every frame of a `[T, H, W]` stack to frame `reference`, in
/// parallel across frames.
pub fn register_stack(stack: &Tensor<f32>, reference: usize, cfg: &RegistrationConfig) -> Result<(Tensor<f32>, Vec<FlowField>)> {
    if stack.ndim() != 3 || reference >= stack.shape()[0] {
        return Err(dim_err("register_stack", format!("stack {:?}, reference frame {reference}", stack.shape())));
    }
    let refimg = stack.index_axis0(reference);
    let results = crate::par::try_map_range(stack.shape()[0], |t| {
        let frame = stack.index_axis0(t);
        let mut flow = register_frame(&frame, &refimg, cfg)?;
        flow.reference = reference;
        let warped = apply_flow(&frame, &flow)?;
        Ok::<_, crate::Error>((warped, flow))
    })?;
    let (frames, flows): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok((Tensor::stack(&frames)?, flows))
}

/// `(F − F0) / F0 × 100`, with `F0` the per-pixel minimum of a centered
/// moving average of `window` frames (shrinking at the ends), floored at 1e-6.
pub fn delta_f_over_f(stack: &Tensor<f32>, window: usize) -> Result<Tensor<f32>> {
    if stack.ndim() != 3 {
        return Err(dim_err("delta_f_over_f", format!("expected [T, H, W], got {:?}", stack.shape())));
    }
    let t = stack.shape()[0];
    if window == 0 || t < window {
        return Err(contract_err(format!("ΔF/F needs at least {window} frames, got {t}")));
    }
    let hw = stack.shape()[1] * stack.shape()[2];
    let half = window / 2;
    let d = stack.data();
    let mut f0 = vec![f64::INFINITY; hw];
    for p in 0..hw {
        let mut prefix = vec![0.0f64; t + 1];
        for i in 0..t {
            prefix[i + 1] = prefix[i] + f64::from(d[i * hw + p]);
        }
        for i in 0..t {
            let (lo, hi) = (i.saturating_sub(half), (i + window - half).min(t));
            let ma = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
            f0[p] = f0[p].min(ma);
        }
        f0[p] = f0[p].max(1e-6);
    }
    let out = d.iter().enumerate().map(|(i, &v)| ((f64::from(v) - f0[i % hw]) / f0[i % hw] * 100.0) as f32).collect();
    Tensor::new(stack.shape().to_vec(), out)
}

/// What the neural encoder sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuralInput {
    /// Fluorescence as recorded (or generated).
    Raw,
    /// Per-trial ΔF/F with the given moving-average window.
    DeltaFOverF { window: usize },
}

impl Default for NeuralInput {
    fn default() -> Self {
        NeuralInput::DeltaFOverF { window: DEFAULT_DFF_WINDOW }
    }
}

impl NeuralInput {
    /// The dataset with every trial's neural stack converted; borrowed when `Raw`.
    pub fn prepare<'a>(&self, ds: &'a Dataset) -> Result<Cow<'a, Dataset>> {
        match *self {
            NeuralInput::Raw => Ok(Cow::Borrowed(ds)),
            NeuralInput::DeltaFOverF { window } => {
                let stacks = par::try_map_range(ds.trials.len(), |i| delta_f_over_f(&ds.trials[i].neural, window))?;
                let mut out = ds.clone();
                for (t, s) in out.trials.iter_mut().zip(stacks) {
                    t.neural = s;
                }
                Ok(Cow::Owned(out))
            }
        }
    }
}
