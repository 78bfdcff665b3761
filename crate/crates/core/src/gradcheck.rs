//! Central finite-difference gradient checks in f64.
//!
//! The checker only ever evaluates the forward pass for its numerical estimate,
//! so it is independent of every backward rule it verifies.

use serde::Serialize;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Outcome of one gradient check.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    /// max over checked entries of |g_ad - g_fd| / max(1, |g_fd|)
    pub max_rel_err: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Options for [`check`].
#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Check at most this many entries per input (evenly strided).
    pub max_entries: usize,
    pub tolerance: f64,
    /// The tape gradient is expected to equal `fd_scale` times the central
    /// difference; only nodes that rewrite their own backward pass need ≠ 1.
    pub fd_scale: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, max_entries: usize::MAX, tolerance: 1e-5, fd_scale: 1.0 }
    }
}

/// Compares the tape gradient of `f` against central differences for every input.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], opts: CheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.item(l))
    };

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let ad = grads.wrt_or_zeros(*var);
        let n = inputs[k].len();
        let stride = n.div_ceil(opts.max_entries.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let fd = opts.fd_scale * (plus - minus) / (2.0 * opts.step);
            let err = (ad.data()[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok(GradCheckReport { name: name.to_string(), max_rel_err: worst, checked, tolerance: opts.tolerance })
}

/// Tolerance for single ops.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for full objectives and encoder stacks.
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    use rand::Rng;
    let mut r = crate::rng::stream(seed, &[0x9c]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero, so kinks (ReLU) are never straddled.
fn off_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut t = uniform(shape, seed, 0.1, 1.0);
    let mut r = crate::rng::stream(seed, &[0x9d]);
    for v in t.data_mut() {
        if r.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Reduces `y` to a scalar with fixed random weights, so every output entry
/// receives a distinct upstream gradient.
fn weighted(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = uniform(tape.shape(y), seed ^ 0x5eed, -1.0, 1.0);
    let wv = tape.constant(w);
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

type CaseFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    opts: CheckOptions,
    f: CaseFn,
}

fn op(name: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    let seed = name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b)));
    Case {
        name,
        inputs,
        opts: CheckOptions { tolerance: OP_TOLERANCE, ..Default::default() },
        f: Box::new(move |t, v| {
            let y = f(t, v)?;
            weighted(t, y, seed)
        }),
    }
}

fn objective(name: &'static str, inputs: Vec<Tensor<f64>>, max_entries: usize, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        inputs,
        opts: CheckOptions { tolerance: END_TO_END_TOLERANCE, max_entries, ..Default::default() },
        f: Box::new(f),
    }
}

fn cases() -> Vec<Case> {
    use crate::encoders::{AttentionMode, EncoderConfig, Forward, Heads, Modality, ModelBundle, TemporalConfig};
    use crate::objectives::{domain_cross_entropy, grl_discriminator_loss, info_nce, info_nce_domain_masked, mmd_with_bandwidth, LAMBDA_D};
    use crate::tensor::{BnRunning, ConvSpec, PoolSpec};

    let u = |shape: &[usize], seed| uniform(shape, seed, -1.0, 1.0);
    let mut v = vec![
        op("matmul", vec![u(&[3, 4], 1), u(&[4, 2], 2)], |t, v| t.matmul(v[0], v[1])),
        op("bmm", vec![u(&[2, 3, 4], 3), u(&[2, 4, 2], 4)], |t, v| t.bmm(v[0], v[1])),
        op("permute", vec![u(&[2, 3, 4], 5)], |t, v| t.permute(v[0], &[2, 0, 1])),
        op("transpose", vec![u(&[3, 5], 6)], |t, v| t.transpose(v[0])),
        op("reshape", vec![u(&[2, 6], 7)], |t, v| t.reshape(v[0], &[3, 4])),
        op("add", vec![u(&[3, 4], 8), u(&[3, 4], 9)], |t, v| t.add(v[0], v[1])),
        op("sub", vec![u(&[3, 4], 10), u(&[3, 4], 11)], |t, v| t.sub(v[0], v[1])),
        op("mul", vec![u(&[3, 4], 12), u(&[3, 4], 13)], |t, v| t.mul(v[0], v[1])),
        op("add_along", vec![u(&[2, 3, 4], 14), u(&[3], 15)], |t, v| t.add_along(v[0], v[1], 1)),
        op("scale", vec![u(&[3, 4], 16)], |t, v| t.scale(v[0], -2.5)),
        op("neg", vec![u(&[3, 4], 17)], |t, v| t.neg(v[0])),
        op("add_scalar", vec![u(&[3, 4], 18)], |t, v| t.add_scalar(v[0], 0.7)),
        op("relu", vec![off_zero(&[4, 5], 19)], |t, v| t.relu(v[0])),
        op("tanh", vec![u(&[3, 4], 20)], |t, v| t.tanh(v[0])),
        op("exp", vec![u(&[3, 4], 21)], |t, v| t.exp(v[0])),
        op("log", vec![uniform(&[3, 4], 22, 0.2, 2.0)], |t, v| t.log(v[0])),
        op("sum", vec![u(&[3, 4], 23)], |t, v| t.sum(v[0])),
        op("mean", vec![u(&[3, 4], 24)], |t, v| t.mean(v[0])),
        op("sum_axis", vec![u(&[2, 3, 4], 25)], |t, v| t.sum_axis(v[0], 1)),
        op("mean_axis", vec![u(&[2, 3, 4], 26)], |t, v| t.mean_axis(v[0], 2)),
        op("softmax", vec![u(&[3, 5], 27)], |t, v| t.softmax(v[0], 1)),
        op("log_softmax", vec![u(&[3, 5], 28)], |t, v| t.log_softmax(v[0], 0)),
        op("log_softmax_masked", vec![u(&[3, 3], 29)], |t, v| {
            t.log_softmax_masked(v[0], 1, Some(vec![true, false, true, true, true, false, false, true, true]))
        }),
        op("diag", vec![u(&[4, 4], 30)], |t, v| t.diag(v[0])),
        op("gather_rows", vec![u(&[4, 3], 31)], |t, v| t.gather_rows(v[0], &[2, 0, 2, 3])),
        op("conv1d", vec![u(&[2, 3, 7], 32), u(&[4, 3, 3], 33)], |t, v| t.conv(v[0], v[1], ConvSpec::d1(1, 1))),
        op("conv2d", vec![u(&[2, 2, 5, 4], 34), u(&[3, 2, 3, 3], 35)], |t, v| t.conv(v[0], v[1], ConvSpec::d2(2, 1))),
        op("max_pool1d", vec![u(&[2, 3, 8], 36)], |t, v| t.max_pool(v[0], PoolSpec::d1(2, 2))),
        op("max_pool2d", vec![u(&[2, 2, 4, 6], 37)], |t, v| t.max_pool(v[0], PoolSpec::d2(2, 2))),
        op("batch_norm", vec![u(&[5, 3], 38), uniform(&[3], 39, 0.5, 1.5), u(&[3], 40)], |t, v| {
            let mut running = BnRunning::new(3);
            t.batch_norm(v[0], v[1], v[2], &mut running, true)
        }),
        op("normalize_rows", vec![u(&[3, 4], 41)], |t, v| t.normalize_rows(v[0], 1e-8)),
        op("pairwise_sq_dist", vec![u(&[3, 4], 42), u(&[5, 4], 43)], |t, v| t.pairwise_sq_dist(v[0], v[1])),
        op("linear", vec![u(&[3, 4], 44), u(&[4, 2], 45), u(&[2], 46)], |t, v| t.linear(v[0], v[1], v[2])),
        op("cosine_similarity_matrix", vec![u(&[3, 4], 47), u(&[5, 4], 48)], |t, v| t.cosine_similarity_matrix(v[0], v[1])),
    ];
    let mut rev = op("grad_reverse", vec![u(&[3, 4], 49)], |t, v| t.grad_reverse(v[0], LAMBDA_D));
    rev.opts.fd_scale = -LAMBDA_D;
    v.push(rev);

    let dom = [0usize, 1, 1, 0, 1];
    v.push(objective("info_nce", vec![u(&[5, 4], 50), u(&[5, 4], 51)], usize::MAX, |t, v| Ok(info_nce(t, v[0], v[1], 0.1)?.total)));
    v.push(objective("info_nce_domain_masked", vec![u(&[5, 4], 52), u(&[5, 4], 53)], usize::MAX, move |t, v| {
        Ok(info_nce_domain_masked(t, v[0], v[1], &dom, 0.1)?.total)
    }));
    // encoder weights → tanh features → reversal → discriminator → domain CE;
    // encoder gradients are checked against −λ_D times the plain derivative
    let x0 = u(&[5, 3], 54);
    let wd = u(&[3, 3], 55);
    let mut grl = objective("grl_path", vec![u(&[3, 3], 56)], usize::MAX, move |t, v| {
        let x = t.constant(x0.clone());
        let h = t.matmul(x, v[0])?;
        let h = t.tanh(h)?;
        let w = t.constant(wd.clone());
        grl_discriminator_loss(t, h, &dom[..5], LAMBDA_D, |tp, r| tp.matmul(r, w))
    });
    grl.opts.fd_scale = -LAMBDA_D;
    v.push(grl);
    let x1 = u(&[5, 3], 57);
    let wd1 = u(&[3, 3], 58);
    v.push(objective("discriminator_ce", vec![u(&[3, 3], 59)], usize::MAX, move |t, v| {
        let x = t.constant(x1.clone());
        let w = t.constant(wd1.clone());
        let h = t.matmul(x, w)?;
        let h = t.tanh(h)?;
        let lg = t.matmul(h, v[0])?;
        domain_cross_entropy(t, lg, &dom)
    }));
    v.push(objective("mmd", vec![u(&[4, 3], 60), uniform(&[5, 3], 61, -0.5, 1.5)], usize::MAX, |t, v| {
        mmd_with_bandwidth(t, v[0], v[1], 1.3)
    }));

    let cfg = EncoderConfig {
        joints: 3,
        behavior_frames: 8,
        neural_frames: 4,
        height: 8,
        width: 8,
        frame_convs: vec![2],
        frame_fc: vec![4],
        neural_temporal: TemporalConfig { pre_pool: vec![3], post_pool: vec![4] },
        behavior_temporal: TemporalConfig { pre_pool: vec![3], post_pool: vec![4] },
        embedding_dim: 5,
        projection_dim: 6,
        attention_hidden: 3,
        attention_mode: AttentionMode::Verbatim,
        discriminator_hidden: 4,
    };
    let m = ModelBundle::<f64>::new(cfg, Heads::default(), 62).expect("tiny encoder config is valid");
    let names = ["f_n.frame.conv0.w", "f_n.att.w1", "f_b.time.conv0.w", "f_b.out.w", "g_n.l0.w", "g_b.l1.b"];
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| m.params.by_name(n).expect("param").clone()).collect();
    let xn = u(&[3, 4, 8, 8], 63);
    let xb = u(&[3, 8, 3, 3], 64);
    v.push(objective("encoders_info_nce", inputs, 24, move |tape, v| {
        let mut bn = m.bn.clone();
        let mut fw = Forward::train_on(std::mem::take(tape), &m.params, &mut bn);
        for (n, &var) in names.iter().zip(v) {
            fw.bind(n, var)?;
        }
        let (a, b) = (fw.input(xn.clone()), fw.input(xb.clone()));
        let hn = m.encode_neural(&mut fw, a)?;
        let hb = m.encode_behavior(&mut fw, b)?;
        let zn = m.project(&mut fw, hn, Modality::Neural)?;
        let zb = m.project(&mut fw, hb, Modality::Behavior)?;
        let l = info_nce(&mut fw.tape, zb, zn, 0.1)?.total;
        *tape = fw.into_tape();
        Ok(l)
    }));
    v
}

/// Names accepted by [`suite`].
pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs every op and objective check (or only `only`).
pub fn suite(only: Option<&str>) -> Result<Vec<GradCheckReport>> {
    let all = cases();
    if let Some(name) = only {
        if !all.iter().any(|c| c.name == name) {
            return Err(crate::error::config_err(format!("unknown gradcheck case {name:?}")));
        }
    }
    all.iter().filter(|c| only.is_none_or(|n| n == c.name)).map(|c| check(c.name, &c.inputs, c.opts, &c.f)).collect()
}
