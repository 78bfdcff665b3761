//! Training objectives: symmetric InfoNCE, its domain-masked variant, the
//! gradient-reversal discriminator loss and an RBF-kernel MMD penalty.
//!
//! All losses are sums over the batch (not means); callers divide for logging.

use log::warn;

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.1;
pub const LAMBDA_D: f64 = 10.0;
pub const LAMBDA_MMD: f64 = 1.0;
pub const MMD_BANDWIDTH_FLOOR: f64 = 1e-6;

/// The two directional terms of the symmetric contrastive loss and their sum.
#[derive(Clone, Copy, Debug)]
pub struct NceTerms {
    pub total: Var,
    pub b2n: Var,
    pub n2b: Var,
    pub batch: usize,
}

impl NceTerms {
    /// Per-sample, per-direction mean, for logging.
    pub fn mean<T: Scalar>(&self, tape: &Tape<T>) -> f64 {
        tape.item(self.total).as_f64() / (2 * self.batch) as f64
    }
}

fn similarity_logits<T: Scalar>(tape: &mut Tape<T>, zb: Var, zn: Var, tau: f64) -> Result<(Var, usize)> {
    if !(tau > 0.0) {
        return Err(config_err(format!("temperature must be positive, got {tau}")));
    }
    let (sb, sn) = (tape.shape(zb).to_vec(), tape.shape(zn).to_vec());
    if sb != sn || sb.len() != 2 {
        return Err(dim_err("info_nce", format!("{sb:?} vs {sn:?}")));
    }
    let cos = tape.cosine_similarity_matrix(zb, zn)?;
    Ok((tape.scale(cos, 1.0 / tau)?, sb[0]))
}

fn directional<T: Scalar>(tape: &mut Tape<T>, logits: Var, mask: Option<Vec<bool>>) -> Result<(Var, Var)> {
    // row i: behavior anchor i against all neural candidates k
    let rows = tape.log_softmax_masked(logits, 1, mask.clone())?;
    let d = tape.diag(rows)?;
    let s = tape.sum(d)?;
    let b2n = tape.neg(s)?;
    // column i: neural anchor i against all behavior candidates k
    let cols = tape.log_softmax_masked(logits, 0, mask)?;
    let d = tape.diag(cols)?;
    let s = tape.sum(d)?;
    let n2b = tape.neg(s)?;
    Ok((b2n, n2b))
}

/// Symmetric InfoNCE over `[N,d]` projections; row `i` of each is a positive pair.
pub fn info_nce<T: Scalar>(tape: &mut Tape<T>, zb: Var, zn: Var, tau: f64) -> Result<NceTerms> {
    let (logits, n) = similarity_logits(tape, zb, zn, tau)?;
    let (b2n, n2b) = directional(tape, logits, None)?;
    let total = tape.add(b2n, n2b)?;
    Ok(NceTerms { total, b2n, n2b, batch: n })
}

/// InfoNCE whose denominators only contain candidates from the anchor's own domain.
/// The mask is applied in both directions.
pub fn info_nce_domain_masked<T: Scalar>(
    tape: &mut Tape<T>,
    zb: Var,
    zn: Var,
    dom: &[usize],
    tau: f64,
) -> Result<NceTerms> {
    let (logits, n) = similarity_logits(tape, zb, zn, tau)?;
    if dom.len() != n {
        return Err(dim_err("info_nce_domain_masked", format!("{} domain ids for batch of {n}", dom.len())));
    }
    let mut counts = std::collections::BTreeMap::new();
    for &d in dom {
        *counts.entry(d).or_insert(0usize) += 1;
    }
    for (d, c) in &counts {
        if *c == 1 {
            warn!("domain {d} has a single sample in the batch; its contrastive term is 0");
        }
    }
    let mask: Vec<bool> = (0..n * n).map(|ik| dom[ik / n] == dom[ik % n]).collect();
    let (b2n, n2b) = directional(tape, logits, Some(mask))?;
    let total = tape.add(b2n, n2b)?;
    Ok(NceTerms { total, b2n, n2b, batch: n })
}

/// Summed cross-entropy `-Σ_i log softmax(logits_i)[dom_i]`.
pub fn domain_cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, dom: &[usize]) -> Result<Var> {
    let sl = tape.shape(logits).to_vec();
    if sl.len() != 2 || sl[0] != dom.len() {
        return Err(dim_err("domain_cross_entropy", format!("logits {sl:?} for {} labels", dom.len())));
    }
    if sl[1] < 2 {
        return Err(config_err("domain discriminator needs at least 2 domains"));
    }
    if let Some(&bad) = dom.iter().find(|&&d| d >= sl[1]) {
        return Err(dim_err("domain_cross_entropy", format!("domain id {bad} with {} classes", sl[1])));
    }
    let lp = tape.log_softmax(logits, 1)?;
    let onehot = Tensor::from_f64(
        sl.clone(),
        &(0..sl[0] * sl[1]).map(|ik| f64::from(u8::from(dom[ik / sl[1]] == ik % sl[1]))).collect::<Vec<_>>(),
    )?;
    let oh = tape.constant(onehot);
    let picked = tape.mul(lp, oh)?;
    let s = tape.sum(picked)?;
    tape.neg(s)
}

/// Discriminator loss on encoder features `h` behind a gradient-reversal node.
///
/// The forward value is the plain cross-entropy of `disc(h)`; gradients flowing
/// back into `h` are multiplied by `-lambda`.
pub fn grl_discriminator_loss<T: Scalar, F>(
    tape: &mut Tape<T>,
    h: Var,
    dom: &[usize],
    lambda: f64,
    disc: F,
) -> Result<Var>
where
    F: FnOnce(&mut Tape<T>, Var) -> Result<Var>,
{
    let r = tape.grad_reverse(h, lambda)?;
    let logits = disc(tape, r)?;
    domain_cross_entropy(tape, logits, dom)
}

/// Median of pairwise Euclidean distances over the pooled rows, floored.
pub fn median_bandwidth<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let d = a.shape()[1];
    let rows: Vec<&[T]> = a.data().chunks_exact(d).chain(b.data().chunks_exact(d)).collect();
    let mut dists = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let sq: f64 = rows[i].iter().zip(rows[j]).map(|(&p, &q)| (p - q).as_f64().powi(2)).sum();
            dists.push(sq.sqrt());
        }
    }
    if dists.is_empty() {
        return MMD_BANDWIDTH_FLOOR;
    }
    let mid = dists.len() / 2;
    let (_, m, _) = dists.select_nth_unstable_by(mid, |p, q| p.total_cmp(q));
    m.max(MMD_BANDWIDTH_FLOOR)
}

/// Unbiased squared-MMD estimate with the median-heuristic RBF bandwidth.
/// The bandwidth is computed from the current values and treated as a constant.
pub fn mmd<T: Scalar>(tape: &mut Tape<T>, ha: Var, hb: Var) -> Result<Var> {
    let sigma = median_bandwidth(tape.value(ha), tape.value(hb));
    mmd_with_bandwidth(tape, ha, hb, sigma)
}

/// Unbiased squared-MMD estimate, `k(x,y) = exp(-|x-y|² / (2σ²))`.
///
/// With `m == n` the cross term also skips `i == j`, which makes the estimate the
/// paired U-statistic (zero for identical inputs).
pub fn mmd_with_bandwidth<T: Scalar>(tape: &mut Tape<T>, ha: Var, hb: Var, sigma: f64) -> Result<Var> {
    let (sa, sb) = (tape.shape(ha).to_vec(), tape.shape(hb).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(dim_err("mmd", format!("{sa:?} vs {sb:?}")));
    }
    let (m, n) = (sa[0], sb[0]);
    if m < 2 || n < 2 {
        return Err(dim_err("mmd", format!("needs at least 2 samples per side, got {m} and {n}")));
    }
    let sigma = sigma.max(MMD_BANDWIDTH_FLOOR);
    let gamma = -1.0 / (2.0 * sigma * sigma);
    let kernel = |x: Var, y: Var, tape: &mut Tape<T>| -> Result<Var> {
        let d = tape.pairwise_sq_dist(x, y)?;
        let d = tape.scale(d, gamma)?;
        tape.exp(d)
    };
    // diagonal self-kernel entries are exactly 1 and carry no gradient
    let k = kernel(ha, ha, tape)?;
    let kaa = tape.sum(k)?;
    let kaa = tape.add_scalar(kaa, -(m as f64))?;
    let kaa = tape.scale(kaa, 1.0 / (m * (m - 1)) as f64)?;
    let k = kernel(hb, hb, tape)?;
    let kbb = tape.sum(k)?;
    let kbb = tape.add_scalar(kbb, -(n as f64))?;
    let kbb = tape.scale(kbb, 1.0 / (n * (n - 1)) as f64)?;
    let k = kernel(ha, hb, tape)?;
    let cross = tape.sum(k)?;
    let kab = if m == n {
        // equal sizes: drop the paired terms too, so identical inputs give exactly 0
        let d = tape.diag(k)?;
        let tr = tape.sum(d)?;
        let off = tape.sub(cross, tr)?;
        tape.scale(off, -2.0 / (m * (m - 1)) as f64)?
    } else {
        tape.scale(cross, -2.0 / (m * n) as f64)?
    };
    let s = tape.add(kaa, kbb)?;
    tape.add(s, kab)
}

/// Mean MMD over every pair of domains with at least two rows in `h`.
/// Returns `None` when fewer than two domains qualify.
pub fn mmd_across_domains<T: Scalar>(tape: &mut Tape<T>, h: Var, dom: &[usize]) -> Result<Option<Var>> {
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &d) in dom.iter().enumerate() {
        groups.entry(d).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().filter(|g| g.len() >= 2).collect();
    let mut terms = Vec::new();
    let rows: Vec<Var> = groups.iter().map(|g| tape.gather_rows(h, g)).collect::<Result<_>>()?;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            terms.push(mmd(tape, rows[i], rows[j])?);
        }
    }
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / terms.len() as f64)?))
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::gradcheck::{check, CheckOptions};
    use crate::rng;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), d).unwrap()
    }

    fn gaussian(n: usize, d: usize, shift: f64, seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, &[]);
        let v: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut r)).map(|x: f64| x + shift).collect();
        Tensor::new([n, d], v).unwrap()
    }

    fn nce_value(zb: Tensor<f64>, zn: Tensor<f64>, tau: f64, dom: Option<&[usize]>) -> (f64, f64, f64) {
        let mut tape = Tape::new();
        let (b, n) = (tape.constant(zb), tape.constant(zn));
        let r = match dom {
            None => info_nce(&mut tape, b, n, tau).unwrap(),
            Some(d) => info_nce_domain_masked(&mut tape, b, n, d, tau).unwrap(),
        };
        (tape.item(r.total), tape.item(r.b2n), tape.item(r.n2b))
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let (l, _, _) = nce_value(t(&[1, 3], &[1.0, 2.0, 3.0]), t(&[1, 3], &[-1.0, 0.5, 0.0]), 0.1, None);
        assert_eq!(l, 0.0);
    }

    #[test]
    fn two_pair_hand_case() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let (l, b2n, n2b) = nce_value(eye.clone(), eye, 1.0, None);
        let each = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((b2n - each).abs() < 1e-12 && (n2b - each).abs() < 1e-12);
        assert!((l - 1.25305).abs() < 1e-4);
        assert!((l - (b2n + n2b)).abs() < 1e-12);
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full([2, 2], 1.0));
        assert!(matches!(info_nce(&mut tape, a, a, 0.0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn random_unit_vectors_give_log_n_per_sample() {
        let (n, d, seeds) = (128, 128, 100);
        let per_sample = |tau: f64| {
            let mut sum = 0.0;
            for seed in 0..seeds {
                let (l, _, _) = nce_value(gaussian(n, d, 0.0, 2 * seed), gaussian(n, d, 0.0, 2 * seed + 1), tau, None);
                sum += l / (2 * n) as f64;
            }
            sum / seeds as f64
        };
        let ln_n = (n as f64).ln();
        let m1 = per_sample(1.0);
        assert!((m1 - ln_n).abs() <= 0.3, "{m1}");
        // at small tau the log-sum-exp picks up the logit variance: ln N + 1/(2 d tau²)
        let m01 = per_sample(0.1);
        assert!((m01 - (ln_n + 1.0 / (2.0 * d as f64 * 0.01))).abs() <= 0.1, "{m01}");
    }

    #[test]
    fn permutation_invariance_and_positive_similarity_monotonicity() {
        let zb = gaussian(5, 4, 0.0, 1);
        let zn = gaussian(5, 4, 0.0, 2);
        let perm = [3, 0, 4, 1, 2];
        let pick = |x: &Tensor<f64>| Tensor::stack(&perm.iter().map(|&i| x.index_axis0(i)).collect::<Vec<_>>()).unwrap();
        let (a, _, _) = nce_value(zb.clone(), zn.clone(), 0.1, None);
        let (b, _, _) = nce_value(pick(&zb), pick(&zn), 0.1, None);
        assert!((a - b).abs() < 1e-9);

        // move z_n[0] towards z_b[0]
        let mut closer = zn.clone();
        for j in 0..4 {
            let v = 0.5 * zn.at(&[0, j]) + 0.5 * zb.at(&[0, j]);
            closer.data_mut()[j] = v;
        }
        let (c, _, _) = nce_value(zb, closer, 0.1, None);
        assert!(c < a);
    }

    #[test]
    fn masked_variant_properties() {
        let zb = gaussian(6, 4, 0.0, 3);
        let zn = gaussian(6, 4, 0.0, 4);
        let (full, _, _) = nce_value(zb.clone(), zn.clone(), 0.1, None);
        let (same, _, _) = nce_value(zb.clone(), zn.clone(), 0.1, Some(&[2; 6]));
        assert_eq!(full, same);

        let dom = [0, 1, 0, 1, 1, 0];
        let (masked, _, _) = nce_value(zb.clone(), zn.clone(), 0.1, Some(&dom));
        assert!(masked <= full);

        let split = |d: usize| {
            let idx: Vec<usize> = (0..6).filter(|&i| dom[i] == d).collect();
            let g = |x: &Tensor<f64>| Tensor::stack(&idx.iter().map(|&i| x.index_axis0(i)).collect::<Vec<_>>()).unwrap();
            nce_value(g(&zb), g(&zn), 0.1, None).0
        };
        assert!((masked - split(0) - split(1)).abs() < 1e-9);
    }

    #[test]
    fn discriminator_loss_hand_cases() {
        let mut tape = Tape::<f64>::new();
        let uniform = tape.constant(Tensor::zeros([3, 4]));
        let l = domain_cross_entropy(&mut tape, uniform, &[0, 2, 3]).unwrap();
        assert!((tape.item(l) - 3.0 * 4f64.ln()).abs() < 1e-12);

        let confident = tape.constant(t(&[1, 2], &[0.0, 800.0]));
        let l = domain_cross_entropy(&mut tape, confident, &[1]).unwrap();
        assert!(tape.item(l).abs() < 1e-12);

        let one = tape.constant(Tensor::zeros([2, 1]));
        assert!(matches!(domain_cross_entropy(&mut tape, one, &[0, 0]), Err(crate::Error::Config(_))));
    }

    #[test]
    fn mmd_cases() {
        let a = gaussian(20, 3, 0.0, 5);
        let mut tape = Tape::<f64>::new();
        let av = tape.constant(a.clone());
        let self_mmd = mmd(&mut tape, av, av).unwrap();
        assert!(tape.item(self_mmd).abs() <= 1e-6);

        let tight = |shift, seed| gaussian(16, 3, 0.0, seed).map(|v| 1e-5 * v + shift);
        let (p, q) = (tape.constant(tight(0.0, 6)), tape.constant(tight(1.0, 7)));
        let bw = 1.0 / (100.0 * 3f64.sqrt());
        let far = mmd_with_bandwidth(&mut tape, p, q, bw).unwrap();
        assert!(tape.item(far) >= 1.9, "{}", tape.item(far));

        let x = tape.constant(gaussian(256, 8, 0.0, 8));
        let y = tape.constant(gaussian(256, 8, 0.0, 9));
        let same = mmd(&mut tape, x, y).unwrap();
        assert!(tape.item(same) <= 0.05);
        let rev = mmd(&mut tape, y, x).unwrap();
        assert!((tape.item(same) - tape.item(rev)).abs() <= 1e-9);

        let flat = Tensor::<f64>::full([3, 2], 1.0);
        assert_eq!(median_bandwidth(&flat, &flat), MMD_BANDWIDTH_FLOOR);
    }

    #[test]
    fn objective_gradients() {
        let opts = CheckOptions { tolerance: 1e-4, ..Default::default() };
        let zb = gaussian(5, 4, 0.0, 10);
        let zn = gaussian(5, 4, 0.0, 11);
        let r = check("info_nce", &[zb.clone(), zn.clone()], opts, |tp, v| Ok(info_nce(tp, v[0], v[1], 0.1)?.total)).unwrap();
        assert!(r.passed(), "{}", r.max_rel_err);
        let dom = [0, 1, 1, 0, 1];
        let r = check("info_nce_masked", &[zb, zn], opts, |tp, v| Ok(info_nce_domain_masked(tp, v[0], v[1], &dom, 0.1)?.total)).unwrap();
        assert!(r.passed(), "{}", r.max_rel_err);

        let a = gaussian(4, 3, 0.0, 12);
        let b = gaussian(5, 3, 0.5, 13);
        let sigma = median_bandwidth(&a, &b);
        let r = check("mmd", &[a, b], opts, |tp, v| mmd_with_bandwidth(tp, v[0], v[1], sigma)).unwrap();
        assert!(r.passed(), "{}", r.max_rel_err);
    }

    #[test]
    fn reversal_scales_encoder_gradient() {
        let mut r = rng::stream(14, &[]);
        let x0 = gaussian(4, 3, 0.0, 15);
        let w_enc = Tensor::new([3, 3], (0..9).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let w_disc = Tensor::new([3, 3], (0..9).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let dom = [0, 1, 2, 1];
        let enc_grad = |lambda: Option<f64>| {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(x0.clone());
            let we = tape.leaf(w_enc.clone());
            let wd = tape.constant(w_disc.clone());
            let h = tape.matmul(x, we).unwrap();
            let h = tape.tanh(h).unwrap();
            let l = match lambda {
                Some(lam) => grl_discriminator_loss(&mut tape, h, &dom, lam, |tp, z| tp.matmul(z, wd)).unwrap(),
                None => {
                    let lg = tape.matmul(h, wd).unwrap();
                    domain_cross_entropy(&mut tape, lg, &dom).unwrap()
                }
            };
            tape.backward(l).unwrap().wrt(we).unwrap()
        };
        // finite-difference oracle for the unreversed gradient
        let fd = check("disc_plain", &[w_enc.clone()], CheckOptions::default(), |tp, v| {
            let x = tp.constant(x0.clone());
            let wd = tp.constant(w_disc.clone());
            let h = tp.matmul(x, v[0])?;
            let h = tp.tanh(h)?;
            let lg = tp.matmul(h, wd)?;
            domain_cross_entropy(tp, lg, &dom)
        })
        .unwrap();
        assert!(fd.passed());
        let plain = enc_grad(None);
        let reversed = enc_grad(Some(LAMBDA_D));
        for (p, q) in plain.data().iter().zip(reversed.data()) {
            assert!((q + LAMBDA_D * p).abs() <= 1e-9 * (1.0 + p.abs()));
        }
    }
}
