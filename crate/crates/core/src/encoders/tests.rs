use rand::Rng;

use super::*;
use crate::gradcheck::{check, CheckOptions};
use crate::objectives::info_nce;
use crate::rng;
use crate::tensor::{Tape, Tensor};

pub(crate) fn tiny_config() -> EncoderConfig {
    EncoderConfig {
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
    }
}

fn random<T: crate::tensor::Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut r = rng::stream(seed, &[7]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::from_f64(r.random_range(-1.0..1.0))).collect()).unwrap()
}

fn rows<T: crate::tensor::Scalar>(t: &Tensor<T>) -> Vec<Vec<T>> {
    (0..t.shape()[0]).map(|i| t.index_axis0(i).into_data()).collect()
}

#[test]
fn default_dims_are_128() {
    let cfg = EncoderConfig::default();
    assert_eq!((cfg.embedding_dim, cfg.projection_dim), (128, 128));
    let m = ModelBundle::<f32>::new(cfg, Heads::default(), 0).unwrap();
    let x = random::<f32>(&[2, 32, 64, 64], 1).map(|v| v.abs());
    assert_eq!(m.embed(&x, Modality::Neural).unwrap().shape(), &[2, 128]);
    let b = random::<f32>(&[2, 8, 10, 3], 2);
    let h = m.embed(&b, Modality::Behavior).unwrap();
    assert_eq!(h.shape(), &[2, 128]);
    let mut fw = Forward::eval(&m.params, &m.bn);
    let hv = fw.input(h);
    let z = m.project(&mut fw, hv, Modality::Behavior).unwrap();
    assert_eq!(fw.tape.shape(z), &[2, 128]);
}

#[test]
fn eval_mode_is_pure_and_sample_independent() {
    let m = ModelBundle::<f64>::new(tiny_config(), Heads::default(), 3).unwrap();
    let x = random::<f64>(&[4, 4, 8, 8], 4);
    let a = m.embed(&x, Modality::Neural).unwrap();
    let b = m.embed(&x, Modality::Neural).unwrap();
    assert_eq!(a, b);

    let perm = [2, 0, 3, 1];
    let xp = Tensor::stack(&perm.iter().map(|&i| x.index_axis0(i)).collect::<Vec<_>>()).unwrap();
    let hp = m.embed(&xp, Modality::Neural).unwrap();
    let (ra, rp) = (rows(&a), rows(&hp));
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(rp[k], ra[i]);
    }

    let same = Tensor::stack(&[x.index_axis0(1), x.index_axis0(1)]).unwrap();
    let h = rows(&m.embed(&same, Modality::Neural).unwrap());
    assert_eq!(h[0], h[1]);

    let pose = random::<f64>(&[3, 8, 3, 3], 5);
    let hb = rows(&m.embed(&pose, Modality::Behavior).unwrap());
    let single = rows(&m.embed(&Tensor::stack(&[pose.index_axis0(2)]).unwrap(), Modality::Behavior).unwrap());
    assert_eq!(hb[2], single[0]);
}

#[test]
fn zero_input_is_finite_and_wrong_dims_rejected() {
    let m = ModelBundle::<f32>::new(tiny_config(), Heads::default(), 6).unwrap();
    let h = m.embed(&Tensor::zeros([2, 4, 8, 8]), Modality::Neural).unwrap();
    assert!(h.all_finite());
    assert!(matches!(m.embed(&Tensor::zeros([2, 4, 8, 9]), Modality::Neural), Err(crate::Error::Dimension { .. })));
    assert!(matches!(m.embed(&Tensor::zeros([2, 8, 4, 3]), Modality::Behavior), Err(crate::Error::Dimension { .. })));
}

#[test]
fn projection_heads_are_distinct() {
    let m = ModelBundle::<f64>::new(tiny_config(), Heads::default(), 7).unwrap();
    let mut fw = Forward::eval(&m.params, &m.bn);
    let h = fw.input(random(&[2, 5], 8));
    let zb = m.project(&mut fw, h, Modality::Behavior).unwrap();
    let zn = m.project(&mut fw, h, Modality::Neural).unwrap();
    assert_eq!(fw.tape.shape(zb), &[2, 6]);
    assert_ne!(fw.tape.value(zb), fw.tape.value(zn));
}

#[test]
fn attention_hand_cases() {
    let mut tape = Tape::<f64>::new();
    let w1 = tape.constant(random(&[3, 2], 9));
    let w2 = tape.constant(random(&[1, 3], 10));
    let s = tape.constant(Tensor::from_f64([1, 2, 2], &[0.3, -0.7, 0.3, -0.7]).unwrap());
    let soft = attention_pool(&mut tape, s, w1, w2, AttentionMode::Softmax).unwrap();
    let soft = tape.value(soft).clone();
    assert!((soft.data()[0] - 0.3).abs() < 1e-15 && (soft.data()[1] + 0.7).abs() < 1e-15);
    let verb = attention_pool(&mut tape, s, w1, w2, AttentionMode::Verbatim).unwrap();
    let k = 2.0 * 2f64.ln();
    assert!((tape.value(verb).data()[0] - k * 0.3).abs() < 1e-12);
    assert!((tape.value(verb).data()[1] + k * 0.7).abs() < 1e-12);

    let one = tape.constant(Tensor::from_f64([1, 1, 2], &[0.5, 2.0]).unwrap());
    let soft = attention_pool(&mut tape, one, w1, w2, AttentionMode::Softmax).unwrap();
    assert_eq!(tape.value(soft).data(), &[0.5, 2.0]);
    let verb = attention_pool(&mut tape, one, w1, w2, AttentionMode::Verbatim).unwrap();
    assert_eq!(tape.value(verb).data(), &[0.0, 0.0]);

    let many = tape.constant(random(&[3, 5, 2], 11));
    let ws = layers::attention_weights(&mut tape, many, w1, w2, AttentionMode::Softmax).unwrap();
    for r in rows(tape.value(ws)) {
        assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
    let wv = layers::attention_weights(&mut tape, many, w1, w2, AttentionMode::Verbatim).unwrap();
    assert!(tape.value(wv).data().iter().all(|&a| a >= 0.0));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let heads = Heads { discriminator_domains: Some(3), ..Default::default() };
    let mut m = ModelBundle::<f32>::new(tiny_config(), heads, 12).unwrap();
    // move running stats off their defaults
    let mut bn = std::mem::take(&mut m.bn);
    {
        let mut fw = Forward::train(&m.params, &mut bn);
        let x = fw.input(random(&[3, 4, 8, 8], 13));
        m.encode_neural(&mut fw, x).unwrap();
    }
    m.bn = bn;
    let opt = crate::tensor::AdamState::new(Default::default(), m.params.tensors());
    checkpoint::save(dir.path(), &m, Some(&opt), 4, serde_json::json!({"method": "ours"})).unwrap();
    let back = checkpoint::load::<f32>(dir.path()).unwrap();
    assert_eq!(back.bundle, m);
    assert_eq!(back.optimizer.unwrap(), opt);
    assert_eq!(back.manifest.epoch, 4);
    let x = random::<f32>(&[2, 4, 8, 8], 14);
    assert_eq!(back.bundle.embed(&x, Modality::Neural).unwrap(), m.embed(&x, Modality::Neural).unwrap());
}

#[test]
fn neural_encoder_input_gradient() {
    let m = ModelBundle::<f64>::new(tiny_config(), Heads::default(), 15).unwrap();
    let x = random::<f64>(&[2, 4, 8, 8], 16);
    let r = check("encode_neural", &[x], CheckOptions { tolerance: 1e-4, max_entries: 128, ..Default::default() }, |tape, v| {
        let mut bn = m.bn.clone();
        let mut fw = Forward::train_on(std::mem::take(tape), &m.params, &mut bn);
        let h = m.encode_neural(&mut fw, v[0])?;
        let w = fw.input(random(&[2, 5], 17));
        let p = fw.tape.mul(h, w)?;
        let l = fw.tape.sum(p)?;
        *tape = fw.into_tape();
        Ok(l)
    })
    .unwrap();
    assert!(r.passed(), "{}", r.max_rel_err);
}

#[test]
fn encoders_plus_info_nce_end_to_end_gradient() {
    let m = ModelBundle::<f64>::new(tiny_config(), Heads::default(), 18).unwrap();
    let names = ["f_n.frame.conv0.w", "f_n.att.w1", "f_b.time.conv0.w", "f_b.out.w", "g_n.l0.w", "g_b.l1.b"];
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| m.params.by_name(n).unwrap().clone()).collect();
    let xn = random::<f64>(&[3, 4, 8, 8], 19);
    let xb = random::<f64>(&[3, 8, 3, 3], 20);
    let r = check("encoders+info_nce", &inputs, CheckOptions { tolerance: 1e-4, max_entries: 24, ..Default::default() }, |tape, v| {
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
    })
    .unwrap();
    assert!(r.passed(), "{}", r.max_rel_err);
}

#[test]
fn invalid_configs_rejected() {
    let mut c = tiny_config();
    c.embedding_dim = 0;
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.frame_convs = vec![2, 2, 2, 2];
    assert!(c.validate().is_err());
    let heads = Heads { discriminator_domains: Some(1), ..Default::default() };
    assert!(ModelBundle::<f32>::new(tiny_config(), heads, 0).is_err());
}
