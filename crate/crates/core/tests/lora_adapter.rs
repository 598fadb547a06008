use rand::Rng;

use loraudio::io::fingerprint;
use loraudio::lora::{
    adapted_forward, decode_adapters, default_targets, encode_adapters, init_adapters, matrix_dims, merge,
    merge_into_model, AdapterInit, LoraPair,
};
use loraudio::model::{build_model, encode_checkpoint, forward, SENetConfig, Trainable};
use loraudio::rng::rng_for;
use loraudio::tensor::{Adam, AdamConfig, Tensor};
use loraudio::Error;

fn random(seed: u64, shape: &[usize], scale: f64) -> Tensor<f64> {
    let mut rng = rng_for(seed, &["lora-test"]);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn batch(seed: u64, n: usize) -> Tensor<f32> {
    random(seed, &[n, 1, 24, 20], 2.0).cast()
}

fn max_rel_dev(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

#[test]
fn merged_weight_matches_injected_path_on_100_inputs() {
    for (k, shape) in [vec![6, 5], vec![4, 3, 3, 3]].into_iter().enumerate() {
        let w = random(1 + k as u64, &shape, 1.0);
        let (d_out, d_in) = matrix_dims(&shape).unwrap();
        let pair = LoraPair::new("t", random(10, &[d_out, 2], 0.5), random(11, &[2, d_in], 0.5), 1.75).unwrap();
        let merged = merge(&w, &pair).unwrap();
        let merged = merged.reshape(&[d_out, d_in]).unwrap();
        for i in 0..100 {
            let x = random(100 + i, &[d_in], 1.0);
            let injected = adapted_forward(&w, &pair, &x).unwrap();
            let direct: Vec<f64> = (0..d_out)
                .map(|o| (0..d_in).map(|j| merged.get2(o, j) * x.data()[j]).sum())
                .collect();
            assert!(max_rel_dev(injected.data(), &direct) <= 1e-5);
        }
    }
}

#[test]
fn merged_model_matches_injected_model_on_logits() {
    let cfg = SENetConfig::desk();
    let model = build_model(&cfg, 4).unwrap();
    let mut set = init_adapters(&model, "B", &default_targets(&cfg), 4, 2.0, 4, AdapterInit::ZeroA).unwrap();
    let mut rng = rng_for(4, &["nonzero-a"]);
    for p in set.pairs_mut() {
        for v in p.a.data_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
    }
    let merged = merge_into_model(&model, &set).unwrap();
    let x = batch(5, 3);
    let inj = forward(&model, &x, Some(&set), Trainable::Nothing).unwrap();
    let mer = forward(&merged, &x, None, Trainable::Nothing).unwrap();
    let a: Vec<f64> = inj.logits().data().iter().map(|&v| f64::from(v)).collect();
    let b: Vec<f64> = mer.logits().data().iter().map(|&v| f64::from(v)).collect();
    assert!(max_rel_dev(&a, &b) <= 1e-5, "{a:?} vs {b:?}");
}

#[test]
fn fresh_adapters_leave_logits_bitwise_unchanged() {
    let cfg = SENetConfig::desk();
    let model = build_model(&cfg, 8).unwrap();
    let x = batch(9, 4);
    let plain = forward(&model, &x, None, Trainable::Nothing).unwrap();
    for init in [AdapterInit::ZeroA, AdapterInit::BothZero] {
        let set = init_adapters(&model, "B", &default_targets(&cfg), 4, 16.0, 8, init).unwrap();
        let adapted = forward(&model, &x, Some(&set), Trainable::Nothing).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(plain.logits()), bits(adapted.logits()));
    }
}

#[test]
fn one_adam_step_moves_a_off_zero_and_leaves_b() {
    let cfg = SENetConfig::desk();
    let model = build_model(&cfg, 2).unwrap();
    let mut set = init_adapters(&model, "B", &default_targets(&cfg), 4, 1.0, 2, AdapterInit::ZeroA).unwrap();
    let before = set.clone();
    let x = batch(3, 4);
    let pass = forward(&model, &x, Some(&set), Trainable::Adapters).unwrap();
    let mut tape = pass.tape;
    let loss = tape.softmax_cross_entropy(pass.logits, &[0, 1, 0, 1]).unwrap();
    let grads = tape.backward(loss).unwrap();
    let gs: Vec<(String, Vec<f32>, Vec<f32>)> = pass
        .adapters
        .iter()
        .map(|(t, (a, b))| (t.clone(), grads.get_or_zeros(&tape, *a), grads.get_or_zeros(&tape, *b)))
        .collect();
    let mut adam = Adam::new(AdamConfig::default());
    let names: Vec<(String, String)> = gs.iter().map(|(t, _, _)| (format!("{t}.A"), format!("{t}.B"))).collect();
    let mut items = Vec::new();
    for ((pair, (_, ga, gb)), (na, nb)) in set.pairs_mut().zip(&gs).zip(&names) {
        // B's gradient is s·Aᵀ·(…), zero while A is zero.
        assert!(gb.iter().all(|&g| g == 0.0));
        items.push((na.as_str(), &mut pair.a, Some(&ga[..])));
        items.push((nb.as_str(), &mut pair.b, Some(&gb[..])));
    }
    adam.step(items).unwrap();
    // A moves wherever its gradient is nonzero; a target whose SE path is
    // dead under this init (ReLU off for the whole batch) gets none.
    for (p, (t, ga, _)) in set.pairs().values().zip(&gs) {
        for (v, g) in p.a.data().iter().zip(ga) {
            assert_eq!(*v != 0.0, *g != 0.0, "{t}");
        }
    }
    for t in ["stem1.w", "stem2.w", "stem3.w", "head.w"] {
        assert!(set.get(t).unwrap().a.data().iter().any(|&v| v != 0.0), "{t}");
    }
    for (p, q) in set.pairs().values().zip(before.pairs().values()) {
        assert_eq!(p.b, q.b);
    }
}

#[test]
fn full_scale_file_size_matches_closed_form() {
    let cfg = SENetConfig::full();
    let model = build_model(&cfg, 0).unwrap();
    let targets: Vec<String> = vec!["stem1.w".into(), "stem2.w".into(), "stem3.w".into(), "head.w".into()];
    let set = init_adapters(&model, "B", &targets, 4, 1.0, 0, AdapterInit::ZeroA).unwrap();
    let bytes = encode_adapters(&set);
    let closed: usize = targets
        .iter()
        .map(|t| {
            let (d_out, d_in) = matrix_dims(model.get(t).unwrap().shape()).unwrap();
            let r = 4.min(d_out).min(d_in);
            r * (d_out + d_in) * 4
        })
        .sum();
    let dev = (bytes.len() as f64 - closed as f64).abs() / closed as f64;
    assert!(dev < 0.01, "{} bytes vs closed form {closed}", bytes.len());
    let base = encode_checkpoint(&model);
    assert!((bytes.len() as f64) / (base.len() as f64) < 0.01);
}

#[test]
fn adapter_file_rejects_another_base() {
    let cfg = SENetConfig::desk();
    let a = build_model(&cfg, 1).unwrap();
    let b = build_model(&cfg, 2).unwrap();
    let set = init_adapters(&a, "B", &default_targets(&cfg), 4, 1.0, 1, AdapterInit::ZeroA).unwrap();
    let bytes = encode_adapters(&set);
    let a_bytes = encode_checkpoint(&a);
    let back = decode_adapters(&bytes, "B", &a, &a_bytes).unwrap();
    assert_eq!(back, set);
    let b_bytes = encode_checkpoint(&b);
    match decode_adapters(&bytes, "B", &b, &b_bytes) {
        Err(Error::FingerprintMismatch { expected, found }) => {
            assert_eq!(expected, fingerprint(&a_bytes));
            assert_eq!(found, fingerprint(&b_bytes));
        }
        other => panic!("expected FingerprintMismatch, got {other:?}"),
    }
}
