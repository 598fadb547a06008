use rand::Rng;

use loraudio::gradcheck_suite;
use loraudio::lora::{conv_as_matrix, LoraVars};
use loraudio::model::{se_block_forward, BlockVars, ConvVars, LinearVars};
use loraudio::rng::rng_for;
use loraudio::tensor::{finite_diff_check, Adam, AdamConfig, Tape, Tensor, Var};

fn random(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = rng_for(seed, &["test", &format!("{shape:?}")]);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn every_operator_passes_finite_differences_in_f64() {
    let reports = gradcheck_suite::<f64>(3, 20).unwrap();
    assert!(reports.len() >= 16);
    for (name, r) in &reports {
        assert!(r.coordinates > 0, "{name}");
        assert!(r.max_rel_error <= 1e-5, "{name}: {r:?}");
    }
}

#[test]
fn matmul_chain_gradients_within_1e6() {
    let a = random(1, &[3, 4]);
    let b = random(2, &[4, 2]);
    let r = finite_diff_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.matmul(v[0], v[1])?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        },
        &[a, b],
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-6, "{r:?}");
}

#[test]
fn ones_conv_sums_to_nine() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = t.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(t.value(y).data(), &[9.0]);
}

#[test]
fn adam_three_step_scalar_trace() {
    let c = AdamConfig::default();
    let mut adam = Adam::<f64>::new(c);
    let mut w = Tensor::scalar(1.0);
    let grads = [1.0, -0.5, 2.0];
    let (mut m, mut v, mut want) = (0.0, 0.0, 1.0);
    for (t, &g) in grads.iter().enumerate() {
        adam.step([("w", &mut w, Some(&[g][..]))]).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let k = (t + 1) as i32;
        let m_hat = m / (1.0 - 0.9f64.powi(k));
        let v_hat = v / (1.0 - 0.999f64.powi(k));
        want -= 0.001 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((w.data()[0] - want).abs() < 1e-15, "step {k}");
    }
    assert!((w.data()[0] - 0.999).abs() < 2e-3);
}

/// Plain-loop re-implementation of the residual SE block.
mod oracle {
    pub fn conv3x3(x: &[f64], c_in: usize, h: usize, w: usize, k: &[f64], b: &[f64], c_out: usize) -> Vec<f64> {
        let mut y = vec![0.0; c_out * h * w];
        for o in 0..c_out {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = b[o];
                    for c in 0..c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (yy, xx) = (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += k[((o * c_in + c) * 3 + ky) * 3 + kx] * x[(c * h + yy as usize) * w + xx as usize];
                            }
                        }
                    }
                    y[(o * h + i) * w + j] = acc;
                }
            }
        }
        y
    }

    pub fn linear(x: &[f64], w: &[f64], b: &[f64], d_out: usize) -> Vec<f64> {
        let d_in = x.len();
        (0..d_out).map(|o| b[o] + (0..d_in).map(|i| w[o * d_in + i] * x[i]).sum::<f64>()).collect()
    }

    pub fn relu(v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(|x| x.max(0.0)).collect()
    }
}

#[test]
fn se_block_matches_straight_line_reimplementation() {
    let (n, c, h, w, r) = (2, 4, 3, 3, 2);
    let x = random(10, &[n, c, h, w]);
    let k1 = random(11, &[c, c, 3, 3]);
    let b1 = random(12, &[c]);
    let k2 = random(13, &[c, c, 3, 3]);
    let b2 = random(14, &[c]);
    let f1 = random(15, &[c / r, c]);
    let g1 = random(16, &[c / r]);
    let f2 = random(17, &[c, c / r]);
    let g2 = random(18, &[c]);

    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let mut leaf = |v: &Tensor<f64>| t.constant(v.clone());
    let p = BlockVars {
        conv1: ConvVars { w: leaf(&k1), b: leaf(&b1), stride: 1, pad: 1 },
        conv2: ConvVars { w: leaf(&k2), b: leaf(&b2), stride: 1, pad: 1 },
        fc1: LinearVars::<f64> { w: leaf(&f1), b: leaf(&g1), lora: None::<LoraVars<f64>> },
        fc2: LinearVars { w: leaf(&f2), b: leaf(&g2), lora: None },
    };
    let (out, gate) = se_block_forward(&mut t, xv, &p).unwrap();
    let got = t.value(out).data().to_vec();
    let got_gate = t.value(gate).data().to_vec();

    let plane = c * h * w;
    for s in 0..n {
        let xs = &x.data()[s * plane..(s + 1) * plane];
        let u = oracle::relu(oracle::conv3x3(xs, c, h, w, k1.data(), b1.data(), c));
        let u = oracle::conv3x3(&u, c, h, w, k2.data(), b2.data(), c);
        let pooled: Vec<f64> = (0..c).map(|ch| u[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect();
        let z = oracle::relu(oracle::linear(&pooled, f1.data(), g1.data(), c / r));
        let gates: Vec<f64> = oracle::linear(&z, f2.data(), g2.data(), c).into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        for ch in 0..c {
            assert!((got_gate[s * c + ch] - gates[ch]).abs() < 1e-6);
            for q in 0..h * w {
                let idx = ch * h * w + q;
                let want = (xs[idx] + u[idx] * gates[ch]).max(0.0);
                assert!((got[s * plane + idx] - want).abs() < 1e-6, "sample {s} channel {ch} pos {q}");
            }
        }
    }
}

#[test]
fn conv_matrix_view_times_patch_equals_conv_output() {
    let (c_in, c_out, h, w, pad) = (2, 3, 5, 4, 1);
    let x = random(20, &[1, c_in, h, w]);
    let k = random(21, &[c_out, c_in, 3, 3]);
    let mut t = Tape::<f64>::new();
    let (xv, kv) = (t.constant(x.clone()), t.constant(k.clone()));
    let y = t.conv2d(xv, kv, None, 1, pad).unwrap();
    let y = t.value(y).clone();
    let m = conv_as_matrix(&k).unwrap();
    assert_eq!(m.shape(), &[c_out, c_in * 9]);
    for i in 0..h {
        for j in 0..w {
            // The im2col column for output position (i, j).
            let mut patch = Vec::with_capacity(c_in * 9);
            for c in 0..c_in {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (yy, xx) = (i as isize + ky as isize - pad as isize, j as isize + kx as isize - pad as isize);
                        patch.push(if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            0.0
                        } else {
                            x.data()[(c * h + yy as usize) * w + xx as usize]
                        });
                    }
                }
            }
            for o in 0..c_out {
                let want: f64 = (0..c_in * 9).map(|q| m.get2(o, q) * patch[q]).sum();
                let got = y.data()[(o * h + i) * w + j];
                assert!((got - want).abs() < 1e-12, "({o},{i},{j})");
            }
        }
    }
}
