//! Finite-difference gradient checks over every tape operator and over the
//! full adapted classification loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::lora::{default_targets, init_adapters, AdapterInit, AdapterSet, LoraVars};
use crate::model::{build_model, forward, ModelParams, SENetConfig, Trainable};
use crate::rng::rng_for;
use crate::tensor::{finite_diff_check, relative_error, GradCheckReport, Real, Tape, Tensor, Var};

pub const OPERATORS: &[&str] = &[
    "matmul",
    "matmul_nt",
    "conv2d",
    "relu",
    "sigmoid",
    "add",
    "mul",
    "scale",
    "add_bias",
    "global_avg_pool",
    "channel_scale",
    "reshape",
    "sum",
    "softmax_cross_entropy",
    "adapted_linear",
];

fn rand_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::cst(rng.gen_range(-1.0..1.0))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Values bounded away from zero, so ReLU kinks stay outside the stencil.
fn away_from_zero<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            T::cst(if rng.gen_bool(0.5) { m } else { -m })
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Contracts `y` with a fixed random tensor so every output coordinate carries
/// a distinct weight in the loss.
fn project<T: Real>(tape: &mut Tape<T>, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = rng_for(rng_seed, &["projection"]);
    let r = rand_tensor(&mut rng, tape.shape(y));
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn eps<T: Real>() -> f64 {
    if T::NAME == "f64" {
        1e-6
    } else {
        1e-2
    }
}

fn merge(into: &mut GradCheckReport, r: GradCheckReport) {
    if r.max_rel_error > into.max_rel_error {
        into.max_rel_error = r.max_rel_error;
        into.worst = r.worst;
    }
    into.max_abs_error = into.max_abs_error.max(r.max_abs_error);
    into.coordinates += r.coordinates;
}

fn empty() -> GradCheckReport {
    GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: 0,
        worst: (0, 0),
    }
}

/// One randomized instance of operator `op`.
pub fn check_operator<T: Real>(op: &str, seed: u64, instance: usize) -> Result<GradCheckReport> {
    let inst = instance.to_string();
    let mut rng = rng_for(seed, &["gradcheck", op, &inst]);
    let ps = seed ^ (instance as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let h = eps::<T>();
    let m = rng.gen_range(1..5);
    let k = rng.gen_range(1..5);
    let n = rng.gen_range(1..5);
    match op {
        "matmul" => finite_diff_check(
            |t: &mut Tape<T>, v: &[Var]| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, ps)
            },
            &[rand_tensor(&mut rng, &[m, k]), rand_tensor(&mut rng, &[k, n])],
            h,
        ),
        "matmul_nt" => finite_diff_check(
            |t: &mut Tape<T>, v: &[Var]| {
                let y = t.matmul_nt(v[0], v[1])?;
                project(t, y, ps)
            },
            &[rand_tensor(&mut rng, &[m, k]), rand_tensor(&mut rng, &[n, k])],
            h,
        ),
        "conv2d" => {
            let stride = rng.gen_range(1..3);
            let pad = rng.gen_range(0..2);
            let (c_in, c_out) = (rng.gen_range(1..3), rng.gen_range(1..4));
            let (kh, kw) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let (ih, iw) = (rng.gen_range(3..6), rng.gen_range(3..6));
            let x = rand_tensor(&mut rng, &[2, c_in, ih, iw]);
            let w = rand_tensor(&mut rng, &[c_out, c_in, kh, kw]);
            let b = rand_tensor(&mut rng, &[c_out]);
            finite_diff_check(
                |t: &mut Tape<T>, v: &[Var]| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                    project(t, y, ps)
                },
                &[x, w, b],
                h,
            )
        }
        "relu" | "sigmoid" | "scale" | "reshape" | "sum" => {
            let x = away_from_zero(&mut rng, &[m, k, n]);
            let s = T::cst(rng.gen_range(-2.0..2.0));
            finite_diff_check(
                |t: &mut Tape<T>, v: &[Var]| {
                    let y = match op {
                        "relu" => t.relu(v[0]),
                        "sigmoid" => t.sigmoid(v[0]),
                        "scale" => t.scale(v[0], s),
                        "reshape" => t.reshape(v[0], &[n, m * k])?,
                        _ => {
                            let sq = t.mul(v[0], v[0])?;
                            return Ok(t.sum(sq));
                        }
                    };
                    project(t, y, ps)
                },
                &[x],
                h,
            )
        }
        "add" | "mul" => finite_diff_check(
            |t: &mut Tape<T>, v: &[Var]| {
                let y = if op == "add" { t.add(v[0], v[1])? } else { t.mul(v[0], v[1])? };
                project(t, y, ps)
            },
            &[rand_tensor(&mut rng, &[m, n]), rand_tensor(&mut rng, &[m, n])],
            h,
        ),
        "add_bias" => finite_diff_check(
            |t: &mut Tape<T>, v: &[Var]| {
                let y = t.add_bias(v[0], v[1])?;
                project(t, y, ps)
            },
            &[rand_tensor(&mut rng, &[m, n, k]), rand_tensor(&mut rng, &[n])],
            h,
        ),
        "global_avg_pool" => finite_diff_check(
            |t: &mut Tape<T>, v: &[Var]| {
                let y = t.global_avg_pool(v[0])?;
                project(t, y, ps)
            },
            &[rand_tensor(&mut rng, &[m, n, k, 3])],
            h,
        ),
        "channel_scale" => finite_diff_check(
            |t: &mut Tape<T>, v: &[Var]| {
                let y = t.channel_scale(v[0], v[1])?;
                project(t, y, ps)
            },
            &[rand_tensor(&mut rng, &[m, n, k, 2]), rand_tensor(&mut rng, &[m, n])],
            h,
        ),
        "softmax_cross_entropy" => {
            let classes = rng.gen_range(2..5);
            let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..classes)).collect();
            let mut scaled = rand_tensor::<T>(&mut rng, &[m, classes]);
            for v in scaled.data_mut() {
                *v = *v * T::cst(3.0);
            }
            finite_diff_check(|t: &mut Tape<T>, v: &[Var]| t.softmax_cross_entropy(v[0], &labels), &[scaled], h)
        }
        "adapted_linear" => {
            let r = rng.gen_range(1..=k.min(n));
            let s = T::cst(rng.gen_range(0.5..2.0));
            finite_diff_check(
                |t: &mut Tape<T>, v: &[Var]| {
                    let lora = LoraVars {
                        a: v[3],
                        b: v[4],
                        scaling: s,
                    };
                    let y = crate::lora::adapted_linear(t, v[0], v[1], v[2], Some(lora))?;
                    project(t, y, ps)
                },
                &[
                    rand_tensor(&mut rng, &[m, k]),
                    rand_tensor(&mut rng, &[n, k]),
                    rand_tensor(&mut rng, &[n]),
                    rand_tensor(&mut rng, &[n, r]),
                    rand_tensor(&mut rng, &[r, k]),
                ],
                h,
            )
        }
        other => Err(crate::error::Error::invalid("gradcheck", format!("unknown operator {other}"))),
    }
}

/// A three-stem network small enough for exhaustive finite differences.
pub fn tiny_config() -> SENetConfig {
    SENetConfig {
        stem_channels: [2, 4, 4],
        stem_kernels: [3, 3, 3],
        blocks_per_sublayer: 1,
        se_reduction: 2,
        stem_stride: 2,
        input_scale: 1.0,
    }
}

/// Smallest ReLU input allowed in a full-model instance. Central differences
/// across a kink measure a one-sided slope, so such draws are rejected.
pub const KINK_MARGIN: f64 = 1e-4;

/// A tiny model with adapters on every default target whose `A` matrices
/// are random (so both factors carry gradient), plus a matching batch whose
/// forward pass keeps every ReLU input at least [`KINK_MARGIN`] from zero.
pub fn tiny_adapted_instance<T: Real>(seed: u64, instance: usize) -> Result<(ModelParams<T>, AdapterSet<T>, Tensor<T>, Vec<usize>)> {
    let inst = instance.to_string();
    let cfg = tiny_config();
    let model = build_model(&cfg, seed.wrapping_add(instance as u64))?;
    let mut set = init_adapters(&model, "check", &default_targets(&cfg), 2, 1.5, seed, AdapterInit::ZeroA)?;
    let mut rng = rng_for(seed, &["gradcheck", "model", &inst]);
    for pair in set.pairs_mut() {
        for v in pair.a.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        for v in pair.b.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let (model, set): (ModelParams<T>, AdapterSet<T>) = (model.cast(), set.cast());
    for _ in 0..1000 {
        let mut x = rand_tensor::<T>(&mut rng, &[2, 1, 12, 10]);
        for v in x.data_mut() {
            *v = *v * T::cst(2.0);
        }
        let pass = forward(&model, &x, Some(&set), Trainable::Nothing)?;
        if pass.tape.relu_margin().is_some_and(|m| m >= KINK_MARGIN) {
            return Ok((model, set, x, vec![0, 1]));
        }
    }
    Err(crate::error::Error::invalid("gradcheck", "no kink-free input found"))
}

fn adapted_loss<T: Real>(model: &ModelParams<T>, set: &AdapterSet<T>, x: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let pass = forward(model, x, Some(set), Trainable::Nothing)?;
    let mut tape = pass.tape;
    let l = tape.softmax_cross_entropy(pass.logits, labels)?;
    Ok(tape.value(l).data()[0].to_f64().unwrap_or(f64::NAN))
}

/// Central differences of the adapted loss with respect to every adapter
/// entry and every base entry.
pub fn check_adapted_loss<T: Real>(seed: u64, instance: usize) -> Result<GradCheckReport> {
    let (model, set, x, labels) = tiny_adapted_instance::<T>(seed, instance)?;
    let pass = forward(&model, &x, Some(&set), Trainable::All)?;
    let mut tape = pass.tape;
    let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
    let grads = tape.backward(loss)?;
    let h = eps::<T>();
    let mut report = empty();
    let mut record = |a: f64, numeric: f64, slot: (usize, usize)| {
        let rel = relative_error(a, numeric);
        if !(rel <= report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst = slot;
        }
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        report.coordinates += 1;
    };

    for (ti, (target, (va, vb))) in pass.adapters.iter().enumerate() {
        for (which, var) in [(0usize, *va), (1, *vb)] {
            let g = grads.get_or_zeros(&tape, var);
            for j in 0..g.len() {
                let numeric = {
                    let mut plus = set.clone();
                    let mut minus = set.clone();
                    for (s, d) in [(&mut plus, h), (&mut minus, -h)] {
                        let pair = s.pairs_mut().find(|p| &p.target == target).expect("target present");
                        let t = if which == 0 { &mut pair.a } else { &mut pair.b };
                        t.data_mut()[j] = t.data()[j] + T::cst(d);
                    }
                    (adapted_loss(&model, &plus, &x, &labels)? - adapted_loss(&model, &minus, &x, &labels)?) / (2.0 * h)
                };
                record(g[j].to_f64().unwrap_or(f64::NAN), numeric, (2 * ti + which, j));
            }
        }
    }
    let offset = 2 * pass.adapters.len();
    for (ti, (name, var)) in pass.base.iter().enumerate() {
        let g = grads.get_or_zeros(&tape, *var);
        for j in 0..g.len() {
            let mut plus = model.clone();
            let mut minus = model.clone();
            for (m, d) in [(&mut plus, h), (&mut minus, -h)] {
                let t = m.iter_mut().find(|(n, _)| *n == name.as_str()).expect("tensor present").1;
                t.data_mut()[j] = t.data()[j] + T::cst(d);
            }
            let numeric = (adapted_loss(&plus, &set, &x, &labels)? - adapted_loss(&minus, &set, &x, &labels)?) / (2.0 * h);
            record(g[j].to_f64().unwrap_or(f64::NAN), numeric, (offset + ti, j));
        }
    }
    Ok(report)
}

/// Worst report per operator over `instances` random instances, followed by
/// the adapted-loss check over as many tiny-model instances.
pub fn gradcheck_suite<T: Real>(seed: u64, instances: usize) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    for op in OPERATORS {
        let mut worst = empty();
        for i in 0..instances {
            merge(&mut worst, check_operator::<T>(op, seed, i)?);
        }
        out.push((op.to_string(), worst));
    }
    let mut worst = empty();
    for i in 0..instances {
        merge(&mut worst, check_adapted_loss::<T>(seed, i)?);
    }
    out.push(("adapted_loss".to_string(), worst));
    Ok(out)
}
