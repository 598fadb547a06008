use indexmap::IndexMap;

use super::{ModelParams, BONAFIDE_CLASS, N_CLASSES};
use crate::error::{Error, Result};
use crate::lfcc::FeatureMap;
use crate::lora::{adapted_linear, AdapterSet, LoraVars};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Which leaves receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    /// Full-model training; adapters (if any) stay fixed.
    Base,
    /// Base frozen, only adapter matrices train.
    Adapters,
    All,
}

impl Trainable {
    fn base(self) -> bool {
        matches!(self, Trainable::Base | Trainable::All)
    }

    fn adapters(self) -> bool {
        matches!(self, Trainable::Adapters | Trainable::All)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    /// Effective kernel (base weight with any adapter delta folded in).
    pub w: Var,
    pub b: Var,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars<T> {
    pub w: Var,
    pub b: Var,
    pub lora: Option<LoraVars<T>>,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars<T> {
    pub conv1: ConvVars,
    pub conv2: ConvVars,
    pub fc1: LinearVars<T>,
    pub fc2: LinearVars<T>,
}

/// A recorded forward pass: the tape plus handles to logits and every leaf.
#[derive(Debug)]
pub struct ForwardPass<T: Real> {
    pub tape: Tape<T>,
    pub logits: Var,
    pub base: IndexMap<String, Var>,
    /// `target → (A, B)`
    pub adapters: IndexMap<String, (Var, Var)>,
    /// Gate of every SE block, `N×C`, in block order.
    pub gates: Vec<Var>,
}

impl<T: Real> ForwardPass<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.tape.value(self.logits)
    }
}

fn conv(tape: &mut Tape<impl Real>, x: Var, c: &ConvVars) -> Result<Var> {
    tape.conv2d(x, c.w, Some(c.b), c.stride, c.pad)
}

/// Residual SE block: `relu(x + se(conv2(relu(conv1(x)))))`, where
/// `se(u) = u · sigmoid(fc2(relu(fc1(avgpool(u)))))` per channel.
/// Returns the block output and the `N×C` gate.
pub fn se_block_forward<T: Real>(tape: &mut Tape<T>, x: Var, p: &BlockVars<T>) -> Result<(Var, Var)> {
    let c = tape.shape(x).get(1).copied().unwrap_or(0);
    let c_w = tape.shape(p.conv1.w).first().copied().unwrap_or(0);
    if c != c_w {
        return Err(Error::shape("se_block", tape.shape(x), tape.shape(p.conv1.w)));
    }
    let h = conv(tape, x, &p.conv1)?;
    let h = tape.relu(h);
    let u = conv(tape, h, &p.conv2)?;
    let squeezed = tape.global_avg_pool(u)?;
    let z = adapted_linear(tape, squeezed, p.fc1.w, p.fc1.b, p.fc1.lora)?;
    let z = tape.relu(z);
    let z = adapted_linear(tape, z, p.fc2.w, p.fc2.b, p.fc2.lora)?;
    let gate = tape.sigmoid(z);
    let scaled = tape.channel_scale(u, gate)?;
    let sum = tape.add(x, scaled)?;
    Ok((tape.relu(sum), gate))
}

/// Logits `N×2` for a batch shaped `N×1×frames×dims`.
///
/// With adapters, each targeted layer computes `W·x + s·A·(B·x)`: linear
/// layers literally, convolutions by folding `s·A·B` into the kernel's
/// matrix view.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    batch: &Tensor<T>,
    adapters: Option<&AdapterSet<T>>,
    trainable: Trainable,
) -> Result<ForwardPass<T>> {
    let cfg = params.config();
    let sb = batch.shape();
    if sb.len() != 4 || sb[1] != 1 || sb[0] == 0 {
        return Err(Error::shape("forward input", sb, &[0, 1, 0, 0]));
    }
    if let Some(set) = adapters {
        set.check_targets(params)?;
    }

    let mut tape = Tape::new();
    let mut base = IndexMap::new();
    for (name, t) in params.tensors() {
        base.insert(name.clone(), tape.leaf(t.clone(), trainable.base()));
    }
    let mut adapter_vars = IndexMap::new();
    let mut lora: IndexMap<String, LoraVars<T>> = IndexMap::new();
    if let Some(set) = adapters {
        for (target, pair) in set.pairs() {
            let a = tape.leaf(pair.a.clone(), trainable.adapters());
            let b = tape.leaf(pair.b.clone(), trainable.adapters());
            adapter_vars.insert(target.clone(), (a, b));
            lora.insert(
                target.clone(),
                LoraVars {
                    a,
                    b,
                    scaling: T::cst(f64::from(pair.scaling)),
                },
            );
        }
    }

    let conv_vars = |tape: &mut Tape<T>, prefix: &str, stride: usize, pad: usize| -> Result<ConvVars> {
        let wname = format!("{prefix}.w");
        let mut w = base[&wname];
        if let Some(l) = lora.get(&wname) {
            let shape = tape.shape(w).to_vec();
            let delta = tape.matmul(l.a, l.b)?;
            let delta = tape.scale(delta, l.scaling);
            let delta = tape.reshape(delta, &shape)?;
            w = tape.add(w, delta)?;
        }
        Ok(ConvVars {
            w,
            b: base[&format!("{prefix}.b")],
            stride,
            pad,
        })
    };
    let linear_vars = |prefix: &str| LinearVars {
        w: base[&format!("{prefix}.w")],
        b: base[&format!("{prefix}.b")],
        lora: lora.get(&format!("{prefix}.w")).copied(),
    };

    let mut x = tape.constant(batch.clone());
    x = tape.scale(x, T::cst(cfg.input_scale));
    let mut gates = Vec::new();
    for i in 1..=3 {
        let k = cfg.stem_kernels[i - 1];
        let stem = conv_vars(&mut tape, &format!("stem{i}"), cfg.stem_stride, k / 2)?;
        x = conv(&mut tape, x, &stem)?;
        x = tape.relu(x);
        for j in 1..=cfg.blocks_per_sublayer {
            let p = format!("sub{i}.block{j}");
            let block = BlockVars {
                conv1: conv_vars(&mut tape, &format!("{p}.conv1"), 1, 1)?,
                conv2: conv_vars(&mut tape, &format!("{p}.conv2"), 1, 1)?,
                fc1: linear_vars(&format!("{p}.se.fc1")),
                fc2: linear_vars(&format!("{p}.se.fc2")),
            };
            let (out, gate) = se_block_forward(&mut tape, x, &block)?;
            x = out;
            gates.push(gate);
        }
    }
    let pooled = tape.global_avg_pool(x)?;
    let head = linear_vars("head");
    let logits = adapted_linear(&mut tape, pooled, head.w, head.b, head.lora)?;
    debug_assert_eq!(tape.shape(logits)[1], N_CLASSES);

    Ok(ForwardPass {
        tape,
        logits,
        base,
        adapters: adapter_vars,
        gates,
    })
}

/// `logit(bonafide) − logit(spoof)` per row; higher means more genuine.
pub fn score<T: Real>(logits: &Tensor<T>) -> Vec<f64> {
    logits
        .data()
        .chunks(N_CLASSES)
        .map(|row| {
            let bona = row[BONAFIDE_CLASS].to_f64().unwrap_or(f64::NAN);
            let spoof = row[1 - BONAFIDE_CLASS].to_f64().unwrap_or(f64::NAN);
            bona - spoof
        })
        .collect()
}

/// Stacks equally shaped feature maps into an `N×1×frames×dims` tensor.
pub fn batch_from_features<T: Real>(features: &[&FeatureMap]) -> Result<Tensor<T>> {
    let first = features.first().ok_or_else(|| Error::invalid("batch", "empty"))?;
    let (f, d) = (first.frames(), first.dims());
    let mut data = Vec::with_capacity(features.len() * f * d);
    for fm in features {
        if (fm.frames(), fm.dims()) != (f, d) {
            return Err(Error::shape("batch", &[f, d], &[fm.frames(), fm.dims()]));
        }
        data.extend(fm.data().iter().map(|&v| T::cst(f64::from(v))));
    }
    Tensor::new(&[features.len(), 1, f, d], data)
}
