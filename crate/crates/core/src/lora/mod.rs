//! Low-rank adapters over a frozen base model.
//!
//! A [`LoraPair`] attaches `A (d_out × r)` and `B (r × d_in)` to one weight
//! `W` of the base, so the layer computes `W·x + s·A·(B·x)`. Convolution
//! kernels are handled through their `C_out × (C_in·kh·kw)` matrix view.
//! An [`AdapterSet`] holds every pair trained for one dataset, bound to the
//! exact base checkpoint through a fingerprint.

mod io;

pub use io::{decode_adapters, encode_adapters, load_adapters, save_adapters, ADAPTER_MAGIC};

use indexmap::IndexMap;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{encode_checkpoint, ModelParams, SENetConfig};
use crate::rng::rng_for;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Standard deviation of the Gaussian used for `B` at initialisation.
pub const B_INIT_STD: f64 = 0.01;

/// How adapter matrices start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdapterInit {
    /// `A = 0`, `B ~ N(0, 0.01²)`: zero product, nonzero gradients.
    #[default]
    ZeroA,
    /// `A = 0`, `B = 0`. A fixed point of gradient descent: nothing ever trains.
    BothZero,
}

/// `C_out×C_in×kh×kw` (or an already 2-D weight) → `(d_out, d_in)`.
pub fn matrix_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [o, i] => Ok((*o, *i)),
        [o, rest @ ..] if rest.len() == 3 => Ok((*o, rest.iter().product())),
        _ => Err(Error::shape("matrix view", shape, &[0, 0])),
    }
}

/// Reshapes a conv kernel into its `C_out × (C_in·kh·kw)` matrix view.
pub fn conv_as_matrix<T: Real>(kernel: &Tensor<T>) -> Result<Tensor<T>> {
    if kernel.rank() != 4 {
        return Err(Error::shape("conv_as_matrix", kernel.shape(), &[0, 0, 0, 0]));
    }
    let (o, i) = matrix_dims(kernel.shape())?;
    kernel.clone().reshape(&[o, i])
}

/// Inverse of [`conv_as_matrix`].
pub fn matrix_as_conv<T: Real>(matrix: &Tensor<T>, kernel_shape: &[usize]) -> Result<Tensor<T>> {
    let (o, i) = matrix_dims(kernel_shape)?;
    if matrix.shape() != [o, i] {
        return Err(Error::shape("matrix_as_conv", matrix.shape(), kernel_shape));
    }
    matrix.clone().reshape(kernel_shape)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T: Real = f32> {
    pub target: String,
    /// `d_out × r`
    pub a: Tensor<T>,
    /// `r × d_in`
    pub b: Tensor<T>,
    pub scaling: f32,
}

impl<T: Real> LoraPair<T> {
    pub fn new(target: impl Into<String>, a: Tensor<T>, b: Tensor<T>, scaling: f32) -> Result<Self> {
        let target = target.into();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("lora pair", a.shape(), b.shape()));
        }
        let (d_out, r, d_in) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        if r == 0 || r > d_out.min(d_in) {
            return Err(Error::RankTooLarge {
                target,
                rank: r,
                d_out,
                d_in,
            });
        }
        if !scaling.is_finite() {
            return Err(Error::invalid("lora scaling", format!("{scaling}")));
        }
        Ok(LoraPair { target, a, b, scaling })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `s·A·B` as a dense `d_out × d_in` matrix.
    pub fn delta(&self) -> Tensor<T> {
        let mut tape = Tape::new();
        let a = tape.constant(self.a.clone());
        let b = tape.constant(self.b.clone());
        let ab = tape.matmul(a, b).expect("pair shapes validated at construction");
        let d = tape.scale(ab, T::cst(f64::from(self.scaling)));
        tape.value(d).clone()
    }

    pub fn cast<U: Real>(&self) -> LoraPair<U> {
        LoraPair {
            target: self.target.clone(),
            a: self.a.cast(),
            b: self.b.cast(),
            scaling: self.scaling,
        }
    }
}

/// Every adapter pair trained for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<T: Real = f32> {
    pub tag: String,
    pairs: IndexMap<String, LoraPair<T>>,
    pub base_fingerprint: u64,
}

impl<T: Real> AdapterSet<T> {
    pub fn new(tag: impl Into<String>, base_fingerprint: u64) -> Self {
        AdapterSet {
            tag: tag.into(),
            pairs: IndexMap::new(),
            base_fingerprint,
        }
    }

    pub fn insert(&mut self, pair: LoraPair<T>) {
        self.pairs.insert(pair.target.clone(), pair);
    }

    pub fn pairs(&self) -> &IndexMap<String, LoraPair<T>> {
        &self.pairs
    }

    pub fn pairs_mut(&mut self) -> impl Iterator<Item = &mut LoraPair<T>> {
        self.pairs.values_mut()
    }

    pub fn get(&self, target: &str) -> Option<&LoraPair<T>> {
        self.pairs.get(target)
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn param_count(&self) -> usize {
        self.pairs.values().map(LoraPair::param_count).sum()
    }

    /// Every target must name a base weight whose matrix view matches.
    pub fn check_targets<U: Real>(&self, model: &ModelParams<U>) -> Result<()> {
        for (target, pair) in &self.pairs {
            let w = model.get(target).ok_or_else(|| Error::UnknownAdapterTarget(target.clone()))?;
            let (o, i) = matrix_dims(w.shape()).map_err(|_| Error::UnknownAdapterTarget(target.clone()))?;
            if (o, i) != (pair.d_out(), pair.d_in()) {
                return Err(Error::shape("adapter target", &[o, i], &[pair.d_out(), pair.d_in()]));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> AdapterSet<U> {
        AdapterSet {
            tag: self.tag.clone(),
            pairs: self.pairs.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            base_fingerprint: self.base_fingerprint,
        }
    }
}

/// Stem convolutions, both SE projections of every block, and the head.
pub fn default_targets(cfg: &SENetConfig) -> Vec<String> {
    let mut t: Vec<String> = (1..=3).map(|i| format!("stem{i}.w")).collect();
    for i in 1..=3 {
        for j in 1..=cfg.blocks_per_sublayer {
            t.push(format!("sub{i}.block{j}.se.fc1.w"));
            t.push(format!("sub{i}.block{j}.se.fc2.w"));
        }
    }
    t.push("head.w".into());
    t
}

/// Fresh adapters for `targets`, fingerprinted against `model`.
///
/// The rank used for each target is `min(rank, d_out, d_in)`, so a single
/// rank can be requested across layers of very different sizes (the head has
/// only two outputs).
pub fn init_adapters(
    model: &ModelParams<f32>,
    tag: &str,
    targets: &[String],
    rank: usize,
    scaling: f32,
    seed: u64,
    init: AdapterInit,
) -> Result<AdapterSet<f32>> {
    if rank == 0 {
        return Err(Error::invalid("rank", "must be at least 1"));
    }
    let fp = crate::io::fingerprint(&encode_checkpoint(model));
    let mut set = AdapterSet::new(tag, fp);
    let normal = Normal::new(0.0, B_INIT_STD).expect("finite std");
    for target in targets {
        let w = model.get(target).ok_or_else(|| Error::UnknownAdapterTarget(target.clone()))?;
        if target.ends_with(".b") {
            return Err(Error::UnknownAdapterTarget(target.clone()));
        }
        let (d_out, d_in) = matrix_dims(w.shape()).map_err(|_| Error::UnknownAdapterTarget(target.clone()))?;
        let r = rank.min(d_out).min(d_in);
        let a = Tensor::zeros(&[d_out, r]);
        let b = match init {
            AdapterInit::BothZero => Tensor::zeros(&[r, d_in]),
            AdapterInit::ZeroA => {
                let mut rng = rng_for(seed, &["lora-init", tag, target]);
                let data = (0..r * d_in).map(|_| normal.sample(&mut rng) as f32).collect();
                Tensor::new(&[r, d_in], data)?
            }
        };
        set.insert(LoraPair::new(target.clone(), a, b, scaling)?);
    }
    Ok(set)
}

/// Tape handles of one adapter pair.
#[derive(Debug, Clone, Copy)]
pub struct LoraVars<T> {
    pub a: Var,
    pub b: Var,
    pub scaling: T,
}

/// Row-batched linear layer `x·Wᵀ + s·(x·Bᵀ)·Aᵀ + bias`, i.e. `W·x + s·A·B·x`
/// for every row `x`.
pub fn adapted_linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, bias: Var, lora: Option<LoraVars<T>>) -> Result<Var> {
    let mut h = tape.matmul_nt(x, w)?;
    if let Some(l) = lora {
        let bx = tape.matmul_nt(x, l.b)?;
        let abx = tape.matmul_nt(bx, l.a)?;
        let abx = tape.scale(abx, l.scaling);
        h = tape.add(h, abx)?;
    }
    tape.add_bias(h, bias)
}

/// `h = W·x + s·A·(B·x)` for a column vector (`d_in`) or matrix (`d_in × m`) `x`.
pub fn adapted_forward<T: Real>(w: &Tensor<T>, pair: &LoraPair<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (d_out, d_in) = matrix_dims(w.shape())?;
    if (d_out, d_in) != (pair.d_out(), pair.d_in()) {
        return Err(Error::shape("adapted_forward", &[d_out, d_in], &[pair.d_out(), pair.d_in()]));
    }
    let cols = match x.shape() {
        [n] if *n == d_in => 1,
        [n, m] if *n == d_in => *m,
        other => return Err(Error::shape("adapted_forward", &[d_out, d_in], other)),
    };
    let mut tape = Tape::new();
    let wv = tape.constant(w.clone().reshape(&[d_out, d_in])?);
    let xv = tape.constant(x.clone().reshape(&[d_in, cols])?);
    let av = tape.constant(pair.a.clone());
    let bv = tape.constant(pair.b.clone());
    let wx = tape.matmul(wv, xv)?;
    let bx = tape.matmul(bv, xv)?;
    let abx = tape.matmul(av, bx)?;
    let abx = tape.scale(abx, T::cst(f64::from(pair.scaling)));
    let h = tape.add(wx, abx)?;
    let out = tape.value(h).clone();
    if x.rank() == 1 {
        out.reshape(&[d_out])
    } else {
        Ok(out)
    }
}

/// `W' = W + s·A·B`, preserving `W`'s shape (conv kernels stay rank 4).
pub fn merge<T: Real>(w: &Tensor<T>, pair: &LoraPair<T>) -> Result<Tensor<T>> {
    let (d_out, d_in) = matrix_dims(w.shape())?;
    if (d_out, d_in) != (pair.d_out(), pair.d_in()) {
        return Err(Error::shape("merge", &[d_out, d_in], &[pair.d_out(), pair.d_in()]));
    }
    let delta = pair.delta();
    let data = w.data().iter().zip(delta.data()).map(|(&a, &b)| a + b).collect();
    Tensor::new(w.shape(), data)
}

/// A standalone model with every adapter folded into its base weight.
pub fn merge_into_model<T: Real>(model: &ModelParams<T>, set: &AdapterSet<T>) -> Result<ModelParams<T>> {
    set.check_targets(model)?;
    let mut tensors = model.tensors().clone();
    for (target, pair) in set.pairs() {
        let merged = merge(&tensors[target], pair)?;
        tensors.insert(target.clone(), merged);
    }
    ModelParams::from_tensors(model.config().clone(), tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, d.to_vec()).unwrap()
    }

    #[test]
    fn conv_matrix_view_shapes() {
        let k = Tensor::<f32>::zeros(&[128, 1, 9, 9]);
        assert_eq!(conv_as_matrix(&k).unwrap().shape(), &[128, 81]);
        let k: Tensor<f32> = Tensor::new(&[3, 2, 2, 2], (0..24).map(|v| v as f32 * 0.37).collect()).unwrap();
        let back = matrix_as_conv(&conv_as_matrix(&k).unwrap(), &[3, 2, 2, 2]).unwrap();
        assert_eq!(back, k);
        assert!(conv_as_matrix(&Tensor::<f32>::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn dense_rank_one_example() {
        let w = t(&[2, 2], &[1., 0., 0., 1.]);
        let pair = LoraPair::new("w", t(&[2, 1], &[1., 0.]), t(&[1, 2], &[0., 1.]), 1.0).unwrap();
        let h = adapted_forward(&w, &pair, &t(&[2], &[3., 4.])).unwrap();
        assert_eq!(h.data(), &[7., 4.]);
        let merged = merge(&w, &pair).unwrap();
        assert_eq!(merged.data(), &[1., 1., 0., 1.]);
    }

    #[test]
    fn zero_a_or_zero_scale_gives_base_output() {
        let w = t(&[2, 3], &[0.3, -1.1, 2.0, 0.7, 0.2, -0.4]);
        let x = t(&[3], &[1.5, -2.0, 0.25]);
        let base = adapted_forward(&w, &LoraPair::new("w", t(&[2, 1], &[0., 0.]), t(&[1, 3], &[0., 0., 0.]), 1.0).unwrap(), &x).unwrap();
        let zero_a = LoraPair::new("w", t(&[2, 1], &[0., 0.]), t(&[1, 3], &[0.4, -0.9, 1.3]), 1.0).unwrap();
        let zero_s = LoraPair::new("w", t(&[2, 1], &[0.5, 2.0]), t(&[1, 3], &[0.4, -0.9, 1.3]), 0.0).unwrap();
        let plain: Vec<f64> = (0..2).map(|r| (0..3).map(|c| w.get2(r, c) * x.data()[c]).sum()).collect();
        for pair in [zero_a, zero_s] {
            let h = adapted_forward(&w, &pair, &x).unwrap();
            assert_eq!(h, base);
            assert_eq!(h.data(), plain.as_slice());
            assert_eq!(merge(&w, &pair).unwrap(), w);
        }
    }

    #[test]
    fn rank_bounds() {
        let err = LoraPair::new("w", Tensor::<f32>::zeros(&[2, 3]), Tensor::zeros(&[3, 5]), 1.0).unwrap_err();
        assert!(matches!(err, Error::RankTooLarge { rank: 3, d_out: 2, d_in: 5, .. }));
        assert!(LoraPair::new("w", Tensor::<f32>::zeros(&[2, 2]), Tensor::zeros(&[3, 5]), 1.0).is_err());
    }

    #[test]
    fn init_is_zero_product_and_seeded() {
        let cfg = SENetConfig::desk();
        let model = build_model(&cfg, 0).unwrap();
        let targets = default_targets(&cfg);
        let a = init_adapters(&model, "B", &targets, 4, 1.0, 9, AdapterInit::ZeroA).unwrap();
        let b = init_adapters(&model, "B", &targets, 4, 1.0, 9, AdapterInit::ZeroA).unwrap();
        assert_eq!(a, b);
        for pair in a.pairs().values() {
            assert!(pair.a.data().iter().all(|&v| v == 0.0));
            assert!(pair.b.data().iter().any(|&v| v != 0.0));
            assert!(pair.delta().data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(a.get("head.w").unwrap().rank(), 2);
        assert_eq!(a.get("stem1.w").unwrap().rank(), 4);
        let lit = init_adapters(&model, "B", &targets, 4, 1.0, 9, AdapterInit::BothZero).unwrap();
        assert!(lit.pairs().values().all(|p| p.b.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn unknown_targets_rejected() {
        let model = build_model(&SENetConfig::desk(), 0).unwrap();
        for bad in ["nope.w", "stem1.b"] {
            let err = init_adapters(&model, "B", &[bad.to_string()], 2, 1.0, 0, AdapterInit::ZeroA).unwrap_err();
            assert!(matches!(err, Error::UnknownAdapterTarget(_)), "{bad}");
        }
    }
}
