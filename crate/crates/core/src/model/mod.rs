//! SE-ResNet style fake-audio classifier.
//!
//! Three strided convolution stems, each followed by a sub-layer of
//! squeeze-and-excitation residual blocks, then global average pooling and a
//! two-way linear head. Class 0 is bonafide.

mod checkpoint;
mod forward;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    batch_from_features, forward, score, se_block_forward, BlockVars, ConvVars, ForwardPass, LinearVars, Trainable,
};

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{Real, Tensor};

pub const N_CLASSES: usize = 2;
pub const BONAFIDE_CLASS: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct SENetConfig {
    /// Output channels of the three stems; the first stem reads 1 channel.
    pub stem_channels: [usize; 3],
    pub stem_kernels: [usize; 3],
    pub blocks_per_sublayer: usize,
    pub se_reduction: usize,
    pub stem_stride: usize,
    /// Fixed multiplier applied to the input features.
    pub input_scale: f64,
}

impl Default for SENetConfig {
    fn default() -> Self {
        SENetConfig::full()
    }
}

impl SENetConfig {
    /// 1→128→256→512 stems with kernels 9, 7, 5 and three blocks per sub-layer.
    pub fn full() -> Self {
        SENetConfig {
            stem_channels: [128, 256, 512],
            stem_kernels: [9, 7, 5],
            blocks_per_sublayer: 3,
            se_reduction: 16,
            stem_stride: 2,
            input_scale: 0.1,
        }
    }

    /// Same topology at 1/16 width, small enough to train on one CPU core.
    pub fn desk() -> Self {
        SENetConfig {
            stem_channels: [8, 16, 32],
            se_reduction: 2,
            ..SENetConfig::full()
        }
    }

    /// `(in, out)` channels of stem `i` (0-based).
    pub fn stem_io(&self, i: usize) -> (usize, usize) {
        let c_in = if i == 0 { 1 } else { self.stem_channels[i - 1] };
        (c_in, self.stem_channels[i])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(Error::invalid("senet config", r));
        if self.stem_channels.iter().any(|&c| c == 0) || self.stem_kernels.iter().any(|&k| k == 0) {
            return bad("channels and kernels must be positive".into());
        }
        if self.se_reduction == 0 {
            return bad("se_reduction must be positive".into());
        }
        for &c in &self.stem_channels {
            if c % self.se_reduction != 0 || c / self.se_reduction == 0 {
                return bad(format!("se_reduction {} does not divide {c}", self.se_reduction));
            }
        }
        if self.stem_stride == 0 {
            return bad("stem_stride must be positive".into());
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return bad("input_scale must be positive".into());
        }
        Ok(())
    }

    /// Every parameter name with its shape, in canonical order.
    pub fn shape_table(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for i in 0..3 {
            let (cin, cout) = self.stem_io(i);
            let k = self.stem_kernels[i];
            let s = i + 1;
            out.push((format!("stem{s}.w"), vec![cout, cin, k, k]));
            out.push((format!("stem{s}.b"), vec![cout]));
            let mid = cout / self.se_reduction;
            for j in 1..=self.blocks_per_sublayer {
                let p = format!("sub{s}.block{j}");
                out.push((format!("{p}.conv1.w"), vec![cout, cout, 3, 3]));
                out.push((format!("{p}.conv1.b"), vec![cout]));
                out.push((format!("{p}.conv2.w"), vec![cout, cout, 3, 3]));
                out.push((format!("{p}.conv2.b"), vec![cout]));
                out.push((format!("{p}.se.fc1.w"), vec![mid, cout]));
                out.push((format!("{p}.se.fc1.b"), vec![mid]));
                out.push((format!("{p}.se.fc2.w"), vec![cout, mid]));
                out.push((format!("{p}.se.fc2.b"), vec![cout]));
            }
        }
        let last = self.stem_channels[2];
        out.push(("head.w".into(), vec![N_CLASSES, last]));
        out.push(("head.b".into(), vec![N_CLASSES]));
        out
    }

    /// Recovers the shape-determined fields from named tensors; stride and
    /// input scale are taken from `self`.
    pub fn infer_from<T: Real>(&self, tensors: &IndexMap<String, Tensor<T>>) -> Result<SENetConfig> {
        let get = |name: &str| tensors.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()));
        let mut cfg = self.clone();
        for i in 0..3 {
            let w = get(&format!("stem{}.w", i + 1))?;
            if w.rank() != 4 {
                return Err(Error::shape("stem weight", w.shape(), &[0, 0, 0, 0]));
            }
            cfg.stem_channels[i] = w.shape()[0];
            cfg.stem_kernels[i] = w.shape()[2];
        }
        cfg.blocks_per_sublayer = (1..).take_while(|j| tensors.contains_key(&format!("sub1.block{j}.conv1.w"))).count();
        let fc1 = get("sub1.block1.se.fc1.w")?;
        cfg.se_reduction = cfg.stem_channels[0] / fc1.shape()[0].max(1);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// All weights of the classifier, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    config: SENetConfig,
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Checks names and shapes against `config`.
    pub fn from_tensors(config: SENetConfig, tensors: IndexMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let table = config.shape_table();
        if table.len() != tensors.len() {
            return Err(Error::invalid(
                "model params",
                format!("expected {} tensors, got {}", table.len(), tensors.len()),
            ));
        }
        let mut ordered = IndexMap::with_capacity(table.len());
        for (name, shape) in table {
            let t = tensors.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("model params", t.shape(), &shape));
            }
            ordered.insert(name, t.clone());
        }
        Ok(ModelParams {
            config,
            tensors: ordered,
        })
    }

    pub fn config(&self) -> &SENetConfig {
        &self.config
    }

    pub fn tensors(&self) -> &IndexMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Kaiming-uniform weights (`bound = sqrt(6 / fan_in)`), zero biases.
/// Each tensor draws from its own named stream, so the result depends only on
/// `config` and `seed`.
pub fn build_model(config: &SENetConfig, seed: u64) -> Result<ModelParams<f32>> {
    config.validate()?;
    let mut tensors = IndexMap::new();
    for (name, shape) in config.shape_table() {
        let t = if name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = rng_for(seed, &["init", &name]);
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
            Tensor::new(&shape, data)?
        };
        tensors.insert(name, t);
    }
    ModelParams::from_tensors(config.clone(), tensors)
}
