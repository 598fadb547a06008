//! Source-model training, frozen-base adapter training, the full finetuning
//! baseline, and routed evaluation.

mod sequence;

pub use sequence::{row_name, run_sequence, score_path, ReportMatrix, SequenceOutcome, SequencePlan, SOM_ROW};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::corpus::{Corpus, Label};
use crate::error::{Error, Result};
use crate::io::fingerprint;
use crate::lfcc::{lfcc, FeatureMap, LfccConfig};
use crate::lora::{default_targets, init_adapters, AdapterInit, AdapterSet};
use crate::metrics::{compute_eer, ScoreRecord};
use crate::model::{batch_from_features, encode_checkpoint, forward, score, ModelParams, Trainable};
use crate::rng::rng_for;
use crate::tensor::{Adam, AdamConfig, Tensor};

/// Utterances per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Lora,
    Finetune,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Lora => "lora",
            Mode::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(Mode::Lora),
            "finetune" => Ok(Mode::Finetune),
            _ => Err(Error::invalid("mode", format!("{s:?} is not lora or finetune"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub rank: usize,
    /// Empty means [`default_targets`].
    pub adapter_targets: Vec<String>,
    /// Start adapters with both matrices at zero.
    pub paper_literal_init: bool,
    pub scaling: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 0.001,
            epochs: 10,
            seed: 0,
            mode: Mode::Lora,
            rank: 4,
            adapter_targets: Vec::new(),
            paper_literal_init: false,
            scaling: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("train config", "batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("train config", "epochs must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("train config", format!("lr {} must be positive", self.lr)));
        }
        if self.rank == 0 {
            return Err(Error::invalid("train config", "rank must be at least 1"));
        }
        if !self.scaling.is_finite() {
            return Err(Error::invalid("train config", "scaling must be finite"));
        }
        Ok(())
    }

    fn adam(&self) -> Adam<f32> {
        Adam::new(AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        })
    }
}

/// A corpus reduced to fixed-size feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tag: String,
    pub utt_ids: Vec<String>,
    pub labels: Vec<Label>,
    pub features: Vec<FeatureMap>,
}

impl Dataset {
    pub fn from_corpus(corpus: &Corpus, cfg: &LfccConfig) -> Result<Self> {
        cfg.validate()?;
        let mut d = Dataset {
            tag: corpus.tag.clone(),
            utt_ids: Vec::with_capacity(corpus.len()),
            labels: Vec::with_capacity(corpus.len()),
            features: Vec::with_capacity(corpus.len()),
        };
        for (entry, wave) in &corpus.entries {
            d.utt_ids.push(entry.utt_id.clone());
            d.labels.push(entry.label);
            d.features.push(lfcc(wave, cfg)?);
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.utt_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utt_ids.is_empty()
    }

    fn require_both_classes(&self) -> Result<()> {
        let bona = self.labels.iter().filter(|&&l| l == Label::Bonafide).count();
        match (bona, self.len() - bona) {
            (0, _) => Err(Error::OneClassOnly("spoof")),
            (_, 0) => Err(Error::OneClassOnly("bonafide")),
            _ => Ok(()),
        }
    }

    /// Features of the rows `idx` as an `N×1×frames×dims` batch, plus class indices.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let maps: Vec<&FeatureMap> = idx.iter().map(|&i| &self.features[i]).collect();
        let labels = idx.iter().map(|&i| self.labels[i].class_index()).collect();
        Ok((batch_from_features(&maps)?, labels))
    }
}

/// Mini-batches for one epoch.
///
/// Each class is shuffled on its own, then the two lists are interleaved so
/// every batch keeps the corpus class ratio. The last partial batch is
/// dropped.
pub fn epoch_batches(labels: &[Label], batch_size: usize, seed: u64, stream: &str, epoch: usize) -> Vec<Vec<usize>> {
    let ep = epoch.to_string();
    let mut rng = rng_for(seed, &["batches", stream, &ep]);
    let mut bona: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Bonafide).collect();
    let mut spoof: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Spoof).collect();
    bona.shuffle(&mut rng);
    spoof.shuffle(&mut rng);
    let n = labels.len();
    let mut order = Vec::with_capacity(n);
    let (mut ib, mut is) = (0, 0);
    for k in 0..n {
        // take bonafide while behind its proportional share
        let want_bona = (k + 1) * bona.len() / n.max(1);
        if ib < bona.len() && (ib < want_bona || is == spoof.len()) {
            order.push(bona[ib]);
            ib += 1;
        } else {
            order.push(spoof[is]);
            is += 1;
        }
    }
    order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss of the very first step, before any update.
    pub initial_loss: f64,
    pub steps: u64,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

fn check_batches(data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    data.require_both_classes()?;
    if data.len() < cfg.batch_size {
        return Err(Error::invalid(
            "train data",
            format!("{} has {} utterances, fewer than batch_size {}", data.tag, data.len(), cfg.batch_size),
        ));
    }
    Ok(())
}

/// Full-model training of `params` in place.
fn train_full(params: &mut ModelParams<f32>, data: &Dataset, cfg: &TrainConfig, stream: &str) -> Result<TrainOutcome> {
    check_batches(data, cfg)?;
    let mut adam = cfg.adam();
    let mut out = TrainOutcome {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        initial_loss: f64::NAN,
        steps: 0,
    };
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(&data.labels, cfg.batch_size, cfg.seed, stream, epoch);
        let mut total = 0.0;
        for idx in &batches {
            let (x, y) = data.batch(idx)?;
            let pass = forward(params, &x, None, Trainable::Base)?;
            let mut tape = pass.tape;
            let loss = tape.softmax_cross_entropy(pass.logits, &y)?;
            let l = f64::from(tape.value(loss).data()[0]);
            if !l.is_finite() {
                return Err(Error::invalid("training", format!("non-finite loss at step {}", out.steps)));
            }
            if out.steps == 0 {
                out.initial_loss = l;
            }
            total += l;
            let grads = tape.backward(loss)?;
            adam.step(params.iter_mut().map(|(name, p)| (name, p, grads.get(pass.base[name]))))?;
            out.steps += 1;
        }
        out.epoch_losses.push(total / batches.len() as f64);
    }
    Ok(out)
}

/// Trains a source model from `init` on `data`, all parameters trainable.
pub fn train_base(init: &ModelParams<f32>, data: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams<f32>, TrainOutcome)> {
    let mut params = init.clone();
    let outcome = train_full(&mut params, data, cfg, &format!("base/{}", data.tag))?;
    Ok((params, outcome))
}

/// Continues full-model training of `base` on a new dataset.
pub fn finetune(base: &ModelParams<f32>, data: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams<f32>, TrainOutcome)> {
    if cfg.mode != Mode::Finetune {
        return Err(Error::invalid("finetune", "train config mode must be finetune"));
    }
    let mut params = base.clone();
    let outcome = train_full(&mut params, data, cfg, &format!("finetune/{}", data.tag))?;
    Ok((params, outcome))
}

/// Fresh adapters for `tag` as `cfg` describes them.
pub fn new_adapters(base: &ModelParams<f32>, tag: &str, cfg: &TrainConfig) -> Result<AdapterSet<f32>> {
    let targets = if cfg.adapter_targets.is_empty() {
        default_targets(base.config())
    } else {
        cfg.adapter_targets.clone()
    };
    let init = if cfg.paper_literal_init {
        AdapterInit::BothZero
    } else {
        AdapterInit::ZeroA
    };
    init_adapters(base, tag, &targets, cfg.rank, cfg.scaling, cfg.seed, init)
}

/// Trains adapters for `data.tag` on top of a frozen `base`.
///
/// Every step checks that no base tensor received a gradient; the base
/// checkpoint hash is compared before and after.
pub fn train_adapter(base: &ModelParams<f32>, data: &Dataset, cfg: &TrainConfig) -> Result<(AdapterSet<f32>, TrainOutcome)> {
    let set = new_adapters(base, &data.tag, cfg)?;
    train_adapter_from(base, set, data, cfg)
}

/// As [`train_adapter`], starting from the given adapter set.
pub fn train_adapter_from(
    base: &ModelParams<f32>,
    mut set: AdapterSet<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(AdapterSet<f32>, TrainOutcome)> {
    if cfg.mode != Mode::Lora {
        return Err(Error::invalid("train_adapter", "train config mode must be lora"));
    }
    check_batches(data, cfg)?;
    let before = fingerprint(&encode_checkpoint(base));
    if set.base_fingerprint != before {
        return Err(Error::FingerprintMismatch {
            expected: set.base_fingerprint,
            found: before,
        });
    }
    let stream = format!("adapter/{}", data.tag);
    let mut adam = cfg.adam();
    let mut out = TrainOutcome {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        initial_loss: f64::NAN,
        steps: 0,
    };
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(&data.labels, cfg.batch_size, cfg.seed, &stream, epoch);
        let mut total = 0.0;
        for idx in &batches {
            let (x, y) = data.batch(idx)?;
            let pass = forward(base, &x, Some(&set), Trainable::Adapters)?;
            let mut tape = pass.tape;
            let loss = tape.softmax_cross_entropy(pass.logits, &y)?;
            let l = f64::from(tape.value(loss).data()[0]);
            if !l.is_finite() {
                return Err(Error::invalid("training", format!("non-finite loss at step {}", out.steps)));
            }
            if out.steps == 0 {
                out.initial_loss = l;
            }
            total += l;
            let grads = tape.backward(loss)?;
            if let Some(name) = pass.base.iter().find(|(_, &v)| grads.get(v).is_some()).map(|(n, _)| n) {
                return Err(Error::invalid("train_adapter", format!("frozen tensor {name} received a gradient")));
            }
            let mut names = Vec::with_capacity(2 * set.len());
            for target in set.pairs().keys() {
                names.push((format!("{target}.A"), format!("{target}.B")));
            }
            let mut items = Vec::with_capacity(2 * set.len());
            for ((na, nb), pair) in names.iter().zip(set.pairs_mut()) {
                let (va, vb) = pass.adapters[&pair.target];
                items.push((na.as_str(), &mut pair.a, grads.get(va)));
                items.push((nb.as_str(), &mut pair.b, grads.get(vb)));
            }
            adam.step(items)?;
            out.steps += 1;
        }
        out.epoch_losses.push(total / batches.len() as f64);
    }
    let after = fingerprint(&encode_checkpoint(base));
    if before != after {
        return Err(Error::BaseMutated { before, after });
    }
    Ok((set, out))
}

/// Scores every utterance of `data` with `base` (plus `adapters`, if any).
/// Records come back in dataset order; `jobs` worker threads split the fixed
/// evaluation chunks between them.
pub fn score_dataset(
    base: &ModelParams<f32>,
    adapters: Option<&AdapterSet<f32>>,
    data: &Dataset,
    jobs: usize,
) -> Result<Vec<ScoreRecord>> {
    if let Some(set) = adapters {
        let found = fingerprint(&encode_checkpoint(base));
        if set.base_fingerprint != found {
            return Err(Error::FingerprintMismatch {
                expected: set.base_fingerprint,
                found,
            });
        }
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(EVAL_CHUNK).collect();
    let run = |c: &[usize]| -> Result<Vec<f64>> {
        let (x, _) = data.batch(c)?;
        let pass = forward(base, &x, adapters, Trainable::Nothing)?;
        Ok(score(pass.logits()))
    };
    let jobs = jobs.clamp(1, chunks.len().max(1));
    let scores: Vec<Vec<f64>> = if jobs == 1 {
        chunks.iter().map(|c| run(c)).collect::<Result<_>>()?
    } else {
        let mut slots: Vec<Option<Result<Vec<f64>>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..jobs)
                .map(|w| {
                    let chunks = &chunks;
                    let run = &run;
                    s.spawn(move || {
                        (w..chunks.len())
                            .step_by(jobs)
                            .map(|i| (i, run(chunks[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("evaluation worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every chunk scored")).collect::<Result<_>>()?
    };
    Ok(scores
        .into_iter()
        .flatten()
        .zip(&data.utt_ids)
        .zip(&data.labels)
        .map(|((s, id), &label)| ScoreRecord::new(id.clone(), s, label))
        .collect())
}

/// Scores `data` and returns `(EER, records)`.
pub fn evaluate(
    base: &ModelParams<f32>,
    adapters: Option<&AdapterSet<f32>>,
    data: &Dataset,
    jobs: usize,
) -> Result<(f64, Vec<ScoreRecord>)> {
    let records = score_dataset(base, adapters, data, jobs)?;
    let (eer, _) = compute_eer(&records)?;
    Ok((eer, records))
}
