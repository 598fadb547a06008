use rand::seq::SliceRandom;

use super::{Corpus, Label};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Stratified train/eval split. Each label keeps `round(n · train_fraction)`
/// members in train (at least one on each side). Entry order within each
/// half follows the original corpus.
pub fn split_corpus(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid("train_fraction", format!("{train_fraction} is not in (0, 1)")));
    }
    let mut in_train = vec![false; corpus.len()];
    for label in [Label::Bonafide, Label::Spoof] {
        let mut idx: Vec<usize> = (0..corpus.len()).filter(|&i| corpus.entries[i].0.label == label).collect();
        if idx.len() < 2 {
            return Err(Error::EmptyClass(label.as_str()));
        }
        let mut rng = rng_for(seed, &["split", label.as_str()]);
        idx.shuffle(&mut rng);
        let n_train = ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len() - 1);
        for &i in &idx[..n_train] {
            in_train[i] = true;
        }
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (entry, keep) in corpus.entries.iter().zip(in_train) {
        if keep {
            train.push(entry.clone());
        } else {
            eval.push(entry.clone());
        }
    }
    Ok((
        Corpus::new(format!("{}-train", corpus.tag), train)?,
        Corpus::new(format!("{}-eval", corpus.tag), eval)?,
    ))
}
