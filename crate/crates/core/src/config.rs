//! Flat `key = value` configuration files shared by every CLI command.
//!
//! Blank lines and `#` comments are ignored. Later assignments win, and
//! command-line overrides are applied after the file. `model.preset` is
//! applied before the individual `model.*` keys regardless of order.

use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::corpus::{synth_corpus, Algorithm, Corpus, CorpusSpec, ProtocolFormat};
use crate::error::{Error, Result};
use crate::io::read_text;
use crate::lfcc::LfccConfig;
use crate::model::SENetConfig;
use crate::rng::derive_seed;
use crate::trainer::{SequencePlan, TrainConfig};

pub const KEYS: &[&str] = &[
    "seed",
    "corpus.tag",
    "corpus.n_bonafide",
    "corpus.n_per_algo",
    "corpus.algorithms",
    "corpus.duration_s",
    "corpus.sample_rate",
    "data.format",
    "lfcc.frame_len",
    "lfcc.hop",
    "lfcc.n_fft",
    "lfcc.n_filters",
    "lfcc.n_ceps",
    "lfcc.include_deltas",
    "lfcc.target_frames",
    "lfcc.log_floor",
    "model.preset",
    "model.stem_channels",
    "model.stem_kernels",
    "model.blocks_per_sublayer",
    "model.se_reduction",
    "model.stem_stride",
    "model.input_scale",
    "train.batch_size",
    "train.lr",
    "train.epochs",
    "train.mode",
    "train.rank",
    "train.adapter_targets",
    "train.paper_literal_init",
    "train.scaling",
    "train.lora_alpha",
    "sequence.corpora",
    "sequence.train_fraction",
    "sequence.note",
];

/// Where the corpora of a sequence run come from.
#[derive(Debug, Clone, PartialEq)]
pub enum CorpusSource {
    Synthetic(Vec<Algorithm>),
    /// Directory holding `protocol.txt` and the WAV files it names.
    Directory(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub seed: u64,
    pub corpus_tag: String,
    pub corpus: CorpusSpec,
    pub data_format: ProtocolFormat,
    pub lfcc: LfccConfig,
    pub model: SENetConfig,
    pub train: TrainConfig,
    /// `(tag, source)` in arrival order.
    pub sequence: Vec<(String, CorpusSource)>,
    pub train_fraction: f64,
    pub note: String,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            seed: 0,
            corpus_tag: "A".into(),
            corpus: CorpusSpec::default(),
            data_format: ProtocolFormat::Native,
            lfcc: LfccConfig::default(),
            model: SENetConfig::default(),
            train: TrainConfig::default(),
            sequence: vec![
                ("A".into(), CorpusSource::Synthetic(vec![Algorithm::S2])),
                ("B".into(), CorpusSource::Synthetic(vec![Algorithm::S3])),
                ("C".into(), CorpusSource::Synthetic(vec![Algorithm::S4])),
            ],
            train_fraction: 0.5,
            note: String::new(),
        }
    }
}

/// Parses `key = value` lines into an ordered map.
pub fn parse_pairs(text: &str) -> Result<IndexMap<String, String>> {
    let mut out = IndexMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::MalformedLine {
            line_no: i + 1,
            line: raw.to_string(),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::MalformedLine {
                line_no: i + 1,
                line: raw.to_string(),
            });
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn list(v: &str) -> Vec<&str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn triple(key: &str, v: &str) -> Result<[usize; 3]> {
    let items = list(v);
    if items.len() != 3 {
        return Err(Error::Config(format!("{key}: expected three comma-separated values")));
    }
    Ok([parse(key, items[0])?, parse(key, items[1])?, parse(key, items[2])?])
}

fn algorithms(key: &str, v: &str) -> Result<Vec<Algorithm>> {
    v.split([',', '+'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("{key}: unknown algorithm {s:?}"))))
        .collect()
}

/// `TAG:ALGOS` (synthetic, algorithms joined by `+`) or `TAG:@DIR`, comma
/// separated.
pub fn parse_sequence(v: &str) -> Result<Vec<(String, CorpusSource)>> {
    let key = "sequence.corpora";
    list(v)
        .into_iter()
        .map(|item| {
            let (tag, src) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("{key}: {item:?} is not TAG:SOURCE")))?;
            let src = match src.strip_prefix('@') {
                Some(dir) => CorpusSource::Directory(dir.to_string()),
                None => CorpusSource::Synthetic(algorithms(key, src)?),
            };
            Ok((tag.trim().to_string(), src))
        })
        .collect()
}

impl CliConfig {
    /// Builds from the defaults, an optional file and overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => parse_pairs(&read_text(p)?)?,
            None => IndexMap::new(),
        };
        for (k, v) in overrides {
            pairs.insert(k.clone(), v.clone());
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &IndexMap<String, String>) -> Result<Self> {
        let mut c = CliConfig::default();
        if let Some(k) = pairs.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        if let Some(p) = pairs.get("model.preset") {
            c.model = match p.as_str() {
                "full" => SENetConfig::full(),
                "desk" => SENetConfig::desk(),
                _ => return Err(Error::Config(format!("model.preset: {p:?} is not full or desk"))),
            };
        }
        let mut alpha = None;
        for (k, v) in pairs {
            let v = v.as_str();
            match k.as_str() {
                "seed" => c.seed = parse(k, v)?,
                "corpus.tag" => c.corpus_tag = v.to_string(),
                "corpus.n_bonafide" => c.corpus.n_bonafide = parse(k, v)?,
                "corpus.n_per_algo" => c.corpus.n_per_algo = parse(k, v)?,
                "corpus.algorithms" => c.corpus.algorithms = algorithms(k, v)?,
                "corpus.duration_s" => c.corpus.duration_s = parse(k, v)?,
                "corpus.sample_rate" => c.corpus.sample_rate = parse(k, v)?,
                "data.format" => c.data_format = v.parse()?,
                "lfcc.frame_len" => c.lfcc.frame_len = parse(k, v)?,
                "lfcc.hop" => c.lfcc.hop = parse(k, v)?,
                "lfcc.n_fft" => c.lfcc.n_fft = parse(k, v)?,
                "lfcc.n_filters" => c.lfcc.n_filters = parse(k, v)?,
                "lfcc.n_ceps" => c.lfcc.n_ceps = parse(k, v)?,
                "lfcc.include_deltas" => c.lfcc.include_deltas = parse_bool(k, v)?,
                "lfcc.target_frames" => c.lfcc.target_frames = parse(k, v)?,
                "lfcc.log_floor" => c.lfcc.log_floor = parse(k, v)?,
                "model.preset" => {}
                "model.stem_channels" => c.model.stem_channels = triple(k, v)?,
                "model.stem_kernels" => c.model.stem_kernels = triple(k, v)?,
                "model.blocks_per_sublayer" => c.model.blocks_per_sublayer = parse(k, v)?,
                "model.se_reduction" => c.model.se_reduction = parse(k, v)?,
                "model.stem_stride" => c.model.stem_stride = parse(k, v)?,
                "model.input_scale" => c.model.input_scale = parse(k, v)?,
                "train.batch_size" => c.train.batch_size = parse(k, v)?,
                "train.lr" => c.train.lr = parse(k, v)?,
                "train.epochs" => c.train.epochs = parse(k, v)?,
                "train.mode" => c.train.mode = v.parse()?,
                "train.rank" => c.train.rank = parse(k, v)?,
                "train.adapter_targets" => c.train.adapter_targets = list(v).into_iter().map(String::from).collect(),
                "train.paper_literal_init" => c.train.paper_literal_init = parse_bool(k, v)?,
                "train.scaling" => c.train.scaling = parse(k, v)?,
                "train.lora_alpha" => alpha = Some(parse::<f32>(k, v)?),
                "sequence.corpora" => c.sequence = parse_sequence(v)?,
                "sequence.train_fraction" => c.train_fraction = parse(k, v)?,
                "sequence.note" => c.note = v.to_string(),
                _ => unreachable!("checked against KEYS"),
            }
        }
        if let Some(a) = alpha {
            c.train.scaling = a / c.train.rank as f32;
        }
        c.train.seed = c.seed;
        c.corpus.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.lfcc.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.sequence.is_empty() {
            return Err(Error::Config("sequence.corpora is empty".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("sequence.train_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Reads a corpus directory; the protocol defaults to `<dir>/protocol.txt`.
    pub fn load_corpus(&self, dir: &Path, protocol: Option<&Path>, tag: &str) -> Result<Corpus> {
        let protocol = protocol.map(Path::to_path_buf).unwrap_or_else(|| dir.join("protocol.txt"));
        Corpus::load(&protocol, dir, self.data_format, tag, Some(self.corpus.sample_rate))
    }

    /// Materializes `sequence.corpora`. Synthetic corpora draw their seed from
    /// `seed` and their tag, so each one differs but the whole plan is
    /// reproducible.
    pub fn sequence_plan(&self) -> Result<SequencePlan> {
        let mut corpora = Vec::with_capacity(self.sequence.len());
        for (tag, source) in &self.sequence {
            let corpus = match source {
                CorpusSource::Synthetic(algos) => {
                    let spec = CorpusSpec {
                        algorithms: algos.clone(),
                        seed: derive_seed(self.seed, &["corpus", tag]),
                        ..self.corpus.clone()
                    };
                    synth_corpus(&spec, tag)?
                }
                CorpusSource::Directory(dir) => self.load_corpus(Path::new(dir), None, tag)?,
            };
            corpora.push(corpus);
        }
        Ok(SequencePlan {
            corpora,
            mode: self.train.mode,
            note: self.note.clone(),
            train_fraction: self.train_fraction,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blank_lines_and_overrides() {
        let text = "# demo\nseed = 5\n\ntrain.epochs=3 # short\nmodel.preset = desk\n";
        let pairs = parse_pairs(text).unwrap();
        let c = CliConfig::from_pairs(&pairs).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.train.seed, 5);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.model, SENetConfig::desk());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.cfg");
        std::fs::write(&path, text).unwrap();
        let c = CliConfig::load(Some(&path), &[("train.epochs".into(), "7".into())]).unwrap();
        assert_eq!(c.train.epochs, 7);
    }

    #[test]
    fn preset_applies_before_fields() {
        let pairs = parse_pairs("model.input_scale = 0.5\nmodel.preset = desk").unwrap();
        let c = CliConfig::from_pairs(&pairs).unwrap();
        assert_eq!(c.model.stem_channels, [8, 16, 32]);
        assert_eq!(c.model.input_scale, 0.5);
    }

    #[test]
    fn unknown_and_bad_values() {
        let err = CliConfig::from_pairs(&parse_pairs("train.epoch = 3").unwrap()).unwrap_err();
        assert!(err.to_string().contains("train.epoch"));
        assert!(err.is_validation());
        assert!(CliConfig::from_pairs(&parse_pairs("train.epochs = x").unwrap()).is_err());
        assert!(CliConfig::from_pairs(&parse_pairs("train.epochs = 0").unwrap()).is_err());
        assert!(CliConfig::from_pairs(&parse_pairs("lfcc.include_deltas = maybe").unwrap()).is_err());
        assert!(matches!(parse_pairs("no equals sign"), Err(Error::MalformedLine { line_no: 1, .. })));
    }

    #[test]
    fn sequence_items() {
        let s = parse_sequence("A:S1+S2, B:S3, C:@/data/c").unwrap();
        assert_eq!(s[0], ("A".into(), CorpusSource::Synthetic(vec![Algorithm::S1, Algorithm::S2])));
        assert_eq!(s[2], ("C".into(), CorpusSource::Directory("/data/c".into())));
        assert!(parse_sequence("A").is_err());
        assert!(parse_sequence("A:S9").is_err());
    }

    #[test]
    fn alpha_sets_scaling() {
        let c = CliConfig::from_pairs(&parse_pairs("train.rank = 4\ntrain.lora_alpha = 8").unwrap()).unwrap();
        assert_eq!(c.train.scaling, 2.0);
    }
}
