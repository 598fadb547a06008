//! Audio corpora: WAV ingestion, protocol listings, seeded synthetic
//! corpora with four spoofing signatures, and stratified splitting.

mod protocol;
mod split;
mod synth;
mod wav;

pub use protocol::{parse_protocol, parse_protocol_str, write_protocol, ProtocolFormat};
pub use split::split_corpus;
pub use synth::{synth_corpus, Algorithm, CorpusSpec};
pub use wav::{read_wav, write_wav};

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    /// Class index used by the classifier; bonafide is always 0.
    pub fn class_index(self) -> usize {
        match self {
            Label::Bonafide => 0,
            Label::Spoof => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "spoof" => Ok(Label::Spoof),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

/// Mono PCM audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("waveform", "sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("waveform", "no samples"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::invalid(
                "waveform",
                format!("sample {i} = {} is not a finite value in [-1, 1]", samples[i]),
            ));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Multiplies every sample by `gain`, clipping to `[-1, 1]`.
    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| (s * gain).clamp(-1.0, 1.0)).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ProtocolEntry {
    pub utt_id: String,
    pub label: Label,
    /// `-` for bonafide.
    pub algo_id: String,
}

impl ProtocolEntry {
    pub fn new(utt_id: impl Into<String>, label: Label, algo_id: impl Into<String>) -> Result<Self> {
        let (utt_id, algo_id) = (utt_id.into(), algo_id.into());
        if utt_id.is_empty() || utt_id.contains(char::is_whitespace) {
            return Err(Error::invalid("utt_id", format!("{utt_id:?} must be a nonempty token")));
        }
        if label == Label::Bonafide && algo_id != "-" {
            return Err(Error::invalid("algo_id", format!("bonafide entry {utt_id} has algorithm {algo_id}")));
        }
        if algo_id.is_empty() || algo_id.contains(char::is_whitespace) {
            return Err(Error::invalid("algo_id", format!("{algo_id:?} must be a nonempty token")));
        }
        Ok(ProtocolEntry {
            utt_id,
            label,
            algo_id,
        })
    }
}

/// A tagged list of labelled utterances standing for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub tag: String,
    pub entries: Vec<(ProtocolEntry, Waveform)>,
}

impl Corpus {
    pub fn new(tag: impl Into<String>, entries: Vec<(ProtocolEntry, Waveform)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (e, _) in &entries {
            if !seen.insert(e.utt_id.as_str()) {
                return Err(Error::invalid("corpus", format!("duplicate utt_id {}", e.utt_id)));
            }
        }
        Ok(Corpus {
            tag: tag.into(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|(e, _)| e.label == label).count()
    }

    pub fn protocol(&self) -> Vec<ProtocolEntry> {
        self.entries.iter().map(|(e, _)| e.clone()).collect()
    }

    /// Writes `<dir>/<utt_id>.wav` for every entry plus `<dir>/protocol.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (e, w) in &self.entries {
            write_wav(&dir.join(format!("{}.wav", e.utt_id)), w)?;
        }
        write_protocol(&dir.join("protocol.txt"), &self.protocol())
    }

    /// Loads a corpus from a protocol listing and a directory of `<utt_id>.wav` files.
    pub fn load(protocol: &Path, audio_dir: &Path, format: ProtocolFormat, tag: &str, sample_rate: Option<u32>) -> Result<Self> {
        let entries = parse_protocol(protocol, format)?;
        let mut out = Vec::with_capacity(entries.len());
        for e in entries {
            let w = read_wav(&audio_dir.join(format!("{}.wav", e.utt_id)), sample_rate)?;
            out.push((e, w));
        }
        Corpus::new(tag, out)
    }
}
