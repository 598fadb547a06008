use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{Corpus, Label, ProtocolEntry, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Synthetic spoofing algorithms, each leaving a distinct spectral trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    /// 4-bit amplitude quantisation.
    S1,
    /// Comb notch: every 8th bin of the whole-utterance FFT is zeroed.
    S2,
    /// Ring modulation by a 1.7 kHz carrier at depth 0.5.
    S3,
    /// Frame-wise phase randomisation, magnitudes preserved.
    S4,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::S1, Algorithm::S2, Algorithm::S3, Algorithm::S4];

    pub const NOTCH_PERIOD: usize = 8;
    pub const CARRIER_HZ: f64 = 1700.0;
    pub const RING_DEPTH: f64 = 0.5;
    pub const QUANT_BITS: u32 = 4;
    pub const PHASE_FRAME: usize = 256;

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::S1 => "S1",
            Algorithm::S2 => "S2",
            Algorithm::S3 => "S3",
            Algorithm::S4 => "S4",
        }
    }

    /// Applies the signature transform to a clean signal.
    pub fn apply(self, x: &[f64], sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Algorithm::S1 => quantize(x, Self::QUANT_BITS),
            Algorithm::S2 => comb_notch(x, Self::NOTCH_PERIOD),
            Algorithm::S3 => ring_modulate(x, sample_rate, Self::CARRIER_HZ, Self::RING_DEPTH),
            Algorithm::S4 => randomize_phase(x, Self::PHASE_FRAME, rng),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid("algorithm", format!("{s:?} is not one of S1..S4")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub n_bonafide: usize,
    pub n_per_algo: usize,
    pub algorithms: Vec<Algorithm>,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_bonafide: 60,
            n_per_algo: 60,
            algorithms: vec![Algorithm::S1],
            duration_s: 1.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_bonafide == 0 || self.n_per_algo == 0 {
            return Err(Error::invalid("corpus spec", "counts must be at least 1"));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::invalid("corpus spec", format!("duration {} must be positive", self.duration_s)));
        }
        if self.sample_rate == 0 {
            return Err(Error::invalid("corpus spec", "sample rate must be positive"));
        }
        if self.algorithms.is_empty() {
            return Err(Error::invalid("corpus spec", "no spoofing algorithms"));
        }
        let unique: HashSet<_> = self.algorithms.iter().collect();
        if unique.len() != self.algorithms.len() {
            return Err(Error::invalid("corpus spec", "duplicate algorithms"));
        }
        if (self.duration_s * self.sample_rate as f64).round() < 1.0 {
            return Err(Error::invalid("corpus spec", "duration shorter than one sample"));
        }
        Ok(())
    }

    fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

/// Builds a corpus fully determined by `spec` (including its seed).
///
/// Bonafide utterances are noisy harmonic complexes under an ADSR envelope;
/// each spoof utterance is a fresh bonafide-style signal passed through its
/// algorithm's transform.
pub fn synth_corpus(spec: &CorpusSpec, tag: &str) -> Result<Corpus> {
    spec.validate()?;
    let n = spec.n_samples();
    let sr = spec.sample_rate;
    let mut entries = Vec::with_capacity(spec.n_bonafide + spec.n_per_algo * spec.algorithms.len());

    for i in 0..spec.n_bonafide {
        let mut rng = rng_for(spec.seed, &["synth", "bonafide", &i.to_string()]);
        let x = harmonic_voice(n, sr, &mut rng);
        let id = format!("{tag}_bona_{i:05}");
        entries.push((ProtocolEntry::new(id, Label::Bonafide, "-")?, Waveform::new(x, sr)?));
    }
    for &algo in &spec.algorithms {
        for i in 0..spec.n_per_algo {
            let mut rng = rng_for(spec.seed, &["synth", algo.as_str(), &i.to_string()]);
            let clean = harmonic_voice(n, sr, &mut rng);
            let y: Vec<f64> = algo.apply(&clean, sr, &mut rng).into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
            let id = format!("{tag}_{algo}_{i:05}");
            entries.push((ProtocolEntry::new(id, Label::Spoof, algo.as_str())?, Waveform::new(y, sr)?));
        }
    }
    Corpus::new(tag, entries)
}

/// Three harmonics (amplitudes 1, 1/2, 1/3) of a random f0 in [100, 300] Hz,
/// shaped by an attack/decay/sustain/release envelope, plus white noise 30 dB
/// below the signal RMS.
fn harmonic_voice(n: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let f0 = rng.gen_range(100.0..=300.0);
    let phases: [f64; 3] = [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)];
    let peak = rng.gen_range(0.25..=0.6);
    let sr = sample_rate as f64;

    let mut x: Vec<f64> = (0..n)
        .map(|t| {
            let tt = t as f64 / sr;
            let tone: f64 = (1..=3)
                .map(|k| (2.0 * PI * k as f64 * f0 * tt + phases[k - 1]).sin() / k as f64)
                .sum();
            tone * adsr(t as f64 / n as f64)
        })
        .collect();
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        for v in &mut x {
            *v *= peak / max;
        }
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let noise = Normal::new(0.0, rms * 10f64.powf(-30.0 / 20.0)).expect("finite std");
    for v in &mut x {
        *v += noise.sample(rng);
    }
    x
}

/// Envelope over normalised time `u ∈ [0, 1)`.
fn adsr(u: f64) -> f64 {
    const ATTACK: f64 = 0.1;
    const DECAY: f64 = 0.2;
    const SUSTAIN: f64 = 0.7;
    const RELEASE_START: f64 = 0.6;
    const RELEASE_END: f64 = 0.75;
    if u < ATTACK {
        u / ATTACK
    } else if u < DECAY {
        1.0 - (1.0 - SUSTAIN) * (u - ATTACK) / (DECAY - ATTACK)
    } else if u < RELEASE_START {
        SUSTAIN
    } else if u < RELEASE_END {
        SUSTAIN * (RELEASE_END - u) / (RELEASE_END - RELEASE_START)
    } else {
        0.0
    }
}

fn quantize(x: &[f64], bits: u32) -> Vec<f64> {
    let step = 2.0 / f64::from(1u32 << bits);
    x.iter().map(|v| ((v / step).round() * step).clamp(-1.0, 1.0)).collect()
}

fn comb_notch(x: &[f64], period: usize) -> Vec<f64> {
    let n = x.len();
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        // Zero both k and its mirror n-k so the output stays real.
        if k % period == 0 || (n - k) % period == 0 {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn ring_modulate(x: &[f64], sample_rate: u32, carrier_hz: f64, depth: f64) -> Vec<f64> {
    let sr = sample_rate as f64;
    x.iter()
        .enumerate()
        .map(|(t, &v)| v * ((1.0 - depth) + depth * (2.0 * PI * carrier_hz * t as f64 / sr).cos()))
        .collect()
}

fn randomize_phase(x: &[f64], frame: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut planner = FftPlanner::new();
    let mut out = Vec::with_capacity(x.len());
    for chunk in x.chunks(frame) {
        let m = chunk.len();
        let mut buf: Vec<Complex<f64>> = chunk.iter().map(|&v| Complex::new(v, 0.0)).collect();
        planner.plan_fft_forward(m).process(&mut buf);
        // Bins 1..ceil(m/2) get a random phase; mirrors are conjugated. DC and
        // (for even m) Nyquist stay real.
        for k in 1..m.div_ceil(2) {
            let mag = buf[k].norm();
            let phi = rng.gen_range(0.0..2.0 * PI);
            buf[k] = Complex::from_polar(mag, phi);
            buf[m - k] = buf[k].conj();
        }
        planner.plan_fft_inverse(m).process(&mut buf);
        out.extend(buf.iter().map(|c| c.re / m as f64));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(algorithms: Vec<Algorithm>) -> CorpusSpec {
        CorpusSpec {
            n_bonafide: 3,
            n_per_algo: 2,
            algorithms,
            duration_s: 0.25,
            sample_rate: 16_000,
            seed: 11,
        }
    }

    fn bits(c: &Corpus) -> Vec<u64> {
        c.entries.iter().flat_map(|(_, w)| w.samples().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn deterministic_under_seed() {
        let s = spec(Algorithm::ALL.to_vec());
        let a = synth_corpus(&s, "A").unwrap();
        let b = synth_corpus(&s, "A").unwrap();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.protocol(), b.protocol());
        let mut other = s.clone();
        other.seed = 12;
        assert_ne!(bits(&a), bits(&synth_corpus(&other, "A").unwrap()));
    }

    #[test]
    fn spoof_entries_carry_their_algorithm() {
        let c = synth_corpus(&spec(vec![Algorithm::S1]), "A").unwrap();
        assert_eq!(c.count(Label::Bonafide), 3);
        for (e, _) in &c.entries {
            if e.label == Label::Spoof {
                assert_eq!(e.algo_id, "S1");
            }
        }
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(vec![]);
        assert!(synth_corpus(&s, "A").is_err());
        s.algorithms = vec![Algorithm::S1, Algorithm::S1];
        assert!(synth_corpus(&s, "A").is_err());
        s.algorithms = vec![Algorithm::S1];
        s.duration_s = 0.0;
        assert!(synth_corpus(&s, "A").is_err());
        s.duration_s = 1.0;
        s.n_per_algo = 0;
        assert!(synth_corpus(&s, "A").is_err());
    }

    #[test]
    fn quantizer_uses_sixteen_levels() {
        let x: Vec<f64> = (0..1000).map(|i| (i as f64 / 1000.0) * 2.0 - 1.0).collect();
        let y = quantize(&x, 4);
        let mut levels: Vec<i64> = y.iter().map(|v| (v * 8.0).round() as i64).collect();
        levels.dedup();
        assert!(levels.len() <= 17);
        assert!(y.iter().all(|v| (v * 8.0 - (v * 8.0).round()).abs() < 1e-12));
    }

    #[test]
    fn phase_randomization_keeps_frame_magnitudes() {
        let mut rng = rng_for(0, &["t"]);
        let x: Vec<f64> = (0..512).map(|i| (i as f64 * 0.05).sin() * 0.3).collect();
        let y = randomize_phase(&x, 256, &mut rng);
        let mut planner = FftPlanner::new();
        for (cx, cy) in x.chunks(256).zip(y.chunks(256)) {
            let mut bx: Vec<Complex<f64>> = cx.iter().map(|&v| Complex::new(v, 0.0)).collect();
            let mut by: Vec<Complex<f64>> = cy.iter().map(|&v| Complex::new(v, 0.0)).collect();
            planner.plan_fft_forward(256).process(&mut bx);
            planner.plan_fft_forward(256).process(&mut by);
            for (a, b) in bx.iter().zip(&by) {
                assert!((a.norm() - b.norm()).abs() < 1e-9);
            }
        }
        assert!(x.iter().zip(&y).any(|(a, b)| (a - b).abs() > 1e-3));
    }

    #[test]
    fn ring_modulation_at_zero_time_is_identity() {
        let y = ring_modulate(&[0.4, 0.4], 16_000, 1700.0, 0.5);
        assert_eq!(y[0], 0.4);
    }
}
