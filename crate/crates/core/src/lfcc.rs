//! Linear-frequency cepstral coefficients.
//!
//! frame → Hamming window → |FFT|²/n_fft → triangular linear filterbank →
//! log (floored) → orthonormal DCT-II → Δ, ΔΔ → fixed number of frames.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::corpus::Waveform;
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_bytes, ByteReader};

#[derive(Debug, Clone, PartialEq)]
pub struct LfccConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_filters: usize,
    pub n_ceps: usize,
    pub include_deltas: bool,
    pub target_frames: usize,
    pub log_floor: f64,
}

impl Default for LfccConfig {
    fn default() -> Self {
        LfccConfig {
            frame_len: 400,
            hop: 160,
            n_fft: 512,
            n_filters: 20,
            n_ceps: 20,
            include_deltas: true,
            target_frames: 96,
            log_floor: 1e-10,
        }
    }
}

impl LfccConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(Error::invalid("lfcc config", r));
        if self.frame_len == 0 || self.hop == 0 {
            return bad("frame_len and hop must be positive".into());
        }
        if self.n_fft < self.frame_len {
            return bad(format!("n_fft {} < frame_len {}", self.n_fft, self.frame_len));
        }
        if self.n_filters == 0 || self.n_ceps == 0 || self.n_ceps > self.n_filters {
            return bad(format!("need 1 <= n_ceps ({}) <= n_filters ({})", self.n_ceps, self.n_filters));
        }
        if self.target_frames == 0 {
            return bad("target_frames must be at least 1".into());
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }

    /// Feature dimension per frame.
    pub fn dims(&self) -> usize {
        if self.include_deltas {
            self.n_ceps * 3
        } else {
            self.n_ceps
        }
    }
}

/// A `frames × dims` feature matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    frames: usize,
    dims: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(frames: usize, dims: usize, data: Vec<f32>) -> Result<Self> {
        if frames * dims != data.len() || frames == 0 || dims == 0 {
            return Err(Error::shape("FeatureMap", &[frames, dims], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map", "non-finite value"));
        }
        Ok(FeatureMap { frames, dims, data })
    }

    fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flat_map(|r| r.iter().map(|&v| v as f32)).collect();
        FeatureMap::new(rows.len(), dims, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    /// Feature cache: `LFCC0001`, u32 frames, u32 dims, f32 LE row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "feature cache");
        let magic = r.take(8)?;
        if magic != CACHE_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(CACHE_MAGIC).into(),
                found: String::from_utf8_lossy(magic).into(),
            });
        }
        let frames = r.u32()? as usize;
        let dims = r.u32()? as usize;
        let data = r.f32s(frames * dims)?;
        FeatureMap::new(frames, dims, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        FeatureMap::from_bytes(&read_bytes(path)?)
    }
}

const CACHE_MAGIC: &[u8; 8] = b"LFCC0001";

pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()).collect()
}

/// Splits into `1 + (len − frame_len) / hop` Hamming-windowed frames.
pub fn frame_signal(samples: &[f64], frame_len: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    if samples.len() < frame_len || frame_len == 0 {
        return Err(Error::TooShort {
            len: samples.len(),
            needed: frame_len.max(1),
        });
    }
    if hop == 0 {
        return Err(Error::invalid("hop", "must be positive"));
    }
    let win = hamming(frame_len);
    let n_frames = 1 + (samples.len() - frame_len) / hop;
    Ok((0..n_frames)
        .map(|f| {
            samples[f * hop..f * hop + frame_len]
                .iter()
                .zip(&win)
                .map(|(s, w)| s * w)
                .collect()
        })
        .collect())
}

/// Center frequencies (Hz) of the linear filterbank.
pub fn filter_centers_hz(n_filters: usize, sample_rate: u32) -> Vec<f64> {
    let nyquist = sample_rate as f64 / 2.0;
    let step = nyquist / (n_filters + 1) as f64;
    (1..=n_filters).map(|m| m as f64 * step).collect()
}

/// `n_filters × (n_fft/2 + 1)` triangular filters with linearly spaced
/// centers, each scaled so its largest weight is exactly 1.
pub fn linear_filterbank(n_filters: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let step = nyquist / (n_filters + 1) as f64;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    (0..n_filters)
        .map(|m| {
            let (lo, c, hi) = (m as f64 * step, (m + 1) as f64 * step, (m + 2) as f64 * step);
            let mut row: Vec<f64> = (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= c {
                        (f - lo) / (c - lo)
                    } else {
                        (hi - f) / (hi - c)
                    }
                })
                .collect();
            let peak = row.iter().copied().fold(0.0, f64::max);
            if peak > 0.0 {
                row.iter_mut().for_each(|v| *v /= peak);
            }
            row
        })
        .collect()
}

/// First `n_out` rows of the orthonormal DCT-II matrix of size `n`.
pub fn dct_matrix(n_out: usize, n: usize) -> Vec<Vec<f64>> {
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            (0..n)
                .map(|i| scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                .collect()
        })
        .collect()
}

/// Per-frame power spectra `|FFT|² / n_fft` of Hamming-windowed frames.
pub fn power_spectrogram(w: &Waveform, cfg: &LfccConfig) -> Result<Vec<Vec<f64>>> {
    let frames = frame_signal(w.samples(), cfg.frame_len, cfg.hop)?;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let n_bins = cfg.n_fft / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    Ok(frames
        .iter()
        .map(|fr| {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (b, &v) in buf.iter_mut().zip(fr) {
                b.re = v;
            }
            fft.process(&mut buf);
            buf[..n_bins].iter().map(|c| c.norm_sqr() / cfg.n_fft as f64).collect()
        })
        .collect())
}

/// Floored natural-log filterbank energies, `frames × n_filters`.
pub fn log_filterbank_energies(w: &Waveform, cfg: &LfccConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let spec = power_spectrogram(w, cfg)?;
    let fb = linear_filterbank(cfg.n_filters, cfg.n_fft, w.sample_rate());
    Ok(spec
        .iter()
        .map(|p| {
            fb.iter()
                .map(|filt| {
                    let e: f64 = filt.iter().zip(p).map(|(h, v)| h * v).sum();
                    e.max(cfg.log_floor).ln()
                })
                .collect()
        })
        .collect())
}

/// Regression deltas over ±`width` frames with edge frames replicated.
pub fn deltas(rows: &[Vec<f64>], width: usize) -> Vec<Vec<f64>> {
    let n = rows.len();
    let dims = rows.first().map_or(0, Vec::len);
    let denom: f64 = 2.0 * (1..=width).map(|k| (k * k) as f64).sum::<f64>();
    (0..n)
        .map(|t| {
            (0..dims)
                .map(|d| {
                    (1..=width)
                        .map(|k| {
                            let fwd = rows[(t + k).min(n - 1)][d];
                            let back = rows[t.saturating_sub(k)][d];
                            k as f64 * (fwd - back)
                        })
                        .sum::<f64>()
                        / denom
                })
                .collect()
        })
        .collect()
}

/// Static cepstra (before deltas and length normalisation).
pub fn static_cepstra(w: &Waveform, cfg: &LfccConfig) -> Result<Vec<Vec<f64>>> {
    let logfb = log_filterbank_energies(w, cfg)?;
    let dct = dct_matrix(cfg.n_ceps, cfg.n_filters);
    Ok(logfb
        .iter()
        .map(|l| dct.iter().map(|row| row.iter().zip(l).map(|(a, b)| a * b).sum()).collect())
        .collect())
}

pub fn lfcc(w: &Waveform, cfg: &LfccConfig) -> Result<FeatureMap> {
    let ceps = static_cepstra(w, cfg)?;
    let rows: Vec<Vec<f64>> = if cfg.include_deltas {
        let d1 = deltas(&ceps, 2);
        let d2 = deltas(&d1, 2);
        ceps.iter()
            .zip(&d1)
            .zip(&d2)
            .map(|((c, a), b)| c.iter().chain(a).chain(b).copied().collect())
            .collect()
    } else {
        ceps
    };
    Ok(pad_or_crop(&FeatureMap::from_rows(&rows)?, cfg.target_frames))
}

/// Keeps the first `target` frames, or tiles from the start until `target`.
pub fn pad_or_crop(f: &FeatureMap, target: usize) -> FeatureMap {
    let mut data = Vec::with_capacity(target * f.dims);
    for t in 0..target {
        data.extend_from_slice(f.row(t % f.frames));
    }
    FeatureMap {
        frames: target,
        dims: f.dims,
        data,
    }
}
