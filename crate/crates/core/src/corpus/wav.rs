use std::io::Cursor;
use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_bytes};

/// Reads a mono 16-bit PCM WAV file; samples are `raw / 32768`.
///
/// With `expect_rate`, a file at any other rate is rejected.
pub fn read_wav(path: &Path, expect_rate: Option<u32>) -> Result<Waveform> {
    let bytes = read_bytes(path)?;
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|e| match e {
        hound::Error::IoError(e) => Error::io(path, e),
        other => Error::NotWav(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedChannels(spec.channels));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedBitDepth(spec.bits_per_sample));
    }
    if let Some(expected) = expect_rate {
        if expected != spec.sample_rate {
            return Err(Error::SampleRateMismatch {
                expected,
                found: spec.sample_rate,
            });
        }
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| {
            s.map(|v| f64::from(v) / 32768.0)
                .map_err(|e| Error::NotWav(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono 16-bit PCM WAV file, rounding each sample to the nearest
/// int16 step.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut buf, spec)
            .map_err(|e| Error::invalid("wav", e.to_string()))?;
        for &s in w.samples() {
            let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(q).map_err(|e| Error::invalid("wav", e.to_string()))?;
        }
        writer.finalize().map_err(|e| Error::invalid("wav", e.to_string()))?;
    }
    atomic_write(path, &buf.into_inner())
}
