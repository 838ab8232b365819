//! RIFF/WAVE reading and writing (16-bit integer and 32-bit float PCM).

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::signal::{AudioBuffer, SignalError};

/// On-disk sample encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleEncoding {
    Pcm16,
    Float32,
}

/// Reads a WAV file. When `expected_rate` is given, a differing file rate is
/// an error; nothing is resampled.
pub fn read_audio(path: impl AsRef<Path>, expected_rate: Option<u32>) -> Result<AudioBuffer, SignalError> {
    let mut reader = WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if let Some(expected) = expected_rate {
        if spec.sample_rate != expected {
            return Err(SignalError::SampleRateMismatch { expected, found: spec.sample_rate });
        }
    }
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()?,
        (SampleFormat::Float, 32) => {
            reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>()?
        }
        (format, bits) => {
            return Err(SignalError::UnsupportedFormat(format!("{bits}-bit {format:?}")));
        }
    };
    if interleaved.is_empty() {
        return Err(SignalError::EmptyInput);
    }
    let frames = interleaved.len() / channels;
    let mut out = vec![Vec::with_capacity(frames); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (c, v) in frame.iter().enumerate() {
            out[c].push(*v);
        }
    }
    AudioBuffer::new(out, spec.sample_rate)
}

/// Writes `x` interleaved. 16-bit output is clipped to the representable range.
pub fn write_audio(path: impl AsRef<Path>, x: &AudioBuffer, encoding: SampleEncoding) -> Result<(), SignalError> {
    let spec = WavSpec {
        channels: x.num_channels() as u16,
        sample_rate: x.sample_rate(),
        bits_per_sample: match encoding {
            SampleEncoding::Pcm16 => 16,
            SampleEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            SampleEncoding::Pcm16 => SampleFormat::Int,
            SampleEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    for i in 0..x.len() {
        for c in 0..x.num_channels() {
            let v = x.channel(c)[i];
            match encoding {
                SampleEncoding::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q)?;
                }
                SampleEncoding::Float32 => writer.write_sample(v as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}
