//! Speech-like test material: voiced syllables (glottal pulses through a
//! cascade of formant resonators and a radiation differentiator), fricative
//! noise bursts and pauses.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::roomsim::item_rng;
use crate::signal::{AudioBuffer, SignalError};
use crate::wav::{write_audio, SampleEncoding};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// First three formants (Hz) of a few vowels.
const VOWELS: [[f64; 3]; 6] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [660.0, 1720.0, 2410.0],
];
const BANDWIDTHS: [f64; 3] = [80.0, 100.0, 120.0];

/// Two-pole resonator with unit gain at DC.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64, sample_rate: f64) -> Self {
        let r = (-PI * bandwidth / sample_rate).exp();
        let theta = 2.0 * PI * freq / sample_rate;
        let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
        Self { a1, a2, gain: 1.0 - a1 - a2, y1: 0.0, y2: 0.0 }
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Raised-cosine attack and release of `ramp` samples.
fn envelope(i: usize, len: usize, ramp: usize) -> f64 {
    let ramp = ramp.min(len / 2).max(1);
    let edge = |k: usize| 0.5 - 0.5 * (PI * k as f64 / ramp as f64).cos();
    if i < ramp {
        edge(i)
    } else if i + ramp >= len {
        edge(len - 1 - i)
    } else {
        1.0
    }
}

fn voiced(rng: &mut impl Rng, len: usize, f0: f64, sr: f64) -> Vec<f64> {
    let vowel = VOWELS[rng.random_range(0..VOWELS.len())];
    let mut formants: Vec<Resonator> = vowel
        .iter()
        .zip(BANDWIDTHS)
        .map(|(f, b)| Resonator::new(f * rng.random_range(0.9..1.1), b, sr))
        .collect();
    let glide = rng.random_range(-0.25..0.15);
    let mut phase = 0.0;
    let (mut tilt, mut tilt2) = (0.0, 0.0);
    let mut last = 0.0;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let pitch = f0 * (1.0 + glide * i as f64 / len as f64);
        phase += pitch / sr;
        let pulse = if phase >= 1.0 {
            phase -= 1.0;
            1.0
        } else {
            0.0
        };
        let aspiration = 0.02 * rng.random_range(-1.0..1.0);
        tilt = 0.94 * tilt + pulse + aspiration;
        tilt2 = 0.94 * tilt2 + tilt;
        let y = formants.iter_mut().fold(tilt2, |acc, r| r.process(acc));
        out.push((y - last) * envelope(i, len, (0.02 * sr) as usize));
        last = y;
    }
    out
}

fn fricative(rng: &mut impl Rng, len: usize, sr: f64) -> Vec<f64> {
    let mut res = Resonator::new(rng.random_range(3500.0..6000.0), 1500.0, sr);
    let mut prev = 0.0;
    let out: Vec<f64> = (0..len)
        .map(|i| {
            let w: f64 = rng.random_range(-1.0..1.0);
            let hp = w - prev;
            prev = w;
            res.process(hp) * envelope(i, len, (0.01 * sr) as usize)
        })
        .collect();
    normalized(out)
}

/// Scaled to unit RMS.
fn normalized(mut x: Vec<f64>) -> Vec<f64> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    x
}

/// One utterance of `secs` seconds, peak-normalised to 0.5.
pub fn synth_speech(rng: &mut impl Rng, secs: f64, sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    let total = (secs * sr).round() as usize;
    let f0 = rng.random_range(90.0..220.0);
    let mut out = Vec::with_capacity(total);
    out.resize((rng.random_range(0.05..0.2) * sr) as usize, 0.0);
    while out.len() < total {
        if rng.random_bool(0.3) {
            let len = (rng.random_range(0.06..0.15) * sr) as usize;
            out.extend(fricative(rng, len, sr).into_iter().map(|v| 0.15 * v));
        }
        let len = (rng.random_range(0.12..0.3) * sr) as usize;
        let gain = rng.random_range(0.4..1.0);
        let pitch = f0 * rng.random_range(0.9..1.15);
        out.extend(normalized(voiced(rng, len, pitch, sr)).into_iter().map(|v| v * gain));
        if rng.random_bool(0.35) {
            let pause = (rng.random_range(0.05..0.25) * sr) as usize;
            out.resize(out.len() + pause, 0.0);
        }
    }
    out.truncate(total);
    let peak = out.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    out
}

/// Writes `count` mono 16-bit utterances `speechNNNNN.wav` into `dir`, with
/// durations drawn uniformly from `secs`. Utterance `i` depends only on
/// `(seed, i)`.
pub fn write_corpus(
    dir: &Path,
    count: usize,
    secs: (f64, f64),
    sample_rate: u32,
    seed: u64,
) -> Result<Vec<PathBuf>, SynthError> {
    if count == 0 || !(secs.0 > 0.0 && secs.1 >= secs.0) {
        return Err(SynthError::InvalidParams(format!("{count} utterances of {secs:?} s")));
    }
    std::fs::create_dir_all(dir).map_err(|source| SynthError::Io { path: dir.to_path_buf(), source })?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = item_rng(seed, i as u64);
            let len = if secs.1 > secs.0 { rng.random_range(secs.0..=secs.1) } else { secs.0 };
            let x = AudioBuffer::mono(synth_speech(&mut rng, len, sample_rate), sample_rate)?;
            let path = dir.join(format!("speech{i:05}.wav"));
            write_audio(&path, &x, SampleEncoding::Pcm16)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wav::read_audio;

    #[test]
    fn utterances_are_deterministic_and_bounded() {
        let a = synth_speech(&mut item_rng(3, 0), 1.5, 16_000);
        let b = synth_speech(&mut item_rng(3, 0), 1.5, 16_000);
        assert_eq!(a, b);
        assert_eq!(a.len(), 24_000);
        let peak = a.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!((peak - 0.5).abs() < 1e-12);
        assert_ne!(a, synth_speech(&mut item_rng(3, 1), 1.5, 16_000));
    }

    #[test]
    fn energy_sits_in_the_speech_band() {
        let x = AudioBuffer::mono(synth_speech(&mut item_rng(9, 0), 3.0, 16_000), 16_000).unwrap();
        let s = crate::signal::stft(&x, crate::signal::WindowSpec::codec()).unwrap();
        let mut low = 0.0;
        let mut total = 0.0;
        for t in 0..s.num_frames() {
            for f in 0..s.num_bins() {
                let e = s.data()[[0, t, f]].norm_sqr();
                total += e;
                if f * 25 <= 4000 {
                    low += e;
                }
            }
        }
        assert!(low / total > 0.8, "{}", low / total);
    }

    #[test]
    fn corpus_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_corpus(dir.path(), 3, (0.5, 1.0), 16_000, 4).unwrap();
        assert_eq!(paths.len(), 3);
        for p in &paths {
            let x = read_audio(p, Some(16_000)).unwrap();
            assert!(x.len() >= 8000 && x.len() <= 16_000);
        }
        assert!(write_corpus(dir.path(), 0, (0.5, 1.0), 16_000, 4).is_err());
    }
}
