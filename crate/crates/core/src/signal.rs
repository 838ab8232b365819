//! Multichannel sample buffers and the STFT / ISTFT pair shared by the codec
//! (640/320 framing) and the metric suite (2048/512 framing).

use std::f64::consts::PI;

use ndarray::{s, Array3, ArrayView2};
use num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

/// Default sample rate of every signal handled by the toolkit.
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("input signal is empty")]
    EmptyInput,
    #[error("invalid window spec: {0}")]
    InvalidWindow(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported wav encoding: {0}")]
    UnsupportedFormat(String),
    #[error("sample rate {found} Hz does not match the configured {expected} Hz")]
    SampleRateMismatch { expected: u32, found: u32 },
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

/// M channels of equal length at a common sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self, SignalError> {
        if channels.is_empty() {
            return Err(SignalError::ShapeMismatch("at least one channel required".into()));
        }
        if sample_rate == 0 {
            return Err(SignalError::ShapeMismatch("sample rate must be positive".into()));
        }
        let len = channels[0].len();
        if let Some(bad) = channels.iter().position(|c| c.len() != len) {
            return Err(SignalError::ShapeMismatch(format!(
                "channel {bad} has {} samples, channel 0 has {len}",
                channels[bad].len()
            )));
        }
        Ok(Self { channels, sample_rate })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self, SignalError> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn zeros(num_channels: usize, len: usize, sample_rate: u32) -> Result<Self, SignalError> {
        Self::new(vec![vec![0.0; len]; num_channels], sample_rate)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, index: usize) -> &[f64] {
        &self.channels[index]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Largest absolute sample over all channels.
    pub fn peak(&self) -> f64 {
        self.channels
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            channels: self.channels.iter().map(|c| c.iter().map(|v| v * gain).collect()).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// A new buffer holding only the listed channels, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self, SignalError> {
        let channels = indices
            .iter()
            .map(|&i| {
                self.channels.get(i).cloned().ok_or_else(|| {
                    SignalError::ShapeMismatch(format!("channel {i} out of range"))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(channels, self.sample_rate)
    }
}

/// Hann-windowed framing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowSpec {
    fft_size: usize,
    hop_size: usize,
}

impl WindowSpec {
    /// Requires an even `fft_size` that is an integer multiple (at least 2x)
    /// of `hop_size`; the periodic Hann window is then constant-overlap-add.
    pub fn new(fft_size: usize, hop_size: usize) -> Result<Self, SignalError> {
        if fft_size < 2 || fft_size % 2 != 0 {
            return Err(SignalError::InvalidWindow(format!("fft size {fft_size} must be even")));
        }
        if hop_size == 0 || fft_size % hop_size != 0 || fft_size / hop_size < 2 {
            return Err(SignalError::InvalidWindow(format!(
                "hop size {hop_size} must divide fft size {fft_size} at least twice"
            )));
        }
        Ok(Self { fft_size, hop_size })
    }

    /// 640-point window, 320-point hop: 50 frames per second at 16 kHz.
    pub fn codec() -> Self {
        Self { fft_size: 640, hop_size: 320 }
    }

    /// 2048-point window, 512-point hop used by every metric.
    pub fn metric() -> Self {
        Self { fft_size: 2048, hop_size: 512 }
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn hop_size(&self) -> usize {
        self.hop_size
    }

    /// One-sided bin count.
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Zeros inserted before the first and after the last sample.
    pub fn padding(&self) -> usize {
        self.fft_size - self.hop_size
    }

    pub fn num_frames(&self, signal_len: usize) -> usize {
        let span = signal_len + 2 * self.padding() - self.fft_size;
        1 + span.div_ceil(self.hop_size)
    }

    /// Periodic (DFT-even) Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.fft_size as f64;
        (0..self.fft_size).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()).collect()
    }

    pub fn bin_frequency(&self, bin: usize, sample_rate: u32) -> f64 {
        bin as f64 * sample_rate as f64 / self.fft_size as f64
    }
}

/// Complex one-sided STFT of every channel, laid out as `(channel, frame, bin)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    spec: WindowSpec,
    sample_rate: u32,
    signal_len: usize,
    data: Array3<Complex64>,
}

impl Spectrogram {
    pub fn from_parts(
        spec: WindowSpec,
        sample_rate: u32,
        signal_len: usize,
        data: Array3<Complex64>,
    ) -> Result<Self, SignalError> {
        let (_, frames, bins) = data.dim();
        if bins != spec.num_bins() {
            return Err(SignalError::ShapeMismatch(format!(
                "{bins} bins, window spec implies {}",
                spec.num_bins()
            )));
        }
        if frames != spec.num_frames(signal_len) {
            return Err(SignalError::ShapeMismatch(format!(
                "{frames} frames, a {signal_len}-sample signal implies {}",
                spec.num_frames(signal_len)
            )));
        }
        Ok(Self { spec, sample_rate, signal_len, data })
    }

    pub fn zeros(spec: WindowSpec, sample_rate: u32, signal_len: usize, channels: usize) -> Self {
        let shape = (channels, spec.num_frames(signal_len), spec.num_bins());
        Self { spec, sample_rate, signal_len, data: Array3::zeros(shape) }
    }

    pub fn spec(&self) -> WindowSpec {
        self.spec
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn num_channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn num_frames(&self) -> usize {
        self.data.dim().1
    }

    pub fn num_bins(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<Complex64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<Complex64> {
        self.data
    }

    /// `(frame, bin)` view of one channel.
    pub fn channel(&self, index: usize) -> ArrayView2<'_, Complex64> {
        self.data.slice(s![index, .., ..])
    }

    /// A new spectrogram with only the listed channels.
    pub fn select(&self, indices: &[usize]) -> Result<Self, SignalError> {
        let mut data = Array3::zeros((indices.len(), self.num_frames(), self.num_bins()));
        for (dst, &src) in indices.iter().enumerate() {
            if src >= self.num_channels() {
                return Err(SignalError::ShapeMismatch(format!("channel {src} out of range")));
            }
            data.slice_mut(s![dst, .., ..]).assign(&self.channel(src));
        }
        Ok(Self { data, ..self.clone() })
    }
}

/// Forward STFT. Each channel is zero-padded by `fft_size - hop_size` on both
/// ends so every input sample sees the full overlap of windows.
pub fn stft(x: &AudioBuffer, spec: WindowSpec) -> Result<Spectrogram, SignalError> {
    if x.is_empty() {
        return Err(SignalError::EmptyInput);
    }
    let n = spec.fft_size;
    let pad = spec.padding();
    let frames = spec.num_frames(x.len());
    let bins = spec.num_bins();
    let window = spec.window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);

    let mut data = Array3::zeros((x.num_channels(), frames, bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (c, samples) in x.channels().iter().enumerate() {
        for t in 0..frames {
            let start = t * spec.hop_size;
            for (i, slot) in buf.iter_mut().enumerate() {
                // index into the padded signal, shifted back to the original
                let pos = start + i;
                let v = if pos >= pad && pos - pad < samples.len() { samples[pos - pad] } else { 0.0 };
                *slot = Complex64::new(v * window[i], 0.0);
            }
            fft.process(&mut buf);
            for f in 0..bins {
                data[[c, t, f]] = buf[f];
            }
        }
    }
    Ok(Spectrogram { spec, sample_rate: x.sample_rate(), signal_len: x.len(), data })
}

/// Inverse STFT by weighted overlap-add, normalised by the summed squared
/// window. The head/tail padding added by [`stft`] is stripped.
///
/// Only the one-sided half of each frame is used; the imaginary parts of the
/// DC and Nyquist bins do not contribute to the real output.
pub fn istft(spec_data: &Spectrogram) -> Result<AudioBuffer, SignalError> {
    let spec = spec_data.spec;
    let n = spec.fft_size;
    let hop = spec.hop_size;
    let pad = spec.padding();
    let frames = spec_data.num_frames();
    if spec_data.num_bins() != spec.num_bins() || frames != spec.num_frames(spec_data.signal_len) {
        return Err(SignalError::ShapeMismatch("spectrogram does not match its window spec".into()));
    }
    if spec_data.signal_len == 0 {
        return Err(SignalError::EmptyInput);
    }
    let window = spec.window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let total = n + (frames - 1) * hop;

    let mut norm = vec![0.0; total];
    for t in 0..frames {
        for (i, w) in window.iter().enumerate() {
            norm[t * hop + i] += w * w;
        }
    }

    let mut out = Vec::with_capacity(spec_data.num_channels());
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..spec_data.num_channels() {
        let mut acc = vec![0.0; total];
        for t in 0..frames {
            let row = spec_data.data.slice(s![c, t, ..]);
            buf[0] = Complex64::new(row[0].re, 0.0);
            buf[n / 2] = Complex64::new(row[n / 2].re, 0.0);
            for f in 1..n / 2 {
                buf[f] = row[f];
                buf[n - f] = row[f].conj();
            }
            ifft.process(&mut buf);
            let start = t * hop;
            for i in 0..n {
                acc[start + i] += window[i] * buf[i].re / n as f64;
            }
        }
        let samples = (0..spec_data.signal_len)
            .map(|k| {
                let pos = k + pad;
                if norm[pos] > 1e-12 { acc[pos] / norm[pos] } else { 0.0 }
            })
            .collect();
        out.push(samples);
    }
    AudioBuffer::new(out, spec_data.sample_rate)
}
