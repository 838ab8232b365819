//! Spatial fidelity metrics for linear arrays.
//!
//! All metrics run on a 2048/512 Hann STFT. Directions are angles from the
//! array axis in `[0, 180]` degrees and steering vectors are far-field:
//! `d_m(theta, f) = exp(+j 2 pi f x_m cos(theta) / c)` with `x_m` the
//! microphone's coordinate along the axis.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::Cholesky;
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{hermitian_eigen, CMatrix, CVector};
use crate::roomsim::{ArrayGeometry, SPEED_OF_SOUND};
use crate::signal::{istft, stft, AudioBuffer, SignalError, Spectrogram, WindowSpec};
use crate::spatial::{rtf_extract, RtfBin, SpatialError};

pub const DEFAULT_BEAMS: usize = 50;
pub const DEFAULT_DIAGONAL_LOADING: f64 = 1e-2;
/// Reported SNR ceiling in dB.
pub const SNR_CLAMP_DB: f64 = 100.0;
pub const MUSIC_BAND_HZ: (f64, f64) = (300.0, 3500.0);

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("input has {found} channels, expected {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("lengths differ: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("no frequency bin carries energy in both signals")]
    NoValidBins,
    #[error("reference channel {0} has zero energy")]
    ZeroReference(usize),
    #[error("{frames} frames is too few to average a {channels}-channel covariance")]
    TooFewFrames { frames: usize, channels: usize },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
}

fn steering(coords: &[f64], freq: f64, cos_theta: f64, speed: f64) -> CVector {
    CVector::from_iterator(
        coords.len(),
        coords.iter().map(|x| Complex64::from_polar(1.0, 2.0 * PI * freq * x * cos_theta / speed)),
    )
}

/// Diffuse-field coherence `sinc(2 pi f d_ij / c)` plus `loading * I`.
fn loaded_coherence(positions: &[[f64; 3]], freq: f64, loading: f64, speed: f64) -> CMatrix {
    let m = positions.len();
    CMatrix::from_fn(m, m, |i, j| {
        let d = (0..3).map(|k| (positions[i][k] - positions[j][k]).powi(2)).sum::<f64>().sqrt();
        let x = 2.0 * PI * freq * d / speed;
        let sinc = if x == 0.0 { 1.0 } else { x.sin() / x };
        Complex64::new(sinc + if i == j { loading } else { 0.0 }, 0.0)
    })
}

/// `(Gamma + delta I)^-1 d / (d^H (Gamma + delta I)^-1 d)`.
fn superdirective(chol: &Cholesky<Complex64, nalgebra::Dyn>, d: &CVector) -> CVector {
    let z = chol.solve(d);
    let denom = d.dotc(&z);
    z / denom
}

fn check_loading(loading: f64) -> Result<(), MetricError> {
    if !(loading > 0.0 && loading.is_finite()) {
        return Err(MetricError::InvalidParams(format!("diagonal loading {loading} must be positive")));
    }
    Ok(())
}

/// Fixed superdirective beams at `theta_b = arccos(1 - 2b/B)`, `b = 1..=B`.
#[derive(Debug, Clone)]
pub struct BeamformerBank {
    spec: WindowSpec,
    sample_rate: u32,
    loading: f64,
    num_channels: usize,
    directions: Vec<f64>,
    /// `(beam, bin, channel)`
    weights: Array3<Complex64>,
}

impl BeamformerBank {
    pub fn design(
        array: &ArrayGeometry,
        beams: usize,
        loading: f64,
        spec: WindowSpec,
        sample_rate: u32,
    ) -> Result<Self, MetricError> {
        check_loading(loading)?;
        if beams == 0 {
            return Err(MetricError::InvalidParams("at least one beam is required".into()));
        }
        let coords = array.axis_coordinates();
        let m = coords.len();
        let directions: Vec<f64> = (1..=beams).map(|b| beam_cosine(b, beams).acos()).collect();
        let bins = spec.num_bins();
        let per_bin: Vec<Vec<CVector>> = (0..bins)
            .into_par_iter()
            .map(|f| {
                let freq = spec.bin_frequency(f, sample_rate);
                let gamma = loaded_coherence(array.positions(), freq, loading, SPEED_OF_SOUND);
                let chol = Cholesky::new(gamma).expect("loaded coherence is positive definite");
                directions
                    .iter()
                    .map(|theta| superdirective(&chol, &steering(&coords, freq, theta.cos(), SPEED_OF_SOUND)))
                    .collect()
            })
            .collect();
        let mut weights = Array3::zeros((beams, bins, m));
        for (f, ws) in per_bin.iter().enumerate() {
            for (b, w) in ws.iter().enumerate() {
                for c in 0..m {
                    weights[[b, f, c]] = w[c];
                }
            }
        }
        Ok(Self { spec, sample_rate, loading, num_channels: m, directions, weights })
    }

    /// 50 beams, loading 1e-2, 2048/512 framing.
    pub fn standard(array: &ArrayGeometry, sample_rate: u32) -> Result<Self, MetricError> {
        Self::design(array, DEFAULT_BEAMS, DEFAULT_DIAGONAL_LOADING, WindowSpec::metric(), sample_rate)
    }

    pub fn num_beams(&self) -> usize {
        self.directions.len()
    }

    pub fn num_bins(&self) -> usize {
        self.spec.num_bins()
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    /// Beam directions in radians.
    pub fn directions(&self) -> &[f64] {
        &self.directions
    }

    pub fn loading(&self) -> f64 {
        self.loading
    }

    pub fn spec(&self) -> WindowSpec {
        self.spec
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn weights(&self) -> &Array3<Complex64> {
        &self.weights
    }

    pub fn weight(&self, beam: usize, bin: usize) -> CVector {
        CVector::from_iterator(self.num_channels, self.weights.slice(ndarray::s![beam, bin, ..]).iter().copied())
    }
}

/// `1 - 2b/B`, the cosine of beam `b` (1-based).
pub fn beam_cosine(b: usize, beams: usize) -> f64 {
    1.0 - 2.0 * b as f64 / beams as f64
}

/// Time-averaged beam magnitudes, `values[[bin, beam]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFeature {
    pub values: Array2<f64>,
}

impl SpatialFeature {
    pub fn num_bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_beams(&self) -> usize {
        self.values.ncols()
    }
}

fn metric_stft(x: &AudioBuffer, spec: WindowSpec) -> Result<Spectrogram, MetricError> {
    Ok(stft(x, spec)?)
}

/// `Y_b(f) = mean_t |w_b(f)^H X(t, f)|`.
pub fn spatial_feature(x: &AudioBuffer, bank: &BeamformerBank) -> Result<SpatialFeature, MetricError> {
    if x.num_channels() != bank.num_channels {
        return Err(MetricError::ChannelMismatch { expected: bank.num_channels, found: x.num_channels() });
    }
    let s = metric_stft(x, bank.spec)?;
    Ok(feature_from_spectrogram(&s, bank))
}

fn feature_from_spectrogram(s: &Spectrogram, bank: &BeamformerBank) -> SpatialFeature {
    let (m, frames, bins) = s.data().dim();
    let data = s.data();
    let beams = bank.num_beams();
    let rows: Vec<Vec<f64>> = (0..bins)
        .into_par_iter()
        .map(|f| {
            (0..beams)
                .map(|b| {
                    let mut acc = 0.0;
                    for t in 0..frames {
                        let mut y = Complex64::new(0.0, 0.0);
                        for c in 0..m {
                            y += bank.weights[[b, f, c]].conj() * data[[c, t, f]];
                        }
                        acc += y.norm();
                    }
                    acc / frames as f64
                })
                .collect()
        })
        .collect();
    let values = Array2::from_shape_vec((bins, beams), rows.into_iter().flatten().collect()).expect("bins x beams");
    SpatialFeature { values }
}

/// Mean over frequency of the cosine similarity between beam-magnitude
/// vectors. Frequencies where either vector has zero norm are skipped.
pub fn feature_similarity(a: &SpatialFeature, b: &SpatialFeature) -> Result<f64, MetricError> {
    if a.values.dim() != b.values.dim() {
        return Err(MetricError::InvalidParams(format!(
            "feature shapes differ: {:?} vs {:?}",
            a.values.dim(),
            b.values.dim()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (ra, rb) in a.values.outer_iter().zip(b.values.outer_iter()) {
        let na: f64 = ra.iter().map(|v| v * v).sum();
        let nb: f64 = rb.iter().map(|v| v * v).sum();
        if na > 0.0 && nb > 0.0 {
            let dot: f64 = ra.iter().zip(rb.iter()).map(|(p, q)| p * q).sum();
            total += dot / (na.sqrt() * nb.sqrt());
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricError::NoValidBins);
    }
    Ok(total / count as f64)
}

fn check_durations(x: &AudioBuffer, y: &AudioBuffer, tolerance: usize) -> Result<(), MetricError> {
    if x.len().abs_diff(y.len()) > tolerance {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if x.num_channels() != y.num_channels() {
        return Err(MetricError::ChannelMismatch { expected: x.num_channels(), found: y.num_channels() });
    }
    Ok(())
}

/// Spatial similarity of two renderings; durations may differ by up to one
/// metric frame.
pub fn spatial_similarity(x: &AudioBuffer, y: &AudioBuffer, bank: &BeamformerBank) -> Result<f64, MetricError> {
    check_durations(x, y, bank.spec.fft_size())?;
    feature_similarity(&spatial_feature(x, bank)?, &spatial_feature(y, bank)?)
}

/// Angle in radians between two RTF vectors, `arccos Re(b^H a / (|b||a|))`.
pub fn rtf_angle(a: &[Complex64], b: &[Complex64]) -> f64 {
    let dot: Complex64 = a.iter().zip(b).map(|(p, q)| q.conj() * p).sum();
    let na: f64 = a.iter().map(|v| v.norm_sqr()).sum();
    let nb: f64 = b.iter().map(|v| v.norm_sqr()).sum();
    (dot.re / (na * nb).sqrt()).clamp(-1.0, 1.0).acos()
}

/// Mean RTF angle over frequencies that are not silent in either signal.
pub fn rtf_error(x: &AudioBuffer, y: &AudioBuffer, reference: usize) -> Result<f64, MetricError> {
    let spec = WindowSpec::metric();
    check_durations(x, y, spec.fft_size())?;
    let a = rtf_extract(&metric_stft(x, spec)?, reference)?;
    let b = rtf_extract(&metric_stft(y, spec)?, reference)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for f in 0..a.values.nrows() {
        if a.status[f] == RtfBin::Silent || b.status[f] == RtfBin::Silent {
            continue;
        }
        let ra: Vec<Complex64> = a.values.row(f).to_vec();
        let rb: Vec<Complex64> = b.values.row(f).to_vec();
        total += rtf_angle(&ra, &rb);
        count += 1;
    }
    if count == 0 {
        return Err(MetricError::NoValidBins);
    }
    Ok(total / count as f64)
}

/// Frequency-averaged MUSIC pseudospectrum on a grid of directions.
#[derive(Debug, Clone)]
pub struct MusicSpectrum {
    /// Grid directions in degrees.
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl MusicSpectrum {
    /// Grid direction with the largest value; lowest angle wins ties.
    pub fn peak(&self) -> f64 {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        self.grid[best]
    }
}

fn direction_grid(step: f64) -> Result<Vec<f64>, MetricError> {
    if !(step > 0.0 && step <= 180.0) {
        return Err(MetricError::InvalidParams(format!("grid step {step} must be in (0, 180]")));
    }
    let n = (180.0 / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| i as f64 * step).collect())
}

/// Pseudospectrum `1 / |E_n^H d(theta)|^2` of one covariance, normalised to a
/// maximum of one.
pub fn music_bin_spectrum(cov: &CMatrix, coords: &[f64], freq: f64, grid_deg: &[f64]) -> Vec<f64> {
    let (_, vectors) = hermitian_eigen(cov);
    let m = coords.len();
    let raw: Vec<f64> = grid_deg
        .iter()
        .map(|deg| {
            let d = steering(coords, freq, deg.to_radians().cos(), SPEED_OF_SOUND);
            let mut proj = 0.0;
            for k in 1..m {
                proj += vectors.column(k).dotc(&d).norm_sqr();
            }
            1.0 / proj.max(1e-300)
        })
        .collect();
    let peak = raw.iter().cloned().fold(0.0, f64::max);
    raw.into_iter().map(|v| v / peak).collect()
}

/// MUSIC over the 300-3500 Hz bins of a spectrogram.
pub fn music_spectrum(s: &Spectrogram, array: &ArrayGeometry, grid_step: f64) -> Result<MusicSpectrum, MetricError> {
    let (m, frames, bins) = s.data().dim();
    if m != array.num_mics() {
        return Err(MetricError::ChannelMismatch { expected: array.num_mics(), found: m });
    }
    if frames < m {
        return Err(MetricError::TooFewFrames { frames, channels: m });
    }
    let grid = direction_grid(grid_step)?;
    let coords = array.axis_coordinates();
    let spec = s.spec();
    let data = s.data();
    let used: Vec<usize> = (0..bins)
        .filter(|&f| {
            let hz = spec.bin_frequency(f, s.sample_rate());
            hz >= MUSIC_BAND_HZ.0 && hz <= MUSIC_BAND_HZ.1
        })
        .collect();
    let spectra: Vec<Option<Vec<f64>>> = used
        .par_iter()
        .map(|&f| {
            let mut r = CMatrix::zeros(m, m);
            for t in 0..frames {
                for i in 0..m {
                    let xi = data[[i, t, f]];
                    for j in 0..m {
                        r[(i, j)] += xi * data[[j, t, f]].conj();
                    }
                }
            }
            if (0..m).all(|i| r[(i, i)].re == 0.0) {
                return None;
            }
            let r = r / Complex64::new(frames as f64, 0.0);
            Some(music_bin_spectrum(&r, &coords, spec.bin_frequency(f, s.sample_rate()), &grid))
        })
        .collect();
    let mut values = vec![0.0; grid.len()];
    let mut count = 0usize;
    for sp in spectra.into_iter().flatten() {
        for (v, p) in values.iter_mut().zip(sp) {
            *v += p;
        }
        count += 1;
    }
    if count == 0 {
        return Err(MetricError::NoValidBins);
    }
    values.iter_mut().for_each(|v| *v /= count as f64);
    Ok(MusicSpectrum { grid, values })
}

/// Estimated direction of the dominant source, in degrees.
pub fn music_doa(x: &AudioBuffer, array: &ArrayGeometry, grid_step: f64) -> Result<f64, MetricError> {
    Ok(music_spectrum(&metric_stft(x, WindowSpec::metric())?, array, grid_step)?.peak())
}

pub fn doa_error(estimate: f64, truth: f64) -> f64 {
    (estimate - truth).abs()
}

/// Mean over channels of `10 log10(|x|^2 / |x - y|^2)`, capped at 100 dB.
pub fn snr(x: &AudioBuffer, y: &AudioBuffer) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if x.num_channels() != y.num_channels() {
        return Err(MetricError::ChannelMismatch { expected: x.num_channels(), found: y.num_channels() });
    }
    let mut total = 0.0;
    for c in 0..x.num_channels() {
        let (a, b) = (x.channel(c), y.channel(c));
        let energy: f64 = a.iter().map(|v| v * v).sum();
        if energy == 0.0 {
            return Err(MetricError::ZeroReference(c));
        }
        let err: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
        total += if err < 1e-20 * energy { SNR_CLAMP_DB } else { (10.0 * (energy / err).log10()).min(SNR_CLAMP_DB) };
    }
    Ok(total / x.num_channels() as f64)
}

/// Superdirective beam towards `theta_deg`, applied on the metric STFT and
/// resynthesised to one channel of the input length.
pub fn beamform_to(x: &AudioBuffer, theta_deg: f64, array: &ArrayGeometry) -> Result<AudioBuffer, MetricError> {
    if !(0.0..=180.0).contains(&theta_deg) {
        return Err(MetricError::InvalidParams(format!("direction {theta_deg} outside [0, 180]")));
    }
    if x.num_channels() != array.num_mics() {
        return Err(MetricError::ChannelMismatch { expected: array.num_mics(), found: x.num_channels() });
    }
    let spec = WindowSpec::metric();
    let s = metric_stft(x, spec)?;
    let (m, frames, bins) = s.data().dim();
    let coords = array.axis_coordinates();
    let cos = theta_deg.to_radians().cos();
    let mut out = Spectrogram::zeros(spec, x.sample_rate(), x.len(), 1);
    for f in 0..bins {
        let freq = spec.bin_frequency(f, x.sample_rate());
        let gamma = loaded_coherence(array.positions(), freq, DEFAULT_DIAGONAL_LOADING, SPEED_OF_SOUND);
        let chol = Cholesky::new(gamma).expect("loaded coherence is positive definite");
        let w = superdirective(&chol, &steering(&coords, freq, cos, SPEED_OF_SOUND));
        for t in 0..frames {
            let mut y = Complex64::new(0.0, 0.0);
            for c in 0..m {
                y += w[c].conj() * s.data()[[c, t, f]];
            }
            out.data_mut()[[0, t, f]] = y;
        }
    }
    Ok(istft(&out)?)
}

pub fn beamformed_snr(x: &AudioBuffer, y: &AudioBuffer, theta_deg: f64, array: &ArrayGeometry) -> Result<f64, MetricError> {
    snr(&beamform_to(x, theta_deg, array)?, &beamform_to(y, theta_deg, array)?)
}

/// Shared evaluation setup for one array.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub array: ArrayGeometry,
    pub bank: BeamformerBank,
    pub grid_step: f64,
}

impl Evaluator {
    pub fn new(array: ArrayGeometry, sample_rate: u32) -> Result<Self, MetricError> {
        let bank = BeamformerBank::standard(&array, sample_rate)?;
        Ok(Self { array, bank, grid_step: 1.0 })
    }

    /// Custom beam count, diagonal loading and MUSIC grid step.
    pub fn with_options(
        array: ArrayGeometry,
        sample_rate: u32,
        beams: usize,
        loading: f64,
        grid_step: f64,
    ) -> Result<Self, MetricError> {
        if !(grid_step > 0.0) {
            return Err(MetricError::InvalidParams(format!("grid step {grid_step}")));
        }
        let bank = BeamformerBank::design(&array, beams, loading, WindowSpec::metric(), sample_rate)?;
        Ok(Self { array, bank, grid_step })
    }

    /// Scores `decoded` against `original`. `doa_error` compares the MUSIC
    /// estimates of the two signals; the beamformer points at `direction`
    /// when given and at the original's MUSIC estimate otherwise.
    pub fn evaluate(
        &self,
        id: &str,
        original: &AudioBuffer,
        decoded: &AudioBuffer,
        direction: Option<f64>,
    ) -> Result<MetricRow, MetricError> {
        let doa_x = music_doa(original, &self.array, self.grid_step)?;
        let doa_y = music_doa(decoded, &self.array, self.grid_step)?;
        let theta = direction.unwrap_or(doa_x);
        Ok(MetricRow {
            id: id.to_string(),
            spatial_similarity: spatial_similarity(original, decoded, &self.bank)?,
            rtf_error: rtf_error(original, decoded, self.array.reference())?,
            doa_error: doa_error(doa_y, doa_x),
            snr: snr(original, decoded)?,
            beamformed_snr: beamformed_snr(original, decoded, theta, &self.array)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub spatial_similarity: f64,
    /// Radians.
    pub rtf_error: f64,
    /// Degrees.
    pub doa_error: f64,
    /// dB.
    pub snr: f64,
    /// dB.
    pub beamformed_snr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

pub const REPORT_COLUMNS: [&str; 6] = ["id", "spatial_similarity", "rtf_error", "doa_error", "snr", "beamformed_snr"];

impl MetricReport {
    /// Column means, or `None` for an empty report.
    pub fn mean(&self) -> Option<MetricRow> {
        let n = self.rows.len();
        if n == 0 {
            return None;
        }
        let avg = |f: fn(&MetricRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n as f64;
        Some(MetricRow {
            id: "mean".into(),
            spatial_similarity: avg(|r| r.spatial_similarity),
            rtf_error: avg(|r| r.rtf_error),
            doa_error: avg(|r| r.doa_error),
            snr: avg(|r| r.snr),
            beamformed_snr: avg(|r| r.beamformed_snr),
        })
    }

    /// One row per utterance followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for row in self.rows.iter().chain(self.mean().as_ref()) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                row.id, row.spatial_similarity, row.rtf_error, row.doa_error, row.snr, row.beamformed_snr
            );
        }
        out
    }
}

/// Beam magnitudes at the bins nearest the requested frequencies, as CSV
/// rows `id,freq_hz,beam,theta_deg,value`.
pub fn feature_dump_csv(features: &[(String, SpatialFeature)], bank: &BeamformerBank, freqs_hz: &[f64]) -> String {
    let spec = bank.spec();
    let bin_hz = bank.sample_rate() as f64 / spec.fft_size() as f64;
    let mut out = String::from("id,freq_hz,beam,theta_deg,value\n");
    for (id, feature) in features {
        for &hz in freqs_hz {
            let bin = ((hz / bin_hz).round() as usize).min(feature.num_bins() - 1);
            for (b, theta) in bank.directions().iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{id},{},{},{},{}",
                    bin as f64 * bin_hz,
                    b + 1,
                    theta.to_degrees(),
                    feature.values[[bin, b]]
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rustfft::FftPlanner;

    fn array() -> ArrayGeometry {
        ArrayGeometry::default_array([0.0, 0.0, 0.0])
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    /// Circularly delayed copies of `s`, one per microphone, for a far-field
    /// source at `theta_deg`.
    fn plane_wave(s: &[f64], theta_deg: f64, array: &ArrayGeometry) -> AudioBuffer {
        let n = s.len();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let mut spec: Vec<Complex64> = s.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        fwd.process(&mut spec);
        let cos = theta_deg.to_radians().cos();
        let channels = array
            .axis_coordinates()
            .iter()
            .map(|x| {
                let lead = x * cos / SPEED_OF_SOUND * 16_000.0;
                let mut buf: Vec<Complex64> = spec
                    .iter()
                    .enumerate()
                    .map(|(k, v)| {
                        let kk = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
                        let phase = if 2 * k == n { 0.0 } else { 2.0 * PI * kk * lead / n as f64 };
                        v * Complex64::from_polar(1.0, phase)
                    })
                    .collect();
                inv.process(&mut buf);
                buf.iter().map(|v| v.re / n as f64).collect()
            })
            .collect();
        AudioBuffer::new(channels, 16_000).unwrap()
    }

    #[test]
    fn beam_directions_follow_uniform_cosines() {
        let bank = BeamformerBank::standard(&array(), 16_000).unwrap();
        assert_eq!(bank.num_beams(), 50);
        assert!((bank.directions()[24].to_degrees() - 90.0).abs() < 1e-12);
        for w in bank.directions().windows(2) {
            assert!(((w[0].cos() - w[1].cos()) - 2.0 / 50.0).abs() < 1e-12);
        }
        assert!((bank.directions()[49] - PI).abs() < 1e-12);
    }

    #[test]
    fn weights_are_distortionless() {
        let a = array();
        let bank = BeamformerBank::standard(&a, 16_000).unwrap();
        let coords = a.axis_coordinates();
        let mut worst: f64 = 0.0;
        for b in 0..bank.num_beams() {
            for f in 0..bank.num_bins() {
                let d = steering(&coords, bank.spec().bin_frequency(f, 16_000), bank.directions()[b].cos(), SPEED_OF_SOUND);
                let r = bank.weight(b, f).dotc(&d);
                worst = worst.max((r - Complex64::new(1.0, 0.0)).norm());
            }
        }
        assert!(worst <= 1e-10, "worst {worst}");
    }

    #[test]
    fn heavy_loading_tends_to_delay_and_sum() {
        let a = array();
        let bank = BeamformerBank::design(&a, 10, 1e6, WindowSpec::metric(), 16_000).unwrap();
        let coords = a.axis_coordinates();
        for (b, f) in [(0, 100), (4, 500), (9, 1000)] {
            let d = steering(&coords, bank.spec().bin_frequency(f, 16_000), bank.directions()[b].cos(), SPEED_OF_SOUND);
            let das = &d / Complex64::new(d.norm_squared(), 0.0);
            assert!((bank.weight(b, f) - das).norm() < 1e-3);
        }
        assert!(BeamformerBank::design(&a, 10, 0.0, WindowSpec::metric(), 16_000).is_err());
    }

    #[test]
    fn feature_is_zero_for_silence_and_homogeneous() {
        let a = array();
        let bank = BeamformerBank::standard(&a, 16_000).unwrap();
        let zero = AudioBuffer::zeros(8, 8000, 16_000).unwrap();
        assert!(spatial_feature(&zero, &bank).unwrap().values.iter().all(|v| *v == 0.0));
        let x = plane_wave(&noise(8000, 1), 40.0, &a);
        let f1 = spatial_feature(&x, &bank).unwrap();
        let f2 = spatial_feature(&x.scaled(-2.5), &bank).unwrap();
        for (p, q) in f1.values.iter().zip(f2.values.iter()) {
            assert!((q - 2.5 * p).abs() <= 1e-9 * (1.0 + p.abs()));
        }
        assert!(spatial_feature(&x.select(&[0, 1]).unwrap(), &bank).is_err());
    }

    #[test]
    fn feature_peaks_towards_the_source() {
        let a = array();
        let bank = BeamformerBank::standard(&a, 16_000).unwrap();
        let bin_hz = 16_000.0 / 2048.0;
        for b_true in [10usize, 25, 38] {
            let theta = bank.directions()[b_true - 1].to_degrees();
            let x = plane_wave(&noise(32_000, b_true as u64), theta, &a);
            let feat = spatial_feature(&x, &bank).unwrap();
            for hz in [1000.0_f64, 3000.0] {
                let bin = (hz / bin_hz).round() as usize;
                let row = feat.values.row(bin);
                let arg = (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best }) + 1;
                assert!(arg.abs_diff(b_true) <= 2, "b*={b_true} at {hz} Hz got {arg}");
            }
        }
    }

    #[test]
    fn similarity_identity_scale_and_direction() {
        let a = array();
        let bank = BeamformerBank::standard(&a, 16_000).unwrap();
        let s = noise(24_000, 3);
        let x30 = plane_wave(&s, 30.0, &a);
        assert!((spatial_similarity(&x30, &x30, &bank).unwrap() - 1.0).abs() < 1e-9);
        assert!((spatial_similarity(&x30, &x30.scaled(-0.3), &bank).unwrap() - 1.0).abs() < 1e-9);
        let x120 = plane_wave(&s, 120.0, &a);
        let other30 = plane_wave(&noise(24_000, 4), 30.0, &a);
        let across = spatial_similarity(&x30, &x120, &bank).unwrap();
        let same = spatial_similarity(&x30, &other30, &bank).unwrap();
        assert!(across < same, "across {across} same {same}");
        let zero = AudioBuffer::zeros(8, 24_000, 16_000).unwrap();
        assert!(matches!(spatial_similarity(&zero, &zero, &bank), Err(MetricError::NoValidBins)));
        let short = AudioBuffer::zeros(8, 20_000, 16_000).unwrap();
        assert!(matches!(spatial_similarity(&x30, &short, &bank), Err(MetricError::LengthMismatch(..))));
    }

    #[test]
    fn rtf_angle_examples() {
        let one = Complex64::new(1.0, 0.0);
        let i = Complex64::new(0.0, 1.0);
        assert!((rtf_angle(&[one, one], &[one, i]) - PI / 3.0).abs() < 1e-12);
        assert!(rtf_angle(&[one, i], &[one, i]) < 1e-7);
        assert!((rtf_angle(&[one], &[-one]) - PI).abs() < 1e-12);
    }

    #[test]
    fn rtf_error_of_identical_signals_is_zero() {
        let x = plane_wave(&noise(16_000, 5), 70.0, &array());
        assert!(rtf_error(&x, &x, 0).unwrap() <= 1e-6);
        let e = rtf_error(&x, &plane_wave(&noise(16_000, 5), 150.0, &array()), 0).unwrap();
        assert!(e > 0.1 && e <= PI);
    }

    #[test]
    fn music_on_ideal_rank_one_covariance() {
        let a = array();
        let coords = a.axis_coordinates();
        let grid = direction_grid(1.0).unwrap();
        for (truth, hz) in [(37.0, 900.0), (90.0, 2000.0), (141.0, 3100.0)] {
            let d = steering(&coords, hz, f64::cos(f64::to_radians(truth)), SPEED_OF_SOUND);
            let r = &d * d.adjoint();
            let p = music_bin_spectrum(&r, &coords, hz, &grid);
            let spectrum = MusicSpectrum { grid: grid.clone(), values: p };
            assert_eq!(spectrum.peak(), truth);
        }
    }

    #[test]
    fn music_finds_plane_waves() {
        let a = array();
        for truth in [30.0, 60.0, 90.0, 120.0, 150.0] {
            let x = plane_wave(&noise(16_000, truth as u64), truth, &a);
            let est = music_doa(&x, &a, 1.0).unwrap();
            assert!(doa_error(est, truth) <= 1.0, "truth {truth} est {est}");
        }
        let short = AudioBuffer::zeros(8, 1024, 16_000).unwrap();
        assert!(matches!(music_doa(&short, &a, 1.0), Err(MetricError::TooFewFrames { .. })));
    }

    #[test]
    fn doa_error_is_a_metric_on_the_grid() {
        assert_eq!(doa_error(42.0, 42.0), 0.0);
        for (p, q, r) in [(10.0, 50.0, 170.0), (0.0, 180.0, 90.0)] {
            assert_eq!(doa_error(p, q), doa_error(q, p));
            assert!(doa_error(p, r) <= doa_error(p, q) + doa_error(q, r));
        }
    }

    #[test]
    fn snr_examples() {
        let x = AudioBuffer::new(vec![noise(4000, 6), noise(4000, 7)], 16_000).unwrap();
        assert_eq!(snr(&x, &x).unwrap(), 100.0);
        assert!(snr(&x, &AudioBuffer::zeros(2, 4000, 16_000).unwrap()).unwrap().abs() < 1e-12);
        // noise scaled so each channel has |n|^2 = |x|^2 / 10
        let chans: Vec<Vec<f64>> = x
            .channels()
            .iter()
            .enumerate()
            .map(|(c, ch)| {
                let n = noise(4000, 20 + c as u64);
                let g = (ch.iter().map(|v| v * v).sum::<f64>() / 10.0 / n.iter().map(|v| v * v).sum::<f64>()).sqrt();
                ch.iter().zip(&n).map(|(a, b)| a + g * b).collect()
            })
            .collect();
        let noisy = AudioBuffer::new(chans, 16_000).unwrap();
        assert!((snr(&x, &noisy).unwrap() - 10.0).abs() < 1e-9);
        let zero = AudioBuffer::zeros(2, 4000, 16_000).unwrap();
        assert!(matches!(snr(&zero, &x), Err(MetricError::ZeroReference(0))));
        assert!(snr(&x, &AudioBuffer::zeros(2, 10, 16_000).unwrap()).is_err());
    }

    #[test]
    fn beamformer_recovers_a_plane_wave() {
        let a = array();
        let s = noise(32_000, 8);
        for theta in [20.0, 90.0, 135.0] {
            let x = plane_wave(&s, theta, &a);
            let y = beamform_to(&x, theta, &a).unwrap();
            let src = AudioBuffer::mono(s.clone(), 16_000).unwrap();
            let quality = snr(&src, &y).unwrap();
            assert!(quality >= 20.0, "theta {theta}: {quality} dB");
            assert_eq!(beamformed_snr(&x, &x, theta, &a).unwrap(), 100.0);
        }
        assert!(beamform_to(&AudioBuffer::zeros(8, 100, 16_000).unwrap(), 190.0, &a).is_err());
    }

    #[test]
    fn report_csv_has_rows_and_mean() {
        let row = |id: &str, v: f64| MetricRow {
            id: id.into(),
            spatial_similarity: v,
            rtf_error: v,
            doa_error: v,
            snr: v,
            beamformed_snr: v,
        };
        let report = MetricReport { rows: vec![row("a", 1.0), row("b", 3.0)] };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "id,spatial_similarity,rtf_error,doa_error,snr,beamformed_snr");
        assert_eq!(lines[3], "mean,2,2,2,2,2");
        assert_eq!(lines.len(), 4);
        assert!(MetricReport::default().mean().is_none());
    }

    #[test]
    fn feature_dump_lists_requested_frequencies() {
        let a = array();
        let bank = BeamformerBank::standard(&a, 16_000).unwrap();
        let x = plane_wave(&noise(8000, 9), 60.0, &a);
        let feats = vec![("u1".to_string(), spatial_feature(&x, &bank).unwrap())];
        let csv = feature_dump_csv(&feats, &bank, &[1000.0, 3000.0]);
        assert_eq!(csv.lines().count(), 1 + 2 * 50);
        assert!(csv.lines().nth(1).unwrap().starts_with("u1,1000,1,"));
        assert!(csv.lines().nth(51).unwrap().starts_with("u1,3000,1,"));
    }
}
