//! Spatial covariance, relative transfer functions and complex ratio filters.
//!
//! A complex ratio filter (CRF) maps a neighbourhood of reference-channel
//! time-frequency bins onto one bin of another channel:
//!
//! ```text
//! X_m(t, f) ~ sum_{l=-L..L} sum_{k=-K..K} W_m(t, f, l, k) X_ref(t + l, f + k)
//! ```
//!
//! Filters are estimated per (band, block of frames) by Tikhonov-regularised
//! least squares, with reference bins outside the grid treated as zero.

use ndarray::{s, Array2, Array3, Array4, Array5, ArrayView2};
use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{hermitian_eigen, trace_re, CMatrix, CVector};
use crate::signal::{SignalError, Spectrogram};

#[derive(Debug, Error)]
pub enum SpatialError {
    #[error("at least two channels are required, got {0}")]
    TooFewChannels(usize),
    #[error("reference channel {reference} out of range for {channels} channels")]
    ReferenceOutOfRange { reference: usize, channels: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

fn check_multichannel(x: &Spectrogram, reference: usize) -> Result<(), SpatialError> {
    let m = x.num_channels();
    if m < 2 {
        return Err(SpatialError::TooFewChannels(m));
    }
    if reference >= m {
        return Err(SpatialError::ReferenceOutOfRange { reference, channels: m });
    }
    Ok(())
}

/// Per-bin outer products `X(t,f) X(t,f)^H`, laid out `(t, f, i, j)`.
#[derive(Debug, Clone)]
pub struct SpatialCovariance {
    values: Array4<Complex64>,
}

impl SpatialCovariance {
    pub fn bin(&self, t: usize, f: usize) -> ArrayView2<'_, Complex64> {
        self.values.slice(s![t, f, .., ..])
    }

    /// `(frames, bins, channels)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let (t, f, m, _) = self.values.dim();
        (t, f, m)
    }

    pub fn values(&self) -> &Array4<Complex64> {
        &self.values
    }
}

pub fn covariance(x: &Spectrogram) -> Result<SpatialCovariance, SpatialError> {
    check_multichannel(x, 0)?;
    let (m, frames, bins) = x.data().dim();
    let data = x.data();
    let values = Array4::from_shape_fn((frames, bins, m, m), |(t, f, i, j)| {
        data[[i, t, f]] * data[[j, t, f]].conj()
    });
    Ok(SpatialCovariance { values })
}

/// Real feature of length `2(M^2 + 1)` per bin: row-major real parts of the
/// covariance, row-major imaginary parts, then the real and imaginary part of
/// the reference bin. Laid out `(t, f, feature)`.
pub fn input_feature(x: &Spectrogram, reference: usize) -> Result<Array3<f64>, SpatialError> {
    check_multichannel(x, reference)?;
    let (m, frames, bins) = x.data().dim();
    let data = x.data();
    let len = 2 * (m * m + 1);
    let mut out = Array3::zeros((frames, bins, len));
    for t in 0..frames {
        for f in 0..bins {
            for i in 0..m {
                for j in 0..m {
                    let v = data[[i, t, f]] * data[[j, t, f]].conj();
                    out[[t, f, i * m + j]] = v.re;
                    out[[t, f, m * m + i * m + j]] = v.im;
                }
            }
            out[[t, f, 2 * m * m]] = data[[reference, t, f]].re;
            out[[t, f, 2 * m * m + 1]] = data[[reference, t, f]].im;
        }
    }
    Ok(out)
}

/// Contiguous partition of the frequency bins into bands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandMap {
    /// `bounds[b]..bounds[b + 1]` is band `b`.
    bounds: Vec<usize>,
    lookup: Vec<usize>,
}

impl BandMap {
    pub fn from_sizes(sizes: &[usize]) -> Result<Self, SpatialError> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(SpatialError::InvalidParams("bands must be non-empty".into()));
        }
        let mut bounds = vec![0];
        let mut lookup = Vec::new();
        for (b, size) in sizes.iter().enumerate() {
            bounds.push(bounds[b] + size);
            lookup.extend(std::iter::repeat_n(b, *size));
        }
        Ok(Self { bounds, lookup })
    }

    /// `bands` contiguous bands, the first `bins % bands` one bin wider.
    /// 321 bins in 6 bands gives sizes 54, 54, 54, 53, 53, 53.
    pub fn even(bins: usize, bands: usize) -> Result<Self, SpatialError> {
        if bands == 0 || bands > bins {
            return Err(SpatialError::InvalidParams(format!("cannot split {bins} bins into {bands} bands")));
        }
        let base = bins / bands;
        let extra = bins % bands;
        let sizes: Vec<usize> = (0..bands).map(|b| base + usize::from(b < extra)).collect();
        Self::from_sizes(&sizes)
    }

    pub fn num_bands(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn num_bins(&self) -> usize {
        *self.bounds.last().unwrap()
    }

    pub fn range(&self, band: usize) -> std::ops::Range<usize> {
        self.bounds[band]..self.bounds[band + 1]
    }

    pub fn band_of(&self, bin: usize) -> usize {
        self.lookup[bin]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.bounds.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Ridge term added to the normal equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularization {
    Absolute(f64),
    /// Multiple of `trace(A) / dim` for each block's normal matrix `A`.
    TraceRelative(f64),
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::TraceRelative(1e-3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    /// Time half-width `L`.
    pub time_taps: usize,
    /// Frequency half-width `K`.
    pub freq_taps: usize,
    pub block_len: usize,
    pub bands: BandMap,
    pub regularization: Regularization,
}

impl CrfParams {
    /// L = 4, K = 1, 50-frame blocks, six bands, ridge 1e-3 trace/dim.
    pub fn new(num_bins: usize) -> Result<Self, SpatialError> {
        Ok(Self {
            time_taps: 4,
            freq_taps: 1,
            block_len: 50,
            bands: BandMap::even(num_bins, 6)?,
            regularization: Regularization::default(),
        })
    }

    pub fn taps_per_filter(&self) -> usize {
        (2 * self.time_taps + 1) * (2 * self.freq_taps + 1)
    }

    fn validate(&self) -> Result<(), SpatialError> {
        if self.block_len == 0 {
            return Err(SpatialError::InvalidParams("block_len must be at least 1".into()));
        }
        let lambda = match self.regularization {
            Regularization::Absolute(v) | Regularization::TraceRelative(v) => v,
        };
        if !(lambda >= 0.0) {
            return Err(SpatialError::InvalidParams(format!("regularization {lambda} must be >= 0")));
        }
        Ok(())
    }
}

/// Filter taps indexed `(channel, block, band, l + L, k + K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfTensor {
    taps: Array5<Complex64>,
    time_taps: usize,
    freq_taps: usize,
    block_len: usize,
    bands: BandMap,
    num_frames: usize,
    /// Original channel index of each filtered channel.
    targets: Vec<usize>,
    reference: usize,
}

impl CrfTensor {
    pub fn zeros(
        params: &CrfParams,
        num_frames: usize,
        targets: Vec<usize>,
        reference: usize,
    ) -> Self {
        let blocks = num_frames.div_ceil(params.block_len);
        let shape = (
            targets.len(),
            blocks,
            params.bands.num_bands(),
            2 * params.time_taps + 1,
            2 * params.freq_taps + 1,
        );
        Self {
            taps: Array5::zeros(shape),
            time_taps: params.time_taps,
            freq_taps: params.freq_taps,
            block_len: params.block_len,
            bands: params.bands.clone(),
            num_frames,
            targets,
            reference,
        }
    }

    /// Every filter passes its reference bin unchanged.
    pub fn identity(params: &CrfParams, num_frames: usize, targets: Vec<usize>, reference: usize) -> Self {
        let mut crf = Self::zeros(params, num_frames, targets, reference);
        let (l, k) = (params.time_taps, params.freq_taps);
        crf.taps.slice_mut(s![.., .., .., l, k]).fill(Complex64::new(1.0, 0.0));
        crf
    }

    pub fn taps(&self) -> &Array5<Complex64> {
        &self.taps
    }

    pub fn taps_mut(&mut self) -> &mut Array5<Complex64> {
        &mut self.taps
    }

    pub fn num_blocks(&self) -> usize {
        self.taps.dim().1
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn bands(&self) -> &BandMap {
        &self.bands
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn time_taps(&self) -> usize {
        self.time_taps
    }

    pub fn freq_taps(&self) -> usize {
        self.freq_taps
    }

    /// Tap value for `l` in `-L..=L` and `k` in `-K..=K`.
    pub fn tap(&self, channel: usize, block: usize, band: usize, l: isize, k: isize) -> Complex64 {
        self.taps[[
            channel,
            block,
            band,
            (l + self.time_taps as isize) as usize,
            (k + self.freq_taps as isize) as usize,
        ]]
    }

    pub fn is_finite(&self) -> bool {
        self.taps.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

/// Identifies one least-squares problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockBand {
    pub block: usize,
    pub band: usize,
}

/// Estimated filters plus the blocks whose normal matrix was singular with
/// zero regularisation (solved with the fallback ridge instead).
#[derive(Debug, Clone)]
pub struct CrfFit {
    pub crf: CrfTensor,
    pub degenerate: Vec<BlockBand>,
}

/// Reference neighbourhood of `(t, f)` in `(l, k)` row-major order,
/// zero outside the grid.
fn neighbourhood(xref: &ArrayView2<'_, Complex64>, t: usize, f: usize, lw: usize, kw: usize, out: &mut [Complex64]) {
    let (frames, bins) = xref.dim();
    let mut i = 0;
    for l in -(lw as isize)..=lw as isize {
        for k in -(kw as isize)..=kw as isize {
            let tt = t as isize + l;
            let ff = f as isize + k;
            out[i] = if tt >= 0 && (tt as usize) < frames && ff >= 0 && (ff as usize) < bins {
                xref[[tt as usize, ff as usize]]
            } else {
                Complex64::new(0.0, 0.0)
            };
            i += 1;
        }
    }
}

/// Least-squares CRFs mapping channel `reference` onto every other channel.
pub fn estimate_crf(x: &Spectrogram, reference: usize, params: &CrfParams) -> Result<CrfFit, SpatialError> {
    check_multichannel(x, reference)?;
    params.validate()?;
    let (m, frames, bins) = x.data().dim();
    if params.bands.num_bins() != bins {
        return Err(SpatialError::ShapeMismatch(format!(
            "band map covers {} bins, spectrogram has {bins}",
            params.bands.num_bins()
        )));
    }
    let targets: Vec<usize> = (0..m).filter(|&c| c != reference).collect();
    let mut crf = CrfTensor::zeros(params, frames, targets.clone(), reference);
    let dim = params.taps_per_filter();
    let xref = x.channel(reference);
    let data = x.data();
    let (lw, kw) = (params.time_taps, params.freq_taps);

    let jobs: Vec<BlockBand> = (0..crf.num_blocks())
        .flat_map(|block| (0..params.bands.num_bands()).map(move |band| BlockBand { block, band }))
        .collect();

    let solved: Vec<(BlockBand, Vec<CVector>, bool)> = jobs
        .par_iter()
        .map(|&job| {
            let mut a = CMatrix::zeros(dim, dim);
            let mut rhs = vec![CVector::zeros(dim); targets.len()];
            let mut phi = vec![Complex64::new(0.0, 0.0); dim];
            let t_end = ((job.block + 1) * params.block_len).min(frames);
            for t in job.block * params.block_len..t_end {
                for f in params.bands.range(job.band) {
                    neighbourhood(&xref, t, f, lw, kw, &mut phi);
                    for i in 0..dim {
                        let ci = phi[i].conj();
                        for j in 0..dim {
                            a[(i, j)] += ci * phi[j];
                        }
                        for (r, &ch) in rhs.iter_mut().zip(&targets) {
                            r[i] += ci * data[[ch, t, f]];
                        }
                    }
                }
            }
            let trace = trace_re(&a);
            let lambda = match params.regularization {
                Regularization::Absolute(v) => v,
                Regularization::TraceRelative(r) => r * trace / dim as f64,
            };
            let mut degenerate = false;
            let factor = |lam: f64| {
                let mut reg = a.clone();
                for i in 0..dim {
                    reg[(i, i)] += Complex64::new(lam, 0.0);
                }
                nalgebra::Cholesky::new(reg)
            };
            let chol = match factor(lambda) {
                Some(c) => Some(c),
                None => {
                    degenerate = true;
                    let fallback = 1e-6 * trace / dim as f64;
                    if fallback > 0.0 { factor(fallback) } else { None }
                }
            };
            let solutions = match chol {
                Some(c) => rhs.iter().map(|b| c.solve(b)).collect(),
                // silent block: nothing to map
                None => vec![CVector::zeros(dim); targets.len()],
            };
            (job, solutions, degenerate)
        })
        .collect();

    let kdim = 2 * kw + 1;
    let mut degenerate = Vec::new();
    for (job, solutions, flagged) in solved {
        if flagged {
            degenerate.push(job);
        }
        for (c, w) in solutions.iter().enumerate() {
            for (i, v) in w.iter().enumerate() {
                crf.taps[[c, job.block, job.band, i / kdim, i % kdim]] = *v;
            }
        }
    }
    Ok(CrfFit { crf, degenerate })
}

/// Applies every filter of `crf` to the single-channel spectrogram `xref`,
/// returning one output channel per filtered target.
pub fn apply_crf(crf: &CrfTensor, xref: &Spectrogram) -> Result<Spectrogram, SpatialError> {
    if xref.num_channels() != 1 {
        return Err(SpatialError::ShapeMismatch(format!(
            "reference spectrogram must have one channel, got {}",
            xref.num_channels()
        )));
    }
    let frames = xref.num_frames();
    let bins = xref.num_bins();
    if crf.bands.num_bins() != bins || crf.num_frames != frames {
        return Err(SpatialError::ShapeMismatch(format!(
            "filters cover {} frames x {} bins, reference has {frames} x {bins}",
            crf.num_frames,
            crf.bands.num_bins()
        )));
    }
    let view = xref.channel(0);
    let (lw, kw) = (crf.time_taps, crf.freq_taps);
    let outputs = crf.targets.len();
    let mut out = Spectrogram::zeros(xref.spec(), xref.sample_rate(), xref.signal_len(), outputs);
    let mut phi = vec![Complex64::new(0.0, 0.0); (2 * lw + 1) * (2 * kw + 1)];
    let kdim = 2 * kw + 1;
    let data = out.data_mut();
    for t in 0..frames {
        let block = t / crf.block_len;
        for f in 0..bins {
            neighbourhood(&view, t, f, lw, kw, &mut phi);
            let band = crf.bands.band_of(f);
            for c in 0..outputs {
                let mut acc = Complex64::new(0.0, 0.0);
                for (i, v) in phi.iter().enumerate() {
                    acc += crf.taps[[c, block, band, i / kdim, i % kdim]] * v;
                }
                data[[c, t, f]] = acc;
            }
        }
    }
    Ok(out)
}

/// Interleaves a single reference channel with the synthesized channels at
/// their original positions.
pub fn assemble_channels(
    reference: &Spectrogram,
    synthesized: &Spectrogram,
    targets: &[usize],
    reference_index: usize,
) -> Result<Spectrogram, SpatialError> {
    let m = targets.len() + 1;
    if reference.data().dim().1 != synthesized.data().dim().1
        || reference.num_bins() != synthesized.num_bins()
        || synthesized.num_channels() != targets.len()
    {
        return Err(SpatialError::ShapeMismatch("reference and synthesized channels disagree".into()));
    }
    let mut out = Spectrogram::zeros(reference.spec(), reference.sample_rate(), reference.signal_len(), m);
    out.data_mut().slice_mut(s![reference_index, .., ..]).assign(&reference.channel(0));
    for (i, &ch) in targets.iter().enumerate() {
        out.data_mut().slice_mut(s![ch, .., ..]).assign(&synthesized.channel(i));
    }
    Ok(out)
}

/// Per-bin outcome of RTF extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RtfBin {
    Valid,
    /// Reference entry too small; normalised by the largest entry instead.
    ReferenceFallback,
    /// No energy at this frequency; excluded from averages.
    Silent,
}

/// One steering-like vector per frequency, `values[[f, channel]]`, with the
/// reference entry equal to one.
#[derive(Debug, Clone)]
pub struct RelativeTransferFunction {
    pub values: Array2<Complex64>,
    pub status: Vec<RtfBin>,
}

/// Principal eigenvector of `sum_t X(t,f) X(t,f)^H` per frequency, divided
/// by its reference entry.
pub fn rtf_extract(x: &Spectrogram, reference: usize) -> Result<RelativeTransferFunction, SpatialError> {
    check_multichannel(x, reference)?;
    let (m, frames, bins) = x.data().dim();
    let data = x.data();
    let covs: Vec<CMatrix> = (0..bins)
        .map(|f| {
            let mut r = CMatrix::zeros(m, m);
            for t in 0..frames {
                for i in 0..m {
                    let xi = data[[i, t, f]];
                    for j in 0..m {
                        r[(i, j)] += xi * data[[j, t, f]].conj();
                    }
                }
            }
            r
        })
        .collect();
    let max_trace = covs.iter().map(trace_re).fold(0.0, f64::max);

    let per_bin: Vec<(Vec<Complex64>, RtfBin)> = covs
        .par_iter()
        .map(|r| {
            let trace = trace_re(r);
            if trace <= 1e-20 * max_trace || trace == 0.0 {
                return (vec![Complex64::new(0.0, 0.0); m], RtfBin::Silent);
            }
            let (_, vectors) = hermitian_eigen(r);
            let v: Vec<Complex64> = vectors.column(0).iter().copied().collect();
            let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            let (pivot, status) = if v[reference].norm() < 1e-8 * norm {
                let largest = (0..m).max_by(|a, b| v[*a].norm().total_cmp(&v[*b].norm())).unwrap();
                (v[largest], RtfBin::ReferenceFallback)
            } else {
                (v[reference], RtfBin::Valid)
            };
            let mut out: Vec<Complex64> = v.iter().map(|c| c / pivot).collect();
            if status == RtfBin::Valid {
                out[reference] = Complex64::new(1.0, 0.0);
            }
            (out, status)
        })
        .collect();

    let mut values = Array2::zeros((bins, m));
    let mut status = Vec::with_capacity(bins);
    for (f, (v, st)) in per_bin.into_iter().enumerate() {
        for (i, c) in v.into_iter().enumerate() {
            values[[f, i]] = c;
        }
        status.push(st);
    }
    Ok(RelativeTransferFunction { values, status })
}
