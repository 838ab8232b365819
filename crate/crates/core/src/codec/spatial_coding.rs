//! Spatial branch: least-squares filters per (band, block), coded as one
//! real vector per band per block.
//!
//! Vector layout for a band: for each filtered channel in ascending order,
//! the real parts of its taps in `(l, k)` row-major order followed by the
//! imaginary parts.

use num_complex::Complex64;
use rayon::prelude::*;

use super::{CodecCodebooks, CodecConfig, CodecError, SpatialMode, SpatialPayload};
use crate::spatial::{estimate_crf, BlockBand, CrfTensor};
use crate::signal::Spectrogram;

/// Spatial payloads, one per block, with the filters they were coded from.
#[derive(Debug, Clone)]
pub struct SpatialEncoding {
    pub payloads: Vec<SpatialPayload>,
    /// Unquantized least-squares filters.
    pub estimate: CrfTensor,
    pub degenerate: Vec<BlockBand>,
}

pub(crate) fn band_filter_vector(crf: &CrfTensor, block: usize, band: usize) -> Vec<f64> {
    let taps = crf.taps();
    let (channels, _, _, lt, kt) = taps.dim();
    let mut v = Vec::with_capacity(channels * 2 * lt * kt);
    for c in 0..channels {
        for l in 0..lt {
            for k in 0..kt {
                v.push(taps[[c, block, band, l, k]].re);
            }
        }
        for l in 0..lt {
            for k in 0..kt {
                v.push(taps[[c, block, band, l, k]].im);
            }
        }
    }
    v
}

fn set_band_filter(crf: &mut CrfTensor, block: usize, band: usize, v: &[f64]) {
    let (channels, _, _, lt, kt) = crf.taps().dim();
    let per = lt * kt;
    let taps = crf.taps_mut();
    for c in 0..channels {
        let base = c * 2 * per;
        for i in 0..per {
            taps[[c, block, band, i / kt, i % kt]] = Complex64::new(v[base + i], v[base + per + i]);
        }
    }
}

/// Estimates and codes the filters of an `M`-channel spectrogram.
pub fn encode_spatial(
    x: &Spectrogram,
    config: &CodecConfig,
    codebooks: Option<&CodecCodebooks>,
) -> Result<SpatialEncoding, CodecError> {
    if x.num_bins() != config.num_bins() {
        return Err(CodecError::BinMismatch { expected: config.num_bins(), found: x.num_bins() });
    }
    let fit = estimate_crf(x, config.reference, &config.crf_params()?)?;
    let crf = fit.crf;
    let blocks = crf.num_blocks();
    let payloads = match config.spatial_mode {
        SpatialMode::Bypass => {
            let taps = crf.taps();
            (0..blocks)
                .map(|block| {
                    let mut raw = Vec::new();
                    for c in 0..crf.targets().len() {
                        for band in 0..config.bands {
                            raw.extend(taps.slice(ndarray::s![c, block, band, .., ..]).iter().copied());
                        }
                    }
                    SpatialPayload::Raw(raw)
                })
                .collect()
        }
        SpatialMode::Rvq => {
            let books = codebooks.ok_or(CodecError::MissingCodebooks("spatial"))?;
            let coders = books.spatial_coders();
            (0..blocks)
                .into_par_iter()
                .map(|block| {
                    let mut indices = Vec::with_capacity(config.bands * config.rvq_stages);
                    for (band, coder) in coders.iter().enumerate() {
                        indices.extend(coder.encode(&band_filter_vector(&crf, block, band))?);
                    }
                    Ok(SpatialPayload::Indices(indices))
                })
                .collect::<Result<Vec<_>, CodecError>>()?
        }
    };
    Ok(SpatialEncoding { payloads, estimate: crf, degenerate: fit.degenerate })
}

/// Rebuilds the filter tensor from per-block payloads.
pub fn decode_spatial(
    payloads: &[SpatialPayload],
    config: &CodecConfig,
    codebooks: Option<&CodecCodebooks>,
    num_channels: usize,
    num_frames: usize,
) -> Result<CrfTensor, CodecError> {
    let params = config.crf_params()?;
    let targets: Vec<usize> = (0..num_channels).filter(|&c| c != config.reference).collect();
    let mut crf = CrfTensor::zeros(&params, num_frames, targets, config.reference);
    if payloads.len() != crf.num_blocks() {
        return Err(CodecError::Format(format!("{} spatial blocks for {} expected", payloads.len(), crf.num_blocks())));
    }
    let per = config.taps_per_filter();
    let kt = 2 * config.freq_taps + 1;
    let channels = crf.targets().len();
    let stages = config.rvq_stages;
    for (block, payload) in payloads.iter().enumerate() {
        match payload {
            SpatialPayload::Raw(raw) => {
                if raw.len() != channels * config.bands * per {
                    return Err(CodecError::Format(format!("{} raw taps in block {block}", raw.len())));
                }
                let taps = crf.taps_mut();
                for (i, v) in raw.iter().enumerate() {
                    let c = i / (config.bands * per);
                    let band = (i / per) % config.bands;
                    let j = i % per;
                    taps[[c, block, band, j / kt, j % kt]] = *v;
                }
            }
            SpatialPayload::Indices(indices) => {
                let books = codebooks.ok_or(CodecError::MissingCodebooks("spatial"))?;
                if indices.len() != config.bands * stages {
                    return Err(CodecError::Format(format!("{} spatial indices in block {block}", indices.len())));
                }
                for (band, coder) in books.spatial_coders().iter().enumerate() {
                    let v = coder.decode(&indices[band * stages..(band + 1) * stages])?;
                    set_band_filter(&mut crf, block, band, &v);
                }
            }
        }
    }
    Ok(crf)
}
