//! Reference-channel branch.
//!
//! Each band of each frame is flattened to `[Re X(f) ..., Im X(f) ...]`,
//! projected onto a fixed orthonormal basis of `ref_vector_dim` rows and RVQ
//! coded. The basis holds the leading principal directions of the training
//! band vectors (uncentred), rounded to f32 so it survives serialization
//! unchanged. Because every RVQ stage contains the zero vector and the basis
//! is orthonormal, the decoded band never has more error energy than the
//! input band itself.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;

use super::{CodecCodebooks, CodecConfig, CodecError, RefMode, RefPayload};
use crate::quantizer::{Codebook, RvqCoder};
use crate::signal::Spectrogram;

/// Orthonormal rows mapping a band vector to its coded coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct BandProjection {
    basis: Array2<f32>,
}

impl BandProjection {
    /// Leading `dim` eigenvectors of `sum_i v_i v_i^T`. Each row's largest
    /// component is made positive so the result is reproducible.
    pub fn fit(data: ArrayView2<'_, f64>, dim: usize) -> Result<Self, CodecError> {
        let width = data.ncols();
        if dim == 0 || dim > width {
            return Err(CodecError::InvalidConfig(format!("cannot project {width} dimensions onto {dim}")));
        }
        let mut gram = DMatrix::<f64>::zeros(width, width);
        for row in data.outer_iter() {
            for i in 0..width {
                let a = row[i];
                if a == 0.0 {
                    continue;
                }
                for j in i..width {
                    gram[(i, j)] += a * row[j];
                }
            }
        }
        for i in 0..width {
            for j in 0..i {
                gram[(i, j)] = gram[(j, i)];
            }
        }
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..width).collect();
        order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]).then(a.cmp(b)));
        let mut basis = Array2::<f32>::zeros((dim, width));
        for (r, &c) in order.iter().take(dim).enumerate() {
            let col = eig.eigenvectors.column(c);
            let pivot = (0..width).fold(0, |best, i| if col[i].abs() > col[best].abs() { i } else { best });
            let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..width {
                basis[[r, i]] = (sign * col[i]) as f32;
            }
        }
        Ok(Self { basis })
    }

    pub fn from_basis(basis: Array2<f32>) -> Result<Self, CodecError> {
        if basis.nrows() == 0 || basis.nrows() > basis.ncols() {
            return Err(CodecError::Format(format!("projection of shape {:?}", basis.dim())));
        }
        Ok(Self { basis })
    }

    pub fn basis(&self) -> &Array2<f32> {
        &self.basis
    }

    /// Coded dimension.
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    /// Band vector length, twice the band width.
    pub fn width(&self) -> usize {
        self.basis.ncols()
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.basis
            .outer_iter()
            .map(|row| row.iter().zip(v).map(|(b, x)| f64::from(*b) * x).sum())
            .collect()
    }

    pub fn lift(&self, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.width()];
        for (row, coef) in self.basis.outer_iter().zip(c) {
            for (o, b) in out.iter_mut().zip(row.iter()) {
                *o += coef * f64::from(*b);
            }
        }
        out
    }

    /// Single-stage coder wrapper used for serialization.
    pub(crate) fn to_coder(&self) -> RvqCoder {
        RvqCoder::new(vec![Codebook::new(self.basis.clone()).expect("finite basis")]).expect("one stage")
    }
}

/// `[Re X(t, f) for f in band, Im X(t, f) for f in band]`.
pub(crate) fn band_vector(xref: &ArrayView2<'_, Complex64>, t: usize, range: std::ops::Range<usize>) -> Vec<f64> {
    let mut v = Vec::with_capacity(2 * range.len());
    v.extend(range.clone().map(|f| xref[[t, f]].re));
    v.extend(range.map(|f| xref[[t, f]].im));
    v
}

/// Codes a single-channel reference spectrogram, one payload per frame.
/// Indices are laid out band-major, stage-minor.
pub fn encode_reference(
    xref: &Spectrogram,
    config: &CodecConfig,
    codebooks: Option<&CodecCodebooks>,
) -> Result<Vec<RefPayload>, CodecError> {
    if xref.num_channels() != 1 {
        return Err(CodecError::ChannelMismatch { expected: 1, found: xref.num_channels() });
    }
    if xref.num_bins() != config.num_bins() {
        return Err(CodecError::BinMismatch { expected: config.num_bins(), found: xref.num_bins() });
    }
    let view = xref.channel(0);
    match config.ref_mode {
        RefMode::Passthrough => Ok((0..xref.num_frames()).map(|t| RefPayload::Raw(view.row(t).to_vec())).collect()),
        RefMode::SubbandRvq => {
            let books = codebooks.ok_or(CodecError::MissingCodebooks("reference"))?;
            let bands = config.band_map()?;
            let mut out = Vec::with_capacity(xref.num_frames());
            for t in 0..xref.num_frames() {
                let mut indices = Vec::with_capacity(config.bands * config.rvq_stages);
                for (b, band) in books.reference_bands().iter().enumerate() {
                    let code = band.projection.project(&band_vector(&view, t, bands.range(b)));
                    indices.extend(band.coder.encode(&code)?);
                }
                out.push(RefPayload::Indices(indices));
            }
            Ok(out)
        }
    }
}

/// Rebuilds the reference spectrogram from per-frame payloads.
pub fn decode_reference(
    payloads: &[RefPayload],
    config: &CodecConfig,
    codebooks: Option<&CodecCodebooks>,
    signal_len: usize,
) -> Result<Spectrogram, CodecError> {
    let spec = config.window_spec()?;
    let frames = spec.num_frames(signal_len);
    if payloads.len() != frames {
        return Err(CodecError::Format(format!("{} reference frames for {frames} expected", payloads.len())));
    }
    let bins = config.num_bins();
    let mut out = Spectrogram::zeros(spec, config.sample_rate, signal_len, 1);
    let bands = config.band_map()?;
    let stages = config.rvq_stages;
    for (t, payload) in payloads.iter().enumerate() {
        match payload {
            RefPayload::Raw(values) => {
                if values.len() != bins {
                    return Err(CodecError::BinMismatch { expected: bins, found: values.len() });
                }
                for (f, v) in values.iter().enumerate() {
                    out.data_mut()[[0, t, f]] = *v;
                }
            }
            RefPayload::Indices(indices) => {
                let books = codebooks.ok_or(CodecError::MissingCodebooks("reference"))?;
                if indices.len() != config.bands * stages {
                    return Err(CodecError::Format(format!("{} reference indices per frame", indices.len())));
                }
                for (b, band) in books.reference_bands().iter().enumerate() {
                    let code = band.coder.decode(&indices[b * stages..(b + 1) * stages])?;
                    let v = band.projection.lift(&code);
                    let range = bands.range(b);
                    let width = range.len();
                    for (i, f) in range.enumerate() {
                        out.data_mut()[[0, t, f]] = Complex64::new(v[i], v[width + i]);
                    }
                }
            }
        }
    }
    Ok(out)
}
