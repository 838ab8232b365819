//! Two-branch multichannel codec.
//!
//! Branch one codes the reference channel band by band with residual vector
//! quantization. Branch two estimates complex ratio filters that rebuild every
//! other channel from the reference and codes one filter set per band and
//! block. The decoder reconstructs the reference first and then applies the
//! decoded filters to it, so the reference output never depends on the
//! spatial payload.

mod bitstream;
mod codebooks;
mod reference;
mod spatial_coding;

use thiserror::Error;

use crate::quantizer::QuantizerError;
use crate::signal::{istft, stft, AudioBuffer, SignalError, WindowSpec};
use crate::spatial::{apply_crf, assemble_channels, BandMap, CrfParams, Regularization, SpatialError};

pub use bitstream::{Bitstream, BitstreamHeader, EncodedFrame, RefPayload, SpatialPayload, SCBS_MAGIC, SCBS_VERSION};
pub use codebooks::{
    training_vectors, train_codebooks, CodecCodebooks, ReferenceBand, TrainParams, TrainingVectors, SCCB_MAGIC,
};
pub use reference::{decode_reference, encode_reference, BandProjection};
pub use spatial_coding::{decode_spatial, encode_spatial, SpatialEncoding};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid codec configuration: {0}")]
    InvalidConfig(String),
    #[error("input has {found} channels, expected {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("input sample rate {found} Hz, expected {expected} Hz")]
    SampleRateMismatch { expected: u32, found: u32 },
    #[error("spectrogram has {found} bins, expected {expected}")]
    BinMismatch { expected: usize, found: usize },
    #[error("{0} branch needs codebooks")]
    MissingCodebooks(&'static str),
    #[error("{0} codebook fingerprint does not match the bitstream")]
    FingerprintMismatch(&'static str),
    #[error("codebooks incompatible with configuration: {0}")]
    IncompatibleCodebooks(String),
    #[error("bitstream truncated: {frames_recovered} of {expected} frames complete{}", last_frame(*.frames_recovered))]
    Truncated { frames_recovered: usize, expected: usize },
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn last_frame(recovered: usize) -> String {
    match recovered {
        0 => String::from(" (no complete frame)"),
        n => format!(" (last complete frame {})", n - 1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefMode {
    /// Per-band projection plus RVQ indices.
    SubbandRvq,
    /// Reference spectrum carried losslessly as f64.
    Passthrough,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialMode {
    /// Per-band RVQ indices for each block's filters.
    Rvq,
    /// Least-squares filter taps carried unquantized as f64.
    Bypass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop_size: usize,
    pub bands: usize,
    pub rvq_stages: usize,
    /// Entries per codebook; a power of two.
    pub codebook_size: usize,
    /// CRF time half-width `L`.
    pub time_taps: usize,
    /// CRF frequency half-width `K`.
    pub freq_taps: usize,
    /// Frames sharing one set of filters.
    pub block_len: usize,
    pub ref_mode: RefMode,
    pub spatial_mode: SpatialMode,
    pub reference: usize,
    /// Coded dimension of each reference band vector.
    pub ref_vector_dim: usize,
    pub regularization: Regularization,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            fft_size: 640,
            hop_size: 320,
            bands: 6,
            rvq_stages: 2,
            codebook_size: 1024,
            time_taps: 4,
            freq_taps: 1,
            block_len: 1,
            ref_mode: RefMode::SubbandRvq,
            spatial_mode: SpatialMode::Rvq,
            reference: 0,
            ref_vector_dim: 32,
            regularization: Regularization::default(),
        }
    }
}

impl CodecConfig {
    /// Lossless reference and unquantized filters; needs no codebooks.
    pub fn lossless() -> Self {
        Self { ref_mode: RefMode::Passthrough, spatial_mode: SpatialMode::Bypass, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let bad = |msg: String| Err(CodecError::InvalidConfig(msg));
        let spec = WindowSpec::new(self.fft_size, self.hop_size)?;
        if self.fft_size > u16::MAX as usize {
            return bad(format!("fft size {} too large", self.fft_size));
        }
        if self.sample_rate == 0 {
            return bad("sample rate must be positive".into());
        }
        if !self.codebook_size.is_power_of_two() || !(2..=1 << 16).contains(&self.codebook_size) {
            return bad(format!("codebook size {} must be a power of two in 2..=65536", self.codebook_size));
        }
        if self.rvq_stages == 0 || self.rvq_stages > u8::MAX as usize {
            return bad(format!("rvq stages {} outside 1..=255", self.rvq_stages));
        }
        if self.bands == 0 || self.bands > u8::MAX as usize || self.bands > spec.num_bins() {
            return bad(format!("{} bands for {} bins", self.bands, spec.num_bins()));
        }
        if self.time_taps > u8::MAX as usize || self.freq_taps > u8::MAX as usize {
            return bad("filter half-widths must fit in a byte".into());
        }
        if self.block_len == 0 || self.block_len > u16::MAX as usize {
            return bad(format!("block length {} outside 1..=65535", self.block_len));
        }
        if self.reference > u8::MAX as usize {
            return bad(format!("reference channel {} too large", self.reference));
        }
        let narrowest = self.band_map()?.sizes().into_iter().min().unwrap_or(0);
        if self.ref_vector_dim == 0 || self.ref_vector_dim > u8::MAX as usize || self.ref_vector_dim > 2 * narrowest {
            return bad(format!(
                "reference vector dimension {} outside 1..={}",
                self.ref_vector_dim,
                (2 * narrowest).min(u8::MAX as usize)
            ));
        }
        let lambda = match self.regularization {
            Regularization::Absolute(v) | Regularization::TraceRelative(v) => v,
        };
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return bad(format!("regularization {lambda} must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn window_spec(&self) -> Result<WindowSpec, CodecError> {
        Ok(WindowSpec::new(self.fft_size, self.hop_size)?)
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn band_map(&self) -> Result<BandMap, CodecError> {
        Ok(BandMap::even(self.num_bins(), self.bands)?)
    }

    pub fn crf_params(&self) -> Result<CrfParams, CodecError> {
        Ok(CrfParams {
            time_taps: self.time_taps,
            freq_taps: self.freq_taps,
            block_len: self.block_len,
            bands: self.band_map()?,
            regularization: self.regularization,
        })
    }

    pub fn taps_per_filter(&self) -> usize {
        (2 * self.time_taps + 1) * (2 * self.freq_taps + 1)
    }

    pub fn index_bits(&self) -> usize {
        self.codebook_size.trailing_zeros() as usize
    }

    pub fn frames_per_second(&self) -> f64 {
        self.sample_rate as f64 / self.hop_size as f64
    }

    /// Bits in one frame's reference section (indices mode, before byte padding).
    pub fn reference_index_bits(&self) -> usize {
        self.bands * self.rvq_stages * self.index_bits()
    }

    /// Bits in one block's spatial section (indices mode, before byte padding).
    pub fn spatial_index_bits(&self) -> usize {
        self.bands * self.rvq_stages * self.index_bits()
    }

    /// Nominal reference payload rate in bits per second.
    pub fn reference_bps(&self, num_channels: usize) -> f64 {
        self.reference_section_bytes(num_channels) as f64 * 8.0 * self.frames_per_second()
    }

    /// Nominal spatial payload rate in bits per second.
    pub fn spatial_bps(&self, num_channels: usize) -> f64 {
        self.spatial_section_bytes(num_channels) as f64 * 8.0 * self.frames_per_second() / self.block_len as f64
    }

    pub(crate) fn reference_section_bytes(&self, _num_channels: usize) -> usize {
        match self.ref_mode {
            RefMode::SubbandRvq => self.reference_index_bits().div_ceil(8),
            RefMode::Passthrough => self.num_bins() * 16,
        }
    }

    pub(crate) fn spatial_section_bytes(&self, num_channels: usize) -> usize {
        match self.spatial_mode {
            SpatialMode::Rvq => self.spatial_index_bits().div_ceil(8),
            SpatialMode::Bypass => num_channels.saturating_sub(1) * self.bands * self.taps_per_filter() * 16,
        }
    }
}

/// Payload accounting for one bitstream. Rates are measured over the coded
/// frame span, `frames * hop / sample_rate` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub frames: usize,
    pub header_bytes: usize,
    pub reference_bytes: usize,
    pub spatial_bytes: usize,
    pub duration_secs: f64,
    pub reference_bps: f64,
    pub spatial_bps: f64,
}

impl RateReport {
    pub fn payload_bps(&self) -> f64 {
        self.reference_bps + self.spatial_bps
    }

    pub fn payload_kbps(&self) -> f64 {
        self.payload_bps() / 1000.0
    }
}

/// Encodes an `M`-channel signal. Codebooks are only consulted by the
/// quantized modes and may be `None` for passthrough plus bypass.
pub fn encode(
    x: &AudioBuffer,
    config: &CodecConfig,
    codebooks: Option<&CodecCodebooks>,
) -> Result<Bitstream, CodecError> {
    config.validate()?;
    if x.sample_rate() != config.sample_rate {
        return Err(CodecError::SampleRateMismatch { expected: config.sample_rate, found: x.sample_rate() });
    }
    let m = x.num_channels();
    if m < 2 {
        return Err(SpatialError::TooFewChannels(m).into());
    }
    if config.reference >= m {
        return Err(SpatialError::ReferenceOutOfRange { reference: config.reference, channels: m }.into());
    }
    let ref_books = match config.ref_mode {
        RefMode::SubbandRvq => Some(codebooks.ok_or(CodecError::MissingCodebooks("reference"))?),
        RefMode::Passthrough => None,
    };
    let spatial_books = match config.spatial_mode {
        SpatialMode::Rvq => Some(codebooks.ok_or(CodecError::MissingCodebooks("spatial"))?),
        SpatialMode::Bypass => None,
    };
    for books in ref_books.iter().chain(spatial_books.iter()) {
        books.check_compatible(config, m)?;
    }

    let spec = stft(x, config.window_spec()?)?;
    let xref = spec.select(&[config.reference])?;
    let reference = encode_reference(&xref, config, ref_books)?;
    let spatial = encode_spatial(&spec, config, spatial_books)?.payloads;

    let mut frames: Vec<EncodedFrame> = reference
        .into_iter()
        .map(|r| EncodedFrame { reference: r, spatial: None })
        .collect();
    for (block, payload) in spatial.into_iter().enumerate() {
        frames[block * config.block_len].spatial = Some(payload);
    }
    let header = BitstreamHeader {
        num_channels: m,
        sample_rate: config.sample_rate,
        config: config.clone(),
        signal_len: x.len(),
        ref_fingerprint: ref_books.map(|b| b.reference_fingerprint()).unwrap_or_default(),
        spatial_fingerprint: spatial_books.map(|b| b.spatial_fingerprint()).unwrap_or_default(),
        num_frames: spec.num_frames(),
    };
    Ok(Bitstream { header, frames })
}

/// Decodes a bitstream back to `M` channels of the original length.
pub fn decode(bs: &Bitstream, codebooks: Option<&CodecCodebooks>) -> Result<AudioBuffer, CodecError> {
    let h = &bs.header;
    let config = &h.config;
    config.validate()?;
    let ref_books = if config.ref_mode == RefMode::SubbandRvq {
        let books = codebooks.ok_or(CodecError::MissingCodebooks("reference"))?;
        if books.reference_fingerprint() != h.ref_fingerprint {
            return Err(CodecError::FingerprintMismatch("reference"));
        }
        books.check_compatible(config, h.num_channels)?;
        Some(books)
    } else {
        None
    };
    let spatial_books = if config.spatial_mode == SpatialMode::Rvq {
        let books = codebooks.ok_or(CodecError::MissingCodebooks("spatial"))?;
        if books.spatial_fingerprint() != h.spatial_fingerprint {
            return Err(CodecError::FingerprintMismatch("spatial"));
        }
        books.check_compatible(config, h.num_channels)?;
        Some(books)
    } else {
        None
    };
    bs.check_consistent()?;

    let refs: Vec<RefPayload> = bs.frames.iter().map(|f| f.reference.clone()).collect();
    let xref = decode_reference(&refs, config, ref_books, h.signal_len)?;
    let blocks: Vec<SpatialPayload> = bs.frames.iter().filter_map(|f| f.spatial.clone()).collect();
    let crf = decode_spatial(&blocks, config, spatial_books, h.num_channels, h.num_frames)?;
    let synthesized = apply_crf(&crf, &xref)?;
    let full = assemble_channels(&xref, &synthesized, crf.targets(), config.reference)?;
    Ok(istft(&full)?)
}

#[cfg(test)]
mod tests;
