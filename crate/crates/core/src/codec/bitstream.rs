//! SCBS bitstream container.
//!
//! Header, all integers little-endian:
//!
//! ```text
//! "SCBS" | version u16 | M u8 | sample rate u32
//! fft u16 | hop u16 | bands u8 | stages u8 | index bits u8 | L u8 | K u8
//! block_len u16 | ref mode u8 | spatial mode u8 | reference u8 | ref dim u8
//! regularization kind u8 | regularization value f64 | signal length u32
//! reference fingerprint [16] | spatial fingerprint [16] | frame count u32
//! ```
//!
//! Each frame then carries its reference section and, on frames where
//! `t % block_len == 0`, a spatial section. Index sections pack indices
//! MSB-first (big-endian bit order) and are zero-padded to a byte boundary.
//! Raw sections hold complex f64 values as `re, im` little-endian pairs.

use num_complex::Complex64;

use super::{CodecConfig, CodecError, RateReport, RefMode, SpatialMode};
use crate::quantizer::Fingerprint;
use crate::spatial::Regularization;

pub const SCBS_MAGIC: &[u8; 4] = b"SCBS";
pub const SCBS_VERSION: u16 = 1;
const HEADER_LEN: usize = 75;

#[derive(Debug, Clone, PartialEq)]
pub enum RefPayload {
    /// `bands * stages` indices, band-major.
    Indices(Vec<usize>),
    /// One value per frequency bin.
    Raw(Vec<Complex64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpatialPayload {
    /// `bands * stages` indices, band-major.
    Indices(Vec<usize>),
    /// Taps ordered `(channel, band, l, k)`.
    Raw(Vec<Complex64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFrame {
    pub reference: RefPayload,
    /// Present on the first frame of every block.
    pub spatial: Option<SpatialPayload>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BitstreamHeader {
    pub num_channels: usize,
    pub sample_rate: u32,
    pub config: CodecConfig,
    pub signal_len: usize,
    /// All zero when the reference branch is passthrough.
    pub ref_fingerprint: Fingerprint,
    /// All zero when the spatial branch is bypassed.
    pub spatial_fingerprint: Fingerprint,
    pub num_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub header: BitstreamHeader,
    pub frames: Vec<EncodedFrame>,
}

struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    nbits: u32,
}

impl BitWriter {
    fn new() -> Self {
        Self { bytes: Vec::new(), acc: 0, nbits: 0 }
    }

    fn push(&mut self, value: usize, bits: usize) {
        self.acc = (self.acc << bits) | value as u64;
        self.nbits += bits as u32;
        while self.nbits >= 8 {
            self.nbits -= 8;
            self.bytes.push((self.acc >> self.nbits) as u8);
        }
        self.acc &= (1u64 << self.nbits) - 1;
    }

    fn finish(mut self) -> Vec<u8> {
        if self.nbits > 0 {
            self.bytes.push((self.acc << (8 - self.nbits)) as u8);
        }
        self.bytes
    }
}

fn unpack(bytes: &[u8], count: usize, bits: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let mut acc = 0u64;
    let mut nbits = 0usize;
    let mut next = bytes.iter();
    for _ in 0..count {
        while nbits < bits {
            acc = (acc << 8) | u64::from(*next.next().expect("section sized by caller"));
            nbits += 8;
        }
        nbits -= bits;
        out.push(((acc >> nbits) & ((1u64 << bits) - 1)) as usize);
    }
    out
}

fn put_complex(out: &mut Vec<u8>, values: &[Complex64]) {
    for v in values {
        out.extend_from_slice(&v.re.to_le_bytes());
        out.extend_from_slice(&v.im.to_le_bytes());
    }
}

fn get_complex(bytes: &[u8]) -> Vec<Complex64> {
    bytes
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
            let im = f64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
            Complex64::new(re, im)
        })
        .collect()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn header(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        self.take(n).ok_or_else(|| CodecError::Format("bitstream header truncated".into()))
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.header(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.header(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.header(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.header(8)?.try_into().expect("8 bytes")))
    }

    fn fingerprint(&mut self) -> Result<Fingerprint, CodecError> {
        Ok(self.header(16)?.try_into().expect("16 bytes"))
    }
}

impl Bitstream {
    /// True when the reference spectrum is carried losslessly.
    pub fn is_lossless_reference(&self) -> bool {
        self.header.config.ref_mode == RefMode::Passthrough
    }

    pub fn header_len() -> usize {
        HEADER_LEN
    }

    pub fn num_blocks(&self) -> usize {
        self.header.num_frames.div_ceil(self.header.config.block_len)
    }

    /// Checks that frame payloads agree with the header.
    pub(crate) fn check_consistent(&self) -> Result<(), CodecError> {
        let h = &self.header;
        let c = &h.config;
        let bad = |msg: String| Err(CodecError::Format(msg));
        if h.num_channels < 2 || c.reference >= h.num_channels {
            return bad(format!("reference {} with {} channels", c.reference, h.num_channels));
        }
        if h.sample_rate != c.sample_rate {
            return bad("header and configuration disagree on sample rate".into());
        }
        let expected_frames = c.window_spec()?.num_frames(h.signal_len);
        if h.num_frames != expected_frames || self.frames.len() != expected_frames {
            return bad(format!(
                "{} frames listed, {} present, {expected_frames} implied by the signal length",
                h.num_frames,
                self.frames.len()
            ));
        }
        let groups = c.bands * c.rvq_stages;
        let raw_taps = (h.num_channels - 1) * c.bands * c.taps_per_filter();
        for (t, frame) in self.frames.iter().enumerate() {
            match (&frame.reference, c.ref_mode) {
                (RefPayload::Indices(ix), RefMode::SubbandRvq) if ix.len() == groups => {
                    if let Some(v) = ix.iter().find(|v| **v >= c.codebook_size) {
                        return bad(format!("reference index {v} out of range in frame {t}"));
                    }
                }
                (RefPayload::Raw(v), RefMode::Passthrough) if v.len() == c.num_bins() => {}
                _ => return bad(format!("reference payload of frame {t} does not match the configuration")),
            }
            match (&frame.spatial, t % c.block_len == 0, c.spatial_mode) {
                (None, false, _) => {}
                (Some(SpatialPayload::Indices(ix)), true, SpatialMode::Rvq) if ix.len() == groups => {
                    if let Some(v) = ix.iter().find(|v| **v >= c.codebook_size) {
                        return bad(format!("spatial index {v} out of range in frame {t}"));
                    }
                }
                (Some(SpatialPayload::Raw(v)), true, SpatialMode::Bypass) if v.len() == raw_taps => {}
                _ => return bad(format!("spatial payload of frame {t} does not match the configuration")),
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CodecError> {
        self.header.config.validate()?;
        self.check_consistent()?;
        let h = &self.header;
        let c = &h.config;
        if h.num_channels > u8::MAX as usize || h.signal_len > u32::MAX as usize || h.num_frames > u32::MAX as usize {
            return Err(CodecError::Format("stream dimensions exceed header field widths".into()));
        }
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(SCBS_MAGIC);
        out.extend_from_slice(&SCBS_VERSION.to_le_bytes());
        out.push(h.num_channels as u8);
        out.extend_from_slice(&h.sample_rate.to_le_bytes());
        out.extend_from_slice(&(c.fft_size as u16).to_le_bytes());
        out.extend_from_slice(&(c.hop_size as u16).to_le_bytes());
        out.push(c.bands as u8);
        out.push(c.rvq_stages as u8);
        out.push(c.index_bits() as u8);
        out.push(c.time_taps as u8);
        out.push(c.freq_taps as u8);
        out.extend_from_slice(&(c.block_len as u16).to_le_bytes());
        out.push(match c.ref_mode {
            RefMode::SubbandRvq => 0,
            RefMode::Passthrough => 1,
        });
        out.push(match c.spatial_mode {
            SpatialMode::Rvq => 0,
            SpatialMode::Bypass => 1,
        });
        out.push(c.reference as u8);
        out.push(c.ref_vector_dim as u8);
        let (kind, value) = match c.regularization {
            Regularization::Absolute(v) => (0u8, v),
            Regularization::TraceRelative(v) => (1u8, v),
        };
        out.push(kind);
        out.extend_from_slice(&value.to_le_bytes());
        out.extend_from_slice(&(h.signal_len as u32).to_le_bytes());
        out.extend_from_slice(&h.ref_fingerprint);
        out.extend_from_slice(&h.spatial_fingerprint);
        out.extend_from_slice(&(h.num_frames as u32).to_le_bytes());
        debug_assert_eq!(out.len(), HEADER_LEN);

        let bits = c.index_bits();
        let pack = |indices: &[usize]| {
            let mut w = BitWriter::new();
            for &i in indices {
                w.push(i, bits);
            }
            w.finish()
        };
        for frame in &self.frames {
            match &frame.reference {
                RefPayload::Indices(ix) => out.extend(pack(ix)),
                RefPayload::Raw(v) => put_complex(&mut out, v),
            }
            match &frame.spatial {
                Some(SpatialPayload::Indices(ix)) => out.extend(pack(ix)),
                Some(SpatialPayload::Raw(v)) => put_complex(&mut out, v),
                None => {}
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.header(4)? != SCBS_MAGIC {
            return Err(CodecError::Format("not an SCBS bitstream".into()));
        }
        let version = cur.u16()?;
        if version != SCBS_VERSION {
            return Err(CodecError::Format(format!("unsupported bitstream version {version}")));
        }
        let num_channels = cur.u8()? as usize;
        let sample_rate = cur.u32()?;
        let fft_size = cur.u16()? as usize;
        let hop_size = cur.u16()? as usize;
        let bands = cur.u8()? as usize;
        let rvq_stages = cur.u8()? as usize;
        let index_bits = cur.u8()? as u32;
        let time_taps = cur.u8()? as usize;
        let freq_taps = cur.u8()? as usize;
        let block_len = cur.u16()? as usize;
        let ref_mode = match cur.u8()? {
            0 => RefMode::SubbandRvq,
            1 => RefMode::Passthrough,
            v => return Err(CodecError::Format(format!("unknown reference mode {v}"))),
        };
        let spatial_mode = match cur.u8()? {
            0 => SpatialMode::Rvq,
            1 => SpatialMode::Bypass,
            v => return Err(CodecError::Format(format!("unknown spatial mode {v}"))),
        };
        let reference = cur.u8()? as usize;
        let ref_vector_dim = cur.u8()? as usize;
        let regularization = match (cur.u8()?, cur.f64()?) {
            (0, v) => Regularization::Absolute(v),
            (1, v) => Regularization::TraceRelative(v),
            (k, _) => return Err(CodecError::Format(format!("unknown regularization kind {k}"))),
        };
        let signal_len = cur.u32()? as usize;
        let ref_fingerprint = cur.fingerprint()?;
        let spatial_fingerprint = cur.fingerprint()?;
        let num_frames = cur.u32()? as usize;
        if !(1..=16).contains(&index_bits) {
            return Err(CodecError::Format(format!("index width {index_bits} bits")));
        }
        let config = CodecConfig {
            sample_rate,
            fft_size,
            hop_size,
            bands,
            rvq_stages,
            codebook_size: 1 << index_bits,
            time_taps,
            freq_taps,
            block_len,
            ref_mode,
            spatial_mode,
            reference,
            ref_vector_dim,
            regularization,
        };
        config.validate()?;
        if num_channels < 2 || reference >= num_channels {
            return Err(CodecError::Format(format!("reference {reference} with {num_channels} channels")));
        }
        let expected = config.window_spec()?.num_frames(signal_len);
        if num_frames != expected {
            return Err(CodecError::Format(format!(
                "{num_frames} frames listed, {expected} implied by the signal length"
            )));
        }

        let groups = bands * rvq_stages;
        let ref_len = config.reference_section_bytes(num_channels);
        let spatial_len = config.spatial_section_bytes(num_channels);
        let truncated = |t: usize| CodecError::Truncated { frames_recovered: t, expected: num_frames };
        let mut frames = Vec::with_capacity(num_frames);
        for t in 0..num_frames {
            let section = cur.take(ref_len).ok_or_else(|| truncated(t))?;
            let reference = match ref_mode {
                RefMode::SubbandRvq => RefPayload::Indices(unpack(section, groups, index_bits as usize)),
                RefMode::Passthrough => RefPayload::Raw(get_complex(section)),
            };
            let spatial = if t % block_len == 0 {
                let section = cur.take(spatial_len).ok_or_else(|| truncated(t))?;
                Some(match spatial_mode {
                    SpatialMode::Rvq => SpatialPayload::Indices(unpack(section, groups, index_bits as usize)),
                    SpatialMode::Bypass => SpatialPayload::Raw(get_complex(section)),
                })
            } else {
                None
            };
            frames.push(EncodedFrame { reference, spatial });
        }
        if cur.pos != bytes.len() {
            return Err(CodecError::Format(format!("{} trailing bytes after the last frame", bytes.len() - cur.pos)));
        }
        let header = BitstreamHeader {
            num_channels,
            sample_rate,
            config,
            signal_len,
            ref_fingerprint,
            spatial_fingerprint,
            num_frames,
        };
        Ok(Self { header, frames })
    }

    /// Byte and rate accounting. Rates cover the payload only.
    pub fn rate_report(&self) -> RateReport {
        let c = &self.header.config;
        let m = self.header.num_channels;
        let frames = self.header.num_frames;
        let reference_bytes = frames * c.reference_section_bytes(m);
        let spatial_bytes = self.num_blocks() * c.spatial_section_bytes(m);
        let duration_secs = frames as f64 * c.hop_size as f64 / c.sample_rate as f64;
        let rate = |bytes: usize| if duration_secs > 0.0 { bytes as f64 * 8.0 / duration_secs } else { 0.0 };
        RateReport {
            frames,
            header_bytes: HEADER_LEN,
            reference_bytes,
            spatial_bytes,
            duration_secs,
            reference_bps: rate(reference_bytes),
            spatial_bps: rate(spatial_bytes),
        }
    }
}
