//! Codebook bundle for both branches: training and the on-disk format.
//!
//! File layout:
//!
//! ```text
//! "SCCB" | version u16 | M u8 | reference u8 | L u8 | K u8 | fft u16 | hop u16 | bands u8
//! bands x reference RVQ coder   (SCQB record, D = ref_vector_dim)
//! bands x reference projection  (SCQB record, 1 stage, N = ref_vector_dim, D = 2 * band width)
//! bands x spatial RVQ coder     (SCQB record, D = (M - 1) * 2 * taps)
//! ```

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use super::reference::{band_vector, BandProjection};
use super::spatial_coding::band_filter_vector;
use super::{CodecConfig, CodecError};
use crate::quantizer::{fingerprint, train_rvq, Fingerprint, KMeansParams, RvqCoder};
use crate::signal::{stft, AudioBuffer};
use crate::spatial::estimate_crf;

pub const SCCB_MAGIC: &[u8; 4] = b"SCCB";
const SCCB_VERSION: u16 = 1;

/// Projection and coder for one reference band.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBand {
    pub projection: BandProjection,
    pub coder: RvqCoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecCodebooks {
    num_channels: usize,
    reference: usize,
    time_taps: usize,
    freq_taps: usize,
    fft_size: usize,
    hop_size: usize,
    reference_bands: Vec<ReferenceBand>,
    spatial: Vec<RvqCoder>,
    ref_fingerprint: Fingerprint,
    spatial_fingerprint: Fingerprint,
}

impl CodecCodebooks {
    pub fn new(
        config: &CodecConfig,
        num_channels: usize,
        reference_bands: Vec<ReferenceBand>,
        spatial: Vec<RvqCoder>,
    ) -> Result<Self, CodecError> {
        let mut books = Self {
            num_channels,
            reference: config.reference,
            time_taps: config.time_taps,
            freq_taps: config.freq_taps,
            fft_size: config.fft_size,
            hop_size: config.hop_size,
            reference_bands,
            spatial,
            ref_fingerprint: [0; 16],
            spatial_fingerprint: [0; 16],
        };
        books.check_shapes()?;
        books.refresh_fingerprints();
        Ok(books)
    }

    fn check_shapes(&self) -> Result<(), CodecError> {
        let bad = |msg: String| Err(CodecError::Format(msg));
        let bands = self.reference_bands.len();
        if bands == 0 || bands != self.spatial.len() || bands > u8::MAX as usize {
            return bad(format!("{bands} reference bands and {} spatial bands", self.spatial.len()));
        }
        if self.num_channels < 2 || self.reference >= self.num_channels || self.num_channels > u8::MAX as usize {
            return bad(format!("reference {} with {} channels", self.reference, self.num_channels));
        }
        let first = &self.reference_bands[0].coder;
        let (stages, size) = (first.num_stages(), first.stages()[0].len());
        let spatial_dim = (self.num_channels - 1) * 2 * (2 * self.time_taps + 1) * (2 * self.freq_taps + 1);
        for (b, band) in self.reference_bands.iter().enumerate() {
            if band.coder.dim() != band.projection.dim() {
                return bad(format!("reference band {b}: coder dimension {} vs projection {}", band.coder.dim(), band.projection.dim()));
            }
        }
        let coders = self.reference_bands.iter().map(|b| &b.coder).chain(&self.spatial);
        for coder in coders {
            if coder.num_stages() != stages || coder.stages().iter().any(|s| s.len() != size) {
                return bad("all coders must share stage count and codebook size".into());
            }
        }
        if let Some(c) = self.spatial.iter().find(|c| c.dim() != spatial_dim) {
            return bad(format!("spatial coder dimension {} vs {spatial_dim} expected", c.dim()));
        }
        Ok(())
    }

    fn header_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SCCB_MAGIC);
        out.extend_from_slice(&SCCB_VERSION.to_le_bytes());
        out.push(self.num_channels as u8);
        out.push(self.reference as u8);
        out.push(self.time_taps as u8);
        out.push(self.freq_taps as u8);
        out.extend_from_slice(&(self.fft_size as u16).to_le_bytes());
        out.extend_from_slice(&(self.hop_size as u16).to_le_bytes());
        out.push(self.reference_bands.len() as u8);
        out
    }

    fn reference_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for band in &self.reference_bands {
            out.extend(band.coder.to_scqb_bytes());
        }
        for band in &self.reference_bands {
            out.extend(band.projection.to_coder().to_scqb_bytes());
        }
        out
    }

    fn spatial_bytes(&self) -> Vec<u8> {
        self.spatial.iter().flat_map(|c| c.to_scqb_bytes()).collect()
    }

    fn refresh_fingerprints(&mut self) {
        let header = self.header_bytes();
        self.ref_fingerprint = fingerprint(&[header.clone(), self.reference_bytes()].concat());
        self.spatial_fingerprint = fingerprint(&[header, self.spatial_bytes()].concat());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        [self.header_bytes(), self.reference_bytes(), self.spatial_bytes()].concat()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let short = || CodecError::Format("codebook bundle header truncated".into());
        let head = bytes.get(..15).ok_or_else(short)?;
        if &head[..4] != SCCB_MAGIC {
            return Err(CodecError::Format("not a codebook bundle".into()));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != SCCB_VERSION {
            return Err(CodecError::Format(format!("unsupported codebook bundle version {version}")));
        }
        let num_channels = head[6] as usize;
        let reference = head[7] as usize;
        let time_taps = head[8] as usize;
        let freq_taps = head[9] as usize;
        let fft_size = u16::from_le_bytes([head[10], head[11]]) as usize;
        let hop_size = u16::from_le_bytes([head[12], head[13]]) as usize;
        let bands = head[14] as usize;
        let mut rest = &bytes[15..];
        let mut read = |n: usize| -> Result<Vec<RvqCoder>, CodecError> {
            (0..n).map(|_| Ok(RvqCoder::read_scqb(&mut rest)?)).collect()
        };
        let coders = read(bands)?;
        let projections = read(bands)?;
        let spatial = read(bands)?;
        if !rest.is_empty() {
            return Err(CodecError::Format(format!("{} trailing bytes in codebook bundle", rest.len())));
        }
        let reference_bands = coders
            .into_iter()
            .zip(projections)
            .map(|(coder, p)| {
                if p.num_stages() != 1 {
                    return Err(CodecError::Format("projection record must have one stage".into()));
                }
                let projection = BandProjection::from_basis(p.stages()[0].entries().clone())?;
                Ok(ReferenceBand { projection, coder })
            })
            .collect::<Result<Vec<_>, CodecError>>()?;
        let mut books = Self {
            num_channels,
            reference,
            time_taps,
            freq_taps,
            fft_size,
            hop_size,
            reference_bands,
            spatial,
            ref_fingerprint: [0; 16],
            spatial_fingerprint: [0; 16],
        };
        books.check_shapes()?;
        books.refresh_fingerprints();
        Ok(books)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CodecError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CodecError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    pub fn num_bands(&self) -> usize {
        self.reference_bands.len()
    }

    pub fn num_stages(&self) -> usize {
        self.spatial[0].num_stages()
    }

    pub fn codebook_size(&self) -> usize {
        self.spatial[0].stages()[0].len()
    }

    pub fn reference_bands(&self) -> &[ReferenceBand] {
        &self.reference_bands
    }

    pub fn spatial_coders(&self) -> &[RvqCoder] {
        &self.spatial
    }

    pub fn reference_fingerprint(&self) -> Fingerprint {
        self.ref_fingerprint
    }

    pub fn spatial_fingerprint(&self) -> Fingerprint {
        self.spatial_fingerprint
    }

    /// Fails unless these codebooks can serve `config` on `num_channels` inputs.
    pub fn check_compatible(&self, config: &CodecConfig, num_channels: usize) -> Result<(), CodecError> {
        let mismatch = |what: &str, have: usize, want: usize| {
            Err(CodecError::IncompatibleCodebooks(format!("{what}: codebooks have {have}, configuration needs {want}")))
        };
        if self.num_channels != num_channels {
            return Err(CodecError::ChannelMismatch { expected: self.num_channels, found: num_channels });
        }
        let pairs = [
            ("reference channel", self.reference, config.reference),
            ("time taps", self.time_taps, config.time_taps),
            ("frequency taps", self.freq_taps, config.freq_taps),
            ("fft size", self.fft_size, config.fft_size),
            ("hop size", self.hop_size, config.hop_size),
            ("bands", self.num_bands(), config.bands),
            ("stages", self.num_stages(), config.rvq_stages),
            ("codebook size", self.codebook_size(), config.codebook_size),
            ("reference vector dimension", self.reference_bands[0].projection.dim(), config.ref_vector_dim),
        ];
        for (what, have, want) in pairs {
            if have != want {
                return mismatch(what, have, want);
            }
        }
        for (b, size) in config.band_map()?.sizes().into_iter().enumerate() {
            let width = self.reference_bands[b].projection.width();
            if width != 2 * size {
                return mismatch("reference band width", width / 2, size);
            }
        }
        Ok(())
    }
}

/// Training material per band, one row per (frame, band) for the reference
/// branch and per (block, band) for the spatial branch.
#[derive(Debug, Clone)]
pub struct TrainingVectors {
    pub reference: Vec<Array2<f64>>,
    pub spatial: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub kmeans: KMeansParams,
    /// Per-band cap on training rows; larger sets are thinned evenly.
    pub max_vectors: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self { kmeans: KMeansParams::default(), max_vectors: 20_000, seed: 0 }
    }
}

fn stack(rows: Vec<Vec<f64>>, width: usize) -> Array2<f64> {
    let n = rows.len();
    Array2::from_shape_vec((n, width), rows.into_iter().flatten().collect()).expect("rows share one width")
}

/// Band vectors of every mixture, in mixture order.
pub fn training_vectors(mixtures: &[AudioBuffer], config: &CodecConfig) -> Result<TrainingVectors, CodecError> {
    config.validate()?;
    let first = mixtures.first().ok_or_else(|| CodecError::InvalidConfig("no training mixtures".into()))?;
    let m = first.num_channels();
    for x in mixtures {
        if x.num_channels() != m {
            return Err(CodecError::ChannelMismatch { expected: m, found: x.num_channels() });
        }
        if x.sample_rate() != config.sample_rate {
            return Err(CodecError::SampleRateMismatch { expected: config.sample_rate, found: x.sample_rate() });
        }
    }
    let spec = config.window_spec()?;
    let bands = config.band_map()?;
    let params = config.crf_params()?;
    type PerMixture = (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>);
    let per_mixture: Vec<PerMixture> = mixtures
        .par_iter()
        .map(|x| {
            let s = stft(x, spec)?;
            let xref = s.channel(config.reference);
            let reference = (0..config.bands)
                .map(|b| (0..s.num_frames()).map(|t| band_vector(&xref, t, bands.range(b))).collect())
                .collect();
            let crf = estimate_crf(&s, config.reference, &params)?.crf;
            let spatial = (0..config.bands)
                .map(|b| (0..crf.num_blocks()).map(|blk| band_filter_vector(&crf, blk, b)).collect())
                .collect();
            Ok((reference, spatial))
        })
        .collect::<Result<_, CodecError>>()?;

    let spatial_dim = (m - 1) * 2 * config.taps_per_filter();
    let mut reference = Vec::with_capacity(config.bands);
    let mut spatial = Vec::with_capacity(config.bands);
    for b in 0..config.bands {
        let r: Vec<Vec<f64>> = per_mixture.iter().flat_map(|(r, _)| r[b].iter().cloned()).collect();
        reference.push(stack(r, 2 * bands.range(b).len()));
        let s: Vec<Vec<f64>> = per_mixture.iter().flat_map(|(_, s)| s[b].iter().cloned()).collect();
        spatial.push(stack(s, spatial_dim));
    }
    Ok(TrainingVectors { reference, spatial })
}

/// At most `cap` rows, evenly spaced.
fn thin(data: &Array2<f64>, cap: usize) -> Array2<f64> {
    let n = data.nrows();
    if n <= cap {
        return data.clone();
    }
    let picked: Vec<usize> = (0..cap).map(|i| i * n / cap).collect();
    data.select(ndarray::Axis(0), &picked)
}

fn branch_seed(seed: u64, branch: u64, band: usize) -> u64 {
    seed.wrapping_add((branch << 32) ^ ((band as u64 + 1) * 0x0001_0000_0001))
}

fn project_rows(projection: &BandProjection, data: ArrayView2<'_, f64>) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = data
        .outer_iter()
        .map(|r| projection.project(r.as_slice().expect("owned rows are contiguous")))
        .collect();
    stack(rows, projection.dim())
}

/// Trains reference and spatial codebooks for every band.
pub fn train_codebooks(
    mixtures: &[AudioBuffer],
    config: &CodecConfig,
    params: &TrainParams,
) -> Result<CodecCodebooks, CodecError> {
    if params.max_vectors == 0 {
        return Err(CodecError::InvalidConfig("max_vectors must be positive".into()));
    }
    let vectors = training_vectors(mixtures, config)?;
    let m = mixtures[0].num_channels();
    let mut reference_bands = Vec::with_capacity(config.bands);
    for (b, data) in vectors.reference.iter().enumerate() {
        let data = thin(data, params.max_vectors);
        let projection = BandProjection::fit(data.view(), config.ref_vector_dim)?;
        let coded = project_rows(&projection, data.view());
        let coder = train_rvq(
            coded.view(),
            config.rvq_stages,
            config.codebook_size,
            &params.kmeans,
            branch_seed(params.seed, 1, b),
        )?;
        reference_bands.push(ReferenceBand { projection, coder });
    }
    let mut spatial = Vec::with_capacity(config.bands);
    for (b, data) in vectors.spatial.iter().enumerate() {
        let data = thin(data, params.max_vectors);
        spatial.push(train_rvq(
            data.view(),
            config.rvq_stages,
            config.codebook_size,
            &params.kmeans,
            branch_seed(params.seed, 2, b),
        )?);
    }
    CodecCodebooks::new(config, m, reference_bands, spatial)
}
