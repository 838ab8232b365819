//! `key = value` run configuration shared by every command.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use arraycodec::codec::{CodecConfig, RefMode, SpatialMode, TrainParams};
use arraycodec::metrics::{DEFAULT_BEAMS, DEFAULT_DIAGONAL_LOADING};
use arraycodec::quantizer::KMeansParams;
use arraycodec::roomsim::{ArrayGeometry, DatasetConfig};
use arraycodec::spatial::Regularization;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricOptions {
    pub beams: usize,
    pub diagonal_loading: f64,
    pub grid_step: f64,
    pub feature_freqs: Vec<f64>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            beams: DEFAULT_BEAMS,
            diagonal_loading: DEFAULT_DIAGONAL_LOADING,
            grid_step: 1.0,
            feature_freqs: vec![1000.0, 3000.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub codec: CodecConfig,
    pub dataset: DatasetConfig,
    pub kmeans: KMeansParams,
    pub max_vectors: usize,
    pub metrics: MetricOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            codec: CodecConfig::default(),
            dataset: DatasetConfig::default(),
            kmeans: KMeansParams::default(),
            max_vectors: TrainParams::default().max_vectors,
            metrics: MetricOptions::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| anyhow!("{key}: cannot parse {value:?}"))
}

fn list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Reads a config file; blank lines and `#` comments are ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            config.apply(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        }
        Ok(config)
    }

    /// Applies one `key=value` assignment.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("expected key=value, got {assignment:?}"))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let c = &mut self.codec;
        let d = &mut self.dataset;
        match key {
            "seed" => self.seed = num(key, value)?,
            "sample_rate" => {
                c.sample_rate = num(key, value)?;
                d.sample_rate = c.sample_rate;
            }
            "fft_size" => c.fft_size = num(key, value)?,
            "hop_size" => c.hop_size = num(key, value)?,
            "bands" => c.bands = num(key, value)?,
            "rvq_stages" => c.rvq_stages = num(key, value)?,
            "codebook_size" => c.codebook_size = num(key, value)?,
            "time_taps" => c.time_taps = num(key, value)?,
            "freq_taps" => c.freq_taps = num(key, value)?,
            "block_len" => c.block_len = num(key, value)?,
            "ref_vector_dim" => c.ref_vector_dim = num(key, value)?,
            "reference" => {
                c.reference = num(key, value)?;
                d.reference = c.reference;
            }
            "ref_mode" => {
                c.ref_mode = match value {
                    "subband_rvq" => RefMode::SubbandRvq,
                    "passthrough" => RefMode::Passthrough,
                    _ => bail!("ref_mode must be subband_rvq or passthrough, got {value:?}"),
                }
            }
            "spatial_mode" => {
                c.spatial_mode = match value {
                    "rvq" => SpatialMode::Rvq,
                    "bypass" => SpatialMode::Bypass,
                    _ => bail!("spatial_mode must be rvq or bypass, got {value:?}"),
                }
            }
            "regularization" => {
                let (kind, v) = value
                    .split_once(':')
                    .ok_or_else(|| anyhow!("regularization must look like trace:1e-3 or absolute:1e-6"))?;
                let v: f64 = num(key, v)?;
                c.regularization = match kind {
                    "trace" => Regularization::TraceRelative(v),
                    "absolute" => Regularization::Absolute(v),
                    _ => bail!("unknown regularization kind {kind:?}"),
                }
            }
            "room_min" => d.room_min = num(key, value)?,
            "room_max" => d.room_max = num(key, value)?,
            "rt60_min" => d.rt60_min = num(key, value)?,
            "rt60_max" => d.rt60_max = num(key, value)?,
            "distance_min" => d.distance_min = num(key, value)?,
            "distance_max" => d.distance_max = num(key, value)?,
            "wall_margin" => d.wall_margin = num(key, value)?,
            "mic_spacings" => d.spacings = list(key, value)?,
            "max_source_seconds" => {
                d.max_source_samples = match value {
                    "none" => None,
                    v => Some((num::<f64>(key, v)? * d.sample_rate as f64).round() as usize),
                }
            }
            "kmeans_iters" => self.kmeans.max_iters = num(key, value)?,
            "kmeans_tol" => self.kmeans.tol = num(key, value)?,
            "max_vectors" => self.max_vectors = num(key, value)?,
            "beams" => self.metrics.beams = num(key, value)?,
            "diagonal_loading" => self.metrics.diagonal_loading = num(key, value)?,
            "music_grid_step" => self.metrics.grid_step = num(key, value)?,
            "feature_freqs" => self.metrics.feature_freqs = list(key, value)?,
            _ => bail!("unknown configuration key {key:?}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        if self.dataset.sample_rate != self.codec.sample_rate {
            bail!("dataset and codec sample rates differ");
        }
        self.array()?;
        if self.metrics.beams == 0 || !(self.metrics.diagonal_loading > 0.0) || !(self.metrics.grid_step > 0.0) {
            bail!("metric options must be positive");
        }
        if self.max_vectors == 0 {
            bail!("max_vectors must be positive");
        }
        Ok(())
    }

    /// Array used for evaluation, centred at the origin.
    pub fn array(&self) -> Result<ArrayGeometry> {
        Ok(ArrayGeometry::linear(&self.dataset.spacings, [0.0; 3], self.codec.reference)?)
    }

    pub fn train_params(&self) -> TrainParams {
        TrainParams { kmeans: self.kmeans, max_vectors: self.max_vectors, seed: self.seed }
    }

    /// Every key with its effective value, in a fixed order.
    pub fn to_text(&self) -> String {
        let c = &self.codec;
        let d = &self.dataset;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("sample_rate", c.sample_rate.to_string());
        put("fft_size", c.fft_size.to_string());
        put("hop_size", c.hop_size.to_string());
        put("bands", c.bands.to_string());
        put("rvq_stages", c.rvq_stages.to_string());
        put("codebook_size", c.codebook_size.to_string());
        put("time_taps", c.time_taps.to_string());
        put("freq_taps", c.freq_taps.to_string());
        put("block_len", c.block_len.to_string());
        put("ref_vector_dim", c.ref_vector_dim.to_string());
        put("reference", c.reference.to_string());
        put(
            "ref_mode",
            match c.ref_mode {
                RefMode::SubbandRvq => "subband_rvq",
                RefMode::Passthrough => "passthrough",
            }
            .into(),
        );
        put(
            "spatial_mode",
            match c.spatial_mode {
                SpatialMode::Rvq => "rvq",
                SpatialMode::Bypass => "bypass",
            }
            .into(),
        );
        put(
            "regularization",
            match c.regularization {
                Regularization::TraceRelative(v) => format!("trace:{v}"),
                Regularization::Absolute(v) => format!("absolute:{v}"),
            },
        );
        put("room_min", d.room_min.to_string());
        put("room_max", d.room_max.to_string());
        put("rt60_min", d.rt60_min.to_string());
        put("rt60_max", d.rt60_max.to_string());
        put("distance_min", d.distance_min.to_string());
        put("distance_max", d.distance_max.to_string());
        put("wall_margin", d.wall_margin.to_string());
        put("mic_spacings", join(&d.spacings));
        put(
            "max_source_seconds",
            match d.max_source_samples {
                None => "none".into(),
                Some(n) => (n as f64 / d.sample_rate as f64).to_string(),
            },
        );
        put("kmeans_iters", self.kmeans.max_iters.to_string());
        put("kmeans_tol", self.kmeans.tol.to_string());
        put("max_vectors", self.max_vectors.to_string());
        put("beams", self.metrics.beams.to_string());
        put("diagonal_loading", self.metrics.diagonal_loading.to_string());
        put("music_grid_step", self.metrics.grid_step.to_string());
        put("feature_freqs", join(&self.metrics.feature_freqs));
        out
    }

    /// Writes `effective_config.txt` into `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("effective_config.txt");
        std::fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }
}
