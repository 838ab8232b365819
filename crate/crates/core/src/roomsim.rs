//! Image-source room impulse responses, reverberant array mixtures and
//! seeded dataset synthesis.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::FftPlanner;
use num_complex::Complex64;
use thiserror::Error;

use crate::signal::{AudioBuffer, SignalError};
use crate::wav::{read_audio, write_audio, SampleEncoding};

pub const SPEED_OF_SOUND: f64 = 343.0;
pub const MAX_RT60: f64 = 0.7;
/// Highest reflection order ever simulated.
pub const MAX_IMAGE_ORDER_CAP: u32 = 30;
/// Half-width of the windowed-sinc fractional delay kernel (81 taps).
pub const KERNEL_HALF_WIDTH: usize = 40;

/// Neighbour spacings of the default 8-microphone linear array, in metres.
pub const DEFAULT_SPACINGS: [f64; 7] = [0.02, 0.02, 0.02, 0.14, 0.02, 0.02, 0.02];

/// Peak level mixtures are normalised to.
const MIXTURE_PEAK: f64 = 0.9;

#[derive(Debug, Error)]
pub enum RoomError {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("rt60 {0} s outside [0, {MAX_RT60}]")]
    Rt60OutOfRange(f64),
    #[error("sample rate mismatch: source {source_rate} Hz, rirs {rir_rate} Hz")]
    RateMismatch { source_rate: u32, rir_rate: u32 },
    #[error("empty source signal")]
    EmptySource,
    #[error("corpus {0} contains no wav files")]
    EmptyCorpus(PathBuf),
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RoomError + '_ {
    move |source| RoomError::Io { path: path.to_path_buf(), source }
}

pub type Point = [f64; 3];

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Microphone positions plus the index of the reference channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    positions: Vec<Point>,
    reference: usize,
}

impl ArrayGeometry {
    pub fn new(positions: Vec<Point>, reference: usize) -> Result<Self, RoomError> {
        if positions.len() < 2 {
            return Err(RoomError::Geometry("an array needs at least two microphones".into()));
        }
        if reference >= positions.len() {
            return Err(RoomError::Geometry(format!("reference index {reference} out of range")));
        }
        for i in 0..positions.len() {
            for j in i + 1..positions.len() {
                if dist(&positions[i], &positions[j]) < 1e-9 {
                    return Err(RoomError::Geometry(format!("microphones {i} and {j} coincide")));
                }
            }
        }
        Ok(Self { positions, reference })
    }

    /// Linear array along +x with the given neighbour spacings, centred on `center`.
    pub fn linear(spacings: &[f64], center: Point, reference: usize) -> Result<Self, RoomError> {
        let mut offsets = vec![0.0];
        for s in spacings {
            offsets.push(offsets.last().unwrap() + s);
        }
        let mid = offsets.last().unwrap() / 2.0;
        let positions = offsets.iter().map(|o| [center[0] + o - mid, center[1], center[2]]).collect();
        Self::new(positions, reference)
    }

    /// The 8-channel non-uniform array with spacings 2,2,2,14,2,2,2 cm.
    pub fn default_array(center: Point) -> Self {
        Self::linear(&DEFAULT_SPACINGS, center, 0).expect("default geometry is valid")
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn num_mics(&self) -> usize {
        self.positions.len()
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn center(&self) -> Point {
        let n = self.positions.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.positions {
            for k in 0..3 {
                c[k] += p[k] / n;
            }
        }
        c
    }

    /// Unit vector from the first to the last microphone.
    pub fn axis(&self) -> Point {
        let a = self.positions[0];
        let b = *self.positions.last().unwrap();
        let d = dist(&a, &b);
        [(b[0] - a[0]) / d, (b[1] - a[1]) / d, (b[2] - a[2]) / d]
    }

    /// Signed coordinate of every microphone along the array axis, relative
    /// to the array centre.
    pub fn axis_coordinates(&self) -> Vec<f64> {
        let c = self.center();
        let u = self.axis();
        self.positions
            .iter()
            .map(|p| (p[0] - c[0]) * u[0] + (p[1] - c[1]) * u[1] + (p[2] - c[2]) * u[2])
            .collect()
    }

    /// Angle in degrees between the array axis and the direction from the
    /// array centre to `point`, in [0, 180].
    pub fn doa_degrees(&self, point: &Point) -> f64 {
        let c = self.center();
        let u = self.axis();
        let d = dist(&c, point);
        let cos = ((point[0] - c[0]) * u[0] + (point[1] - c[1]) * u[1] + (point[2] - c[2]) * u[2]) / d;
        cos.clamp(-1.0, 1.0).acos().to_degrees()
    }

    /// The same geometry moved so its centre sits at `center`.
    pub fn recentered(&self, center: Point) -> Self {
        let c = self.center();
        let positions = self
            .positions
            .iter()
            .map(|p| [p[0] - c[0] + center[0], p[1] - c[1] + center[1], p[2] - c[2] + center[2]])
            .collect();
        Self { positions, reference: self.reference }
    }
}

/// Shoebox room with one omnidirectional source.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomSpec {
    pub dimensions: Point,
    pub rt60: f64,
    pub source: Point,
    /// `None` picks the smallest order whose residual energy is 60 dB down.
    pub max_image_order: Option<u32>,
    /// Energy absorption coefficient for all walls; `None` derives it from
    /// `rt60` with Sabine's formula.
    pub absorption: Option<f64>,
    pub speed_of_sound: f64,
    pub sample_rate: u32,
}

impl RoomSpec {
    pub fn new(dimensions: Point, rt60: f64, source: Point) -> Self {
        Self {
            dimensions,
            rt60,
            source,
            max_image_order: None,
            absorption: None,
            speed_of_sound: SPEED_OF_SOUND,
            sample_rate: crate::signal::DEFAULT_SAMPLE_RATE,
        }
    }

    fn inside(&self, p: &Point) -> bool {
        (0..3).all(|k| p[k] > 0.0 && p[k] < self.dimensions[k])
    }

    /// Uniform wall absorption from Sabine's formula, clamped to 1.
    /// An RT60 of zero gives fully absorptive walls.
    pub fn wall_absorption(&self) -> f64 {
        if let Some(a) = self.absorption {
            return a;
        }
        if self.rt60 <= 0.0 {
            return 1.0;
        }
        let [lx, ly, lz] = self.dimensions;
        let volume = lx * ly * lz;
        let surface = 2.0 * (lx * ly + lx * lz + ly * lz);
        let sabine = 24.0 * 10f64.ln() / self.speed_of_sound;
        (sabine * volume / (surface * self.rt60)).min(1.0)
    }

    /// Pressure reflection coefficient of every wall.
    pub fn reflection_coefficient(&self) -> f64 {
        (1.0 - self.wall_absorption()).max(0.0).sqrt()
    }

    pub fn image_order(&self) -> u32 {
        if let Some(order) = self.max_image_order {
            return order.min(MAX_IMAGE_ORDER_CAP);
        }
        let beta2 = self.reflection_coefficient().powi(2);
        if beta2 <= 0.0 {
            return 0;
        }
        if beta2 >= 1.0 {
            return MAX_IMAGE_ORDER_CAP;
        }
        // energy beyond order n is roughly beta^(2(n+1)) / (1 - beta^2)
        (0..MAX_IMAGE_ORDER_CAP)
            .find(|&n| beta2.powi(n as i32 + 1) / (1.0 - beta2) <= 1e-6)
            .unwrap_or(MAX_IMAGE_ORDER_CAP)
    }

    fn validate(&self, array: &ArrayGeometry) -> Result<(), RoomError> {
        if !(0.0..=MAX_RT60).contains(&self.rt60) {
            return Err(RoomError::Rt60OutOfRange(self.rt60));
        }
        if self.dimensions.iter().any(|d| !(*d > 0.0)) {
            return Err(RoomError::Geometry("room dimensions must be positive".into()));
        }
        if let Some(a) = self.absorption {
            if !(0.0..=1.0).contains(&a) {
                return Err(RoomError::Geometry(format!("absorption {a} outside [0, 1]")));
            }
        }
        if !self.inside(&self.source) {
            return Err(RoomError::Geometry("source outside the room".into()));
        }
        if let Some(i) = array.positions().iter().position(|p| !self.inside(p)) {
            return Err(RoomError::Geometry(format!("microphone {i} outside the room")));
        }
        Ok(())
    }
}

/// One impulse response per microphone.
#[derive(Debug, Clone, PartialEq)]
pub struct RirSet {
    responses: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl RirSet {
    pub fn new(responses: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self, RoomError> {
        let buffer = AudioBuffer::new(responses, sample_rate)?;
        Ok(Self { sample_rate, responses: buffer.into_channels() })
    }

    pub fn responses(&self) -> &[Vec<f64>] {
        &self.responses
    }

    pub fn len(&self) -> usize {
        self.responses[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn to_audio(&self) -> AudioBuffer {
        AudioBuffer::new(self.responses.clone(), self.sample_rate).expect("validated on construction")
    }
}

/// Adds a windowed-sinc fractional delay of `delay` samples scaled by `gain`.
fn add_fractional_impulse(out: &mut [f64], delay: f64, gain: f64) {
    let half = KERNEL_HALF_WIDTH as f64 + 0.5;
    let lo = (delay - half).ceil().max(0.0) as usize;
    let hi = ((delay + half).floor() as usize).min(out.len().saturating_sub(1));
    for (n, slot) in out.iter_mut().enumerate().take(hi + 1).skip(lo) {
        let x = n as f64 - delay;
        let window = 0.5 * (1.0 + (PI * x / half).cos());
        let sinc = if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) };
        *slot += gain * window * sinc;
    }
}

struct Image {
    delay: f64,
    gain: f64,
}

fn image_sources(room: &RoomSpec, mic: &Point, order: u32) -> Vec<Image> {
    let beta = room.reflection_coefficient();
    let fs = room.sample_rate as f64;
    let n = order as i64;
    let mut images = Vec::new();
    for nx in -n..=n {
        for ny in -n..=n {
            for nz in -n..=n {
                for q in 0..8u8 {
                    let qs = [(q & 1) as i64, ((q >> 1) & 1) as i64, ((q >> 2) & 1) as i64];
                    let cells = [nx, ny, nz];
                    let reflections: i64 = (0..3).map(|k| (cells[k] - qs[k]).abs() + cells[k].abs()).sum();
                    if reflections > n {
                        continue;
                    }
                    let mut pos = [0.0; 3];
                    for k in 0..3 {
                        let sign = 1.0 - 2.0 * qs[k] as f64;
                        pos[k] = sign * room.source[k] + 2.0 * cells[k] as f64 * room.dimensions[k];
                    }
                    let gain = if reflections == 0 { 1.0 } else { beta.powi(reflections as i32) };
                    if gain == 0.0 {
                        continue;
                    }
                    let r = dist(&pos, mic);
                    images.push(Image { delay: r / room.speed_of_sound * fs, gain: gain / (4.0 * PI * r) });
                }
            }
        }
    }
    images
}

/// Image-source RIRs for every microphone of `array`.
///
/// Each image adds a `beta^reflections / (4 pi r)` weighted, fractionally
/// delayed impulse. The responses are cut where the backward-integrated
/// energy of the loudest channel has decayed by 60 dB.
pub fn simulate_rir(room: &RoomSpec, array: &ArrayGeometry) -> Result<RirSet, RoomError> {
    room.validate(array)?;
    let order = room.image_order();
    let per_mic: Vec<Vec<Image>> =
        array.positions().par_iter().map(|mic| image_sources(room, mic, order)).collect();
    let max_delay = per_mic.iter().flatten().map(|im| im.delay).fold(0.0, f64::max);
    let len = max_delay.ceil() as usize + KERNEL_HALF_WIDTH + 2;

    let mut responses: Vec<Vec<f64>> = per_mic
        .into_par_iter()
        .map(|images| {
            let mut h = vec![0.0; len];
            for im in images {
                add_fractional_impulse(&mut h, im.delay, im.gain);
            }
            h
        })
        .collect();

    let cut = responses.iter().map(|h| decay_cutoff(h, 60.0)).max().unwrap_or(len);
    for h in &mut responses {
        h.truncate(cut.max(1));
    }
    RirSet::new(responses, room.sample_rate)
}

/// First index after which the remaining energy is `db` below the total.
fn decay_cutoff(h: &[f64], db: f64) -> usize {
    let total: f64 = h.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return h.len();
    }
    let floor = total * 10f64.powf(-db / 10.0);
    let mut tail = 0.0;
    for i in (0..h.len()).rev() {
        tail += h[i] * h[i];
        if tail > floor {
            return i + 1;
        }
    }
    h.len()
}

/// RT60 estimated by Schroeder backward integration, fitting the -5 to -25 dB
/// range of the decay curve and extrapolating to 60 dB.
pub fn schroeder_rt60(h: &[f64], sample_rate: u32) -> Option<f64> {
    let mut edc = vec![0.0; h.len()];
    let mut acc = 0.0;
    for i in (0..h.len()).rev() {
        acc += h[i] * h[i];
        edc[i] = acc;
    }
    if acc <= 0.0 {
        return None;
    }
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / acc).log10()).collect();
    let start = db.iter().position(|d| *d <= -5.0)?;
    let end = db.iter().position(|d| *d <= -25.0)?;
    if end <= start + 1 {
        return None;
    }
    // least-squares line through the selected segment
    let pts: Vec<(f64, f64)> = (start..=end).map(|i| (i as f64 / sample_rate as f64, db[i])).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope < 0.0).then(|| -60.0 / slope)
}

/// Full-length linear convolution via FFT.
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut fa: Vec<Complex64> = a.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    fa.resize(n, Complex64::new(0.0, 0.0));
    let mut fb: Vec<Complex64> = b.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    fb.resize(n, Complex64::new(0.0, 0.0));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa.iter().take(out_len).map(|v| v.re / n as f64).collect()
}

/// Convolves a mono source with every RIR, then applies one gain to all
/// channels so the joint peak sits at 0.9.
pub fn synthesize_mixture(source: &AudioBuffer, rirs: &RirSet) -> Result<AudioBuffer, RoomError> {
    if source.is_empty() {
        return Err(RoomError::EmptySource);
    }
    if source.sample_rate() != rirs.sample_rate() {
        return Err(RoomError::RateMismatch { source_rate: source.sample_rate(), rir_rate: rirs.sample_rate() });
    }
    let s = source.channel(0);
    let channels: Vec<Vec<f64>> = rirs.responses().par_iter().map(|h| convolve(s, h)).collect();
    let mix = AudioBuffer::new(channels, source.sample_rate())?;
    let peak = mix.peak();
    Ok(if peak > 0.0 { mix.scaled(MIXTURE_PEAK / peak) } else { mix })
}

/// Randomisation ranges for [`generate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub room_min: f64,
    pub room_max: f64,
    pub rt60_min: f64,
    pub rt60_max: f64,
    pub distance_min: f64,
    pub distance_max: f64,
    /// Minimum clearance between walls and source or microphones.
    pub wall_margin: f64,
    pub spacings: Vec<f64>,
    pub reference: usize,
    pub sample_rate: u32,
    /// Optional cap on each utterance's length in samples.
    pub max_source_samples: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            room_min: 3.0,
            room_max: 10.0,
            rt60_min: 0.0,
            rt60_max: MAX_RT60,
            distance_min: 0.5,
            distance_max: 5.0,
            wall_margin: 0.3,
            spacings: DEFAULT_SPACINGS.to_vec(),
            reference: 0,
            sample_rate: crate::signal::DEFAULT_SAMPLE_RATE,
            max_source_samples: None,
        }
    }
}

/// One synthesized utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub mixture: PathBuf,
    pub rir: PathBuf,
    pub doa_degrees: f64,
    pub rt60: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Tab-separated: id, mixture path, rir path, DoA degrees, RT60 seconds.
    /// Paths are stored relative to the manifest directory when possible.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# id\tmixture\trir\tdoa_deg\trt60_s\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{:.6}",
                e.id,
                e.mixture.display(),
                e.rir.display(),
                e.doa_degrees,
                e.rt60
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, RoomError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |reason: &str| RoomError::Manifest { line: i + 1, reason: reason.into() };
            if fields.len() != 5 {
                return Err(bad("expected 5 tab-separated fields"));
            }
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                mixture: PathBuf::from(fields[1]),
                rir: PathBuf::from(fields[2]),
                doa_degrees: fields[3].parse().map_err(|_| bad("bad DoA"))?,
                rt60: fields[4].parse().map_err(|_| bad("bad RT60"))?,
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, RoomError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut m = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            if e.mixture.is_relative() {
                e.mixture = base.join(&e.mixture);
            }
            if e.rir.is_relative() {
                e.rir = base.join(&e.rir);
            }
        }
        Ok(m)
    }
}

/// Deterministic per-item generator, independent of processing order.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Random room, array placement and source position for one item.
pub fn sample_scene(config: &DatasetConfig, rng: &mut impl Rng) -> Result<(RoomSpec, ArrayGeometry), RoomError> {
    let template = ArrayGeometry::linear(&config.spacings, [0.0; 3], config.reference)?;
    let half_span = template.axis_coordinates().iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let margin = config.wall_margin;
    for _ in 0..1000 {
        let dims = [
            rng.random_range(config.room_min..=config.room_max),
            rng.random_range(config.room_min..=config.room_max),
            rng.random_range(config.room_min..=config.room_max),
        ];
        let rt60 = rng.random_range(config.rt60_min..=config.rt60_max);
        let lo = [margin + half_span, margin, margin];
        let hi = [dims[0] - margin - half_span, dims[1] - margin, dims[2] - margin];
        if (0..3).any(|k| hi[k] <= lo[k]) {
            continue;
        }
        let center = [
            rng.random_range(lo[0]..hi[0]),
            rng.random_range(lo[1]..hi[1]),
            rng.random_range(lo[2]..hi[2]),
        ];
        for _ in 0..100 {
            let distance = rng.random_range(config.distance_min..=config.distance_max);
            // uniform direction on the sphere
            let z: f64 = rng.random_range(-1.0..=1.0);
            let phi: f64 = rng.random_range(0.0..2.0 * PI);
            let r = (1.0 - z * z).sqrt();
            let source = [
                center[0] + distance * r * phi.cos(),
                center[1] + distance * r * phi.sin(),
                center[2] + distance * z,
            ];
            if (0..3).all(|k| source[k] > margin && source[k] < dims[k] - margin) {
                let mut room = RoomSpec::new(dims, rt60, source);
                room.sample_rate = config.sample_rate;
                return Ok((room, template.recentered(center)));
            }
        }
    }
    Err(RoomError::Geometry("could not place source and array with the configured ranges".into()))
}

fn list_corpus(dir: &Path) -> Result<Vec<PathBuf>, RoomError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(RoomError::EmptyCorpus(dir.to_path_buf()));
    }
    Ok(files)
}

/// Renders `n_utterances` reverberant mixtures into `out_dir` and writes
/// `manifest.tsv` there. Item `i` depends only on `(seed, i)`, so the output
/// does not depend on thread scheduling.
pub fn generate_dataset(
    corpus_dir: &Path,
    out_dir: &Path,
    n_utterances: usize,
    config: &DatasetConfig,
    seed: u64,
) -> Result<Manifest, RoomError> {
    let corpus = list_corpus(corpus_dir)?;
    if !(0.0..=MAX_RT60).contains(&config.rt60_min) || !(config.rt60_min..=MAX_RT60).contains(&config.rt60_max) {
        return Err(RoomError::Rt60OutOfRange(config.rt60_max));
    }
    for sub in ["mixtures", "rirs"] {
        let p = out_dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }

    let entries = (0..n_utterances)
        .into_par_iter()
        .map(|i| {
            let mut rng = item_rng(seed, i as u64);
            let source_path = &corpus[rng.random_range(0..corpus.len())];
            let mut source = read_audio(source_path, Some(config.sample_rate))?;
            if source.num_channels() != 1 {
                source = source.select(&[0])?;
            }
            if let Some(max) = config.max_source_samples {
                if source.len() > max {
                    source = AudioBuffer::mono(source.channel(0)[..max].to_vec(), source.sample_rate())?;
                }
            }
            let (room, array) = sample_scene(config, &mut rng)?;
            let rirs = simulate_rir(&room, &array)?;
            let mix = synthesize_mixture(&source, &rirs)?;
            let id = format!("utt{i:05}");
            let mixture = PathBuf::from("mixtures").join(format!("{id}.wav"));
            let rir = PathBuf::from("rirs").join(format!("{id}.wav"));
            write_audio(out_dir.join(&mixture), &mix, SampleEncoding::Float32)?;
            write_audio(out_dir.join(&rir), &rirs.to_audio(), SampleEncoding::Float32)?;
            Ok(ManifestEntry { id, mixture, rir, doa_degrees: array.doa_degrees(&room.source), rt60: room.rt60 })
        })
        .collect::<Result<Vec<_>, RoomError>>()?;

    let manifest = Manifest { entries };
    let path = out_dir.join("manifest.tsv");
    fs::write(&path, manifest.to_text()).map_err(io_err(&path))?;
    Ok(manifest)
}
