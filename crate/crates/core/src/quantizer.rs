//! k-means codebook training and residual vector quantization (RVQ).
//!
//! Codebook entries are stored as `f32` so a coder loaded from disk
//! reproduces the in-memory coder bit for bit. Distances are squared
//! Euclidean, accumulated in `f64`; ties go to the lowest index.

use std::collections::HashSet;
use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SCQB_MAGIC: &[u8; 4] = b"SCQB";
pub const SCQB_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum QuantizerError {
    #[error("no training vectors")]
    EmptyInput,
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("index {index} out of range for stage {stage} with {size} entries")]
    IndexOutOfRange { stage: usize, index: usize, size: usize },
    #[error("expected {expected} indices, got {found}")]
    StageCountMismatch { expected: usize, found: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("malformed codebook file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// 16-byte truncated SHA-256.
pub type Fingerprint = [u8; 16];

pub fn fingerprint(bytes: &[u8]) -> Fingerprint {
    let digest = Sha256::digest(bytes);
    let mut out = [0u8; 16];
    out.copy_from_slice(&digest[..16]);
    out
}

fn fingerprint_vectors(data: &ArrayView2<'_, f64>) -> Fingerprint {
    let mut hasher = Sha256::new();
    hasher.update((data.ncols() as u64).to_le_bytes());
    for v in data.iter() {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut out = [0u8; 16];
    out.copy_from_slice(&digest[..16]);
    out
}

/// `N` entries of dimension `D`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Array2<f32>,
    /// Fingerprint of the training vectors; not persisted.
    pub trained_on: Option<Fingerprint>,
}

impl Codebook {
    pub fn new(entries: Array2<f32>) -> Result<Self, QuantizerError> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(QuantizerError::InvalidParams("codebook must be non-empty".into()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(QuantizerError::InvalidParams("codebook entries must be finite".into()));
        }
        Ok(Self { entries, trained_on: None })
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &Array2<f32> {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> ArrayView1<'_, f32> {
        self.entries.row(index)
    }

    /// Nearest entry and its squared distance; lowest index wins ties.
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, row) in self.entries.outer_iter().enumerate() {
            let mut d = 0.0;
            for (a, b) in v.iter().zip(row.iter()) {
                let diff = a - f64::from(*b);
                d += diff * diff;
            }
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    fn has_zero_entry(&self) -> bool {
        self.entries.outer_iter().any(|r| r.iter().all(|v| *v == 0.0))
    }

    /// Smallest pairwise squared distance between entries.
    pub fn min_pairwise_distance(&self) -> f64 {
        let n = self.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                let d: f64 = self
                    .entry(i)
                    .iter()
                    .zip(self.entry(j).iter())
                    .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
                    .sum();
                best = best.min(d);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub max_iters: usize,
    /// Stop when the relative distortion improvement drops below this.
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self { max_iters: 100, tol: 1e-6 }
    }
}

/// Mean squared distortion after every assignment step.
#[derive(Debug, Clone, Default)]
pub struct KMeansReport {
    pub distortion_history: Vec<f64>,
    /// Entries found by clustering before padding up to the requested size.
    pub clustered_entries: usize,
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per row via `|x|^2 - 2 x.c + |c|^2`, then the exact
/// squared distance to the chosen centroid.
fn assign(data: &ArrayView2<'_, f64>, centroids: &Array2<f64>) -> Vec<(usize, f64)> {
    let norms: Vec<f64> = centroids.outer_iter().map(|c| c.dot(&c)).collect();
    const CHUNK: usize = 512;
    let starts: Vec<usize> = (0..data.nrows()).step_by(CHUNK).collect();
    starts
        .par_iter()
        .flat_map_iter(|&start| {
            let end = (start + CHUNK).min(data.nrows());
            let block = data.slice(ndarray::s![start..end, ..]);
            let cross = block.dot(&centroids.t());
            (0..end - start)
                .map(|r| {
                    let row = cross.row(r);
                    let mut best = (0, f64::INFINITY);
                    for (c, x) in row.iter().enumerate() {
                        let d = norms[c] - 2.0 * x;
                        if d < best.1 {
                            best = (c, d);
                        }
                    }
                    (best.0, sq_dist(block.row(r), centroids.row(best.0)))
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

fn kmeans_plus_plus(data: &ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = data.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = data.outer_iter().map(|r| sq_dist(r, data.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random_range(0.0..total);
        let mut pick = n - 1;
        for (i, w) in d2.iter().enumerate() {
            if target < *w {
                pick = i;
                break;
            }
            target -= w;
        }
        if d2[pick] == 0.0 {
            // rounding walked onto an existing centre
            pick = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap();
        }
        chosen.push(pick);
        let c = data.row(pick);
        d2.par_iter_mut().enumerate().for_each(|(i, d)| {
            *d = d.min(sq_dist(data.row(i), c));
        });
    }
    let mut out = Array2::zeros((chosen.len(), data.ncols()));
    for (i, &p) in chosen.iter().enumerate() {
        out.row_mut(i).assign(&data.row(p));
    }
    out
}

fn row_key(row: &[f32]) -> Vec<u32> {
    row.iter().map(|v| v.to_bits()).collect()
}

fn to_f32_dedup(centroids: &Array2<f64>, seen: &mut HashSet<Vec<u32>>) -> Vec<Vec<f32>> {
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(centroids.nrows());
    for r in centroids.outer_iter() {
        let row: Vec<f32> = r.iter().map(|v| *v as f32).collect();
        if seen.insert(row_key(&row)) {
            rows.push(row);
        }
    }
    rows
}

/// Lloyd iterations from a k-means++ start. Empty clusters are re-seeded with
/// the point farthest from its centroid. When the data has fewer than `n`
/// distinct points the remaining entries are filled by small seeded
/// perturbations of the trained ones, so the codebook always holds `n`
/// distinct entries.
pub fn train_kmeans(
    data: ArrayView2<'_, f64>,
    n: usize,
    params: &KMeansParams,
    seed: u64,
) -> Result<(Codebook, KMeansReport), QuantizerError> {
    if data.nrows() == 0 || data.ncols() == 0 {
        return Err(QuantizerError::EmptyInput);
    }
    if n == 0 {
        return Err(QuantizerError::InvalidParams("codebook size must be positive".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(QuantizerError::InvalidParams("training vectors must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(&data, n, &mut rng);
    let k = centroids.nrows();
    let mut report = KMeansReport::default();

    for _ in 0..params.max_iters.max(1) {
        let assignment = assign(&data, &centroids);
        let distortion = assignment.iter().map(|a| a.1).sum::<f64>() / data.nrows() as f64;
        let previous = report.distortion_history.last().copied();
        report.distortion_history.push(distortion);
        if distortion == 0.0 {
            break;
        }
        if let Some(prev) = previous {
            if (prev - distortion) / prev < params.tol {
                break;
            }
        }

        let mut sums = Array2::<f64>::zeros((k, data.ncols()));
        let mut counts = vec![0usize; k];
        for (row, (c, _)) in data.outer_iter().zip(&assignment) {
            sums.row_mut(*c).scaled_add(1.0, &row);
            counts[*c] += 1;
        }
        let mut dists: Vec<f64> = assignment.iter().map(|a| a.1).collect();
        for c in 0..k {
            if counts[c] > 0 {
                let mean = sums.row(c).mapv(|v| v / counts[c] as f64);
                centroids.row_mut(c).assign(&mean);
            } else {
                let far = (0..dists.len()).max_by(|a, b| dists[*a].total_cmp(&dists[*b]).then(b.cmp(a))).unwrap();
                centroids.row_mut(c).assign(&data.row(far));
                dists[far] = 0.0;
            }
        }
    }

    let mut seen = HashSet::new();
    let mut rows = to_f32_dedup(&centroids, &mut seen);
    report.clustered_entries = rows.len();
    let scale = (data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64).sqrt().max(1e-6) * 1e-3;
    let mut i = 0;
    while rows.len() < n {
        let base = rows[i % report.clustered_entries].clone();
        let row: Vec<f32> = base
            .iter()
            .map(|v| (f64::from(*v) + scale * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        if seen.insert(row_key(&row)) {
            rows.push(row);
        }
        i += 1;
    }
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    let entries = Array2::from_shape_vec((n, data.ncols()), flat).expect("rows have equal length");
    let mut codebook = Codebook::new(entries)?;
    codebook.trained_on = Some(fingerprint_vectors(&data));
    Ok((codebook, report))
}

/// Ordered cascade of codebooks sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct RvqCoder {
    stages: Vec<Codebook>,
}

/// One index per stage.
pub type CodeIndices = Vec<usize>;

impl RvqCoder {
    pub fn new(stages: Vec<Codebook>) -> Result<Self, QuantizerError> {
        let Some(first) = stages.first() else {
            return Err(QuantizerError::InvalidParams("at least one stage required".into()));
        };
        let dim = first.dim();
        if let Some(bad) = stages.iter().find(|s| s.dim() != dim) {
            return Err(QuantizerError::DimensionMismatch { expected: dim, found: bad.dim() });
        }
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[Codebook] {
        &self.stages
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn dim(&self) -> usize {
        self.stages[0].dim()
    }

    /// Greedy per-stage nearest-entry search on the running residual.
    pub fn encode(&self, v: &[f64]) -> Result<CodeIndices, QuantizerError> {
        if v.len() != self.dim() {
            return Err(QuantizerError::DimensionMismatch { expected: self.dim(), found: v.len() });
        }
        let mut residual = v.to_vec();
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (idx, _) = stage.nearest(&residual);
            for (r, e) in residual.iter_mut().zip(stage.entry(idx).iter()) {
                *r -= f64::from(*e);
            }
            out.push(idx);
        }
        Ok(out)
    }

    /// Sum of the selected entries. Fewer indices than stages decodes a prefix.
    pub fn decode(&self, indices: &[usize]) -> Result<Vec<f64>, QuantizerError> {
        if indices.len() > self.stages.len() {
            return Err(QuantizerError::StageCountMismatch { expected: self.stages.len(), found: indices.len() });
        }
        let mut out = vec![0.0; self.dim()];
        for (s, (&idx, stage)) in indices.iter().zip(&self.stages).enumerate() {
            if idx >= stage.len() {
                return Err(QuantizerError::IndexOutOfRange { stage: s, index: idx, size: stage.len() });
            }
            for (o, e) in out.iter_mut().zip(stage.entry(idx).iter()) {
                *o += f64::from(*e);
            }
        }
        Ok(out)
    }

    /// Serialises as an SCQB record: magic, version u16, stage count u16,
    /// N u32, D u32, then each stage's entries as row-major little-endian f32.
    pub fn write_scqb(&self, w: &mut impl Write) -> Result<(), QuantizerError> {
        let n = self.stages[0].len();
        if self.stages.iter().any(|s| s.len() != n) {
            return Err(QuantizerError::Format("all stages must have the same number of entries".into()));
        }
        w.write_all(SCQB_MAGIC)?;
        w.write_all(&SCQB_VERSION.to_le_bytes())?;
        w.write_all(&(self.stages.len() as u16).to_le_bytes())?;
        w.write_all(&(n as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for stage in &self.stages {
            for v in stage.entries.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_scqb_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_scqb(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_scqb(r: &mut impl Read) -> Result<Self, QuantizerError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| QuantizerError::Format("missing SCQB header".into()))?;
        if &magic != SCQB_MAGIC {
            return Err(QuantizerError::Format("bad magic".into()));
        }
        let mut b2 = [0u8; 2];
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != SCQB_VERSION {
            return Err(QuantizerError::Format(format!("unsupported version {version}")));
        }
        r.read_exact(&mut b2)?;
        let stages = u16::from_le_bytes(b2) as usize;
        r.read_exact(&mut b4)?;
        let n = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let d = u32::from_le_bytes(b4) as usize;
        if stages == 0 || n == 0 || d == 0 {
            return Err(QuantizerError::Format("empty codebook".into()));
        }
        let mut out = Vec::with_capacity(stages);
        let mut raw = vec![0u8; n * d * 4];
        for _ in 0..stages {
            r.read_exact(&mut raw).map_err(|_| QuantizerError::Format("truncated entries".into()))?;
            let values: Vec<f32> =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let entries = Array2::from_shape_vec((n, d), values).expect("sized above");
            out.push(Codebook::new(entries).map_err(|e| QuantizerError::Format(e.to_string()))?);
        }
        Self::new(out)
    }
}

/// Makes sure the codebook contains the zero vector by overwriting its
/// least-used entry (lowest index among ties).
fn ensure_zero_entry(codebook: &mut Codebook, usage: &[usize]) {
    if codebook.has_zero_entry() {
        return;
    }
    let victim = (0..usage.len()).min_by_key(|&i| (usage[i], i)).unwrap_or(0);
    codebook.entries.row_mut(victim).fill(0.0);
}

/// Trains `stages` codebooks, each on the residuals left by the previous
/// ones. Every stage ends up containing the zero vector, so adding a stage
/// can never increase the residual of any vector.
pub fn train_rvq(
    data: ArrayView2<'_, f64>,
    stages: usize,
    n: usize,
    params: &KMeansParams,
    seed: u64,
) -> Result<RvqCoder, QuantizerError> {
    if data.nrows() == 0 {
        return Err(QuantizerError::EmptyInput);
    }
    if stages == 0 {
        return Err(QuantizerError::InvalidParams("stage count must be at least 1".into()));
    }
    let mut residual = data.to_owned();
    let mut books = Vec::with_capacity(stages);
    for s in 0..stages {
        let (mut book, _) = train_kmeans(residual.view(), n, params, seed.wrapping_add(s as u64 * 0x9E37_79B9))?;
        let nearest = |book: &Codebook, residual: &Array2<f64>| -> Vec<usize> {
            (0..residual.nrows())
                .into_par_iter()
                .map(|i| book.nearest(residual.row(i).as_slice().expect("owned rows are contiguous")).0)
                .collect()
        };
        let mut usage = vec![0usize; book.len()];
        for idx in nearest(&book, &residual) {
            usage[idx] += 1;
        }
        ensure_zero_entry(&mut book, &usage);
        for (i, idx) in nearest(&book, &residual).into_iter().enumerate() {
            let entry = book.entry(idx);
            for (r, e) in residual.row_mut(i).iter_mut().zip(entry.iter()) {
                *r -= f64::from(*e);
            }
        }
        books.push(book);
    }
    RvqCoder::new(books)
}

/// Mean squared quantisation error of `coder` over the rows of `data`.
pub fn rvq_distortion(coder: &RvqCoder, data: ArrayView2<'_, f64>) -> Result<f64, QuantizerError> {
    let mut total = 0.0;
    for row in data.outer_iter() {
        let v = row.to_vec();
        let q = coder.decode(&coder.encode(&v)?)?;
        total += v.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / data.nrows().max(1) as f64)
}
