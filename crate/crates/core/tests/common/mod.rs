#![allow(dead_code)]

use arraycodec::codec::CodecConfig;
use arraycodec::roomsim::{item_rng, sample_scene, simulate_rir, synthesize_mixture, ArrayGeometry, DatasetConfig};
use arraycodec::spatial::{BandMap, Regularization};
use arraycodec::synth::synth_speech;
use arraycodec::{istft, stft, AudioBuffer, Spectrogram};
use nalgebra::DMatrix;
use ndarray::{Array3, Array5};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SR: u32 = 16_000;

/// Reverberant speech on the default 8-microphone array, RT60 in [0.2, 0.5] s.
pub struct DeskScene {
    pub mixture: AudioBuffer,
    pub doa_degrees: f64,
    pub array: ArrayGeometry,
}

pub fn desk_config() -> DatasetConfig {
    DatasetConfig { room_min: 3.0, room_max: 7.0, rt60_min: 0.2, rt60_max: 0.5, distance_min: 0.7, distance_max: 2.5, ..DatasetConfig::default() }
}

pub fn desk_scene(seed: u64, index: u64, secs: f64) -> DeskScene {
    let mut rng = item_rng(seed, index);
    let speech = synth_speech(&mut rng, secs, SR);
    let source = AudioBuffer::mono(speech, SR).unwrap();
    let (room, array) = sample_scene(&desk_config(), &mut rng).unwrap();
    let rirs = simulate_rir(&room, &array).unwrap();
    let mut mixture = synthesize_mixture(&source, &rirs).unwrap();
    // keep the rendered length equal to the dry source
    let channels: Vec<Vec<f64>> = mixture.channels().iter().map(|c| c[..source.len()].to_vec()).collect();
    mixture = AudioBuffer::new(channels, SR).unwrap();
    DeskScene { doa_degrees: array.doa_degrees(&room.source), mixture, array }
}

pub fn white_noise(seed: u64, channels: usize, len: usize) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..channels).map(|_| (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()).collect();
    AudioBuffer::new(data, SR).unwrap()
}

pub fn max_abs_rel(a: &AudioBuffer, b: &AudioBuffer) -> f64 {
    let mut err = 0.0_f64;
    let mut peak = 0.0_f64;
    for (x, y) in a.channels().iter().zip(b.channels()) {
        for (p, q) in x.iter().zip(y) {
            err = err.max((p - q).abs());
            peak = peak.max(p.abs());
        }
    }
    err / peak
}

/// Energy-ratio SNR in dB of channel `c`, without clamping.
pub fn channel_snr(x: &AudioBuffer, y: &AudioBuffer, c: usize) -> f64 {
    let e: f64 = x.channel(c).iter().map(|v| v * v).sum();
    let n: f64 = x.channel(c).iter().zip(y.channel(c)).map(|(a, b)| (a - b).powi(2)).sum();
    10.0 * (e / n).log10()
}

pub fn mean_non_reference_snr(x: &AudioBuffer, y: &AudioBuffer, reference: usize) -> f64 {
    let chans: Vec<usize> = (0..x.num_channels()).filter(|&c| c != reference).collect();
    chans.iter().map(|&c| channel_snr(x, y, c)).sum::<f64>() / chans.len() as f64
}

/// Every channel replaced by the reference channel.
pub fn replicate_reference(x: &AudioBuffer, reference: usize) -> AudioBuffer {
    let r = x.channel(reference).to_vec();
    AudioBuffer::new(vec![r; x.num_channels()], x.sample_rate()).unwrap()
}

fn reference_at(xref: &ndarray::ArrayView2<'_, Complex64>, t: isize, f: isize) -> Complex64 {
    let (frames, bins) = xref.dim();
    if t < 0 || f < 0 || t as usize >= frames || f as usize >= bins {
        Complex64::new(0.0, 0.0)
    } else {
        xref[[t as usize, f as usize]]
    }
}

/// Filters from an explicit design matrix per (block, band), solved through
/// a QR factorisation of the ridge-augmented system `[Phi; sqrt(lambda) I]`.
/// Returned as `(target, block, band, l + L, k + K)`.
pub fn oracle_filters(
    x: &Spectrogram,
    reference: usize,
    time_taps: usize,
    freq_taps: usize,
    block_len: usize,
    bands: &BandMap,
    regularization: Regularization,
) -> Array5<Complex64> {
    let (m, frames, _) = x.data().dim();
    let targets: Vec<usize> = (0..m).filter(|&c| c != reference).collect();
    let (lw, kw) = (time_taps as isize, freq_taps as isize);
    let (ld, kd) = (2 * time_taps + 1, 2 * freq_taps + 1);
    let dim = ld * kd;
    let blocks = frames.div_ceil(block_len);
    let xref = x.channel(reference);
    let mut out = Array5::zeros((targets.len(), blocks, bands.num_bands(), ld, kd));
    for block in 0..blocks {
        for band in 0..bands.num_bands() {
            let rows: Vec<(usize, usize)> = (block * block_len..((block + 1) * block_len).min(frames))
                .flat_map(|t| bands.range(band).map(move |f| (t, f)))
                .collect();
            let n = rows.len();
            let phi = DMatrix::from_fn(n, dim, |r, c| {
                let (t, f) = rows[r];
                let l = (c / kd) as isize - lw;
                let k = (c % kd) as isize - kw;
                reference_at(&xref, t as isize + l, f as isize + k)
            });
            let frob: f64 = phi.iter().map(|v| v.norm_sqr()).sum();
            if frob == 0.0 {
                continue;
            }
            let lambda = match regularization {
                Regularization::Absolute(v) => v,
                Regularization::TraceRelative(r) => r * frob / dim as f64,
            };
            let mut aug = DMatrix::zeros(n + dim, dim);
            aug.view_mut((0, 0), (n, dim)).copy_from(&phi);
            for i in 0..dim {
                aug[(n + i, i)] = Complex64::new(lambda.sqrt(), 0.0);
            }
            let qr = aug.qr();
            let (q, r) = (qr.q(), qr.r());
            for (ti, &ch) in targets.iter().enumerate() {
                let mut rhs = DMatrix::zeros(n + dim, 1);
                for (i, &(t, f)) in rows.iter().enumerate() {
                    rhs[(i, 0)] = x.data()[[ch, t, f]];
                }
                let w = r.solve_upper_triangular(&(q.adjoint() * rhs)).expect("ridge keeps R invertible");
                for c in 0..dim {
                    out[[ti, block, band, c / kd, c % kd]] = w[(c, 0)];
                }
            }
        }
    }
    out
}

/// `sum_l sum_k W(l, k) Xref(t + l, f + k)` with zeros outside the grid.
pub fn double_sum_apply(
    filters: &Array5<Complex64>,
    xref: &Spectrogram,
    block_len: usize,
    bands: &BandMap,
) -> Array3<Complex64> {
    let (targets, _, _, ld, kd) = filters.dim();
    let (lw, kw) = ((ld / 2) as isize, (kd / 2) as isize);
    let view = xref.channel(0);
    let (frames, bins) = view.dim();
    Array3::from_shape_fn((targets, frames, bins), |(c, t, f)| {
        let mut acc = Complex64::new(0.0, 0.0);
        for l in -lw..=lw {
            for k in -kw..=kw {
                let w = filters[[c, t / block_len, bands.band_of(f), (l + lw) as usize, (k + kw) as usize]];
                acc += w * reference_at(&view, t as isize + l, f as isize + k);
            }
        }
        acc
    })
}

/// Time-domain reconstruction from the oracle filters applied to the true
/// reference channel.
pub fn oracle_reconstruction(x: &AudioBuffer, config: &CodecConfig) -> AudioBuffer {
    let spec = stft(x, config.window_spec().unwrap()).unwrap();
    let bands = config.band_map().unwrap();
    let filters = oracle_filters(
        &spec,
        config.reference,
        config.time_taps,
        config.freq_taps,
        config.block_len,
        &bands,
        config.regularization,
    );
    let xref = spec.select(&[config.reference]).unwrap();
    let synth = double_sum_apply(&filters, &xref, config.block_len, &bands);
    let mut full = spec.data().clone();
    let targets: Vec<usize> = (0..x.num_channels()).filter(|&c| c != config.reference).collect();
    for (i, &ch) in targets.iter().enumerate() {
        full.index_axis_mut(ndarray::Axis(0), ch).assign(&synth.index_axis(ndarray::Axis(0), i));
    }
    let s = Spectrogram::from_parts(spec.spec(), SR, x.len(), full).unwrap();
    istft(&s).unwrap()
}

pub fn complex_rel_err(a: &Array3<Complex64>, b: &Array3<Complex64>) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(p, q)| (p - q).norm_sqr()).sum();
    let den: f64 = b.iter().map(|q| q.norm_sqr()).sum();
    (num / den).sqrt()
}
