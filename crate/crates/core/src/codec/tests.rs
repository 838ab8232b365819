use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::quantizer::KMeansParams;
use crate::roomsim::{simulate_rir, synthesize_mixture, ArrayGeometry, RoomSpec};
use crate::signal::Spectrogram;
use crate::spatial::estimate_crf;

/// Amplitude-modulated noise rendered through a small reverberant room.
fn scene(seed: u64, secs: f64, source: [f64; 3]) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (secs * 16_000.0) as usize;
    let mut prev = 0.0;
    let samples: Vec<f64> = (0..n)
        .map(|i| {
            let white: f64 = rng.random_range(-1.0..1.0);
            prev = 0.9 * prev + white;
            let env = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * 3.0 * i as f64 / 16_000.0).sin();
            prev * env
        })
        .collect();
    let src = AudioBuffer::mono(samples, 16_000).unwrap();
    let array = ArrayGeometry::default_array([2.5, 2.0, 1.5]);
    let room = RoomSpec::new([5.0, 4.0, 3.0], 0.2, source);
    let rirs = simulate_rir(&room, &array).unwrap();
    synthesize_mixture(&src, &rirs).unwrap()
}

fn small_config() -> CodecConfig {
    CodecConfig { codebook_size: 16, ..CodecConfig::default() }
}

fn small_books(seed: u64) -> CodecCodebooks {
    let train: Vec<AudioBuffer> = (0..2).map(|i| scene(100 + i, 1.0, [1.0, 3.0, 1.2])).collect();
    let params = TrainParams { kmeans: KMeansParams { max_iters: 10, tol: 1e-6 }, max_vectors: 2000, seed };
    train_codebooks(&train, &small_config(), &params).unwrap()
}

#[test]
fn default_rates_are_six_kbps_per_branch() {
    let c = CodecConfig::default();
    assert_eq!(c.index_bits(), 10);
    assert_eq!(c.frames_per_second(), 50.0);
    assert_eq!(c.reference_bps(8), 6000.0);
    assert_eq!(c.spatial_bps(8), 6000.0);
    let c10 = CodecConfig { block_len: 10, ..c };
    assert_eq!(c10.spatial_bps(8), 600.0);
}

#[test]
fn config_validation() {
    assert!(CodecConfig::default().validate().is_ok());
    for bad in [
        CodecConfig { codebook_size: 1000, ..CodecConfig::default() },
        CodecConfig { block_len: 0, ..CodecConfig::default() },
        CodecConfig { bands: 0, ..CodecConfig::default() },
        CodecConfig { ref_vector_dim: 200, ..CodecConfig::default() },
        CodecConfig { hop_size: 300, ..CodecConfig::default() },
        CodecConfig { regularization: Regularization::Absolute(-1.0), ..CodecConfig::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn band_partition_covers_every_bin_once() {
    let map = CodecConfig::default().band_map().unwrap();
    let mut seen = vec![0; 321];
    for b in 0..map.num_bands() {
        for f in map.range(b) {
            seen[f] += 1;
        }
    }
    assert!(seen.iter().all(|c| *c == 1));
}

#[test]
fn lossless_stream_round_trips() {
    let x = scene(1, 0.5, [1.0, 3.0, 1.2]);
    let bs = encode(&x, &CodecConfig::lossless(), None).unwrap();
    assert!(bs.is_lossless_reference());
    assert_eq!(bs.header.ref_fingerprint, [0; 16]);
    let bytes = bs.to_bytes().unwrap();
    let parsed = Bitstream::from_bytes(&bytes).unwrap();
    assert_eq!(parsed, bs);
    assert_eq!(parsed.to_bytes().unwrap(), bytes);
    let y = decode(&parsed, None).unwrap();
    assert_eq!(y.num_channels(), 8);
    assert_eq!(y.len(), x.len());
}

#[test]
fn passthrough_reference_is_bit_exact() {
    let x = scene(2, 0.4, [1.0, 3.0, 1.2]);
    let config = CodecConfig::lossless();
    let s = stft(&x, config.window_spec().unwrap()).unwrap();
    let xref = s.select(&[0]).unwrap();
    let payload = encode_reference(&xref, &config, None).unwrap();
    let back = decode_reference(&payload, &config, None, x.len()).unwrap();
    assert_eq!(back.data(), xref.data());
}

#[test]
fn bypass_filters_equal_the_estimate() {
    let x = scene(3, 0.4, [1.0, 3.0, 1.2]);
    let config = CodecConfig::lossless();
    let s = stft(&x, config.window_spec().unwrap()).unwrap();
    let enc = encode_spatial(&s, &config, None).unwrap();
    let crf = decode_spatial(&enc.payloads, &config, None, 8, s.num_frames()).unwrap();
    let direct = estimate_crf(&s, 0, &config.crf_params().unwrap()).unwrap().crf;
    assert_eq!(crf, direct);
}

#[test]
fn wrong_reference_bin_count_is_rejected() {
    let x = scene(4, 0.2, [1.0, 3.0, 1.2]);
    let s = stft(&x.select(&[0]).unwrap(), crate::signal::WindowSpec::new(512, 256).unwrap()).unwrap();
    assert!(matches!(
        encode_reference(&s, &CodecConfig::lossless(), None),
        Err(CodecError::BinMismatch { expected: 321, found: 257 })
    ));
}

#[test]
fn truncated_stream_reports_recovered_frames() {
    let x = scene(5, 0.3, [1.0, 3.0, 1.2]);
    let config = CodecConfig { ref_mode: RefMode::Passthrough, ..CodecConfig::lossless() };
    let bytes = encode(&x, &config, None).unwrap().to_bytes().unwrap();
    let per_frame = config.reference_section_bytes(8) + config.spatial_section_bytes(8);
    let cut = Bitstream::header_len() + 3 * per_frame + 10;
    match Bitstream::from_bytes(&bytes[..cut]) {
        Err(e @ CodecError::Truncated { frames_recovered: 3, .. }) => {
            assert!(e.to_string().contains("last complete frame 2"), "{e}");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(Bitstream::from_bytes(&bytes[..20]), Err(CodecError::Format(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Bitstream::from_bytes(&extra), Err(CodecError::Format(_))));
}

#[test]
fn quantized_modes_need_codebooks() {
    let x = scene(6, 0.2, [1.0, 3.0, 1.2]);
    assert!(matches!(encode(&x, &CodecConfig::default(), None), Err(CodecError::MissingCodebooks(_))));
    let spatial_only = CodecConfig { ref_mode: RefMode::Passthrough, ..CodecConfig::default() };
    assert!(matches!(encode(&x, &spatial_only, None), Err(CodecError::MissingCodebooks("spatial"))));
}

#[test]
fn mono_input_is_rejected() {
    let x = AudioBuffer::mono(vec![0.1; 3200], 16_000).unwrap();
    assert!(encode(&x, &CodecConfig::lossless(), None).is_err());
    let wrong_rate = AudioBuffer::zeros(8, 3200, 8_000).unwrap();
    assert!(matches!(
        encode(&wrong_rate, &CodecConfig::lossless(), None),
        Err(CodecError::SampleRateMismatch { .. })
    ));
}

#[test]
fn quantized_codec_end_to_end() {
    let books = small_books(7);
    let config = small_config();
    let x = scene(8, 0.6, [4.0, 1.0, 1.4]);

    // determinism and stream identity
    let bs = encode(&x, &config, Some(&books)).unwrap();
    let again = encode(&x, &config, Some(&books)).unwrap();
    let bytes = bs.to_bytes().unwrap();
    assert_eq!(bytes, again.to_bytes().unwrap());
    let parsed = Bitstream::from_bytes(&bytes).unwrap();
    assert_eq!(parsed, bs);
    assert_eq!(parsed.to_bytes().unwrap(), bytes);
    assert_eq!(bs.header.ref_fingerprint, books.reference_fingerprint());

    let y = decode(&parsed, Some(&books)).unwrap();
    assert_eq!((y.num_channels(), y.len()), (8, x.len()));
    assert!(y.channels().iter().flatten().all(|v| v.is_finite()));

    // 16-entry codebooks: 4 bits x 12 indices = 6 bytes per section
    let report = bs.rate_report();
    assert_eq!(report.reference_bytes, 6 * report.frames);
    assert!((report.reference_bps - 2400.0).abs() < 1e-9);

    // codebooks from another seed are refused
    let other = small_books(99);
    assert_ne!(other.reference_fingerprint(), books.reference_fingerprint());
    assert!(matches!(decode(&parsed, Some(&other)), Err(CodecError::FingerprintMismatch("reference"))));
    assert!(matches!(decode(&parsed, None), Err(CodecError::MissingCodebooks(_))));
}

#[test]
fn codebook_bundle_round_trips() {
    let books = small_books(11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("books.sccb");
    books.save(&path).unwrap();
    let loaded = CodecCodebooks::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), books.to_bytes());
    assert_eq!(loaded.reference_fingerprint(), books.reference_fingerprint());
    assert_eq!(loaded.spatial_fingerprint(), books.spatial_fingerprint());
    assert_eq!(loaded.num_bands(), 6);
    assert_eq!(loaded.num_stages(), 2);
    assert_eq!(small_books(11).to_bytes(), books.to_bytes());

    let bytes = books.to_bytes();
    assert!(CodecCodebooks::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(CodecCodebooks::from_bytes(b"nope").is_err());
}

#[test]
fn codebooks_check_channel_count() {
    let books = small_books(12);
    let x = scene(13, 0.2, [1.0, 3.0, 1.2]).select(&[0, 1, 2, 3]).unwrap();
    assert!(matches!(
        encode(&x, &small_config(), Some(&books)),
        Err(CodecError::ChannelMismatch { expected: 8, found: 4 })
    ));
}

#[test]
fn reference_output_ignores_spatial_payload() {
    let books = small_books(14);
    let config = small_config();
    let x = scene(15, 0.4, [4.0, 1.0, 1.4]);
    let bs = encode(&x, &config, Some(&books)).unwrap();
    let mut altered = bs.clone();
    for frame in &mut altered.frames {
        if let Some(SpatialPayload::Indices(ix)) = &mut frame.spatial {
            ix.iter_mut().for_each(|v| *v = (*v + 5) % 16);
        }
    }
    let a = decode(&bs, Some(&books)).unwrap();
    let b = decode(&altered, Some(&books)).unwrap();
    assert_eq!(a.channel(0), b.channel(0));
    assert_ne!(a.channel(3), b.channel(3));
}

#[test]
fn reference_band_error_never_exceeds_band_energy() {
    let books = small_books(16);
    let config = small_config();
    let x = scene(17, 0.5, [4.0, 1.0, 1.4]);
    let s: Spectrogram = stft(&x, config.window_spec().unwrap()).unwrap().select(&[0]).unwrap();
    let payload = encode_reference(&s, &config, Some(&books)).unwrap();
    let y = decode_reference(&payload, &config, Some(&books), x.len()).unwrap();
    let map = config.band_map().unwrap();
    for t in 0..s.num_frames() {
        for b in 0..6 {
            let (mut energy, mut err) = (0.0, 0.0);
            for f in map.range(b) {
                energy += s.data()[[0, t, f]].norm_sqr();
                err += (s.data()[[0, t, f]] - y.data()[[0, t, f]]).norm_sqr();
            }
            assert!(err <= energy * (1.0 + 1e-5) + 1e-12, "t={t} b={b} err={err} energy={energy}");
        }
    }
}

fn arbitrary_stream(bits: u32, stages: usize, frames_len: usize, block_len: usize, seed: u64) -> Bitstream {
    let config = CodecConfig { codebook_size: 1 << bits, rvq_stages: stages, block_len, ..CodecConfig::default() };
    let num_frames = config.window_spec().unwrap().num_frames(frames_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| (0..n).map(|_| rng.random_range(0..config.codebook_size)).collect::<Vec<_>>();
    let frames = (0..num_frames)
        .map(|t| EncodedFrame {
            reference: RefPayload::Indices(draw(6 * stages)),
            spatial: (t % block_len == 0).then(|| SpatialPayload::Indices(draw(6 * stages))),
        })
        .collect();
    Bitstream {
        header: BitstreamHeader {
            num_channels: 8,
            sample_rate: 16_000,
            config,
            signal_len: frames_len,
            ref_fingerprint: [3; 16],
            spatial_fingerprint: [7; 16],
            num_frames,
        },
        frames,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn serialization_is_the_identity(
        bits in 1u32..=16,
        stages in 1usize..4,
        len in 1usize..4000,
        block_len in 1usize..6,
        seed in any::<u64>(),
    ) {
        let bs = arbitrary_stream(bits, stages, len, block_len, seed);
        let bytes = bs.to_bytes().unwrap();
        let parsed = Bitstream::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&parsed, &bs);
        prop_assert_eq!(parsed.to_bytes().unwrap(), bytes.clone());
        let per_section = (6 * stages * bits as usize).div_ceil(8);
        let blocks = bs.header.num_frames.div_ceil(block_len);
        prop_assert_eq!(bytes.len(), Bitstream::header_len() + per_section * (bs.header.num_frames + blocks));
    }
}

#[test]
fn index_packing_is_msb_first() {
    let mut bs = arbitrary_stream(10, 2, 320, 1, 0);
    bs.frames[0].reference = RefPayload::Indices(vec![0b11_0000_0001, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1023]);
    let bytes = bs.to_bytes().unwrap();
    let p = Bitstream::header_len();
    assert_eq!(bytes[p], 0b1100_0000);
    assert_eq!(bytes[p + 1], 0b0100_0000);
    assert_eq!(bytes[p + 13], 0b0000_0011);
    assert_eq!(bytes[p + 14], 0xFF);
}
