mod common;

use arraycodec::codec::{decode, encode, train_codebooks, CodecConfig, RefMode, SpatialMode, TrainParams};
use arraycodec::metrics::{spatial_similarity, BeamformerBank};
use arraycodec::quantizer::KMeansParams;
use arraycodec::roomsim::ArrayGeometry;
use arraycodec::spatial::{apply_crf, estimate_crf, CrfParams};
use arraycodec::{stft, AudioBuffer, WindowSpec};
use common::*;

fn trained(config: &CodecConfig) -> arraycodec::codec::CodecCodebooks {
    let train: Vec<AudioBuffer> = (0..6).map(|i| desk_scene(20, i, 2.0).mixture).collect();
    let params = TrainParams { kmeans: KMeansParams { max_iters: 15, tol: 1e-6 }, max_vectors: 5000, seed: 2 };
    train_codebooks(&train, config, &params).unwrap()
}

#[test]
fn held_out_reference_and_spatial_ordering() {
    let config = CodecConfig { codebook_size: 64, ..CodecConfig::default() };
    let books = trained(&config);
    let bank = BeamformerBank::standard(&ArrayGeometry::default_array([0.0; 3]), SR).unwrap();
    let bypass_cfg = CodecConfig { spatial_mode: SpatialMode::Bypass, ref_mode: RefMode::Passthrough, ..config.clone() };
    for i in 0..3 {
        let x = desk_scene(21, i, 2.0).mixture;
        let q = decode(&encode(&x, &config, Some(&books)).unwrap(), Some(&books)).unwrap();
        let ref_snr = channel_snr(&x, &q, config.reference);
        assert!(ref_snr > 0.0, "utterance {i}: decoded reference SNR {ref_snr:.2} dB");

        let b = decode(&encode(&x, &bypass_cfg, None).unwrap(), None).unwrap();
        let ss_bypass = spatial_similarity(&x, &b, &bank).unwrap();
        let ss_quant = spatial_similarity(&x, &q, &bank).unwrap();
        let ss_rep = spatial_similarity(&x, &replicate_reference(&x, 0), &bank).unwrap();
        assert!(ss_bypass >= ss_quant, "utterance {i}: {ss_bypass} < {ss_quant}");
        assert!(ss_quant >= ss_rep, "utterance {i}: {ss_quant} < {ss_rep}");
    }
}

#[test]
fn long_block_filters_match_the_least_squares_oracle() {
    // 50-frame blocks on a 3 s scene: six full blocks and a partial seventh
    let x = desk_scene(22, 0, 3.0).mixture;
    let s = stft(&x, WindowSpec::codec()).unwrap();
    let params = CrfParams::new(s.num_bins()).unwrap();
    let fit = estimate_crf(&s, 0, &params).unwrap();
    let oracle = oracle_filters(&s, 0, params.time_taps, params.freq_taps, params.block_len, &params.bands, params.regularization);
    let num: f64 = fit.crf.taps().iter().zip(&oracle).map(|(a, b)| (a - b).norm_sqr()).sum();
    let den: f64 = oracle.iter().map(|b| b.norm_sqr()).sum();
    assert!((num / den).sqrt() < 1e-8);

    let xref = s.select(&[0]).unwrap();
    let applied = apply_crf(&fit.crf, &xref).unwrap();
    let direct = double_sum_apply(fit.crf.taps(), &xref, params.block_len, &params.bands);
    assert!(complex_rel_err(applied.data(), &direct) < 1e-12);
}

#[test]
fn more_taps_never_fit_worse() {
    let x = desk_scene(23, 0, 2.0).mixture;
    let fit_snr = |time_taps: usize| {
        let cfg = CodecConfig { time_taps, ..CodecConfig::lossless() };
        let y = decode(&encode(&x, &cfg, None).unwrap(), None).unwrap();
        mean_non_reference_snr(&x, &y, 0)
    };
    let (narrow, wide) = (fit_snr(1), fit_snr(4));
    // ridge terms make this approximate, not exact
    assert!(wide > narrow - 0.1, "L=4 {wide:.2} dB vs L=1 {narrow:.2} dB");
}
