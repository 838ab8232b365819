use std::path::Path;
use std::process::{Command, Output};

fn arraycodec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arraycodec")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = arraycodec(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = arraycodec(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 8] = ["--set", "codebook_size=16", "--set", "kmeans_iters=5", "--set", "rt60_max=0.4", "--set", "max_source_seconds=1.5"];

/// Corpus and a 3-mixture dataset under `root`.
fn dataset(root: &Path) {
    let corpus = root.join("corpus");
    ok(&["synth-corpus", "--out", s(&corpus), "--count", "3", "--min-secs", "1", "--max-secs", "1.5", "--seed", "5"]);
    let data = root.join("data");
    let mut args = vec!["simulate", "--corpus", s(&corpus), "--out", s(&data), "--count", "3", "--seed", "5"];
    args.extend(SMALL);
    let stdout = ok(&args);
    assert!(stdout.contains("RT60 mean"), "{stdout}");
    assert!(stdout.contains("DoA histogram"), "{stdout}");
}

#[test]
fn simulate_train_encode_decode_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    dataset(root);
    let manifest = root.join("data/manifest.tsv");
    let m = std::fs::read_to_string(&manifest).unwrap();
    assert_eq!(m.lines().filter(|l| !l.starts_with('#')).count(), 3);
    assert!(root.join("data/effective_config.txt").is_file());
    for line in m.lines().skip(1) {
        let rt60: f64 = line.split('\t').nth(4).unwrap().parse().unwrap();
        assert!((0.0..=0.7).contains(&rt60));
    }

    let books = root.join("books/codebooks.sccb");
    let mut train = vec!["train-codebooks", "--manifest", s(&manifest), "--out", s(&books)];
    train.extend(SMALL);
    let stdout = ok(&train);
    assert!(stdout.contains("6 bands x 2 stages"), "{stdout}");
    let first = std::fs::read(&books).unwrap();
    ok(&train);
    assert_eq!(first, std::fs::read(&books).unwrap(), "retraining changed the codebooks");

    let enc = root.join("enc");
    let mut encode = vec!["encode", "--codebooks", s(&books), "--manifest", s(&manifest), "--output-dir", s(&enc)];
    encode.extend(SMALL);
    let stdout = ok(&encode);
    // 16 entries -> 4 bits, 6 bands, 2 stages, 50 frames/s per branch
    assert!(stdout.contains("payload 4.800 kbps (reference 2.400, spatial 2.400)"), "{stdout}");
    let bits = std::fs::read(enc.join("utt00000.scbs")).unwrap();
    ok(&encode);
    assert_eq!(bits, std::fs::read(enc.join("utt00000.scbs")).unwrap());

    let dec = root.join("dec");
    ok(&["decode", "--codebooks", s(&books), "--input-dir", s(&enc), "--output-dir", s(&dec)]);
    for i in 0..3 {
        assert!(dec.join(format!("utt{i:05}.wav")).is_file());
    }

    let csv = root.join("report/metrics.csv");
    let feats = root.join("report/features.csv");
    ok(&["eval", "--manifest", s(&manifest), "--decoded", s(&dec), "--out", s(&csv), "--features", s(&feats)]);
    let report = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "id,spatial_similarity,rtf_error,doa_error,snr,beamformed_snr");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("mean,"));
    let dump = std::fs::read_to_string(&feats).unwrap();
    // 3 utterances x 2 signals x 2 frequencies x 50 beams
    assert_eq!(dump.lines().count(), 1 + 3 * 2 * 2 * 50);
    assert!(dump.lines().nth(1).unwrap().starts_with("utt00000:original,1000,1,"));

    // codebooks trained with another seed carry other fingerprints
    let other = root.join("books/other.sccb");
    let mut retrain = vec!["train-codebooks", "--manifest", s(&manifest), "--out", s(&other), "--seed", "99"];
    retrain.extend(SMALL);
    ok(&retrain);
    let err = fails(&["decode", "--codebooks", s(&other), "--input", s(&enc.join("utt00000.scbs")), "--output", s(&root.join("x.wav"))]);
    assert!(err.contains("fingerprint"), "{err}");
}

#[test]
fn eval_of_identical_signals_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    dataset(root);
    let csv = root.join("identity.csv");
    ok(&["eval", "--manifest", s(&root.join("data/manifest.tsv")), "--decoded", s(&root.join("data/mixtures")), "--out", s(&csv)]);
    let report = std::fs::read_to_string(&csv).unwrap();
    for line in report.lines().skip(1) {
        let v: Vec<f64> = line.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        assert!((v[0] - 1.0).abs() < 1e-9, "{line}");
        assert!(v[1] < 1e-6, "{line}");
        assert_eq!(v[2], 0.0, "{line}");
        assert_eq!(v[3], 100.0, "{line}");
        assert_eq!(v[4], 100.0, "{line}");
    }
}

#[test]
fn default_config_reports_twelve_kbps() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    dataset(root);
    let manifest = root.join("data/manifest.tsv");
    let books = root.join("full.sccb");
    ok(&["train-codebooks", "--manifest", s(&manifest), "--out", s(&books), "--set", "kmeans_iters=1"]);
    let stdout = ok(&[
        "encode",
        "--codebooks",
        s(&books),
        "--input",
        s(&root.join("data/mixtures/utt00001.wav")),
        "--output",
        s(&root.join("one.scbs")),
    ]);
    assert!(stdout.contains("payload 12.000 kbps (reference 6.000, spatial 6.000)"), "{stdout}");
}

#[test]
fn lossless_round_trip_without_codebooks() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    dataset(root);
    let input = root.join("data/mixtures/utt00002.wav");
    let bits = root.join("l.scbs");
    let lossless = ["--set", "ref_mode=passthrough", "--set", "spatial_mode=bypass"];
    let mut args = vec!["encode", "--input", s(&input), "--output", s(&bits)];
    args.extend(lossless);
    ok(&args);
    let err = fails(&["encode", "--input", s(&input), "--output", s(&bits)]);
    assert!(err.contains("--codebooks"), "{err}");
    let out = root.join("l.wav");
    ok(&["decode", "--input", s(&bits), "--output", s(&out)]);
    assert!(out.is_file());
}

#[test]
fn bad_inputs_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let err = fails(&["simulate", "--corpus", s(&root.join("missing")), "--out", s(&root.join("o")), "--count", "2"]);
    assert!(err.contains("missing"), "{err}");

    let empty = root.join("empty.tsv");
    std::fs::write(&empty, "# id\tmixture\trir\tdoa_deg\trt60_s\n").unwrap();
    let err = fails(&["train-codebooks", "--manifest", s(&empty), "--out", s(&root.join("b.sccb"))]);
    assert!(err.contains("no utterances"), "{err}");

    let err = fails(&["encode", "--set", "codebook_sise=3", "--input", "a.wav", "--output", "b.scbs"]);
    assert!(err.contains("unknown configuration key"), "{err}");

    let cfg = root.join("run.cfg");
    std::fs::write(&cfg, "seed = 1\nblock_len = x\n").unwrap();
    let err = fails(&["--config", s(&cfg), "synth-corpus", "--out", s(&root.join("c")), "--count", "1"]);
    assert!(err.contains("run.cfg:2"), "{err}");
}

#[test]
fn partial_failures_name_the_items() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    dataset(root);
    let dec = root.join("dec");
    std::fs::create_dir_all(&dec).unwrap();
    for id in ["utt00000", "utt00002"] {
        std::fs::copy(root.join(format!("data/mixtures/{id}.wav")), dec.join(format!("{id}.wav"))).unwrap();
    }
    let csv = root.join("r.csv");
    let err = fails(&["eval", "--manifest", s(&root.join("data/manifest.tsv")), "--decoded", s(&dec), "--out", s(&csv)]);
    assert!(err.contains("eval failed for 1 item(s): utt00001"), "{err}");
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);
}

#[test]
fn simulate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    ok(&["synth-corpus", "--out", s(&corpus), "--count", "4", "--min-secs", "0.5", "--max-secs", "1", "--seed", "1"]);
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&["simulate", "--corpus", s(&corpus), "--out", s(&out), "--count", "4", "--seed", "11", "--set", "rt60_max=0.3"]);
        (std::fs::read(out.join("manifest.tsv")).unwrap(), std::fs::read(out.join("mixtures/utt00003.wav")).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}
