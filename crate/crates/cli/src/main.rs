mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use arraycodec::codec::{decode, encode, train_codebooks, Bitstream, CodecCodebooks, RefMode, SpatialMode};
use arraycodec::metrics::{feature_dump_csv, spatial_feature, Evaluator, MetricReport};
use arraycodec::roomsim::{generate_dataset, Manifest};
use arraycodec::synth::write_corpus;
use arraycodec::wav::{read_audio, write_audio, SampleEncoding};
use arraycodec::AudioBuffer;
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "arraycodec", version, about = "Multichannel spatial audio codec and evaluation toolkit")]
struct Cli {
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set block_len=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic mono speech-like utterances.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 2.0)]
        min_secs: f64,
        #[arg(long, default_value_t = 6.0)]
        max_secs: f64,
    },
    /// Render reverberant array mixtures from a mono corpus.
    Simulate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Train reference and spatial codebooks on the mixtures of a manifest.
    TrainCodebooks {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode one WAV file or every mixture of a manifest.
    Encode {
        #[arg(long)]
        codebooks: Option<PathBuf>,
        #[arg(long, conflicts_with = "manifest", requires = "output")]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, requires = "output_dir")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Decode one bitstream or every `.scbs` file of a directory.
    Decode {
        #[arg(long)]
        codebooks: Option<PathBuf>,
        #[arg(long, conflicts_with = "input_dir", requires = "output")]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, requires = "output_dir")]
        input_dir: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Score decoded mixtures `<id>.wav` against the originals of a manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        decoded: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write beam-space features of both signals to this CSV.
        #[arg(long)]
        features: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        config.apply(o).with_context(|| format!("--set {o}"))?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;

    match cli.command {
        Command::SynthCorpus { out, count, min_secs, max_secs } => {
            config.echo_into(&out)?;
            let paths = write_corpus(&out, count, (min_secs, max_secs), config.codec.sample_rate, config.seed)?;
            println!("wrote {} utterances to {}", paths.len(), out.display());
        }
        Command::Simulate { corpus, out, count } => cmd_simulate(&config, &corpus, &out, count)?,
        Command::TrainCodebooks { manifest, out } => cmd_train(&config, &manifest, &out)?,
        Command::Encode { codebooks, input, output, manifest, output_dir } => {
            let books = load_books(&config, codebooks.as_deref())?;
            match (input, output, manifest, output_dir) {
                (Some(input), Some(output), None, _) => {
                    require_file(&input)?;
                    encode_one(&config, books.as_ref(), &input, &output)?;
                }
                (None, _, Some(manifest), Some(dir)) => cmd_encode_batch(&config, books.as_ref(), &manifest, &dir)?,
                _ => bail!("give either --input/--output or --manifest/--output-dir"),
            }
        }
        Command::Decode { codebooks, input, output, input_dir, output_dir } => {
            let books = match codebooks {
                Some(p) => {
                    require_file(&p)?;
                    Some(CodecCodebooks::load(&p)?)
                }
                None => None,
            };
            match (input, output, input_dir, output_dir) {
                (Some(input), Some(output), None, _) => {
                    require_file(&input)?;
                    decode_one(books.as_ref(), &input, &output)?;
                }
                (None, _, Some(input_dir), Some(dir)) => cmd_decode_batch(&config, books.as_ref(), &input_dir, &dir)?,
                _ => bail!("give either --input/--output or --input-dir/--output-dir"),
            }
        }
        Command::Eval { manifest, decoded, out, features } => {
            cmd_eval(&config, &manifest, &decoded, &out, features.as_deref())?
        }
    }
    Ok(())
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("{} does not exist or is not a file", path.display());
    }
    Ok(())
}

fn require_dir(path: &Path) -> Result<()> {
    if !path.is_dir() {
        bail!("{} does not exist or is not a directory", path.display());
    }
    Ok(())
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// Fails with the ids of every failed item, after all items were attempted.
fn report_failures(what: &str, results: Vec<(String, Result<()>)>) -> Result<()> {
    let failed: Vec<_> = results.into_iter().filter_map(|(id, r)| r.err().map(|e| (id, e))).collect();
    if failed.is_empty() {
        return Ok(());
    }
    for (id, e) in &failed {
        eprintln!("{id}: {e:#}");
    }
    let ids: Vec<&str> = failed.iter().map(|(id, _)| id.as_str()).collect();
    bail!("{what} failed for {} item(s): {}", ids.len(), ids.join(", "))
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    require_file(path)?;
    let manifest = Manifest::load(path)?;
    if manifest.entries.is_empty() {
        bail!("{} lists no utterances", path.display());
    }
    Ok(manifest)
}

fn cmd_simulate(config: &RunConfig, corpus: &Path, out: &Path, count: usize) -> Result<()> {
    require_dir(corpus)?;
    if count == 0 {
        bail!("--count must be positive");
    }
    config.echo_into(out)?;
    let manifest = generate_dataset(corpus, out, count, &config.dataset, config.seed)?;
    let rt60: Vec<f64> = manifest.entries.iter().map(|e| e.rt60).collect();
    let mean = rt60.iter().sum::<f64>() / rt60.len() as f64;
    let min = rt60.iter().copied().fold(f64::INFINITY, f64::min);
    let max = rt60.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    println!("{} mixtures written to {}", manifest.entries.len(), out.join("manifest.tsv").display());
    println!("RT60 mean {mean:.3} s, min {min:.3} s, max {max:.3} s");
    let mut hist = [0usize; 6];
    for e in &manifest.entries {
        hist[((e.doa_degrees / 30.0) as usize).min(5)] += 1;
    }
    let mut line = String::from("DoA histogram:");
    for (i, n) in hist.iter().enumerate() {
        let _ = write!(line, " [{}-{}) {n}", i * 30, i * 30 + 30);
    }
    println!("{line}");
    Ok(())
}

fn read_mixtures(config: &RunConfig, manifest: &Manifest) -> Result<Vec<AudioBuffer>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            read_audio(&e.mixture, Some(config.codec.sample_rate))
                .with_context(|| format!("{}: reading {}", e.id, e.mixture.display()))
        })
        .collect()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_train(config: &RunConfig, manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let out_dir = parent_dir(out);
    config.echo_into(out_dir)?;
    let mixtures = read_mixtures(config, &manifest)?;
    let books = train_codebooks(&mixtures, &config.codec, &config.train_params())?;
    books.save(out)?;
    println!(
        "trained {} bands x {} stages x {} entries per branch on {} mixtures",
        books.num_bands(),
        books.num_stages(),
        books.codebook_size(),
        mixtures.len()
    );
    println!("reference fingerprint {}", hex(&books.reference_fingerprint()));
    println!("spatial fingerprint   {}", hex(&books.spatial_fingerprint()));
    Ok(())
}

fn load_books(config: &RunConfig, path: Option<&Path>) -> Result<Option<CodecCodebooks>> {
    let needed = config.codec.ref_mode == RefMode::SubbandRvq || config.codec.spatial_mode == SpatialMode::Rvq;
    match path {
        Some(p) => {
            require_file(p)?;
            Ok(Some(CodecCodebooks::load(p)?))
        }
        None if needed => bail!("--codebooks is required unless ref_mode=passthrough and spatial_mode=bypass"),
        None => Ok(None),
    }
}

fn encode_one(config: &RunConfig, books: Option<&CodecCodebooks>, input: &Path, output: &Path) -> Result<()> {
    let x = read_audio(input, Some(config.codec.sample_rate))?;
    let bs = encode(&x, &config.codec, books)?;
    let bytes = bs.to_bytes()?;
    std::fs::write(output, &bytes).with_context(|| format!("writing {}", output.display()))?;
    let r = bs.rate_report();
    println!(
        "{}: {} bytes, payload {:.3} kbps (reference {:.3}, spatial {:.3})",
        output.display(),
        bytes.len(),
        r.payload_kbps(),
        r.reference_bps / 1000.0,
        r.spatial_bps / 1000.0
    );
    Ok(())
}

fn cmd_encode_batch(config: &RunConfig, books: Option<&CodecCodebooks>, manifest_path: &Path, dir: &Path) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    config.echo_into(dir)?;
    let results = manifest
        .entries
        .par_iter()
        .map(|e| (e.id.clone(), encode_one(config, books, &e.mixture, &dir.join(format!("{}.scbs", e.id)))))
        .collect();
    report_failures("encode", results)
}

fn decode_one(books: Option<&CodecCodebooks>, input: &Path, output: &Path) -> Result<()> {
    let bytes = std::fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let bs = Bitstream::from_bytes(&bytes)?;
    let y = decode(&bs, books)?;
    write_audio(output, &y, SampleEncoding::Float32)?;
    Ok(())
}

fn cmd_decode_batch(config: &RunConfig, books: Option<&CodecCodebooks>, input_dir: &Path, dir: &Path) -> Result<()> {
    require_dir(input_dir)?;
    let mut inputs: Vec<PathBuf> = std::fs::read_dir(input_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "scbs"))
        .collect();
    inputs.sort();
    if inputs.is_empty() {
        bail!("no .scbs files in {}", input_dir.display());
    }
    config.echo_into(dir)?;
    let results = inputs
        .par_iter()
        .map(|p| {
            let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let r = decode_one(books, p, &dir.join(format!("{stem}.wav")));
            (stem, r)
        })
        .collect();
    report_failures("decode", results)
}

fn cmd_eval(config: &RunConfig, manifest_path: &Path, decoded: &Path, out: &Path, features: Option<&Path>) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    require_dir(decoded)?;
    let m = &config.metrics;
    let evaluator = Evaluator::with_options(config.array()?, config.codec.sample_rate, m.beams, m.diagonal_loading, m.grid_step)?;
    config.echo_into(parent_dir(out))?;
    let sr = config.codec.sample_rate;

    type Item = (arraycodec::metrics::MetricRow, Option<[arraycodec::metrics::SpatialFeature; 2]>);
    let results: Vec<(String, Result<Item>)> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let r = (|| -> Result<Item> {
                let x = read_audio(&e.mixture, Some(sr))?;
                let path = decoded.join(format!("{}.wav", e.id));
                let y = read_audio(&path, Some(sr)).with_context(|| format!("reading {}", path.display()))?;
                let row = evaluator.evaluate(&e.id, &x, &y, Some(e.doa_degrees))?;
                let feats = match features {
                    Some(_) => Some([spatial_feature(&x, &evaluator.bank)?, spatial_feature(&y, &evaluator.bank)?]),
                    None => None,
                };
                Ok((row, feats))
            })();
            (e.id.clone(), r)
        })
        .collect();

    let mut report = MetricReport::default();
    let mut dump = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok((row, feats)) => {
                report.rows.push(row);
                if let Some([fx, fy]) = feats {
                    dump.push((format!("{id}:original"), fx));
                    dump.push((format!("{id}:decoded"), fy));
                }
            }
            Err(e) => failures.push((id, Err(e))),
        }
    }
    std::fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = features {
        std::fs::write(path, feature_dump_csv(&dump, &evaluator.bank, &m.feature_freqs))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(mean) = report.mean() {
        println!(
            "{} utterances: SS {:.4}, RTF error {:.4} rad, DoA error {:.2} deg, SNR {:.2} dB, beamformed SNR {:.2} dB",
            report.rows.len(),
            mean.spatial_similarity,
            mean.rtf_error,
            mean.doa_error,
            mean.snr,
            mean.beamformed_snr
        );
    }
    report_failures("eval", failures)
}
