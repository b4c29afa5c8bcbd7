use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sinet_core::checkpoint::Checkpoint;
use sinet_core::data::{Dataset, SegmentFeatures};
use sinet_core::decode::{caption_segments, references, DecodeOptions};
use sinet_core::metrics::evaluate;
use sinet_core::synth::{synth_dataset, SynthSpec};
use sinet_core::trainer::{resolve_model_config, train, TrainConfig};

/// Exit status for inputs that parse but break a domain rule, or do not parse.
const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 1;

#[derive(Parser, Debug)]
#[command(name = "sinet", version, about = "Object-interaction video captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic corpus and print its manifest path.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        segments: usize,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        #[arg(long, default_value_t = 3)]
        objects: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        /// Number of content words.
        #[arg(long, default_value_t = 8)]
        vocab: usize,
        /// Held-out segments; 0 validates on the training split.
        #[arg(long, default_value_t = 0)]
        val: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a manifest; writes model.ckpt, config.json and loss_log.json.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TrainConfig JSON; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption a split with beam search.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        /// Predictions JSON: segment id to caption.
        #[arg(long)]
        out: PathBuf,
        /// Attention trace JSON.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// References JSON for the captioned segments.
        #[arg(long)]
        refs_out: Option<PathBuf>,
    },
    /// Score predictions against references.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Val,
    /// Both splits; segments listed in both are captioned once.
    All,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(sinet_core::Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn pick<'a>(ds: &'a Dataset, split: Split) -> Vec<&'a SegmentFeatures> {
    let mut seen = std::collections::BTreeSet::new();
    let all: Vec<&SegmentFeatures> = match split {
        Split::Train => ds.train.iter().collect(),
        Split::Val => ds.val.iter().collect(),
        Split::All => ds.segments().collect(),
    };
    all.into_iter().filter(|s| seen.insert(s.segment_id.clone())).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { seed, segments, frames, objects, dim, vocab, val, out } => {
            let spec = SynthSpec { segments, frames, objects, dim, vocab_words: vocab, val };
            let manifest = synth_dataset(&out, seed, spec)?;
            println!("{}", manifest.display());
        }
        Command::Train { data, config, out } => {
            let config: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::default(),
            };
            let ds = load_dataset(&data)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let outcome = train(&config, &ds, |e| {
                eprintln!(
                    "epoch {:>4}  train {:.6}  val {:.6}  lr {:.1e}",
                    e.epoch, e.train_loss, e.val_loss, e.lr
                );
            })?;
            let resolved = TrainConfig {
                model: resolve_model_config(&config, &ds, &outcome.vocab),
                ..config
            };
            let ckpt_path = out.join("model.ckpt");
            Checkpoint::from_outcome(&outcome).save(&ckpt_path)?;
            write_json(&out.join("config.json"), &resolved)?;
            write_json(&out.join("loss_log.json"), &outcome.log)?;
            println!("{}", ckpt_path.display());
        }
        Command::Caption { ckpt, data, beam, split, out, trace, refs_out } => {
            let checkpoint =
                Checkpoint::load(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let model = checkpoint.model()?;
            let ds = load_dataset(&data)?;
            let segments = pick(&ds, split);
            let opts = DecodeOptions { beam, ..Default::default() };
            let (predictions, traces) =
                caption_segments(&model, &checkpoint.header.vocab, segments.iter().copied(), opts)?;
            write_json(&out, &predictions)?;
            if let Some(path) = trace {
                write_json(&path, &traces)?;
            }
            if let Some(path) = refs_out {
                write_json(&path, &references(segments.iter().copied()))?;
            }
        }
        Command::Eval { pred, refs, out } => {
            let predictions: BTreeMap<String, String> = read_json(&pred)?;
            let references: BTreeMap<String, Vec<String>> = read_json(&refs)?;
            let report = evaluate(&predictions, &references)?;
            write_json(&out, &report)?;
            println!(
                "B@1 {:.4}  B@2 {:.4}  B@3 {:.4}  B@4 {:.4}  ROUGE-L {:.4}  CIDEr-D {:.4}",
                report.bleu[0], report.bleu[1], report.bleu[2], report.bleu[3], report.rouge_l, report.cider_d
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let validation = err
                .chain()
                .find_map(|e| e.downcast_ref::<sinet_core::Error>())
                .is_some_and(sinet_core::Error::is_validation);
            ExitCode::from(if validation { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}
