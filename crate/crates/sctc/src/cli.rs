//! The `sctc` command line.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use sctc_core::ctc::{LabelSequence, Vocabulary};
use sctc_core::model::Model;
use sctc_core::synth::{generate_synthetic, Utterance};

use crate::checkpoint::Checkpoint;
use crate::config::{default_config_text, RunConfig};
use crate::eval::{self, score};
use crate::formats::{self, parse_manifest, read_dataset, read_split, read_vocab};
use crate::train::{fit, with_thread_pool, RunFiles};
use crate::{Error, Result};

pub const RESOLVED_CONFIG: &str = "config.resolved";

#[derive(Debug, Parser)]
#[command(name = "sctc", version, about = "Self-conditioned CTC encoders on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from the data.* keys of a config file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, metrics.jsonl and model.sctc.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy-decode one split; writes `id<TAB>tokens` lines.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Hypothesis file; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a hypothesis file against a manifest.
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Per-utterance JSON records; not written if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time batch-size-1 decoding.
    Latency {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Model to compare against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Time at most this many utterances.
        #[arg(long, default_value_t = 50)]
        limit: usize,
        #[arg(long, default_value_t = 3)]
        rounds: usize,
    },
    /// Show the greedy output of every intermediate prediction of one utterance.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        utt: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Print every config key with its default and description.
    Defaults,
}

fn load_model(path: &Path, vocab: &Vocabulary, feat_dim: Option<usize>) -> Result<Model> {
    let cp = Checkpoint::load(path)?;
    if &cp.config.vocab != vocab {
        return Err(Error::Usage(format!(
            "{}: model vocabulary differs from the dataset's",
            path.display()
        )));
    }
    if let Some(d) = feat_dim {
        if d != cp.config.feat_dim {
            return Err(Error::Usage(format!(
                "{}: model expects {}-dim features, dataset has {d}",
                path.display(),
                cp.config.feat_dim
            )));
        }
    }
    cp.to_model()
}

fn load_split(data: &Path, split: &str) -> Result<(Vocabulary, Vec<Utterance>)> {
    if !sctc_core::synth::SPLITS.contains(&split) {
        return Err(Error::Usage(format!("unknown split {split:?} (train, dev or test)")));
    }
    let vocab = read_vocab(&data.join("vocab.txt"))?;
    let utts = read_split(data, split, &vocab)?;
    Ok((vocab, utts))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn gen_data(spec: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(spec)?;
    let data = generate_synthetic(&cfg.data)?;
    create_dir(out)?;
    formats::write_dataset(out, &data)?;
    println!(
        "wrote {} train, {} dev, {} test utterances to {}",
        data.train.len(),
        data.dev.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

fn train(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let data = match &cfg.train.data_dir {
        Some(dir) => read_dataset(dir)?,
        None => generate_synthetic(&cfg.data)?,
    };
    let feat_dim = data
        .train
        .first()
        .map(|u| u.features.cols())
        .ok_or_else(|| Error::Usage("training split is empty".into()))?;
    create_dir(out)?;
    let resolved = out.join(RESOLVED_CONFIG);
    fs::write(&resolved, cfg.to_text()).map_err(Error::io(&resolved))?;
    let model = Model::new(cfg.model.model_config(data.vocab.clone(), feat_dim))?;
    let mut files = RunFiles::create(out)?;
    let outcome = fit(model, &cfg.train, &data, Some(&mut files))?;
    println!(
        "trained {} epochs; averaged epochs {:?}; dev TER {:.2}%; model at {}",
        outcome.epochs.len(),
        outcome.averaged,
        100.0 * outcome.dev_ter,
        out.join(crate::train::MODEL_FILE).display()
    );
    Ok(())
}

fn decode(model: &Path, data: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let (vocab, utts) = load_split(data, split)?;
    let feat_dim = utts.first().map(|u| u.features.cols());
    let model = load_model(model, &vocab, feat_dim)?;
    let hyps = eval::decode(&model, &utts, eval::DECODE_BATCH)?;
    let lines: Vec<String> = utts
        .iter()
        .zip(&hyps)
        .map(|(u, h)| format!("{}\t{}", u.id, vocab.decode(h).join(" ")))
        .collect();
    match out {
        Some(path) => formats::write_lines(path, &lines),
        None => {
            for l in lines {
                println!("{l}");
            }
            Ok(())
        }
    }
}

/// Reads `id<TAB>tokens` lines.
pub fn read_hypotheses(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, tokens) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: "expected <id>\\t<tokens>".into(),
        })?;
        out.push((id.to_string(), tokens.split_whitespace().map(str::to_string).collect()));
    }
    Ok(out)
}

fn score_files(hyp: &Path, reference: &Path, out: Option<&Path>) -> Result<()> {
    let refs = parse_manifest(reference)?;
    let hyps = read_hypotheses(hyp)?;
    // Symbols are interned in first-seen order; ids only need to be consistent.
    let mut symbols: Vec<String> = Vec::new();
    let mut intern = |tokens: &[String]| -> Result<LabelSequence> {
        let ids = tokens
            .iter()
            .map(|t| match symbols.iter().position(|s| s == t) {
                Some(i) => i + 1,
                None => {
                    symbols.push(t.clone());
                    symbols.len()
                }
            })
            .collect();
        Ok(LabelSequence::new(ids)?)
    };
    let mut items = Vec::with_capacity(refs.len());
    for r in &refs {
        let (_, h) = hyps.iter().find(|(id, _)| id == &r.id).ok_or_else(|| {
            Error::Usage(format!("{}: no hypothesis for utterance {}", hyp.display(), r.id))
        })?;
        items.push((r.id.as_str(), intern(h)?, intern(&r.tokens)?));
    }
    if let Some((id, _)) = hyps.iter().find(|(id, _)| !refs.iter().any(|r| &r.id == id)) {
        return Err(Error::Usage(format!(
            "{}: utterance {id} is not in {}",
            hyp.display(),
            reference.display()
        )));
    }
    let vocab = if symbols.is_empty() {
        Vocabulary::new(&["_"])?
    } else {
        Vocabulary::new(&symbols)?
    };
    let report = score(&vocab, items.iter().map(|(id, h, r)| (*id, h, r)));
    if let Some(path) = out {
        formats::write_lines(path, &report.records())?;
    }
    println!("{}", report.summary());
    Ok(())
}

fn latency(
    model: &Path,
    data: &Path,
    split: &str,
    baseline: Option<&Path>,
    limit: usize,
    rounds: usize,
) -> Result<()> {
    let (vocab, utts) = load_split(data, split)?;
    let utts = &utts[..limit.min(utts.len())];
    let feat_dim = utts.first().map(|u| u.features.cols());
    let model = load_model(model, &vocab, feat_dim)?;
    match baseline {
        None => {
            let report = eval::measure_latency(&model, utts, rounds)?;
            println!("{}", report.summary());
            println!("environment: {}", report.environment);
        }
        Some(path) => {
            let base = load_model(path, &vocab, feat_dim)?;
            let (ratio, m, b) = eval::latency_ratio(&model, &base, utts, rounds)?;
            println!("{}", m.summary());
            println!("{}", b.summary());
            println!("ratio {ratio:.3} ({} over {})", m.mode, b.mode);
            println!("environment: {}", m.environment);
        }
    }
    Ok(())
}

fn inspect(model: &Path, utt: &str, data: &Path, split: &str) -> Result<()> {
    let (vocab, utts) = load_split(data, split)?;
    let u = utts
        .iter()
        .find(|u| u.id == utt)
        .ok_or_else(|| Error::Usage(format!("no utterance {utt:?} in split {split}")))?;
    let model = load_model(model, &vocab, Some(u.features.cols()))?;
    print!("{}", eval::dump_intermediate(&model, u)?.render());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Train { config, out } => with_thread_pool(|| train(&config, &out)),
        Command::Decode {
            model,
            data,
            split,
            out,
        } => with_thread_pool(|| decode(&model, &data, &split, out.as_deref())),
        Command::Score {
            hyp,
            reference,
            out,
        } => score_files(&hyp, &reference, out.as_deref()),
        Command::Latency {
            model,
            data,
            split,
            baseline,
            limit,
            rounds,
        } => latency(&model, &data, &split, baseline.as_deref(), limit, rounds),
        Command::Inspect {
            model,
            utt,
            data,
            split,
        } => inspect(&model, &utt, &data, &split),
        Command::Defaults => {
            print!("{}", default_config_text());
            Ok(())
        }
    }
}
