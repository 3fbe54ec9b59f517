//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default (see [`KEYS`]); unknown and repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sctc_core::encoder::Activation;
use sctc_core::model::{ModelConfig, Mode};
use sctc_core::synth::SyntheticTaskSpec;
use sctc_core::ctc::Vocabulary;

use crate::{Error, Result};

/// `(key, default, description)` for every accepted key, in echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("model.mode", "selfcond", "plain-ctc, interctc or selfcond"),
    ("model.layers", "18", "encoder layers L"),
    ("model.dim", "256", "model dimension D"),
    ("model.heads", "4", "attention heads"),
    ("model.ffn_dim", "1024", "feed-forward inner dimension"),
    ("model.k", "5", "intermediate predictions K (ignored for plain-ctc)"),
    ("model.lambda", "0.5", "weight of the intermediate losses"),
    ("model.activation", "relu", "feed-forward activation: relu or gelu"),
    ("model.seed", "1", "parameter initialization seed"),
    ("data.vocab_size", "12", "number of tokens, blank excluded"),
    ("data.confusable_pairs", "4", "token pairs with near-identical prototypes"),
    ("data.train_utts", "2000", "training utterances"),
    ("data.dev_utts", "200", "development utterances"),
    ("data.test_utts", "200", "test utterances"),
    ("data.min_tokens", "6", "shortest label sequence"),
    ("data.max_tokens", "14", "longest label sequence"),
    ("data.min_frames_per_token", "2", "fewest frames per token (>= 2)"),
    ("data.max_frames_per_token", "3", "most frames per token"),
    ("data.feat_dim", "16", "feature dimension"),
    ("data.noise", "0.5", "per-frame Gaussian noise sigma"),
    ("data.pair_separation", "1.0", "prototype distance within a pair, in sigmas"),
    ("data.seed", "1", "dataset seed"),
    ("train.data_dir", "", "dataset directory; empty generates data.* in memory"),
    ("train.epochs", "20", "passes over the training split"),
    ("train.batch_size", "8", "utterances per micro-batch"),
    ("train.accum_n", "2", "micro-batches per optimizer step"),
    ("train.warmup", "1000", "warmup steps of the learning-rate schedule"),
    ("train.lr_base", "1.0", "learning-rate scale"),
    ("train.average_top_n", "10", "checkpoints averaged into the final model"),
    ("train.seed", "1", "batch-order seed"),
    ("train.max_steps", "0", "stop after this many optimizer steps; 0 means no limit"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub mode: Mode,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub k: usize,
    pub lambda: f64,
    pub activation: Activation,
    pub seed: u64,
}

impl ModelSettings {
    pub fn model_config(&self, vocab: Vocabulary, feat_dim: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            feat_dim,
            vocab,
            k: self.k,
            lambda: self.lambda,
            mode: self.mode,
            activation: self.activation,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub data_dir: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub accum_n: usize,
    pub warmup: u64,
    pub lr_base: f64,
    pub average_top_n: usize,
    pub seed: u64,
    pub max_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSettings,
    pub data: SyntheticTaskSpec,
    pub train: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_pairs(&[]).expect("defaults are valid")
    }
}

pub fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Gelu => "gelu",
    }
}

pub fn parse_activation(s: &str) -> Result<Activation> {
    match s {
        "relu" => Ok(Activation::Relu),
        "gelu" => Ok(Activation::Gelu),
        other => Err(Error::Config(format!("unknown activation {other:?}"))),
    }
}

/// Reads `key=value` lines into a map. Keys are not checked against
/// [`KEYS`]; repeated keys are.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if out.iter().any(|(k, _)| k == key) {
            return Err(err(format!("duplicate key {key}")));
        }
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

struct Resolver {
    values: BTreeMap<&'static str, String>,
}

impl Resolver {
    fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = &self.values[key];
        raw.parse()
            .map_err(|e| Error::Config(format!("{key}={raw}: {e}")))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        RunConfig::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        RunConfig::from_pairs(&parse_pairs(text, path)?)
    }

    /// Defaults overridden by `pairs`.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut values: BTreeMap<&'static str, String> =
            KEYS.iter().map(|&(k, d, _)| (k, d.to_string())).collect();
        for (key, value) in pairs {
            let slot = KEYS
                .iter()
                .find(|(k, _, _)| k == key)
                .ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
            values.insert(slot.0, value.clone());
        }
        let r = Resolver { values };
        let data_dir: String = r.get("train.data_dir")?;
        let cfg = RunConfig {
            model: ModelSettings {
                mode: r.get("model.mode")?,
                layers: r.get("model.layers")?,
                dim: r.get("model.dim")?,
                heads: r.get("model.heads")?,
                ffn_dim: r.get("model.ffn_dim")?,
                k: r.get("model.k")?,
                lambda: r.get("model.lambda")?,
                activation: parse_activation(&r.values["model.activation"])?,
                seed: r.get("model.seed")?,
            },
            data: SyntheticTaskSpec {
                vocab_size: r.get("data.vocab_size")?,
                confusable_pairs: r.get("data.confusable_pairs")?,
                train_utts: r.get("data.train_utts")?,
                dev_utts: r.get("data.dev_utts")?,
                test_utts: r.get("data.test_utts")?,
                min_tokens: r.get("data.min_tokens")?,
                max_tokens: r.get("data.max_tokens")?,
                min_frames_per_token: r.get("data.min_frames_per_token")?,
                max_frames_per_token: r.get("data.max_frames_per_token")?,
                feat_dim: r.get("data.feat_dim")?,
                noise: r.get("data.noise")?,
                pair_separation: r.get("data.pair_separation")?,
                seed: r.get("data.seed")?,
            },
            train: TrainSettings {
                data_dir: (!data_dir.is_empty()).then(|| PathBuf::from(data_dir)),
                epochs: r.get("train.epochs")?,
                batch_size: r.get("train.batch_size")?,
                accum_n: r.get("train.accum_n")?,
                warmup: r.get("train.warmup")?,
                lr_base: r.get("train.lr_base")?,
                average_top_n: r.get("train.average_top_n")?,
                seed: r.get("train.seed")?,
                max_steps: r.get("train.max_steps")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.accum_n == 0 || t.average_top_n == 0 {
            return Err(Error::Config(
                "train.epochs, train.batch_size, train.accum_n and train.average_top_n must be >= 1"
                    .into(),
            ));
        }
        if !(t.lr_base > 0.0) {
            return Err(Error::Config("train.lr_base must be > 0".into()));
        }
        self.data.validate()?;
        let vocab = Vocabulary::new(&sctc_core::synth::token_symbols(self.data.vocab_size))?;
        self.model.model_config(vocab, self.data.feat_dim).validate()?;
        Ok(())
    }

    /// Every key with its resolved value, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let d = &self.data;
        let t = &self.train;
        let values: Vec<String> = vec![
            m.mode.to_string(),
            m.layers.to_string(),
            m.dim.to_string(),
            m.heads.to_string(),
            m.ffn_dim.to_string(),
            m.k.to_string(),
            m.lambda.to_string(),
            activation_name(m.activation).to_string(),
            m.seed.to_string(),
            d.vocab_size.to_string(),
            d.confusable_pairs.to_string(),
            d.train_utts.to_string(),
            d.dev_utts.to_string(),
            d.test_utts.to_string(),
            d.min_tokens.to_string(),
            d.max_tokens.to_string(),
            d.min_frames_per_token.to_string(),
            d.max_frames_per_token.to_string(),
            d.feat_dim.to_string(),
            d.noise.to_string(),
            d.pair_separation.to_string(),
            d.seed.to_string(),
            t.data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.accum_n.to_string(),
            t.warmup.to_string(),
            t.lr_base.to_string(),
            t.average_top_n.to_string(),
            t.seed.to_string(),
            t.max_steps.to_string(),
        ];
        let mut out = String::new();
        for ((key, _, _), value) in KEYS.iter().zip(values) {
            writeln!(out, "{key}={value}").unwrap();
        }
        out
    }
}

/// The keys and defaults as a commented config file.
pub fn default_config_text() -> String {
    let mut out = String::new();
    for (key, default, doc) in KEYS {
        writeln!(out, "# {doc}\n{key}={default}").unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("run.cfg"))
    }

    #[test]
    fn defaults_and_overrides() {
        let c = parse("# comment\n\nmodel.mode = plain-ctc\ntrain.epochs=3\n").unwrap();
        assert_eq!(c.model.mode, Mode::PlainCtc);
        assert_eq!(c.train.epochs, 3);
        assert_eq!((c.model.layers, c.model.dim, c.model.heads, c.model.k), (18, 256, 4, 5));
        assert_eq!(c.train.data_dir, None);
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        assert!(parse("model.depth=3\n").unwrap_err().to_string().contains("unknown key"));
        let err = parse("model.k=1\nmodel.k=2\n").unwrap_err().to_string();
        assert!(err.contains("run.cfg:2") && err.contains("duplicate"), "{err}");
        assert!(parse("model.k\n").is_err());
        assert!(parse("model.layers=six\n").is_err());
    }

    #[test]
    fn invalid_combinations_rejected() {
        assert!(parse("model.k=18\n").is_err());
        assert!(parse("model.dim=63\n").is_err());
        assert!(parse("train.accum_n=0\n").is_err());
    }

    #[test]
    fn resolved_text_round_trips() {
        let c = parse("model.lambda=0.3\ntrain.data_dir=/tmp/x\ndata.noise=0.1\n").unwrap();
        let text = c.to_text();
        assert_eq!(parse(&text).unwrap(), c);
        assert_eq!(text.lines().count(), KEYS.len());
        assert_eq!(parse(&default_config_text()).unwrap(), RunConfig::default());
    }
}
