//! Synthetic sequence-transduction task with context-predictable tokens.
//!
//! Tokens come in acoustically confusable pairs: the prototype feature
//! vectors of a pair differ by only `pair_separation · σ`, so a frame-local
//! classifier cannot tell them apart reliably. Label sequences follow a
//! deterministic grammar instead: with `h = ⌈T/2⌉`, the first `h` tokens are
//! free and every later token is `rule[y[i−1]][y[i−h]]`. A model that sees
//! its neighbours' predictions can therefore resolve what the features alone
//! leave ambiguous.
//!
//! No token is ever followed by itself or by its partner, so adjacent tokens
//! always sound different.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ctc::{LabelSequence, Vocabulary};
use crate::encoder::PadMask;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub confusable_pairs: usize,
    pub train_utts: usize,
    pub dev_utts: usize,
    pub test_utts: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    pub feat_dim: usize,
    /// Standard deviation σ of the per-frame Gaussian noise.
    pub noise: f64,
    /// Distance between the prototypes of a confusable pair, in units of σ.
    pub pair_separation: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            vocab_size: 12,
            confusable_pairs: 4,
            train_utts: 2000,
            dev_utts: 200,
            test_utts: 200,
            min_tokens: 6,
            max_tokens: 14,
            min_frames_per_token: 2,
            max_frames_per_token: 3,
            feat_dim: 16,
            noise: 0.5,
            pair_separation: 1.0,
            seed: 1,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size < 3 {
            return bad(format!("vocab_size must be >= 3, got {}", self.vocab_size));
        }
        if 2 * self.confusable_pairs > self.vocab_size {
            return bad(format!(
                "{} confusable pairs need more than {} tokens",
                self.confusable_pairs, self.vocab_size
            ));
        }
        if self.min_tokens < 1 || self.min_tokens > self.max_tokens {
            return bad(format!(
                "token range [{}, {}] invalid",
                self.min_tokens, self.max_tokens
            ));
        }
        if self.min_frames_per_token < 2 || self.min_frames_per_token > self.max_frames_per_token {
            return bad(format!(
                "frames-per-token range [{}, {}] invalid (minimum 2)",
                self.min_frames_per_token, self.max_frames_per_token
            ));
        }
        if self.feat_dim == 0 {
            return bad("feat_dim must be >= 1".into());
        }
        if !(self.noise >= 0.0) || !(self.pair_separation >= 0.0) {
            return bad("noise and pair_separation must be >= 0".into());
        }
        Ok(())
    }
}

/// Token symbols `a, b, c, …` (or `t0, t1, …` past 26 tokens).
pub fn token_symbols(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            if n <= 26 {
                char::from(b'a' + i as u8).to_string()
            } else {
                format!("t{i}")
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[S, D_feat]`.
    pub features: Tensor,
    pub labels: LabelSequence,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&[Utterance]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

fn stream_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0xA076_1D64_78BD_642F) ^ index.wrapping_mul(0xE703_7ED1_A0B4_28DB);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Prototypes and grammar derived from a spec. Class ids are 1-based as in
/// [`Vocabulary`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    pub vocab: Vocabulary,
    /// `[|V|, D_feat]`, row `i` belongs to class `i + 1`.
    pub prototypes: Tensor,
    partner: Vec<Option<usize>>,
    rule: Vec<usize>,
}

impl SyntheticTask {
    pub fn new(spec: &SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.vocab_size;
        let vocab = Vocabulary::new(&token_symbols(n))?;
        let mut partner = vec![None; n + 1];
        for p in 0..spec.confusable_pairs {
            let (a, b) = (2 * p + 1, 2 * p + 2);
            partner[a] = Some(b);
            partner[b] = Some(a);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, 10, 0));
        let d = spec.feat_dim;
        let mut protos = vec![0.0; n * d];
        for class in 1..=n {
            let row = (class - 1) * d;
            match partner[class] {
                Some(first) if first < class => {
                    let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = libm::sqrt(dir.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
                    let step = spec.pair_separation * spec.noise / norm;
                    dir.iter_mut().for_each(|v| *v *= step);
                    for j in 0..d {
                        protos[row + j] = protos[(first - 1) * d + j] + dir[j];
                    }
                }
                _ => {
                    for j in 0..d {
                        protos[row + j] = rng.sample(StandardNormal);
                    }
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, 11, 0));
        let mut rule = vec![0; (n + 1) * (n + 1)];
        for prev in 1..=n {
            let allowed: Vec<usize> = (1..=n)
                .filter(|&c| c != prev && Some(c) != partner[prev])
                .collect();
            for far in 1..=n {
                rule[prev * (n + 1) + far] = allowed[rng.random_range(0..allowed.len())];
            }
        }

        Ok(SyntheticTask {
            spec: spec.clone(),
            vocab,
            prototypes: Tensor::from_vec(&[n, d], protos)?,
            partner,
            rule,
        })
    }

    /// Confusable partner of a class, if it has one.
    pub fn partner(&self, class: usize) -> Option<usize> {
        self.partner.get(class).copied().flatten()
    }

    /// Token following `prev` when the token `⌈T/2⌉` positions back is `far`.
    pub fn rule(&self, prev: usize, far: usize) -> usize {
        self.rule[prev * (self.spec.vocab_size + 1) + far]
    }

    fn allowed_after(&self, prev: usize) -> Vec<usize> {
        (1..=self.spec.vocab_size)
            .filter(|&c| c != prev && Some(c) != self.partner(prev))
            .collect()
    }

    fn sample_labels(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let t = rng.random_range(self.spec.min_tokens..=self.spec.max_tokens);
        let h = t.div_ceil(2);
        let mut y: Vec<usize> = Vec::with_capacity(t);
        for i in 0..t {
            let next = if i == 0 {
                rng.random_range(1..=self.spec.vocab_size)
            } else if i < h {
                let allowed = self.allowed_after(y[i - 1]);
                allowed[rng.random_range(0..allowed.len())]
            } else {
                self.rule(y[i - 1], y[i - h])
            };
            y.push(next);
        }
        y
    }

    /// Utterance `index` of split `split` (0 train, 1 dev, 2 test).
    pub fn utterance(&self, split: usize, index: usize) -> Result<Utterance> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.spec.seed, split as u64, index as u64));
        let labels = self.sample_labels(&mut rng);
        let d = self.spec.feat_dim;
        let mut feats = Vec::new();
        for &class in &labels {
            let frames =
                rng.random_range(self.spec.min_frames_per_token..=self.spec.max_frames_per_token);
            let proto = self.prototypes.row(class - 1);
            for _ in 0..frames {
                for &p in proto {
                    let noise: f64 = rng.sample(StandardNormal);
                    // stored as f32 on disk; keep memory and disk identical
                    feats.push((p + self.spec.noise * noise) as f32 as f64);
                }
            }
        }
        let frames = feats.len() / d;
        Ok(Utterance {
            id: format!("{}-{index:05}", SPLITS[split]),
            features: Tensor::from_vec(&[frames, d], feats)?,
            labels: LabelSequence::new(labels)?,
        })
    }

    /// True when `labels` could have been produced by the grammar.
    pub fn follows_grammar(&self, labels: &[usize]) -> bool {
        let t = labels.len();
        let h = t.div_ceil(2);
        let n = self.spec.vocab_size;
        labels.iter().all(|&c| (1..=n).contains(&c))
            && labels
                .windows(2)
                .all(|w| w[0] != w[1] && Some(w[1]) != self.partner(w[0]))
            && (h..t).all(|i| labels[i] == self.rule(labels[i - 1], labels[i - h]))
    }
}

/// Generates train, dev and test splits. A pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    let task = SyntheticTask::new(spec)?;
    let split = |s: usize, n: usize| (0..n).map(|i| task.utterance(s, i)).collect::<Result<Vec<_>>>();
    Ok(Dataset {
        vocab: task.vocab.clone(),
        train: split(0, spec.train_utts)?,
        dev: split(1, spec.dev_utts)?,
        test: split(2, spec.test_utts)?,
    })
}

/// Padded group of utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B·P, D_feat]`, zero in padded rows.
    pub features: Tensor,
    pub mask: PadMask,
    pub labels: Vec<LabelSequence>,
}

impl Batch {
    pub fn from_utterances(utts: &[&Utterance]) -> Result<Self> {
        let first = utts.first().ok_or(Error::Empty("batch"))?;
        let d = first.features.cols();
        let padded = utts.iter().map(|u| u.frames()).max().unwrap_or(0);
        let mut data = vec![0.0; utts.len() * padded * d];
        for (b, u) in utts.iter().enumerate() {
            if u.features.cols() != d {
                return Err(Error::ShapeMismatch {
                    op: "batch",
                    lhs: first.features.shape().to_vec(),
                    rhs: u.features.shape().to_vec(),
                });
            }
            data[b * padded * d..][..u.features.len()].copy_from_slice(u.features.data());
        }
        Ok(Batch {
            ids: utts.iter().map(|u| u.id.clone()).collect(),
            features: Tensor::from_vec(&[utts.len() * padded, d], data)?,
            mask: PadMask::new(utts.iter().map(|u| u.frames()).collect(), padded)?,
            labels: utts.iter().map(|u| u.labels.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn padded_frames(&self) -> usize {
        self.mask.lengths().iter().map(|&l| self.mask.padded_len() - l).sum()
    }
}

/// Sorts by length, cuts into batches of at most `batch_size`, then
/// shuffles the batch order with `seed`.
pub fn make_batches(utts: &[Utterance], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.sort_by_key(|&i| utts[i].frames());
    let mut batches = order
        .chunks(batch_size)
        .map(|chunk| Batch::from_utterances(&chunk.iter().map(|&i| &utts[i]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(batches)
}
