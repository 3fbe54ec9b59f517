//! Connectionist temporal classification.
//!
//! The blank symbol always sits at index 0 of the extended vocabulary, so a
//! vocabulary of `n` tokens yields posterior grids with `n + 1` columns and
//! token ids `1..=n`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result, Tensor};

/// Column of the blank symbol in every posterior grid.
pub const BLANK: usize = 0;

/// Stand-in for `ln 0` in the dynamic programs.
pub const LOG_ZERO: f64 = -1e30;

// Anything below this is treated as an exact zero probability.
const LOG_ZERO_CUTOFF: f64 = LOG_ZERO / 2.0;

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo <= LOG_ZERO_CUTOFF {
        return hi;
    }
    hi + libm::log1p(libm::exp(lo - hi))
}

/// Token inventory, excluding the implicit blank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidConfig("vocabulary is empty".into()));
        }
        let mut out: Vec<String> = Vec::with_capacity(tokens.len());
        for t in tokens {
            let t = t.as_ref();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidConfig(format!("invalid token symbol {t:?}")));
            }
            if out.iter().any(|o| o == t) {
                return Err(Error::InvalidConfig(format!("duplicate token symbol {t:?}")));
            }
            out.push(t.to_string());
        }
        Ok(Vocabulary { tokens: out })
    }

    /// `|V|`, the number of real tokens.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `|V'| = |V| + 1`, the width of a posterior grid.
    pub fn num_classes(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Class id (`>= 1`) of a token symbol.
    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == symbol).map(|i| i + 1)
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        if id == BLANK {
            return None;
        }
        self.tokens.get(id - 1).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, symbols: &[S]) -> Result<LabelSequence> {
        let ids = symbols
            .iter()
            .map(|s| {
                self.id(s.as_ref())
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown token {:?}", s.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        LabelSequence::new(ids)
    }

    pub fn decode(&self, labels: &LabelSequence) -> Vec<&str> {
        labels
            .ids()
            .iter()
            .map(|&i| self.symbol(i).unwrap_or("?"))
            .collect()
    }
}

/// Target sequence of class ids; never contains the blank.
#[derive(Debug, Clone, PartialEq, Eq, Default, Hash)]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.contains(&BLANK) {
            return Err(Error::Contract("label sequence contains the blank".into()));
        }
        Ok(LabelSequence(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of positions where a label equals its predecessor.
    pub fn adjacent_repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Fewest frames that can emit this sequence: one per label plus a
    /// separating blank between each repeated pair.
    pub fn min_frames(&self) -> usize {
        self.len() + self.adjacent_repeats()
    }
}

/// Frame-level symbol sequence over the extended vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment(pub Vec<usize>);

/// Per-frame log posteriors, shape `[S, |V'|]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid {
    log_probs: Tensor,
}

impl PosteriorGrid {
    /// Wraps log posteriors, checking that each row is normalized to 1e-9.
    pub fn new(log_probs: Tensor) -> Result<Self> {
        if log_probs.shape().len() != 2 || log_probs.cols() < 2 {
            return Err(Error::InvalidShape(format!(
                "posterior grid must be [S, C>=2], got {:?}",
                log_probs.shape()
            )));
        }
        for s in 0..log_probs.rows() {
            let total: f64 = log_probs.row(s).iter().map(|&v| libm::exp(v)).sum();
            if !(libm::fabs(total - 1.0) <= 1e-9) {
                return Err(Error::Contract(format!(
                    "row {s} of posterior grid sums to {total}"
                )));
            }
        }
        Ok(PosteriorGrid { log_probs })
    }

    /// Normalizes raw scores with a log-softmax over each row.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        Self::new(log_softmax_rows(logits))
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn classes(&self) -> usize {
        self.log_probs.cols()
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    pub fn into_tensor(self) -> Tensor {
        self.log_probs
    }
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + libm::log(row.iter().map(|&v| libm::exp(v - m)).sum::<f64>());
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Merges runs of identical symbols, then drops blanks.
pub fn collapse(alignment: &[usize]) -> LabelSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &a in alignment {
        if Some(a) != prev && a != BLANK {
            out.push(a);
        }
        prev = Some(a);
    }
    LabelSequence(out)
}

/// Result of one forward-backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcOutcome {
    /// `-ln P(y | grid)`, or `+inf` when no alignment exists.
    pub loss: f64,
    /// Posterior probability that frame `s` emits class `k`, `[S, C]`
    /// row-major. All zeros when infeasible.
    pub occupancy: Vec<f64>,
    pub feasible: bool,
}

/// Log-space forward-backward over the blank-interleaved state sequence.
///
/// `log_probs` is a row-major `[frames, classes]` slice. Rows need not be
/// normalized; the occupancy is always the gradient of `-loss` with respect
/// to `log_probs`.
pub fn forward_backward(
    log_probs: &[f64],
    frames: usize,
    classes: usize,
    labels: &[usize],
) -> CtcOutcome {
    debug_assert_eq!(log_probs.len(), frames * classes);
    let t = labels.len();
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    if frames == 0 || frames < t + repeats {
        return CtcOutcome {
            loss: f64::INFINITY,
            occupancy: vec![0.0; frames * classes],
            feasible: false,
        };
    }

    let n = 2 * t + 1;
    let ext = |j: usize| if j % 2 == 0 { BLANK } else { labels[j / 2] };
    // A skip from state j-2 to j is allowed into a label that differs from
    // the label two states back.
    let can_skip = |j: usize| j % 2 == 1 && j >= 2 && ext(j) != ext(j - 2);
    let lp = |s: usize, k: usize| log_probs[s * classes + k];

    let mut alpha = vec![LOG_ZERO; frames * n];
    alpha[0] = lp(0, BLANK);
    if t > 0 {
        alpha[1] = lp(0, ext(1));
    }
    for s in 1..frames {
        let (prev, cur) = alpha.split_at_mut(s * n);
        let prev = &prev[(s - 1) * n..];
        for j in 0..n {
            let mut acc = prev[j];
            if j >= 1 {
                acc = log_add(acc, prev[j - 1]);
            }
            if can_skip(j) {
                acc = log_add(acc, prev[j - 2]);
            }
            cur[j] = if acc <= LOG_ZERO_CUTOFF {
                LOG_ZERO
            } else {
                acc + lp(s, ext(j))
            };
        }
    }

    let mut beta = vec![LOG_ZERO; frames * n];
    let last = (frames - 1) * n;
    beta[last + n - 1] = 0.0;
    if t > 0 {
        beta[last + n - 2] = 0.0;
    }
    for s in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((s + 1) * n);
        let cur = &mut cur[s * n..];
        let next = &next[..n];
        for j in 0..n {
            let mut acc = LOG_ZERO;
            for jn in [j, j + 1, j + 2] {
                if jn >= n || (jn == j + 2 && !can_skip(jn)) {
                    continue;
                }
                if next[jn] > LOG_ZERO_CUTOFF {
                    acc = log_add(acc, next[jn] + lp(s + 1, ext(jn)));
                }
            }
            cur[j] = acc;
        }
    }

    let mut log_p = alpha[last + n - 1];
    if t > 0 {
        log_p = log_add(log_p, alpha[last + n - 2]);
    }

    let mut occupancy = vec![0.0; frames * classes];
    for s in 0..frames {
        for j in 0..n {
            let a = alpha[s * n + j];
            let b = beta[s * n + j];
            if a <= LOG_ZERO_CUTOFF || b <= LOG_ZERO_CUTOFF {
                continue;
            }
            occupancy[s * classes + ext(j)] += libm::exp(a + b - log_p);
        }
    }

    CtcOutcome {
        loss: -log_p,
        occupancy,
        feasible: true,
    }
}

/// `-ln P_ctc(y | grid)` with its occupancy posteriors.
pub fn ctc_loss(grid: &PosteriorGrid, labels: &LabelSequence) -> CtcOutcome {
    forward_backward(
        grid.log_probs.data(),
        grid.frames(),
        grid.classes(),
        labels.ids(),
    )
}

/// Loss of `log_softmax(logits)` and its gradient with respect to `logits`,
/// which is `softmax(logits) - occupancy`.
pub fn loss_and_logit_grad(logits: &Tensor, labels: &LabelSequence) -> (f64, Tensor) {
    let lp = log_softmax_rows(logits);
    let out = forward_backward(lp.data(), lp.rows(), lp.cols(), labels.ids());
    if !out.feasible {
        return (out.loss, logits.zeros_like());
    }
    let grad = lp
        .data()
        .iter()
        .zip(&out.occupancy)
        .map(|(&l, &o)| libm::exp(l) - o)
        .collect();
    (out.loss, Tensor::from_parts(logits.shape().to_vec(), grad))
}

/// Largest alignment space [`ctc_brute_force`] will enumerate.
pub const BRUTE_FORCE_LIMIT: f64 = 2.0e7;

/// Enumerates every alignment, keeps those collapsing to `labels`, and
/// returns the negative log of their total probability.
pub fn ctc_brute_force(grid: &PosteriorGrid, labels: &LabelSequence) -> Result<f64> {
    let (frames, classes) = (grid.frames(), grid.classes());
    let space = libm::pow(classes as f64, frames as f64);
    if space > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(format!(
            "{classes}^{frames} alignments exceeds {BRUTE_FORCE_LIMIT}"
        )));
    }
    let lp = grid.log_probs.data();
    let mut alignment = vec![0usize; frames];
    let mut matched = Vec::new();
    loop {
        if collapse(&alignment).ids() == labels.ids() {
            let score: f64 = alignment
                .iter()
                .enumerate()
                .map(|(s, &a)| lp[s * classes + a])
                .sum();
            matched.push(score);
        }
        // odometer increment
        let mut pos = frames;
        loop {
            if pos == 0 {
                if matched.is_empty() {
                    return Ok(f64::INFINITY);
                }
                let m = matched.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = matched.iter().map(|&v| libm::exp(v - m)).sum();
                return Ok(-(m + libm::log(total)));
            }
            pos -= 1;
            alignment[pos] += 1;
            if alignment[pos] < classes {
                break;
            }
            alignment[pos] = 0;
        }
    }
}

/// Per-frame argmax, ties going to the lowest class index.
pub fn best_path(grid: &PosteriorGrid) -> Alignment {
    let lp = &grid.log_probs;
    Alignment(
        (0..lp.rows())
            .map(|s| {
                let row = lp.row(s);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect(),
    )
}

pub fn greedy_decode(grid: &PosteriorGrid) -> LabelSequence {
    collapse(&best_path(grid).0)
}
