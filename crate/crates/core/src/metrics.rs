//! Levenshtein alignment counts and token error rate.

use alloc::vec;

/// Edit operations aligning a hypothesis to a reference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// `(S + I + D) / N`; 0 for an empty reference with no errors, `+inf`
    /// for an empty reference with insertions.
    pub fn rate(&self) -> f64 {
        if self.ref_len == 0 {
            return if self.errors() == 0 { 0.0 } else { f64::INFINITY };
        }
        self.errors() as f64 / self.ref_len as f64
    }

    pub fn merge(&mut self, other: &ErrorCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.ref_len += other.ref_len;
    }
}

impl core::iter::Sum for ErrorCounts {
    fn sum<I: Iterator<Item = ErrorCounts>>(iter: I) -> Self {
        iter.fold(ErrorCounts::default(), |mut acc, c| {
            acc.merge(&c);
            acc
        })
    }
}

/// Unit-cost Levenshtein distance with its operation counts. The backtrace
/// prefers a substitution (or match), then an insertion, then a deletion.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> ErrorCounts {
    let (h, r) = (hyp.len(), reference.len());
    let w = r + 1;
    // cost[i][j]: hyp[..i] against reference[..j]
    let mut cost = vec![0usize; (h + 1) * w];
    for i in 0..=h {
        cost[i * w] = i;
    }
    for j in 0..=r {
        cost[j] = j;
    }
    for i in 1..=h {
        for j in 1..=r {
            let sub = cost[(i - 1) * w + j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            let ins = cost[(i - 1) * w + j] + 1;
            let del = cost[i * w + j - 1] + 1;
            cost[i * w + j] = sub.min(ins).min(del);
        }
    }

    let mut counts = ErrorCounts {
        ref_len: r,
        ..Default::default()
    };
    let (mut i, mut j) = (h, r);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let mismatch = usize::from(hyp[i - 1] != reference[j - 1]);
            if cost[(i - 1) * w + j - 1] + mismatch == here {
                counts.substitutions += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[(i - 1) * w + j] + 1 == here {
            counts.insertions += 1;
            i -= 1;
        } else {
            counts.deletions += 1;
            j -= 1;
        }
    }
    counts
}
