//! Assignment of channel candidates to super-kernel parts.
//!
//! A super kernel is split into `N` parts, one per channel candidate.
//! Candidate `i` (0-based) activates `i + 1` parts. The naive assignment
//! gives candidate `i` the prefix `{0..=i}`, so part 0 is trained on every
//! step and part `N-1` on `1/N` of them. The fair assignment spreads the
//! parts so every part is used by `(N+1)/2` candidates when `N` is odd
//! (within one of that when `N` is even).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PatternMode {
    #[default]
    Fair,
    Naive,
}

impl fmt::Display for PatternMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatternMode::Fair => "fair",
            PatternMode::Naive => "naive",
        })
    }
}

impl std::str::FromStr for PatternMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fair" => Ok(PatternMode::Fair),
            "naive" => Ok(PatternMode::Naive),
            _ => Err(Error::InvalidValue(format!("unknown pattern mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairPattern {
    pub n_candidates: usize,
    /// `assignment[i][j]`: candidate `i` uses part `j`.
    pub assignment: Vec<Vec<bool>>,
    pub initial_probs: Vec<f64>,
}

impl FairPattern {
    pub fn new(mode: PatternMode, n: usize) -> Result<Self> {
        match mode {
            PatternMode::Fair => fair_pattern(n),
            PatternMode::Naive => naive_pattern(n),
        }
    }

    fn from_rows(assignment: Vec<Vec<bool>>) -> Self {
        let n = assignment.len();
        FairPattern { n_candidates: n, assignment, initial_probs: vec![1.0 / n as f64; n] }
    }

    /// Part usage counts (column sums).
    pub fn part_counts(&self) -> Vec<usize> {
        (0..self.n_candidates)
            .map(|j| self.assignment.iter().filter(|row| row[j]).count())
            .collect()
    }

    /// Sorted part indices used by candidate `i`.
    pub fn candidate_parts(&self, i: usize) -> Result<Vec<usize>> {
        let row = self.assignment.get(i).ok_or_else(|| {
            Error::InvalidValue(format!("candidate {i} out of range for {} candidates", self.n_candidates))
        })?;
        Ok(row.iter().enumerate().filter(|(_, &used)| used).map(|(j, _)| j).collect())
    }

    /// Channel indices of a `super_width` super kernel activated by
    /// candidate `i` when it needs `take` channels.
    ///
    /// Parts are contiguous slices of `ceil(super_width / N)` channels. The
    /// candidate's own parts come first (ascending), then the remaining
    /// parts; the first `take` channels of that order are used. When every
    /// candidate width is `(i + 1) * part_size` this is exactly the union of
    /// the candidate's parts; under the naive pattern it is always the
    /// prefix `0..take`.
    pub fn select_channels(&self, i: usize, super_width: usize, take: usize) -> Result<Vec<usize>> {
        if take > super_width {
            return Err(Error::InvalidValue(format!(
                "candidate needs {take} channels of a {super_width}-wide super kernel"
            )));
        }
        let own = self.candidate_parts(i)?;
        let n = self.n_candidates;
        let part = super_width.div_ceil(n).max(1);
        let part_range = |j: usize| (j * part).min(super_width)..((j + 1) * part).min(super_width);
        let mut order: Vec<usize> = own.iter().flat_map(|&j| part_range(j)).collect();
        order.extend((0..n).filter(|j| !own.contains(j)).flat_map(part_range));
        let mut picked: Vec<usize> = order.into_iter().take(take).collect();
        picked.sort_unstable();
        Ok(picked)
    }

    /// Parts touched by `channels` under the equal-slice layout.
    pub fn parts_of_channels(&self, super_width: usize, channels: &[usize]) -> Vec<usize> {
        let part = super_width.div_ceil(self.n_candidates).max(1);
        let mut parts: Vec<usize> = channels.iter().map(|&c| c / part).collect();
        parts.dedup();
        parts
    }
}

impl fmt::Display for FairPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.n_candidates;
        write!(f, "cand |")?;
        for j in 0..n {
            write!(f, " {:>2}", j + 1)?;
        }
        writeln!(f)?;
        for (i, row) in self.assignment.iter().enumerate() {
            write!(f, "{:>4} |", i + 1)?;
            for &used in row {
                write!(f, " {:>2}", if used { "#" } else { "." })?;
            }
            writeln!(f)?;
        }
        write!(f, "used |")?;
        for c in self.part_counts() {
            write!(f, " {c:>2}")?;
        }
        Ok(())
    }
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::InvalidValue("pattern needs at least one candidate".into()))
    } else {
        Ok(())
    }
}

/// Balanced assignment: the largest candidate uses every part; the other
/// rows, from largest to smallest, each take the currently least-used
/// parts (lowest index first on ties).
pub fn fair_pattern(n: usize) -> Result<FairPattern> {
    check_n(n)?;
    let mut rows = vec![vec![false; n]; n];
    let mut counts = vec![0usize; n];
    for i in (0..n).rev() {
        let mut cols: Vec<usize> = (0..n).collect();
        cols.sort_by_key(|&j| (counts[j], j));
        for &j in &cols[..=i] {
            rows[i][j] = true;
            counts[j] += 1;
        }
    }
    Ok(FairPattern::from_rows(rows))
}

/// Prefix assignment: candidate `i` uses parts `0..=i`.
pub fn naive_pattern(n: usize) -> Result<FairPattern> {
    check_n(n)?;
    Ok(FairPattern::from_rows((0..n).map(|i| (0..n).map(|j| j <= i).collect()).collect()))
}

pub fn part_counts(pattern: &FairPattern) -> Vec<usize> {
    pattern.part_counts()
}

pub fn candidate_parts(pattern: &FairPattern, i: usize) -> Result<Vec<usize>> {
    pattern.candidate_parts(i)
}
