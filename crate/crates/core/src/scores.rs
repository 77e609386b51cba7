//! Rank score functions and the rank pseudo norm.
//!
//! A score function `φ` on `(0, 1)` generates scores `a(i) = φ(i / (n + 1))`
//! for ranks `i = 1..=n`. The built-in scores are nondecreasing, sum to zero
//! and are antisymmetric (`a(i) = −a(n + 1 − i)`), which is what makes
//!
//! ```text
//! ‖v‖_φ = Σᵢ a(R(vᵢ)) · vᵢ
//! ```
//!
//! a pseudo norm: it is a norm except that it vanishes on every constant
//! vector, not only on zero.
//!
//! Ties are ranked with midranks and `φ` is evaluated at the midrank itself.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

const SQRT_12: f64 = 3.464_101_615_137_754_6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ScoreFunction {
    /// `φ(x) = √12 (x − ½)`
    #[default]
    Wilcoxon,
    /// `φ(x) = sgn(2x − 1)`, with `sgn(0) = 0`
    Sign,
}

impl ScoreFunction {
    /// Evaluates `φ(x)`.
    pub fn phi(self, x: f64) -> f64 {
        match self {
            ScoreFunction::Wilcoxon => SQRT_12 * (x - 0.5),
            ScoreFunction::Sign => signum0(2.0 * x - 1.0),
        }
    }

    /// Score of a (possibly fractional) rank among `n` items, `φ(rank / (n + 1))`.
    ///
    /// Evaluated through the numerator `2·rank − (n + 1)`, which is an exact
    /// integer for integer ranks and midranks, so antisymmetry holds bit for
    /// bit.
    pub fn score_at(self, rank: f64, n: usize) -> f64 {
        let np1 = (n + 1) as f64;
        let centered = 2.0 * rank - np1;
        match self {
            ScoreFunction::Wilcoxon => SQRT_12 * centered / (2.0 * np1),
            ScoreFunction::Sign => signum0(centered),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScoreFunction::Wilcoxon => "wilcoxon",
            ScoreFunction::Sign => "sign",
        }
    }
}

impl fmt::Display for ScoreFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wilcoxon" => Ok(ScoreFunction::Wilcoxon),
            "sign" => Ok(ScoreFunction::Sign),
            other => Err(Error::InvalidValue(format!(
                "unknown score function `{other}`"
            ))),
        }
    }
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Returns the scores `(a(1), …, a(n))`.
pub fn score_vector(n: usize, sf: ScoreFunction) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidDimension("score vector needs n ≥ 1".into()));
    }
    Ok((1..=n).map(|i| sf.score_at(i as f64, n)).collect())
}

/// Ascending ranks of a vector; tied entries share their midrank.
#[derive(Debug, Clone, PartialEq)]
pub struct RankVector {
    ranks: Vec<f64>,
}

impl RankVector {
    pub fn ranks(&self) -> &[f64] {
        &self.ranks
    }

    pub fn dim(&self) -> usize {
        self.ranks.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.ranks
    }
}

fn check_finite(v: &[f64]) -> Result<()> {
    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !x.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "component {i} is not finite ({x})"
        )));
    }
    Ok(())
}

/// Ranks `v` in ascending order, giving tied entries the average of the
/// integer ranks they span.
pub fn ranks_midrank(v: &[f64]) -> Result<RankVector> {
    if v.is_empty() {
        return Err(Error::InvalidDimension(
            "cannot rank an empty vector".into(),
        ));
    }
    check_finite(v)?;

    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_unstable_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(Ordering::Equal));

    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        // positions start..end hold integer ranks start+1..=end
        let mid = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = mid;
        }
        start = end;
    }
    Ok(RankVector { ranks })
}

/// Scores of each component of `v` at its midrank, `a(R(vᵢ))`.
pub fn rank_scores(v: &[f64], sf: ScoreFunction) -> Result<Vec<f64>> {
    let n = v.len();
    let ranks = ranks_midrank(v)?;
    Ok(ranks.ranks.iter().map(|&r| sf.score_at(r, n)).collect())
}

/// Rank pseudo norm `Σᵢ a(R(vᵢ)) · vᵢ`.
pub fn rank_pseudo_norm(v: &[f64], sf: ScoreFunction) -> Result<f64> {
    let scores = rank_scores(v, sf)?;
    Ok(scores.iter().zip(v).map(|(a, x)| a * x).sum())
}
