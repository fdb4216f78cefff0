//! Quality and smoothness of decoded interpolation paths.

use serde::{Deserialize, Serialize};

use crate::corpus::{parse, FactorSpec};
use crate::error::{Error, Result};
use crate::probes::ProbeReport;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolationScores {
    /// Fraction of intermediate generations the grammar accepts.
    pub quality: f64,
    /// One minus the mean normalised token edit distance between neighbours.
    pub smoothness: f64,
}

/// Token-level edit distance.
pub fn levenshtein(a: &[&str], b: &[&str]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the longer sentence's length (0 for two empty strings).
pub fn normalized_levenshtein(a: &str, b: &str) -> f64 {
    let a: Vec<&str> = a.split_whitespace().collect();
    let b: Vec<&str> = b.split_whitespace().collect();
    let longest = a.len().max(b.len());
    if longest == 0 {
        0.0
    } else {
        levenshtein(&a, &b) as f64 / longest as f64
    }
}

/// Pools every path: quality over the intermediate rows, smoothness over
/// every consecutive pair. Each path needs at least three rows.
pub fn interpolation_metrics(spec: &FactorSpec, paths: &[ProbeReport]) -> Result<InterpolationScores> {
    if paths.is_empty() {
        return Err(Error::Invalid("no interpolation paths".into()));
    }
    let (mut accepted, mut inner) = (0usize, 0usize);
    let (mut dist, mut pairs) = (0.0, 0usize);
    for p in paths {
        if p.len() < 3 {
            return Err(Error::Invalid(format!("interpolation path with {} steps; need ≥ 3", p.len())));
        }
        for row in &p.rows[1..p.len() - 1] {
            inner += 1;
            let words: Vec<&str> = row.generated.split_whitespace().collect();
            accepted += usize::from(parse(spec, &words).is_some());
        }
        for w in p.rows.windows(2) {
            dist += normalized_levenshtein(&w[0].generated, &w[1].generated);
            pairs += 1;
        }
    }
    Ok(InterpolationScores {
        quality: accepted as f64 / inner as f64,
        smoothness: 1.0 - dist / pairs as f64,
    })
}
