use std::fmt::Write as _;

use super::EvalResult;
use crate::corpus::{build_buckets, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BucketRow {
    pub bucket: usize,
    pub freq_lo: u64,
    pub freq_hi: u64,
    pub tokens: u64,
    pub ce_a: f64,
    pub ce_b: f64,
    pub delta: f64,
}

/// Buckets run from most to least frequent words.
#[derive(Clone, Debug, PartialEq)]
pub struct BucketReport {
    pub rows: Vec<BucketRow>,
    pub total_tokens: u64,
}

impl BucketReport {
    /// Token-weighted mean of per-bucket cross-entropies of model A or B.
    pub fn weighted_mean(&self, model_b: bool) -> f64 {
        let sum: f64 = self
            .rows
            .iter()
            .map(|r| r.tokens as f64 * if model_b { r.ce_b } else { r.ce_a })
            .sum();
        sum / self.total_tokens as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bucket,freq_lo,freq_hi,tokens,ce_a,ce_b,delta\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.bucket, r.freq_lo, r.freq_hi, r.tokens, r.ce_a, r.ce_b, r.delta
            );
        }
        s
    }
}

/// Per-bucket mean cross-entropy of two evaluations of the same targets.
/// Buckets hold roughly equal numbers of scored targets.
pub fn bucket_analysis(vocab: &Vocabulary, a: &EvalResult, b: &EvalResult, n_buckets: usize) -> Result<BucketReport> {
    if a.targets != b.targets {
        return Err(Error::Config("bucket analysis needs both models scored on the same targets".into()));
    }
    let buckets = build_buckets(vocab, &a.targets, n_buckets)?;
    let mut sum_a = vec![0.0; n_buckets];
    let mut sum_b = vec![0.0; n_buckets];
    for ((&t, &na), &nb) in a.targets.iter().zip(&a.nll).zip(&b.nll) {
        let k = buckets.assignment[t];
        sum_a[k] += na;
        sum_b[k] += nb;
    }
    let rows = (0..n_buckets)
        .map(|k| {
            let n = buckets.test_token_counts[k];
            let mean = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
            let (ce_a, ce_b) = (mean(sum_a[k]), mean(sum_b[k]));
            BucketRow {
                bucket: k,
                freq_lo: buckets.freq_range[k].0,
                freq_hi: buckets.freq_range[k].1,
                tokens: n,
                ce_a,
                ce_b,
                delta: ce_a - ce_b,
            }
        })
        .collect();
    Ok(BucketReport { rows, total_tokens: a.targets.len() as u64 })
}
