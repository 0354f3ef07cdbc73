//! Test-time neural cache over a trained baseline LM.
//!
//! Each scored position stores its hidden and the word that followed it.
//! At step `t` the cache proposes `p_c(w) ∝ Σ 1{w_i = w}·exp(θ h_t·h_i)` over
//! the last `cache_len` stored pairs, mixed as `(1 − λ)·p_lm + λ·p_c`.

use crate::backbone::Batch;
use crate::corpus::chunk;
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::numcore::{dot, Tensor};
use crate::par::*;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CacheParams {
    pub theta: f64,
    pub lambda: f64,
    pub cache_len: usize,
}

impl Default for CacheParams {
    fn default() -> Self {
        CacheParams { theta: 0.3, lambda: 0.1, cache_len: 100 }
    }
}

/// Everything the cache needs from one LM pass: per scored position the
/// top-layer hidden, the target and the LM probability of the target.
#[derive(Clone, Debug)]
pub struct CacheInputs {
    pub hiddens: Tensor,
    pub targets: Vec<usize>,
    pub p_lm: Vec<f64>,
}

/// Runs the baseline LM once over the chunked stream, carrying state.
pub fn collect_cache_inputs(model: &LanguageModel, ids: &[usize], chunk_len: usize) -> Result<CacheInputs> {
    if model.window() > 0 {
        return Err(Error::Config("the neural cache runs on a model without pointer slots".into()));
    }
    let mut state = model.initial_state(1);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut p_lm = Vec::new();
    for (inputs, tgt) in chunk(ids, chunk_len)? {
        let (h, next) = model.hiddens(&Batch::single(inputs.clone())?, &state)?;
        let (nll, _) = model.score(&h, &inputs, &tgt, &model.fresh_pointer_state())?;
        p_lm.extend(nll.iter().map(|n| (-n).exp()));
        rows.extend_from_slice(h.data());
        targets.extend(tgt);
        state = next;
    }
    let hiddens = Tensor::matrix(targets.len(), model.hidden(), rows)?;
    Ok(CacheInputs { hiddens, targets, p_lm })
}

/// `-ln q(target)` per position under the cache mixture.
pub fn neural_cache_nll(inputs: &CacheInputs, params: CacheParams) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&params.lambda) {
        return Err(Error::Config(format!("cache lambda {} outside [0, 1]", params.lambda)));
    }
    let CacheInputs { hiddens, targets, p_lm } = inputs;
    (0..targets.len())
        .into_par_iter()
        .map(|t| {
            let start = t.saturating_sub(params.cache_len);
            let q = if start == t {
                p_lm[t]
            } else {
                let ht = hiddens.row(t);
                let scores: Vec<f64> = (start..t).map(|i| params.theta * dot(ht, hiddens.row(i))).collect();
                let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut norm = 0.0;
                let mut hit = 0.0;
                for (i, s) in (start..t).zip(&scores) {
                    let w = (s - top).exp();
                    norm += w;
                    if targets[i] == targets[t] {
                        hit += w;
                    }
                }
                (1.0 - params.lambda) * p_lm[t] + params.lambda * (hit / norm)
            };
            if q > 0.0 && q.is_finite() {
                Ok(-q.ln())
            } else {
                Err(Error::Numeric(format!("cache mixture probability {q} at position {t}")))
            }
        })
        .collect()
}

pub fn neural_cache_perplexity(inputs: &CacheInputs, params: CacheParams) -> Result<f64> {
    let nll = neural_cache_nll(inputs, params)?;
    Ok((nll.iter().sum::<f64>() / nll.len() as f64).exp())
}

/// Perplexity for every `(theta, lambda)` pair, in grid order.
pub fn cache_grid(
    inputs: &CacheInputs,
    thetas: &[f64],
    lambdas: &[f64],
    cache_len: usize,
) -> Result<Vec<(CacheParams, f64)>> {
    let mut out = Vec::with_capacity(thetas.len() * lambdas.len());
    for &theta in thetas {
        for &lambda in lambdas {
            let p = CacheParams { theta, lambda, cache_len };
            out.push((p, neural_cache_perplexity(inputs, p)?));
        }
    }
    Ok(out)
}
