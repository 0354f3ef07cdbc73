//! Perplexity, frequency-bucket analysis, the neural-cache baseline and
//! N-best rescoring.

mod buckets;
mod cache;
mod rescore;

pub use buckets::{bucket_analysis, BucketReport, BucketRow};
pub use cache::{cache_grid, collect_cache_inputs, neural_cache_nll, neural_cache_perplexity, CacheInputs, CacheParams};
pub use rescore::{
    parse_nbest, parse_references, rescore, word_error_rate, Choice, Hypothesis, NBestList, RescoreOptions,
};

use crate::backbone::Batch;
use crate::corpus::chunk;
use crate::error::Result;
use crate::model::LanguageModel;

/// Per-target negative log probabilities from one evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub targets: Vec<usize>,
    pub nll: Vec<f64>,
}

impl EvalResult {
    pub fn mean_nll(&self) -> f64 {
        self.nll.iter().sum::<f64>() / self.nll.len() as f64
    }

    pub fn perplexity(&self) -> f64 {
        self.mean_nll().exp()
    }
}

/// Scores `ids` as one stream cut into `chunk_len` chunks. Backbone state is
/// carried across chunks; pointer history starts empty in each chunk.
pub fn evaluate_stream(model: &LanguageModel, ids: &[usize], chunk_len: usize) -> Result<EvalResult> {
    let mut state = model.initial_state(1);
    let mut result = EvalResult { targets: Vec::new(), nll: Vec::new() };
    for (inputs, targets) in chunk(ids, chunk_len)? {
        let (h, next) = model.hiddens(&Batch::single(inputs.clone())?, &state)?;
        let (nll, _) = model.score(&h, &inputs, &targets, &model.fresh_pointer_state())?;
        result.nll.extend(nll);
        result.targets.extend(targets);
        state = next;
    }
    Ok(result)
}

pub fn evaluate_perplexity(model: &LanguageModel, ids: &[usize], chunk_len: usize) -> Result<f64> {
    Ok(evaluate_stream(model, ids, chunk_len)?.perplexity())
}
