//! SGD with truncated backpropagation through time.
//!
//! The training stream is cut into `batch_streams` contiguous segments that
//! are read in parallel, `chunk_len` tokens per step. Recurrent state flows
//! across steps without gradient; pointer history restarts every chunk.

use std::time::Instant;

use crate::backbone::{Batch, Mode};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{chunk_ranges, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_perplexity;
use crate::model::{resolve_exclude, LanguageModel};
use crate::numcore::{sgd_step, RngState, Tape};

const DROPOUT_TAG: u64 = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_ppl: f64,
    pub dev_ppl: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl std::fmt::Display for EpochReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch={} train_ppl={:.4} dev_ppl={:.4} lr={} sec={:.1}",
            self.epoch, self.train_ppl, self.dev_ppl, self.lr, self.seconds
        )
    }
}

pub struct TrainOutcome {
    /// Parameters with the lowest dev perplexity seen.
    pub best: Checkpoint,
    pub history: Vec<EpochReport>,
}

/// Step `k` of the batched schedule: `streams x chunk_len` inputs and targets.
pub fn batch_schedule(ids: &[usize], streams: usize, chunk_len: usize) -> Result<Vec<(Batch, Vec<usize>)>> {
    if streams == 0 {
        return Err(Error::Config("batch_streams must be positive".into()));
    }
    let seg = ids.len() / streams;
    let ranges = chunk_ranges(seg, chunk_len).map_err(|_| {
        Error::Ingestion(format!(
            "{} training tokens cannot fill {streams} streams of one {chunk_len}-token chunk",
            ids.len()
        ))
    })?;
    ranges
        .into_iter()
        .map(|r| {
            let mut inputs = Vec::with_capacity(streams * chunk_len);
            let mut targets = Vec::with_capacity(streams * chunk_len);
            for s in 0..streams {
                let base = s * seg;
                inputs.extend_from_slice(&ids[base + r.start..base + r.end]);
                targets.extend_from_slice(&ids[base + r.start + 1..base + r.end + 1]);
            }
            Ok((Batch::new(streams, chunk_len, inputs)?, targets))
        })
        .collect()
}

/// Mean per-token loss of the training objective in evaluation mode over a
/// single carried stream.
pub fn mean_chunk_loss(model: &LanguageModel, ids: &[usize], chunk_len: usize) -> Result<f64> {
    let mut state = model.initial_state(1);
    let mut rng = RngState::new(0).stream(&[]);
    let mut total = 0.0;
    let mut count = 0usize;
    for (batch, targets) in batch_schedule(ids, 1, chunk_len)? {
        let mut tape = Tape::new(&model.store);
        let out = model.chunk_loss(&mut tape, &batch, &targets, &state, Mode::Eval, &mut rng)?;
        total += tape.value(out.loss).data()[0] * targets.len() as f64;
        count += targets.len();
        state = out.state;
    }
    Ok(total / count as f64)
}

/// Trains from scratch. `on_epoch` sees every epoch summary as it completes.
pub fn train(
    run: &RunConfig,
    vocab: &Vocabulary,
    train_ids: &[usize],
    dev_ids: &[usize],
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    let tc = run.train_config()?;
    let mc = run.model_config()?;
    let exclude = resolve_exclude(&mc.pointer.exclude, vocab)?;
    let rng = RngState::new(tc.seed);
    let mut model = LanguageModel::new(mc, vocab.len(), exclude, &rng)?;
    let schedule = batch_schedule(train_ids, tc.batch_streams, tc.chunk_len)?;
    chunk_ranges(dev_ids.len(), tc.chunk_len)?;

    let snapshot = |model: &LanguageModel, epoch: usize, dev_ppl: Option<f64>| Checkpoint {
        config: run.clone(),
        epoch,
        dev_ppl,
        rng: rng.clone(),
        vocab: vocab.clone(),
        params: model.store.clone(),
    };
    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::new();
    let mut lr = tc.lr0;

    for epoch in 1..=tc.epochs {
        let start = Instant::now();
        let mut state = model.initial_state(tc.batch_streams);
        let mut loss_sum = 0.0;
        for (step, (batch, targets)) in schedule.iter().enumerate() {
            let mut drop_rng = rng.stream(&[DROPOUT_TAG, epoch as u64, step as u64]);
            let (loss, grads, next) = {
                let mut tape = Tape::new(&model.store);
                let out = model.chunk_loss(&mut tape, batch, targets, &state, Mode::Train, &mut drop_rng);
                let out = out.map_err(|e| diverged(e, epoch, &best))?;
                let grads = tape.backward(out.loss).map_err(|e| diverged(e, epoch, &best))?;
                (tape.value(out.loss).data()[0], grads, out.state)
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, last_good: best.map(Box::new) });
            }
            loss_sum += loss;
            grads.accumulate_into(&mut model.store);
            sgd_step(&mut model.store, lr, tc.clip_norm).map_err(|e| diverged(e, epoch, &best))?;
            state = next;
        }
        let train_ppl = (loss_sum / schedule.len() as f64).exp();
        let dev_ppl = evaluate_perplexity(&model, dev_ids, tc.chunk_len).map_err(|e| diverged(e, epoch, &best))?;
        if !dev_ppl.is_finite() || !train_ppl.is_finite() {
            return Err(Error::Diverged { epoch, last_good: best.map(Box::new) });
        }
        let report = EpochReport { epoch, train_ppl, dev_ppl, lr, seconds: start.elapsed().as_secs_f64() };
        on_epoch(&report);
        history.push(report);
        if best.as_ref().is_none_or(|b| b.dev_ppl.is_none_or(|p| dev_ppl < p)) {
            best = Some(snapshot(&model, epoch, Some(dev_ppl)));
        } else {
            lr *= tc.lr_decay;
        }
    }
    let best = best.unwrap_or_else(|| snapshot(&model, 0, None));
    Ok(TrainOutcome { best, history })
}

fn diverged(e: Error, epoch: usize, best: &Option<Checkpoint>) -> Error {
    match e {
        Error::NonFinite(_) | Error::Numeric(_) | Error::InvalidDistribution(_) => Error::Diverged {
            epoch,
            last_good: best.clone().map(Box::new),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_splits_into_contiguous_segments() {
        let ids: Vec<usize> = (0..23).collect();
        let s = batch_schedule(&ids, 2, 3).unwrap();
        // segments of 11: [0..11), [11..22); 3 full chunks each
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].0.ids, vec![0, 1, 2, 11, 12, 13]);
        assert_eq!(s[0].1, vec![1, 2, 3, 12, 13, 14]);
        assert_eq!(s[2].0.ids, vec![6, 7, 8, 17, 18, 19]);
    }

    #[test]
    fn too_short_for_streams_is_ingestion_error() {
        let ids: Vec<usize> = (0..10).collect();
        assert!(matches!(batch_schedule(&ids, 4, 3), Err(Error::Ingestion(_))));
    }
}
