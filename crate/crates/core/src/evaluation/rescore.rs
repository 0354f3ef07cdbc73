//! N-best rescoring with optional state carry between utterances of a
//! conversation, plus word error rate.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{Batch, HiddenState};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::par::*;
use crate::pointer::PointerState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub words: Vec<String>,
    /// First-pass total score.
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ac: Option<f64>,
}

/// One utterance; hypothesis 0 is the first-pass best.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    pub utt: String,
    pub conv: String,
    pub hyps: Vec<Hypothesis>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RescoreOptions {
    pub lm_weight: f64,
    pub wip: f64,
    pub state_carry: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Choice {
    pub utt: String,
    pub conv: String,
    pub index: usize,
    pub words: Vec<String>,
    pub total: f64,
    /// Natural-log LM probability of the chosen hypothesis, `</s>` included.
    pub lm_logprob: f64,
}

#[derive(Clone)]
struct Carry {
    hidden: HiddenState,
    pointer: PointerState,
}

/// One JSON object per line; blank lines are skipped.
pub fn parse_nbest(text: &str) -> Result<Vec<NBestList>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let list: NBestList = serde_json::from_str(l)
                .map_err(|e| Error::Ingestion(format!("n-best line {}: {e}", i + 1)))?;
            if list.hyps.is_empty() {
                return Err(Error::Ingestion(format!("utterance '{}' has no hypotheses", list.utt)));
            }
            Ok(list)
        })
        .collect()
}

/// Lines of `utt_id word word ...`.
pub fn parse_references(text: &str) -> HashMap<String, Vec<String>> {
    text.lines()
        .filter_map(|l| {
            let mut it = l.split_whitespace();
            let id = it.next()?;
            Some((id.to_string(), it.map(String::from).collect()))
        })
        .collect()
}

fn score_hypothesis(
    model: &LanguageModel,
    vocab: &Vocabulary,
    words: &[String],
    from: &Carry,
) -> Result<(f64, Carry)> {
    let eos = vocab.eos_id();
    let ids = vocab.encode(words);
    let inputs: Vec<usize> = std::iter::once(eos).chain(ids.iter().copied()).collect();
    let targets: Vec<usize> = ids.into_iter().chain(std::iter::once(eos)).collect();
    let (h, hidden) = model.hiddens(&Batch::single(inputs.clone())?, &from.hidden)?;
    let (nll, pointer) = model.score(&h, &inputs, &targets, &from.pointer)?;
    Ok((-nll.iter().sum::<f64>(), Carry { hidden, pointer }))
}

/// Picks the best hypothesis of every utterance; output follows input order.
/// Conversations are independent and processed concurrently.
pub fn rescore(
    model: &LanguageModel,
    vocab: &Vocabulary,
    lists: &[NBestList],
    opts: RescoreOptions,
) -> Result<Vec<Choice>> {
    let mut convs: Vec<(&str, Vec<usize>)> = Vec::new();
    for (i, l) in lists.iter().enumerate() {
        match convs.iter_mut().find(|(c, _)| *c == l.conv) {
            Some((_, idx)) => idx.push(i),
            None => convs.push((&l.conv, vec![i])),
        }
    }
    let fresh = Carry { hidden: model.initial_state(1), pointer: model.fresh_pointer_state() };
    let per_conv = convs
        .par_iter()
        .map(|(_, idx)| {
            let mut ctx = fresh.clone();
            let mut out = Vec::with_capacity(idx.len());
            for &i in idx {
                let list = &lists[i];
                if list.hyps.is_empty() {
                    return Err(Error::Ingestion(format!("utterance '{}' has no hypotheses", list.utt)));
                }
                let start = if opts.state_carry { &ctx } else { &fresh };
                let scored = list
                    .hyps
                    .par_iter()
                    .map(|h| score_hypothesis(model, vocab, &h.words, start))
                    .collect::<Result<Vec<_>>>()?;
                let mut best = 0;
                let mut best_total = f64::NEG_INFINITY;
                for (k, (h, (lm, _))) in list.hyps.iter().zip(&scored).enumerate() {
                    let total = h.score + opts.lm_weight * lm + opts.wip * h.words.len() as f64;
                    if total > best_total {
                        best = k;
                        best_total = total;
                    }
                }
                let (lm, carry) = scored.into_iter().nth(best).unwrap();
                ctx = carry;
                out.push((
                    i,
                    Choice {
                        utt: list.utt.clone(),
                        conv: list.conv.clone(),
                        index: best,
                        words: list.hyps[best].words.clone(),
                        total: best_total,
                        lm_logprob: lm,
                    },
                ));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all: Vec<(usize, Choice)> = per_conv.into_iter().flatten().collect();
    all.sort_by_key(|(i, _)| *i);
    Ok(all.into_iter().map(|(_, c)| c).collect())
}

fn edit_distance(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Total word errors over total reference words.
pub fn word_error_rate(choices: &[Choice], refs: &HashMap<String, Vec<String>>) -> Result<f64> {
    let mut errors = 0;
    let mut words = 0;
    for c in choices {
        let r = refs
            .get(&c.utt)
            .ok_or_else(|| Error::Ingestion(format!("no reference for utterance '{}'", c.utt)))?;
        errors += edit_distance(r, &c.words);
        words += r.len();
    }
    if words == 0 {
        return Err(Error::Ingestion("references contain no words".into()));
    }
    Ok(errors as f64 / words as f64)
}
