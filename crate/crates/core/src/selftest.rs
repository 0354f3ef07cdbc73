//! Built-in numerical checks run by `cachelm selftest`.

use crate::backbone::{Batch, Mode};
use crate::config::{BackboneConfig, BackboneKind, LstmConfig, ModelConfig, PointerConfig, TransformerConfig};
use crate::error::Result;
use crate::evaluation::evaluate_perplexity;
use crate::model::LanguageModel;
use crate::numcore::{grad_check, GradCheckReport, RngState, Tape};
use crate::training::mean_chunk_loss;
use rand::Rng;

pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {} {}", self.name, self.detail)
    }
}

/// Small deterministic model; dropout is off so the loss is a pure function
/// of the parameters.
pub fn tiny_model_config(kind: BackboneKind, hidden: usize, layers: usize, pointer: PointerConfig, chunk_len: usize) -> ModelConfig {
    let backbone = match kind {
        BackboneKind::Lstm => BackboneConfig::Lstm(LstmConfig { layers, hidden, embed: hidden, dropout: 0.0 }),
        BackboneKind::Transformer => BackboneConfig::Transformer(TransformerConfig {
            layers,
            d_model: hidden,
            heads: 2,
            ffn_mult: 2,
            dropout: 0.0,
            use_positional_embedding: true,
            max_positions: chunk_len,
        }),
    };
    ModelConfig { backbone, pointer }
}

/// Finite-difference check of the whole chunk loss (backbone, pointer
/// logits, memory scalars, softmax, loss) with V = 20, H = 8, L = 5 and
/// chunks of 6 tokens over 2 streams.
pub fn gradient_suite(kind: BackboneKind, seed: u64) -> Result<GradCheckReport> {
    let (v, h, l, t) = (20, 8, 5, 6);
    let cfg = tiny_model_config(kind, h, 2, PointerConfig::with_window(l), t);
    let rng = RngState::new(seed);
    let mut model = LanguageModel::new(cfg, v, vec![], &rng)?;
    // probe a point where every coordinate carries signal; near-zero
    // gradients only measure finite-difference roundoff
    let mut spread = rng.stream(&[97]);
    for p in model.store.iter_mut() {
        for x in p.value.data_mut() {
            *x += spread.random_range(-0.5..0.5);
        }
    }
    // small id range so history slots match targets often
    let mut draw = rng.stream(&[99]);
    let ids: Vec<usize> = (0..2 * t).map(|_| draw.random_range(0..5)).collect();
    let targets: Vec<usize> = (0..2 * t).map(|_| draw.random_range(0..6)).collect();
    let batch = Batch::new(2, t, ids)?;
    let state = model.initial_state(2);
    let params: Vec<_> = model.store.ids().collect();
    let mut store = std::mem::take(&mut model.store);
    let report = grad_check(&mut store, &params, 1e-5, 24, |tape: &mut Tape| {
        let mut unused = RngState::new(0).stream(&[]);
        Ok(model.chunk_loss(tape, &batch, &targets, &state, Mode::Eval, &mut unused)?.loss)
    });
    model.store = store;
    report
}

/// Mean training-objective loss vs value-route perplexity on a random stream.
pub fn perplexity_identity(kind: BackboneKind, seed: u64) -> Result<(f64, f64)> {
    let cfg = tiny_model_config(kind, 8, 1, PointerConfig::with_window(4), 5);
    let rng = RngState::new(seed);
    let model = LanguageModel::new(cfg, 15, vec![], &rng)?;
    let mut draw = rng.stream(&[98]);
    let ids: Vec<usize> = (0..53).map(|_| draw.random_range(0..15)).collect();
    let train_path = mean_chunk_loss(&model, &ids, 5)?.exp();
    let eval_path = evaluate_perplexity(&model, &ids, 5)?;
    Ok((train_path, eval_path))
}

pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for kind in [BackboneKind::Lstm, BackboneKind::Transformer] {
        let name = format!("gradient_{kind:?}").to_lowercase();
        out.push(match gradient_suite(kind, seed) {
            Ok(r) => CheckOutcome {
                name,
                passed: r.max_rel_error < GRAD_TOLERANCE,
                detail: format!("max_rel_error={:.3e} coordinates={} worst={:?}", r.max_rel_error, r.coordinates, r.worst),
            },
            Err(e) => CheckOutcome { name, passed: false, detail: format!("error={e}") },
        });
        let name = format!("perplexity_identity_{kind:?}").to_lowercase();
        out.push(match perplexity_identity(kind, seed) {
            Ok((a, b)) => CheckOutcome {
                name,
                passed: (a - b).abs() < 1e-9,
                detail: format!("train_path={a:.12} eval_path={b:.12}"),
            },
            Err(e) => CheckOutcome { name, passed: false, detail: format!("error={e}") },
        });
    }
    let name = "pointer_param_count".to_string();
    let count = |p: PointerConfig| {
        LanguageModel::new(tiny_model_config(BackboneKind::Lstm, 8, 1, p, 5), 20, vec![], &RngState::new(seed))
            .map(|m| m.num_params())
    };
    out.push(match (count(PointerConfig::disabled()), count(PointerConfig::with_window(5))) {
        (Ok(a), Ok(b)) => CheckOutcome {
            name,
            passed: b - a == 6 * 8,
            detail: format!("extra={} expected={}", b - a, 6 * 8),
        },
        (Err(e), _) | (_, Err(e)) => CheckOutcome { name, passed: false, detail: format!("error={e}") },
    });
    out
}
