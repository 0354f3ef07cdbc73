//! Hidden-state producers consumed by the output head.
//!
//! Both backbones read a [`Batch`] of token ids and return one hidden row per
//! position in stream-major order (`row = stream * len + t`).

mod lstm;
mod transformer;

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use lstm::Lstm;
pub use transformer::{causal_attention, CausalAttention, Transformer};

use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `streams` parallel sequences of `len` token ids, stored stream-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub streams: usize,
    pub len: usize,
    pub ids: Vec<usize>,
}

impl Batch {
    pub fn new(streams: usize, len: usize, ids: Vec<usize>) -> Result<Self> {
        if streams * len != ids.len() || streams == 0 || len == 0 {
            return Err(Error::Dimension(format!(
                "batch of {streams} x {len} with {} ids",
                ids.len()
            )));
        }
        Ok(Batch { streams, len, ids })
    }

    pub fn single(ids: Vec<usize>) -> Result<Self> {
        Self::new(1, ids.len(), ids)
    }

    pub fn stream(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub h: Tensor,
    pub c: Tensor,
}

/// Recurrent state carried between chunks (LSTM) or the token history used
/// to re-encode context (Transformer). Always gradient-free.
#[derive(Clone, Debug, PartialEq)]
pub enum HiddenState {
    Lstm(Vec<LayerState>),
    Transformer(Vec<Vec<usize>>),
}

impl HiddenState {
    pub fn streams(&self) -> usize {
        match self {
            HiddenState::Lstm(layers) => layers.first().map_or(0, |l| l.h.rows()),
            HiddenState::Transformer(h) => h.len(),
        }
    }
}

pub enum Backbone {
    Lstm(Lstm),
    Transformer(Transformer),
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg {
            BackboneConfig::Lstm(c) => Backbone::Lstm(Lstm::new(c.clone(), store, rng)),
            BackboneConfig::Transformer(c) => {
                Backbone::Transformer(Transformer::new(c.clone(), store, rng))
            }
        })
    }

    /// Re-binds parameter ids by name against a loaded store.
    pub fn bind(cfg: &BackboneConfig, store: &ParamStore) -> Result<Self> {
        Ok(match cfg {
            BackboneConfig::Lstm(c) => Backbone::Lstm(Lstm::bind(c.clone(), store)?),
            BackboneConfig::Transformer(c) => {
                Backbone::Transformer(Transformer::bind(c.clone(), store)?)
            }
        })
    }

    pub fn hidden(&self) -> usize {
        match self {
            Backbone::Lstm(l) => l.cfg.hidden,
            Backbone::Transformer(t) => t.cfg.d_model,
        }
    }

    pub fn initial_state(&self, streams: usize) -> HiddenState {
        match self {
            Backbone::Lstm(l) => l.zero_state(streams),
            Backbone::Transformer(_) => HiddenState::Transformer(vec![Vec::new(); streams]),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        embedding: ParamId,
        batch: &Batch,
        state: &HiddenState,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, HiddenState)> {
        match self {
            Backbone::Lstm(l) => l.forward(tape, embedding, batch, state, mode, rng),
            Backbone::Transformer(t) => t.forward_with_history(tape, embedding, batch, state, mode, rng),
        }
    }
}

/// Inverted dropout; identity outside training or when `p == 0`.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    tape.mul_const(x, Arc::new(Tensor::new(shape, mask)?))
}

pub(crate) fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .find(name)
        .ok_or_else(|| Error::Format(format!("missing parameter '{name}'")))
}
