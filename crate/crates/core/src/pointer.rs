//! Output head extended with `L` history slots.
//!
//! The vocabulary logits `W·h + b` are concatenated with pointer logits
//! `W_p·h`, one per recent input position. With memory augmentation every
//! consumed token also leaves a scalar `m = w_m·h`, which is added to the
//! pointer logit of the slot holding that token. Training maximises the mass
//! the softmax puts on the target word's vocabulary slot plus every valid
//! history slot holding the same word.
//!
//! Two routes compute the same quantities:
//! * value-level functions ([`pointer_logits`], [`update_state`],
//!   [`build_supervision`], [`loss`], [`aggregate_word_probs`]) used for
//!   evaluation, rescoring and state carry;
//! * the fused [`pointer_loss`] tape op used for training, which handles a
//!   whole chunk with fresh history.

use crate::backbone::Batch;
use crate::error::{Error, Result};
use crate::numcore::{dot, logsumexp, softmax_slice, CustomOp, Tape, Tensor, Var, MASKED};
use crate::par::*;

/// Borrowed view of the head parameters.
#[derive(Clone, Copy, Debug)]
pub struct PointerHead<'a> {
    /// `W`, `V x H`; tied with the input embedding.
    pub output: &'a Tensor,
    /// `b`, length `V`.
    pub bias: &'a Tensor,
    /// `W_p`, `L x H`; `None` for a plain softmax head.
    pub projection: Option<&'a Tensor>,
    /// `w_m`, `H x 1`; `None` without memory augmentation.
    pub memory: Option<&'a Tensor>,
    /// Token ids whose history slots are never valid.
    pub exclude: &'a [usize],
}

impl PointerHead<'_> {
    pub fn vocab(&self) -> usize {
        self.output.rows()
    }

    pub fn hidden(&self) -> usize {
        self.output.cols()
    }

    pub fn window(&self) -> usize {
        self.projection.map_or(0, Tensor::rows)
    }

    /// Memory activation `w_m·h`, zero without augmentation.
    pub fn memory_value(&self, h: &[f64]) -> f64 {
        self.memory.map_or(0.0, |w| dot(w.data(), h))
    }

    pub fn is_excluded(&self, token: usize) -> bool {
        self.exclude.contains(&token)
    }

    /// History entry left by consuming `token` with hidden `h`.
    pub fn slot(&self, token: usize, h: &[f64]) -> Slot {
        Slot {
            token,
            m_value: self.memory_value(h),
            valid: !self.is_excluded(token),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Slot {
    pub token: usize,
    pub m_value: f64,
    pub valid: bool,
}

const EMPTY_SLOT: Slot = Slot {
    token: 0,
    m_value: 0.0,
    valid: false,
};

/// The last `L` consumed tokens with their memory activations.
///
/// Slot `j` at step `t` holds input position `t - L + 1 + j`; slot `L - 1`
/// is the token consumed at the current step.
#[derive(Clone, Debug, PartialEq)]
pub struct PointerState {
    slots: Vec<Slot>,
}

impl PointerState {
    pub fn new(window: usize) -> Self {
        PointerState {
            slots: vec![EMPTY_SLOT; window],
        }
    }

    /// State holding exactly `slots`, oldest first.
    pub fn from_slots(slots: Vec<Slot>) -> Self {
        PointerState { slots }
    }

    pub fn window(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn valid_count(&self) -> usize {
        self.slots.iter().filter(|s| s.valid).count()
    }

    /// Shifts left and stores a new entry in the last slot.
    pub fn push(&mut self, slot: Slot) {
        if self.slots.is_empty() {
            return;
        }
        self.slots.rotate_left(1);
        *self.slots.last_mut().unwrap() = slot;
    }

    /// Records that `token` was consumed with hidden `h`.
    pub fn update(&mut self, token: usize, h: &[f64], head: &PointerHead) {
        self.push(head.slot(token, h));
    }
}

pub fn update_state(mut state: PointerState, token: usize, h: &[f64], head: &PointerHead) -> PointerState {
    state.update(token, h, head);
    state
}

/// Sparse at-least-one-hot target over `V + L` slots, ascending indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupervisionVector {
    pub indices: Vec<usize>,
}

pub fn build_supervision(target: usize, state: &PointerState, vocab: usize) -> Result<SupervisionVector> {
    if target >= vocab {
        return Err(Error::Dimension(format!("target {target} outside vocabulary {vocab}")));
    }
    let mut indices = vec![target];
    indices.extend(
        state
            .slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.valid && s.token == target)
            .map(|(j, _)| vocab + j),
    );
    Ok(SupervisionVector { indices })
}

/// Extended logits for one position: `[W·h + b ; W_p·h + m]` with invalid
/// slots masked.
pub fn pointer_logits(h: &[f64], head: &PointerHead, state: &PointerState) -> Result<Vec<f64>> {
    let mut z = head.output.matvec(h)?;
    for (zi, b) in z.iter_mut().zip(head.bias.data()) {
        *zi += b;
    }
    pointer_logits_with_vocab(z, h, head, state)
}

/// As [`pointer_logits`] when `W·h + b` is already available.
pub fn pointer_logits_with_vocab(
    mut vocab_logits: Vec<f64>,
    h: &[f64],
    head: &PointerHead,
    state: &PointerState,
) -> Result<Vec<f64>> {
    let l = head.window();
    if state.window() != l {
        return Err(Error::Dimension(format!(
            "pointer state holds {} slots, head has {l}",
            state.window()
        )));
    }
    if vocab_logits.len() != head.vocab() || h.len() != head.hidden() {
        return Err(Error::Dimension("pointer_logits: hidden or vocabulary size".into()));
    }
    if let Some(wp) = head.projection {
        vocab_logits.reserve(l);
        for (j, slot) in state.slots.iter().enumerate() {
            vocab_logits.push(if slot.valid {
                dot(wp.row(j), h) + slot.m_value
            } else {
                MASKED
            });
        }
    }
    Ok(vocab_logits)
}

/// `-log(y · s)`.
pub fn loss(y: &[f64], s: &SupervisionVector) -> Result<f64> {
    let mass: f64 = s.indices.iter().map(|&i| y[i]).sum();
    if mass <= 0.0 {
        return Err(Error::Numeric("supervised probability mass is zero".into()));
    }
    Ok(-mass.ln())
}

/// Folds slot probabilities back onto the words occupying the slots.
pub fn aggregate_word_probs(y: &[f64], state: &PointerState, vocab: usize) -> Vec<f64> {
    let mut q = y[..vocab].to_vec();
    for (j, slot) in state.slots.iter().enumerate() {
        if slot.valid {
            q[slot.token] += y[vocab + j];
        }
    }
    q
}

/// Softmax over extended logits, then aggregation; returns `q` over words.
pub fn word_distribution(z: &[f64], state: &PointerState, vocab: usize) -> Result<Vec<f64>> {
    let y = softmax_slice(z)?;
    Ok(aggregate_word_probs(&y, state, vocab))
}

/// Mean at-least-one-hot NLL over a chunk, as a tape node.
///
/// `vocab_logits` is `N x V` (`N = streams * len`, stream-major),
/// `pointer` is `N x L` raw `W_p·h`, and `memory` is `N x 1` `w_m·h`.
/// History starts empty at the chunk start. Returns the loss node and the
/// per-position NLLs.
pub fn pointer_loss(
    tape: &mut Tape,
    vocab_logits: Var,
    pointer: Option<Var>,
    memory: Option<Var>,
    batch: &Batch,
    targets: &[usize],
    exclude: &[usize],
) -> Result<(Var, Vec<f64>)> {
    let n = batch.streams * batch.len;
    let v = tape.value(vocab_logits).cols();
    if tape.value(vocab_logits).rows() != n || targets.len() != n {
        return Err(Error::Dimension("pointer_loss: rows differ from batch".into()));
    }
    if targets.iter().any(|&t| t >= v) {
        return Err(Error::Dimension("pointer_loss: target outside vocabulary".into()));
    }
    let window = pointer.map_or(0, |p| tape.value(p).cols());
    if let Some(p) = pointer {
        if tape.value(p).rows() != n {
            return Err(Error::Dimension("pointer_loss: pointer rows".into()));
        }
    }
    if let Some(m) = memory {
        if pointer.is_none() || tape.value(m).shape() != [n, 1] {
            return Err(Error::Dimension("pointer_loss: memory needs pointer and N x 1".into()));
        }
    }
    let op = PointerLoss {
        streams: batch.streams,
        len: batch.len,
        window,
        vocab: v,
        inputs: batch.ids.clone(),
        targets: targets.to_vec(),
        exclude: exclude.to_vec(),
        has_pointer: pointer.is_some(),
        has_memory: memory.is_some(),
        log_norm: Vec::new(),
        log_target: Vec::new(),
    };
    let mut ins = vec![vocab_logits];
    ins.extend(pointer);
    ins.extend(memory);
    let values: Vec<&Tensor> = ins.iter().map(|&x| tape.value(x)).collect();
    let rows: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|r| {
            let z = op.row_logits(&values, r);
            let s = op.supervised(r);
            (
                logsumexp(z.iter().copied()),
                logsumexp(s.iter().map(|&i| z[i])),
            )
        })
        .collect();
    let per_row: Vec<f64> = rows.iter().map(|(lz, ls)| lz - ls).collect();
    let mean = per_row.iter().sum::<f64>() / n as f64;
    let op = PointerLoss {
        log_norm: rows.iter().map(|r| r.0).collect(),
        log_target: rows.iter().map(|r| r.1).collect(),
        ..op
    };
    let out = tape.custom(Box::new(op), ins, Tensor::scalar(mean))?;
    Ok((out, per_row))
}

struct PointerLoss {
    streams: usize,
    len: usize,
    window: usize,
    vocab: usize,
    inputs: Vec<usize>,
    targets: Vec<usize>,
    exclude: Vec<usize>,
    has_pointer: bool,
    has_memory: bool,
    log_norm: Vec<f64>,
    log_target: Vec<f64>,
}

impl PointerLoss {
    /// Input position held by slot `j` of row `r`, if inside the chunk and valid.
    fn slot_source(&self, r: usize, j: usize) -> Option<usize> {
        let (s, t) = (r / self.len, r % self.len);
        let pos = (t + j + 1).checked_sub(self.window)?;
        let src = s * self.len + pos;
        (!self.exclude.contains(&self.inputs[src])).then_some(src)
    }

    fn row_logits(&self, values: &[&Tensor], r: usize) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.vocab + self.window);
        z.extend_from_slice(values[0].row(r));
        if self.has_pointer {
            let p = values[1].row(r);
            for (j, pj) in p.iter().enumerate() {
                z.push(match self.slot_source(r, j) {
                    Some(src) => {
                        let m = if self.has_memory { values[2].data()[src] } else { 0.0 };
                        pj + m
                    }
                    None => MASKED,
                });
            }
        }
        z
    }

    fn supervised(&self, r: usize) -> Vec<usize> {
        let target = self.targets[r];
        let mut s = vec![target];
        for j in 0..self.window {
            if let Some(src) = self.slot_source(r, j) {
                if self.inputs[src] == target {
                    s.push(self.vocab + j);
                }
            }
        }
        s
    }
}

impl CustomOp for PointerLoss {
    fn name(&self) -> &'static str {
        "pointer_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let n = self.streams * self.len;
        let width = self.vocab + self.window;
        let scale = grad.data()[0] / n as f64;
        let mut dz = vec![0.0; n * width];
        dz.par_chunks_mut(width).enumerate().for_each(|(r, out)| {
            let z = self.row_logits(inputs, r);
            let (lz, ls) = (self.log_norm[r], self.log_target[r]);
            for (o, &zi) in out.iter_mut().zip(&z) {
                *o = if zi == MASKED { 0.0 } else { (zi - lz).exp() * scale };
            }
            for i in self.supervised(r) {
                out[i] -= (z[i] - ls).exp() * scale;
            }
        });
        let mut d_vocab = Vec::with_capacity(n * self.vocab);
        let mut d_pointer = Vec::with_capacity(n * self.window);
        let mut d_memory = vec![0.0; if self.has_memory { n } else { 0 }];
        for r in 0..n {
            let row = &dz[r * width..(r + 1) * width];
            d_vocab.extend_from_slice(&row[..self.vocab]);
            d_pointer.extend_from_slice(&row[self.vocab..]);
            if self.has_memory {
                for j in 0..self.window {
                    if let Some(src) = self.slot_source(r, j) {
                        d_memory[src] += row[self.vocab + j];
                    }
                }
            }
        }
        let mut out = vec![Some(Tensor::matrix(n, self.vocab, d_vocab)?)];
        if self.has_pointer {
            out.push(Some(Tensor::matrix(n, self.window, d_pointer)?));
        }
        if self.has_memory {
            out.push(Some(Tensor::matrix(n, 1, d_memory)?));
        }
        Ok(out)
    }
}
