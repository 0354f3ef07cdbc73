//! Backbone plus output head, with the input embedding tied to the output
//! projection `W`.

use rand_chacha::ChaCha8Rng;

use crate::backbone::{dropout, Backbone, Batch, HiddenState, Mode};
use crate::config::ModelConfig;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::numcore::{matmul_t, uniform, ParamId, ParamStore, RngState, Tape, Tensor, Var};
use crate::par::*;
use crate::pointer::{pointer_loss, pointer_logits_with_vocab, word_distribution, PointerHead, PointerState, Slot};

pub const INIT_RANGE: f64 = 0.1;
const INIT_TAG: u64 = 1;
const POINTER_INIT_TAG: u64 = 2;

pub struct LanguageModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    backbone: Backbone,
    embedding: ParamId,
    bias: ParamId,
    projection: Option<ParamId>,
    memory: Option<ParamId>,
    exclude: Vec<usize>,
}

/// Loss node for one chunk, its per-position NLLs and the outgoing state.
pub struct ChunkLoss {
    pub loss: Var,
    pub nll: Vec<f64>,
    pub state: HiddenState,
}

/// Maps exclusion words to ids; every word must be in the vocabulary.
pub fn resolve_exclude(words: &[String], vocab: &Vocabulary) -> Result<Vec<usize>> {
    words
        .iter()
        .map(|w| {
            vocab
                .lookup(w)
                .ok_or_else(|| Error::Config(format!("excluded word '{w}' not in vocabulary")))
        })
        .collect()
}

impl LanguageModel {
    /// Fresh model. Pointer parameters draw from their own stream, so the
    /// backbone and embedding are identical with and without the pointer.
    pub fn new(config: ModelConfig, vocab: usize, exclude: Vec<usize>, rng: &RngState) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::Config("empty vocabulary".into()));
        }
        let h = config.backbone.hidden();
        let mut store = ParamStore::new();
        let mut init = rng.stream(&[INIT_TAG]);
        let embedding = store.add("embedding", uniform(&[vocab, h], INIT_RANGE, &mut init));
        let bias = store.add("output.bias", Tensor::zeros(&[vocab]));
        let backbone = Backbone::new(&config.backbone, &mut store, &mut init)?;
        let mut pinit = rng.stream(&[POINTER_INIT_TAG]);
        let p = &config.pointer;
        let projection = (p.enabled && p.window > 0).then(|| {
            store.add("pointer.projection", uniform(&[p.window, h], INIT_RANGE, &mut pinit))
        });
        let memory = (p.enabled && p.memory_augmentation)
            .then(|| store.add("pointer.memory", uniform(&[h, 1], INIT_RANGE, &mut pinit)));
        let model = LanguageModel { config, store, backbone, embedding, bias, projection, memory, exclude };
        model.check_exclude()?;
        Ok(model)
    }

    /// Attaches a model to parameters loaded by name.
    pub fn bind(config: ModelConfig, store: ParamStore, exclude: Vec<usize>) -> Result<Self> {
        let find = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| Error::Format(format!("missing parameter '{name}'")))
        };
        let embedding = find("embedding")?;
        let bias = find("output.bias")?;
        let p = &config.pointer;
        let projection = if p.enabled && p.window > 0 { Some(find("pointer.projection")?) } else { None };
        let memory = if p.enabled && p.memory_augmentation { Some(find("pointer.memory")?) } else { None };
        let backbone = Backbone::bind(&config.backbone, &store)?;
        let h = config.backbone.hidden();
        let v = store.value(embedding).rows();
        let shapes_ok = store.value(embedding).shape() == [v, h]
            && store.value(bias).shape() == [v]
            && projection.is_none_or(|id| store.value(id).shape() == [p.window, h])
            && memory.is_none_or(|id| store.value(id).shape() == [h, 1]);
        if !shapes_ok {
            return Err(Error::Format("parameter shapes disagree with the configuration".into()));
        }
        let model = LanguageModel { config, store, backbone, embedding, bias, projection, memory, exclude };
        model.check_exclude()?;
        Ok(model)
    }

    fn check_exclude(&self) -> Result<()> {
        match self.exclude.iter().find(|&&t| t >= self.vocab_size()) {
            Some(t) => Err(Error::Config(format!("excluded id {t} outside vocabulary"))),
            None => Ok(()),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.store.value(self.embedding).rows()
    }

    pub fn hidden(&self) -> usize {
        self.backbone.hidden()
    }

    /// Number of history slots in the output layer.
    pub fn window(&self) -> usize {
        self.projection.map_or(0, |id| self.store.value(id).rows())
    }

    pub fn num_params(&self) -> usize {
        self.store.count()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn exclude(&self) -> &[usize] {
        &self.exclude
    }

    pub fn head(&self) -> PointerHead<'_> {
        PointerHead {
            output: self.store.value(self.embedding),
            bias: self.store.value(self.bias),
            projection: self.projection.map(|id| self.store.value(id)),
            memory: self.memory.map(|id| self.store.value(id)),
            exclude: &self.exclude,
        }
    }

    pub fn initial_state(&self, streams: usize) -> HiddenState {
        self.backbone.initial_state(streams)
    }

    pub fn fresh_pointer_state(&self) -> PointerState {
        PointerState::new(self.window())
    }

    /// Builds the mean chunk loss on `tape`. History slots start empty.
    pub fn chunk_loss(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        targets: &[usize],
        state: &HiddenState,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ChunkLoss> {
        let (h, next) = self.backbone.forward(tape, self.embedding, batch, state, mode, rng)?;
        let h = dropout(tape, h, self.config.backbone.dropout(), mode, rng)?;
        let w = tape.param(self.embedding);
        let b = tape.param(self.bias);
        let vl = tape.matmul(h, w, true)?;
        let vl = tape.add_bias(vl, b)?;
        let pointer = match self.projection {
            Some(id) => {
                let wp = tape.param(id);
                Some(tape.matmul(h, wp, true)?)
            }
            None => None,
        };
        let memory = match (pointer, self.memory) {
            (Some(_), Some(id)) => {
                let wm = tape.param(id);
                Some(tape.matmul(h, wm, false)?)
            }
            _ => None,
        };
        let (loss, nll) = pointer_loss(tape, vl, pointer, memory, batch, targets, &self.exclude)?;
        Ok(ChunkLoss { loss, nll, state: next })
    }

    /// Evaluation-mode top-layer hiddens (stream-major) and outgoing state.
    pub fn hiddens(&self, batch: &Batch, state: &HiddenState) -> Result<(Tensor, HiddenState)> {
        let mut tape = Tape::new(&self.store);
        let mut unused = RngState::new(0).stream(&[]);
        let (h, next) = self
            .backbone
            .forward(&mut tape, self.embedding, batch, state, Mode::Eval, &mut unused)?;
        Ok((tape.value(h).clone(), next))
    }

    /// Word distribution `q` after each input of a single stream, given the
    /// pointer history in force before the first input. Also returns the
    /// history after the last input.
    pub fn distributions(
        &self,
        hiddens: &Tensor,
        inputs: &[usize],
        pstate: &PointerState,
    ) -> Result<(Vec<Vec<f64>>, PointerState)> {
        let head = self.head();
        let (per_pos, history) = self.prepare(hiddens, inputs, pstate, &head)?;
        let l = self.window();
        let v = self.vocab_size();
        let qs = (0..inputs.len())
            .into_par_iter()
            .map(|t| {
                let st = PointerState::from_slots(history[t + 1..t + 1 + l].to_vec());
                let z = pointer_logits_with_vocab(per_pos.row(t).to_vec(), hiddens.row(t), &head, &st)?;
                word_distribution(&z, &st, v)
            })
            .collect::<Result<Vec<_>>>()?;
        let last = PointerState::from_slots(history[inputs.len()..].to_vec());
        Ok((qs, last))
    }

    /// `-ln q(target)` per position; see [`Self::distributions`].
    pub fn score(
        &self,
        hiddens: &Tensor,
        inputs: &[usize],
        targets: &[usize],
        pstate: &PointerState,
    ) -> Result<(Vec<f64>, PointerState)> {
        if targets.len() != inputs.len() {
            return Err(Error::Dimension("score: targets and inputs differ in length".into()));
        }
        let head = self.head();
        let (per_pos, history) = self.prepare(hiddens, inputs, pstate, &head)?;
        let l = self.window();
        let v = self.vocab_size();
        let nll = (0..inputs.len())
            .into_par_iter()
            .map(|t| {
                let st = PointerState::from_slots(history[t + 1..t + 1 + l].to_vec());
                let z = pointer_logits_with_vocab(per_pos.row(t).to_vec(), hiddens.row(t), &head, &st)?;
                let q = word_distribution(&z, &st, v)?;
                Ok(-q[targets[t]].ln())
            })
            .collect::<Result<Vec<_>>>()?;
        let last = PointerState::from_slots(history[inputs.len()..].to_vec());
        Ok((nll, last))
    }

    /// Vocabulary logits for every row plus the slot history
    /// `initial ++ one slot per input`.
    fn prepare(
        &self,
        hiddens: &Tensor,
        inputs: &[usize],
        pstate: &PointerState,
        head: &PointerHead,
    ) -> Result<(Tensor, Vec<Slot>)> {
        if hiddens.rows() != inputs.len() || hiddens.cols() != self.hidden() {
            return Err(Error::Dimension(format!(
                "{:?} hiddens for {} inputs of width {}",
                hiddens.shape(),
                inputs.len(),
                self.hidden()
            )));
        }
        if pstate.window() != self.window() {
            return Err(Error::Dimension("pointer state window differs from model".into()));
        }
        if let Some(t) = inputs.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::Dimension(format!("input id {t} outside vocabulary")));
        }
        let mut logits = matmul_t(hiddens, false, head.output, true)?;
        let bias = head.bias.data();
        for r in 0..logits.rows() {
            for (z, b) in logits.row_mut(r).iter_mut().zip(bias) {
                *z += b;
            }
        }
        let mut history = pstate.slots().to_vec();
        history.extend(inputs.iter().enumerate().map(|(t, &tok)| head.slot(tok, hiddens.row(t))));
        Ok((logits, history))
    }
}
