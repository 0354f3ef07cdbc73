use rand_chacha::ChaCha8Rng;

use super::{dropout, lookup, Batch, HiddenState, LayerState, Mode};
use crate::config::LstmConfig;
use crate::error::{Error, Result};
use crate::numcore::{uniform, ParamId, ParamStore, Tape, Tensor, Var};

const INIT: f64 = 0.1;

struct LstmLayer {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

/// Stacked LSTM without projections. Gate columns are ordered
/// input, forget, candidate, output.
pub struct Lstm {
    pub cfg: LstmConfig,
    layers: Vec<LstmLayer>,
}

impl Lstm {
    pub fn new(cfg: LstmConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden;
        let layers = (0..cfg.layers)
            .map(|l| {
                let input = if l == 0 { cfg.embed } else { h };
                let w_ih = store.add(format!("lstm.{l}.w_ih"), uniform(&[input, 4 * h], INIT, rng));
                let w_hh = store.add(format!("lstm.{l}.w_hh"), uniform(&[h, 4 * h], INIT, rng));
                let mut b = Tensor::zeros(&[4 * h]);
                b.data_mut()[h..2 * h].fill(1.0);
                let bias = store.add(format!("lstm.{l}.bias"), b);
                LstmLayer { w_ih, w_hh, bias }
            })
            .collect();
        Lstm { cfg, layers }
    }

    pub fn bind(cfg: LstmConfig, store: &ParamStore) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|l| {
                Ok(LstmLayer {
                    w_ih: lookup(store, &format!("lstm.{l}.w_ih"))?,
                    w_hh: lookup(store, &format!("lstm.{l}.w_hh"))?,
                    bias: lookup(store, &format!("lstm.{l}.bias"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Lstm { cfg, layers })
    }

    pub fn zero_state(&self, streams: usize) -> HiddenState {
        let h = self.cfg.hidden;
        HiddenState::Lstm(
            (0..self.cfg.layers)
                .map(|_| LayerState {
                    h: Tensor::zeros(&[streams, h]),
                    c: Tensor::zeros(&[streams, h]),
                })
                .collect(),
        )
    }

    /// Runs the chunk from `state_in`; returns stream-major hiddens of the
    /// top layer and the (detached) final-position state.
    pub fn forward(
        &self,
        tape: &mut Tape,
        embedding: ParamId,
        batch: &Batch,
        state_in: &HiddenState,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, HiddenState)> {
        let (b, t_len, h) = (batch.streams, batch.len, self.cfg.hidden);
        let HiddenState::Lstm(layer_states) = state_in else {
            return Err(Error::Config("LSTM given a Transformer state".into()));
        };
        if layer_states.len() != self.layers.len()
            || layer_states.iter().any(|s| s.h.shape() != [b, h] || s.c.shape() != [b, h])
        {
            return Err(Error::Config(format!(
                "LSTM state does not match {} layers x [{b}, {h}]",
                self.layers.len()
            )));
        }
        let time_major: Vec<usize> = (0..t_len)
            .flat_map(|t| (0..b).map(move |s| batch.ids[s * t_len + t]))
            .collect();
        let emb = tape.param(embedding);
        if tape.shape(emb)[1] != self.cfg.embed {
            return Err(Error::Config("embedding width differs from LSTM input".into()));
        }
        let x = tape.gather_rows(emb, time_major)?;
        let mut input = dropout(tape, x, self.cfg.dropout, mode, rng)?;
        let mut out_states = Vec::with_capacity(self.layers.len());

        for (l, layer) in self.layers.iter().enumerate() {
            let (w_ih, w_hh, bias) = (tape.param(layer.w_ih), tape.param(layer.w_hh), tape.param(layer.bias));
            let xp = tape.matmul(input, w_ih, false)?;
            let xp = tape.add_bias(xp, bias)?;
            let mut hv = tape.constant(layer_states[l].h.clone())?;
            let mut cv = tape.constant(layer_states[l].c.clone())?;
            let mut outs = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let gx = tape.slice_rows(xp, t * b, b)?;
                let gh = tape.matmul(hv, w_hh, false)?;
                let gates = tape.add(gx, gh)?;
                let i = tape.slice_cols(gates, 0, h)?;
                let i = tape.sigmoid(i)?;
                let f = tape.slice_cols(gates, h, h)?;
                let f = tape.sigmoid(f)?;
                let g = tape.slice_cols(gates, 2 * h, h)?;
                let g = tape.tanh(g)?;
                let o = tape.slice_cols(gates, 3 * h, h)?;
                let o = tape.sigmoid(o)?;
                let fc = tape.mul(f, cv)?;
                let ig = tape.mul(i, g)?;
                cv = tape.add(fc, ig)?;
                let tc = tape.tanh(cv)?;
                hv = tape.mul(o, tc)?;
                outs.push(hv);
            }
            out_states.push(LayerState {
                h: tape.value(hv).clone(),
                c: tape.value(cv).clone(),
            });
            let stacked = tape.concat_rows(outs)?;
            input = if l + 1 < self.layers.len() {
                dropout(tape, stacked, self.cfg.dropout, mode, rng)?
            } else {
                stacked
            };
        }
        let stream_major: Vec<usize> = (0..b)
            .flat_map(|s| (0..t_len).map(move |t| t * b + s))
            .collect();
        let hiddens = tape.gather_rows(input, stream_major)?;
        Ok((hiddens, HiddenState::Lstm(out_states)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::RngState;

    fn setup(layers: usize, hidden: usize, vocab: usize) -> (ParamStore, ParamId, Lstm) {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(3).stream(&[0]);
        let emb = store.add("embedding", uniform(&[vocab, hidden], 0.5, &mut rng));
        let lstm = Lstm::new(
            LstmConfig { layers, hidden, embed: hidden, dropout: 0.0 },
            &mut store,
            &mut rng,
        );
        (store, emb, lstm)
    }

    #[test]
    fn zero_weights_give_zero_hiddens() {
        let (mut store, emb, lstm) = setup(2, 4, 7);
        for p in store.iter_mut() {
            if p.name.starts_with("lstm") {
                p.value.fill(0.0);
            }
        }
        let mut tape = Tape::new(&store);
        let batch = Batch::new(2, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let mut rng = RngState::new(0).stream(&[]);
        let (h, _) = lstm
            .forward(&mut tape, emb, &batch, &lstm.zero_state(2), Mode::Eval, &mut rng)
            .unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn state_carry_matches_single_pass() {
        let (store, emb, lstm) = setup(2, 5, 9);
        let mut rng = RngState::new(0).stream(&[]);
        let ids = vec![3, 1, 4, 1, 5, 8];
        let mut tape = Tape::new(&store);
        let (whole, _) = lstm
            .forward(&mut tape, emb, &Batch::single(ids.clone()).unwrap(), &lstm.zero_state(1), Mode::Eval, &mut rng)
            .unwrap();
        let whole = tape.value(whole).clone();

        let mut state = lstm.zero_state(1);
        let mut rows = Vec::new();
        for part in ids.chunks(1) {
            let mut tape = Tape::new(&store);
            let (h, s) = lstm
                .forward(&mut tape, emb, &Batch::single(part.to_vec()).unwrap(), &state, Mode::Eval, &mut rng)
                .unwrap();
            rows.extend_from_slice(tape.value(h).data());
            state = s;
        }
        assert_eq!(whole.data(), rows.as_slice());
    }

    #[test]
    fn batched_streams_are_independent() {
        let (store, emb, lstm) = setup(1, 6, 9);
        let mut rng = RngState::new(0).stream(&[]);
        let a = [1, 2, 3, 4];
        let b = vec![8, 7, 6, 5];
        let mut tape = Tape::new(&store);
        let both: Vec<usize> = a.iter().chain(&b).copied().collect();
        let (h, _) = lstm
            .forward(&mut tape, emb, &Batch::new(2, 4, both).unwrap(), &lstm.zero_state(2), Mode::Eval, &mut rng)
            .unwrap();
        let batched = tape.value(h).clone();
        let mut tape = Tape::new(&store);
        let (hb, _) = lstm
            .forward(&mut tape, emb, &Batch::single(b).unwrap(), &lstm.zero_state(1), Mode::Eval, &mut rng)
            .unwrap();
        for (x, y) in batched.data()[4 * 6..].iter().zip(tape.value(hb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_state_is_a_config_error() {
        let (store, emb, lstm) = setup(2, 4, 5);
        let mut tape = Tape::new(&store);
        let mut rng = RngState::new(0).stream(&[]);
        let r = lstm.forward(&mut tape, emb, &Batch::single(vec![1]).unwrap(), &lstm.zero_state(3), Mode::Eval, &mut rng);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
