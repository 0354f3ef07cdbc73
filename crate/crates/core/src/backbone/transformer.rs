use rand_chacha::ChaCha8Rng;

use super::{dropout, lookup, Batch, HiddenState, Mode};
use crate::config::TransformerConfig;
use crate::error::{Error, Result};
use crate::numcore::{uniform, CustomOp, ParamId, ParamStore, Tape, Tensor, Var};
use crate::par::*;

const INIT: f64 = 0.1;

struct Block {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_out: ParamId,
    b_out: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w_ff1: ParamId,
    b_ff1: ParamId,
    w_ff2: ParamId,
    b_ff2: ParamId,
}

/// Decoder-only pre-norm Transformer with optional learned positions.
pub struct Transformer {
    pub cfg: TransformerConfig,
    positions: Option<ParamId>,
    blocks: Vec<Block>,
    lnf_gain: ParamId,
    lnf_bias: ParamId,
}

impl Transformer {
    pub fn new(cfg: TransformerConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let ff = d * cfg.ffn_mult;
        let positions = cfg
            .use_positional_embedding
            .then(|| store.add("tf.positions", uniform(&[cfg.max_positions, d], INIT, rng)));
        let blocks = (0..cfg.layers)
            .map(|l| {
                let mut add = |name: &str, t: Tensor| store.add(format!("tf.{l}.{name}"), t);
                Block {
                    ln1_gain: add("ln1.gain", Tensor::full(&[d], 1.0)),
                    ln1_bias: add("ln1.bias", Tensor::zeros(&[d])),
                    w_qkv: add("attn.w_qkv", uniform(&[d, 3 * d], INIT, rng)),
                    b_qkv: add("attn.b_qkv", Tensor::zeros(&[3 * d])),
                    w_out: add("attn.w_out", uniform(&[d, d], INIT, rng)),
                    b_out: add("attn.b_out", Tensor::zeros(&[d])),
                    ln2_gain: add("ln2.gain", Tensor::full(&[d], 1.0)),
                    ln2_bias: add("ln2.bias", Tensor::zeros(&[d])),
                    w_ff1: add("ff.w1", uniform(&[d, ff], INIT, rng)),
                    b_ff1: add("ff.b1", Tensor::zeros(&[ff])),
                    w_ff2: add("ff.w2", uniform(&[ff, d], INIT, rng)),
                    b_ff2: add("ff.b2", Tensor::zeros(&[d])),
                }
            })
            .collect();
        let lnf_gain = store.add("tf.lnf.gain", Tensor::full(&[d], 1.0));
        let lnf_bias = store.add("tf.lnf.bias", Tensor::zeros(&[d]));
        Transformer {
            cfg,
            positions,
            blocks,
            lnf_gain,
            lnf_bias,
        }
    }

    pub fn bind(cfg: TransformerConfig, store: &ParamStore) -> Result<Self> {
        let positions = if cfg.use_positional_embedding {
            Some(lookup(store, "tf.positions")?)
        } else {
            None
        };
        let blocks = (0..cfg.layers)
            .map(|l| {
                let get = |name: &str| lookup(store, &format!("tf.{l}.{name}"));
                Ok(Block {
                    ln1_gain: get("ln1.gain")?,
                    ln1_bias: get("ln1.bias")?,
                    w_qkv: get("attn.w_qkv")?,
                    b_qkv: get("attn.b_qkv")?,
                    w_out: get("attn.w_out")?,
                    b_out: get("attn.b_out")?,
                    ln2_gain: get("ln2.gain")?,
                    ln2_bias: get("ln2.bias")?,
                    w_ff1: get("ff.w1")?,
                    b_ff1: get("ff.b1")?,
                    w_ff2: get("ff.w2")?,
                    b_ff2: get("ff.b2")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Transformer {
            cfg,
            positions,
            blocks,
            lnf_gain: lookup(store, "tf.lnf.gain")?,
            lnf_bias: lookup(store, "tf.lnf.bias")?,
        })
    }

    /// Encodes a chunk with no preceding context.
    pub fn forward(
        &self,
        tape: &mut Tape,
        embedding: ParamId,
        batch: &Batch,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        self.forward_with_prefix(tape, embedding, batch, &[], mode, rng)
    }

    /// Encodes `prefix ++ stream` for every stream and returns the hiddens of
    /// the stream positions only.
    pub fn forward_with_prefix(
        &self,
        tape: &mut Tape,
        embedding: ParamId,
        batch: &Batch,
        prefix: &[usize],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let (b, t_len, d) = (batch.streams, batch.len, self.cfg.d_model);
        let s_len = prefix.len() + t_len;
        if s_len > self.cfg.max_positions {
            return Err(Error::Config(format!(
                "sequence of {s_len} exceeds the position table of {}",
                self.cfg.max_positions
            )));
        }
        let ids: Vec<usize> = (0..b)
            .flat_map(|s| prefix.iter().copied().chain(batch.stream(s).iter().copied()))
            .collect();
        let emb = tape.param(embedding);
        let mut x = tape.gather_rows(emb, ids)?;
        if let Some(pos) = self.positions {
            let pv = tape.param(pos);
            let rows: Vec<usize> = (0..b).flat_map(|_| 0..s_len).collect();
            let p = tape.gather_rows(pv, rows)?;
            x = tape.add(x, p)?;
        }
        x = dropout(tape, x, self.cfg.dropout, mode, rng)?;
        for blk in &self.blocks {
            let (g1, b1) = (tape.param(blk.ln1_gain), tape.param(blk.ln1_bias));
            let a = tape.layer_norm(x, g1, b1)?;
            let (wq, bq) = (tape.param(blk.w_qkv), tape.param(blk.b_qkv));
            let qkv = tape.matmul(a, wq, false)?;
            let qkv = tape.add_bias(qkv, bq)?;
            let (value, op) = causal_attention(tape.value(qkv), b, s_len, self.cfg.heads)?;
            let att = tape.custom(Box::new(op), vec![qkv], value)?;
            let (wo, bo) = (tape.param(blk.w_out), tape.param(blk.b_out));
            let o = tape.matmul(att, wo, false)?;
            let o = tape.add_bias(o, bo)?;
            let o = dropout(tape, o, self.cfg.dropout, mode, rng)?;
            x = tape.add(x, o)?;

            let (g2, b2) = (tape.param(blk.ln2_gain), tape.param(blk.ln2_bias));
            let f = tape.layer_norm(x, g2, b2)?;
            let (w1, bb1) = (tape.param(blk.w_ff1), tape.param(blk.b_ff1));
            let f = tape.matmul(f, w1, false)?;
            let f = tape.add_bias(f, bb1)?;
            let f = tape.gelu(f)?;
            let (w2, bb2) = (tape.param(blk.w_ff2), tape.param(blk.b_ff2));
            let f = tape.matmul(f, w2, false)?;
            let f = tape.add_bias(f, bb2)?;
            let f = dropout(tape, f, self.cfg.dropout, mode, rng)?;
            x = tape.add(x, f)?;
        }
        let (gf, bf) = (tape.param(self.lnf_gain), tape.param(self.lnf_bias));
        let mut out = tape.layer_norm(x, gf, bf)?;
        debug_assert_eq!(tape.shape(out), &[b * s_len, d]);
        if !prefix.is_empty() {
            let rows: Vec<usize> = (0..b)
                .flat_map(|s| (prefix.len()..s_len).map(move |t| s * s_len + t))
                .collect();
            out = tape.gather_rows(out, rows)?;
        }
        Ok(out)
    }

    /// Uses the carried token history as prefix; all streams must carry the
    /// same amount of history. The returned history is trimmed so that it
    /// leaves room for at least one more position.
    pub fn forward_with_history(
        &self,
        tape: &mut Tape,
        embedding: ParamId,
        batch: &Batch,
        state: &HiddenState,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, HiddenState)> {
        let HiddenState::Transformer(histories) = state else {
            return Err(Error::Config("Transformer given an LSTM state".into()));
        };
        if histories.len() != batch.streams {
            return Err(Error::Config("history count differs from stream count".into()));
        }
        let room = self.cfg.max_positions.saturating_sub(batch.len);
        let keep = histories.iter().map(|h| h.len().min(room)).min().unwrap_or(0);
        let prefixes: Vec<&[usize]> = histories.iter().map(|h| &h[h.len() - keep..]).collect();
        if prefixes.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Config("streams with different histories cannot share a batch".into()));
        }
        let prefix = prefixes.first().copied().unwrap_or(&[]);
        let out = self.forward_with_prefix(tape, embedding, batch, prefix, mode, rng)?;
        let cap = self.cfg.max_positions.saturating_sub(1);
        let next = histories
            .iter()
            .enumerate()
            .map(|(s, h)| {
                let mut n: Vec<usize> = h.iter().chain(batch.stream(s)).copied().collect();
                if n.len() > cap {
                    n.drain(..n.len() - cap);
                }
                n
            })
            .collect();
        Ok((out, HiddenState::Transformer(next)))
    }
}

/// Multi-head causal self-attention over packed `[q | k | v]` rows.
///
/// Rows are stream-major (`stream * len + t`); the output has one third of the
/// input width. Position `t` attends to positions `0..=t` of its own stream.
pub struct CausalAttention {
    streams: usize,
    len: usize,
    heads: usize,
    /// Attention weights per (stream, head), each `len x len` row-major.
    probs: Vec<Vec<f64>>,
}

pub fn causal_attention(
    qkv: &Tensor,
    streams: usize,
    len: usize,
    heads: usize,
) -> Result<(Tensor, CausalAttention)> {
    if qkv.shape().len() != 2 || qkv.rows() != streams * len || !qkv.cols().is_multiple_of(3 * heads) {
        return Err(Error::Dimension(format!(
            "attention input {:?} for {streams} streams x {len}, {heads} heads",
            qkv.shape()
        )));
    }
    let d = qkv.cols() / 3;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let jobs: Vec<(usize, usize)> = (0..streams).flat_map(|s| (0..heads).map(move |h| (s, h))).collect();
    let results: Vec<(Vec<f64>, Vec<f64>)> = jobs
        .par_iter()
        .map(|&(s, h)| {
            let row = |t: usize| qkv.row(s * len + t);
            let mut probs = vec![0.0; len * len];
            let mut out = vec![0.0; len * hd];
            for i in 0..len {
                let q = &row(i)[h * hd..(h + 1) * hd];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let k = &row(j)[d + h * hd..d + (h + 1) * hd];
                    let sc = crate::numcore::dot(q, k) * scale;
                    probs[i * len + j] = sc;
                    max = max.max(sc);
                }
                let mut z = 0.0;
                for j in 0..=i {
                    let e = (probs[i * len + j] - max).exp();
                    probs[i * len + j] = e;
                    z += e;
                }
                for j in 0..=i {
                    probs[i * len + j] /= z;
                    let p = probs[i * len + j];
                    let v = &row(j)[2 * d + h * hd..2 * d + (h + 1) * hd];
                    for (o, vv) in out[i * hd..(i + 1) * hd].iter_mut().zip(v) {
                        *o += p * vv;
                    }
                }
            }
            (probs, out)
        })
        .collect();
    let mut output = Tensor::zeros(&[streams * len, d]);
    let mut probs = Vec::with_capacity(jobs.len());
    for (&(s, h), (p, o)) in jobs.iter().zip(results) {
        for i in 0..len {
            output.row_mut(s * len + i)[h * hd..(h + 1) * hd].copy_from_slice(&o[i * hd..(i + 1) * hd]);
        }
        probs.push(p);
    }
    Ok((
        output,
        CausalAttention {
            streams,
            len,
            heads,
            probs,
        },
    ))
}

impl CustomOp for CausalAttention {
    fn name(&self) -> &'static str {
        "causal_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let qkv = inputs[0];
        let (len, heads) = (self.len, self.heads);
        let d = qkv.cols() / 3;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let jobs: Vec<(usize, usize)> =
            (0..self.streams).flat_map(|s| (0..heads).map(move |h| (s, h))).collect();
        // per job: (dq, dk, dv), each len x hd
        let parts: Vec<[Vec<f64>; 3]> = jobs
            .par_iter()
            .enumerate()
            .map(|(job, &(s, h))| {
                let probs = &self.probs[job];
                let row = |t: usize| qkv.row(s * len + t);
                let mut dq = vec![0.0; len * hd];
                let mut dk = vec![0.0; len * hd];
                let mut dv = vec![0.0; len * hd];
                let mut da = vec![0.0; len];
                for i in 0..len {
                    let go = &grad.row(s * len + i)[h * hd..(h + 1) * hd];
                    let mut weighted = 0.0;
                    for j in 0..=i {
                        let v = &row(j)[2 * d + h * hd..2 * d + (h + 1) * hd];
                        da[j] = crate::numcore::dot(go, v);
                        weighted += probs[i * len + j] * da[j];
                        let p = probs[i * len + j];
                        for (acc, g) in dv[j * hd..(j + 1) * hd].iter_mut().zip(go) {
                            *acc += p * g;
                        }
                    }
                    let q = &row(i)[h * hd..(h + 1) * hd];
                    for j in 0..=i {
                        let ds = probs[i * len + j] * (da[j] - weighted) * scale;
                        let k = &row(j)[d + h * hd..d + (h + 1) * hd];
                        for c in 0..hd {
                            dq[i * hd + c] += ds * k[c];
                            dk[j * hd + c] += ds * q[c];
                        }
                    }
                }
                [dq, dk, dv]
            })
            .collect();
        let mut g = Tensor::zeros(qkv.shape());
        for (&(s, h), [dq, dk, dv]) in jobs.iter().zip(parts) {
            for i in 0..len {
                let r = g.row_mut(s * len + i);
                r[h * hd..(h + 1) * hd].copy_from_slice(&dq[i * hd..(i + 1) * hd]);
                r[d + h * hd..d + (h + 1) * hd].copy_from_slice(&dk[i * hd..(i + 1) * hd]);
                r[2 * d + h * hd..2 * d + (h + 1) * hd].copy_from_slice(&dv[i * hd..(i + 1) * hd]);
            }
        }
        Ok(vec![Some(g)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, RngState};

    fn setup(pos: bool, layers: usize, d: usize, heads: usize) -> (ParamStore, ParamId, Transformer) {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(5).stream(&[0]);
        let emb = store.add("embedding", uniform(&[11, d], 0.8, &mut rng));
        let tf = Transformer::new(
            TransformerConfig {
                layers,
                d_model: d,
                heads,
                ffn_mult: 2,
                dropout: 0.0,
                use_positional_embedding: pos,
                max_positions: 8,
            },
            &mut store,
            &mut rng,
        );
        (store, emb, tf)
    }

    fn hiddens(store: &ParamStore, emb: ParamId, tf: &Transformer, ids: Vec<usize>) -> Tensor {
        let mut tape = Tape::new(store);
        let mut rng = RngState::new(0).stream(&[]);
        let h = tf.forward(&mut tape, emb, &Batch::single(ids).unwrap(), Mode::Eval, &mut rng).unwrap();
        tape.value(h).clone()
    }

    #[test]
    fn future_tokens_do_not_leak() {
        let (store, emb, tf) = setup(true, 2, 8, 2);
        let a = hiddens(&store, emb, &tf, vec![1, 2, 3, 4, 5]);
        let b = hiddens(&store, emb, &tf, vec![1, 2, 3, 9, 10]);
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn without_positions_prefix_order_is_invisible() {
        let (store, emb, tf) = setup(false, 1, 8, 1);
        let a = hiddens(&store, emb, &tf, vec![1, 2, 3, 7]);
        let b = hiddens(&store, emb, &tf, vec![3, 1, 2, 7]);
        for (x, y) in a.row(3).iter().zip(b.row(3)) {
            assert!((x - y).abs() < 1e-12);
        }
        let (store, emb, tf) = setup(true, 1, 8, 1);
        let a = hiddens(&store, emb, &tf, vec![1, 2, 3, 7]);
        let b = hiddens(&store, emb, &tf, vec![3, 1, 2, 7]);
        assert!(a.row(3).iter().zip(b.row(3)).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn too_long_chunk_is_a_config_error() {
        let (store, emb, tf) = setup(true, 1, 8, 2);
        let mut tape = Tape::new(&store);
        let mut rng = RngState::new(0).stream(&[]);
        let r = tf.forward(&mut tape, emb, &Batch::single(vec![1; 9]).unwrap(), Mode::Eval, &mut rng);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn prefix_reencoding_matches_full_sequence() {
        let (store, emb, tf) = setup(true, 2, 8, 2);
        let full = hiddens(&store, emb, &tf, vec![4, 5, 6, 7, 8]);
        let mut tape = Tape::new(&store);
        let mut rng = RngState::new(0).stream(&[]);
        let h = tf
            .forward_with_prefix(&mut tape, emb, &Batch::single(vec![7, 8]).unwrap(), &[4, 5, 6], Mode::Eval, &mut rng)
            .unwrap();
        assert_eq!(tape.value(h).row(0), full.row(3));
        assert_eq!(tape.value(h).row(1), full.row(4));
    }

    #[test]
    fn attention_gradient() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(2).stream(&[]);
        let x = store.add("qkv", uniform(&[2 * 3, 12], 1.0, &mut rng));
        let r = grad_check(&mut store, &[x], 1e-5, 1000, |t| {
            let xv = t.param(x);
            let (v, op) = causal_attention(t.value(xv), 2, 3, 2)?;
            let a = t.custom(Box::new(op), vec![xv], v)?;
            let sq = t.mul(a, a)?;
            let w = t.slice_cols(sq, 1, 2)?;
            t.sum(w)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
