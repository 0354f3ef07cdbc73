//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`) so the long synthetic training
//! run is shared by the criteria that need it. Exit status is non-zero if any
//! gating criterion fails.

use std::time::Instant;

use cachelm::backbone::{Batch, Mode};
use cachelm::checkpoint::Checkpoint;
use cachelm::config::{BackboneKind, ModelSection, PointerConfig, PointerSection, RunConfig, TrainSection};
use cachelm::corpus::{chunk, chunked_targets, join_with_eos, VocabPolicy, Vocabulary};
use cachelm::evaluation::{
    bucket_analysis, collect_cache_inputs, evaluate_perplexity, evaluate_stream, neural_cache_perplexity,
    rescore, CacheParams, EvalResult, Hypothesis, NBestList, RescoreOptions,
};
use cachelm::model::LanguageModel;
use cachelm::numcore::{softmax_slice, RngState, Tape};
use cachelm::pointer::{aggregate_word_probs, pointer_logits, PointerHead, PointerState, Slot};
use cachelm::selftest::{gradient_suite, tiny_model_config};
use cachelm::synthetic::{is_rare, repeat_positions, self_trigger_corpus, SyntheticSpec};
use cachelm::training::{mean_chunk_loss, train};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET_SECS: f64 = 60.0;
const NORM_TOL: f64 = 1e-6;
const NORM_CASES: u32 = 10_000;
const PPL_TOL: f64 = 1e-9;
const RARE_RATIO: f64 = 2.0;
const SYNTH_BUDGET_SECS: f64 = 30.0 * 60.0;
const RESCORE_BUDGET_SECS: f64 = 60.0;
const CACHE_TOL: f64 = 1e-9;

const SYNTH_SEED: u64 = 1;
const SYNTH_CHUNK: usize = 64;
const SYNTH_WINDOW: usize = 40;

struct Outcome {
    id: &'static str,
    passed: bool,
    gating: bool,
    detail: String,
}

impl Outcome {
    fn new(id: &'static str, passed: bool, detail: String) -> Self {
        Outcome { id, passed, gating: true, detail }
    }

    fn failed(id: &'static str, e: impl std::fmt::Display) -> Self {
        Self::new(id, false, format!("error: {e}"))
    }
}

fn report(o: &Outcome) {
    let tag = match (o.passed, o.gating) {
        (true, _) => "PASS",
        (false, true) => "FAIL",
        (false, false) => "SKIP",
    };
    println!("{tag} [{}] {}", o.id, o.detail);
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for kind in [BackboneKind::Lstm, BackboneKind::Transformer] {
        match gradient_suite(kind, 1) {
            Ok(r) => {
                worst = worst.max(r.max_rel_error);
                parts.push(format!("{kind:?}={:.2e}", r.max_rel_error));
            }
            Err(e) => return Outcome::failed("1 gradient suite", e),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        "1 gradient suite",
        worst < GRAD_TOL && secs < GRAD_BUDGET_SECS,
        format!("max_rel_error {} (tol {GRAD_TOL:e}), {secs:.1}s (budget {GRAD_BUDGET_SECS}s)", parts.join(" ")),
    )
}

/// Per-token losses (tape route) and word distributions (value route).
fn losses_and_dists(m: &LanguageModel, inputs: &[usize], targets: &[usize]) -> cachelm::Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let batch = Batch::single(inputs.to_vec())?;
    let mut tape = Tape::new(&m.store);
    let mut unused = RngState::new(0).stream(&[]);
    let out = m.chunk_loss(&mut tape, &batch, targets, &m.initial_state(1), Mode::Eval, &mut unused)?;
    let (h, _) = m.hiddens(&batch, &m.initial_state(1))?;
    let (q, _) = m.distributions(&h, inputs, &m.fresh_pointer_state())?;
    Ok((out.nll, q))
}

fn c2_zero_window() -> Outcome {
    let id = "2 L=0 reduces to plain LM";
    let run = || -> cachelm::Result<(usize, usize)> {
        let mut draw = RngState::new(2).stream(&[]);
        let mut mismatches = 0;
        let mut steps = 0;
        for kind in [BackboneKind::Lstm, BackboneKind::Transformer] {
            let rng = RngState::new(5);
            let plain = LanguageModel::new(tiny_model_config(kind, 8, 2, PointerConfig::disabled(), 8), 30, vec![], &rng)?;
            let zero = LanguageModel::new(tiny_model_config(kind, 8, 2, PointerConfig::with_window(0), 8), 30, vec![], &rng)?;
            for _ in 0..500 {
                let len = draw.random_range(1..=8);
                let inputs: Vec<usize> = (0..len).map(|_| draw.random_range(0..30)).collect();
                let targets: Vec<usize> = (0..len).map(|_| draw.random_range(0..30)).collect();
                let a = losses_and_dists(&plain, &inputs, &targets)?;
                let b = losses_and_dists(&zero, &inputs, &targets)?;
                let same = a.0.iter().zip(&b.0).all(|(x, y)| x.to_bits() == y.to_bits())
                    && a.1.iter().flatten().zip(b.1.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits());
                mismatches += usize::from(!same);
                steps += 1;
            }
        }
        Ok((steps, mismatches))
    };
    match run() {
        Ok((steps, bad)) => Outcome::new(id, bad == 0, format!("{steps} random steps, {bad} not bit-identical")),
        Err(e) => Outcome::failed(id, e),
    }
}

fn c3_param_count() -> Outcome {
    let id = "3 pointer adds (L+1)*H parameters";
    let mut draw = RngState::new(3).stream(&[]);
    let mut lines = Vec::new();
    let mut ok = true;
    for i in 0..10 {
        let h = 2 * draw.random_range(1..=16usize);
        let l = draw.random_range(0..=40usize);
        let v = draw.random_range(5..=300usize);
        let kind = if i % 2 == 0 { BackboneKind::Lstm } else { BackboneKind::Transformer };
        let cfg = |p| tiny_model_config(kind, h, 1, p, 16);
        let rng = RngState::new(i);
        let (base, ptr) = match (
            LanguageModel::new(cfg(PointerConfig::disabled()), v, vec![], &rng),
            LanguageModel::new(cfg(PointerConfig::with_window(l)), v, vec![], &rng),
        ) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return Outcome::failed(id, e),
        };
        let extra = ptr.num_params() - base.num_params();
        ok &= extra == (l + 1) * h;
        lines.push(format!("(H={h},L={l},V={v}):{extra}"));
    }
    Outcome::new(id, ok, lines.join(" "))
}

fn c4_normalisation() -> Outcome {
    let id = "4 softmax and aggregation normalise";
    // mode 0: random validity, 1: all masked, 2: all valid
    let strategy = (1usize..40, 1usize..10, 0usize..12, 0u8..3, any::<u64>());
    let mut runner = TestRunner::new(PropConfig { cases: NORM_CASES, failure_persistence: None, ..PropConfig::default() });
    let worst = std::cell::Cell::new(0.0f64);
    let counts = std::cell::Cell::new([0usize; 3]);
    let result = runner.run(&strategy, |(v, h, l, mode, seed)| {
        let mut r = RngState::new(seed).stream(&[]);
        let mut t = |shape: &[usize], s: f64| cachelm::numcore::uniform(shape, s, &mut r);
        let (w, b, wp, wm) = (t(&[v, h], 4.0), t(&[v], 4.0), t(&[l, h], 4.0), t(&[h, 1], 4.0));
        let hid = t(&[h], 4.0).into_data();
        let mut r = RngState::new(seed).stream(&[1]);
        let slots: Vec<Slot> = (0..l)
            .map(|_| Slot {
                token: r.random_range(0..v),
                m_value: r.random_range(-6.0..6.0),
                valid: match mode {
                    0 => r.random(),
                    1 => false,
                    _ => true,
                },
            })
            .collect();
        let head = PointerHead { output: &w, bias: &b, projection: Some(&wp), memory: Some(&wm), exclude: &[] };
        let st = PointerState::from_slots(slots);
        let z = pointer_logits(&hid, &head, &st).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let y = softmax_slice(&z).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let q = aggregate_word_probs(&y, &st, v);
        let dy = (y.iter().sum::<f64>() - 1.0).abs();
        let dq = (q.iter().sum::<f64>() - 1.0).abs();
        worst.set(worst.get().max(dy).max(dq));
        let mut c = counts.get();
        c[mode as usize] += 1;
        counts.set(c);
        prop_assert!(dy < NORM_TOL && dq < NORM_TOL);
        Ok(())
    });
    let (worst, counts) = (worst.get(), counts.get());
    let passed = result.is_ok() && counts[1] > 0 && counts[2] > 0;
    Outcome::new(
        id,
        passed,
        format!(
            "{NORM_CASES} cases (random {}, all-masked {}, all-valid {}), max |sum-1| {worst:.1e} (tol {NORM_TOL:e}){}",
            counts[0],
            counts[1],
            counts[2],
            result.err().map_or(String::new(), |e| format!(", {e}"))
        ),
    )
}

fn c5_identity(trained: Option<(&LanguageModel, &[usize])>) -> Outcome {
    let id = "5 exp(mean loss) == evaluate_perplexity";
    let run = || -> cachelm::Result<f64> {
        let mut worst = 0.0f64;
        for kind in [BackboneKind::Lstm, BackboneKind::Transformer] {
            let rng = RngState::new(9);
            let m = LanguageModel::new(tiny_model_config(kind, 16, 2, PointerConfig::with_window(7), 7), 40, vec![], &rng)?;
            let mut draw = rng.stream(&[1]);
            let ids: Vec<usize> = (0..400).map(|_| draw.random_range(0..40)).collect();
            let a = mean_chunk_loss(&m, &ids, 7)?.exp();
            let b = evaluate_perplexity(&m, &ids, 7)?;
            worst = worst.max((a - b).abs());
        }
        if let Some((m, ids)) = trained {
            let a = mean_chunk_loss(m, ids, SYNTH_CHUNK)?.exp();
            let b = evaluate_perplexity(m, ids, SYNTH_CHUNK)?;
            worst = worst.max((a - b).abs());
        }
        Ok(worst)
    };
    match run() {
        Ok(d) => Outcome::new(
            id,
            d < PPL_TOL,
            format!("max |diff| {d:.2e} (tol {PPL_TOL:e}) over random LSTM/Transformer streams and the trained synthetic pointer model"),
        ),
        Err(e) => Outcome::failed(id, e),
    }
}

struct Synthetic {
    vocab: Vocabulary,
    test_ids: Vec<usize>,
    baseline: LanguageModel,
    pointer: LanguageModel,
    eval_base: EvalResult,
    eval_ptr: EvalResult,
    seconds: f64,
}

fn synthetic_config(pointer: bool) -> RunConfig {
    let base = RunConfig::default();
    RunConfig {
        seed: SYNTH_SEED,
        model: ModelSection { layers: 1, hidden: 128, dropout: 0.0, ..base.model },
        pointer: PointerSection { enabled: pointer, window: Some(64), ..base.pointer },
        train: TrainSection { chunk_len: SYNTH_CHUNK, batch_streams: 20, epochs: 20, lr0: Some(1.0), ..base.train },
        ..base
    }
}

fn train_synthetic() -> cachelm::Result<Synthetic> {
    let start = Instant::now();
    let corpus = self_trigger_corpus(&SyntheticSpec::default(), SYNTH_SEED);
    let train_tokens = join_with_eos(&corpus.train);
    let vocab = Vocabulary::build(&train_tokens, VocabPolicy::MinCount(1))?;
    let train_ids = vocab.encode(&train_tokens);
    let dev_ids = vocab.encode(&join_with_eos(&corpus.dev));
    let test_ids = vocab.encode(&join_with_eos(&corpus.test));
    let fit = |pointer: bool| -> cachelm::Result<LanguageModel> {
        let out = train(&synthetic_config(pointer), &vocab, &train_ids, &dev_ids, |r| {
            eprintln!("  [synthetic {}] {r}", if pointer { "pointer" } else { "baseline" })
        })?;
        out.best.model()
    };
    let baseline = fit(false)?;
    let pointer = fit(true)?;
    let eval_base = evaluate_stream(&baseline, &test_ids, SYNTH_CHUNK)?;
    let eval_ptr = evaluate_stream(&pointer, &test_ids, SYNTH_CHUNK)?;
    Ok(Synthetic {
        vocab,
        test_ids,
        baseline,
        pointer,
        eval_base,
        eval_ptr,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Mean probability of the repeated rare-word targets.
fn second_occurrence_prob(s: &Synthetic, e: &EvalResult) -> (f64, usize) {
    let rare = |i: usize| is_rare(s.vocab.word(i));
    let targets = chunked_targets(&s.test_ids, SYNTH_CHUNK).expect("chunkable");
    let probs: Vec<f64> = repeat_positions(&s.test_ids, rare, SYNTH_WINDOW)
        .into_iter()
        .filter(|&k| k >= 1 && k - 1 < targets.len())
        .map(|k| (-e.nll[k - 1]).exp())
        .collect();
    (probs.iter().sum::<f64>() / probs.len() as f64, probs.len())
}

fn c6_synthetic(s: &Synthetic) -> Outcome {
    let (pb, pp) = (s.eval_base.perplexity(), s.eval_ptr.perplexity());
    let (rb, n) = second_occurrence_prob(s, &s.eval_base);
    let (rp, _) = second_occurrence_prob(s, &s.eval_ptr);
    Outcome::new(
        "6 synthetic self-trigger benefit",
        pp < pb && rp >= RARE_RATIO * rb && s.seconds < SYNTH_BUDGET_SECS,
        format!(
            "test ppl baseline {pb:.3} pointer {pp:.3}; repeated-rare mean p baseline {rb:.5} pointer {rp:.5} (ratio {:.1}, need >= {RARE_RATIO}) over {n} tokens; {:.0}s (budget {SYNTH_BUDGET_SECS}s)",
            rp / rb,
            s.seconds
        ),
    )
}

fn c7_buckets(s: &Synthetic) -> Outcome {
    let id = "7 bucket analysis trend";
    let r = match bucket_analysis(&s.vocab, &s.eval_base, &s.eval_ptr, 10) {
        Ok(r) => r,
        Err(e) => return Outcome::failed(id, e),
    };
    let argmax = (0..r.rows.len()).max_by(|&a, &b| r.rows[a].delta.total_cmp(&r.rows[b].delta)).unwrap();
    let rarest = r.rows.len() - 1;
    let ida = (r.weighted_mean(false) - s.eval_base.perplexity().ln()).abs();
    let idb = (r.weighted_mean(true) - s.eval_ptr.perplexity().ln()).abs();
    let deltas: Vec<String> = r.rows.iter().map(|x| format!("{:.3}", x.delta)).collect();
    Outcome::new(
        id,
        argmax == rarest && r.rows[rarest].delta > 0.0 && ida < PPL_TOL && idb < PPL_TOL,
        format!(
            "deltas [{}], largest in bucket {argmax} (rarest {rarest}); partition identity error {:.1e} (tol {PPL_TOL:e})",
            deltas.join(", "),
            ida.max(idb)
        ),
    )
}

fn hyp(words: &[&str], score: f64) -> Hypothesis {
    Hypothesis { words: words.iter().map(|w| w.to_string()).collect(), score, ac: None }
}

fn c8_rescoring(s: &Synthetic) -> Outcome {
    let id = "8 rescoring state-carry fixture";
    let start = Instant::now();
    let run = || -> cachelm::Result<String> {
        let v = &s.vocab;
        // the first rare word in vocabulary order is the repeated one; the
        // competitor is the rare word the model prefers without context
        let rare: Vec<usize> = (0..v.len()).filter(|&i| is_rare(v.word(i))).collect();
        let target = rare[0];
        let prefix = ["c3", "c17", "c42", "c8", "c99", "c150"];
        let u2 = ["c5", "c61", "c120"];
        let lm_alone = |w: usize| -> cachelm::Result<f64> {
            let words: Vec<String> = u2.iter().map(|x| x.to_string()).chain([v.word(w).to_string()]).collect();
            let list = NBestList { utt: "probe".into(), conv: "probe".into(), hyps: vec![Hypothesis { words, score: 0.0, ac: None }] };
            let opts = RescoreOptions { lm_weight: 1.0, wip: 0.0, state_carry: false };
            Ok(rescore(&s.pointer, v, &[list], opts)?[0].lm_logprob)
        };
        let target_alone = lm_alone(target)?;
        let mut competitor = None;
        for &r in &rare[1..] {
            let lp = lm_alone(r)?;
            if lp > target_alone && competitor.is_none_or(|(_, best)| lp > best) {
                competitor = Some((r, lp));
            }
        }
        let (comp, _) = competitor.ok_or_else(|| cachelm::Error::Config("no competitor rare word".into()))?;
        let (tw, cw) = (v.word(target), v.word(comp));
        let utt1: Vec<&str> = prefix[..3].iter().copied().chain([tw]).chain(prefix[3..].iter().copied()).collect();
        let with = |w: &str| -> Vec<String> { u2.iter().copied().chain([w]).map(String::from).collect() };
        let lists = vec![
            NBestList { utt: "u1".into(), conv: "c".into(), hyps: vec![hyp(&utt1, -10.0)] },
            NBestList {
                utt: "u2".into(),
                conv: "c".into(),
                hyps: vec![
                    Hypothesis { words: with(cw), score: -5.0, ac: None },
                    Hypothesis { words: with(tw), score: -5.0, ac: None },
                ],
            },
        ];
        let pick = |carry: bool, w: f64| -> cachelm::Result<Vec<usize>> {
            let opts = RescoreOptions { lm_weight: w, wip: 0.0, state_carry: carry };
            Ok(rescore(&s.pointer, v, &lists, opts)?.iter().map(|c| c.index).collect())
        };
        let on = pick(true, 1.0)?;
        let off = pick(false, 1.0)?;
        let first_pass_on = pick(true, 0.0)?;
        let first_pass_off = pick(false, 0.0)?;
        let repeat = pick(true, 1.0)?;
        let ok = on[1] == 1 && off[1] == 0 && first_pass_on == [0, 0] && first_pass_off == [0, 0] && repeat == on;
        let msg = format!(
            "repeated '{tw}' vs competitor '{cw}': carry on picks hyp {}, carry off picks hyp {}, lm_weight=0 picks {:?}/{:?}",
            on[1], off[1], first_pass_on, first_pass_off
        );
        if ok { Ok(msg) } else { Err(cachelm::Error::Config(msg)) }
    };
    match run() {
        Ok(msg) => {
            let secs = start.elapsed().as_secs_f64();
            Outcome::new(id, secs < RESCORE_BUDGET_SECS, format!("{msg}; {secs:.2}s"))
        }
        Err(e) => Outcome::failed(id, e),
    }
}

fn c9_cache(s: &Synthetic) -> Outcome {
    let id = "9 neural cache degeneracies";
    let run = || -> cachelm::Result<(f64, f64)> {
        let ids = &s.test_ids[..=500];
        let chunk_len = 50;
        let inputs = collect_cache_inputs(&s.baseline, ids, chunk_len)?;
        let base = evaluate_perplexity(&s.baseline, ids, chunk_len)?;
        let lam0 = neural_cache_perplexity(&inputs, CacheParams { theta: 0.7, lambda: 0.0, cache_len: 100 })?;

        // brute force: full LM distributions, explicit window counts
        let (lambda, cache_len) = (0.25, 30);
        let mut state = s.baseline.initial_state(1);
        let mut targets = Vec::new();
        let mut nll = Vec::new();
        for (inp, tgt) in chunk(ids, chunk_len)? {
            let (h, next) = s.baseline.hiddens(&Batch::single(inp.clone())?, &state)?;
            let (qs, _) = s.baseline.distributions(&h, &inp, &s.baseline.fresh_pointer_state())?;
            for (q, &t) in qs.iter().zip(&tgt) {
                let start = targets.len().saturating_sub(cache_len);
                let window: &[usize] = &targets[start..];
                let mix = if window.is_empty() {
                    q[t]
                } else {
                    let count = window.iter().filter(|&&w| w == t).count() as f64;
                    (1.0 - lambda) * q[t] + lambda * count / window.len() as f64
                };
                nll.push(-mix.ln());
                targets.push(t);
            }
            state = next;
        }
        let brute = (nll.iter().sum::<f64>() / nll.len() as f64).exp();
        let theta0 = neural_cache_perplexity(&inputs, CacheParams { theta: 0.0, lambda, cache_len })?;
        Ok(((lam0 - base).abs(), (theta0 - brute).abs()))
    };
    match run() {
        Ok((d0, d1)) => Outcome::new(
            id,
            d0 < CACHE_TOL && d1 < CACHE_TOL,
            format!("lam=0 vs baseline {d0:.1e}, theta=0 vs brute-force window unigram {d1:.1e} (tol {CACHE_TOL:e}) on 500 tokens"),
        ),
        Err(e) => Outcome::failed(id, e),
    }
}

fn c10_ptb() -> Outcome {
    let id = "10 full PTB run (optional)";
    let Ok(dir) = std::env::var("CACHELM_PTB_DIR") else {
        return Outcome { id, passed: false, gating: false, detail: "CACHELM_PTB_DIR not set; hours-scale run not attempted".into() };
    };
    let run = || -> cachelm::Result<String> {
        let dir = std::path::Path::new(&dir);
        let read = |f: &str| cachelm::corpus::read_sentences(&dir.join(f)).map(|s| join_with_eos(&s));
        let (tr, dv, te) = (read("ptb.train.txt")?, read("ptb.valid.txt")?, read("ptb.test.txt")?);
        let vocab = Vocabulary::build(&tr, VocabPolicy::MinCount(1))?;
        let ids = |t: &[String]| vocab.encode(t);
        let mut out = Vec::new();
        for pointer in [false, true] {
            let mut rc = RunConfig::default();
            rc.pointer.enabled = pointer;
            let best: Checkpoint = train(&rc, &vocab, &ids(&tr), &ids(&dv), |r| eprintln!("  [ptb] {r}"))?.best;
            let ppl = evaluate_perplexity(&best.model()?, &ids(&te), rc.train.chunk_len)?;
            out.push(format!("{}={ppl:.2}", if pointer { "pointer" } else { "baseline" }));
        }
        Ok(out.join(" "))
    };
    match run() {
        Ok(msg) => Outcome { id, passed: true, gating: false, detail: format!("{msg} (reference neighbourhood 72 / 68, +-3)") },
        Err(e) => Outcome { id, passed: false, gating: false, detail: format!("error: {e}") },
    }
}

fn main() {
    // cargo passes harness flags such as --list or a filter; only run for a
    // plain invocation or an explicit "acceptance" filter
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if args.iter().any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return;
    }

    let mut outcomes = Vec::new();
    let mut record = |o: Outcome| {
        report(&o);
        outcomes.push(o);
    };
    record(c1_gradients());
    record(c2_zero_window());
    record(c3_param_count());
    record(c4_normalisation());
    match train_synthetic() {
        Ok(s) => {
            record(c5_identity(Some((&s.pointer, &s.test_ids))));
            record(c6_synthetic(&s));
            record(c7_buckets(&s));
            record(c8_rescoring(&s));
            record(c9_cache(&s));
        }
        Err(e) => {
            record(c5_identity(None));
            for id in ["6 synthetic self-trigger benefit", "7 bucket analysis trend", "8 rescoring state-carry fixture", "9 neural cache degeneracies"] {
                record(Outcome::failed(id, &e));
            }
        }
    }
    record(c10_ptb());

    let failed = outcomes.iter().filter(|o| o.gating && !o.passed).count();
    println!("acceptance: {} criteria, {failed} failed", outcomes.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

