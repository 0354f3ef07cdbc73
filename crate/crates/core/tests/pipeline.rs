use std::collections::HashMap;

use cachelm::checkpoint::Checkpoint;
use cachelm::config::{BackboneKind, RunConfig};
use cachelm::corpus::{chunk, chunked_targets, join_with_eos, parse_sentences, VocabPolicy, Vocabulary};
use cachelm::evaluation::{bucket_analysis, evaluate_perplexity, evaluate_stream, word_error_rate, Choice, EvalResult};
use cachelm::training::train;
use proptest::prelude::*;

const TEXT: &str = "the cat sat on the mat\nthe dog sat on the rug\na cat ran\nthe zebra ran on the mat\n\
a dog sat\nthe cat ran on the rug\na zebra sat on a mat\nthe dog ran\n";

fn toy(backbone: BackboneKind) -> (RunConfig, Vocabulary, Vec<usize>) {
    let tokens = join_with_eos(&parse_sentences(&TEXT.repeat(6)));
    let vocab = Vocabulary::build(&tokens, VocabPolicy::MinCount(1)).unwrap();
    let ids = vocab.encode(&tokens);
    let mut rc = RunConfig::default();
    rc.model.backbone = backbone;
    rc.model.layers = 1;
    rc.model.hidden = 8;
    rc.model.heads = 2;
    rc.model.dropout = 0.1;
    rc.pointer.window = Some(5);
    rc.train.epochs = 2;
    rc.train.batch_streams = 2;
    rc.train.chunk_len = 5;
    (rc, vocab, ids)
}

fn choice(utt: &str, words: &[&str]) -> Choice {
    Choice {
        utt: utt.into(),
        conv: "c".into(),
        index: 0,
        words: words.iter().map(|w| w.to_string()).collect(),
        total: 0.0,
        lm_logprob: 0.0,
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    for kind in [BackboneKind::Lstm, BackboneKind::Transformer] {
        let (rc, vocab, ids) = toy(kind);
        let mut epochs = 0;
        let a = train(&rc, &vocab, &ids, &ids, |_| epochs += 1).unwrap();
        let b = train(&rc, &vocab, &ids, &ids, |_| {}).unwrap();
        assert_eq!(epochs, 2);
        assert_eq!(a.history.len(), 2);
        let bytes = a.best.to_bytes().unwrap();
        assert_eq!(bytes, b.best.to_bytes().unwrap());

        let path = std::env::temp_dir().join(format!("cachelm-pipeline-{}-{kind:?}.ckpt", std::process::id()));
        a.best.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        let p0 = evaluate_perplexity(&a.best.model().unwrap(), &ids, 5).unwrap();
        let p1 = evaluate_perplexity(&loaded.model().unwrap(), &ids, 5).unwrap();
        assert_eq!(p0.to_bits(), p1.to_bits());
        assert!(p0 < vocab.len() as f64, "{kind:?} ppl {p0} not below uniform");
        assert_eq!(a.best.dev_ppl.map(f64::to_bits), Some(p0.to_bits()));
    }
}

#[test]
fn evaluation_scores_exactly_the_chunked_targets() {
    let (rc, vocab, ids) = toy(BackboneKind::Lstm);
    let model = train(&rc, &vocab, &ids, &ids, |_| {}).unwrap().best.model().unwrap();
    let r = evaluate_stream(&model, &ids, 7).unwrap();
    assert_eq!(r.targets, chunked_targets(&ids, 7).unwrap());
    assert!(r.nll.iter().all(|x| x.is_finite() && *x >= 0.0));
}

#[test]
fn perfect_hypotheses_have_zero_error_rate() {
    let refs: HashMap<String, Vec<String>> =
        [("u1".to_string(), vec!["a".to_string(), "b".to_string(), "c".to_string()])].into();
    assert_eq!(word_error_rate(&[choice("u1", &["a", "b", "c"])], &refs).unwrap(), 0.0);
    assert_eq!(word_error_rate(&[choice("u1", &["a", "x", "c"])], &refs).unwrap(), 1.0 / 3.0);
    assert_eq!(word_error_rate(&[choice("u1", &[])], &refs).unwrap(), 1.0);
    assert!(word_error_rate(&[choice("u2", &["a"])], &refs).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn chunks_tile_the_stream(ids in prop::collection::vec(0usize..50, 2..300), len in 1usize..40) {
        prop_assume!(ids.len() > len);
        let chunks = chunk(&ids, len).unwrap();
        prop_assert_eq!(chunks.len(), (ids.len() - 1) / len);
        let inputs: Vec<usize> = chunks.iter().flat_map(|c| c.0.clone()).collect();
        let targets: Vec<usize> = chunks.iter().flat_map(|c| c.1.clone()).collect();
        prop_assert_eq!(&inputs[..], &ids[..inputs.len()]);
        prop_assert_eq!(&targets[..], &ids[1..=inputs.len()]);
        prop_assert!(ids.len() - 1 - inputs.len() < len);
    }

    #[test]
    fn buckets_partition_the_mean(
        words in prop::collection::vec(0usize..30, 40..200),
        nll in prop::collection::vec((0.0..8.0f64, 0.0..8.0f64), 200),
        n in 1usize..6,
    ) {
        let tokens: Vec<String> = words.iter().map(|w| format!("w{w}")).collect();
        let vocab = Vocabulary::build(&tokens, VocabPolicy::MinCount(1)).unwrap();
        prop_assume!(vocab.len() >= n);
        let targets = vocab.encode(&tokens);
        let k = targets.len();
        let a = EvalResult { targets: targets.clone(), nll: nll[..k].iter().map(|p| p.0).collect() };
        let b = EvalResult { targets, nll: nll[..k].iter().map(|p| p.1).collect() };
        let r = bucket_analysis(&vocab, &a, &b, n).unwrap();
        prop_assert_eq!(r.rows.iter().map(|x| x.tokens).sum::<u64>(), k as u64);
        prop_assert!((r.weighted_mean(false) - a.mean_nll()).abs() < 1e-9);
        prop_assert!((r.weighted_mean(true) - b.mean_nll()).abs() < 1e-9);
        for row in &r.rows {
            prop_assert!((row.delta - (row.ce_a - row.ce_b)).abs() < 1e-12);
        }
    }
}
