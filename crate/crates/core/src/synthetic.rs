//! Generated corpora where rare words repeat at short range.
//!
//! Each sentence is a run of uniformly drawn common words with one rare word
//! inserted twice, both occurrences inside a fixed token window. The first
//! occurrence is essentially unpredictable; the second can be copied.

use rand::Rng;

use crate::numcore::RngState;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub common: usize,
    pub rare: usize,
    pub train_tokens: usize,
    pub heldout_tokens: usize,
    /// Common words per sentence, inclusive range.
    pub min_len: usize,
    pub max_len: usize,
    /// Both occurrences of the rare word lie within this many tokens.
    pub window: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            common: 200,
            rare: 800,
            train_tokens: 100_000,
            heldout_tokens: 10_000,
            min_len: 10,
            max_len: 30,
            window: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<Vec<String>>,
    pub dev: Vec<Vec<String>>,
    pub test: Vec<Vec<String>>,
}

pub fn common_word(i: usize) -> String {
    format!("c{i}")
}

pub fn rare_word(i: usize) -> String {
    format!("r{i}")
}

pub fn is_rare(word: &str) -> bool {
    word.starts_with('r')
}

fn sentence(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<String> {
    let n = rng.random_range(spec.min_len..=spec.max_len);
    let mut words: Vec<String> = (0..n).map(|_| common_word(rng.random_range(0..spec.common))).collect();
    let rare = rare_word(rng.random_range(0..spec.rare));
    // final sentence has n + 2 words; pick first slot, then second within the window
    let first = rng.random_range(0..=n);
    let last = (first + spec.window - 1).min(n + 1);
    let second = rng.random_range(first + 1..=last);
    words.insert(first, rare.clone());
    words.insert(second, rare);
    words
}

/// Sentences until at least `tokens` tokens (each sentence also counts its
/// end-of-sentence marker).
fn split(spec: &SyntheticSpec, tokens: usize, rng: &mut impl Rng) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut count = 0;
    while count < tokens {
        let s = sentence(spec, rng);
        count += s.len() + 1;
        out.push(s);
    }
    out
}

pub fn self_trigger_corpus(spec: &SyntheticSpec, seed: u64) -> SyntheticCorpus {
    let rng = RngState::new(seed);
    SyntheticCorpus {
        train: split(spec, spec.train_tokens, &mut rng.stream(&[1])),
        dev: split(spec, spec.heldout_tokens, &mut rng.stream(&[2])),
        test: split(spec, spec.heldout_tokens, &mut rng.stream(&[3])),
    }
}

/// Indices `k` of `ids` holding a rare word already seen within the previous
/// `window - 1` tokens.
pub fn repeat_positions(ids: &[usize], rare: impl Fn(usize) -> bool, window: usize) -> Vec<usize> {
    (0..ids.len())
        .filter(|&k| rare(ids[k]) && ids[k.saturating_sub(window - 1)..k].contains(&ids[k]))
        .collect()
}
