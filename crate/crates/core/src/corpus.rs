//! Text ingestion: vocabulary, token streams, BPTT chunking and
//! training-frequency buckets.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// Which words survive into the vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabPolicy {
    /// Keep words seen at least this many times.
    MinCount(u64),
    /// Keep this many entries in total, `</s>` and `<unk>` included.
    TopK(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    word_to_id: HashMap<String, usize>,
    id_to_word: Vec<String>,
    unk_id: usize,
    eos_id: usize,
    train_freq: Vec<u64>,
}

/// Reads UTF-8 text, one sentence per line, whitespace tokenised.
/// Blank lines are skipped.
pub fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    Ok(parse_sentences(&text))
}

pub fn parse_sentences(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Joins sentences into one token sequence with `</s>` after each sentence.
pub fn join_with_eos(sentences: &[Vec<String>]) -> Vec<String> {
    let mut out = Vec::with_capacity(sentences.iter().map(|s| s.len() + 1).sum());
    for s in sentences {
        out.extend(s.iter().cloned());
        out.push(EOS.to_string());
    }
    out
}

impl Vocabulary {
    pub fn build(tokens: &[String], policy: VocabPolicy) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Ingestion("empty training text".into()));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for t in tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
        let mut regular: Vec<(&str, u64)> = counts
            .iter()
            .filter(|(w, _)| **w != EOS && **w != UNK)
            .map(|(w, c)| (*w, *c))
            .collect();
        regular.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let kept: Vec<&str> = match policy {
            VocabPolicy::MinCount(min) => regular
                .iter()
                .filter(|(_, c)| *c >= min)
                .map(|(w, _)| *w)
                .collect(),
            VocabPolicy::TopK(k) => {
                if k < 3 {
                    return Err(Error::Config(format!("top_k {k} leaves no regular words")));
                }
                regular.iter().take(k - 2).map(|(w, _)| *w).collect()
            }
        };
        let kept_set: std::collections::HashSet<&str> = kept.iter().copied().collect();
        let mut unk_count = counts.get(UNK).copied().unwrap_or(0);
        for (w, c) in &regular {
            if !kept_set.contains(w) {
                unk_count += c;
            }
        }
        let mut entries: Vec<(String, u64)> = kept
            .iter()
            .map(|w| (w.to_string(), counts[w]))
            .collect();
        entries.push((EOS.to_string(), counts.get(EOS).copied().unwrap_or(0)));
        entries.push((UNK.to_string(), unk_count));
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(Self::from_entries(entries))
    }

    fn from_entries(entries: Vec<(String, u64)>) -> Self {
        let id_to_word: Vec<String> = entries.iter().map(|(w, _)| w.clone()).collect();
        let train_freq = entries.iter().map(|(_, c)| *c).collect();
        let word_to_id: HashMap<String, usize> = id_to_word
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary {
            unk_id: word_to_id[UNK],
            eos_id: word_to_id[EOS],
            word_to_id,
            id_to_word,
            train_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_word.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn eos_id(&self) -> usize {
        self.eos_id
    }

    pub fn train_freq(&self) -> &[u64] {
        &self.train_freq
    }

    pub fn id(&self, word: &str) -> usize {
        self.word_to_id.get(word).copied().unwrap_or(self.unk_id)
    }

    pub fn lookup(&self, word: &str) -> Option<usize> {
        self.word_to_id.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.id_to_word[id]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.word(i)).collect()
    }

    /// `word<TAB>id<TAB>train_freq` lines, sorted by id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, w) in self.id_to_word.iter().enumerate() {
            writeln!(s, "{w}\t{i}\t{}", self.train_freq[i]).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Format(format!("vocabulary line {}: {line:?}", n + 1));
            if fields.len() != 3 {
                return Err(bad());
            }
            let id: usize = fields[1].parse().map_err(|_| bad())?;
            if id != n {
                return Err(bad());
            }
            let freq: u64 = fields[2].parse().map_err(|_| bad())?;
            entries.push((fields[0].to_string(), freq));
        }
        if !entries.iter().any(|(w, _)| w == EOS) || !entries.iter().any(|(w, _)| w == UNK) {
            return Err(Error::Format("vocabulary lacks </s> or <unk>".into()));
        }
        Ok(Self::from_entries(entries))
    }

    /// Short content hash of the serialised vocabulary.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Flat id sequence together with its BPTT chunk length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<usize>,
    pub chunk_len: usize,
}

impl TokenStream {
    pub fn new(ids: Vec<usize>, chunk_len: usize, vocab_size: usize) -> Result<Self> {
        if chunk_len == 0 {
            return Err(Error::Config("chunk_len must be positive".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab_size) {
            return Err(Error::Ingestion(format!(
                "token id {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(TokenStream { ids, chunk_len })
    }

    pub fn from_sentences(
        vocab: &Vocabulary,
        sentences: &[Vec<String>],
        chunk_len: usize,
    ) -> Result<Self> {
        Self::new(vocab.encode(&join_with_eos(sentences)), chunk_len, vocab.len())
    }

    pub fn chunks(&self) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        chunk(&self.ids, self.chunk_len)
    }
}

/// Input ranges of consecutive non-overlapping chunks; targets are the same
/// ranges shifted by one. A trailing remainder shorter than `chunk_len` is
/// dropped.
pub fn chunk_ranges(n_ids: usize, chunk_len: usize) -> Result<Vec<Range<usize>>> {
    if chunk_len == 0 {
        return Err(Error::Config("chunk_len must be positive".into()));
    }
    if n_ids < chunk_len + 1 {
        return Err(Error::Ingestion(format!(
            "stream of {n_ids} ids is shorter than one chunk of {chunk_len} plus a target"
        )));
    }
    let n = (n_ids - 1) / chunk_len;
    Ok((0..n).map(|c| c * chunk_len..(c + 1) * chunk_len).collect())
}

pub fn chunk(ids: &[usize], chunk_len: usize) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    Ok(chunk_ranges(ids.len(), chunk_len)?
        .into_iter()
        .map(|r| {
            (
                ids[r.clone()].to_vec(),
                ids[r.start + 1..r.end + 1].to_vec(),
            )
        })
        .collect())
}

/// Target ids actually scored by chunked evaluation, in order.
pub fn chunked_targets(ids: &[usize], chunk_len: usize) -> Result<Vec<usize>> {
    let ranges = chunk_ranges(ids.len(), chunk_len)?;
    let end = ranges.last().map_or(0, |r| r.end);
    Ok(ids[1..end + 1].to_vec())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyBuckets {
    pub n_buckets: usize,
    /// Bucket index per vocabulary id.
    pub assignment: Vec<usize>,
    pub test_token_counts: Vec<u64>,
    /// (lowest, highest) training frequency per bucket.
    pub freq_range: Vec<(u64, u64)>,
}

/// Splits the vocabulary, in descending training-frequency order, into
/// buckets holding roughly equal numbers of test tokens.
pub fn build_buckets(
    vocab: &Vocabulary,
    test_ids: &[usize],
    n_buckets: usize,
) -> Result<FrequencyBuckets> {
    if n_buckets == 0 || n_buckets > vocab.len() {
        return Err(Error::Config(format!(
            "{n_buckets} buckets for {} distinct words",
            vocab.len()
        )));
    }
    let mut per_word = vec![0u64; vocab.len()];
    for &id in test_ids {
        if id >= vocab.len() {
            return Err(Error::Ingestion(format!("test id {id} outside vocabulary")));
        }
        per_word[id] += 1;
    }
    let freq = vocab.train_freq();
    let mut order: Vec<usize> = (0..vocab.len()).collect();
    order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));

    let target = test_ids.len() as f64 / n_buckets as f64;
    let mut assignment = vec![0; vocab.len()];
    let mut counts = vec![0u64; n_buckets];
    let mut ranges: Vec<Option<(u64, u64)>> = vec![None; n_buckets];
    let mut bucket = 0;
    for id in order {
        assignment[id] = bucket;
        counts[bucket] += per_word[id];
        let f = freq[id];
        ranges[bucket] = Some(match ranges[bucket] {
            None => (f, f),
            Some((lo, hi)) => (lo.min(f), hi.max(f)),
        });
        if bucket + 1 < n_buckets && counts[bucket] as f64 >= target {
            bucket += 1;
        }
    }
    Ok(FrequencyBuckets {
        n_buckets,
        assignment,
        test_token_counts: counts,
        freq_range: ranges.into_iter().map(|r| r.unwrap_or((0, 0))).collect(),
    })
}
