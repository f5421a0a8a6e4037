//! Vocabularies, parallel corpus ingestion and padded batch assembly.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Default cap on training sentence length (tokens, either side).
pub const DEFAULT_MAX_TRAIN_LEN: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::reserved_only()
    }
}

impl Vocabulary {
    pub fn reserved_only() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Vocabulary { tokens, index }
    }

    /// Keeps the `cap` most frequent tokens, ties broken lexicographically.
    pub fn from_counts(counts: HashMap<String, usize>, cap: usize) -> Self {
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut v = Self::reserved_only();
        for (tok, _) in entries.into_iter().take(cap) {
            v.push(tok);
        }
        v
    }

    pub fn from_lines<'a>(lines: impl IntoIterator<Item = &'a str>, cap: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for tok in line.split_whitespace() {
                *counts.entry(tok.to_string()).or_default() += 1;
            }
        }
        Self::from_counts(counts, cap)
    }

    /// Builds a vocabulary from explicit tokens in id order.
    pub fn from_tokens<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = Self::reserved_only();
        for t in tokens {
            let t = t.as_ref();
            if !v.index.contains_key(t) {
                v.push(t.to_string());
            }
        }
        v
    }

    fn push(&mut self, tok: String) {
        self.index.insert(tok.clone(), self.tokens.len());
        self.tokens.push(tok);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Tokens joined by spaces; the end marker and anything after it is dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != BOS && id != PAD)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokens(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&id| self.token(id).to_string()).collect()
    }

    /// Writes one `token<TAB>id` line per entry, reserved entries first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| {
                Error::Data(format!("{}:{}: expected token<TAB>id", path.display(), n + 1))
            })?;
            let id: usize = id.trim().parse().map_err(|_| {
                Error::Data(format!("{}:{}: bad id {id:?}", path.display(), n + 1))
            })?;
            if id != n {
                return Err(Error::Data(format!(
                    "{}:{}: ids must be contiguous from 0, found {id}",
                    path.display(),
                    n + 1
                )));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Data(format!(
                "{}: reserved entries {RESERVED:?} must come first",
                path.display()
            )));
        }
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Ok(Vocabulary { tokens, index })
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

pub fn build_vocab(path: &Path, cap: usize) -> Result<Vocabulary> {
    let lines = read_lines(path)?;
    Ok(Vocabulary::from_lines(lines.iter().map(String::as_str), cap))
}

/// Source ids are unwrapped; target ids are wrapped as `BOS … EOS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl SentencePair {
    pub fn new(source: Vec<usize>, core_target: &[usize]) -> Self {
        let mut target = Vec::with_capacity(core_target.len() + 2);
        target.push(BOS);
        target.extend_from_slice(core_target);
        target.push(EOS);
        SentencePair { source, target }
    }

    /// Number of target tokens the model predicts (everything after BOS).
    pub fn predicted_tokens(&self) -> usize {
        self.target.len().saturating_sub(1)
    }
}

pub fn encode_lines<S: AsRef<str>>(
    source: &[S],
    target: &[S],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<Vec<SentencePair>> {
    if source.len() != target.len() {
        return Err(Error::Data(format!(
            "parallel corpus line counts differ: {} source vs {} target",
            source.len(),
            target.len()
        )));
    }
    Ok(source
        .iter()
        .zip(target)
        .map(|(s, t)| SentencePair::new(src_vocab.encode(s.as_ref()), &tgt_vocab.encode(t.as_ref())))
        .collect())
}

pub fn encode_corpus(
    src_path: &Path,
    tgt_path: &Path,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<Vec<SentencePair>> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    encode_lines(&src, &tgt, src_vocab, tgt_vocab).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!(
            "{} / {}: {m}",
            src_path.display(),
            tgt_path.display()
        )),
        other => other,
    })
}

/// Drops pairs with an empty source or either side longer than `max_len`.
pub fn filter_for_training(pairs: Vec<SentencePair>, max_len: usize) -> Vec<SentencePair> {
    let before = pairs.len();
    let kept: Vec<SentencePair> = pairs
        .into_iter()
        .filter(|p| !p.source.is_empty() && p.source.len() <= max_len && p.target.len() <= max_len + 2)
        .collect();
    let dropped = before - kept.len();
    if dropped > 0 {
        log::info!("dropped {dropped} of {before} training pairs (empty or longer than {max_len} tokens)");
    }
    kept
}

/// Padded, masked minibatch. Rows are padded with PAD to the batch max length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub source_ids: Vec<Vec<usize>>,
    pub target_ids: Vec<Vec<usize>>,
    pub source_mask: Vec<Vec<u8>>,
    pub target_mask: Vec<Vec<u8>>,
    pub source_lengths: Vec<usize>,
    pub target_lengths: Vec<usize>,
}

fn pad(rows: &[&[usize]]) -> (Vec<Vec<usize>>, Vec<Vec<u8>>, Vec<usize>) {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(rows.len());
    let mut mask = Vec::with_capacity(rows.len());
    for r in rows {
        let mut row = r.to_vec();
        row.resize(width, PAD);
        let mut m = vec![1u8; r.len()];
        m.resize(width, 0);
        ids.push(row);
        mask.push(m);
    }
    (ids, mask, rows.iter().map(|r| r.len()).collect())
}

impl Batch {
    pub fn from_pairs(pairs: &[&SentencePair]) -> Self {
        let src: Vec<&[usize]> = pairs.iter().map(|p| p.source.as_slice()).collect();
        let tgt: Vec<&[usize]> = pairs.iter().map(|p| p.target.as_slice()).collect();
        let (source_ids, source_mask, source_lengths) = pad(&src);
        let (target_ids, target_mask, target_lengths) = pad(&tgt);
        Batch {
            source_ids,
            target_ids,
            source_mask,
            target_mask,
            source_lengths,
            target_lengths,
        }
    }

    pub fn len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }

    /// Unpadded source and target of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[usize]) {
        (
            &self.source_ids[r][..self.source_lengths[r]],
            &self.target_ids[r][..self.target_lengths[r]],
        )
    }

    pub fn predicted_tokens(&self) -> usize {
        self.target_lengths.iter().map(|&l| l.saturating_sub(1)).sum()
    }

    pub fn mask_total(&self) -> usize {
        self.source_mask
            .iter()
            .chain(&self.target_mask)
            .flatten()
            .map(|&m| m as usize)
            .sum()
    }
}

/// Groups pairs of similar source length into batches. Pairs are shuffled,
/// stably sorted by source length, cut into batches, and the batch order is
/// shuffled again; both shuffles are keyed by `seed`.
pub fn make_batches(pairs: &[SentencePair], batch_size: usize, seed: u64) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::SHUFFLE, 0]));
    order.sort_by_key(|&i| pairs[i].source.len());
    let mut batches: Vec<Batch> = order
        .chunks(batch_size)
        .map(|idx| {
            let rows: Vec<&SentencePair> = idx.iter().map(|&i| &pairs[i]).collect();
            Batch::from_pairs(&rows)
        })
        .collect();
    batches.shuffle(&mut rng::stream(seed, &[rng::SHUFFLE, 1]));
    batches
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order() {
        let v = Vocabulary::from_lines(["a b a"], 10);
        assert_eq!(v.len(), 6);
        assert!(v.id("a") < v.id("b"));
        assert_eq!(v.id("a"), 4);
    }

    #[test]
    fn cap_maps_rest_to_unk() {
        let v = Vocabulary::from_lines(["a b a"], 1);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocabulary::from_lines(["x y x y"], 1);
        assert!(v.contains("x"));
        assert!(!v.contains("y"));
    }

    #[test]
    fn reserved_strings_are_not_recounted() {
        let v = Vocabulary::from_lines(["<unk> <unk> a"], 10);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("<unk>"), UNK);
    }

    #[test]
    fn wraps_targets_and_maps_oov() {
        let sv = Vocabulary::from_lines(["a b"], 10);
        let tv = Vocabulary::from_lines(["c"], 10);
        let pairs = encode_lines(&["a zz", "b"], &["", "c q"], &sv, &tv).unwrap();
        assert_eq!(pairs[0].target, vec![BOS, EOS]);
        assert_eq!(pairs[0].source, vec![sv.id("a"), UNK]);
        assert_eq!(pairs[1].target, vec![BOS, tv.id("c"), UNK, EOS]);
        let err = encode_lines(&["a"], &["c", "c"], &sv, &tv).unwrap_err();
        assert!(err.to_string().contains("1 source vs 2 target"));
    }

    #[test]
    fn in_vocab_round_trip() {
        let v = Vocabulary::from_lines(["the cat sat on the mat"], 100);
        let line = "the mat sat";
        assert_eq!(v.decode(&v.encode(line)), line);
        for tok in ["the", "cat", "sat", "on", "mat"] {
            assert_eq!(v.id(v.token(v.id(tok))), v.id(tok));
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vocab");
        let v = Vocabulary::from_lines(["b a c a tab\u{00e9}"], 100);
        v.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<pad>\t0\n<unk>\t1\n<s>\t2\n</s>\t3\n"));
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
        assert!(matches!(
            Vocabulary::load(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn unreadable_corpus_names_path() {
        let err = build_vocab(Path::new("/nonexistent/corpus.txt"), 10).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/corpus.txt"));
    }

    fn pair(src_len: usize, tag: usize) -> SentencePair {
        SentencePair::new(vec![4 + tag; src_len], &[5; 2])
    }

    #[test]
    fn singleton_batch() {
        let b = make_batches(&[pair(3, 0)], 8, 1);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].source_ids[0].len(), 3);
        assert_eq!(b[0].target_ids[0].len(), 4);
    }

    #[test]
    fn similar_lengths_share_batches() {
        let pairs = [pair(3, 0), pair(9, 1), pair(3, 2)];
        for seed in 0..10 {
            let b = make_batches(&pairs, 2, seed);
            let shared = b.iter().find(|b| b.len() == 2).unwrap();
            assert_eq!(shared.source_lengths, vec![3, 3]);
        }
    }

    #[test]
    fn masks_mark_real_tokens() {
        let pairs: Vec<SentencePair> = (1..20).map(|i| pair(i % 7 + 1, i)).collect();
        let total: usize = pairs.iter().map(|p| p.source.len() + p.target.len()).sum();
        let batches = make_batches(&pairs, 4, 3);
        assert_eq!(batches.iter().map(Batch::mask_total).sum::<usize>(), total);
        for b in &batches {
            for (ids, mask) in b.source_ids.iter().zip(&b.source_mask) {
                assert_eq!(ids.len(), mask.len());
                for (&id, &m) in ids.iter().zip(mask) {
                    assert_eq!(m == 0, id == PAD);
                }
            }
        }
        assert_eq!(make_batches(&pairs, 4, 3), batches);
    }
}
