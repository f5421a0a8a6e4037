//! Corpus BLEU with multi-bleu conventions, perplexity, and length-bucketed
//! BLEU.
//!
//! Tokens are whitespace-separated and compared case-sensitively. Clipped
//! n-gram matches are summed over the corpus before any division, and the
//! brevity penalty uses, per sentence, the reference length closest to the
//! hypothesis length (the shorter one on ties). There is no smoothing: a
//! corpus with zero matches at any order scores 0.

use std::collections::HashMap;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::data::SentencePair;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::parallel::{self, Execution};
use crate::tensor::Scalar;

pub const MAX_ORDER: usize = 4;

/// Sufficient statistics for corpus BLEU.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl Add for BleuStats {
    type Output = BleuStats;
    fn add(mut self, rhs: BleuStats) -> BleuStats {
        self += rhs;
        self
    }
}

impl AddAssign for BleuStats {
    fn add_assign(&mut self, rhs: BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += rhs.matches[n];
            self.totals[n] += rhs.totals[n];
        }
        self.hyp_len += rhs.hyp_len;
        self.ref_len += rhs.ref_len;
    }
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn tokenize(s: &str, lowercase: bool) -> Vec<String> {
    s.split_whitespace()
        .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
        .collect()
}

/// Clipped n-gram statistics of one hypothesis against its references.
pub fn sentence_stats<S: AsRef<str>>(hypothesis: &str, references: &[S], lowercase: bool) -> BleuStats {
    let hyp_owned = tokenize(hypothesis, lowercase);
    let refs_owned: Vec<Vec<String>> = references.iter().map(|r| tokenize(r.as_ref(), lowercase)).collect();
    let hyp: Vec<&str> = hyp_owned.iter().map(String::as_str).collect();
    let refs: Vec<Vec<&str>> = refs_owned
        .iter()
        .map(|r| r.iter().map(String::as_str).collect())
        .collect();

    let mut stats = BleuStats {
        hyp_len: hyp.len(),
        ..Default::default()
    };

    // Closest reference length, shorter on ties.
    let mut closest: Option<usize> = None;
    for r in &refs {
        let len = r.len();
        closest = Some(match closest {
            None => len,
            Some(c) => {
                let (dc, dl) = (c.abs_diff(hyp.len()), len.abs_diff(hyp.len()));
                if dl < dc || (dl == dc && len < c) {
                    len
                } else {
                    c
                }
            }
        });
    }
    stats.ref_len = closest.unwrap_or(0);

    for n in 1..=MAX_ORDER {
        let hyp_counts = ngram_counts(&hyp, n);
        let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let mut matched = 0;
        for (g, c) in &hyp_counts {
            matched += (*c).min(max_ref.get(g).copied().unwrap_or(0));
        }
        stats.matches[n - 1] = matched;
        stats.totals[n - 1] = hyp.len().saturating_sub(n - 1);
    }
    stats
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_length: usize,
    pub ref_length: usize,
}

impl BleuStats {
    pub fn report(&self) -> BleuReport {
        let mut precisions = [0.0; MAX_ORDER];
        for n in 0..MAX_ORDER {
            if self.totals[n] > 0 {
                precisions[n] = self.matches[n] as f64 / self.totals[n] as f64;
            }
        }
        let brevity_penalty = if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        let bleu = if precisions.iter().any(|&p| p == 0.0) {
            0.0
        } else {
            let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
            brevity_penalty * mean_log.exp() * 100.0
        };
        BleuReport {
            bleu,
            precisions,
            brevity_penalty,
            hyp_length: self.hyp_len,
            ref_length: self.ref_len,
        }
    }
}

impl BleuReport {
    /// The familiar one-line summary.
    pub fn summary(&self) -> String {
        let p: Vec<String> = self.precisions.iter().map(|p| format!("{:.1}", p * 100.0)).collect();
        let ratio = if self.ref_length == 0 {
            0.0
        } else {
            self.hyp_length as f64 / self.ref_length as f64
        };
        format!(
            "BLEU = {:.2}, {} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.bleu,
            p.join("/"),
            self.brevity_penalty,
            ratio,
            self.hyp_length,
            self.ref_length
        )
    }
}

fn check_aligned<S: AsRef<str>>(hypotheses: &[S], references: &[Vec<S>]) -> Result<()> {
    if hypotheses.is_empty() {
        return Err(Error::Domain("BLEU over an empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Data(format!(
            "{} hypotheses but {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    Ok(())
}

pub fn corpus_stats<S: AsRef<str> + Sync>(
    hypotheses: &[S],
    references: &[Vec<S>],
    lowercase: bool,
) -> Result<Vec<BleuStats>> {
    check_aligned(hypotheses, references)?;
    let pairs: Vec<(&S, &Vec<S>)> = hypotheses.iter().zip(references).collect();
    Ok(parallel::map(Execution::default(), &pairs, |_, (h, r)| {
        sentence_stats(h.as_ref(), r, lowercase)
    }))
}

/// `references[i]` holds every reference for sentence `i`.
pub fn corpus_bleu<S: AsRef<str> + Sync>(hypotheses: &[S], references: &[Vec<S>]) -> Result<BleuReport> {
    corpus_bleu_with(hypotheses, references, false)
}

pub fn corpus_bleu_with<S: AsRef<str> + Sync>(
    hypotheses: &[S],
    references: &[Vec<S>],
    lowercase: bool,
) -> Result<BleuReport> {
    let stats = corpus_stats(hypotheses, references, lowercase)?;
    Ok(stats.into_iter().fold(BleuStats::default(), Add::add).report())
}

/// Lower edges of the source-length buckets; the last bucket is open.
pub const BUCKET_EDGES: [usize; 7] = [0, 10, 20, 30, 40, 50, 60];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub lower: usize,
    /// Exclusive upper edge; `None` for the open final bucket.
    pub upper: Option<usize>,
    pub count: usize,
    pub stats: BleuStats,
    pub bleu: Option<f64>,
}

impl LengthBucket {
    pub fn label(&self) -> String {
        match self.upper {
            Some(u) => format!("[{},{})", self.lower, u),
            None => format!("[{},inf)", self.lower),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBucketReport {
    pub buckets: Vec<LengthBucket>,
}

pub fn bucket_index(source_len: usize) -> usize {
    BUCKET_EDGES.iter().rposition(|&e| source_len >= e).unwrap_or(0)
}

pub fn bucketed_bleu<S: AsRef<str> + Sync>(
    hypotheses: &[S],
    references: &[Vec<S>],
    source_lengths: &[usize],
) -> Result<LengthBucketReport> {
    check_aligned(hypotheses, references)?;
    if source_lengths.len() != hypotheses.len() {
        return Err(Error::Data(format!(
            "{} hypotheses but {} source lengths",
            hypotheses.len(),
            source_lengths.len()
        )));
    }
    let stats = corpus_stats(hypotheses, references, false)?;
    let mut buckets: Vec<LengthBucket> = BUCKET_EDGES
        .iter()
        .enumerate()
        .map(|(i, &lower)| LengthBucket {
            lower,
            upper: BUCKET_EDGES.get(i + 1).copied(),
            count: 0,
            stats: BleuStats::default(),
            bleu: None,
        })
        .collect();
    for (s, &len) in stats.iter().zip(source_lengths) {
        let b = &mut buckets[bucket_index(len)];
        b.count += 1;
        b.stats += *s;
    }
    for b in &mut buckets {
        if b.count > 0 {
            b.bleu = Some(b.stats.report().bleu);
        }
    }
    Ok(LengthBucketReport { buckets })
}

impl LengthBucketReport {
    pub fn render(&self) -> String {
        let mut out = format!("{:<10} {:>8} {:>8}\n", "length", "count", "BLEU");
        for b in &self.buckets {
            let bleu = b.bleu.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
            out.push_str(&format!("{:<10} {:>8} {:>8}\n", b.label(), b.count, bleu));
        }
        out
    }
}

/// `exp(total NLL / predicted tokens)` over the corpus.
pub fn perplexity<T: Scalar>(model: &Model<T>, corpus: &[SentencePair], exec: Execution) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Domain("perplexity over an empty corpus".into()));
    }
    let nll = parallel::try_map(exec, corpus, |_, p| {
        model.sentence_nll(&p.source, &p.target).map(|v| v.as_f64())
    })?;
    let tokens: usize = corpus.iter().map(SentencePair::predicted_tokens).sum();
    if tokens == 0 {
        return Err(Error::Domain("perplexity over a corpus with no target tokens".into()));
    }
    Ok((nll.iter().sum::<f64>() / tokens as f64).exp())
}
