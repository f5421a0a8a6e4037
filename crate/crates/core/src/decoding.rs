//! Greedy and beam-search decoding with attention traces.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{DecoderStepState, EncodedSource, Model};
use crate::parallel::{self, Execution};
use crate::tensor::Scalar;

/// Paper recipe beam width.
pub const DEFAULT_BEAM: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep<T> {
    pub source_weights: Vec<T>,
    /// Weights over previously emitted positions; empty at the first step.
    pub target_weights: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace<T> {
    /// False for baseline models, which never attend over the target history.
    pub has_target_attention: bool,
    pub steps: Vec<TraceStep<T>>,
}

impl<T> AttentionTrace<T> {
    pub fn new(has_target_attention: bool) -> Self {
        AttentionTrace {
            has_target_attention,
            steps: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis<T> {
    /// Emitted tokens; a finished hypothesis ends with EOS.
    pub tokens: Vec<usize>,
    pub log_prob: T,
    pub state: DecoderStepState<T>,
    pub trace: AttentionTrace<T>,
}

impl<T: Scalar> Hypothesis<T> {
    pub fn is_finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    /// Emitted tokens without the trailing EOS.
    pub fn content(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }

    fn score(&self, length_normalized: bool) -> f64 {
        let lp = self.log_prob.as_f64();
        if length_normalized && !self.tokens.is_empty() {
            lp / self.tokens.len() as f64
        } else {
            lp
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub beam_size: usize,
    /// Maximum emitted tokens including EOS; `None` means `2·m + 5`.
    pub max_len: Option<usize>,
    pub length_normalization: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam_size: DEFAULT_BEAM,
            max_len: None,
            length_normalization: false,
        }
    }
}

impl DecodeOptions {
    pub fn beam(beam_size: usize, max_len: usize) -> Self {
        DecodeOptions {
            beam_size,
            max_len: Some(max_len),
            length_normalization: false,
        }
    }

    pub fn resolved_max_len(&self, source_len: usize) -> usize {
        self.max_len.unwrap_or(2 * source_len + 5)
    }
}

fn check_source(source: &[usize]) -> Result<()> {
    if source.is_empty() {
        return Err(Error::Domain("cannot decode an empty source sentence".into()));
    }
    Ok(())
}

fn extend<T: Scalar>(
    parent: &Hypothesis<T>,
    token: usize,
    log_prob: T,
    out: &crate::model::StepOutput<T>,
) -> Hypothesis<T> {
    let mut tokens = parent.tokens.clone();
    tokens.push(token);
    let mut trace = parent.trace.clone();
    trace.steps.push(TraceStep {
        source_weights: out.attention.source_weights.clone(),
        target_weights: out.attention.target_weights.clone(),
    });
    Hypothesis {
        tokens,
        log_prob,
        state: out.state.clone(),
        trace,
    }
}

fn root<T: Scalar>(model: &Model<T>) -> Hypothesis<T> {
    Hypothesis {
        tokens: Vec::new(),
        log_prob: T::zero(),
        state: model.initial_state(),
        trace: AttentionTrace::new(model.mode().has_lookahead()),
    }
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy_decode<T: Scalar>(model: &Model<T>, source: &[usize], max_len: usize) -> Result<Hypothesis<T>> {
    check_source(source)?;
    if max_len == 0 {
        return Err(Error::Domain("max_len must be at least 1".into()));
    }
    let enc = model.encode_source(source)?;
    let mut hyp = root(model);
    while hyp.tokens.len() < max_len && !hyp.is_finished() {
        let prev = hyp.tokens.last().copied().unwrap_or(BOS);
        let out = model.decode_step(&enc, &hyp.state, prev)?;
        let mut best = 0;
        for (k, &lp) in out.log_probs.iter().enumerate() {
            if lp > out.log_probs[best] {
                best = k;
            }
        }
        let lp = hyp.log_prob + out.log_probs[best];
        hyp = extend(&hyp, best, lp, &out);
    }
    Ok(hyp)
}

/// Beam search without length normalisation unless requested. Every live
/// hypothesis is expanded over the full vocabulary and the best `beam_size`
/// candidates survive; those ending in EOS move to the finished pool.
pub fn beam_search<T: Scalar>(model: &Model<T>, source: &[usize], options: &DecodeOptions) -> Result<Hypothesis<T>> {
    check_source(source)?;
    if options.beam_size == 0 {
        return Err(Error::Domain("beam size must be at least 1".into()));
    }
    let max_len = options.resolved_max_len(source.len());
    if max_len == 0 {
        return Err(Error::Domain("max_len must be at least 1".into()));
    }
    let enc: EncodedSource<T> = model.encode_source(source)?;
    let width = options.beam_size;

    let mut live = vec![root(model)];
    let mut finished: Vec<Hypothesis<T>> = Vec::new();
    for _ in 0..max_len {
        let outs = live
            .iter()
            .map(|h| model.decode_step(&enc, &h.state, h.tokens.last().copied().unwrap_or(BOS)))
            .collect::<Result<Vec<_>>>()?;

        // (total log prob, token, parent)
        let mut candidates: Vec<(T, usize, usize)> = Vec::new();
        for (parent, (h, out)) in live.iter().zip(&outs).enumerate() {
            let mut local: Vec<(T, usize, usize)> = out
                .log_probs
                .iter()
                .enumerate()
                .map(|(tok, &lp)| (h.log_prob + lp, tok, parent))
                .collect();
            local.sort_by(rank);
            local.truncate(width);
            candidates.extend(local);
        }
        candidates.sort_by(rank);
        candidates.truncate(width);

        let mut next = Vec::with_capacity(candidates.len());
        for (lp, tok, parent) in candidates {
            let h = extend(&live[parent], tok, lp, &outs[parent]);
            if tok == EOS {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }

    let pool = if finished.is_empty() { live } else { finished };
    let norm = options.length_normalization;
    pool.into_iter()
        .reduce(|best, h| match h.score(norm).partial_cmp(&best.score(norm)) {
            Some(Ordering::Greater) => h,
            Some(Ordering::Equal) if h.tokens < best.tokens => h,
            _ => best,
        })
        .ok_or_else(|| Error::Numeric("beam search produced no hypotheses".into()))
}

/// Higher log probability first, then lower token id, then lower parent.
fn rank<T: Scalar>(a: &(T, usize, usize), b: &(T, usize, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
        .then(a.2.cmp(&b.2))
}

/// Decodes every sentence independently; output order follows input order.
pub fn decode_corpus<T: Scalar>(
    model: &Model<T>,
    sources: &[Vec<usize>],
    options: &DecodeOptions,
    exec: Execution,
) -> Result<Vec<Hypothesis<T>>> {
    parallel::try_map(exec, sources, |_, src| beam_search(model, src, options))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub source_attention: Vec<Vec<f64>>,
    pub target_attention: Option<Vec<Vec<f64>>>,
}

impl TraceFile {
    pub fn from_hypothesis<T: Scalar>(hyp: &Hypothesis<T>, source: Vec<String>, target: Vec<String>) -> Self {
        let to64 = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
        TraceFile {
            source,
            target,
            source_attention: hyp.trace.steps.iter().map(|s| to64(&s.source_weights)).collect(),
            target_attention: hyp
                .trace
                .has_target_attention
                .then(|| hyp.trace.steps.iter().map(|s| to64(&s.target_weights)).collect()),
        }
    }
}

/// Writes the trace JSON: one source-attention row per emitted step and,
/// for look-ahead models, one target-attention row per step (row `j` has
/// `j − 1` entries). Baseline models write `target_attention: null`.
pub fn export_trace<T: Scalar>(hyp: &Hypothesis<T>, source: &[String], target: &[String], path: &Path) -> Result<()> {
    let file = TraceFile::from_hypothesis(hyp, source.to_vec(), target.to_vec());
    let json = serde_json::to_string_pretty(&file)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}
