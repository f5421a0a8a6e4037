//! Global source attention and the three look-ahead patterns that also
//! attend over previously produced top-layer decoder states.
//!
//! Every pattern uses the same dot-product scoring and softmax normalisation;
//! they differ only in what the query is and how the context vectors are
//! combined into the final attentional state:
//!
//! | mode           | final state                                        |
//! |----------------|----------------------------------------------------|
//! | Baseline       | `tanh(Wc [s; c] + b)`                              |
//! | Concatenation  | `tanh(Wc [s; c; c_look] + b)`                      |
//! | EncDec         | `te = tanh(Wc [s; c] + b)`, look-ahead queried by `te`, `tanh(Wc2 [te; c_look] + b2)` |
//! | DecEnc         | `td = tanh(Wc1 [s; c_look] + b1)`, source queried by `td`, `tanh(Wc2 [td; c_e] + b2)` |
//!
//! At the first target step there is no history and `c_look` is the zero
//! vector.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    Baseline,
    #[serde(rename = "concat")]
    Concatenation,
    EncDec,
    DecEnc,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        AttentionMode::Baseline,
        AttentionMode::Concatenation,
        AttentionMode::EncDec,
        AttentionMode::DecEnc,
    ];

    pub fn has_lookahead(self) -> bool {
        self != AttentionMode::Baseline
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Baseline => "baseline",
            AttentionMode::Concatenation => "concat",
            AttentionMode::EncDec => "enc-dec",
            AttentionMode::DecEnc => "dec-enc",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(AttentionMode::Baseline),
            "concat" | "concatenation" => Ok(AttentionMode::Concatenation),
            "enc-dec" | "encdec" => Ok(AttentionMode::EncDec),
            "dec-enc" | "decenc" => Ok(AttentionMode::DecEnc),
            other => Err(Error::Config(format!(
                "unknown attention mode {other:?} (expected baseline, concat, enc-dec or dec-enc)"
            ))),
        }
    }
}

/// A combiner layer `tanh(W [parts] + b)`.
#[derive(Clone, Copy, Debug)]
pub struct Combiner {
    pub weights: ParamId,
    pub bias: ParamId,
}

impl Combiner {
    fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        w_name: &str,
        b_name: &str,
        hidden: usize,
        parts: usize,
        init: &mut impl FnMut(&[usize]) -> Tensor<T>,
    ) -> Result<Self> {
        Ok(Combiner {
            weights: store.add(w_name, init(&[hidden, parts * hidden]))?,
            bias: store.add(b_name, init(&[hidden]))?,
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<'_, T>, parts: &[Var]) -> Result<Var> {
        let x = tape.concat(parts)?;
        let w = tape.param(self.weights);
        let b = tape.param(self.bias);
        let (ws, xs, bs) = (tape.shape(w).to_vec(), tape.shape(x).to_vec(), tape.shape(b).to_vec());
        if ws.len() != 2 || ws[1] != xs[0] || bs != [ws[0]] {
            return Err(Error::Config(format!(
                "combiner weights {ws:?} / bias {bs:?} do not fit an input of width {}",
                xs[0]
            )));
        }
        let lin = tape.matmul(w, x)?;
        let pre = tape.add(lin, b)?;
        Ok(tape.tanh(pre))
    }
}

/// Combiner parameters for each mode. Names follow the checkpoint layout.
#[derive(Clone, Debug)]
pub enum AttentionParams {
    Baseline { combine: Combiner },
    Concatenation { combine: Combiner },
    EncDec { combine: Combiner, refine: Combiner },
    DecEnc { first: Combiner, refine: Combiner },
}

impl AttentionParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        mode: AttentionMode,
        hidden: usize,
        init: &mut impl FnMut(&[usize]) -> Tensor<T>,
    ) -> Result<Self> {
        Ok(match mode {
            AttentionMode::Baseline => AttentionParams::Baseline {
                combine: Combiner::register(store, "att.wc", "att.b", hidden, 2, init)?,
            },
            AttentionMode::Concatenation => AttentionParams::Concatenation {
                combine: Combiner::register(store, "att.wc", "att.b", hidden, 3, init)?,
            },
            AttentionMode::EncDec => AttentionParams::EncDec {
                combine: Combiner::register(store, "att.wc", "att.b", hidden, 2, init)?,
                refine: Combiner::register(store, "att.wc2", "att.b2", hidden, 2, init)?,
            },
            AttentionMode::DecEnc => AttentionParams::DecEnc {
                first: Combiner::register(store, "att.wc1", "att.b1", hidden, 2, init)?,
                refine: Combiner::register(store, "att.wc2", "att.b2", hidden, 2, init)?,
            },
        })
    }

    pub fn mode(&self) -> AttentionMode {
        match self {
            AttentionParams::Baseline { .. } => AttentionMode::Baseline,
            AttentionParams::Concatenation { .. } => AttentionMode::Concatenation,
            AttentionParams::EncDec { .. } => AttentionMode::EncDec,
            AttentionParams::DecEnc { .. } => AttentionMode::DecEnc,
        }
    }
}

/// A key/value sequence stacked once into `[m × H]` plus its transpose.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    pub keys: Var,
    pub keys_t: Var,
    pub len: usize,
}

impl Memory {
    pub fn new<T: Scalar>(tape: &mut Tape<'_, T>, states: &[Var]) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Domain("attention over an empty key sequence".into()));
        }
        let keys = tape.stack(states)?;
        let keys_t = tape.transpose(keys)?;
        Ok(Memory {
            keys,
            keys_t,
            len: states.len(),
        })
    }
}

/// Dot-product attention of `query` over a stacked memory. Returns the
/// context vector and the normalised weights.
pub fn attend<T: Scalar>(tape: &mut Tape<'_, T>, query: Var, memory: &Memory) -> Result<(Var, Var)> {
    let scores = tape.matmul(memory.keys, query)?;
    let weights = tape.softmax(scores)?;
    let context = tape.matmul(memory.keys_t, weights)?;
    Ok((context, weights))
}

pub fn global_attention<T: Scalar>(tape: &mut Tape<'_, T>, query: Var, keys: &[Var]) -> Result<(Var, Var)> {
    let memory = Memory::new(tape, keys)?;
    attend(tape, query, &memory)
}

/// Attention over the previous top-layer target states. With no history the
/// context is the zero vector and there are no weights.
pub fn lookahead_context<T: Scalar>(
    tape: &mut Tape<'_, T>,
    query: Var,
    prev_targets: &[Var],
) -> Result<(Var, Option<Var>)> {
    if prev_targets.is_empty() {
        let dim = tape.shape(query).to_vec();
        return Ok((tape.zeros(&dim), None));
    }
    let memory = Memory::new(tape, prev_targets)?;
    let (context, weights) = attend(tape, query, &memory)?;
    Ok((context, Some(weights)))
}

#[derive(Clone, Copy, Debug)]
pub struct StepAttention {
    pub t_final: Var,
    pub source_weights: Var,
    pub target_weights: Option<Var>,
}

/// Plain values of one attention step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepAttentionResult<T> {
    pub t_final: Tensor<T>,
    pub source_weights: Vec<T>,
    /// Empty at the first step and in baseline mode.
    pub target_weights: Vec<T>,
}

impl StepAttention {
    pub fn values<T: Scalar>(&self, tape: &Tape<'_, T>) -> StepAttentionResult<T> {
        StepAttentionResult {
            t_final: tape.value(self.t_final).clone(),
            source_weights: tape.value(self.source_weights).data().to_vec(),
            target_weights: self
                .target_weights
                .map(|w| tape.value(w).data().to_vec())
                .unwrap_or_default(),
        }
    }
}

/// Computes the attentional state for one decoder step. `prev_targets` must
/// hold exactly the states of steps before the current one.
pub fn attend_step<T: Scalar>(
    tape: &mut Tape<'_, T>,
    params: &AttentionParams,
    s_top: Var,
    source: &Memory,
    prev_targets: &[Var],
) -> Result<StepAttention> {
    match params {
        AttentionParams::Baseline { combine } => {
            let (c, alpha) = attend(tape, s_top, source)?;
            let t_final = combine.apply(tape, &[s_top, c])?;
            Ok(StepAttention {
                t_final,
                source_weights: alpha,
                target_weights: None,
            })
        }
        AttentionParams::Concatenation { combine } => {
            let (c, alpha) = attend(tape, s_top, source)?;
            let (c_look, beta) = lookahead_context(tape, s_top, prev_targets)?;
            let t_final = combine.apply(tape, &[s_top, c, c_look])?;
            Ok(StepAttention {
                t_final,
                source_weights: alpha,
                target_weights: beta,
            })
        }
        AttentionParams::EncDec { combine, refine } => {
            let (c, alpha) = attend(tape, s_top, source)?;
            let t_e = combine.apply(tape, &[s_top, c])?;
            let (c_look, beta) = lookahead_context(tape, t_e, prev_targets)?;
            let t_final = refine.apply(tape, &[t_e, c_look])?;
            Ok(StepAttention {
                t_final,
                source_weights: alpha,
                target_weights: beta,
            })
        }
        AttentionParams::DecEnc { first, refine } => {
            let (c_look, beta) = lookahead_context(tape, s_top, prev_targets)?;
            let t_d = first.apply(tape, &[s_top, c_look])?;
            let (c_e, alpha) = attend(tape, t_d, source)?;
            let t_final = refine.apply(tape, &[t_d, c_e])?;
            Ok(StepAttention {
                t_final,
                source_weights: alpha,
                target_weights: beta,
            })
        }
    }
}
