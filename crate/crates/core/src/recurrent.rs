//! LSTM cell, the bidirectional bottom encoder layer, and stacked
//! unidirectional layers for encoder and decoder.

use crate::autodiff::{DropoutCtx, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Weights of one LSTM layer. Gate blocks are stacked in the order
/// input, forget, cell candidate, output.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub input_weights: ParamId,
    pub recurrent_weights: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        init: &mut impl FnMut(&[usize]) -> Tensor<T>,
    ) -> Result<Self> {
        let g = 4 * hidden_dim;
        Ok(LstmParams {
            input_weights: store.add(format!("{prefix}.w_ih"), init(&[g, input_dim]))?,
            recurrent_weights: store.add(format!("{prefix}.w_hh"), init(&[g, hidden_dim]))?,
            bias: store.add(format!("{prefix}.b"), init(&[g]))?,
            input_dim,
            hidden_dim,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

impl LstmState {
    pub fn zeros<T: Scalar>(tape: &mut Tape<'_, T>, hidden_dim: usize) -> Self {
        LstmState {
            hidden: tape.zeros(&[hidden_dim]),
            cell: tape.zeros(&[hidden_dim]),
        }
    }

    pub fn from_values<T: Scalar>(tape: &mut Tape<'_, T>, hidden: &Tensor<T>, cell: &Tensor<T>) -> Self {
        LstmState {
            hidden: tape.constant(hidden.clone()),
            cell: tape.constant(cell.clone()),
        }
    }
}

pub fn lstm_step<T: Scalar>(
    tape: &mut Tape<'_, T>,
    params: &LstmParams,
    input: Var,
    prev: LstmState,
) -> Result<LstmState> {
    let h = params.hidden_dim;
    if tape.shape(input) != [params.input_dim] {
        return Err(Error::shape("lstm input", tape.shape(input), &[params.input_dim]));
    }
    if tape.shape(prev.hidden) != [h] || tape.shape(prev.cell) != [h] {
        return Err(Error::shape("lstm state", tape.shape(prev.hidden), &[h]));
    }
    let w_ih = tape.param(params.input_weights);
    let w_hh = tape.param(params.recurrent_weights);
    let b = tape.param(params.bias);

    let xi = tape.matmul(w_ih, input)?;
    let hh = tape.matmul(w_hh, prev.hidden)?;
    let pre = tape.add_n(&[xi, hh, b])?;

    let i_pre = tape.slice(pre, 0, h)?;
    let f_pre = tape.slice(pre, h, h)?;
    let g_pre = tape.slice(pre, 2 * h, h)?;
    let o_pre = tape.slice(pre, 3 * h, h)?;
    let input_gate = tape.sigmoid(i_pre);
    let forget_gate = tape.sigmoid(f_pre);
    let candidate = tape.tanh(g_pre);
    let output_gate = tape.sigmoid(o_pre);

    let kept = tape.mul(forget_gate, prev.cell)?;
    let written = tape.mul(input_gate, candidate)?;
    let cell = tape.add(kept, written)?;
    let squashed = tape.tanh(cell);
    let hidden = tape.mul(output_gate, squashed)?;
    Ok(LstmState { hidden, cell })
}

/// Runs one layer over a sequence from zero initial state. With `reverse`
/// the scan runs right to left and the outputs are returned in source order.
pub fn run_layer<T: Scalar>(
    tape: &mut Tape<'_, T>,
    params: &LstmParams,
    inputs: &[Var],
    reverse: bool,
) -> Result<Vec<Var>> {
    let mut state = LstmState::zeros(tape, params.hidden_dim);
    let mut out = vec![None; inputs.len()];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..inputs.len()).rev())
    } else {
        Box::new(0..inputs.len())
    };
    for i in order {
        state = lstm_step(tape, params, inputs[i], state)?;
        out[i] = Some(state.hidden);
    }
    Ok(out.into_iter().map(|v| v.expect("every position visited")).collect())
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub embeddings: ParamId,
    pub forward: LstmParams,
    pub backward: LstmParams,
    /// Linear map from the 2H bidirectional output to width H.
    pub bridge_weights: ParamId,
    pub bridge_bias: ParamId,
    pub upper: Vec<LstmParams>,
    pub hidden_dim: usize,
}

impl EncoderParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        vocab: usize,
        embed_dim: usize,
        hidden_dim: usize,
        layers: usize,
        init: &mut impl FnMut(&[usize]) -> Tensor<T>,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        let embeddings = store.add("src_embed", init(&[vocab, embed_dim]))?;
        let forward = LstmParams::register(store, "enc.l0.fwd", embed_dim, hidden_dim, init)?;
        let backward = LstmParams::register(store, "enc.l0.bwd", embed_dim, hidden_dim, init)?;
        let bridge_weights = store.add("enc.bridge.w", init(&[hidden_dim, 2 * hidden_dim]))?;
        let bridge_bias = store.add("enc.bridge.b", init(&[hidden_dim]))?;
        let upper = (1..layers)
            .map(|k| LstmParams::register(store, &format!("enc.l{k}"), hidden_dim, hidden_dim, init))
            .collect::<Result<_>>()?;
        Ok(EncoderParams {
            embeddings,
            forward,
            backward,
            bridge_weights,
            bridge_bias,
            upper,
            hidden_dim,
        })
    }

    pub fn depth(&self) -> usize {
        1 + self.upper.len()
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `layers[0]` holds the 2H-wide bidirectional states, the rest are H wide.
    pub layers: Vec<Vec<Var>>,
    /// Top-layer states after the vertical dropout; these are the attention keys.
    pub top: Vec<Var>,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.top.len()
    }

    pub fn is_empty(&self) -> bool {
        self.top.is_empty()
    }
}

pub fn encode<T: Scalar>(
    tape: &mut Tape<'_, T>,
    params: &EncoderParams,
    source: &[usize],
    dropout: &mut DropoutCtx,
) -> Result<EncoderOutput> {
    if source.is_empty() {
        return Err(Error::Domain("cannot encode an empty source sentence".into()));
    }
    let table = tape.param(params.embeddings);
    let mut inputs = Vec::with_capacity(source.len());
    for &id in source {
        let e = tape.row(table, id)?;
        inputs.push(dropout.apply(tape, e)?);
    }
    encode_embedded(tape, params, &inputs, dropout)
}

/// Encoder body over already-embedded inputs.
pub fn encode_embedded<T: Scalar>(
    tape: &mut Tape<'_, T>,
    params: &EncoderParams,
    inputs: &[Var],
    dropout: &mut DropoutCtx,
) -> Result<EncoderOutput> {
    if inputs.is_empty() {
        return Err(Error::Domain("cannot encode an empty source sentence".into()));
    }
    let fwd = run_layer(tape, &params.forward, inputs, false)?;
    let bwd = run_layer(tape, &params.backward, inputs, true)?;
    let mut bottom = Vec::with_capacity(inputs.len());
    for (f, b) in fwd.into_iter().zip(bwd) {
        bottom.push(tape.concat(&[f, b])?);
    }

    let w = tape.param(params.bridge_weights);
    let bias = tape.param(params.bridge_bias);
    let mut current = Vec::with_capacity(bottom.len());
    for &h in &bottom {
        let d = dropout.apply(tape, h)?;
        let proj = tape.matmul(w, d)?;
        current.push(tape.add(proj, bias)?);
    }

    let mut layers = vec![bottom];
    for lp in &params.upper {
        let hidden = run_layer(tape, lp, &current, false)?;
        current = hidden
            .iter()
            .map(|&h| dropout.apply(tape, h))
            .collect::<Result<_>>()?;
        layers.push(hidden);
    }
    Ok(EncoderOutput { layers, top: current })
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub layers: Vec<LstmParams>,
}

impl DecoderParams {
    /// The bottom layer reads `[embedding; feed input]`.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        embed_dim: usize,
        hidden_dim: usize,
        depth: usize,
        init: &mut impl FnMut(&[usize]) -> Tensor<T>,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        let layers = (0..depth)
            .map(|k| {
                let input = if k == 0 { embed_dim + hidden_dim } else { hidden_dim };
                LstmParams::register(store, &format!("dec.l{k}"), input, hidden_dim, init)
            })
            .collect::<Result<_>>()?;
        Ok(DecoderParams { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// One decoder time step. Returns the new per-layer states and the top-layer
/// output on the vertical path.
pub fn decoder_step<T: Scalar>(
    tape: &mut Tape<'_, T>,
    params: &DecoderParams,
    prev: &[LstmState],
    y_prev_embedding: Var,
    t_prev: Var,
    dropout: &mut DropoutCtx,
) -> Result<(Vec<LstmState>, Var)> {
    if prev.len() != params.layers.len() {
        return Err(Error::Config(format!(
            "decoder has {} layers but {} states were supplied",
            params.layers.len(),
            prev.len()
        )));
    }
    let mut input = tape.concat(&[y_prev_embedding, t_prev])?;
    let mut states = Vec::with_capacity(prev.len());
    for (lp, &state) in params.layers.iter().zip(prev) {
        let next = lstm_step(tape, lp, input, state)?;
        input = dropout.apply(tape, next.hidden)?;
        states.push(next);
    }
    Ok((states, input))
}
