//! The full translation model: embeddings, bidirectional encoder, stacked
//! decoder with input feeding, attention combiner and output projection.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_step, AttentionMode, AttentionParams, Memory, StepAttentionResult};
use crate::autodiff::{DropoutCtx, Gradients, ParamId, ParamStore, Tape, Var};
use crate::data::{Batch, BOS};
use crate::decoding::{AttentionTrace, TraceStep};
use crate::error::{Error, Result};
use crate::parallel::{self, Execution};
use crate::recurrent::{decoder_step, encode, DecoderParams, EncoderParams, LstmState};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// Uniform initialisation range for every parameter.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attention_mode: AttentionMode,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            source_vocab_size: 30_000 + 4,
            target_vocab_size: 30_000 + 4,
            embedding_dim: 1000,
            hidden_dim: 1000,
            encoder_layers: 3,
            decoder_layers: 2,
            attention_mode: AttentionMode::Baseline,
            dropout_rate: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("source_vocab_size", self.source_vocab_size),
            ("target_vocab_size", self.target_vocab_size),
            ("embedding_dim", self.embedding_dim),
            ("hidden_dim", self.hidden_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: EncoderParams,
    target_embeddings: ParamId,
    decoder: DecoderParams,
    attention: AttentionParams,
    output: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

/// Graph handles of one teacher-forced pass.
pub struct ForwardGraph {
    /// Summed negative log likelihood of the sentence (scalar).
    pub loss: Var,
    pub log_probs: Vec<Var>,
    pub nll: Vec<Var>,
    pub trace: Vec<crate::attention::StepAttention>,
}

/// Plain results of [`Model::forward_teacher_forced`].
#[derive(Clone, Debug)]
pub struct TeacherForced<T> {
    /// One log-distribution over the target vocabulary per predicted token.
    pub log_probs: Vec<Vec<T>>,
    pub nll: Vec<T>,
    pub loss: T,
    pub trace: AttentionTrace<T>,
}

/// Top-layer encoder states of one source sentence, detached from any tape.
#[derive(Clone, Debug)]
pub struct EncodedSource<T> {
    pub states: Vec<Tensor<T>>,
}

/// Decoder recurrence carried between inference steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStepState<T> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
    /// Previous attentional state fed into the bottom layer.
    pub feed: Tensor<T>,
    /// Top-layer hidden states of all previous steps.
    pub history: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub state: DecoderStepState<T>,
    pub log_probs: Vec<T>,
    pub attention: StepAttentionResult<T>,
}

/// Number of sentences folded sequentially before the ordered reduction.
/// Fixed so gradients are independent of the thread count.
const GRAD_CHUNK: usize = 4;

impl<T: Scalar> Model<T> {
    pub fn with_init(config: ModelConfig, mut init: impl FnMut(&[usize]) -> Tensor<T>) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let h = config.hidden_dim;
        let e = config.embedding_dim;
        let encoder = EncoderParams::register(
            &mut params,
            config.source_vocab_size,
            e,
            h,
            config.encoder_layers,
            &mut init,
        )?;
        let target_embeddings = params.add("tgt_embed", init(&[config.target_vocab_size, e]))?;
        let decoder = DecoderParams::register(&mut params, e, h, config.decoder_layers, &mut init)?;
        let attention = AttentionParams::register(&mut params, config.attention_mode, h, &mut init)?;
        let output = params.add("out.ws", init(&[config.target_vocab_size, h]))?;
        Ok(Model {
            config,
            params,
            layout: Layout {
                encoder,
                target_embeddings,
                decoder,
                attention,
                output,
            },
        })
    }

    /// Uniform `[-scale, scale]` initialisation from a seeded stream.
    pub fn init_uniform(config: ModelConfig, seed: u64, scale: f64) -> Result<Self> {
        let mut r = rng::stream(seed, &[rng::INIT]);
        Self::with_init(config, |shape| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::lit(r.random_range(-scale..=scale))).collect();
            Tensor::new(shape.to_vec(), data).expect("init shape")
        })
    }

    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_uniform(config, seed, INIT_SCALE)
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::with_init(config, |shape| Tensor::zeros(shape))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> AttentionMode {
        self.config.attention_mode
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.id(name).map(|id| &self.params.get(id).value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let id = self.params.id(name)?;
        Some(&mut self.params.get_mut(id).value)
    }

    pub fn attention_params(&self) -> &AttentionParams {
        &self.layout.attention
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::zeros(self.config.clone()).expect("validated config");
        for (dst, src) in out.params.iter_mut().zip(self.params.iter()) {
            dst.value = src.value.cast();
        }
        out
    }

    fn check_ids(ids: &[usize], vocab: usize, side: &str) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Data(format!(
                "{side} token id {bad} outside vocabulary of size {vocab}"
            )));
        }
        Ok(())
    }

    /// Records a teacher-forced pass. `target` starts with BOS; every later
    /// position is predicted from the gold history before it.
    pub fn forward_graph(
        &self,
        tape: &mut Tape<'_, T>,
        source: &[usize],
        target: &[usize],
        dropout: &mut DropoutCtx,
    ) -> Result<ForwardGraph> {
        Self::check_ids(source, self.config.source_vocab_size, "source")?;
        Self::check_ids(target, self.config.target_vocab_size, "target")?;
        if target.len() < 2 {
            return Err(Error::Data(
                "target must hold BOS followed by at least one token".into(),
            ));
        }
        let enc = encode(tape, &self.layout.encoder, source, dropout)?;
        let memory = Memory::new(tape, &enc.top)?;
        let h = self.config.hidden_dim;

        let table = tape.param(self.layout.target_embeddings);
        let w_out = tape.param(self.layout.output);
        let mut states: Vec<LstmState> = (0..self.layout.decoder.depth())
            .map(|_| LstmState::zeros(tape, h))
            .collect();
        let mut feed = tape.zeros(&[h]);
        let mut history = Vec::with_capacity(target.len());
        let mut out = ForwardGraph {
            loss: feed,
            log_probs: Vec::new(),
            nll: Vec::new(),
            trace: Vec::new(),
        };
        for j in 1..target.len() {
            let emb = tape.row(table, target[j - 1])?;
            let emb = dropout.apply(tape, emb)?;
            let (next, s_top) = decoder_step(tape, &self.layout.decoder, &states, emb, feed, dropout)?;
            let att = attend_step(tape, &self.layout.attention, s_top, &memory, &history)?;
            history.push(s_top);
            let logits = tape.matmul(w_out, att.t_final)?;
            let logp = tape.log_softmax(logits)?;
            let picked = tape.pick(logp, target[j])?;
            out.nll.push(tape.scale(picked, -T::one()));
            out.log_probs.push(logp);
            out.trace.push(att);
            feed = att.t_final;
            states = next;
        }
        out.loss = tape.add_n(&out.nll)?;
        Ok(out)
    }

    pub fn forward_teacher_forced(&self, source: &[usize], target: &[usize]) -> Result<TeacherForced<T>> {
        let mut tape = Tape::new(&self.params);
        let g = self.forward_graph(&mut tape, source, target, &mut DropoutCtx::inference())?;
        let steps = g
            .trace
            .iter()
            .map(|a| {
                let v = a.values(&tape);
                TraceStep {
                    source_weights: v.source_weights,
                    target_weights: v.target_weights,
                }
            })
            .collect();
        Ok(TeacherForced {
            log_probs: g.log_probs.iter().map(|&v| tape.value(v).data().to_vec()).collect(),
            nll: g.nll.iter().map(|&v| tape.value(v).item()).collect(),
            loss: tape.value(g.loss).item(),
            trace: AttentionTrace {
                has_target_attention: self.mode().has_lookahead(),
                steps,
            },
        })
    }

    /// Summed NLL of one sentence with its gradients.
    pub fn sentence_grads(
        &self,
        source: &[usize],
        target: &[usize],
        dropout: &mut DropoutCtx,
    ) -> Result<(T, Gradients<T>)> {
        let mut tape = Tape::new(&self.params);
        let g = self.forward_graph(&mut tape, source, target, dropout)?;
        let grads = tape.backward(g.loss)?;
        Ok((tape.value(g.loss).item(), grads))
    }

    /// Summed NLL of one sentence without gradients.
    pub fn sentence_nll(&self, source: &[usize], target: &[usize]) -> Result<T> {
        let mut tape = Tape::new(&self.params);
        let g = self.forward_graph(&mut tape, source, target, &mut DropoutCtx::inference())?;
        Ok(tape.value(g.loss).item())
    }

    /// Masked per-token mean NLL over a padded batch.
    pub fn batch_loss(&self, batch: &Batch) -> Result<T> {
        let tokens = batch.predicted_tokens();
        if tokens == 0 {
            return Err(Error::Domain("batch holds no target tokens".into()));
        }
        let rows: Vec<usize> = (0..batch.len()).collect();
        let losses = parallel::try_map(Execution::default(), &rows, |_, &r| {
            let (src, tgt) = batch.row(r);
            self.sentence_nll(src, tgt)
        })?;
        let total: T = losses.into_iter().sum();
        Ok(total / T::lit(tokens as f64))
    }

    /// Masked per-token mean NLL and its gradients. Dropout for row `r` is
    /// drawn from the stream `(seed, step, r)` when `dropout_rate > 0`.
    pub fn batch_loss_and_grads(
        &self,
        batch: &Batch,
        dropout_rate: f64,
        seed: u64,
        step: u64,
        exec: Execution,
    ) -> Result<(T, Gradients<T>)> {
        let tokens = batch.predicted_tokens();
        if tokens == 0 {
            return Err(Error::Domain("batch holds no target tokens".into()));
        }
        let chunks: Vec<Vec<usize>> = (0..batch.len())
            .collect::<Vec<_>>()
            .chunks(GRAD_CHUNK)
            .map(|c| c.to_vec())
            .collect();
        let partials = parallel::try_map(exec, &chunks, |_, rows| -> Result<(T, Gradients<T>)> {
            let mut loss = T::zero();
            let mut grads = Gradients::empty(self.params.len());
            for &r in rows {
                let (src, tgt) = batch.row(r);
                let mut dropout = if dropout_rate > 0.0 {
                    DropoutCtx::training(
                        dropout_rate,
                        rng::stream(seed, &[rng::DROPOUT, step, r as u64]),
                    )?
                } else {
                    DropoutCtx::inference()
                };
                let (l, g) = self.sentence_grads(src, tgt, &mut dropout)?;
                loss += l;
                grads.merge(&g);
            }
            Ok((loss, grads))
        })?;
        let mut total = T::zero();
        let mut grads = Gradients::empty(self.params.len());
        for (l, g) in &partials {
            total += *l;
            grads.merge(g);
        }
        let inv = T::one() / T::lit(tokens as f64);
        grads.scale(inv);
        Ok((total * inv, grads))
    }

    pub fn encode_source(&self, source: &[usize]) -> Result<EncodedSource<T>> {
        Self::check_ids(source, self.config.source_vocab_size, "source")?;
        let mut tape = Tape::new(&self.params);
        let enc = encode(&mut tape, &self.layout.encoder, source, &mut DropoutCtx::inference())?;
        Ok(EncodedSource {
            states: enc.top.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    pub fn initial_state(&self) -> DecoderStepState<T> {
        let h = self.config.hidden_dim;
        DecoderStepState {
            layers: (0..self.config.decoder_layers)
                .map(|_| (Tensor::zeros(&[h]), Tensor::zeros(&[h])))
                .collect(),
            feed: Tensor::zeros(&[h]),
            history: Vec::new(),
        }
    }

    /// One inference step from `state` after emitting `prev_token`
    /// (BOS at the first step).
    pub fn decode_step(
        &self,
        source: &EncodedSource<T>,
        state: &DecoderStepState<T>,
        prev_token: usize,
    ) -> Result<StepOutput<T>> {
        Self::check_ids(&[prev_token], self.config.target_vocab_size, "target")?;
        let mut tape = Tape::new(&self.params);
        let keys: Vec<Var> = source.states.iter().map(|s| tape.constant(s.clone())).collect();
        let memory = Memory::new(&mut tape, &keys)?;
        let prev: Vec<LstmState> = state
            .layers
            .iter()
            .map(|(h, c)| LstmState::from_values(&mut tape, h, c))
            .collect();
        let feed = tape.constant(state.feed.clone());
        let history: Vec<Var> = state.history.iter().map(|s| tape.constant(s.clone())).collect();

        let table = tape.param(self.layout.target_embeddings);
        let emb = tape.row(table, prev_token)?;
        let mut dropout = DropoutCtx::inference();
        let (next, s_top) = decoder_step(&mut tape, &self.layout.decoder, &prev, emb, feed, &mut dropout)?;
        let att = attend_step(&mut tape, &self.layout.attention, s_top, &memory, &history)?;
        let w_out = tape.param(self.layout.output);
        let logits = tape.matmul(w_out, att.t_final)?;
        let logp = tape.log_softmax(logits)?;

        let mut new_history = state.history.clone();
        new_history.push(tape.value(s_top).clone());
        Ok(StepOutput {
            state: DecoderStepState {
                layers: next
                    .iter()
                    .map(|s| (tape.value(s.hidden).clone(), tape.value(s.cell).clone()))
                    .collect(),
                feed: tape.value(att.t_final).clone(),
                history: new_history,
            },
            log_probs: tape.value(logp).data().to_vec(),
            attention: att.values(&tape),
        })
    }

    /// Summed log probability of `tokens` (without BOS) under teacher forcing.
    pub fn score(&self, source: &[usize], tokens: &[usize]) -> Result<T> {
        let mut target = Vec::with_capacity(tokens.len() + 1);
        target.push(BOS);
        target.extend_from_slice(tokens);
        Ok(-self.sentence_nll(source, &target)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EOS;

    fn tiny(mode: AttentionMode) -> ModelConfig {
        ModelConfig {
            source_vocab_size: 9,
            target_vocab_size: 7,
            embedding_dim: 3,
            hidden_dim: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            attention_mode: mode,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = Model::<f64>::zeros(tiny(AttentionMode::EncDec)).unwrap();
        let tf = m.forward_teacher_forced(&[4, 5, 6], &[BOS, 4, 5, EOS]).unwrap();
        for (lp, nll) in tf.log_probs.iter().zip(&tf.nll) {
            for &v in lp {
                assert!((v + 7f64.ln()).abs() < 1e-12);
            }
            assert!((nll - 7f64.ln()).abs() < 1e-12);
        }
        let summed: f64 = tf.nll.iter().sum();
        assert!((summed - tf.loss).abs() < 1e-5);
    }

    #[test]
    fn out_of_range_ids_are_data_errors() {
        let m = Model::<f32>::new(tiny(AttentionMode::Baseline), 1).unwrap();
        assert!(matches!(
            m.forward_teacher_forced(&[9], &[BOS, EOS]),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            m.forward_teacher_forced(&[4], &[BOS, 7]),
            Err(Error::Data(_))
        ));
        assert!(m.forward_teacher_forced(&[4], &[BOS]).is_err());
    }

    #[test]
    fn fresh_model_loss_near_log_vocab() {
        for mode in AttentionMode::ALL {
            let m = Model::<f32>::new(tiny(mode), 3).unwrap();
            let tf = m.forward_teacher_forced(&[4, 8, 5, 6, 1], &[BOS, 5, 4, 6, 4, EOS]).unwrap();
            let per_token = tf.loss / tf.nll.len() as f32;
            let lv = 7f32.ln();
            assert!((per_token - lv).abs() < 0.1 * lv, "{mode}: {per_token}");
        }
    }

    #[test]
    fn stepwise_inference_matches_teacher_forcing() {
        for mode in AttentionMode::ALL {
            let m = Model::<f32>::init_uniform(tiny(mode), 11, 0.5).unwrap();
            let src = [4, 5, 8, 6];
            let tgt = [BOS, 6, 4, 5, EOS];
            let tf = m.forward_teacher_forced(&src, &tgt).unwrap();
            let enc = m.encode_source(&src).unwrap();
            let mut state = m.initial_state();
            for j in 1..tgt.len() {
                let out = m.decode_step(&enc, &state, tgt[j - 1]).unwrap();
                assert_eq!(out.log_probs, tf.log_probs[j - 1], "{mode} step {j}");
                assert_eq!(out.attention.target_weights, tf.trace.steps[j - 1].target_weights);
                state = out.state;
            }
        }
    }

    #[test]
    fn cast_preserves_values_and_layout() {
        let m = Model::<f64>::new(tiny(AttentionMode::DecEnc), 5).unwrap();
        let c: Model<f32> = m.cast();
        assert_eq!(c.params().len(), m.params().len());
        for (a, b) in c.params().iter().zip(m.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
        }
    }
}
