//! SGD training with global-norm clipping and learning-rate halving on
//! dev-perplexity regressions.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::checkpoint;
use crate::data::{make_batches, Batch, SentencePair, DEFAULT_MAX_TRAIN_LEN};
use crate::error::{Error, Result};
use crate::evaluation::perplexity;
use crate::model::{Model, ModelConfig};
use crate::parallel::Execution;
use crate::rng;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    /// `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub max_epochs: usize,
    /// Batches between dev evaluations; `None` means twice per epoch and
    /// `Some(0)` only at epoch ends.
    pub eval_every_batches: Option<usize>,
    pub seed: u64,
    pub max_train_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            batch_size: 128,
            dropout_rate: 0.2,
            clip_norm: Some(5.0),
            max_epochs: 10,
            eval_every_batches: None,
            seed: 1,
            max_train_len: DEFAULT_MAX_TRAIN_LEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: u64,
    pub train_loss: f64,
    pub dev_perplexity: f64,
    pub learning_rate: f64,
}

impl HistoryEntry {
    /// One `step  train_loss  dev_ppl  lr` log line, tab separated.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{}",
            self.step, self.train_loss, self.dev_perplexity, self.learning_rate
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub batch_counter: u64,
    pub current_learning_rate: f64,
    pub best_dev_perplexity: f64,
    pub halvings: u32,
    pub history: Vec<HistoryEntry>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            batch_counter: 0,
            current_learning_rate: config.learning_rate,
            best_dev_perplexity: f64::INFINITY,
            halvings: 0,
            history: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Clips the accumulated gradients in `store` to `clip_norm` and applies
/// `p -= lr * grad`. Returns the pre-clipping norm.
pub fn clip_and_update<T: Scalar>(store: &mut ParamStore<T>, learning_rate: f64, clip_norm: Option<f64>) -> (f64, bool) {
    let norm = store.grad_norm().as_f64();
    let mut factor = learning_rate;
    let mut clipped = false;
    if let Some(c) = clip_norm {
        if norm > c {
            factor *= c / norm;
            clipped = true;
        }
    }
    let step = T::lit(factor);
    for p in store.iter_mut() {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= step * *g;
        }
    }
    (norm, clipped)
}

/// One SGD update on `batch`. Gradients are zeroed first; a non-finite loss
/// aborts without touching the parameters.
pub fn sgd_step<T: Scalar>(
    model: &mut Model<T>,
    batch: &Batch,
    state: &mut TrainState,
    config: &TrainConfig,
    exec: Execution,
) -> Result<StepReport> {
    model.params_mut().zero_grad();
    let (loss, grads) =
        model.batch_loss_and_grads(batch, config.dropout_rate, config.seed, state.batch_counter, exec)?;
    let loss = loss.as_f64();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {loss} at batch {} (epoch {}, {} sentences)",
            state.batch_counter,
            state.epoch,
            batch.len()
        )));
    }
    grads.accumulate_into(model.params_mut());
    let (grad_norm, clipped) = clip_and_update(model.params_mut(), state.current_learning_rate, config.clip_norm);
    state.batch_counter += 1;
    Ok(StepReport { loss, grad_norm, clipped })
}

/// Halves the learning rate when `new_dev_perplexity` is worse than the
/// best seen so far; the best is updated either way.
pub fn lr_schedule(state: &mut TrainState, new_dev_perplexity: f64) {
    if new_dev_perplexity > state.best_dev_perplexity {
        state.current_learning_rate *= 0.5;
        state.halvings += 1;
    }
    state.best_dev_perplexity = state.best_dev_perplexity.min(new_dev_perplexity);
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub model: Model<T>,
    /// Snapshot with the lowest dev perplexity seen; the initial model when
    /// no evaluation ran.
    pub best: Model<T>,
    pub state: TrainState,
}

#[derive(Serialize)]
struct RunConfig<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

struct Outputs {
    dir: PathBuf,
    log: BufWriter<File>,
}

impl Outputs {
    fn create(dir: &Path, model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("run_config.json");
        let json = serde_json::to_string_pretty(&RunConfig { model, train })?;
        fs::write(&cfg_path, json).map_err(|e| Error::io(&cfg_path, e))?;
        let log_path = dir.join("train.log");
        let log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            log: BufWriter::new(log),
        })
    }

    fn log(&mut self, entry: &HistoryEntry) -> Result<()> {
        let path = self.dir.join("train.log");
        writeln!(self.log, "{}", entry.log_line())
            .and_then(|_| self.log.flush())
            .map_err(|e| Error::io(&path, e))
    }
}

/// Trains `model` on `corpus`. Dev perplexity is measured every
/// `eval_every_batches` batches and after each epoch. With `out_dir`,
/// `best.ckpt`, `final.ckpt`, `train.log` and `run_config.json` are written
/// there.
pub fn train<T: Scalar>(
    model: Model<T>,
    corpus: &[SentencePair],
    dev: &[SentencePair],
    config: &TrainConfig,
    out_dir: Option<&Path>,
    exec: Execution,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let mut state = TrainState::new(config);
    if config.max_epochs == 0 {
        return Ok(TrainOutcome {
            best: model.clone(),
            model,
            state,
        });
    }
    if corpus.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::Data("dev corpus is empty".into()));
    }
    let mut outputs = match out_dir {
        Some(d) => Some(Outputs::create(d, model.config(), config)?),
        None => None,
    };
    let mut model = model;
    let mut best = model.clone();
    let mut loss_sum = 0.0;
    let mut loss_tokens = 0usize;

    let mut evaluate = |model: &Model<T>,
                        state: &mut TrainState,
                        best: &mut Model<T>,
                        loss_sum: &mut f64,
                        loss_tokens: &mut usize|
     -> Result<()> {
        let ppl = perplexity(model, dev, exec)?;
        if !ppl.is_finite() {
            return Err(Error::Numeric(format!("dev perplexity is {ppl} at step {}", state.batch_counter)));
        }
        let improved = ppl < state.best_dev_perplexity;
        lr_schedule(state, ppl);
        let train_loss = if *loss_tokens > 0 { *loss_sum / *loss_tokens as f64 } else { f64::NAN };
        let entry = HistoryEntry {
            step: state.batch_counter,
            train_loss,
            dev_perplexity: ppl,
            learning_rate: state.current_learning_rate,
        };
        log::info!(
            "epoch {} step {}: train loss {:.4}, dev ppl {:.4}, lr {}",
            state.epoch,
            entry.step,
            entry.train_loss,
            entry.dev_perplexity,
            entry.learning_rate
        );
        if improved {
            *best = model.clone();
        }
        if let Some(out) = outputs.as_mut() {
            out.log(&entry)?;
            if improved {
                checkpoint::save(best, &out.dir.join("best.ckpt"))?;
            }
        }
        state.history.push(entry);
        *loss_sum = 0.0;
        *loss_tokens = 0;
        Ok(())
    };

    for epoch in 0..config.max_epochs {
        state.epoch = epoch;
        let seed = rng::derive_seed(config.seed, &[rng::SHUFFLE, epoch as u64]);
        let batches = make_batches(corpus, config.batch_size, seed);
        let every = match config.eval_every_batches {
            None => batches.len().div_ceil(2).max(1),
            Some(0) => usize::MAX,
            Some(n) => n,
        };
        for (i, batch) in batches.iter().enumerate() {
            let report = sgd_step(&mut model, batch, &mut state, config, exec)?;
            let tokens = batch.predicted_tokens();
            loss_sum += report.loss * tokens as f64;
            loss_tokens += tokens;
            let last = i + 1 == batches.len();
            if (i + 1) % every == 0 && !last {
                evaluate(&model, &mut state, &mut best, &mut loss_sum, &mut loss_tokens)?;
            }
        }
        evaluate(&model, &mut state, &mut best, &mut loss_sum, &mut loss_tokens)?;
    }
    if let Some(out) = outputs.as_ref() {
        checkpoint::save(&model, &out.dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome { model, best, state })
}
