//! Command-line front end: `train`, `translate`, `evaluate`, `gradcheck`.
//!
//! Every flag of `train` and `translate` can also come from a JSON file
//! given with `--config`; keys are the flag names with `-` replaced by `_`.
//! Flags on the command line win over the file, the file wins over a
//! `--preset`, and the preset wins over the built-in defaults.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::checkpoint;
use crate::data::{self, Vocabulary};
use crate::decoding::{decode_corpus, export_trace, DecodeOptions, DEFAULT_BEAM};
use crate::error::{Error, Result};
use crate::evaluation::{bucketed_bleu, corpus_bleu_with};
use crate::gradcheck::{gradcheck, GradcheckOptions};
use crate::model::{Model, ModelConfig};
use crate::parallel::Execution;
use crate::training::{train, TrainConfig};

pub const SRC_VOCAB_FILE: &str = "src.vocab";
pub const TGT_VOCAB_FILE: &str = "tgt.vocab";
pub const DEFAULT_VOCAB_CAP: usize = 30_000;
pub const TOY_INIT_SCALE: f64 = 0.3;
pub const TOY_LEARNING_RATE: f64 = 0.5;

#[derive(Debug, Parser)]
#[command(name = "lanmt", version, about = "Attentional LSTM translation with target-side look-ahead attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build vocabularies, train a model and write checkpoints.
    Train(TrainArgs),
    /// Translate a tokenized source file with beam search.
    Translate(TranslateArgs),
    /// Corpus BLEU with multi-bleu conventions.
    Evaluate(EvaluateArgs),
    /// Finite-difference gradient check on a tiny double-precision model.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Desk-scale settings: hidden 32, embed 32, batch 16, one layer per
    /// side, init range 0.3, learning rate 0.5.
    Toy,
}

fn parse_mode(s: &str) -> std::result::Result<AttentionMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// JSON file with any of these options; command-line flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Named settings bundle applied before the config file and flags.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Training source corpus, one tokenized sentence per line.
    #[arg(long)]
    pub train_src: Option<PathBuf>,
    /// Training target corpus, line-aligned with --train-src.
    #[arg(long)]
    pub train_tgt: Option<PathBuf>,
    /// Development source corpus used for perplexity checks and lr halving.
    #[arg(long)]
    pub dev_src: Option<PathBuf>,
    /// Development target corpus, line-aligned with --dev-src.
    #[arg(long)]
    pub dev_tgt: Option<PathBuf>,
    /// Directory for checkpoints, vocabularies, log and run config.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Directory holding src.vocab and tgt.vocab to reuse instead of building new ones.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Source vocabulary cap excluding reserved tokens [default: 30000]
    #[arg(long)]
    pub src_vocab_size: Option<usize>,
    /// Target vocabulary cap excluding reserved tokens [default: 30000]
    #[arg(long)]
    pub tgt_vocab_size: Option<usize>,
    /// baseline, concat, enc-dec or dec-enc [default: baseline]
    #[arg(long, value_parser = parse_mode)]
    pub attention: Option<AttentionMode>,
    /// LSTM hidden size [default: 1000; toy: 32]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Embedding size [default: 1000; toy: 32]
    #[arg(long)]
    pub embed: Option<usize>,
    /// Layer count for both encoder and decoder [default: 3 encoder, 2 decoder; toy: 1]
    #[arg(long)]
    pub layers: Option<usize>,
    /// Encoder layers, overrides --layers [default: 3]
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    /// Decoder layers, overrides --layers [default: 2]
    #[arg(long)]
    pub decoder_layers: Option<usize>,
    /// Initial SGD learning rate, halved whenever dev perplexity rises [default: 0.1; toy: 0.5]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Sentences per minibatch [default: 128; toy: 16]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Dropout on embeddings and vertical LSTM outputs [default: 0.2]
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Half-width of the uniform parameter initialisation [default: 0.08; toy: 0.3]
    #[arg(long)]
    pub init_scale: Option<f64>,
    /// Global gradient-norm clip; 0 disables clipping [default: 5.0]
    #[arg(long)]
    pub clip: Option<f64>,
    /// Run seed for initialisation, shuffling and dropout [default: 1]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of passes over the training data [default: 10]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Batches between dev evaluations, 0 for epoch ends only [default: half an epoch; toy: 0]
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Training pairs longer than this are dropped [default: 100]
    #[arg(long)]
    pub max_train_len: Option<usize>,
    /// Disable data-parallel execution.
    #[arg(long)]
    #[serde(skip)]
    pub sequential: bool,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f.clone(); } )*
    };
}

/// Resolved `train` invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub train_src: PathBuf,
    pub train_tgt: PathBuf,
    pub dev_src: PathBuf,
    pub dev_tgt: PathBuf,
    pub out_dir: PathBuf,
    pub vocab: Option<PathBuf>,
    pub src_vocab_cap: usize,
    pub tgt_vocab_cap: usize,
    pub model: ModelConfig,
    pub init_scale: f64,
    pub train: TrainConfig,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn require(value: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    value.ok_or_else(|| Error::Config(format!("missing required option --{flag}")))
}

fn existing(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Data(format!("{}: no such file or directory", path.display())))
    }
}

impl TrainArgs {
    fn merged(&self) -> Result<TrainArgs> {
        let mut a = self.clone();
        if let Some(path) = &self.config {
            let file: TrainArgs = read_json(path)?;
            overlay!(a, file; preset, train_src, train_tgt, dev_src, dev_tgt, out_dir, vocab,
                src_vocab_size, tgt_vocab_size, attention, hidden, embed, layers, encoder_layers,
                decoder_layers, lr, batch, dropout, init_scale, clip, seed, max_epochs, eval_every, max_train_len);
        }
        if a.preset == Some(Preset::Toy) {
            a.hidden = a.hidden.or(Some(32));
            a.embed = a.embed.or(Some(32));
            a.batch = a.batch.or(Some(16));
            if a.layers.is_none() {
                a.encoder_layers = a.encoder_layers.or(Some(1));
                a.decoder_layers = a.decoder_layers.or(Some(1));
            }
            a.init_scale = a.init_scale.or(Some(TOY_INIT_SCALE));
            a.lr = a.lr.or(Some(TOY_LEARNING_RATE));
            a.eval_every = a.eval_every.or(Some(0));
        }
        Ok(a)
    }

    /// Applies config file, preset and defaults, and checks that every input
    /// path exists.
    pub fn resolve(&self) -> Result<TrainPlan> {
        let a = self.merged()?;
        let md = ModelConfig::default();
        let td = TrainConfig::default();
        let dropout = a.dropout.unwrap_or(td.dropout_rate);
        let train = TrainConfig {
            learning_rate: a.lr.unwrap_or(td.learning_rate),
            batch_size: a.batch.unwrap_or(td.batch_size),
            dropout_rate: dropout,
            clip_norm: match a.clip {
                Some(c) if c == 0.0 => None,
                Some(c) => Some(c),
                None => td.clip_norm,
            },
            max_epochs: a.max_epochs.unwrap_or(td.max_epochs),
            eval_every_batches: a.eval_every.or(td.eval_every_batches),
            seed: a.seed.unwrap_or(td.seed),
            max_train_len: a.max_train_len.unwrap_or(td.max_train_len),
        };
        train.validate()?;
        let model = ModelConfig {
            source_vocab_size: md.source_vocab_size,
            target_vocab_size: md.target_vocab_size,
            embedding_dim: a.embed.unwrap_or(md.embedding_dim),
            hidden_dim: a.hidden.unwrap_or(md.hidden_dim),
            encoder_layers: a.encoder_layers.or(a.layers).unwrap_or(md.encoder_layers),
            decoder_layers: a.decoder_layers.or(a.layers).unwrap_or(md.decoder_layers),
            attention_mode: a.attention.unwrap_or(md.attention_mode),
            dropout_rate: dropout,
        };
        model.validate()?;
        let init_scale = a.init_scale.unwrap_or(crate::model::INIT_SCALE);
        if !(init_scale > 0.0) {
            return Err(Error::Config(format!("init scale must be positive, got {init_scale}")));
        }
        let vocab = a.vocab.map(existing).transpose()?;
        Ok(TrainPlan {
            train_src: existing(require(a.train_src, "train-src")?)?,
            train_tgt: existing(require(a.train_tgt, "train-tgt")?)?,
            dev_src: existing(require(a.dev_src, "dev-src")?)?,
            dev_tgt: existing(require(a.dev_tgt, "dev-tgt")?)?,
            out_dir: require(a.out_dir, "out-dir")?,
            vocab,
            src_vocab_cap: a.src_vocab_size.unwrap_or(DEFAULT_VOCAB_CAP),
            tgt_vocab_cap: a.tgt_vocab_size.unwrap_or(DEFAULT_VOCAB_CAP),
            model,
            init_scale,
            train,
        })
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslateArgs {
    /// JSON file with any of these options; command-line flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Source file, one tokenized sentence per line.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output file [default: standard output]
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Directory with src.vocab and tgt.vocab [default: the checkpoint's directory]
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Beam width [default: 12]
    #[arg(long)]
    pub beam: Option<usize>,
    /// Maximum emitted tokens including </s> [default: 2 * source length + 5]
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Rank finished hypotheses by per-token log probability.
    #[arg(long)]
    pub length_norm: Option<bool>,
    /// Write one attention-trace JSON per sentence here.
    #[arg(long)]
    pub trace_dir: Option<PathBuf>,
    /// Disable data-parallel execution.
    #[arg(long)]
    #[serde(skip)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Hypothesis file, one sentence per line.
    #[arg(long)]
    pub hyp: PathBuf,
    /// Reference file; repeat for multiple references.
    #[arg(long = "ref", required = true)]
    pub refs: Vec<PathBuf>,
    /// Also report BLEU per source-length bucket (needs --src).
    #[arg(long, requires = "src")]
    pub buckets: bool,
    /// Source file used for bucketing by source length.
    #[arg(long)]
    pub src: Option<PathBuf>,
    /// Case-insensitive matching.
    #[arg(long)]
    pub lowercase: bool,
    /// Print the report as JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Mode to check [default: all four]
    #[arg(long, value_parser = parse_mode)]
    pub attention: Option<AttentionMode>,
    /// Seed for the tiny model and batch.
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = crate::gradcheck::STEP)]
    pub step: f64,
    /// Test hook: corrupt the analytic gradient of this parameter group.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn load_vocab_pair(dir: &Path) -> Result<(Vocabulary, Vocabulary)> {
    Ok((
        Vocabulary::load(&dir.join(SRC_VOCAB_FILE))?,
        Vocabulary::load(&dir.join(TGT_VOCAB_FILE))?,
    ))
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let plan = args.resolve()?;
    let (src_vocab, tgt_vocab) = match &plan.vocab {
        Some(dir) => load_vocab_pair(dir)?,
        None => (
            data::build_vocab(&plan.train_src, plan.src_vocab_cap)?,
            data::build_vocab(&plan.train_tgt, plan.tgt_vocab_cap)?,
        ),
    };
    fs::create_dir_all(&plan.out_dir).map_err(|e| Error::io(&plan.out_dir, e))?;
    src_vocab.save(&plan.out_dir.join(SRC_VOCAB_FILE))?;
    tgt_vocab.save(&plan.out_dir.join(TGT_VOCAB_FILE))?;

    let corpus = data::encode_corpus(&plan.train_src, &plan.train_tgt, &src_vocab, &tgt_vocab)?;
    let corpus = data::filter_for_training(corpus, plan.train.max_train_len);
    let dev = data::encode_corpus(&plan.dev_src, &plan.dev_tgt, &src_vocab, &tgt_vocab)?;
    let dev: Vec<_> = dev.into_iter().filter(|p| !p.source.is_empty()).collect();

    let config = ModelConfig {
        source_vocab_size: src_vocab.len(),
        target_vocab_size: tgt_vocab.len(),
        ..plan.model.clone()
    };
    log::info!(
        "training {} model on {} pairs ({} dev), vocab {}/{}",
        config.attention_mode,
        corpus.len(),
        dev.len(),
        config.source_vocab_size,
        config.target_vocab_size
    );
    let model = Model::<f32>::init_uniform(config, plan.train.seed, plan.init_scale)?;
    let outcome = train(
        model,
        &corpus,
        &dev,
        &plan.train,
        Some(&plan.out_dir),
        execution(args.sequential),
    )?;
    let io = |e| Error::io(&plan.out_dir, e);
    writeln!(
        out,
        "finished {} epochs, {} updates; best dev perplexity {:.4}; final lr {}",
        plan.train.max_epochs,
        outcome.state.batch_counter,
        outcome.state.best_dev_perplexity,
        outcome.state.current_learning_rate
    )
    .map_err(io)?;
    writeln!(out, "checkpoints written to {}", plan.out_dir.display()).map_err(io)?;
    Ok(())
}

pub fn cmd_translate(args: &TranslateArgs, out: &mut dyn Write) -> Result<()> {
    let mut a = args.clone();
    if let Some(path) = &args.config {
        let file: TranslateArgs = read_json(path)?;
        overlay!(a, file; model, input, output, vocab, beam, max_len, length_norm, trace_dir);
    }
    let model_path = existing(require(a.model, "model")?)?;
    let input = existing(require(a.input, "input")?)?;
    let vocab_dir = match a.vocab {
        Some(v) => existing(v)?,
        None => model_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
    };
    let beam = a.beam.unwrap_or(DEFAULT_BEAM);
    if beam == 0 {
        return Err(Error::Config("--beam must be at least 1".into()));
    }
    let options = DecodeOptions {
        beam_size: beam,
        max_len: a.max_len,
        length_normalization: a.length_norm.unwrap_or(false),
    };

    let model: Model<f32> = checkpoint::load(&model_path)?;
    let (src_vocab, tgt_vocab) = load_vocab_pair(&vocab_dir)?;
    let lines = data::read_lines(&input)?;
    let encoded: Vec<Vec<usize>> = lines.iter().map(|l| src_vocab.encode(l)).collect();
    let nonempty: Vec<usize> = (0..encoded.len()).filter(|&i| !encoded[i].is_empty()).collect();
    let sources: Vec<Vec<usize>> = nonempty.iter().map(|&i| encoded[i].clone()).collect();
    let hyps = decode_corpus(&model, &sources, &options, execution(args.sequential))?;

    let mut outputs = vec![String::new(); lines.len()];
    if let Some(dir) = &a.trace_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for (&i, hyp) in nonempty.iter().zip(&hyps) {
        outputs[i] = tgt_vocab.decode(&hyp.tokens);
        if let Some(dir) = &a.trace_dir {
            let source: Vec<String> = lines[i].split_whitespace().map(String::from).collect();
            let target = tgt_vocab.tokens(&hyp.tokens);
            export_trace(hyp, &source, &target, &dir.join(trace_file_name(i)))?;
        }
    }
    let text: String = outputs.iter().map(|s| format!("{s}\n")).collect();
    match &a.output {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => out
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

/// Trace file for 0-based input line `index`; numbered from 1 like lines.
pub fn trace_file_name(index: usize) -> String {
    format!("trace_{:06}.json", index + 1)
}

pub fn cmd_evaluate(args: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let hyps = data::read_lines(&args.hyp)?;
    let ref_files = args
        .refs
        .iter()
        .map(|p| data::read_lines(p))
        .collect::<Result<Vec<_>>>()?;
    for (p, r) in args.refs.iter().zip(&ref_files) {
        if r.len() != hyps.len() {
            return Err(Error::Data(format!(
                "{} has {} lines but {} has {}",
                p.display(),
                r.len(),
                args.hyp.display(),
                hyps.len()
            )));
        }
    }
    let refs: Vec<Vec<String>> = (0..hyps.len())
        .map(|i| ref_files.iter().map(|f| f[i].clone()).collect())
        .collect();
    let report = corpus_bleu_with(&hyps, &refs, args.lowercase)?;
    let buckets = match (&args.src, args.buckets) {
        (Some(src), true) => {
            let src_lines = data::read_lines(src)?;
            let lens: Vec<usize> = src_lines.iter().map(|l| l.split_whitespace().count()).collect();
            if args.lowercase {
                let lower = |v: &[String]| v.iter().map(|s| s.to_lowercase()).collect::<Vec<_>>();
                let refs: Vec<Vec<String>> = refs.iter().map(|r| lower(r)).collect();
                Some(bucketed_bleu(&lower(&hyps), &refs, &lens)?)
            } else {
                Some(bucketed_bleu(&hyps, &refs, &lens)?)
            }
        }
        _ => None,
    };
    let io = |e| Error::io("<stdout>", e);
    if args.json {
        let value = serde_json::json!({ "bleu": report, "buckets": buckets });
        writeln!(out, "{}", serde_json::to_string_pretty(&value)?).map_err(io)?;
    } else {
        writeln!(out, "{}", report.summary()).map_err(io)?;
        if let Some(b) = &buckets {
            write!(out, "{}", b.render()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let modes: Vec<AttentionMode> = match args.attention {
        Some(m) => vec![m],
        None => AttentionMode::ALL.to_vec(),
    };
    let mut offenders = Vec::new();
    for mode in modes {
        let mut options = GradcheckOptions::new(mode);
        options.seed = args.seed;
        options.step = args.step;
        options.corrupt = args.corrupt.clone();
        let report = gradcheck(&options)?;
        write!(out, "{}", report.render()).map_err(|e| Error::io("<stdout>", e))?;
        offenders.extend(
            report
                .offenders()
                .iter()
                .map(|g| format!("{mode}:{} ({:.3e})", g.name, g.max_relative_error)),
        );
    }
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed for {}",
            offenders.join(", ")
        )))
    }
}

pub fn execute(command: &Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(a, out),
        Command::Translate(a) => cmd_translate(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    }
}

/// Parses `argv`, runs the command and returns the process exit status.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match execute(&cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
