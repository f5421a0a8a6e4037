mod common;

use common::{forced_model, tiny};
use lookahead_nmt::checkpoint;
use lookahead_nmt::data::{make_batches, Batch, SentencePair, EOS};
use lookahead_nmt::evaluation::perplexity;
use lookahead_nmt::parallel::Execution;
use lookahead_nmt::synthetic::copy_task;
use lookahead_nmt::training::{sgd_step, train, TrainConfig, TrainState};
use lookahead_nmt::{AttentionMode, Error, Model};

fn pairs() -> Vec<SentencePair> {
    vec![
        SentencePair::new(vec![4, 5, 6], &[7, 8]),
        SentencePair::new(vec![5], &[4, 4, 9, 6]),
        SentencePair::new(vec![9, 8, 7, 6, 5], &[]),
    ]
}

#[test]
fn batch_loss_is_token_weighted_mean_of_sentences() {
    for mode in AttentionMode::ALL {
        let model = Model::<f64>::init_uniform(tiny(mode, 10, 4, (2, 2)), 3, 0.3).unwrap();
        let ps = pairs();
        let batch = Batch::from_pairs(&ps.iter().collect::<Vec<_>>());
        let mut total = 0.0;
        let mut tokens = 0;
        for p in &ps {
            let tf = model.forward_teacher_forced(&p.source, &p.target).unwrap();
            total += tf.nll.iter().sum::<f64>();
            tokens += tf.nll.len();
        }
        let loss = model.batch_loss(&batch).unwrap();
        assert!((loss - total / tokens as f64).abs() < 1e-12, "{mode}");
        let (l2, _) = model
            .batch_loss_and_grads(&batch, 0.0, 0, 0, Execution::Sequential)
            .unwrap();
        assert!((l2 - loss).abs() < 1e-12);
    }
}

#[test]
fn padding_contributes_nothing() {
    let model = Model::<f64>::init_uniform(tiny(AttentionMode::EncDec, 10, 4, (1, 1)), 5, 0.3).unwrap();
    let ps = pairs();
    let joint = model.batch_loss(&Batch::from_pairs(&ps.iter().collect::<Vec<_>>())).unwrap();
    let (mut sum, mut tokens) = (0.0, 0);
    for p in &ps {
        let b = Batch::from_pairs(&[p]);
        sum += model.batch_loss(&b).unwrap() * b.predicted_tokens() as f64;
        tokens += b.predicted_tokens();
    }
    assert!((joint - sum / tokens as f64).abs() < 1e-12);
}

#[test]
fn gradients_identical_across_execution_modes() {
    let model = Model::<f32>::init_uniform(tiny(AttentionMode::DecEnc, 12, 8, (2, 2)), 1, 0.1).unwrap();
    let data = copy_task(40, 12, 6, 2);
    let batch = &make_batches(&data, 40, 0)[0];
    let (la, ga) = model.batch_loss_and_grads(batch, 0.2, 9, 4, Execution::Sequential).unwrap();
    let (lb, gb) = model.batch_loss_and_grads(batch, 0.2, 9, 4, Execution::Parallel).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
    for id in model.params().ids() {
        assert_eq!(ga.get(id), gb.get(id));
    }
}

#[test]
fn uniform_and_certain_perplexity() {
    let zero = Model::<f64>::zeros(tiny(AttentionMode::Concatenation, 13, 4, (1, 1))).unwrap();
    let ppl = perplexity(&zero, &pairs(), Execution::default()).unwrap();
    assert!((ppl - 13.0).abs() / 13.0 < 1e-3, "{ppl}");

    let sure = forced_model(AttentionMode::Baseline, 8, EOS);
    let only_eos = vec![SentencePair::new(vec![4, 5], &[]), SentencePair::new(vec![6], &[])];
    let ppl = perplexity(&sure, &only_eos, Execution::default()).unwrap();
    assert!((ppl - 1.0).abs() < 1e-9, "{ppl}");
}

#[test]
fn zero_learning_rate_keeps_parameters_bitwise() {
    let mut model = Model::<f32>::new(tiny(AttentionMode::EncDec, 12, 8, (1, 1)), 4).unwrap();
    let before = model.params().clone();
    let config = TrainConfig { clip_norm: None, ..TrainConfig::default() };
    let mut state = TrainState::new(&config);
    state.current_learning_rate = 0.0;
    for b in make_batches(&copy_task(30, 12, 5, 1), 8, 0) {
        sgd_step(&mut model, &b, &mut state, &config, Execution::default()).unwrap();
    }
    for (a, b) in before.iter().zip(model.params().iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn small_step_decreases_batch_loss() {
    for mode in AttentionMode::ALL {
        let mut model = Model::<f64>::init_uniform(tiny(mode, 10, 4, (2, 2)), 6, 0.3).unwrap();
        let batch = Batch::from_pairs(&pairs().iter().collect::<Vec<_>>());
        let before = model.batch_loss(&batch).unwrap();
        let config = TrainConfig { learning_rate: 1e-3, dropout_rate: 0.0, ..TrainConfig::default() };
        let mut state = TrainState::new(&config);
        sgd_step(&mut model, &batch, &mut state, &config, Execution::default()).unwrap();
        let after = model.batch_loss(&batch).unwrap();
        assert!(after < before, "{mode}: {after} !< {before}");
    }
}

#[test]
fn non_finite_loss_aborts_naming_batch() {
    let mut model = Model::<f32>::new(tiny(AttentionMode::Baseline, 10, 4, (1, 1)), 1).unwrap();
    model.param_mut("out.ws").unwrap().fill(f32::NAN);
    let config = TrainConfig::default();
    let mut state = TrainState::new(&config);
    state.batch_counter = 41;
    let batch = Batch::from_pairs(&pairs().iter().collect::<Vec<_>>());
    let err = sgd_step(&mut model, &batch, &mut state, &config, Execution::default()).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
    assert!(err.to_string().contains("batch 41"), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn zero_epochs_returns_model_untouched() {
    let model = Model::<f32>::new(tiny(AttentionMode::Baseline, 10, 4, (1, 1)), 1).unwrap();
    let config = TrainConfig { max_epochs: 0, ..TrainConfig::default() };
    let out = train(model.clone(), &[], &[], &config, None, Execution::default()).unwrap();
    assert_eq!(out.model.params(), model.params());
    assert!(out.state.history.is_empty());
}

#[test]
fn evaluation_cadence() {
    // 9 batches per epoch: the default evaluates after batch 5 and at the end
    let data = copy_task(9 * 4, 12, 5, 1);
    let dev = copy_task(8, 12, 5, 2);
    let model = Model::<f32>::new(tiny(AttentionMode::Baseline, 12, 4, (1, 1)), 1).unwrap();
    let run = |every| {
        let config = TrainConfig { batch_size: 4, max_epochs: 2, eval_every_batches: every, ..TrainConfig::default() };
        let out = train(model.clone(), &data, &dev, &config, None, Execution::default()).unwrap();
        out.state.history.iter().map(|h| h.step).collect::<Vec<_>>()
    };
    assert_eq!(run(None), [5, 9, 14, 18]);
    assert_eq!(run(Some(0)), [9, 18]);
    assert_eq!(run(Some(4)), [4, 8, 9, 13, 17, 18]);
}

#[test]
fn training_writes_artifacts_and_keeps_best() {
    let dir = tempfile::tempdir().unwrap();
    let data = copy_task(120, 12, 5, 1);
    let dev = copy_task(20, 12, 5, 2);
    let model = Model::<f32>::init_uniform(tiny(AttentionMode::EncDec, 12, 8, (1, 1)), 1, 0.3).unwrap();
    let config = TrainConfig {
        learning_rate: 0.5,
        batch_size: 16,
        max_epochs: 3,
        eval_every_batches: Some(3),
        ..TrainConfig::default()
    };
    let out = train(model, &data, &dev, &config, Some(dir.path()), Execution::default()).unwrap();
    for f in ["best.ckpt", "final.ckpt", "train.log", "run_config.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(dir.path().join("train.log")).unwrap();
    assert_eq!(log.lines().count(), out.state.history.len());
    for line in log.lines() {
        assert_eq!(line.split('\t').count(), 4, "{line}");
    }
    let best: Model<f32> = checkpoint::load(&dir.path().join("best.ckpt")).unwrap();
    for (a, b) in best.params().iter().zip(out.best.params().iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    let final_ppl = perplexity(&out.model, &dev, Execution::default()).unwrap();
    let best_ppl = perplexity(&best, &dev, Execution::default()).unwrap();
    assert!(best_ppl <= final_ppl);
    assert_eq!(best_ppl, out.state.best_dev_perplexity);
    for (k, h) in out.state.history.iter().enumerate() {
        let halvings = out.state.history[..=k]
            .iter()
            .enumerate()
            .filter(|(i, e)| {
                let prior = out.state.history[..*i].iter().map(|p| p.dev_perplexity).fold(f64::INFINITY, f64::min);
                e.dev_perplexity > prior
            })
            .count();
        assert_eq!(h.learning_rate, 0.5 * 0.5f64.powi(halvings as i32));
    }
}

#[test]
fn checkpoint_reload_scores_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::<f32>::new(tiny(AttentionMode::DecEnc, 10, 6, (2, 2)), 8).unwrap();
    checkpoint::save(&model, &path).unwrap();
    let back: Model<f32> = checkpoint::load(&path).unwrap();
    let p = &pairs()[0];
    assert_eq!(
        model.sentence_nll(&p.source, &p.target).unwrap().to_bits(),
        back.sentence_nll(&p.source, &p.target).unwrap().to_bits()
    );
    assert!(checkpoint::load::<f32>(&dir.path().join("missing.ckpt")).is_err());
}
