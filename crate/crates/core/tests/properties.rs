mod common;

use common::tiny;
use lookahead_nmt::attention::{global_attention, lookahead_context};
use lookahead_nmt::autodiff::{dropout, ParamStore, Tape};
use lookahead_nmt::checkpoint;
use lookahead_nmt::data::{make_batches, SentencePair, Vocabulary};
use lookahead_nmt::evaluation::{corpus_bleu, perplexity};
use lookahead_nmt::parallel::Execution;
use lookahead_nmt::tensor::{softmax, softmax_values};
use lookahead_nmt::training::clip_and_update;
use lookahead_nmt::{AttentionMode, Model, Tensor};
use proptest::prelude::*;

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "the", "cat"]), 0..9)
        .prop_map(|w| w.join(" "))
}

fn pair(vocab: usize) -> impl Strategy<Value = SentencePair> {
    (
        prop::collection::vec(4..vocab, 1..7),
        prop::collection::vec(4..vocab, 0..7),
    )
        .prop_map(|(s, t)| SentencePair::new(s, &t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_shift_invariant(xs in prop::collection::vec(-30.0f64..30.0, 1..12), c in -100.0f64..100.0) {
        let a = softmax_values(&xs).unwrap();
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let b = softmax_values(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(a.iter().all(|&p| p >= 0.0 && p <= 1.0));
        let t = softmax(&Tensor::vector(xs.clone()).unwrap()).unwrap();
        prop_assert_eq!(t.data(), a.as_slice());
    }

    #[test]
    fn attention_weights_are_distributions(
        keys in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..8),
        q in prop::collection::vec(-3.0f64..3.0, 4),
    ) {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let ks: Vec<_> = keys.iter().map(|k| tape.constant(Tensor::vector(k.clone()).unwrap())).collect();
        let qv = tape.constant(Tensor::vector(q).unwrap());
        let (_, w) = global_attention(&mut tape, qv, &ks).unwrap();
        let w = tape.value(w).data().to_vec();
        prop_assert_eq!(w.len(), keys.len());
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (c, beta) = lookahead_context(&mut tape, qv, &ks[..keys.len() - 1]).unwrap();
        if keys.len() == 1 {
            prop_assert!(beta.is_none());
            prop_assert!(tape.value(c).data().iter().all(|&x| x == 0.0));
        } else {
            prop_assert_eq!(tape.value(beta.unwrap()).len(), keys.len() - 1);
        }
    }

    #[test]
    fn bleu_ignores_sentence_order(
        rows in prop::collection::vec((sentence(), sentence(), sentence()), 1..8),
        seed in any::<u64>(),
    ) {
        let hyps: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
        let refs: Vec<Vec<String>> = rows.iter().map(|r| vec![r.1.clone(), r.2.clone()]).collect();
        let base = corpus_bleu(&hyps, &refs).unwrap();
        let mut order: Vec<usize> = (0..rows.len()).collect();
        let n = order.len();
        for i in 0..n {
            order.swap(i, (seed as usize).wrapping_add(i * 7) % n);
        }
        let ph: Vec<String> = order.iter().map(|&i| hyps[i].clone()).collect();
        let pr: Vec<Vec<String>> = order.iter().map(|&i| refs[i].clone()).collect();
        let perm = corpus_bleu(&ph, &pr).unwrap();
        prop_assert_eq!(base.bleu.to_bits(), perm.bleu.to_bits());
        prop_assert!(base.bleu >= 0.0 && base.bleu <= 100.0 + 1e-9);
    }

    #[test]
    fn vocabulary_round_trips(words in prop::collection::vec("[a-z]{1,5}", 0..30), cap in 0usize..20) {
        let lines = vec![words.join(" ")];
        let v = Vocabulary::from_lines(lines.iter().map(String::as_str), cap);
        prop_assert!(v.len() <= cap + 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v");
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        prop_assert_eq!(&back, &v);
        for w in &words {
            if v.contains(w) {
                prop_assert_eq!(v.token(v.id(w)), w.as_str());
            }
        }
    }

    #[test]
    fn batching_conserves_tokens(pairs in prop::collection::vec(pair(12), 1..30), size in 1usize..9, seed in any::<u64>()) {
        let batches = make_batches(&pairs, size, seed);
        let tokens: usize = pairs.iter().map(|p| p.source.len() + p.target.len()).sum();
        prop_assert_eq!(batches.iter().map(|b| b.mask_total()).sum::<usize>(), tokens);
        prop_assert_eq!(batches.iter().map(|b| b.len()).sum::<usize>(), pairs.len());
        for b in &batches {
            prop_assert!(b.len() <= size);
            let w = b.source_lengths.iter().max().unwrap();
            prop_assert!(b.source_ids.iter().all(|r| r.len() == *w));
            for (row, mask) in b.target_ids.iter().zip(&b.target_mask) {
                for (&id, &m) in row.iter().zip(mask) {
                    prop_assert_eq!(m == 1, id != 0);
                }
            }
        }
        prop_assert_eq!(make_batches(&pairs, size, seed), batches);
    }

    #[test]
    fn clipped_update_norm_is_bounded(grads in prop::collection::vec(-50.0f64..50.0, 1..20), clip in 0.1f64..10.0) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::zeros(&[grads.len()])).unwrap();
        s.get_mut(id).grad = Tensor::vector(grads).unwrap();
        clip_and_update(&mut s, 1.0, Some(clip));
        let norm = s.get(id).value.sum_squares().sqrt();
        prop_assert!(norm <= clip + 1e-6);
    }

    #[test]
    fn dropout_keeps_or_rescales(xs in prop::collection::vec(-5.0f64..5.0, 1..40), rate in 0.0f64..0.9, seed in any::<u64>()) {
        let t = Tensor::vector(xs.clone()).unwrap();
        let out = dropout(&t, rate, true, seed).unwrap();
        for (&x, &y) in xs.iter().zip(out.data()) {
            prop_assert!(y == 0.0 || (y - x / (1.0 - rate)).abs() < 1e-12);
        }
        prop_assert_eq!(dropout(&t, rate, false, seed).unwrap(), t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoints_round_trip(mode_ix in 0usize..4, enc in 1usize..3, dec in 1usize..3, seed in any::<u64>()) {
        let m = Model::<f32>::new(tiny(AttentionMode::ALL[mode_ix], 9, 5, (enc, dec)), seed).unwrap();
        let bytes = checkpoint::to_bytes(&m).unwrap();
        let back: Model<f32> = checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.config(), m.config());
        prop_assert_eq!(checkpoint::to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn perplexity_at_least_one(pairs in prop::collection::vec(pair(10), 1..6), seed in any::<u64>()) {
        let m = Model::<f64>::init_uniform(tiny(AttentionMode::EncDec, 10, 4, (1, 1)), seed, 1.0).unwrap();
        prop_assert!(perplexity(&m, &pairs, Execution::default()).unwrap() >= 1.0);
    }
}
