#![allow(dead_code)]

use lookahead_nmt::autodiff::{ParamStore, Tape, Var};
use lookahead_nmt::rng;
use lookahead_nmt::{AttentionMode, ModelConfig, Result, Tensor};
use rand::Rng as _;

pub fn tiny(mode: AttentionMode, vocab: usize, hidden: usize, layers: (usize, usize)) -> ModelConfig {
    ModelConfig {
        source_vocab_size: vocab,
        target_vocab_size: vocab,
        embedding_dim: hidden,
        hidden_dim: hidden,
        encoder_layers: layers.0,
        decoder_layers: layers.1,
        attention_mode: mode,
        dropout_rate: 0.0,
    }
}

pub fn random_tensor(r: &mut rng::Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

pub fn uniform_init(seed: u64, scale: f64) -> impl FnMut(&[usize]) -> Tensor<f64> {
    let mut r = rng::stream(seed, &[99]);
    move |shape: &[usize]| random_tensor(&mut r, shape, scale)
}

/// Central differences of the scalar built by `f` with respect to every
/// parameter entry, compared against the tape's gradients. Returns the
/// largest |analytic − numeric| / max(|analytic|, |numeric|, 1e-6).
pub fn fd_max_error<F>(store: &mut ParamStore<f64>, f: F) -> f64
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape).unwrap();
        tape.backward(loss).unwrap()
    };
    let eval = |store: &ParamStore<f64>| {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape).unwrap();
        tape.value(loss).item()
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).value.len();
        for i in 0..n {
            let a = grads.get(id).map(|g| g.data()[i]).unwrap_or(0.0);
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let num = (plus - minus) / (2.0 * h);
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
    }
    worst
}

/// Contracts `v` with a fixed pseudo-random tensor so every output entry
/// gets a distinct upstream gradient.
pub fn probe(tape: &mut Tape<'_, f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let mut r = rng::stream(seed, &[7]);
    let w = tape.constant(random_tensor(&mut r, &shape, 1.0));
    let m = tape.mul(v, w)?;
    Ok(tape.sum(m))
}

/// Best EOS-terminated sequence of at most `max_len` tokens (EOS included)
/// by brute-force teacher-forced scoring. Ties go to the lexicographically
/// smaller sequence.
pub fn exhaustive_best(
    model: &lookahead_nmt::Model<f64>,
    source: &[usize],
    max_len: usize,
) -> (Vec<usize>, f64) {
    use lookahead_nmt::data::EOS;
    let vocab = model.config().target_vocab_size;
    let content: Vec<usize> = (0..vocab).filter(|&t| t != EOS).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for prefix in &frontier {
            let mut seq = prefix.clone();
            seq.push(EOS);
            let s = model.score(source, &seq).unwrap();
            let better = match &best {
                None => true,
                Some((b, bs)) => s > *bs || (s == *bs && seq < *b),
            };
            if better {
                best = Some((seq, s));
            }
            for &t in &content {
                let mut p = prefix.clone();
                p.push(t);
                next.push(p);
            }
        }
        frontier = next;
    }
    best.unwrap()
}

/// Zero model whose output always puts (numerically) all mass on `token`.
pub fn forced_model(mode: AttentionMode, vocab: usize, token: usize) -> lookahead_nmt::Model<f64> {
    let mut m = lookahead_nmt::Model::<f64>::zeros(tiny(mode, vocab, 4, (1, 1))).unwrap();
    for name in ["att.b", "att.b2"] {
        if let Some(b) = m.param_mut(name) {
            b.fill(1.0);
        }
    }
    let ws = m.param_mut("out.ws").unwrap();
    let h = ws.shape()[1];
    for c in 0..h {
        ws.data_mut()[token * h + c] = 1e4;
    }
    m
}
