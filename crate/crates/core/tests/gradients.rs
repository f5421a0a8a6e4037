mod common;

use common::{fd_max_error, probe, random_tensor, uniform_init};
use lookahead_nmt::attention::{attend_step, AttentionParams, Memory};
use lookahead_nmt::autodiff::{DropoutCtx, ParamStore};
use lookahead_nmt::recurrent::{decoder_step, encode, DecoderParams, EncoderParams, LstmParams, LstmState};
use lookahead_nmt::rng;
use lookahead_nmt::AttentionMode;

const TOL: f64 = 1e-6;
/// Deeper graphs accumulate more finite-difference noise.
const TOL_COMPOSITE: f64 = 1e-4;

fn store_with(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut r = rng::stream(seed, &[1]);
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.add(*name, random_tensor(&mut r, shape, 1.0)).unwrap();
    }
    s
}

macro_rules! op_case {
    ($name:ident, $shapes:expr, |$tape:ident, $p:ident| $body:expr) => {
        #[test]
        fn $name() {
            let mut store = store_with($shapes, 3);
            let ids: Vec<_> = store.ids().collect();
            let err = fd_max_error(&mut store, |$tape| {
                let $p: Vec<_> = ids.iter().map(|&id| $tape.param(id)).collect();
                let out = $body?;
                probe($tape, out, 11)
            });
            assert!(err < TOL, "max relative error {err:e}");
        }
    };
}

op_case!(matmul_matrix, &[("a", &[3, 4]), ("b", &[4, 2])], |t, p| t.matmul(p[0], p[1]));
op_case!(matmul_vector, &[("a", &[3, 4]), ("x", &[4])], |t, p| t.matmul(p[0], p[1]));
op_case!(transpose, &[("a", &[3, 2])], |t, p| t.transpose(p[0]));
op_case!(add, &[("a", &[5]), ("b", &[5])], |t, p| t.add(p[0], p[1]));
op_case!(mul, &[("a", &[2, 3]), ("b", &[2, 3])], |t, p| t.mul(p[0], p[1]));
op_case!(add_n, &[("a", &[4]), ("b", &[4]), ("c", &[4])], |t, p| t.add_n(&p));
op_case!(scale, &[("a", &[4])], |t, p| Ok::<_, lookahead_nmt::Error>(t.scale(p[0], -2.5)));
op_case!(tanh, &[("a", &[6])], |t, p| Ok::<_, lookahead_nmt::Error>(t.tanh(p[0])));
op_case!(sigmoid, &[("a", &[6])], |t, p| Ok::<_, lookahead_nmt::Error>(t.sigmoid(p[0])));
op_case!(concat, &[("a", &[2]), ("b", &[3])], |t, p| t.concat(&p));
op_case!(stack, &[("a", &[3]), ("b", &[3])], |t, p| t.stack(&p));
op_case!(slice, &[("a", &[7])], |t, p| t.slice(p[0], 2, 3));
op_case!(row, &[("a", &[4, 3])], |t, p| t.row(p[0], 2));
op_case!(softmax, &[("a", &[5])], |t, p| t.softmax(p[0]));
op_case!(log_softmax, &[("a", &[5])], |t, p| t.log_softmax(p[0]));
op_case!(pick_of_log_softmax, &[("a", &[5])], |t, p| {
    let l = t.log_softmax(p[0])?;
    t.pick(l, 3)
});
op_case!(shared_leaf, &[("a", &[4])], |t, p| {
    let again = t.param(t.store().ids().next().unwrap());
    t.mul(p[0], again)
});

#[test]
fn lstm_step_matches_fd() {
    let mut store = ParamStore::new();
    let params = LstmParams::register(&mut store, "l", 3, 4, &mut uniform_init(5, 0.5)).unwrap();
    let mut r = rng::stream(8, &[]);
    let x0 = random_tensor(&mut r, &[3], 1.0);
    let x1 = random_tensor(&mut r, &[3], 1.0);
    let h0 = random_tensor(&mut r, &[4], 0.5);
    let c0 = random_tensor(&mut r, &[4], 0.5);
    let err = fd_max_error(&mut store, |t| {
        let mut s = LstmState::from_values(t, &h0, &c0);
        for x in [&x0, &x1] {
            let xv = t.constant(x.clone());
            s = lookahead_nmt::recurrent::lstm_step(t, &params, xv, s)?;
        }
        let both = t.concat(&[s.hidden, s.cell])?;
        probe(t, both, 2)
    });
    assert!(err < TOL_COMPOSITE, "{err:e}");
}

#[test]
fn encoder_matches_fd() {
    for layers in [1, 3] {
        let mut store = ParamStore::new();
        let enc = EncoderParams::register(&mut store, 6, 3, 4, layers, &mut uniform_init(6, 0.5)).unwrap();
        let err = fd_max_error(&mut store, |t| {
            let out = encode(t, &enc, &[1, 4, 5, 2], &mut DropoutCtx::inference())?;
            let all = t.concat(&out.top)?;
            probe(t, all, 4)
        });
        assert!(err < TOL_COMPOSITE, "layers {layers}: {err:e}");
    }
}

#[test]
fn decoder_steps_match_fd() {
    let mut store = ParamStore::new();
    let dec = DecoderParams::register(&mut store, 3, 4, 2, &mut uniform_init(7, 0.5)).unwrap();
    let mut r = rng::stream(9, &[]);
    let embs: Vec<_> = (0..3).map(|_| random_tensor(&mut r, &[3], 1.0)).collect();
    let feeds: Vec<_> = (0..3).map(|_| random_tensor(&mut r, &[4], 1.0)).collect();
    let err = fd_max_error(&mut store, |t| {
        let mut states: Vec<LstmState> = (0..2).map(|_| LstmState::zeros(t, 4)).collect();
        let mut tops = Vec::new();
        for (e, f) in embs.iter().zip(&feeds) {
            let (ev, fv) = (t.constant(e.clone()), t.constant(f.clone()));
            let (next, top) = decoder_step(t, &dec, &states, ev, fv, &mut DropoutCtx::inference())?;
            states = next;
            tops.push(top);
        }
        let all = t.concat(&tops)?;
        probe(t, all, 6)
    });
    assert!(err < TOL_COMPOSITE, "{err:e}");
}

#[test]
fn attention_modes_match_fd() {
    for mode in AttentionMode::ALL {
        let mut store = ParamStore::new();
        let mut init = uniform_init(10, 0.5);
        let src: Vec<_> = (0..3).map(|i| store.add(format!("h{i}"), init(&[4])).unwrap()).collect();
        let prev: Vec<_> = (0..2).map(|i| store.add(format!("s{i}"), init(&[4])).unwrap()).collect();
        let query = store.add("q", init(&[4])).unwrap();
        let att = AttentionParams::register(&mut store, mode, 4, &mut init).unwrap();
        let err = fd_max_error(&mut store, |t| {
            let hs: Vec<_> = src.iter().map(|&id| t.param(id)).collect();
            let ss: Vec<_> = prev.iter().map(|&id| t.param(id)).collect();
            let q = t.param(query);
            let memory = Memory::new(t, &hs)?;
            let out = attend_step(t, &att, q, &memory, &ss)?;
            probe(t, out.t_final, 12)
        });
        assert!(err < TOL_COMPOSITE, "{mode}: {err:e}");
    }
}
