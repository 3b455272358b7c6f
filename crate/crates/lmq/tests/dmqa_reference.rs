//! The optimized attention forward pass against an independently written
//! dense loop implementation, across a grid of shapes, query counts, and
//! reduction kernels.

mod common;

use common::{dmqa_dense_reference, seeded_arr};
use lmq::mqformer::Dmqa;
use lmq::params::{Fwd, ParamStore, StateStore};
use lmq::tape::Tape;
use ndarray::Ix4;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

struct Case {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    n_q: usize,
    mask: bool,
}

const CASES: [Case; 12] = [
    Case { n: 1, c: 2, h: 4, w: 4, k: 2, n_q: 1, mask: true },
    Case { n: 2, c: 3, h: 8, w: 8, k: 2, n_q: 4, mask: true },
    Case { n: 1, c: 4, h: 8, w: 8, k: 4, n_q: 2, mask: false },
    Case { n: 2, c: 2, h: 6, w: 4, k: 2, n_q: 3, mask: true },
    Case { n: 1, c: 3, h: 12, w: 8, k: 4, n_q: 6, mask: false },
    Case { n: 1, c: 2, h: 4, w: 8, k: 2, n_q: 0, mask: true },
    Case { n: 2, c: 4, h: 8, w: 4, k: 4, n_q: 0, mask: false },
    Case { n: 1, c: 5, h: 10, w: 10, k: 2, n_q: 5, mask: true },
    Case { n: 3, c: 2, h: 4, w: 4, k: 2, n_q: 8, mask: true },
    Case { n: 1, c: 8, h: 16, w: 16, k: 4, n_q: 4, mask: true },
    Case { n: 1, c: 3, h: 6, w: 6, k: 3, n_q: 2, mask: true },
    Case { n: 2, c: 6, h: 12, w: 12, k: 3, n_q: 9, mask: false },
];

#[test]
fn optimized_attention_matches_dense_loops() {
    for (i, case) in CASES.iter().enumerate() {
        let Case { n, c, h, w, k, n_q, mask } = *case;
        let mut ps = ParamStore::default();
        let mut rng = ChaCha12Rng::seed_from_u64(900 + i as u64);
        let block = Dmqa::new(&mut ps, &mut rng, "dmqa", c, n_q, k);

        let x = seeded_arr(&[n, c, h, w], 1000 + i as u64);
        let m = mask.then(|| seeded_arr(&[n, c, h, w], 2000 + i as u64));

        let out = {
            let tape = Tape::new();
            let st = StateStore::default();
            let fw = Fwd::eval(&tape, &ps, &st);
            let xv = tape.leaf(x.clone());
            let mv = m.as_ref().map(|a| tape.leaf(a.clone()));
            block.forward(&fw, xv, mv).unwrap().value()
        };

        let x4 = x.into_dimensionality::<Ix4>().unwrap();
        let m4 = m.map(|a| a.into_dimensionality::<Ix4>().unwrap());
        let reference = dmqa_dense_reference(&x4, m4.as_ref(), &ps, "dmqa", n_q, k);

        let diff = (&out - &reference.into_dyn())
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        println!(
            "case {i}: n={n} c={c} {h}x{w} k={k} n_q={n_q} mask={mask} -> max abs diff {diff:.3e}"
        );
        assert!(diff <= 1e-5, "case {i} diverged: {diff:.3e}");
    }
}
