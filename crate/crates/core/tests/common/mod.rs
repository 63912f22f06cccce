//! Helpers shared by integration test targets.
#![allow(dead_code)]

use gdial::nn::{Grads, Matrix, ModelDims, NodeId, ParamStore, Tape};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;

pub fn small_dims() -> ModelDims {
    ModelDims {
        vocab_size: 11,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
    }
}

/// Worst per-tensor relative error `|a - n| / max(|a|, |n|)` over the store.
pub fn worst_relative_error(store: &ParamStore, loss: impl Fn(&mut Tape) -> NodeId) -> (f64, String) {
    let mut tape = Tape::new(store);
    let l = loss(&mut tape);
    tape.backward(l).unwrap();
    let mut analytic = Grads::zeros_like(store);
    tape.accumulate_into(&mut analytic).unwrap();

    let eval = |s: &ParamStore| {
        let mut t = Tape::new(s);
        let l = loss(&mut t);
        t.value(l).item()
    };
    let mut worst = (0.0, String::new());
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.get(id).len();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + STEP;
            let up = eval(&probe);
            probe.get_mut(id).data_mut()[i] = orig - STEP;
            let down = eval(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * STEP);
        }
        let a = analytic.get(id).data();
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = Matrix::from_vec(1, n, a.to_vec())
            .norm()
            .max(Matrix::from_vec(1, n, numeric.clone()).norm());
        let rel = if scale < 1e-9 { diff } else { diff / scale };
        if rel > worst.0 {
            worst = (rel, store.name(id).to_string());
        }
    }
    worst
}

