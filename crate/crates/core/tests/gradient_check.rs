//! Analytic gradients versus central finite differences for every parameter
//! tensor of small encoder and encoder-decoder models.

mod common;

use common::{small_dims as dims, worst_relative_error, STEP, TOLERANCE};
use gdial::nn::{EncoderModel, Matrix, Pooling, Seq2SeqModel, Tape};

#[test]
fn encoder_gradients_match_finite_differences() {
    for pooling in [Pooling::FirstToken, Pooling::Mean] {
        let model = EncoderModel::new(dims(), pooling, 11);
        let ids = [2usize, 7, 3, 9, 4];
        let probe = Matrix::from_vec(8, 3, (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect());
        let (worst, name) = worst_relative_error(&model.store, |tape| {
            let out = model.encoder.forward(tape, &ids).unwrap();
            let p = tape.input(probe.clone());
            let pooled_logits = tape.matmul(out.pooled, p);
            let state_logits = tape.matmul(out.states, p);
            let a = tape.cross_entropy(pooled_logits, &[1]);
            let b = tape.cross_entropy(state_logits, &[0, 2, 1, 1, 0]);
            tape.sum(&[a, b])
        });
        assert!(worst < TOLERANCE, "{pooling:?}: {name} rel err {worst}");
    }
}

#[test]
fn seq2seq_gradients_match_finite_differences() {
    let model = Seq2SeqModel::new(dims(), 12);
    let (worst, name) = worst_relative_error(&model.store, |tape| {
        // Two passages fused along the token axis, as in fusion-in-decoder.
        let m1 = model.net.encode(tape, &[5, 6, 7]).unwrap();
        let m2 = model.net.encode(tape, &[8, 9]).unwrap();
        let memory = tape.concat_rows(&[m1, m2]);
        let logits = model.net.decode(tape, memory, &[2, 5, 10]).unwrap();
        tape.cross_entropy(logits, &[5, 10, 3])
    });
    assert!(worst < TOLERANCE, "{name} rel err {worst}");
}

#[test]
fn embedding_gradient_matches_finite_differences() {
    let model = EncoderModel::new(dims(), Pooling::FirstToken, 13);
    let ids = [2usize, 4, 6, 8];
    // Column differences must not be constant: LayerNorm outputs sum to zero.
    let probe = Matrix::from_vec(8, 2, (0..16).map(|i| (i as f64 * 1.3).sin()).collect());
    let loss_with = |perturb: Option<Matrix>| {
        let mut tape = Tape::new(&model.store);
        if let Some(p) = perturb {
            tape = tape.with_perturbations(vec![p]);
        }
        let out = model.encoder.forward(&mut tape, &ids).unwrap();
        let p = tape.input(probe.clone());
        let logits = tape.matmul(out.pooled, p);
        let l = tape.cross_entropy(logits, &[1]);
        (tape, l)
    };
    let (mut tape, l) = loss_with(None);
    tape.backward(l).unwrap();
    let g = tape.embedding_gradients().unwrap();
    assert_eq!(g.len(), 1);
    assert_eq!(g[0].shape(), (4, 8));
    let mut numeric = Matrix::zeros(4, 8);
    for r in 0..4 {
        for c in 0..8 {
            let mut up = Matrix::zeros(4, 8);
            up.set(r, c, STEP);
            let mut down = Matrix::zeros(4, 8);
            down.set(r, c, -STEP);
            let (t1, l1) = loss_with(Some(up));
            let (t2, l2) = loss_with(Some(down));
            numeric.set(r, c, (t1.value(l1).item() - t2.value(l2).item()) / (2.0 * STEP));
        }
    }
    let mut diff = g[0].clone();
    diff.add_assign(&numeric.map(|x| -x));
    assert!(numeric.norm() > 1e-6);
    assert!(diff.norm() / numeric.norm() < TOLERANCE);
}

#[test]
fn loss_independent_of_input_has_zero_embedding_gradient() {
    let model = EncoderModel::new(dims(), Pooling::FirstToken, 14);
    let mut tape = Tape::new(&model.store);
    model.encoder.forward(&mut tape, &[3, 4]).unwrap();
    let c = tape.input(Matrix::from_vec(1, 3, vec![0.2, 0.1, 0.7]));
    let l = tape.cross_entropy(c, &[2]);
    tape.backward(l).unwrap();
    let g = tape.embedding_gradients().unwrap();
    assert_eq!(g[0], Matrix::zeros(2, 8));
}
