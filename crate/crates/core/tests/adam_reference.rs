use omtl_core::tensor::{AdamState, DenseTensor, Gradients, ParamStore, Tape};

// plain scalar Adam, written out longhand
fn reference(w0: f64, steps: usize) -> Vec<f64> {
    let (lr, b1, b2, eps) = (0.001, 0.9, 0.999, 1e-8);
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    let mut out = Vec::new();
    for t in 1..=steps {
        let g = 2.0 * w;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t as i32));
        let vhat = v / (1.0 - b2.powi(t as i32));
        w -= lr * mhat / (vhat.sqrt() + eps);
        out.push(w);
    }
    out
}

fn square_grad(store: &ParamStore) -> Gradients {
    let id = store.id("w").unwrap();
    let mut tape = Tape::new();
    let w = tape.param(store, id);
    let sq = tape.matmul(w, w).unwrap();
    let loss = tape.sum_all(sq);
    tape.backward(loss, store).unwrap()
}

#[test]
fn twenty_steps_on_a_parabola() {
    let mut store = ParamStore::new();
    let id = store.insert("w", DenseTensor::scalar(1.0)).unwrap();
    let mut adam = AdamState::with_defaults(&store);
    let expect = reference(1.0, 20);
    for (t, want) in expect.iter().enumerate() {
        let grads = square_grad(&store);
        adam.step(&mut store, &grads, |_| true).unwrap();
        let got = store.get(id).values()[0];
        assert!((got - want).abs() < 1e-12, "step {}: {got} vs {want}", t + 1);
    }
    assert_eq!(adam.step_count(), 20);
}
