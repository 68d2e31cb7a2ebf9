//! Reverse-mode gradients validated against central finite differences on
//! a small composite graph.
//!
//! Run with `cargo run --example gradient_check`.

use toxpipe::tensor::gradcheck::{finite_difference_grads, relative_error};
use toxpipe::tensor::{ParamRegistry, Tape, TensorData, TensorError};

fn main() {
    let mut registry = ParamRegistry::new();
    let w = registry
        .register(
            "head",
            "w",
            vec![3, 2],
            vec![0.4, -0.7, 0.2, 0.9, -0.3, 0.5],
        )
        .unwrap();
    let b = registry
        .register("head", "b", vec![2], vec![0.1, -0.2])
        .unwrap();

    // loss = bce(sigmoid(x W + b), labels) for a fixed 2x3 input.
    let forward = |registry: &ParamRegistry| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let wv = tape.param(registry, w, true);
        let bv = tape.param(registry, b, true);
        let x = tape.constant(TensorData::new(
            vec![2, 3],
            vec![1.0, -0.5, 0.25, -1.5, 0.75, 0.5],
        )?);
        let logits = tape.matmul(x, wv)?;
        let logits = tape.add_bias(logits, bv)?;
        let flat = tape.reshape(logits, vec![4])?;
        let probs = tape.sigmoid(flat);
        let loss = tape.bce_loss(probs, &[1.0, 0.0, 0.0, 1.0])?;
        Ok(tape.value(loss)[0])
    };

    // Analytic gradients from one recorded forward pass.
    let mut tape = Tape::new();
    let wv = tape.param(&registry, w, true);
    let bv = tape.param(&registry, b, true);
    let x =
        tape.constant(TensorData::new(vec![2, 3], vec![1.0, -0.5, 0.25, -1.5, 0.75, 0.5]).unwrap());
    let logits = tape.matmul(x, wv).unwrap();
    let logits = tape.add_bias(logits, bv).unwrap();
    let flat = tape.reshape(logits, vec![4]).unwrap();
    let probs = tape.sigmoid(flat);
    let loss = tape.bce_loss(probs, &[1.0, 0.0, 0.0, 1.0]).unwrap();
    tape.backward(loss).unwrap();
    println!("loss = {:.6}\n", tape.value(loss)[0]);

    let analytic_w = tape.grad(wv).unwrap().to_vec();
    let analytic_b = tape.grad(bv).unwrap().to_vec();
    drop(tape);

    for (name, index, analytic) in [("w", w, analytic_w), ("b", b, analytic_b)] {
        let numeric = finite_difference_grads(&mut registry, index, 1e-4, forward).unwrap();
        println!("parameter {name}:");
        let mut worst = 0.0f64;
        for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            let err = relative_error(a, n);
            worst = worst.max(err);
            println!("  [{i}] analytic {a:+.8}  numeric {n:+.8}  rel err {err:.2e}");
        }
        println!("  worst relative error {worst:.2e}\n");
        assert!(worst < 1e-6);
    }
    println!("analytic and finite-difference gradients agree");
}
