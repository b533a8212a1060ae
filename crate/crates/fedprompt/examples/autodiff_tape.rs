//! The reverse-mode tape on its own: record a program, differentiate it,
//! and check one gradient against central finite differences.
//!
//! ```text
//! cargo run --example autodiff_tape
//! ```

use fedprompt::rng::{stream_rng, Stream};
use fedprompt::tape::Tape;
use fedprompt::tensor::Tensor;

/// f(w) = sum(softmax(x w) * tanh(x w)) for a fixed input x.
fn program(x: &Tensor, w: &Tensor) -> (Tape, fedprompt::tape::NodeId, fedprompt::tape::NodeId) {
    let mut tape = Tape::new();
    let x = tape.constant(x.clone());
    let w = tape.param(w.clone());
    let h = tape.matmul(x, w);
    let s = tape.softmax_rows(h);
    let t = tape.tanh(h);
    let prod = tape.mul(s, t);
    let out = tape.sum_all(prod);
    (tape, w, out)
}

fn main() -> fedprompt::Result<()> {
    let mut rng = stream_rng(11, Stream::Backbone);
    let x = Tensor::randn(3, 4, 1.0, &mut rng);
    let w = Tensor::randn(4, 5, 0.5, &mut rng);

    let (tape, w_node, out) = program(&x, &w);
    println!("recorded {} tape nodes, f(w) = {:.6}", tape.len(), tape.item(out));

    let grads = tape.backward(out)?;
    let gw = grads.get(w_node).expect("w is trainable");

    // Central differences on every coordinate of w.
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            let mut plus = w.clone();
            plus.set(i, j, w.at(i, j) + eps);
            let mut minus = w.clone();
            minus.set(i, j, w.at(i, j) - eps);
            let (tp, _, op) = program(&x, &plus);
            let (tm, _, om) = program(&x, &minus);
            let fd = (tp.item(op) - tm.item(om)) / (2.0 * eps);
            let ad = gw.at(i, j);
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    println!("worst relative error vs finite differences: {worst:.2e}");
    assert!(worst < 1e-6, "gradients disagree with finite differences");
    println!("backward pass matches finite differences on all {} entries", w.len());
    Ok(())
}
