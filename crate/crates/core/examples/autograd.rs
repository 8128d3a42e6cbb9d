//! Builds a small expression on the tape, runs the backward pass and checks
//! the result against central differences.

use rafcn::tensor::grad_check;
use rafcn::{Graph, Result, Tensor};

fn main() -> Result<()> {
    let mut g = Graph::new();
    let a = g.param(Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0])?);
    let b = g.param(Tensor::new(&[3, 2], vec![0.5, 1.0, -1.0, 2.0, 0.25, -0.5])?);

    // loss = Σ relu(a·b) · 0.5
    let ab = g.matmul(a, b)?;
    let r = g.relu(ab)?;
    let s = g.sum(r)?;
    let loss = g.scale(s, 0.5)?;
    g.backward(loss)?;

    println!("a·b    = {:?}", g.value(ab).data());
    println!("loss   = {}", g.value(loss).item());
    println!("∂/∂a   = {:?}", g.grad(a).unwrap());
    println!("∂/∂b   = {:?}", g.grad(b).unwrap());

    let b_val = g.value(b).clone();
    let check = grad_check(
        |g, x| {
            let b = g.constant(b_val.clone());
            let ab = g.matmul(x, b)?;
            let r = g.relu(ab)?;
            let s = g.sum(r)?;
            g.scale(s, 0.5)
        },
        g.value(a),
        1e-6,
        None,
    )?;
    println!("finite-difference check on a: max relative error {:.2e}", check.max_rel_error);
    Ok(())
}
