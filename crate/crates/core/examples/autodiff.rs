//! Reverse-mode gradients on a small expression, checked against finite
//! differences, followed by the full primitive suite.

use autoselect::numcore::{fd_grad5, max_rel_error, value_and_grad, Tape, Tensor, Var};
use autoselect::seqmodel::gradient_suite;

fn main() -> anyhow::Result<()> {
    // f(W, x) = sum(tanh(x W))^2
    let f = |t: &mut Tape, p: &[Var]| {
        let h = t.matmul(p[1], p[0]);
        let h = t.tanh(h);
        let s = t.sum(h);
        t.square(s)
    };
    let w = Tensor::matrix(3, 2, vec![0.1, -0.4, 0.7, 0.2, -0.3, 0.5])?;
    let x = Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5])?;
    let params = [w, x];
    let (value, grads) = value_and_grad(&f, &params)?;
    let fd = fd_grad5(&f, &params, 1e-3)?;
    println!("f = {value:.6}");
    println!("dW = {:?}", grads[0].data());
    println!("max relative error vs finite differences: {:.2e}", max_rel_error(&grads, &fd));

    for r in gradient_suite(5)? {
        println!("{:<22} {:.2e} {}", r.name, r.max_rel, if r.pass { "ok" } else { "FAIL" });
    }
    Ok(())
}
