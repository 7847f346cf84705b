//! Exact reverse-mode hyper-gradients against finite differences of the
//! whole inner procedure.

use autoselect::metaselect::toys::{lsq_fixture, oracle_suite, OracleOptions};
use autoselect::metaselect::{exact_hypergrad, fd_hypergrad_plan, AdjointMode};

fn main() -> anyhow::Result<()> {
    for r in oracle_suite(1, &OracleOptions::default())? {
        println!(
            "{:<26} params {:>4}  steps {:>2}  gap {:.2e}  {}",
            r.name,
            r.params,
            r.steps,
            r.gap,
            if r.pass { "pass" } else { "FAIL" }
        );
    }

    let fx = lsq_fixture(1, 1, 1);
    let exact = exact_hypergrad(&fx.plan(), &fx.start, &fx.weights, AdjointMode::Full)?;
    let hand = fx.problem.closed_form_hypergrad(fx.weights.weights(), fx.eta_pretrain, fx.eta_finetune);
    println!("least squares, exact      {:?}", exact.g_lambda.unwrap_or_default());
    println!("least squares, by hand    {hand:?}");
    let fd = fd_hypergrad_plan(&fx.plan(), &fx.start, &fx.weights, 1e-4)?;
    println!("logits, exact             {:?}", exact.g_logits);
    println!("logits, finite difference {:?}", fd.g_logits);
    Ok(())
}
