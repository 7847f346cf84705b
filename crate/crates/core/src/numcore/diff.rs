//! Gradients, central-difference estimates and Hessian-vector products for
//! scalar functions written against the [`Tape`] API.

use crate::error::{Error, Result};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;

/// Records `f` on a fresh tape and returns its value.
pub fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.check_finite()?;
    Ok(tape.scalar(out))
}

/// Value and reverse-mode gradient of `f` at `params`.
pub fn value_and_grad<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out, &vars)?;
    Ok((tape.scalar(out), grads))
}

pub fn grad<F>(f: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    value_and_grad(f, params).map(|(_, g)| g)
}

/// Central difference `(f(p + h e_i) - f(p - h e_i)) / 2h` for every coordinate.
///
/// At a kink such as `|x|` at 0 the symmetric difference returns 0, which is
/// one valid subgradient but not a derivative.
pub fn fd_grad<F>(f: &F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut g = Tensor::zeros(params[t].shape());
        for i in 0..params[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let up = eval(f, &work)?;
            work[t].data_mut()[i] = orig - h;
            let down = eval(f, &work)?;
            work[t].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Five-point central stencil
/// `(-f(p + 2h) + 8 f(p + h) - 8 f(p - h) + f(p - 2h)) / 12h` per coordinate,
/// with truncation error of order `h^4`.
pub fn fd_grad5<F>(f: &F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut g = Tensor::zeros(params[t].shape());
        for i in 0..params[t].len() {
            let orig = work[t].data()[i];
            let mut at = |d: f64| -> Result<f64> {
                work[t].data_mut()[i] = orig + d;
                eval(f, &work)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            work[t].data_mut()[i] = orig;
            g.data_mut()[i] = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Default difference step for [`hvp`]: `1e-5 * (1 + |p|_inf)`.
pub fn hvp_step(params: &[Tensor]) -> f64 {
    let norm = params.iter().map(Tensor::norm_inf).fold(0.0, f64::max);
    1e-5 * (1.0 + norm)
}

/// Hessian-vector product by central differences of exact gradients,
/// `(grad(p + s v) - grad(p - s v)) / 2s`.
///
/// The displacement `s v` has infinity norm [`hvp_step`], so the result
/// does not depend on how `v` is scaled beyond linearity.
pub fn hvp<F>(f: &F, params: &[Tensor], v: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    if params.len() != v.len() || params.iter().zip(v).any(|(p, d)| p.shape() != d.shape()) {
        return Err(Error::Shape("hvp direction must match parameter shapes".into()));
    }
    let vnorm = v.iter().map(Tensor::norm_inf).fold(0.0, f64::max);
    if vnorm == 0.0 {
        return Ok(params.iter().map(|p| Tensor::zeros(p.shape())).collect());
    }
    let s = hvp_step(params) / vnorm;
    let shifted = |sign: f64| -> Vec<Tensor> {
        params
            .iter()
            .zip(v)
            .map(|(p, d)| {
                let mut q = p.clone();
                q.axpy(sign * s, d);
                q
            })
            .collect()
    };
    let up = grad(f, &shifted(1.0))?;
    let down = grad(f, &shifted(-1.0))?;
    Ok(up
        .iter()
        .zip(&down)
        .map(|(a, b)| a.zip_map(b, |x, y| (x - y) / (2.0 * s)))
        .collect())
}

/// Largest entry-wise relative error `|a-b| / max(|a|, |b|, 1e-8)`.
pub fn max_rel_error(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(t: &mut Tape, v: &[Var]) -> Var {
        let sq = t.mul(v[0], v[0]);
        let c = t.mul(sq, v[0]);
        t.sum(c)
    }

    #[test]
    fn fd_of_cube() {
        let g = fd_grad(&cube, &[Tensor::vector(vec![2.0])], 1e-5).unwrap();
        assert!((g[0].item() - 12.0).abs() < 1e-6);
    }

    #[test]
    fn fd_of_abs_at_kink_is_zero() {
        // |x| as x * sign(x), with the sign taken from the evaluation point
        let abs = |t: &mut Tape, v: &[Var]| {
            let x = t.value(v[0]).item();
            let s = t.constant(Tensor::vector(vec![if x >= 0.0 { 1.0 } else { -1.0 }]));
            let y = t.mul(v[0], s);
            t.sum(y)
        };
        let g = fd_grad(&abs, &[Tensor::vector(vec![0.0])], 1e-5).unwrap();
        assert_eq!(g[0].item(), 0.0);
    }

    #[test]
    fn five_point_stencil_is_exact_on_quartics() {
        let quartic = |t: &mut Tape, v: &[Var]| {
            let sq = t.square(v[0]);
            let q = t.square(sq);
            t.sum(q)
        };
        let g = fd_grad5(&quartic, &[Tensor::vector(vec![1.5])], 1e-2).unwrap();
        assert!((g[0].item() - 4.0 * 1.5f64.powi(3)).abs() < 1e-10);
    }

    #[test]
    fn fd_rejects_nonpositive_step() {
        assert!(fd_grad(&cube, &[Tensor::vector(vec![1.0])], 0.0).is_err());
    }

    fn quad(a: Tensor) -> impl Fn(&mut Tape, &[Var]) -> Var {
        move |t: &mut Tape, v: &[Var]| {
            // ½ xᵀAx as ½ sum(x ⊙ Ax)
            let ac = t.constant(a.clone());
            let ax = t.matmul(ac, v[0]);
            let prod = t.mul(ax, v[0]);
            let s = t.sum(prod);
            t.scale(s, 0.5)
        }
    }

    #[test]
    fn hvp_of_diagonal_quadratic() {
        let a = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        let f = quad(a);
        let x = Tensor::matrix(2, 1, vec![0.3, -0.7]).unwrap();
        let v = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let hv = hvp(&f, &[x.clone()], &[v]).unwrap();
        assert!((hv[0].data()[0] - 2.0).abs() < 1e-6);
        assert!((hv[0].data()[1] - 4.0).abs() < 1e-6);
        let zero = hvp(&f, &[x], &[Tensor::zeros(&[2, 1])]).unwrap();
        assert_eq!(zero[0].data(), &[0.0, 0.0]);
    }
}
