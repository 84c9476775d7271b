//! Central-difference gradient verification.

use super::graph::{Graph, Mode, Var};
use super::tensor::Tensor;
use crate::error::{bail, Error, Result};
use crate::scalar::Scalar;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error<S: Scalar>(a: S, b: S) -> S {
    let denom = a.abs().max(b.abs()).max(S::of(1e-8));
    (a - b).abs() / denom
}

fn eval_scalar<S, F>(inputs: &[Tensor<S>], mode: Mode, f: &F) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(mode);
    let vars = inputs
        .iter()
        .map(|t| g.input(t.clone(), false))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

/// Finite-difference formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error O(h²).
    #[default]
    Central,
    /// `(f(x-h) - 8f(x-h/2) + 8f(x+h/2) - f(x+h)) / 6h`, error O(h⁴). Allows a
    /// larger `h`, which keeps rounding noise far below tiny or structurally
    /// zero gradients.
    Central4,
}

/// Worst element found by [`grad_check_report`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Input tensor and flat element index of the worst element.
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Maximum relative error between autodiff and central differences over every
/// element of every input. `f` must be deterministic (seed any dropout stream
/// inside it) and return a single-element tensor.
pub fn grad_check_many<S, F>(inputs: &[Tensor<S>], h: f64, mode: Mode, f: F) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    Ok(S::of(grad_check_report(inputs, h, Stencil::Central, mode, f)?.max_rel_err))
}

/// As [`grad_check_many`] with a choice of stencil, also locating the worst
/// element.
pub fn grad_check_report<S, F>(inputs: &[Tensor<S>], h: f64, stencil: Stencil, mode: Mode, f: F) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        bail!(Contract, "finite-difference step {h} outside [1e-7, 1e-3]");
    }
    let mut g = Graph::new(mode);
    let vars = inputs
        .iter()
        .map(|t| g.input(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            g.shape(out)
        )));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor<S>> = vars.iter().map(|&v| g.grad_or_zero(v)).collect();
    drop(g);

    let hs = S::of(h);
    let mut worst = GradCheckReport {
        max_rel_err: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for k in 0..probe[ti].len() {
            let orig = probe[ti].data()[k];
            let mut at = |dx: S| -> Result<S> {
                probe[ti].data_mut()[k] = orig + dx;
                let v = eval_scalar(&probe, mode, &f);
                probe[ti].data_mut()[k] = orig;
                v
            };
            let numeric = match stencil {
                Stencil::Central => (at(hs)? - at(-hs)?) / (hs + hs),
                Stencil::Central4 => {
                    let half = hs / S::of(2.0);
                    (at(-hs)? - S::of(8.0) * at(-half)? + S::of(8.0) * at(half)? - at(hs)?) / (S::of(6.0) * hs)
                }
            };
            let err = relative_error(grad.data()[k], numeric).as_f64();
            if err > worst.max_rel_err {
                worst = GradCheckReport {
                    max_rel_err: err,
                    input: ti,
                    index: k,
                    analytic: grad.data()[k].as_f64(),
                    numeric: numeric.as_f64(),
                };
            }
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<S, F>(x: &Tensor<S>, h: f64, f: F) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    grad_check_many(std::slice::from_ref(x), h, Mode::Eval, |g, v| f(g, v[0]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        // 2^-10 keeps x ± h exactly representable.
        let err = grad_check(&x, 1.0 / 1024.0, |g, v| g.sum(v)).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let mut g = Graph::<f64>::eval();
        let v = g.input(x.clone(), true).unwrap();
        let sq = g.square(v).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap().data(), &[2.0, 4.0]);
        let err = grad_check(&x, 1e-5, |g, v| {
            let s = g.square(v)?;
            g.sum(s)
        })
        .unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn non_scalar_function_is_a_contract_error() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let r = grad_check(&x, 1e-5, |g, v| g.square(v));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        assert!(grad_check(&x, 1e-2, |g, v| g.sum(v)).is_err());
        assert!(grad_check(&x, 1e-9, |g, v| g.sum(v)).is_err());
    }
}
