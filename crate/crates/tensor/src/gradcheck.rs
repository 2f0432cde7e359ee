//! Central finite-difference verification of graph gradients.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which parameter coordinates to probe.
#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// Up to `per_tensor` coordinates per tensor, chosen with `seed`.
    Sampled { per_tensor: usize, seed: u64 },
}

/// Central difference formula.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, truncation error `O(h^2)`.
    TwoPoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, truncation error
    /// `O(h^4)`. Allows a larger `h`, so round-off in `f` costs less.
    FourPoint,
    /// Two-point first; coordinates that disagree by more than `tol` are
    /// measured again with the four-point stencil at step `wide`, whose
    /// estimate then stands. Keeps the cost near two evaluations per
    /// coordinate while tiny gradients are judged against a sharper oracle.
    Refined { tol: f64, wide: f64 },
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)` over probed coordinates.
    pub max_rel_err: f64,
    /// `(tensor index, flat coordinate)` attaining the maximum.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<E, F>(f: &F, params: &[Tensor<E>]) -> Result<f64>
where
    E: Element,
    F: for<'g> Fn(&'g Graph<E>, &[Var<'g, E>]) -> Result<Var<'g, E>>,
{
    let g = Graph::new();
    let vars: Vec<_> = params.iter().map(|p| g.constant(p.clone())).collect();
    Ok(f(&g, &vars)?.value().item().as_f64())
}

/// Compare autodiff gradients of the scalar `f(params)` against two-point
/// central differences with step `eps`.
pub fn grad_check<E, F>(f: F, params: &[Tensor<E>], coords: Coords, eps: f64) -> Result<GradCheckReport>
where
    E: Element,
    F: for<'g> Fn(&'g Graph<E>, &[Var<'g, E>]) -> Result<Var<'g, E>>,
{
    grad_check_with(f, params, coords, eps, Stencil::TwoPoint)
}

pub fn grad_check_with<E, F>(f: F, params: &[Tensor<E>], coords: Coords, eps: f64, stencil: Stencil) -> Result<GradCheckReport>
where
    E: Element,
    F: for<'g> Fn(&'g Graph<E>, &[Var<'g, E>]) -> Result<Var<'g, E>>,
{
    let first = eval(&f, params)?;
    let second = eval(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let analytic: Vec<Tensor<E>> = {
        let g = Graph::new();
        let vars: Vec<_> = params.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter()
            .zip(params)
            .map(|(v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect()
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0 };
    let mut picker = match coords {
        Coords::Sampled { seed, .. } => Some(Rng::new(seed)),
        Coords::All => None,
    };
    let mut probe = params.to_vec();
    for ti in 0..params.len() {
        let n = params[ti].numel();
        let indices: Vec<usize> = match (coords, picker.as_mut()) {
            (Coords::Sampled { per_tensor, .. }, Some(rng)) if per_tensor < n => {
                (0..per_tensor).map(|_| rng.below(n as u64) as usize).collect()
            }
            _ => (0..n).collect(),
        };
        for idx in indices {
            let base = params[ti].data()[idx];
            let mut at = |k: f64| {
                probe[ti].data_mut()[idx] = base + E::from_f64_lossy(k);
                eval(&f, &probe)
            };
            let a = analytic[ti].data()[idx].as_f64();
            let two = |at: &mut dyn FnMut(f64) -> Result<f64>, h: f64| Ok::<_, TensorError>((at(h)? - at(-h)?) / (2.0 * h));
            let four = |at: &mut dyn FnMut(f64) -> Result<f64>, h: f64| {
                Ok::<_, TensorError>((8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h))
            };
            let numeric = match stencil {
                Stencil::TwoPoint => two(&mut at, eps)?,
                Stencil::FourPoint => four(&mut at, eps)?,
                Stencil::Refined { tol, wide } => {
                    let n = two(&mut at, eps)?;
                    if relative_error(a, n) > tol { four(&mut at, wide)? } else { n }
                }
            };
            probe[ti].data_mut()[idx] = base;
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((ti, idx));
            }
        }
    }
    Ok(report)
}
