//! Central finite-difference gradient checking.
//!
//! The analytic side runs in `f32` through [`Graph::backward`]. The numeric
//! side only ever evaluates the forward pass, re-run in `f64`, so it shares no
//! code with the backward rules it verifies.

use super::{Graph, Real, Result, Tensor, Var};

/// A scalar function of several tensors, expressible on any [`Real`].
pub trait ScalarFn {
    fn eval<T: Real>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-coordinate relative error among smooth coordinates.
    pub max_rel_error: f64,
    /// `(input, element)` where `max_rel_error` occurred.
    pub worst: (usize, usize),
    pub checked: usize,
    /// Coordinates where the step straddled a kink (central differences at
    /// `h` and `h/2` disagree), excluded from `max_rel_error`.
    pub nonsmooth: usize,
}

fn eval_f64<F: ScalarFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = f.eval(&mut g, &vars)?;
    Ok(g.scalar(out))
}

fn central<F: ScalarFn>(f: &F, inputs: &mut [Tensor<f64>], i: usize, j: usize, h: f64) -> Result<f64> {
    let x0 = inputs[i].data()[j];
    inputs[i].data_mut()[j] = x0 + h;
    let up = eval_f64(f, inputs)?;
    inputs[i].data_mut()[j] = x0 - h;
    let down = eval_f64(f, inputs)?;
    inputs[i].data_mut()[j] = x0;
    Ok((up - down) / (2.0 * h))
}

/// Analytic `f32` gradients of `f` w.r.t. every input whose tensor
/// requires grad.
pub fn analytic_gradients<F: ScalarFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Option<Vec<f64>>>> {
    let mut g = Graph::<f32>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(&t.cast::<f32>())).collect();
    let out = f.eval(&mut g, &vars)?;
    g.backward(out)?;
    Ok(inputs
        .iter()
        .zip(&vars)
        .map(|(t, v)| {
            t.requires_grad()
                .then(|| g.grad(*v).map(|gr| gr.iter().map(|x| x.as_f64()).collect()).unwrap_or_else(|| vec![0.0; t.numel()]))
        })
        .collect())
}

/// Compares analytic gradients with central differences of step `h`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)` where
/// `floor = 1e-3 * max|n|` over all checked coordinates (plus `1e-8`), so
/// coordinates that are tiny compared to the gradient's scale are judged
/// against that scale rather than against `f32` round-off.
pub fn check_gradients<F: ScalarFn>(f: &F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport> {
    let analytic = analytic_gradients(f, inputs)?;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut pairs = Vec::new();
    let mut nonsmooth = 0;
    for (i, a) in analytic.iter().enumerate() {
        let Some(a) = a else { continue };
        for (j, &av) in a.iter().enumerate() {
            let n1 = central(f, &mut work, i, j, h)?;
            let n2 = central(f, &mut work, i, j, h / 2.0)?;
            let scale = n1.abs().max(n2.abs()).max(1e-6);
            if (n1 - n2).abs() > 1e-2 * scale {
                nonsmooth += 1;
                continue;
            }
            pairs.push(((i, j), av, n1));
        }
    }
    let floor = 1e-3 * pairs.iter().map(|p| p.2.abs()).fold(0.0, f64::max) + 1e-8;
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked: pairs.len(), nonsmooth };
    for (at, a, n) in pairs {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = at;
        }
    }
    Ok(report)
}
