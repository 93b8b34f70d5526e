//! Central finite-difference oracle for checking reverse-mode gradients.
//!
//! The numeric side only ever evaluates forward passes on constant leaves,
//! so it shares no code path with [`Graph::backward`].

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;

use super::element::{DType, Element};
use super::graph::{Graph, Var};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `max(|a − n| − atol, 0) / max(|a|, |n|)`, zero when both vanish.
    pub fn rel_err(&self, atol: f64) -> f64 {
        let excess = ((self.analytic - self.numeric).abs() - atol).max(0.0);
        if excess == 0.0 {
            return 0.0;
        }
        excess / self.analytic.abs().max(self.numeric.abs())
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    /// Absolute discrepancy attributed to finite-difference rounding.
    pub atol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes
            .iter()
            .map(|p| p.rel_err(self.atol))
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err(self.atol).total_cmp(&b.rel_err(self.atol)))
    }
}

/// Rounding noise of a central difference of a sum whose terms have total
/// magnitude `magnitude`, taken at step `h`: `c · eps · magnitude / h`, with
/// a safety factor `c` of 64 in single precision (where every forward
/// intermediate is rounded) and 4 in double precision.
pub fn rounding_noise<T: Element>(magnitude: f64, h: f64) -> f64 {
    let c = match T::DTYPE {
        DType::F32 => 64.0,
        DType::F64 => 4.0,
    };
    c * T::epsilon().to_f64_lossy() * magnitude / h
}

/// Step `cbrt(eps) · max(1, |x|)`.
pub fn default_step<T: Element>(x: f64) -> f64 {
    T::epsilon().to_f64_lossy().cbrt() * x.abs().max(1.0)
}

/// Smaller step for deep compositions: perturbing one weight moves many
/// pre-activations, and the chance that one of them crosses a leaky ReLU
/// kink grows with the step. Double precision uses `1e-6 · max(1, |x|)`.
pub fn composed_step<T: Element>(x: f64) -> f64 {
    match T::DTYPE {
        DType::F32 => default_step::<T>(x),
        DType::F64 => 1e-6 * x.abs().max(1.0),
    }
}

/// Compares backward against central differences of the scalar
/// `Σ r ⊙ f(inputs)` for a fixed random projection `r`, probing
/// `probes_per_input` random elements of every input. The report's `atol`
/// is [`rounding_noise`] of `Σ|r ⊙ f|` at the unit step.
pub fn check<T, F, R>(
    inputs: &[Tensor<T>],
    f: F,
    probes_per_input: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    check_with_step(inputs, f, probes_per_input, rng, default_step::<T>)
}

pub fn check_with_step<T, F, R>(
    inputs: &[Tensor<T>],
    f: F,
    probes_per_input: usize,
    rng: &mut R,
    step: impl Fn(f64) -> f64,
) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let projection = Tensor::from_fn(g.shape(out), |_| {
        T::from_f64_lossy(rng.random_range(-1.0..1.0))
    });
    let r = g.constant(projection.clone());
    let weighted = g.mul(out, r)?;
    let loss = g.sum(weighted);
    let grads = g.backward(loss)?;

    let magnitude: f64 = g
        .value(out)
        .data()
        .iter()
        .zip(projection.data())
        .map(|(&y, &p)| (y.to_f64_lossy() * p.to_f64_lossy()).abs())
        .sum();
    let atol = rounding_noise::<T>(magnitude, step(1.0));

    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out)
            .data()
            .iter()
            .zip(projection.data())
            .map(|(&y, &p)| y.to_f64_lossy() * p.to_f64_lossy())
            .sum())
    };

    let mut probes = Vec::new();
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("parameter gradient");
        let count = probes_per_input.min(input.len());
        for element in sample(rng, input.len(), count).into_iter() {
            let x0 = input.data()[element];
            let h = step(x0.to_f64_lossy());
            let plus = x0 + T::from_f64_lossy(h);
            let minus = x0 - T::from_f64_lossy(h);
            // the representable step actually taken
            let span = (plus - minus).to_f64_lossy();
            work[i].data_mut()[element] = plus;
            let lp = eval(&work)?;
            work[i].data_mut()[element] = minus;
            let lm = eval(&work)?;
            work[i].data_mut()[element] = x0;
            probes.push(Probe {
                input: i,
                element,
                analytic: analytic.data()[element].to_f64_lossy(),
                numeric: (lp - lm) / span,
            });
        }
    }
    Ok(GradCheckReport { probes, atol })
}
