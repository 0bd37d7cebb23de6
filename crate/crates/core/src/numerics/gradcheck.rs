//! Central finite-difference oracle for the differentiation tape.
//!
//! Every check evaluates the forward pass only through fresh tapes, so the
//! numeric estimate never touches the reverse-mode code it is compared to.

use super::param::ParamStore;
use super::rng::Rng;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Step used by the central difference.
pub const FD_STEP: f64 = 1e-5;

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

/// Reduces any output to a scalar with fixed random weights so that every
/// output element contributes to the checked gradient.
pub fn random_projection<'t>(out: &Var<'t>, seed: u64) -> Result<Var<'t>> {
    let shape = out.shape();
    let w = Rng::new(seed).uniform_tensor(&shape, -1.0, 1.0);
    Ok(out.mul(&out.tape.constant(w))?.sum())
}

/// Worst relative error over all `inputs` between the tape gradient and
/// central differences of `f`.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.input(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.input(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        let mut xs = inputs.to_vec();
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[e];
            xs[i].data_mut()[e] = orig + FD_STEP;
            let plus = eval(&xs)?;
            xs[i].data_mut()[e] = orig - FD_STEP;
            let minus = eval(&xs)?;
            xs[i].data_mut()[e] = orig;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Relative error of parameter gradients of `f`, checking at most
/// `max_coords` randomly chosen scalar coordinates (all when `None`).
pub fn check_params<F>(store: &ParamStore, f: F, max_coords: Option<usize>, seed: u64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &'t ParamStore) -> Result<Var<'t>>,
{
    check_params_step(store, f, max_coords, seed, FD_STEP)
}

/// [`check_params`] with central differences of half-width `step`.
pub fn check_params_step<F>(store: &ParamStore, f: F, max_coords: Option<usize>, seed: u64, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &'t ParamStore) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    let grads = tape.backward(loss)?;

    let mut coords: Vec<(usize, usize)> = store
        .iter()
        .flat_map(|(id, p)| (0..p.value.numel()).map(move |e| (id.index(), e)))
        .collect();
    if let Some(m) = max_coords {
        if coords.len() > m {
            Rng::new(seed).shuffle(&mut coords);
            coords.truncate(m);
        }
    }

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut work = store.clone();
    for &(pi, e) in &coords {
        let id = ids[pi];
        analytic.push(grads.param(id).map(|g| g.data()[e]).unwrap_or(0.0));
        let orig = store.value(id).data()[e];
        work.get_mut(id).value.data_mut()[e] = orig + step;
        let plus = f(&Tape::new(), &work)?.value().item();
        work.get_mut(id).value.data_mut()[e] = orig - step;
        let minus = f(&Tape::new(), &work)?.value().item();
        work.get_mut(id).value.data_mut()[e] = orig;
        numeric.push((plus - minus) / (2.0 * step));
    }
    Ok(relative_error(&analytic, &numeric))
}
