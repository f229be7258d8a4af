use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error per tensor.
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub index: usize,
    /// `max|analytic − numeric| / max(max|analytic|, max|numeric|)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_element: usize,
    /// One-sided differences disagree at some element: the function is not
    /// differentiable there and the reported error is not meaningful.
    pub kink_suspected: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn evaluate<F: Real>(params: &[Tensor<F>], f: &mut impl FnMut(&mut Graph<F>, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item().as_f64())
}

/// Analytic gradients of `f` with respect to every tensor in `params`.
pub fn analytic_gradients<F: Real>(
    params: &[Tensor<F>],
    mut f: impl FnMut(&mut Graph<F>, &[Var]) -> Result<Var>,
) -> Result<(f64, Vec<Tensor<F>>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let out = vars.iter().zip(params).map(|(&v, p)| grads.wrt(v, p)).collect();
    Ok((g.value(loss).item().as_f64(), out))
}

/// Compares analytic gradients against central finite differences for every
/// element of every parameter tensor.
///
/// `f` builds the loss from parameter variables (given in `params` order).
/// It must be deterministic; this is verified by evaluating it twice.
pub fn grad_check<F: Real>(
    params: &mut [Tensor<F>],
    config: &GradCheckConfig,
    mut f: impl FnMut(&mut Graph<F>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let (base, analytic) = analytic_gradients(params, &mut f)?;
    let again = evaluate(params, &mut f)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "loss evaluated to {base} then {again} on identical parameters"
        )));
    }

    let h = F::lit(config.step);
    let mut tensors = Vec::with_capacity(params.len());
    for index in 0..params.len() {
        let mut max_abs_error = 0.0f64;
        let mut worst_element = 0;
        let mut max_mag = 0.0f64;
        let mut kink_suspected = false;
        for e in 0..params[index].numel() {
            let orig = params[index].data()[e];
            params[index].data_mut()[e] = orig + h;
            let plus = evaluate(params, &mut f)?;
            params[index].data_mut()[e] = orig - h;
            let minus = evaluate(params, &mut f)?;
            params[index].data_mut()[e] = orig;

            let step = config.step;
            let numeric = (plus - minus) / (2.0 * step);
            let forward = (plus - base) / step;
            let backward = (base - minus) / step;
            let gap = (forward - backward).abs();
            if gap > 1e-2 && gap > 0.1 * (forward.abs() + backward.abs()) {
                kink_suspected = true;
            }

            let a = analytic[index].data()[e].as_f64();
            let err = (a - numeric).abs();
            if err > max_abs_error {
                max_abs_error = err;
                worst_element = e;
            }
            max_mag = max_mag.max(a.abs()).max(numeric.abs());
        }
        let max_rel_error = if max_abs_error == 0.0 {
            0.0
        } else {
            max_abs_error / max_mag.max(1e-12)
        };
        tensors.push(TensorCheck {
            index,
            max_rel_error,
            max_abs_error,
            worst_element,
            kink_suspected,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < config.tolerance,
        max_rel_error,
        tensors,
    })
}
