//! Central finite-difference verification of [`Graph::backward`].

use crate::error::{Result, TensorError};

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms, since their
/// relative error is dominated by rounding in the difference quotient.
pub const RELATIVE_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many evenly spaced elements of each input.
    pub max_elements: Option<usize>,
}

impl GradCheckOptions {
    pub fn new(step: f64, tolerance: f64) -> Self {
        Self {
            step,
            tolerance,
            max_elements: None,
        }
    }

    pub fn with_max_elements(mut self, n: usize) -> Self {
        self.max_elements = Some(n);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements whose ±step evaluations landed on a different smooth piece
    /// than the base point (a kink lies inside the stencil).
    pub excluded: usize,
    /// Flat index of the element with the largest error.
    pub worst_element: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn excluded(&self) -> usize {
        self.params.iter().map(|p| p.excluded).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares backward against central differences for the scalar function
/// built by `f` from `inputs`, each registered as a parameter leaf.
pub fn grad_check<F, E>(
    inputs: &[Tensor],
    f: F,
    opts: &GradCheckOptions,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    if !(opts.step > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            msg: format!("step must be positive, got {}", opts.step),
        }
        .into());
    }
    let eval = |values: &[Tensor]| -> std::result::Result<(f64, Vec<u64>), E> {
        let mut g = Graph::new();
        let vars = values
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut g, &vars)?;
        let value = g.try_value(loss)?.item()?;
        Ok((value, g.branch_signature()))
    };

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let base_sig = g.branch_signature();

    let mut values: Vec<Tensor> = inputs.to_vec();
    let mut params = Vec::with_capacity(inputs.len());
    for (p, &var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, var);
        let n = inputs[p].len();
        let stride = match opts.max_elements {
            Some(m) if m > 0 && m < n => n.div_ceil(m),
            _ => 1,
        };
        let mut check = ParamCheck {
            max_rel_error: 0.0,
            checked: 0,
            excluded: 0,
            worst_element: None,
        };
        for e in (0..n).step_by(stride) {
            let orig = inputs[p].data()[e];
            values[p].data_mut()[e] = orig + opts.step;
            let (up, sig_up) = eval(&values)?;
            values[p].data_mut()[e] = orig - opts.step;
            let (down, sig_down) = eval(&values)?;
            values[p].data_mut()[e] = orig;
            if sig_up != base_sig || sig_down != base_sig {
                check.excluded += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * opts.step);
            let err = relative_error(analytic.data()[e], numeric);
            check.checked += 1;
            if err > check.max_rel_error || check.worst_element.is_none() {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst_element = Some(e);
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        params,
        tolerance: opts.tolerance,
    })
}
