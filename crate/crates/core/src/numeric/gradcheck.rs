use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Per-leaf outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct LeafCheck {
    pub leaf: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.max_rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }
}

/// Absolute floor of the relative-error denominator, so entries whose true
/// gradient is zero are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares analytic input gradients of a scalar-valued builder against
/// central differences with step `step`.
///
/// `build` receives a fresh graph and the leaves created for `inputs`; it
/// must return a scalar. A tolerance breach is reported, not raised.
pub fn grad_check<S, F>(build: F, inputs: &[Tensor<S>], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<S>]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &leaves)?;
        g.value(out)
            .item()
            .map(Scalar::as_f64)
            .ok_or_else(|| Error::NonScalarOutput(g.value(out).shape().to_vec()))
    };

    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &leaves)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        leaves: Vec::new(),
        tolerance,
    };
    for (li, &leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(&g, leaf);
        let mut worst = (0.0, 0);
        for idx in 0..inputs[li].len() {
            let perturbed = |delta: f64| -> Result<f64> {
                let mut vals = inputs.to_vec();
                let mut data = vals[li].to_vec();
                data[idx] = S::lit(data[idx].as_f64() + delta);
                vals[li] = Tensor::new(vals[li].shape().to_vec(), data)?;
                eval(&vals)
            };
            let numeric = (perturbed(step)? - perturbed(-step)?) / (2.0 * step);
            let err = relative_error(analytic.data()[idx].as_f64(), numeric);
            if err > worst.0 {
                worst = (err, idx);
            }
        }
        report.leaves.push(LeafCheck {
            leaf: li,
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    Ok(report)
}
