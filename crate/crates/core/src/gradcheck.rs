//! Central-difference verification of tape gradients.
//!
//! Checks run at 64-bit precision; finite differences are unreliable at
//! 32-bit.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Result;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (leaf index, flat coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Compares backward() gradients of a scalar expression against central
/// differences `(f(x+h) - f(x-h)) / (2h)` per coordinate of every leaf.
///
/// Relative error uses denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<B>(leaves: &[Tensor<f64>], h: f64, tol: f64, build: B) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            tape.leaf(&t)
        })
        .collect::<Result<_>>()?;
    let root = build(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed
            .iter()
            .map(|t| tape.leaf(t))
            .collect::<Result<_>>()?;
        let root = build(&mut tape, &vars)?;
        Ok(tape.item(root))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        tol,
    };
    let mut work: Vec<Tensor<f64>> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .wrt(vars[li])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for ci in 0..leaf.numel() {
            let orig = work[li].data()[ci];
            work[li].data_mut()[ci] = orig + h;
            let fp = eval(&work)?;
            work[li].data_mut()[ci] = orig - h;
            let fm = eval(&work)?;
            work[li].data_mut()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let denom = analytic[ci].abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic[ci] - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (li, ci);
                report.analytic = analytic[ci];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
