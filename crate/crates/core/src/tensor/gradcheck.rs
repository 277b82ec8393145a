//! Central-difference verification of tape gradients (64-bit only).

use super::{Graph, OpKind, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of `|analytic − numeric| / (|analytic| + 1e-8)`
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst entry
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradChecker {
    pub h: f64,
    pub fault: Option<OpKind>,
}

impl Default for GradChecker {
    fn default() -> Self {
        Self { h: 1e-5, fault: None }
    }
}

impl GradChecker {
    pub fn new(h: f64) -> Self {
        Self { h, fault: None }
    }

    fn graph(&self) -> Graph<f64> {
        match self.fault {
            Some(k) => Graph::with_fault_injection(k),
            None => Graph::new(),
        }
    }

    /// Check `f` with respect to every element of every input.
    ///
    /// `f` receives fresh leaves for `inputs` (all requiring grad) and must
    /// return a scalar.
    pub fn check<F>(&self, f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let mut g = self.graph();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        g.backward(loss)?;
        let analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();

        let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            Ok(g.value(out).item())
        };

        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: (0, 0),
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            entries: 0,
        };
        let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
        for (ti, t) in inputs.iter().enumerate() {
            for e in 0..t.numel() {
                let orig = t.data()[e];
                probe[ti].data_mut()[e] = orig + self.h;
                let fp = eval(&probe)?;
                probe[ti].data_mut()[e] = orig - self.h;
                let fm = eval(&probe)?;
                probe[ti].data_mut()[e] = orig;
                let numeric = (fp - fm) / (2.0 * self.h);
                let a = analytic[ti].data()[e];
                let rel = (a - numeric).abs() / (a.abs() + 1e-8);
                report.entries += 1;
                if rel > report.max_rel_error || rel.is_nan() {
                    report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                    report.worst = (ti, e);
                    report.analytic_at_worst = a;
                    report.numeric_at_worst = numeric;
                }
            }
        }
        Ok(report)
    }
}

/// Max relative error of the gradient of `f` at `x` (single input, default step).
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let report = GradChecker::new(h).check(|g, v| f(g, v[0]), std::slice::from_ref(x))?;
    Ok(report.max_rel_error)
}
