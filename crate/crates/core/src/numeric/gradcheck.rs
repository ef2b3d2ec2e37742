//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::Result;

/// A scalar function of a list of tensors, evaluable at any precision.
pub trait ScalarFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, params: &[Var]) -> Result<Var>;
}

impl<F> ScalarFn for F
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    // Plain closures only run in 64-bit; use a dedicated type for 32-bit checks.
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, params: &[Var]) -> Result<Var> {
        let any: &mut dyn std::any::Any = g;
        let g64 = any
            .downcast_mut::<Graph<f64>>()
            .expect("closure gradient checks are 64-bit only");
        self(g64, params)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub eps: f64,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    pub floor: f64,
    /// Cap on probed entries per parameter (evenly strided); `None` probes all.
    pub max_entries: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-3,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (parameter, flat entry) of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub probes: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss<F: ScalarFn>(f: &F, params: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let loss = f.eval(&mut g, &vars)?;
    Ok(g.scalar_value(loss))
}

fn probe_indices(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < n => {
            let stride = n as f64 / c as f64;
            (0..c).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..n).collect(),
    }
}

impl GradCheck {
    /// Compare gradients computed at precision `T` with 64-bit central
    /// differences of the same function.
    pub fn run<T: Scalar, F: ScalarFn>(&self, f: &F, params: &[Tensor<f64>]) -> Result<GradCheckReport> {
        let mut g = Graph::<T>::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.cast())).collect();
        let loss = f.eval(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.wrt(v)).collect();
        drop(g);

        let mut report = GradCheckReport::default();
        let mut work: Vec<Tensor<f64>> = params.to_vec();
        for (pi, p) in params.iter().enumerate() {
            for ei in probe_indices(p.numel(), self.max_entries) {
                let mut data = p.data().to_vec();
                data[ei] = p.data()[ei] + self.eps;
                work[pi] = Tensor::new(p.shape(), data.clone())?;
                let plus = eval_loss(f, &work)?;
                data[ei] = p.data()[ei] - self.eps;
                work[pi] = Tensor::new(p.shape(), data)?;
                let minus = eval_loss(f, &work)?;
                work[pi] = p.clone();

                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = analytic[pi].data()[ei].f64();
                let r = rel_err(a, numeric, self.floor);
                report.probes += 1;
                report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
                if r > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = r;
                    report.worst = Some((pi, ei));
                }
            }
        }
        Ok(report)
    }
}
