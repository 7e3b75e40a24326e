//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a - n| / max(1e-8, |a| + |n|)`.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates whose ±step perturbation changed a branch decision.
    pub skipped: usize,
    /// `(input, coordinate)` attaining the maximum.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_relative_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_branch_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vars)?;
    Ok((g.scalar(out), g.branch_signature()))
}

/// Compares reverse-mode gradients of the scalar `f` with respect to every
/// input against the fourth-order central difference
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h` with `h = step`.
/// Coordinates where any of the four evaluations changes a branch decision
/// are skipped.
pub fn grad_check<F>(f_eval: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_branch_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f_eval(&mut g, &vars)?;
    g.backward(out)?;
    let base_sig = g.branch_signature();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    for i in 0..work.len() {
        for (j, &a) in analytic[i].iter().enumerate() {
            let orig = work[i].data()[j];
            let mut f = [0.0; 4];
            let mut crossed = false;
            for (slot, k) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
                work[i].data_mut()[j] = orig + k * step;
                let (v, sig) = evaluate(&f_eval, &work)?;
                f[slot] = v;
                crossed |= sig != base_sig;
            }
            work[i].data_mut()[j] = orig;
            if crossed {
                report.skipped += 1;
                continue;
            }
            let numeric = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * step);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_map_is_exact() {
        let w = t(&[2, 3], &[0.3, -1.2, 0.5, 2.0, 0.1, -0.7]);
        let x = t(&[1, 2], &[0.9, -0.4]);
        let r = grad_check(
            |g, v| {
                let y = g.matmul(v[1], v[0])?;
                g.sum(y, None)
            },
            &[w, x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 8);
    }

    #[test]
    fn sigmoid_chain() {
        let x = t(&[4], &[0.3, -1.1, 2.0, 0.05]);
        let r = grad_check(
            |g, v| {
                let a = g.sigmoid(v[0]);
                let b = g.mul_scalar(a, 3.0);
                let c = g.sigmoid(b);
                let d = g.square(c);
                g.sum(d, None)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn skips_coordinates_across_relu_kink() {
        let x = t(&[3], &[1e-6, 0.5, -0.3]);
        let r = grad_check(
            |g, v| {
                let y = g.relu(v[0]);
                let s = g.square(y);
                g.sum(s, None)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 2);
    }
}
