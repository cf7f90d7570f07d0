//! Central finite-difference gradient checking.

use crate::tensor::Tensor;

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central-difference gradient of `f` at `inputs`, one tensor per input.
pub fn numeric_grad(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Tensor> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = f(&work);
            work[i].data_mut()[j] = orig - h;
            let minus = f(&work);
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
    /// `(input index, element index)` of the worst relative error.
    pub worst: (usize, usize),
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compare `analytic` against central differences of `f`.
///
/// Entries where both gradients are below `floor` in magnitude are compared
/// absolutely against `floor`.
pub fn compare(analytic: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], h: f64, floor: f64) -> GradCheck {
    let numeric = numeric_grad(f, inputs, h);
    let mut res = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, entries: 0, worst: (0, 0) };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        assert_eq!(a.shape(), n.shape(), "gradient shape mismatch for input {i}");
        for (j, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let rel = relative_error(av, nv, floor);
            res.max_abs_error = res.max_abs_error.max((av - nv).abs());
            if rel > res.max_rel_error || rel.is_nan() {
                res.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                res.worst = (i, j);
            }
            res.entries += 1;
        }
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let f = |x: &[Tensor]| x[0].data().iter().map(|v| v * v).sum::<f64>();
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]);
        let g = numeric_grad(&f, &[x], 1e-5);
        for (a, b) in g[0].data().iter().zip([2.0, -4.0, 1.0]) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
