//! Central finite-difference verification of analytic gradients.
//!
//! Used by unit tests and the acceptance suite. Run with `S = f64`: the f32
//! epsilon is too close to the difference quotient noise floor at step 1e-3.

use crate::scalar::Scalar;

use super::Tensor5;

#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>, // (input idx, element, analytic, numeric)
}

impl GradCheckReport {
    pub fn ok(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares analytic gradients of `f(inputs)` (a scalar-valued forward pass)
/// against central finite differences with the given step.
///
/// `f` must be a pure function of the input values: it is re-invoked for
/// every perturbed evaluation, so any randomness inside must be fixed-seed.
pub fn finite_diff_check<S, F>(
    f: F,
    inputs: &[Tensor5<S>],
    step: f64,
) -> GradCheckReport
where
    S: Scalar,
    F: Fn(&[Tensor5<S>]) -> Tensor5<S>,
{
    let loss = f(inputs);
    loss.backward().expect("gradcheck backward");
    let analytic: Vec<Vec<S>> = inputs
        .iter()
        .map(|t| t.grad_vec().unwrap_or_else(|| vec![S::zero(); t.numel()]))
        .collect();

    let eval = |inputs: &[Tensor5<S>]| -> f64 { f(inputs).item().to_f64_() };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (ti, t) in inputs.iter().enumerate() {
        let base = t.value_vec();
        for ei in 0..base.len() {
            let mut plus = base.clone();
            plus[ei] = S::from_f64_(base[ei].to_f64_() + step);
            t.set_values(plus);
            let lp = eval(inputs);

            let mut minus = base.clone();
            minus[ei] = S::from_f64_(base[ei].to_f64_() - step);
            t.set_values(minus);
            let lm = eval(inputs);

            t.set_values(base.clone());

            let numeric = (lp - lm) / (2.0 * step);
            let a = analytic[ti][ei].to_f64_();
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ti, ei, a, numeric));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape5;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_param(shape: Shape5, seed: u64, lim: f64) -> Tensor5<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor5::param(
            shape,
            (0..shape.numel()).map(|_| rng.gen_range(-lim..lim)).collect(),
        )
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let x = rand_param(Shape5::new(1, 2, 2, 3, 3), 1, 1.0);
        let target = Tensor5::constant(x.shape(), vec![0.1; x.numel()]);
        let report = finite_diff_check(|ins| ins[0].mse(&target).unwrap(), &[x], 1e-3);
        assert!(report.ok(1e-3), "{report:?}");
    }

    #[test]
    fn conv3d_gradient_matches_finite_differences() {
        let x = rand_param(Shape5::new(1, 2, 3, 4, 4), 2, 1.0);
        let w = rand_param(Shape5::new(3, 2, 2, 2, 2), 3, 0.5);
        let b = rand_param(Shape5::new(1, 3, 1, 1, 1), 4, 0.5);
        let report = finite_diff_check(
            |ins| {
                ins[0]
                    .conv3d(&ins[1], Some(&ins[2]), (1, 2, 1), (1, 1, 1), (1, 0, 1))
                    .unwrap()
                    .tanh()
                    .mean_all()
            },
            &[x, w, b],
            1e-3,
        );
        assert!(report.ok(1e-3), "{report:?}");
    }
}
