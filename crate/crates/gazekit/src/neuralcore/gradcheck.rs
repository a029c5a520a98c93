//! Central finite-difference verification of analytic gradients.
//!
//! Every differentiable operation in the crate is expected to pass these
//! checks at relative tolerance 1e-4 in double precision; the checks
//! themselves use a projection loss (a fixed random weighting of the
//! output) so a single scalar exercises the whole Jacobian.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Layer, Mode};
use super::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Relative error with an absolute floor: tiny gradient pairs compare
/// absolutely so noise around zero does not explode the ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-6 {
        diff
    } else {
        diff / scale
    }
}

/// Central difference gradient of `f` at `x`.
pub fn numeric_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &mut [f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(x);
        x[i] = orig - step;
        let minus = f(x);
        x[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Checks input and parameter gradients of a layer against central
/// differences on a random input of the given shape.
///
/// Inputs are sampled away from zero so ReLU kinks cannot sit inside the
/// difference stencil.
pub fn check_layer(
    layer: &mut dyn Layer,
    input_shape: &[usize],
    mode: Mode,
    seed: u64,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = input_shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = 0.1 + rng.gen_range(0.0..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let mut x = Tensor::from_vec(input_shape, data);

    let out = layer.forward(&x, mode).expect("forward failed in gradcheck");
    let proj: Vec<f64> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let proj_t = Tensor::from_vec(&out.shape, proj.clone());

    for p in layer.params_mut() {
        p.zero_grad();
    }
    // Forward again so backward consumes the tape for this exact input.
    let _ = layer.forward(&x, mode).unwrap();
    let analytic_in = layer.backward(&proj_t).expect("backward failed in gradcheck");

    let mut max_err: f64 = 0.0;
    let mut checked = 0usize;

    {
        let mut loss = |vals: &[f64]| {
            let t = Tensor::from_vec(input_shape, vals.to_vec());
            let y = layer.forward(&t, mode).unwrap();
            y.data.iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>()
        };
        let numeric = numeric_grad(&mut loss, &mut x.data, DEFAULT_STEP);
        for (a, nv) in analytic_in.data.iter().zip(&numeric) {
            max_err = max_err.max(rel_err(*a, *nv));
            checked += 1;
        }
    }

    let num_params = {
        let _ = layer.forward(&x, mode).unwrap();
        layer.params_mut().len()
    };
    for pi in 0..num_params {
        let analytic = layer.params_mut()[pi].grad.data.clone();
        let plen = analytic.len();
        for ei in 0..plen {
            let orig = layer.params_mut()[pi].value.data[ei];
            layer.params_mut()[pi].value.data[ei] = orig + DEFAULT_STEP;
            let plus: f64 = layer
                .forward(&x, mode)
                .unwrap()
                .data
                .iter()
                .zip(&proj)
                .map(|(a, b)| a * b)
                .sum();
            layer.params_mut()[pi].value.data[ei] = orig - DEFAULT_STEP;
            let minus: f64 = layer
                .forward(&x, mode)
                .unwrap()
                .data
                .iter()
                .zip(&proj)
                .map(|(a, b)| a * b)
                .sum();
            layer.params_mut()[pi].value.data[ei] = orig;
            let numeric = (plus - minus) / (2.0 * DEFAULT_STEP);
            max_err = max_err.max(rel_err(analytic[ei], numeric));
            checked += 1;
        }
    }
    GradCheckReport { max_rel_err: max_err, checked }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralcore::layers::{BatchNorm, Conv1d, Conv2d, Fc, Gap, Relu};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_layers_pass_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cases: Vec<(Box<dyn Layer>, Vec<usize>, Mode)> = vec![
            (Box::new(Conv2d::new(2, 3, 3, 1, 1, &mut rng)), vec![2, 2, 5, 5], Mode::Train),
            (Box::new(Conv2d::new(2, 2, 3, 2, 1, &mut rng)), vec![2, 2, 6, 6], Mode::Train),
            (Box::new(Conv1d::new(2, 3, 3, 1, 1, &mut rng)), vec![2, 2, 7], Mode::Train),
            (Box::new(Conv1d::new(2, 2, 3, 2, 1, &mut rng)), vec![2, 2, 8], Mode::Train),
            (Box::new(BatchNorm::new(3, 1e-5, 0.1)), vec![4, 3, 6], Mode::Train),
            (Box::new(BatchNorm::new(3, 1e-5, 0.1)), vec![2, 3, 4], Mode::FineTune),
            (Box::new(Relu::default()), vec![2, 3, 4], Mode::Train),
            (Box::new(Fc::new(6, 4, &mut rng)), vec![3, 6], Mode::Train),
            (Box::new(Gap::default()), vec![2, 3, 4, 4], Mode::Train),
        ];
        for (mut layer, shape, mode) in cases {
            let report = check_layer(layer.as_mut(), &shape, mode, 99);
            assert!(
                report.passes(DEFAULT_TOLERANCE),
                "{:?} failed: max rel err {:.3e} over {} entries",
                layer.spec(),
                report.max_rel_err,
                report.checked
            );
        }
    }
}
