//! Plain SGD with momentum. Updates are applied in parameter order with
//! sequential arithmetic, so a fixed seed gives bitwise-identical runs.

use super::tensor::Param;

pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        Self { lr, momentum, velocity: Vec::new() }
    }

    /// `v = momentum * v + grad; p -= lr * v` for every parameter.
    /// The parameter list must be in the same order on every call.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "parameter list changed between steps");
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            for ((val, g), vel) in p.value.data.iter_mut().zip(&p.grad.data).zip(v.iter_mut()) {
                *vel = self.momentum * *vel + g;
                *val -= self.lr * *vel;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralcore::Tensor;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Param::new(Tensor::from_vec(&[2], vec![1.0, -2.0]));
        let mut opt = SgdMomentum::new(0.1, 0.0);
        opt.step(&mut [&mut p]);
        assert_eq!(p.value.data, vec![1.0, -2.0]);
    }

    #[test]
    fn unit_lr_subtracts_gradient() {
        let mut p = Param::new(Tensor::from_vec(&[1], vec![5.0]));
        p.grad.data[0] = 2.0;
        let mut opt = SgdMomentum::new(1.0, 0.0);
        opt.step(&mut [&mut p]);
        assert_abs_diff_eq!(p.value.data[0], 3.0);
    }

    #[test]
    fn momentum_matches_hand_unrolled_recurrence() {
        let mut p = Param::new(Tensor::from_vec(&[1], vec![0.0]));
        let mut opt = SgdMomentum::new(0.5, 0.9);
        let (g1, g2) = (1.0, -0.3);

        p.grad.data[0] = g1;
        opt.step(&mut [&mut p]);
        let v1 = g1;
        let x1 = -0.5 * v1;
        assert_abs_diff_eq!(p.value.data[0], x1, epsilon = 1e-15);

        p.grad.data[0] = g2;
        opt.step(&mut [&mut p]);
        let v2 = 0.9 * v1 + g2;
        let x2 = x1 - 0.5 * v2;
        assert_abs_diff_eq!(p.value.data[0], x2, epsilon = 1e-15);
    }
}
