use crate::layer::Parameter;
use crate::tensor::Tensor;

use super::config::OptimizerKind;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer accumulators, one slot per parameter in registry order.
///
/// Weight decay is decoupled: non-exempt parameters shrink by `lr·wd·θ`
/// before the gradient step.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub kind: OptimizerKind,
    /// Adam first moments, or SGD velocity.
    pub first: Vec<Tensor>,
    /// Adam second moments; empty for SGD.
    pub second: Vec<Tensor>,
    pub step: u64,
    pub sgd_momentum: f64,
}

impl OptimState {
    pub fn new(kind: OptimizerKind, params: &[&Parameter], sgd_momentum: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        OptimState {
            kind,
            first: zeros(),
            second: if kind == OptimizerKind::Adam {
                zeros()
            } else {
                Vec::new()
            },
            step: 0,
            sgd_momentum,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Parameter>, lr: f64, weight_decay: f64) {
        assert_eq!(
            params.len(),
            self.first.len(),
            "optimizer built for a different network"
        );
        self.step += 1;
        match self.kind {
            OptimizerKind::Adam => self.adam(params, lr, weight_decay),
            OptimizerKind::Sgd => self.sgd(params, lr, weight_decay),
        }
    }

    fn adam(&mut self, params: Vec<&mut Parameter>, lr: f64, wd: f64) {
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for ((p, m), v) in params.into_iter().zip(&mut self.first).zip(&mut self.second) {
            let decay = if p.weight_decay_exempt { 0.0 } else { lr * wd };
            let (value, grad) = (p.value.data_mut(), p.grad.data());
            for (((x, &g), m), v) in value.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                *x -= decay * *x + lr * update;
            }
        }
    }

    fn sgd(&mut self, params: Vec<&mut Parameter>, lr: f64, wd: f64) {
        let mu = self.sgd_momentum;
        for (p, vel) in params.into_iter().zip(&mut self.first) {
            let decay = if p.weight_decay_exempt { 0.0 } else { lr * wd };
            let (value, grad) = (p.value.data_mut(), p.grad.data());
            for ((x, &g), v) in value.iter_mut().zip(grad).zip(vel.data_mut()) {
                *v = mu * *v + g;
                *x -= decay * *x + lr * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64, g: f64) -> Parameter {
        let mut p = Parameter::new(Tensor::full(&[1], v));
        p.grad = Tensor::full(&[1], g);
        p
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_no_op() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut p = scalar(0.7, 0.0);
            let mut st = OptimState::new(kind, &[&p], 0.9);
            for _ in 0..5 {
                st.step(vec![&mut p], 0.1, 0.0);
            }
            assert_eq!(p.value.data()[0], 0.7);
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        for g in [0.5, -3.0, 1e-6] {
            let mut p = scalar(1.0, g);
            let mut st = OptimState::new(OptimizerKind::Adam, &[&p], 0.0);
            st.step(vec![&mut p], 1e-3, 0.0);
            // bias-corrected moments are g and g², so the step is lr·g/(|g|+eps)
            let want = 1.0 - 1e-3 * g / (g.abs() + ADAM_EPS);
            assert!((p.value.data()[0] - want).abs() < 1e-15, "{g}");
        }
    }

    #[test]
    fn weight_decay_alone_shrinks_geometrically() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut p = scalar(2.0, 0.0);
            let mut st = OptimState::new(kind, &[&p], 0.9);
            for _ in 0..3 {
                st.step(vec![&mut p], 0.1, 0.5);
            }
            assert!((p.value.data()[0] - 2.0 * 0.95f64.powi(3)).abs() < 1e-15);
        }
    }

    #[test]
    fn exempt_parameters_skip_decay() {
        let mut p = Parameter::exempt(Tensor::full(&[2], 3.0));
        let mut st = OptimState::new(OptimizerKind::Adam, &[&p], 0.0);
        st.step(vec![&mut p], 0.1, 0.5);
        assert_eq!(p.value.data(), &[3.0, 3.0]);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = scalar(0.0, 1.0);
        let mut st = OptimState::new(OptimizerKind::Sgd, &[&p], 0.5);
        st.step(vec![&mut p], 0.1, 0.0);
        st.step(vec![&mut p], 0.1, 0.0);
        // velocities 1 and 1.5
        assert!((p.value.data()[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = scalar(5.0, 0.0);
        let mut st = OptimState::new(OptimizerKind::Adam, &[&p], 0.0);
        for _ in 0..3000 {
            let x = p.value.data()[0];
            p.grad.data_mut()[0] = 2.0 * (x - 1.0);
            st.step(vec![&mut p], 0.01, 0.0);
        }
        assert!((p.value.data()[0] - 1.0).abs() < 1e-3);
    }
}
