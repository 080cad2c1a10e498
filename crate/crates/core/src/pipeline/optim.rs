//! Nesterov momentum.

use crate::error::{Error, Result};
use crate::nets::Network;
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    /// Zero velocity shaped like `params`.
    pub fn new(params: &[Tensor], learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::Parameter(format!("learning rate must be nonnegative, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Parameter(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        })
    }

    pub fn for_network(net: &Network, learning_rate: f64, momentum: f64) -> Result<Self> {
        Self::new(net.params(), learning_rate, momentum)
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// `v ← μv − η∇; θ ← θ + μv − η∇`, then clears the gradients.
pub fn nag_update(params: &mut [Tensor], opt: &mut OptimizerState) -> Result<()> {
    if params.len() != opt.velocity.len()
        || params.iter().zip(&opt.velocity).any(|(p, v)| p.numel() != v.len())
    {
        return Err(Error::contract("optimizer state does not match the parameters"));
    }
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::contract(format!("parameter {i} has no gradient; run backward first")));
    }
    let (mu, eta) = (opt.momentum, opt.learning_rate);
    for (p, v) in params.iter_mut().zip(&mut opt.velocity) {
        let g = p.take_grad().expect("checked above");
        for ((theta, vel), grad) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
            *vel = mu * *vel - eta * grad;
            *theta += mu * *vel - eta * grad;
        }
    }
    Ok(())
}

pub fn nag_step(net: &mut Network, opt: &mut OptimizerState) -> Result<()> {
    nag_update(net.params_mut(), opt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    fn run(theta0: f64, eta: f64, mu: f64, steps: usize) -> Vec<f64> {
        let mut p = [scalar_param(theta0)];
        let mut opt = OptimizerState::new(&p, eta, mu).unwrap();
        let mut out = Vec::new();
        for _ in 0..steps {
            // f(θ) = θ²/2
            let g = p[0].data()[0];
            p[0].set_grad(vec![g]).unwrap();
            nag_update(&mut p, &mut opt).unwrap();
            assert!(p[0].grad().is_none());
            out.push(p[0].data()[0]);
        }
        out
    }

    #[test]
    fn quadratic_matches_scalar_reference() {
        let (eta, mu) = (0.1, 0.9);
        let (mut theta, mut v) = (1.0f64, 0.0f64);
        let mut reference = Vec::new();
        for _ in 0..10 {
            let g = theta;
            v = mu * v - eta * g;
            theta = theta + mu * v - eta * g;
            reference.push(theta);
        }
        for (a, b) in run(1.0, eta, mu, 10).iter().zip(&reference) {
            assert!((a - b).abs() <= 1e-12);
        }
        // first two steps by hand: v₁ = −0.1, θ₁ = 1 − 0.09 − 0.1
        assert!((reference[0] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_is_gradient_descent() {
        let traj = run(2.0, 0.25, 0.0, 3);
        assert_eq!(traj, vec![1.5, 1.125, 0.84375]);
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        assert_eq!(run(0.7, 0.0, 0.9, 4), vec![0.7; 4]);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut p = [scalar_param(1.0), scalar_param(2.0)];
        let mut opt = OptimizerState::new(&p, 0.1, 0.9).unwrap();
        p[0].set_grad(vec![1.0]).unwrap();
        assert!(matches!(nag_update(&mut p, &mut opt), Err(Error::Contract(_))));
        assert_eq!(p[0].data()[0], 1.0);
        assert!(OptimizerState::new(&p, 0.1, 1.0).is_err());
    }
}
