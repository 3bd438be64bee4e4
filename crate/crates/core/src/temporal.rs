//! Trajectory representation: a time-expansion convolution followed by a
//! stack of residual convolutions whose every output is kept.
//!
//! Tensors are laid out `N×T×P×D`; time is the channel axis and the
//! convolution slides over the `(P, D)` plane.

use eanet_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_STACK_LAYERS: usize = 5;
pub const PRELU_INIT: f64 = 0.25;
/// Kernel extent along the feature axis.
pub const FEATURE_TAPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackConfig {
    pub layers: usize,
    /// Kernel extent along the agent axis: 1 keeps agents independent inside
    /// the convolutions, 3 mixes index-adjacent agents.
    pub agent_taps: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            layers: DEFAULT_STACK_LAYERS,
            agent_taps: 1,
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("stack_layers must be at least 1".into()));
        }
        if self.agent_taps % 2 == 0 {
            return Err(Error::Config(format!(
                "agent_taps must be odd, got {}",
                self.agent_taps
            )));
        }
        Ok(())
    }

    pub fn kernel_shape(&self, c_out: usize, c_in: usize) -> [usize; 4] {
        [c_out, c_in, self.agent_taps, FEATURE_TAPS]
    }
}

/// Outputs of every stacked layer, each `N×T_pred×P×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateOutputs {
    pub layers: Vec<Tensor>,
}

impl IntermediateOutputs {
    pub fn from_tape(tape: &Tape, vars: &[Var]) -> Self {
        Self {
            layers: vars.iter().map(|v| tape.value(*v).clone()).collect(),
        }
    }
}

/// Uniform in `±1/√fan_in`, bias-free.
pub fn init_kernel(shape: [usize; 4], rng: &mut Rng) -> Tensor {
    let bound = 1.0 / ((shape[1] * shape[2] * shape[3]) as f64).sqrt();
    Tensor::from_fn(&shape, |_| rng.uniform(-bound, bound))
}

/// Maps `N×T_obs×P×D` to `N×T_pred×P×D` with a `T_pred×T_obs×k×k'` kernel.
pub fn time_expand(tape: &mut Tape, features: Var, kernel: Var) -> Result<Var> {
    Ok(tape.conv2d(features, kernel)?)
}

/// `M[0] = prelu(conv(x0))`, `M[l] = prelu(conv(M[l-1])) + M[l-1]`.
pub fn stack_forward(tape: &mut Tape, x0: Var, kernels: &[Var], slopes: &[Var]) -> Result<Vec<Var>> {
    if kernels.is_empty() || kernels.len() != slopes.len() {
        return Err(Error::Contract(format!(
            "stack needs matching non-empty kernels ({}) and slopes ({})",
            kernels.len(),
            slopes.len()
        )));
    }
    let mut outputs: Vec<Var> = Vec::with_capacity(kernels.len());
    let mut input = x0;
    for (l, (&k, &s)) in kernels.iter().zip(slopes).enumerate() {
        let conv = tape.conv2d(input, k)?;
        let act = tape.prelu(conv, s)?;
        let out = if l == 0 { act } else { tape.add(act, input)? };
        outputs.push(out);
        input = out;
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: &Tensor, kernels: &[Tensor], slopes: &[f64]) -> Vec<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let ks: Vec<Var> = kernels.iter().map(|k| tape.leaf(k.clone())).collect();
        let ss: Vec<Var> = slopes.iter().map(|s| tape.leaf(Tensor::from_vec(vec![*s]))).collect();
        let out = stack_forward(&mut tape, xv, &ks, &ss).unwrap();
        IntermediateOutputs::from_tape(&tape, &out).layers
    }

    #[test]
    fn zero_kernels_propagate_zero() {
        let x = Tensor::from_fn(&[1, 4, 3, 5], |i| (i as f64).cos());
        let out = run(&x, &[Tensor::zeros(&[4, 4, 1, 3])], &[0.7]);
        assert!(out[0].data().iter().all(|&v| v == 0.0));
        let out = run(&x, &vec![Tensor::zeros(&[4, 4, 3, 3]); 3], &[0.25; 3]);
        assert_eq!(out.len(), 3);
        for m in &out {
            assert_eq!(m.shape(), &[1, 4, 3, 5]);
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn time_expand_identity_and_zero() {
        let x = Tensor::from_fn(&[1, 1, 4, 5], |i| i as f64 - 7.0);
        let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
        delta.set(&[0, 0, 1, 1], 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let k = tape.constant(delta);
        let y = time_expand(&mut tape, xv, k).unwrap();
        assert_eq!(tape.value(y), &x);
        let z = tape.constant(Tensor::zeros(&[12, 1, 1, 3]));
        let y = time_expand(&mut tape, xv, z).unwrap();
        assert_eq!(tape.shape(y), &[1, 12, 4, 5]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let mut a = Rng::new(1);
        let mut b = Rng::new(1);
        let k = init_kernel([12, 8, 1, 3], &mut a);
        assert_eq!(k, init_kernel([12, 8, 1, 3], &mut b));
        let bound = 1.0 / 24f64.sqrt();
        assert!(k.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn config_validation() {
        assert!(StackConfig { layers: 0, agent_taps: 1 }.validate().is_err());
        assert!(StackConfig { layers: 2, agent_taps: 2 }.validate().is_err());
        assert!(StackConfig::default().validate().is_ok());
    }
}
