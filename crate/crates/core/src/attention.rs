//! Output strategies over the stacked layers: expert attention, the plain
//! deepest layer, and a Hedge mixture with multiplicative weights.

use std::fmt;
use std::str::FromStr;

use eanet_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};

/// `atanh(0.5)`: the initial gate bias, so that `tanh(b) = 0.5`.
pub const GATE_BIAS_INIT: f64 = 0.549_306_144_334_054_8;
pub const DEFAULT_HEDGE_BETA: f64 = 0.99;
pub const DEFAULT_HEDGE_SMOOTHING: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    #[default]
    Ea,
    Plain,
    Hedge,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ea" => Ok(Self::Ea),
            "plain" => Ok(Self::Plain),
            "hedge" => Ok(Self::Hedge),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected ea|plain|hedge)"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ea => "ea",
            Self::Plain => "plain",
            Self::Hedge => "hedge",
        })
    }
}

/// Gate parameters: `theta` is `D×1`, `bias` has one element, `alpha` one per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EAParams {
    pub theta: Tensor,
    pub bias: Tensor,
    pub alpha: Tensor,
}

impl EAParams {
    /// Zero `theta`, gate bias `atanh(0.5)` and `alpha = 2·onehot(L)`, which
    /// reproduces the deepest layer exactly.
    pub fn initial(feature_dim: usize, layers: usize) -> Self {
        let mut alpha = Tensor::zeros(&[layers]);
        alpha.data_mut()[layers - 1] = 2.0;
        Self {
            theta: Tensor::zeros(&[feature_dim, 1]),
            bias: Tensor::from_vec(vec![GATE_BIAS_INIT]),
            alpha,
        }
    }
}

/// Frame-averaged gate values per layer, and the layer mix in effect.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertTrace {
    pub gate: Vec<f64>,
    pub alpha: Vec<f64>,
}

fn layer_shape(tape: &Tape, layers: &[Var]) -> Result<[usize; 4]> {
    let first = layers
        .first()
        .ok_or_else(|| Error::Contract("no intermediate outputs".into()))?;
    let s = tape.shape(*first);
    if s.len() != 4 {
        return Err(Error::Contract(format!("layer outputs must be rank 4, got {s:?}")));
    }
    for v in layers {
        if tape.shape(*v) != s {
            return Err(Error::Contract(format!(
                "layer outputs disagree: {s:?} vs {:?}",
                tape.shape(*v)
            )));
        }
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// `R_f[n][l][p][d] = M[l][n][f][p][d]`, one `N×L×P×D` node per frame.
pub fn recombine_by_frame(tape: &mut Tape, layers: &[Var]) -> Result<Vec<Var>> {
    let [n, t, p, d] = layer_shape(tape, layers)?;
    let mut frames = Vec::with_capacity(t);
    for f in 0..t {
        let slices = layers
            .iter()
            .map(|&m| tape.narrow(m, 1, f, 1))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let stacked = tape.stack(&slices, 1)?;
        frames.push(tape.reshape(stacked, &[n, layers.len(), p, d])?);
    }
    Ok(frames)
}

/// `E_f = mean_p tanh(R_f·Θ + b)`, shaped `N×L×1×1`.
pub fn expert_weights(tape: &mut Tape, frame: Var, theta: Var, bias: Var) -> Result<Var> {
    let s = tape.shape(frame).to_vec();
    let (n, l, p, d) = (s[0], s[1], s[2], s[3]);
    let flat = tape.reshape(frame, &[n * l * p, d])?;
    let proj = tape.matmul(flat, theta)?;
    let b = tape.reshape(bias, &[1, 1])?;
    let pre = tape.add(proj, b)?;
    let gate = tape.tanh(pre);
    let gate = tape.reshape(gate, &[n, l, p])?;
    let pooled = tape.mean(gate, 2, true)?;
    Ok(tape.reshape(pooled, &[n, l, 1, 1])?)
}

/// Gated layer mix: `Out_f = Σ_l α_l · E_f[l] · R_f[l]`, restacked to `N×T×P×D`.
pub fn ea_output(
    tape: &mut Tape,
    layers: &[Var],
    theta: Var,
    bias: Var,
    alpha: Var,
) -> Result<(Var, ExpertTrace)> {
    let [n, _, _, _] = layer_shape(tape, layers)?;
    let l = layers.len();
    if tape.shape(alpha) != [l] {
        return Err(Error::Contract(format!(
            "alpha has shape {:?}, expected [{l}]",
            tape.shape(alpha)
        )));
    }
    let a = tape.reshape(alpha, &[1, l, 1, 1])?;
    let frames = recombine_by_frame(tape, layers)?;
    let mut gate_sum = vec![0.0; l];
    let mut outs = Vec::with_capacity(frames.len());
    for &r in &frames {
        let e = expert_weights(tape, r, theta, bias)?;
        for (i, v) in tape.value(e).data().iter().enumerate() {
            gate_sum[i % l] += v;
        }
        let gated = tape.mul(r, e)?;
        let mixed = tape.mul(gated, a)?;
        outs.push(tape.sum(mixed, 1, false)?);
    }
    let count = (frames.len() * n) as f64;
    let trace = ExpertTrace {
        gate: gate_sum.iter().map(|s| s / count).collect(),
        alpha: tape.value(alpha).data().to_vec(),
    };
    Ok((tape.stack(&outs, 1)?, trace))
}

/// The deepest layer.
pub fn plain_output(layers: &[Var]) -> Result<Var> {
    layers
        .last()
        .copied()
        .ok_or_else(|| Error::Contract("no intermediate outputs".into()))
}

/// `Σ_l w_l · M[l]`.
pub fn hedge_output(tape: &mut Tape, layers: &[Var], weights: &[f64]) -> Result<Var> {
    layer_shape(tape, layers)?;
    if weights.len() != layers.len() {
        return Err(Error::Contract(format!(
            "{} hedge weights for {} layers",
            weights.len(),
            layers.len()
        )));
    }
    let mut acc = tape.scale(layers[0], weights[0]);
    for (&m, &w) in layers.iter().zip(weights).skip(1) {
        let term = tape.scale(m, w);
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// Multiplicative layer weights on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct HedgeState {
    pub weights: Vec<f64>,
    pub beta: f64,
    pub smoothing: f64,
}

impl HedgeState {
    pub fn new(layers: usize, beta: f64, smoothing: f64) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("hedge needs at least one layer".into()));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::Config(format!("hedge beta must lie in (0,1), got {beta}")));
        }
        if !(smoothing > 0.0 && smoothing < 1.0) {
            return Err(Error::Config(format!(
                "hedge smoothing must lie in (0,1), got {smoothing}"
            )));
        }
        Ok(Self {
            weights: vec![1.0 / layers as f64; layers],
            beta,
            smoothing,
        })
    }

    pub fn floor(&self) -> f64 {
        self.smoothing / self.weights.len() as f64
    }

    /// Discounts each layer by `β^ℓ̃` with min-max normalized losses, then
    /// projects back to the simplex keeping every weight at or above `s/L`.
    /// Non-finite losses leave the weights untouched.
    pub fn update(&mut self, losses: &[f64]) -> Result<()> {
        if losses.len() != self.weights.len() {
            return Err(Error::Contract(format!(
                "{} losses for {} hedge weights",
                losses.len(),
                self.weights.len()
            )));
        }
        if let Some(bad) = losses.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("hedge loss {bad}")));
        }
        let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let mut w: Vec<f64> = self
            .weights
            .iter()
            .zip(losses)
            .map(|(w, l)| {
                let norm = if span > 0.0 { (l - lo) / span } else { 0.0 };
                w * self.beta.powf(norm)
            })
            .collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        self.weights = project_with_floor(&w, self.floor());
        Ok(())
    }
}

/// Clamps entries below `floor` up to it and rescales the rest so the
/// vector sums to one; repeats until no rescaled entry drops below `floor`.
fn project_with_floor(w: &[f64], floor: f64) -> Vec<f64> {
    let mut fixed = vec![false; w.len()];
    loop {
        let pinned = fixed.iter().filter(|&&f| f).count() as f64;
        let free_mass: f64 = w.iter().zip(&fixed).filter(|(_, &f)| !f).map(|(v, _)| v).sum();
        let scale = (1.0 - pinned * floor) / free_mass;
        let mut changed = false;
        for (i, &v) in w.iter().enumerate() {
            if !fixed[i] && v * scale < floor {
                fixed[i] = true;
                changed = true;
            }
        }
        if !changed {
            let out: Vec<f64> = w
                .iter()
                .zip(&fixed)
                .map(|(&v, &f)| if f { floor } else { v * scale })
                .collect();
            // Absorb rounding so the sum is one to the last bit that matters.
            let err = 1.0 - out.iter().sum::<f64>();
            let mut out = out;
            if let Some((i, _)) = out
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
            {
                out[i] += err;
            }
            return out;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layers(tape: &mut Tape, l: usize, shape: &[usize]) -> Vec<Var> {
        (0..l)
            .map(|k| {
                let t = Tensor::from_fn(shape, |i| ((i * 7 + k * 13) as f64 * 0.37).sin());
                tape.constant(t)
            })
            .collect()
    }

    #[test]
    fn recombine_indexing() {
        let mut tape = Tape::new();
        let m = layers(&mut tape, 3, &[2, 4, 3, 5]);
        let r = recombine_by_frame(&mut tape, &m).unwrap();
        assert_eq!(r.len(), 4);
        for f in 0..4 {
            assert_eq!(tape.shape(r[f]), &[2, 3, 3, 5]);
            for n in 0..2 {
                for l in 0..3 {
                    for p in 0..3 {
                        for d in 0..5 {
                            assert_eq!(
                                tape.value(r[f]).at(&[n, l, p, d]),
                                tape.value(m[l]).at(&[n, f, p, d])
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gate_constant_cases() {
        let mut tape = Tape::new();
        let m = layers(&mut tape, 2, &[1, 3, 4, 5]);
        let r = recombine_by_frame(&mut tape, &m).unwrap();
        let theta = tape.constant(Tensor::zeros(&[5, 1]));
        let b0 = tape.constant(Tensor::from_vec(vec![0.0]));
        let b1 = tape.constant(Tensor::from_vec(vec![1.0]));
        let e = expert_weights(&mut tape, r[0], theta, b0).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
        let e = expert_weights(&mut tape, r[0], theta, b1).unwrap();
        assert_eq!(tape.shape(e), &[1, 2, 1, 1]);
        assert!(tape.value(e).data().iter().all(|v| (v - 0.761594).abs() < 1e-6));
    }

    #[test]
    fn ea_zero_gate_and_identity_init() {
        let mut tape = Tape::new();
        let m = layers(&mut tape, 1, &[1, 12, 3, 5]);
        let init = EAParams::initial(5, 1);
        let theta = tape.constant(init.theta.clone());
        let bias = tape.constant(init.bias.clone());
        let alpha = tape.constant(init.alpha.clone());
        let (out, trace) = ea_output(&mut tape, &m, theta, bias, alpha).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(m[0])) < 1e-15);
        assert!((trace.gate[0] - 0.5).abs() < 1e-15);
        assert_eq!(trace.alpha, vec![2.0]);
        let zero = tape.constant(Tensor::from_vec(vec![0.0]));
        let (out, _) = ea_output(&mut tape, &m, theta, zero, alpha).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn initial_ea_equals_plain_for_deep_stack() {
        let mut tape = Tape::new();
        let m = layers(&mut tape, 5, &[1, 12, 6, 5]);
        let init = EAParams::initial(5, 5);
        let theta = tape.constant(init.theta);
        let bias = tape.constant(init.bias);
        let alpha = tape.constant(init.alpha);
        let (out, _) = ea_output(&mut tape, &m, theta, bias, alpha).unwrap();
        let plain = plain_output(&m).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(plain)) < 1e-15);
    }

    #[test]
    fn hedge_output_mixes() {
        let mut tape = Tape::new();
        let m = layers(&mut tape, 2, &[1, 2, 2, 5]);
        let out = hedge_output(&mut tape, &m, &[0.25, 0.75]).unwrap();
        let want = tape.value(m[0]).data().iter().zip(tape.value(m[1]).data()).map(|(a, b)| 0.25 * a + 0.75 * b);
        for (g, w) in tape.value(out).data().iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
        assert!(hedge_output(&mut tape, &m, &[1.0]).is_err());
    }

    #[test]
    fn hedge_worked_example() {
        let mut h = HedgeState::new(2, 0.5, 0.2).unwrap();
        h.update(&[3.0, 7.0]).unwrap();
        assert!((h.weights[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((h.weights[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn hedge_equal_losses_and_errors() {
        let mut h = HedgeState::new(3, 0.9, 0.2).unwrap();
        h.weights = vec![0.5, 0.3, 0.2];
        h.update(&[1.0, 1.0, 1.0]).unwrap();
        assert!(h.weights.iter().zip([0.5, 0.3, 0.2]).all(|(a, b)| (a - b).abs() < 1e-15));
        let before = h.clone();
        assert!(h.update(&[1.0, f64::NAN, 0.0]).is_err());
        assert_eq!(h, before);
        assert!(HedgeState::new(2, 1.0, 0.2).is_err());
        assert!(HedgeState::new(2, 0.5, 0.0).is_err());
    }

    #[test]
    fn hedge_floor_holds() {
        let mut h = HedgeState::new(4, 0.01, 0.2).unwrap();
        for _ in 0..50 {
            h.update(&[0.0, 1.0, 1.0, 1.0]).unwrap();
        }
        assert!(h.weights.iter().all(|&w| w >= h.floor() - 1e-15));
        assert!((h.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((h.weights[0] - 0.85).abs() < 1e-12);
    }

    #[test]
    fn strategy_strings() {
        for s in ["ea", "plain", "hedge"] {
            assert_eq!(s.parse::<Strategy>().unwrap().to_string(), s);
        }
        assert!("moe".parse::<Strategy>().is_err());
    }
}
