//! Bivariate Gaussian outputs: decoding, negative log-likelihood, sampling
//! and displacement metrics.

use std::f64::consts::TAU;

use eanet_autodiff::{Tape, Tensor, Var};

use crate::data::{to_absolute, Point};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_SAMPLES: usize = 20;
/// Lower bound on `1 − ρ²` inside the likelihood.
pub const RHO_GUARD: f64 = 1e-12;
/// Width of the raw output: `μx, μy, rawσx, rawσy, rawρ`.
pub const GAUSSIAN_DIM: usize = 5;

/// Per agent and predicted frame: mean displacement, scales and correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField {
    pub mu: Vec<Vec<Point>>,
    pub sigma: Vec<Vec<Point>>,
    pub rho: Vec<Vec<f64>>,
}

impl GaussianField {
    pub fn agents(&self) -> usize {
        self.mu.len()
    }

    pub fn frames(&self) -> usize {
        self.mu.first().map_or(0, Vec::len)
    }

    /// Absolute mean trajectory from each agent's last observed position.
    pub fn mean_trajectory(&self, origin_abs: &[Point]) -> Vec<Vec<Point>> {
        to_absolute(&self.mu, origin_abs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub ade: f64,
    pub fde: f64,
    pub n_agents: usize,
    pub n_frames: usize,
    pub sample_count: usize,
}

/// Splits an `N×T×P×5` raw output into one field per batch element.
pub fn decode_gaussian(raw: &Tensor) -> Result<Vec<GaussianField>> {
    let s = raw.shape();
    if s.len() != 4 || s[3] != GAUSSIAN_DIM {
        return Err(Error::Contract(format!("raw output must be N×T×P×5, got {s:?}")));
    }
    if !raw.is_finite() {
        return Err(Error::NonFinite("raw network output".into()));
    }
    let (n, t, p) = (s[0], s[1], s[2]);
    Ok((0..n)
        .map(|b| {
            let at = |a: usize, f: usize, k: usize| raw.at(&[b, f, a, k]);
            GaussianField {
                mu: (0..p).map(|a| (0..t).map(|f| [at(a, f, 0), at(a, f, 1)]).collect()).collect(),
                sigma: (0..p)
                    .map(|a| (0..t).map(|f| [at(a, f, 2).exp(), at(a, f, 3).exp()]).collect())
                    .collect(),
                rho: (0..p).map(|a| (0..t).map(|f| at(a, f, 4).tanh()).collect()).collect(),
            }
        })
        .collect())
}

/// Packs `[agent][frame]` displacements into a `1×T×P×2` tensor.
pub fn target_tensor(fut_rel: &[Vec<Point>]) -> Tensor {
    let p = fut_rel.len();
    let t = fut_rel.first().map_or(0, Vec::len);
    Tensor::from_fn(&[1, t, p, 2], |i| {
        let (f, a, k) = (i / (2 * p), (i / 2) % p, i % 2);
        fut_rel[a][f][k]
    })
}

/// Negative log-likelihood summed over frames and averaged over agents
/// (and batch), recorded on the tape. `target` is `N×T×P×2`.
pub fn nll_loss(tape: &mut Tape, raw: Var, target: &Tensor) -> Result<Var> {
    let s = tape.shape(raw).to_vec();
    if s.len() != 4 || s[3] != GAUSSIAN_DIM || target.shape() != [s[0], s[1], s[2], 2] {
        return Err(Error::Contract(format!(
            "nll shapes: raw {s:?}, target {:?}",
            target.shape()
        )));
    }
    let norm = (s[0] * s[2]) as f64;
    let mu = tape.narrow(raw, 3, 0, 2)?;
    let log_sigma = tape.narrow(raw, 3, 2, 2)?;
    let raw_rho = tape.narrow(raw, 3, 4, 1)?;
    let sigma = tape.exp(log_sigma);
    let rho = tape.tanh(raw_rho);
    let y = tape.constant(target.clone());
    let diff = tape.sub(y, mu)?;
    let z = tape.div(diff, sigma)?;
    let zx = tape.narrow(z, 3, 0, 1)?;
    let zy = tape.narrow(z, 3, 1, 1)?;
    let zx2 = tape.mul(zx, zx)?;
    let zy2 = tape.mul(zy, zy)?;
    let zxy = tape.mul(zx, zy)?;
    let cross = tape.mul(rho, zxy)?;
    let cross = tape.scale(cross, -2.0);
    let quad = tape.add(zx2, zy2)?;
    let quad = tape.add(quad, cross)?;
    let rho2 = tape.mul(rho, rho)?;
    let one_m = tape.scale(rho2, -1.0);
    let one_m = tape.add_scalar(one_m, 1.0);
    let one_m = tape.clamp(one_m, RHO_GUARD, f64::INFINITY);
    let maha = tape.div(quad, one_m)?;
    let maha = tape.scale(maha, 0.5);
    let log_det = tape.ln(one_m);
    let log_det = tape.scale(log_det, 0.5);
    let sum_ls = tape.sum(log_sigma, 3, true)?;
    let per = tape.add(maha, log_det)?;
    let per = tape.add(per, sum_ls)?;
    let per = tape.add_scalar(per, TAU.ln());
    let total = tape.sum_all(per);
    Ok(tape.scale(total, 1.0 / norm))
}

fn frame_nll(mu: Point, sigma: Point, rho: f64, y: Point) -> f64 {
    let zx = (y[0] - mu[0]) / sigma[0];
    let zy = (y[1] - mu[1]) / sigma[1];
    let one_m = (1.0 - rho * rho).max(RHO_GUARD);
    TAU.ln()
        + sigma[0].ln()
        + sigma[1].ln()
        + 0.5 * one_m.ln()
        + (zx * zx + zy * zy - 2.0 * rho * zx * zy) / (2.0 * one_m)
}

/// Same quantity as [`nll_loss`] for one decoded field, without a tape.
pub fn nll_value(field: &GaussianField, target_rel: &[Vec<Point>]) -> Result<f64> {
    if target_rel.len() != field.agents()
        || target_rel.iter().any(|s| s.len() != field.frames())
    {
        return Err(Error::Contract("nll target does not match field".into()));
    }
    let mut total = 0.0;
    for a in 0..field.agents() {
        for f in 0..field.frames() {
            total += frame_nll(field.mu[a][f], field.sigma[a][f], field.rho[a][f], target_rel[a][f]);
        }
    }
    Ok(total / field.agents() as f64)
}

/// `K×P×T` absolute trajectories. Sample `k` draws from its own sub-stream of
/// `seed`, so the first `K` samples do not depend on `K`.
pub fn sample_trajectories(
    field: &GaussianField,
    k: usize,
    seed: u64,
    origin_abs: &[Point],
) -> Result<Vec<Vec<Vec<Point>>>> {
    if k == 0 {
        return Err(Error::Contract("sample count must be at least 1".into()));
    }
    if origin_abs.len() != field.agents() {
        return Err(Error::Contract("one origin per agent required".into()));
    }
    Ok((0..k)
        .map(|s| {
            let mut rng = Rng::stream(seed, s as u64);
            let rel: Vec<Vec<Point>> = (0..field.agents())
                .map(|a| {
                    (0..field.frames())
                        .map(|f| {
                            let (mu, sd, r) = (field.mu[a][f], field.sigma[a][f], field.rho[a][f]);
                            let (z1, z2) = (rng.normal(), rng.normal());
                            let c = (1.0 - r * r).max(0.0).sqrt();
                            [mu[0] + sd[0] * z1, mu[1] + sd[1] * (r * z1 + c * z2)]
                        })
                        .collect()
                })
                .collect();
            to_absolute(&rel, origin_abs)
        })
        .collect())
}

/// Mean and final-frame Euclidean error over agents (`[agent][frame]`).
pub fn ade_fde(pred: &[Vec<Point>], truth: &[Vec<Point>]) -> Result<(f64, f64)> {
    if pred.len() != truth.len()
        || pred.is_empty()
        || pred.iter().zip(truth).any(|(a, b)| a.len() != b.len() || a.is_empty())
    {
        return Err(Error::Contract("ade_fde: prediction and truth shapes differ".into()));
    }
    let err = |a: Point, b: Point| (a[0] - b[0]).hypot(a[1] - b[1]);
    let (mut ade, mut fde, mut count) = (0.0, 0.0, 0usize);
    for (ps, ts) in pred.iter().zip(truth) {
        for (p, t) in ps.iter().zip(ts) {
            ade += err(*p, *t);
        }
        count += ps.len();
        fde += err(*ps.last().unwrap(), *ts.last().unwrap());
    }
    Ok((ade / count as f64, fde / pred.len() as f64))
}

/// Scores `K` samples and keeps the one with the lowest ADE.
pub fn best_of_k(
    field: &GaussianField,
    origin_abs: &[Point],
    truth_abs: &[Vec<Point>],
    k: usize,
    seed: u64,
) -> Result<MetricReport> {
    let mut best = (f64::INFINITY, f64::INFINITY);
    for sample in sample_trajectories(field, k, seed, origin_abs)? {
        let m = ade_fde(&sample, truth_abs)?;
        if m.0 < best.0 {
            best = m;
        }
    }
    Ok(MetricReport {
        ade: best.0,
        fde: best.1,
        n_agents: field.agents(),
        n_frames: field.frames(),
        sample_count: k,
    })
}

/// `½((ade − ade_base)/ade_base + (fde − fde_base)/fde_base)`.
pub fn restore_ratio(ade: f64, fde: f64, ade_base: f64, fde_base: f64) -> Result<f64> {
    if !(ade_base > 0.0 && fde_base > 0.0) {
        return Err(Error::Contract(format!(
            "restore ratio needs positive base metrics, got ({ade_base}, {fde_base})"
        )));
    }
    // Ratio form keeps hand cases such as (0.5, 1.0) vs (0.4, 0.8) exact.
    Ok(0.5 * (ade / ade_base + fde / fde_base) - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(mu: Point, sigma: Point, rho: f64, p: usize, t: usize) -> GaussianField {
        GaussianField {
            mu: vec![vec![mu; t]; p],
            sigma: vec![vec![sigma; t]; p],
            rho: vec![vec![rho; t]; p],
        }
    }

    #[test]
    fn decode_cases() {
        let mut raw = Tensor::zeros(&[1, 2, 1, 5]);
        raw.set(&[0, 1, 0, 2], 2f64.ln());
        raw.set(&[0, 1, 0, 0], 0.7);
        let f = &decode_gaussian(&raw).unwrap()[0];
        assert_eq!(f.mu[0][0], [0.0, 0.0]);
        assert_eq!(f.sigma[0][0], [1.0, 1.0]);
        assert_eq!(f.rho[0][0], 0.0);
        assert!((f.sigma[0][1][0] - 2.0).abs() < 1e-15);
        assert_eq!(f.mu[0][1][0], 0.7);
        raw.set(&[0, 0, 0, 4], f64::NAN);
        assert!(decode_gaussian(&raw).is_err());
    }

    #[test]
    fn nll_anchor_on_tape() {
        let mut tape = Tape::new();
        let raw = tape.leaf(Tensor::zeros(&[1, 12, 3, 5]));
        let loss = nll_loss(&mut tape, raw, &Tensor::zeros(&[1, 12, 3, 2])).unwrap();
        assert!((tape.value(loss).item().unwrap() - 12.0 * TAU.ln()).abs() < 1e-9);
        assert!((tape.value(loss).item().unwrap() - 22.054525).abs() < 1e-6);
        let g = tape.backward(loss).unwrap();
        let g = g.get(raw).unwrap();
        for i in 0..12 * 3 {
            assert_eq!(g.data()[i * 5], 0.0);
            assert_eq!(g.data()[i * 5 + 1], 0.0);
        }
    }

    #[test]
    fn doubling_sigma_adds_log4() {
        let truth = vec![vec![[0.0, 0.0]; 12]];
        let a = nll_value(&field([0.0, 0.0], [1.0, 1.0], 0.0, 1, 12), &truth).unwrap();
        let b = nll_value(&field([0.0, 0.0], [2.0, 2.0], 0.0, 1, 12), &truth).unwrap();
        assert!((b - a - 12.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_direct_density() {
        let (mu, sd, r, y): (Point, Point, f64, Point) = ([0.3, -0.2], [0.7, 1.9], 0.6, [1.1, 0.4]);
        let det = sd[0] * sd[0] * sd[1] * sd[1] * (1.0 - r * r);
        let (dx, dy) = (y[0] - mu[0], y[1] - mu[1]);
        let q = (dx * dx * sd[1] * sd[1] - 2.0 * r * sd[0] * sd[1] * dx * dy + dy * dy * sd[0] * sd[0]) / det;
        let dens = (-0.5 * q).exp() / (TAU * det.sqrt());
        assert!((frame_nll(mu, sd, r, y) + dens.ln()).abs() < 1e-12);
    }

    #[test]
    fn tape_and_value_nll_agree() {
        let raw = Tensor::from_fn(&[1, 4, 2, 5], |i| ((i * 31) as f64 * 0.11).sin() * 0.8);
        let target = Tensor::from_fn(&[1, 4, 2, 2], |i| (i as f64 * 0.3).cos());
        let mut tape = Tape::new();
        let rv = tape.constant(raw.clone());
        let loss = nll_loss(&mut tape, rv, &target).unwrap();
        let f = &decode_gaussian(&raw).unwrap()[0];
        let tgt: Vec<Vec<Point>> = (0..2)
            .map(|a| (0..4).map(|t| [target.at(&[0, t, a, 0]), target.at(&[0, t, a, 1])]).collect())
            .collect();
        assert!((tape.value(loss).item().unwrap() - nll_value(f, &tgt).unwrap()).abs() < 1e-12);
        assert_eq!(target_tensor(&tgt), target);
    }

    #[test]
    fn ade_fde_cases() {
        let truth = vec![vec![[0.0, 0.0], [1.0, 1.0]], vec![[2.0, 0.0], [2.0, 2.0]]];
        assert_eq!(ade_fde(&truth, &truth).unwrap(), (0.0, 0.0));
        let shifted: Vec<Vec<Point>> = truth
            .iter()
            .map(|s| s.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect())
            .collect();
        assert_eq!(ade_fde(&shifted, &truth).unwrap(), (5.0, 5.0));
        assert!(ade_fde(&truth[..1], &truth).is_err());
    }

    #[test]
    fn degenerate_samples_follow_mean() {
        let f = field([0.1, 0.2], [1e-9, 1e-9], 0.3, 2, 5);
        let origin = [[1.0, 1.0], [-1.0, 0.0]];
        let mean = f.mean_trajectory(&origin);
        for s in sample_trajectories(&f, 4, 9, &origin).unwrap() {
            assert!(ade_fde(&s, &mean).unwrap().0 < 1e-7);
        }
        let r = best_of_k(&f, &origin, &mean, 1, 3).unwrap();
        assert!(r.ade < 1e-7 && r.sample_count == 1);
    }

    #[test]
    fn sample_mean_converges() {
        let f = field([0.4, -0.3], [0.5, 1.5], -0.7, 1, 1);
        let k = 100_000;
        let s = sample_trajectories(&f, k, 11, &[[0.0, 0.0]]).unwrap();
        let mx = s.iter().map(|x| x[0][0][0]).sum::<f64>() / k as f64;
        let my = s.iter().map(|x| x[0][0][1]).sum::<f64>() / k as f64;
        assert!((mx - 0.4).abs() < 3.0 * 0.5 / (k as f64).sqrt());
        assert!((my + 0.3).abs() < 3.0 * 1.5 / (k as f64).sqrt());
    }

    #[test]
    fn samples_nest_across_k() {
        let f = field([0.1, 0.0], [0.3, 0.3], 0.1, 2, 3);
        let o = [[0.0, 0.0], [1.0, 0.0]];
        let a = sample_trajectories(&f, 5, 2, &o).unwrap();
        let b = sample_trajectories(&f, 6, 2, &o).unwrap();
        assert_eq!(a[..], b[..5]);
    }

    #[test]
    fn restore_ratio_cases() {
        assert_eq!(restore_ratio(0.4, 0.8, 0.4, 0.8).unwrap(), 0.0);
        assert_eq!(restore_ratio(0.5, 1.0, 0.4, 0.8).unwrap(), 0.25);
        assert!(restore_ratio(0.3, 0.6, 0.4, 0.8).unwrap() < 0.0);
        assert!(restore_ratio(0.5, 1.0, 0.0, 0.8).is_err());
    }
}
