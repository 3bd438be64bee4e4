//! Per-frame interaction graphs and the graph convolution over them.

use std::fmt;
use std::str::FromStr;

use eanet_autodiff::{Tape, Tensor, Var};

use crate::data::{Point, TrajectoryInstance};
use crate::error::{Error, Result};

/// Pairwise edge-weight function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelKind {
    /// `1 / (‖rᵢ − rⱼ‖ + ‖vᵢ − vⱼ‖)`: closeness plus similarity of the last
    /// frame's motion.
    MotionTrend,
    /// `1 / ‖vᵢ − vⱼ‖`.
    InverseDistance,
    /// `‖vᵢ − vⱼ‖` (far agents weigh more).
    L2,
    /// `exp(−‖vᵢ − vⱼ‖) / σ`.
    GaussianRbf(f64),
}

pub const DEFAULT_RBF_SIGMA: f64 = 1.0;

impl KernelKind {
    /// Numeric code used in checkpoints.
    pub fn code(&self) -> u8 {
        match self {
            Self::MotionTrend => 0,
            Self::InverseDistance => 1,
            Self::L2 => 2,
            Self::GaussianRbf(_) => 3,
        }
    }

    pub fn from_code(code: u8, sigma: f64) -> Result<Self> {
        match code {
            0 => Ok(Self::MotionTrend),
            1 => Ok(Self::InverseDistance),
            2 => Ok(Self::L2),
            3 if sigma > 0.0 => Ok(Self::GaussianRbf(sigma)),
            _ => Err(Error::Config(format!("unknown kernel code {code} (sigma {sigma})"))),
        }
    }

    pub fn rbf_sigma(&self) -> f64 {
        match self {
            Self::GaussianRbf(s) => *s,
            _ => DEFAULT_RBF_SIGMA,
        }
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    /// Accepts `motion_trend`, `inv_dist`, `l2`, `rbf` or `rbf:<sigma>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "motion_trend" => Ok(Self::MotionTrend),
            "inv_dist" => Ok(Self::InverseDistance),
            "l2" => Ok(Self::L2),
            "rbf" => Ok(Self::GaussianRbf(DEFAULT_RBF_SIGMA)),
            other => {
                let sigma = other
                    .strip_prefix("rbf:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "unknown kernel {other:?} (expected motion_trend|inv_dist|l2|rbf)"
                        ))
                    })?;
                if sigma > 0.0 && sigma.is_finite() {
                    Ok(Self::GaussianRbf(sigma))
                } else {
                    Err(Error::Config(format!("rbf sigma must be positive, got {sigma}")))
                }
            }
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MotionTrend => f.write_str("motion_trend"),
            Self::InverseDistance => f.write_str("inv_dist"),
            Self::L2 => f.write_str("l2"),
            Self::GaussianRbf(s) if *s == DEFAULT_RBF_SIGMA => f.write_str("rbf"),
            Self::GaussianRbf(s) => write!(f, "rbf:{s}"),
        }
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Edge weight between agents i and j; zero whenever their positions coincide.
pub fn kernel_weight(kind: KernelKind, vi: Point, vj: Point, ri: Point, rj: Point) -> f64 {
    let d = dist(vi, vj);
    if d == 0.0 {
        return 0.0;
    }
    match kind {
        KernelKind::MotionTrend => 1.0 / (dist(ri, rj) + d),
        KernelKind::InverseDistance => 1.0 / d,
        KernelKind::L2 => d,
        KernelKind::GaussianRbf(sigma) => (-d).exp() / sigma,
    }
}

/// `P×P` weighted adjacency with a zero diagonal.
pub fn build_adjacency(kind: KernelKind, positions: &[Point], motions: &[Point]) -> Result<Tensor> {
    let p = positions.len();
    if motions.len() != p {
        return Err(Error::Contract(format!(
            "positions ({p}) and motions ({}) disagree on agent count",
            motions.len()
        )));
    }
    let mut a = Tensor::zeros(&[p, p]);
    for i in 0..p {
        for j in (i + 1)..p {
            let w = kernel_weight(kind, positions[i], positions[j], motions[i], motions[j]);
            a.set(&[i, j], w);
            a.set(&[j, i], w);
        }
    }
    Ok(a)
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the row sums of `A + I`.
pub fn normalize(a: &Tensor) -> Result<Tensor> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Contract(format!("adjacency must be square, got {s:?}")));
    }
    let p = s[0];
    let mut with_self = a.clone();
    for i in 0..p {
        with_self.set(&[i, i], a.at(&[i, i]) + 1.0);
    }
    let deg: Vec<f64> = (0..p)
        .map(|i| with_self.data()[i * p..(i + 1) * p].iter().sum())
        .collect();
    Ok(Tensor::from_fn(&[p, p], |k| {
        let (i, j) = (k / p, k % p);
        with_self.data()[k] / (deg[i] * deg[j]).sqrt()
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameGraph {
    pub positions: Vec<Point>,
    pub motions: Vec<Point>,
    pub adjacency: Tensor,
    pub normalized: Tensor,
}

impl FrameGraph {
    pub fn new(kind: KernelKind, positions: Vec<Point>, motions: Vec<Point>) -> Result<Self> {
        let adjacency = build_adjacency(kind, &positions, &motions)?;
        let normalized = normalize(&adjacency)?;
        Ok(Self {
            positions,
            motions,
            adjacency,
            normalized,
        })
    }
}

/// Graph inputs of one instance: normalized adjacency `T_obs×P×P` and node
/// features (per-frame displacements) `T_obs×P×2`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInputs {
    pub adjacency: Tensor,
    pub features: Tensor,
}

pub fn frame_graphs(inst: &TrajectoryInstance, kind: KernelKind) -> Result<Vec<FrameGraph>> {
    (0..inst.t_obs())
        .map(|t| {
            let v = inst.obs_abs.iter().map(|s| s[t]).collect();
            let r = inst.obs_rel.iter().map(|s| s[t]).collect();
            FrameGraph::new(kind, v, r)
        })
        .collect()
}

pub fn graph_inputs(inst: &TrajectoryInstance, kind: KernelKind) -> Result<GraphInputs> {
    let (t_obs, p) = (inst.t_obs(), inst.agents());
    if p == 0 || t_obs == 0 {
        return Err(Error::Contract("instance has no agents or frames".into()));
    }
    let mut adjacency = Vec::with_capacity(t_obs * p * p);
    for g in frame_graphs(inst, kind)? {
        adjacency.extend_from_slice(g.normalized.data());
    }
    let mut features = Vec::with_capacity(t_obs * p * 2);
    for t in 0..t_obs {
        for seq in &inst.obs_rel {
            features.extend_from_slice(&seq[t]);
        }
    }
    Ok(GraphInputs {
        adjacency: Tensor::new(vec![t_obs, p, p], adjacency)?,
        features: Tensor::new(vec![t_obs, p, 2], features)?,
    })
}

/// `sigmoid(Â_t · X_t · W)` for every frame: `T×P×P`, `T×P×F`, `F×D` → `T×P×D`.
pub fn gcn_forward(tape: &mut Tape, adjacency: Var, features: Var, weight: Var) -> Result<Var> {
    let sx = tape.shape(features).to_vec();
    let sw = tape.shape(weight).to_vec();
    if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[2] {
        return Err(eanet_autodiff::TensorError::Shape {
            op: "gcn_forward",
            lhs: sx,
            rhs: sw,
        }
        .into());
    }
    let (t, p, f) = (sx[0], sx[1], sx[2]);
    let d = sw[1];
    let mixed = tape.batch_matmul(adjacency, features)?;
    let flat = tape.reshape(mixed, &[t * p, f])?;
    let proj = tape.matmul(flat, weight)?;
    let proj = tape.reshape(proj, &[t, p, d])?;
    Ok(tape.sigmoid(proj))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coincident_positions_give_zero() {
        for kind in [
            KernelKind::MotionTrend,
            KernelKind::InverseDistance,
            KernelKind::L2,
            KernelKind::GaussianRbf(1.0),
        ] {
            assert_eq!(kernel_weight(kind, [1.0, 2.0], [1.0, 2.0], [0.3, 0.0], [0.0, 0.1]), 0.0);
        }
    }

    #[test]
    fn motion_trend_hand_values() {
        let w = kernel_weight(KernelKind::MotionTrend, [0.0, 0.0], [3.0, 4.0], [0.2, 0.2], [0.2, 0.2]);
        assert_eq!(w, 0.2);
        let w = kernel_weight(KernelKind::MotionTrend, [0.0, 0.0], [3.0, 4.0], [1.0, 0.0], [0.0, 1.0]);
        assert!((w - 1.0 / (2f64.sqrt() + 5.0)).abs() < 1e-15);
        assert!((w - 0.155903).abs() < 1e-6);
    }

    #[test]
    fn ablation_kernels() {
        let (a, b, r) = ([0.0, 0.0], [3.0, 4.0], [0.0, 0.0]);
        assert_eq!(kernel_weight(KernelKind::InverseDistance, a, b, r, r), 0.2);
        assert_eq!(kernel_weight(KernelKind::L2, a, b, r, r), 5.0);
        assert!((kernel_weight(KernelKind::GaussianRbf(2.0), a, b, r, r) - (-5.0f64).exp() / 2.0).abs() < 1e-18);
    }

    #[test]
    fn adjacency_cases() {
        let a = build_adjacency(KernelKind::MotionTrend, &[[1.0, 1.0]], &[[0.0, 0.0]]).unwrap();
        assert_eq!(a.data(), &[0.0]);
        let a = build_adjacency(KernelKind::MotionTrend, &[[1.0, 1.0]; 2], &[[0.0, 0.0]; 2]).unwrap();
        assert_eq!(a.data(), &[0.0; 4]);
        let pos = [[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]];
        let a = build_adjacency(KernelKind::MotionTrend, &pos, &[[0.0, 0.0]; 3]).unwrap();
        assert_eq!(a.at(&[0, 1]), 1.0);
        assert_eq!(a.at(&[0, 2]), 0.5);
        assert!((a.at(&[1, 2]) - 1.0 / 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(a.at(&[2, 1]), a.at(&[1, 2]));
        assert!((0..3).all(|i| a.at(&[i, i]) == 0.0));
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(normalize(&Tensor::zeros(&[3, 3])).unwrap(), {
            let mut i = Tensor::zeros(&[3, 3]);
            (0..3).for_each(|k| i.set(&[k, k], 1.0));
            i
        });
        let a = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let n = normalize(&a).unwrap();
        assert!(n.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
        assert!(normalize(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn kernel_strings() {
        for s in ["motion_trend", "inv_dist", "l2", "rbf", "rbf:0.5"] {
            assert_eq!(s.parse::<KernelKind>().unwrap().to_string(), s);
        }
        assert!("cosine".parse::<KernelKind>().is_err());
        assert!("rbf:-1".parse::<KernelKind>().is_err());
    }

    #[test]
    fn gcn_zero_weight_is_half() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 3, 3], 1.0 / 3.0));
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let w = tape.leaf(Tensor::zeros(&[2, 5]));
        let y = gcn_forward(&mut tape, a, x, w).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 5]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.5));
    }
}
