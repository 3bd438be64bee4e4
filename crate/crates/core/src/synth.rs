//! Synthetic crowd scenarios for desk-scale scenario-shift experiments.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, TAU};
use std::fmt;
use std::str::FromStr;

use crate::data::{window_instances, RawTrack, TrajectoryInstance};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_T_OBS: usize = 8;
pub const DEFAULT_T_PRED: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    /// Everyone walks +x in parallel lanes.
    Oneway,
    /// Agents orbit a shared circular intersection in both directions.
    Circle,
    /// Piecewise-straight walks whose heading turns by 45°–90° every period.
    Stagger,
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oneway" => Ok(Self::Oneway),
            "circle" => Ok(Self::Circle),
            "stagger" => Ok(Self::Stagger),
            other => Err(Error::Config(format!(
                "unknown scenario kind {other:?} (expected oneway|circle|stagger)"
            ))),
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Oneway => "oneway",
            Self::Circle => "circle",
            Self::Stagger => "stagger",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScenarioSpec {
    pub kind: ScenarioKind,
    pub agent_count: usize,
    /// Metres per frame.
    pub speed: f64,
    /// Standard deviation of the per-frame position jitter, metres.
    pub noise_std: f64,
    /// Frames between heading changes (stagger only).
    pub period: usize,
    /// Side of the spawn square; the circle scenario uses it as diameter.
    pub arena: f64,
    pub seed: u64,
}

impl SyntheticScenarioSpec {
    pub fn new(kind: ScenarioKind, seed: u64) -> Self {
        Self {
            kind,
            agent_count: 6,
            speed: 0.4,
            noise_std: 0.02,
            period: 6,
            arena: 10.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.agent_count == 0 {
            return Err(Error::Config("agent_count must be at least 1".into()));
        }
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(Error::Config(format!("speed must be positive, got {}", self.speed)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            )));
        }
        if !(self.arena > 0.0 && self.arena.is_finite()) {
            return Err(Error::Config(format!("arena must be positive, got {}", self.arena)));
        }
        if self.kind == ScenarioKind::Stagger && self.period == 0 {
            return Err(Error::Config("stagger period must be at least 1".into()));
        }
        Ok(())
    }
}

/// Deterministic tracks for `frames` frames (ids `0..frames`, agents `1..=n`).
pub fn generate_synthetic(spec: &SyntheticScenarioSpec, frames: usize) -> Result<Vec<RawTrack>> {
    spec.validate()?;
    if frames <= DEFAULT_T_OBS + DEFAULT_T_PRED {
        return Err(Error::Config(format!(
            "need more than {} frames, got {frames}",
            DEFAULT_T_OBS + DEFAULT_T_PRED
        )));
    }
    let n = spec.agent_count;
    let mut layout = Rng::stream(spec.seed, 0);
    let mut jitter = Rng::stream(spec.seed, 1);
    let paths: Vec<Vec<[f64; 2]>> = match spec.kind {
        ScenarioKind::Oneway => {
            let lane = spec.arena / n as f64;
            (0..n)
                .map(|k| {
                    let x0 = if k == 0 {
                        0.0
                    } else {
                        layout.uniform(-0.25, 0.25) * spec.arena
                    };
                    let y0 = k as f64 * lane;
                    (0..frames)
                        .map(|t| [x0 + spec.speed * t as f64, y0])
                        .collect()
                })
                .collect()
        }
        ScenarioKind::Circle => {
            let radius = spec.arena / 2.0;
            let omega = spec.speed / radius;
            (0..n)
                .map(|k| {
                    let theta0 = TAU * k as f64 / n as f64 + layout.uniform(-0.1, 0.1);
                    let dir = if k % 2 == 0 { 1.0 } else { -1.0 };
                    (0..frames)
                        .map(|t| {
                            let a = theta0 + dir * omega * t as f64;
                            [radius * a.cos(), radius * a.sin()]
                        })
                        .collect()
                })
                .collect()
        }
        ScenarioKind::Stagger => (0..n)
            .map(|_| {
                let mut p = [
                    layout.uniform(0.0, spec.arena),
                    layout.uniform(0.0, spec.arena),
                ];
                let mut heading = layout.uniform(0.0, TAU);
                let phase = layout.below(spec.period);
                let mut path = Vec::with_capacity(frames);
                for t in 0..frames {
                    if t > 0 {
                        if (t + phase) % spec.period == 0 {
                            let turn = layout.uniform(FRAC_PI_4, FRAC_PI_2);
                            heading += if layout.next_f64() < 0.5 { turn } else { -turn };
                        }
                        p = [
                            p[0] + spec.speed * heading.cos(),
                            p[1] + spec.speed * heading.sin(),
                        ];
                    }
                    path.push(p);
                }
                path
            })
            .collect(),
    };
    let mut tracks = Vec::with_capacity(n * frames);
    for t in 0..frames {
        for (k, path) in paths.iter().enumerate() {
            let (mut x, mut y) = (path[t][0], path[t][1]);
            if spec.noise_std > 0.0 {
                x += spec.noise_std * jitter.normal();
                y += spec.noise_std * jitter.normal();
            }
            tracks.push(RawTrack {
                frame: t as i64,
                agent: k as i64 + 1,
                x,
                y,
            });
        }
    }
    Ok(tracks)
}

/// Exactly `count` stride-1 instances drawn from one generated scene.
pub fn scenario_instances(
    spec: &SyntheticScenarioSpec,
    count: usize,
    t_obs: usize,
    t_pred: usize,
) -> Result<Vec<TrajectoryInstance>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let frames = (count + t_obs + t_pred - 1).max(DEFAULT_T_OBS + DEFAULT_T_PRED + 1);
    let tracks = generate_synthetic(spec, frames)?;
    let mut inst = window_instances(&spec.kind.to_string(), &tracks, t_obs, t_pred, 1)?;
    inst.truncate(count);
    Ok(inst)
}

/// Instances from scenario A followed by instances from scenario B.
#[derive(Debug, Clone)]
pub struct ShiftStream {
    pub instances: Vec<TrajectoryInstance>,
    /// Index of the first scenario-B instance.
    pub boundary: usize,
}

pub fn make_shift_stream(
    a: &SyntheticScenarioSpec,
    b: &SyntheticScenarioSpec,
    n_a: usize,
    n_b: usize,
    t_obs: usize,
    t_pred: usize,
) -> Result<ShiftStream> {
    let mut instances = scenario_instances(a, n_a, t_obs, t_pred)?;
    let boundary = instances.len();
    instances.extend(scenario_instances(b, n_b, t_obs, t_pred)?);
    Ok(ShiftStream {
        instances,
        boundary,
    })
}

/// Circular variance (0 = all parallel, 1 = uniform) of the non-zero observed
/// displacement directions across `instances`.
pub fn direction_dispersion(instances: &[TrajectoryInstance]) -> f64 {
    let (mut cx, mut cy, mut n) = (0.0, 0.0, 0usize);
    for inst in instances {
        for seq in &inst.obs_rel {
            for d in seq.iter().skip(1) {
                let norm = d[0].hypot(d[1]);
                if norm > 0.0 {
                    cx += d[0] / norm;
                    cy += d[1] / norm;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return 0.0;
    }
    1.0 - (cx / n as f64).hypot(cy / n as f64)
}
