//! Trajectory files, sliding-window instances and displacement transforms.
//!
//! Files use the processed ETH-UCY convention: one observation per line,
//! `frame_id agent_id x y`, separated by tabs or spaces. Ids may be written
//! as integral floats (`780.0`).

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawTrack {
    pub frame: i64,
    pub agent: i64,
    pub x: f64,
    pub y: f64,
}

/// One sliding-window sample. Arrays are indexed `[agent][frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryInstance {
    pub scene_id: String,
    pub start_frame: i64,
    pub agent_ids: Vec<i64>,
    pub obs_abs: Vec<Vec<Point>>,
    pub fut_abs: Vec<Vec<Point>>,
    pub obs_rel: Vec<Vec<Point>>,
    pub fut_rel: Vec<Vec<Point>>,
}

impl TrajectoryInstance {
    /// Builds the displacement views from absolute positions.
    pub fn from_absolute(
        scene_id: impl Into<String>,
        start_frame: i64,
        agent_ids: Vec<i64>,
        obs_abs: Vec<Vec<Point>>,
        fut_abs: Vec<Vec<Point>>,
    ) -> Self {
        let obs_rel = to_relative(&obs_abs);
        let fut_rel = obs_abs
            .iter()
            .zip(&fut_abs)
            .map(|(o, f)| {
                let mut prev = *o.last().expect("at least one observed frame");
                f.iter()
                    .map(|p| {
                        let d = [p[0] - prev[0], p[1] - prev[1]];
                        prev = *p;
                        d
                    })
                    .collect()
            })
            .collect();
        Self {
            scene_id: scene_id.into(),
            start_frame,
            agent_ids,
            obs_abs,
            fut_abs,
            obs_rel,
            fut_rel,
        }
    }

    pub fn agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn t_obs(&self) -> usize {
        self.obs_abs.first().map_or(0, Vec::len)
    }

    pub fn t_pred(&self) -> usize {
        self.fut_abs.first().map_or(0, Vec::len)
    }

    /// Last observed absolute position of each agent.
    pub fn last_observed(&self) -> Vec<Point> {
        self.obs_abs.iter().map(|o| *o.last().unwrap()).collect()
    }

    /// Copy with every absolute coordinate shifted by `offset`.
    pub fn translated(&self, offset: Point) -> Self {
        let shift = |rows: &Vec<Vec<Point>>| {
            rows.iter()
                .map(|r| r.iter().map(|p| [p[0] + offset[0], p[1] + offset[1]]).collect())
                .collect()
        };
        Self {
            obs_abs: shift(&self.obs_abs),
            fut_abs: shift(&self.fut_abs),
            ..self.clone()
        }
    }

    /// Copy with agents reordered so that new agent `k` is old agent `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pick = |rows: &Vec<Vec<Point>>| perm.iter().map(|&i| rows[i].clone()).collect();
        Self {
            scene_id: self.scene_id.clone(),
            start_frame: self.start_frame,
            agent_ids: perm.iter().map(|&i| self.agent_ids[i]).collect(),
            obs_abs: pick(&self.obs_abs),
            fut_abs: pick(&self.fut_abs),
            obs_rel: pick(&self.obs_rel),
            fut_rel: pick(&self.fut_rel),
        }
    }
}

fn parse_id(field: &str) -> Option<i64> {
    let v: f64 = field.parse().ok()?;
    (v.is_finite() && v.fract() == 0.0 && v.abs() < 9.0e15).then_some(v as i64)
}

/// Parses trajectory text. `source_name` labels parse errors.
pub fn parse_scene(text: &str, source_name: &str) -> Result<Vec<RawTrack>> {
    let mut tracks = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            source_name: source_name.to_string(),
            line: line_no,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let frame = parse_id(fields[0]).ok_or_else(|| err(format!("bad frame id {:?}", fields[0])))?;
        let agent = parse_id(fields[1]).ok_or_else(|| err(format!("bad agent id {:?}", fields[1])))?;
        let coord = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad coordinate {s:?}")))
        };
        let (x, y) = (coord(fields[2])?, coord(fields[3])?);
        if !seen.insert((frame, agent)) {
            return Err(Error::Data(format!(
                "{source_name}: line {line_no}: duplicate observation for frame {frame}, agent {agent}"
            )));
        }
        tracks.push(RawTrack { frame, agent, x, y });
    }
    tracks.sort_by_key(|t| (t.frame, t.agent));
    Ok(tracks)
}

pub fn load_scene(path: &Path) -> Result<Vec<RawTrack>> {
    let text = std::fs::read_to_string(path)?;
    parse_scene(&text, &path.display().to_string())
}

/// Tab-separated text with six decimals, one observation per line.
pub fn format_scene(tracks: &[RawTrack]) -> String {
    let mut out = String::with_capacity(tracks.len() * 32);
    for t in tracks {
        // Normalise -0.000000 so output bytes do not depend on tiny signs.
        let fx = if format!("{:.6}", t.x) == "-0.000000" { 0.0 } else { t.x };
        let fy = if format!("{:.6}", t.y) == "-0.000000" { 0.0 } else { t.y };
        let _ = writeln!(out, "{}\t{}\t{:.6}\t{:.6}", t.frame, t.agent, fx, fy);
    }
    out
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Cuts a scene into instances of `t_obs + t_pred` consecutive frames.
///
/// Frame spacing is the gcd of the gaps between distinct frame ids; window
/// starts advance by `stride` frames. Agents missing any frame of a window
/// are dropped from it and windows without a complete agent are skipped.
pub fn window_instances(
    scene_id: &str,
    tracks: &[RawTrack],
    t_obs: usize,
    t_pred: usize,
    stride: usize,
) -> Result<Vec<TrajectoryInstance>> {
    if t_obs == 0 || t_pred == 0 || stride == 0 {
        return Err(Error::Config(
            "t_obs, t_pred and stride must all be at least 1".into(),
        ));
    }
    let mut by_agent: BTreeMap<i64, BTreeMap<i64, Point>> = BTreeMap::new();
    for t in tracks {
        by_agent.entry(t.agent).or_default().insert(t.frame, [t.x, t.y]);
    }
    let mut frames: Vec<i64> = tracks.iter().map(|t| t.frame).collect();
    frames.sort_unstable();
    frames.dedup();
    let (Some(&first), Some(&last)) = (frames.first(), frames.last()) else {
        return Ok(Vec::new());
    };
    let step = frames.windows(2).fold(0, |g, w| gcd(g, w[1] - w[0])).max(1);
    let span = (t_obs + t_pred) as i64;
    let mut out = Vec::new();
    let mut start = first;
    while start + (span - 1) * step <= last {
        let window: Vec<i64> = (0..span).map(|k| start + k * step).collect();
        let mut ids = Vec::new();
        let mut obs = Vec::new();
        let mut fut = Vec::new();
        for (&agent, seq) in &by_agent {
            let pts: Option<Vec<Point>> = window.iter().map(|f| seq.get(f).copied()).collect();
            if let Some(pts) = pts {
                ids.push(agent);
                obs.push(pts[..t_obs].to_vec());
                fut.push(pts[t_obs..].to_vec());
            }
        }
        if !ids.is_empty() {
            out.push(TrajectoryInstance::from_absolute(scene_id, start, ids, obs, fut));
        }
        start += stride as i64 * step;
    }
    Ok(out)
}

/// Windows several scenes and merges them into one stream ordered by start
/// frame; equal starts keep scene order.
pub fn window_scenes(
    scenes: &[(String, Vec<RawTrack>)],
    t_obs: usize,
    t_pred: usize,
    stride: usize,
) -> Result<Vec<TrajectoryInstance>> {
    let mut all = Vec::new();
    for (name, tracks) in scenes {
        all.extend(window_instances(name, tracks, t_obs, t_pred, stride)?);
    }
    all.sort_by_key(|i| i.start_frame);
    Ok(all)
}

/// Loads every regular file of `dir` (sorted by name) or a single file.
pub fn load_dataset(path: &Path) -> Result<Vec<(String, Vec<RawTrack>)>> {
    if path.is_file() {
        return Ok(vec![(scene_name(path), load_scene(path)?)]);
    }
    let mut files: Vec<_> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "txt"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| Ok((scene_name(p), load_scene(p)?)))
        .collect()
}

fn scene_name(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// First differences along time with a zero first row.
pub fn to_relative(abs: &[Vec<Point>]) -> Vec<Vec<Point>> {
    abs.iter()
        .map(|seq| {
            let mut prev = seq.first().copied().unwrap_or([0.0, 0.0]);
            seq.iter()
                .map(|p| {
                    let d = [p[0] - prev[0], p[1] - prev[1]];
                    prev = *p;
                    d
                })
                .collect()
        })
        .collect()
}

/// Cumulative sum of displacements starting from `origin` for each agent.
pub fn to_absolute(rel: &[Vec<Point>], origin: &[Point]) -> Vec<Vec<Point>> {
    rel.iter()
        .zip(origin)
        .map(|(seq, o)| {
            let mut cur = *o;
            seq.iter()
                .map(|d| {
                    cur = [cur[0] + d[0], cur[1] + d[1]];
                    cur
                })
                .collect()
        })
        .collect()
}

/// Inverse of [`to_relative`]: recovers absolute positions from the
/// displacement rows and the first position.
pub fn integrate_relative(rel: &[Vec<Point>], first: &[Point]) -> Vec<Vec<Point>> {
    rel.iter()
        .zip(first)
        .map(|(seq, f)| {
            let mut cur = *f;
            seq.iter()
                .enumerate()
                .map(|(t, d)| {
                    if t > 0 {
                        cur = [cur[0] + d[0], cur[1] + d[1]];
                    }
                    cur
                })
                .collect()
        })
        .collect()
}
