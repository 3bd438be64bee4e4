//! Offline training, the prequential online loop, gradient clipping and
//! run-health classification.

use std::fmt;
use std::str::FromStr;

use eanet_autodiff::{Tape, Tensor};

use crate::attention::{ExpertTrace, HedgeState, Strategy, DEFAULT_HEDGE_BETA, DEFAULT_HEDGE_SMOOTHING};
use crate::data::TrajectoryInstance;
use crate::error::{Error, Result};
use crate::gaussian::{
    ade_fde, best_of_k, decode_gaussian, nll_loss, nll_value, restore_ratio, target_tensor,
};
use crate::model::{Head, Model, ModelConfig};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_after: f64,
    /// First epoch (0-based) that uses `lr_after`.
    pub lr_drop_epoch: usize,
    /// Optional clip on the averaged batch gradient.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 128,
            lr: 0.01,
            lr_after: 0.002,
            lr_drop_epoch: 150,
            clip_norm: Some(10.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr_after > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr_after
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// Loss and per-parameter gradients for one instance.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: f64,
    pub grads: Vec<Option<Tensor>>,
    pub raw: Tensor,
    pub layers: Vec<Tensor>,
    pub trace: Option<ExpertTrace>,
}

pub fn loss_and_grads(model: &Model, inst: &TrajectoryInstance, head: Head<'_>) -> Result<StepResult> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, inst, head)?;
    let loss = nll_loss(&mut tape, fwd.raw, &target_tensor(&inst.fut_rel))?;
    let value = tape.value(loss).data()[0];
    let raw = tape.value(fwd.raw).clone();
    let layers = fwd.layers.iter().map(|v| tape.value(*v).clone()).collect();
    if !value.is_finite() {
        return Ok(StepResult {
            loss: value,
            grads: vec![None; fwd.params.len()],
            raw,
            layers,
            trace: fwd.trace,
        });
    }
    let mut g = tape.backward(loss)?;
    Ok(StepResult {
        loss: value,
        grads: fwd.params.iter().map(|p| g.take(*p)).collect(),
        raw,
        layers,
        trace: fwd.trace,
    })
}

pub fn global_norm(grads: &[Option<Tensor>]) -> f64 {
    grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

fn sgd_step(model: &mut Model, grads: &[Option<Tensor>], lr: f64, include: impl Fn(&str) -> bool) {
    let names: Vec<String> = model.params.names().to_vec();
    for ((name, p), g) in names.iter().zip(model.params.tensors_mut()).zip(grads) {
        if let Some(g) = g {
            if include(name) {
                for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d;
                }
            }
        }
    }
}

fn accumulate(acc: &mut [Option<Tensor>], grads: Vec<Option<Tensor>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

/// Minimizes the deepest-layer likelihood loss with minibatch SGD. A batch
/// accumulates per-instance gradients, averages them and takes one step.
pub fn train_offline(
    model: &mut Model,
    data: &[TrajectoryInstance],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut rng = Rng::stream(config.seed, 1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let lr = config.lr_at(epoch);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Vec<Option<Tensor>> = vec![None; model.params.len()];
            for &i in batch {
                let step = loss_and_grads(model, &data[i], Head::Plain)?;
                if !step.loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {} at epoch {epoch}, instance {i}",
                        step.loss
                    )));
                }
                total += step.loss;
                accumulate(&mut acc, step.grads);
            }
            let inv = 1.0 / batch.len() as f64;
            for g in acc.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            if let Some(c) = config.clip_norm {
                clip_global_norm(&mut acc, c);
            }
            if !global_norm(&acc).is_finite() {
                return Err(Error::NonFinite(format!("gradient at epoch {epoch}")));
            }
            sgd_step(model, &acc, lr, |_| true);
        }
        let entry = EpochLog {
            epoch,
            lr,
            mean_loss: total / data.len() as f64,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Alignment {
    #[default]
    None,
    Recentre,
}

impl FromStr for Alignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "recentre" => Ok(Self::Recentre),
            other => Err(Error::Config(format!(
                "unknown alignment {other:?} (expected none|recentre)"
            ))),
        }
    }
}

impl fmt::Display for Alignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Recentre => "recentre",
        })
    }
}

/// Translates `inst` so the centroid of the last observed positions is the origin.
pub fn recentre(inst: &TrajectoryInstance) -> TrajectoryInstance {
    let last = inst.last_observed();
    let n = last.len() as f64;
    let c = last.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
    inst.translated([-c[0] / n, -c[1] / n])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HealthThresholds {
    pub explode: f64,
    pub vanish: f64,
    pub vanish_run: usize,
}

impl Default for HealthThresholds {
    fn default() -> Self {
        Self {
            explode: 1e3,
            vanish: 1e-8,
            vanish_run: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HealthKind {
    #[default]
    Normal,
    Exploded,
    Vanished,
}

impl fmt::Display for HealthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Normal => "normal",
            Self::Exploded => "exploded",
            Self::Vanished => "vanished",
        })
    }
}

impl FromStr for HealthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Self::Normal),
            "exploded" => Ok(Self::Exploded),
            "vanished" => Ok(Self::Vanished),
            other => Err(Error::Data(format!("unknown health label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HealthStatus {
    pub kind: HealthKind,
    /// Update index at which the status was first triggered.
    pub first_trigger: Option<usize>,
}

/// Whichever of explosion (non-finite value or pre-clip norm above
/// `explode`) and vanishing (`vanish_run` consecutive norms below `vanish`)
/// happens first decides the run.
pub fn classify_health(grad_norms: &[f64], losses: &[f64], th: &HealthThresholds) -> HealthStatus {
    let mut run = 0usize;
    for (i, &g) in grad_norms.iter().enumerate() {
        let loss = losses.get(i).copied().unwrap_or(0.0);
        if !g.is_finite() || !loss.is_finite() || g > th.explode {
            return HealthStatus {
                kind: HealthKind::Exploded,
                first_trigger: Some(i),
            };
        }
        run = if g < th.vanish { run + 1 } else { 0 };
        if run >= th.vanish_run {
            return HealthStatus {
                kind: HealthKind::Vanished,
                first_trigger: Some(i),
            };
        }
    }
    if let Some(i) = losses.iter().skip(grad_norms.len()).position(|l| !l.is_finite()) {
        return HealthStatus {
            kind: HealthKind::Exploded,
            first_trigger: Some(grad_norms.len() + i),
        };
    }
    HealthStatus::default()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseMetrics {
    pub ade: f64,
    pub fde: f64,
}

/// Instances scored by best-of-K at restore-ratio checkpoints.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub instances: Vec<TrajectoryInstance>,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineConfig {
    pub lr: f64,
    /// `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub updates_per_instance: usize,
    pub max_instances: usize,
    pub alignment: Alignment,
    pub strategy: Strategy,
    pub rr_checkpoints: Vec<usize>,
    /// Instances averaged for a checkpoint when no probe set is given.
    pub rr_window: usize,
    pub hedge_beta: f64,
    pub hedge_smoothing: f64,
    pub health: HealthThresholds,
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            clip_norm: Some(1.0),
            updates_per_instance: 1,
            max_instances: 1000,
            alignment: Alignment::None,
            strategy: Strategy::Ea,
            rr_checkpoints: vec![0, 100, 1000],
            rr_window: 50,
            hedge_beta: DEFAULT_HEDGE_BETA,
            hedge_smoothing: DEFAULT_HEDGE_SMOOTHING,
            health: HealthThresholds::default(),
            seed: 0,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("online lr must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        if self.max_instances == 0 || self.updates_per_instance == 0 {
            return Err(Error::Config(
                "max_instances and updates_per_instance must be at least 1".into(),
            ));
        }
        if self.rr_window == 0 {
            return Err(Error::Config("rr_window must be at least 1".into()));
        }
        Ok(())
    }
}

/// One row of the stream report.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamRecord {
    pub instance_idx: usize,
    pub ade: f64,
    pub fde: f64,
    pub rr: Option<f64>,
    pub loss: f64,
    /// Norm actually applied (after clipping).
    pub grad_norm: f64,
    pub grad_norm_pre: f64,
    pub health: HealthKind,
    /// Gate means (ea) or layer weights (hedge).
    pub expert: Vec<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RrPoint {
    pub instance: usize,
    pub ade: f64,
    pub fde: f64,
    pub rr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct OnlineOutcome {
    pub records: Vec<StreamRecord>,
    pub health: HealthStatus,
    pub checkpoints: Vec<RrPoint>,
    pub model: Model,
    pub hedge: Option<HedgeState>,
}

fn head_for<'a>(strategy: Strategy, hedge: &'a Option<HedgeState>) -> Head<'a> {
    match (strategy, hedge) {
        (Strategy::Ea, _) => Head::Ea,
        (Strategy::Hedge, Some(h)) => Head::Hedge(&h.weights),
        _ => Head::Plain,
    }
}

/// Mean best-of-K metrics over `instances`; instance `i` samples with seed `seed + i`.
pub fn evaluate(
    model: &Model,
    instances: &[TrajectoryInstance],
    head: Head<'_>,
    samples: usize,
    seed: u64,
) -> Result<BaseMetrics> {
    if instances.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let (mut ade, mut fde) = (0.0, 0.0);
    for (i, inst) in instances.iter().enumerate() {
        let pred = model.predict(inst, head)?;
        let r = best_of_k(
            &pred.field,
            &inst.last_observed(),
            &inst.fut_abs,
            samples,
            seed.wrapping_add(i as u64),
        )?;
        ade += r.ade;
        fde += r.fde;
    }
    let n = instances.len() as f64;
    Ok(BaseMetrics {
        ade: ade / n,
        fde: fde / n,
    })
}

/// Mean-trajectory ADE/FDE for one instance.
pub fn mean_metrics(field: &crate::gaussian::GaussianField, inst: &TrajectoryInstance) -> Result<(f64, f64)> {
    ade_fde(&field.mean_trajectory(&inst.last_observed()), &inst.fut_abs)
}

/// Test-then-train over `stream`: every instance is scored with the current
/// parameters and then used for `updates_per_instance` SGD steps.
pub fn run_online(
    model: &Model,
    stream: &[TrajectoryInstance],
    config: &OnlineConfig,
    base: Option<BaseMetrics>,
    probe: Option<&ProbeSet>,
) -> Result<OnlineOutcome> {
    config.validate()?;
    let mut model = model.clone();
    let layers = model.config.layers();
    let mut hedge = match config.strategy {
        Strategy::Hedge => Some(HedgeState::new(layers, config.hedge_beta, config.hedge_smoothing)?),
        _ => None,
    };
    let train_ea = config.strategy == Strategy::Ea;
    let include = |name: &str| train_ea || !name.starts_with("ea.");
    let n = stream.len().min(config.max_instances);
    let mut records = Vec::with_capacity(n);
    let mut checkpoints = Vec::new();
    let mut probe_points: Vec<(usize, BaseMetrics)> = Vec::new();
    let (mut norm_hist, mut loss_hist) = (Vec::new(), Vec::new());
    let mut hist_instance = Vec::new();
    let mut vanish_run = 0usize;

    for (idx, raw_inst) in stream.iter().take(n).enumerate() {
        if let Some(p) = probe {
            if config.rr_checkpoints.contains(&idx) {
                let head = head_for(config.strategy, &hedge);
                probe_points.push((idx, evaluate(&model, &p.instances, head, p.samples, p.seed)?));
            }
        }
        let inst = match config.alignment {
            Alignment::None => raw_inst.clone(),
            Alignment::Recentre => recentre(raw_inst),
        };
        let mut record = StreamRecord {
            instance_idx: idx,
            ade: f64::NAN,
            fde: f64::NAN,
            rr: None,
            loss: f64::NAN,
            grad_norm: f64::NAN,
            grad_norm_pre: f64::NAN,
            health: HealthKind::Normal,
            expert: Vec::new(),
            alpha: Vec::new(),
        };
        for update in 0..config.updates_per_instance {
            let head = head_for(config.strategy, &hedge);
            let mut step = loss_and_grads(&model, &inst, head)?;
            if update == 0 {
                record.loss = step.loss;
                if let Ok(fields) = decode_gaussian(&step.raw) {
                    let (ade, fde) = mean_metrics(&fields[0], &inst)?;
                    record.ade = ade;
                    record.fde = fde;
                    record.rr = match base {
                        Some(b) => Some(restore_ratio(ade, fde, b.ade, b.fde)?),
                        None => None,
                    };
                }
                match (&step.trace, &hedge) {
                    (Some(t), _) => {
                        record.expert = t.gate.clone();
                        record.alpha = t.alpha.clone();
                    }
                    (None, Some(h)) => record.expert = h.weights.clone(),
                    _ => {}
                }
            }
            let pre = match config.clip_norm {
                Some(c) => clip_global_norm(&mut step.grads, c),
                None => global_norm(&step.grads),
            };
            let loss_ok = step.loss.is_finite();
            let post = if loss_ok { global_norm(&step.grads) } else { f64::NAN };
            norm_hist.push(if loss_ok { pre } else { f64::NAN });
            loss_hist.push(step.loss);
            hist_instance.push(idx);
            record.grad_norm_pre = if loss_ok { pre } else { f64::NAN };
            record.grad_norm = post;
            let exploded = !loss_ok || !pre.is_finite() || pre > config.health.explode;
            vanish_run = if loss_ok && pre < config.health.vanish { vanish_run + 1 } else { 0 };
            if exploded {
                record.health = HealthKind::Exploded;
            } else if vanish_run >= config.health.vanish_run {
                record.health = HealthKind::Vanished;
            }
            if !loss_ok || !post.is_finite() {
                // Skip the update; the census counts the event.
                break;
            }
            sgd_step(&mut model, &step.grads, config.lr, include);
            if let Some(h) = hedge.as_mut() {
                let target = &inst.fut_rel;
                let losses: Vec<f64> = step
                    .layers
                    .iter()
                    .map(|m| match decode_gaussian(m) {
                        Ok(f) => nll_value(&f[0], target).unwrap_or(f64::NAN),
                        Err(_) => f64::NAN,
                    })
                    .collect();
                if h.update(&losses).is_err() {
                    record.health = HealthKind::Exploded;
                }
            }
        }
        records.push(record);
    }
    if let Some(p) = probe {
        if config.rr_checkpoints.contains(&n) {
            let head = head_for(config.strategy, &hedge);
            probe_points.push((n, evaluate(&model, &p.instances, head, p.samples, p.seed)?));
        }
    }

    let rr_of = |m: BaseMetrics| -> Result<Option<f64>> {
        base.map(|b| restore_ratio(m.ade, m.fde, b.ade, b.fde)).transpose()
    };
    if probe.is_some() {
        for (instance, m) in probe_points {
            checkpoints.push(RrPoint {
                instance,
                ade: m.ade,
                fde: m.fde,
                rr: rr_of(m)?,
            });
        }
    } else {
        for &c in &config.rr_checkpoints {
            if c >= records.len() {
                continue;
            }
            let window: Vec<&StreamRecord> = records[c..]
                .iter()
                .take(config.rr_window)
                .filter(|r| r.ade.is_finite())
                .collect();
            if window.is_empty() {
                continue;
            }
            let k = window.len() as f64;
            let m = BaseMetrics {
                ade: window.iter().map(|r| r.ade).sum::<f64>() / k,
                fde: window.iter().map(|r| r.fde).sum::<f64>() / k,
            };
            checkpoints.push(RrPoint {
                instance: c,
                ade: m.ade,
                fde: m.fde,
                rr: rr_of(m)?,
            });
        }
    }

    let mut health = classify_health(&norm_hist, &loss_hist, &config.health);
    health.first_trigger = health.first_trigger.map(|u| hist_instance[u]);
    Ok(OnlineOutcome {
        records,
        health,
        checkpoints,
        model,
        hedge,
    })
}

/// Splits `data` 80/20 in order; an empty test side falls back to the train side.
pub fn split_train_test(data: &[TrajectoryInstance]) -> (&[TrajectoryInstance], &[TrajectoryInstance]) {
    let cut = (data.len() * 4).div_ceil(5);
    let (train, test) = data.split_at(cut);
    if test.is_empty() {
        (train, train)
    } else {
        (train, test)
    }
}

/// Trains a fresh model on the first 80% of `data` and scores best-of-K on
/// the rest.
pub fn compute_base(
    data: &[TrajectoryInstance],
    model_config: &ModelConfig,
    train: &TrainConfig,
    samples: usize,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(BaseMetrics, Model)> {
    let (train_set, test_set) = split_train_test(data);
    if train_set.is_empty() {
        return Err(Error::Data("base dataset is empty".into()));
    }
    let mut model = Model::new(*model_config, train.seed)?;
    train_offline(&mut model, train_set, train, on_epoch)?;
    let m = evaluate(&model, test_set, Head::Plain, samples, train.seed)?;
    Ok((m, model))
}
