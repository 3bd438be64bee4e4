//! Finite-difference audit of the full model's analytic gradients.

use std::time::Instant;

use eanet_autodiff::check::{central_difference, max_relative_error};
use eanet_autodiff::{Tape, Tensor};

use crate::data::TrajectoryInstance;
use crate::error::Result;
use crate::gaussian::{nll_loss, target_tensor};
use crate::graph::KernelKind;
use crate::model::{Head, Model, ModelConfig};
use crate::rng::Rng;
use crate::runtime::loss_and_grads;
use crate::synth::{scenario_instances, ScenarioKind, SyntheticScenarioSpec};
use crate::temporal::StackConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Added to every analytic gradient; a test hook that must make the check fail.
    pub perturb: Option<f64>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-8,
            perturb: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckCase {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
    pub tolerance: f64,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

/// Three-agent stagger instance with the default horizons.
pub fn toy_instance(seed: u64) -> Result<TrajectoryInstance> {
    let mut spec = SyntheticScenarioSpec::new(ScenarioKind::Stagger, seed);
    spec.agent_count = 3;
    spec.arena = 4.0;
    Ok(scenario_instances(&spec, 1, 8, 12)?.remove(0))
}

/// Two-layer model whose gate and layer mix are moved away from their
/// initial values so every gradient path is exercised.
pub fn toy_model(seed: u64) -> Result<Model> {
    let config = ModelConfig {
        kernel: KernelKind::MotionTrend,
        stack: StackConfig { layers: 2, agent_taps: 1 },
        ..Default::default()
    };
    let mut model = Model::new(config, seed)?;
    let mut rng = Rng::stream(seed, 99);
    for name in ["ea.theta", "ea.alpha", "ea.bias"] {
        let t = model.params.get_mut(name).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v += rng.uniform(-0.5, 0.5));
    }
    Ok(model)
}

fn case(name: String, analytic: &Tensor, numeric: &Tensor, opts: &GradcheckOptions) -> GradcheckCase {
    let analytic = match opts.perturb {
        Some(p) => analytic.map(|v| v + p),
        None => analytic.clone(),
    };
    let err = max_relative_error(&analytic, numeric, opts.floor);
    GradcheckCase {
        name,
        elements: numeric.numel(),
        max_rel_error: err,
        passed: err < opts.tolerance,
    }
}

/// Checks every parameter of a toy model under the expert-attention head,
/// plus the likelihood with respect to raw outputs.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let start = Instant::now();
    let inst = toy_instance(opts.seed)?;
    let model = toy_model(opts.seed)?;
    let step = loss_and_grads(&model, &inst, Head::Ea)?;
    let mut cases = Vec::new();
    for (k, (name, value)) in model.params.iter().enumerate() {
        let analytic = step.grads[k].clone().unwrap_or_else(|| Tensor::zeros(value.shape()));
        let numeric = central_difference(
            |probe| {
                let mut m = model.clone();
                *m.params.get_mut(name).unwrap() = probe.clone();
                loss_and_grads(&m, &inst, Head::Ea).map_or(f64::NAN, |s| s.loss)
            },
            value,
            opts.step,
        );
        cases.push(case(format!("model/{name}"), &analytic, &numeric, opts));
    }

    let mut rng = Rng::stream(opts.seed, 7);
    let raw = Tensor::from_fn(&[1, 12, 3, 5], |_| rng.uniform(-0.8, 0.8));
    let target = target_tensor(&inst.fut_rel);
    let eval = |r: &Tensor| -> Result<(f64, Option<Tensor>)> {
        let mut tape = Tape::new();
        let v = tape.leaf(r.clone());
        let loss = nll_loss(&mut tape, v, &target)?;
        let value = tape.value(loss).data()[0];
        let mut g = tape.backward(loss)?;
        Ok((value, g.take(v)))
    };
    let analytic = eval(&raw)?.1.unwrap();
    let numeric = central_difference(|r| eval(r).map_or(f64::NAN, |x| x.0), &raw, opts.step);
    cases.push(case("nll/raw".into(), &analytic, &numeric, opts));

    Ok(GradcheckReport {
        cases,
        tolerance: opts.tolerance,
        seconds: start.elapsed().as_secs_f64(),
    })
}
