//! The full network: graph convolution, time expansion, the residual stack
//! and an output head, with named parameters.

use eanet_autodiff::{Tape, Tensor, Var};

use crate::attention::{ea_output, hedge_output, plain_output, EAParams, ExpertTrace, Strategy};
use crate::data::TrajectoryInstance;
use crate::error::{Error, Result};
use crate::gaussian::{decode_gaussian, GaussianField, GAUSSIAN_DIM};
use crate::graph::{gcn_forward, graph_inputs, KernelKind};
use crate::rng::Rng;
use crate::synth::{DEFAULT_T_OBS, DEFAULT_T_PRED};
use crate::temporal::{init_kernel, stack_forward, time_expand, StackConfig, PRELU_INIT};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub t_obs: usize,
    pub t_pred: usize,
    pub kernel: KernelKind,
    pub stack: StackConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t_obs: DEFAULT_T_OBS,
            t_pred: DEFAULT_T_PRED,
            kernel: KernelKind::MotionTrend,
            stack: StackConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_obs < 2 || self.t_pred < 1 {
            return Err(Error::Config(format!(
                "need t_obs >= 2 and t_pred >= 1, got {} and {}",
                self.t_obs, self.t_pred
            )));
        }
        self.stack.validate()
    }

    pub fn layers(&self) -> usize {
        self.stack.layers
    }

    /// Parameter names and shapes, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = GAUSSIAN_DIM;
        let l = self.stack.layers;
        let mut specs = vec![
            ("gcn.weight".to_string(), vec![2, d]),
            ("expand.kernel".to_string(), self.stack.kernel_shape(self.t_pred, self.t_obs).to_vec()),
        ];
        for i in 0..l {
            specs.push((
                format!("stack.{i}.kernel"),
                self.stack.kernel_shape(self.t_pred, self.t_pred).to_vec(),
            ));
            specs.push((format!("stack.{i}.slope"), vec![1]));
        }
        specs.push(("ea.theta".to_string(), vec![d, 1]));
        specs.push(("ea.bias".to_string(), vec![1]));
        specs.push(("ea.alpha".to_string(), vec![l]));
        specs
    }
}

/// Named tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        let (names, tensors) = entries.into_iter().unzip();
        Self { names, tensors }
    }

    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let ea = EAParams::initial(GAUSSIAN_DIM, config.layers());
        let entries = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let t = match name.as_str() {
                    "gcn.weight" => {
                        let b = 1.0 / (shape[0] as f64).sqrt();
                        Tensor::from_fn(&shape, |_| rng.uniform(-b, b))
                    }
                    "ea.theta" => ea.theta.clone(),
                    "ea.bias" => ea.bias.clone(),
                    "ea.alpha" => ea.alpha.clone(),
                    n if n.ends_with(".slope") => Tensor::from_vec(vec![PRELU_INIT]),
                    _ => init_kernel([shape[0], shape[1], shape[2], shape[3]], rng),
                };
                (name, t)
            })
            .collect();
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    /// Checks that names and shapes match `config` exactly.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let specs = config.param_specs();
        if specs.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                self.len()
            )));
        }
        for ((name, shape), (got, t)) in specs.iter().zip(self.iter()) {
            if name != got {
                return Err(Error::Checkpoint(format!("unexpected tensor {got:?}, wanted {name:?}")));
            }
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, wanted {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// How the stacked outputs become the prediction.
#[derive(Debug, Clone, Copy)]
pub enum Head<'a> {
    Plain,
    Ea,
    Hedge(&'a [f64]),
}

impl Head<'_> {
    pub fn strategy(&self) -> Strategy {
        match self {
            Self::Plain => Strategy::Plain,
            Self::Ea => Strategy::Ea,
            Self::Hedge(_) => Strategy::Hedge,
        }
    }
}

/// Nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `1×T_pred×P×5`.
    pub raw: Var,
    pub layers: Vec<Var>,
    /// One leaf per parameter, in [`ParamSet`] order.
    pub params: Vec<Var>,
    pub trace: Option<ExpertTrace>,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub raw: Tensor,
    pub field: GaussianField,
    pub trace: Option<ExpertTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let params = ParamSet::init(&config, &mut rng);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(Self { config, params })
    }

    fn check_instance(&self, inst: &TrajectoryInstance) -> Result<()> {
        if inst.t_obs() != self.config.t_obs {
            return Err(Error::Contract(format!(
                "instance has {} observed frames, model expects {}",
                inst.t_obs(),
                self.config.t_obs
            )));
        }
        if inst.agents() == 0 {
            return Err(Error::Contract("instance has no agents".into()));
        }
        Ok(())
    }

    /// Records the forward pass for `inst` on `tape`.
    pub fn forward(&self, tape: &mut Tape, inst: &TrajectoryInstance, head: Head<'_>) -> Result<Forward> {
        self.check_instance(inst)?;
        let l = self.config.layers();
        let params: Vec<Var> = self.params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let g = graph_inputs(inst, self.config.kernel)?;
        let (t_obs, p) = (inst.t_obs(), inst.agents());
        let a = tape.constant(g.adjacency);
        let x = tape.constant(g.features);
        let h = gcn_forward(tape, a, x, params[0])?;
        let h = tape.reshape(h, &[1, t_obs, p, GAUSSIAN_DIM])?;
        let x0 = time_expand(tape, h, params[1])?;
        let kernels: Vec<Var> = (0..l).map(|i| params[2 + 2 * i]).collect();
        let slopes: Vec<Var> = (0..l).map(|i| params[3 + 2 * i]).collect();
        let layers = stack_forward(tape, x0, &kernels, &slopes)?;
        let ea = 2 + 2 * l;
        let (raw, trace) = match head {
            Head::Plain => (plain_output(&layers)?, None),
            Head::Ea => {
                let (out, trace) = ea_output(tape, &layers, params[ea], params[ea + 1], params[ea + 2])?;
                (out, Some(trace))
            }
            Head::Hedge(w) => (hedge_output(tape, &layers, w)?, None),
        };
        Ok(Forward {
            raw,
            layers,
            params,
            trace,
        })
    }

    pub fn predict(&self, inst: &TrajectoryInstance, head: Head<'_>) -> Result<Prediction> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, inst, head)?;
        let raw = tape.value(fwd.raw).clone();
        let field = decode_gaussian(&raw)?.remove(0);
        Ok(Prediction {
            raw,
            field,
            trace: fwd.trace,
        })
    }
}
