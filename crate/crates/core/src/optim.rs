//! Optimizers (RMSprop, SGD), the cyclic cosine-annealing schedule, and
//! snapshot capture/ensembling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Rmsprop {
        lr: f64,
        #[serde(default = "default_smoothing")]
        smoothing: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    Sgd {
        lr: f64,
    },
}

fn default_smoothing() -> f64 {
    0.99
}

fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerKind::Rmsprop { lr, .. } | OptimizerKind::Sgd { lr } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::Rmsprop { lr, smoothing, epsilon } => {
                if lr <= 0.0 {
                    return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
                }
                if !(0.0..1.0).contains(&smoothing) {
                    return Err(Error::Config(format!(
                        "rmsprop smoothing must be in [0, 1), got {smoothing}"
                    )));
                }
                if epsilon <= 0.0 {
                    return Err(Error::Config(format!("rmsprop epsilon must be > 0, got {epsilon}")));
                }
                Ok(())
            }
            OptimizerKind::Sgd { lr } => {
                if lr <= 0.0 {
                    return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
                }
                Ok(())
            }
        }
    }
}

/// Optimizer with per-parameter state. Parameters are passed as a flat list
/// of matrices in a fixed order; squared-gradient accumulators take their
/// shapes from the first step.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    rate: f64,
    accumulators: Vec<Matrix>,
    pub step_count: usize,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            rate: kind.learning_rate(),
            accumulators: Vec::new(),
            step_count: 0,
        }
    }

    /// Current learning rate (a schedule may override the initial one).
    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn set_rate(&mut self, rate: f64) {
        self.rate = rate;
    }

    pub fn accumulators(&self) -> &[Matrix] {
        &self.accumulators
    }

    /// One update over all parameters. `params` and `grads` are matched by
    /// position and must keep the same shapes across steps.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Argument(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (param, grad) in params.iter().zip(grads) {
            if param.shape() != grad.shape() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    left_rows: param.rows(),
                    left_cols: param.cols(),
                    right_rows: grad.rows(),
                    right_cols: grad.cols(),
                });
            }
        }
        match self.kind {
            OptimizerKind::Sgd { .. } => {
                for (param, grad) in params.iter_mut().zip(grads) {
                    let lr = self.rate;
                    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                        *p -= lr * g;
                    }
                }
            }
            OptimizerKind::Rmsprop { smoothing, epsilon, .. } => {
                if self.accumulators.is_empty() {
                    self.accumulators = params
                        .iter()
                        .map(|p| Matrix::zeros(p.rows(), p.cols()))
                        .collect();
                }
                if self.accumulators.len() != params.len() {
                    return Err(Error::State(format!(
                        "optimizer tracked {} tensors, got {}",
                        self.accumulators.len(),
                        params.len()
                    )));
                }
                let lr = self.rate;
                for ((param, grad), acc) in
                    params.iter_mut().zip(grads).zip(&mut self.accumulators)
                {
                    for ((p, g), a) in param
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(acc.data_mut())
                    {
                        *a = smoothing * *a + (1.0 - smoothing) * g * g;
                        *p -= lr * g / (a.sqrt() + epsilon);
                    }
                }
            }
        }
        self.step_count += 1;
        Ok(())
    }
}

/// Cyclic cosine annealing: within a cycle of length T at local step t the
/// rate is (eta0/2) * (1 + cos(pi * t / T)), restarting at every cycle
/// boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub eta0: f64,
    pub cycle_length: usize,
    pub cycles: usize,
}

impl CosineSchedule {
    pub fn new(eta0: f64, cycle_length: usize, cycles: usize) -> Result<Self> {
        if cycle_length == 0 || cycles == 0 {
            return Err(Error::Config(
                "cosine schedule needs cycle_length >= 1 and cycles >= 1".into(),
            ));
        }
        Ok(CosineSchedule {
            eta0,
            cycle_length,
            cycles,
        })
    }

    pub fn rate(&self, global_step: usize) -> Result<f64> {
        if global_step >= self.cycles * self.cycle_length {
            return Err(Error::ScheduleExhausted {
                step: global_step,
                cycles: self.cycles,
                cycle_length: self.cycle_length,
            });
        }
        let t = (global_step % self.cycle_length) as f64;
        Ok(self.eta0 / 2.0 * (1.0 + (std::f64::consts::PI * t / self.cycle_length as f64).cos()))
    }

    /// True when `steps_done` completed steps land exactly on a cycle end.
    pub fn at_cycle_boundary(&self, steps_done: usize) -> bool {
        steps_done > 0 && steps_done % self.cycle_length == 0
    }
}

/// Anything that can turn a batch of inputs into class probabilities.
pub trait ProbPredictor {
    fn predict_probs(&self, inputs: &Matrix) -> Result<Matrix>;
}

/// Parameter snapshots captured at cosine-cycle boundaries. Members are
/// deep copies: training the live model never mutates them.
#[derive(Clone, Debug)]
pub struct SnapshotSet<M> {
    members: Vec<M>,
    cycle_length: usize,
}

impl<M: Clone + ProbPredictor> SnapshotSet<M> {
    pub fn new(cycle_length: usize) -> Self {
        SnapshotSet {
            members: Vec::new(),
            cycle_length,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[M] {
        &self.members
    }

    /// Capture the model at `steps_done` completed steps, which must lie on
    /// a cycle boundary.
    pub fn capture(&mut self, model: &M, steps_done: usize) -> Result<()> {
        if steps_done == 0 || steps_done % self.cycle_length != 0 {
            return Err(Error::SnapshotProtocol {
                step: steps_done,
                cycle_length: self.cycle_length,
            });
        }
        self.members.push(model.clone());
        Ok(())
    }

    /// Arithmetic mean of the members' probability outputs.
    pub fn ensemble_predict(&self, inputs: &Matrix) -> Result<Matrix> {
        if self.members.is_empty() {
            return Err(Error::State("ensemble_predict on an empty snapshot set".into()));
        }
        let mut acc = self.members[0].predict_probs(inputs)?;
        for member in &self.members[1..] {
            acc.add_assign(&member.predict_probs(inputs)?)?;
        }
        Ok(acc.scale(1.0 / self.members.len() as f64))
    }
}
