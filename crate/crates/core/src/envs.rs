//! Toy environments with a multi-task, multi-target structure.
//!
//! Every environment reports rewards for all of its tasks on every step and
//! exposes a raw state from which those rewards can be recomputed, which is
//! what hindsight relabeling in the replay buffer relies on.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("step called after the episode finished")]
    StepAfterDone,
    #[error("step called before reset")]
    NotReset,
    #[error("action has {got} dimensions, expected {expected}")]
    ActionDim { expected: usize, got: usize },
    #[error("task {task} out of range ({num_tasks} tasks)")]
    TaskOutOfRange { task: usize, num_tasks: usize },
    #[error("unknown environment name `{0}`")]
    UnknownEnv(String),
}

/// Named observation feature groups, as column indices into the observation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationSpec {
    pub dim: usize,
    pub proprio: Vec<usize>,
    pub targets: Vec<usize>,
    pub task_index: Vec<usize>,
}

impl ObservationSpec {
    pub fn all(&self) -> Vec<usize> {
        (0..self.dim).collect()
    }

    /// Features left after masking the task-identifying groups.
    pub fn task_agnostic(&self) -> Vec<usize> {
        (0..self.dim)
            .filter(|i| !self.targets.contains(i) && !self.task_index.contains(i))
            .collect()
    }

    /// Copy of `observation` with the task one-hot set to `task`.
    pub fn with_task(&self, observation: &[f64], task: usize) -> Vec<f64> {
        let mut out = observation.to_vec();
        for (k, &col) in self.task_index.iter().enumerate() {
            out[col] = if k == task { 1.0 } else { 0.0 };
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    /// One reward per task.
    pub rewards: Vec<f64>,
    pub done: bool,
    /// True when the episode ended in a genuine terminal state (no bootstrap),
    /// false for time-limit truncation.
    pub terminal: bool,
}

pub trait Environment: Send {
    fn name(&self) -> &'static str;
    fn observation_spec(&self) -> &ObservationSpec;
    fn action_dim(&self) -> usize;
    fn action_bounds(&self) -> (f64, f64);
    fn num_tasks(&self) -> usize;
    /// Upper bound on steps per episode.
    fn max_episode_steps(&self) -> usize;
    fn task(&self) -> usize;
    fn set_task(&mut self, task: usize) -> Result<(), EnvError>;
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError>;
    /// Everything needed to recompute every task reward for the current state.
    fn raw_state(&self) -> Vec<f64>;
    /// Per-task rewards for a raw state; pure function of its argument.
    fn task_rewards(&self, raw_state: &[f64]) -> Vec<f64>;
}

/// Builds an environment from its configuration name.
pub fn make_env(name: &str, episode_cap: Option<usize>) -> Result<Box<dyn Environment>, EnvError> {
    match name {
        "point_mass_targets" => {
            let mut env = PointMassTargets::new();
            if let Some(cap) = episode_cap {
                env.episode_cap = cap;
            }
            Ok(Box::new(env))
        }
        "modal_bandit" => Ok(Box::new(ModalBandit::new())),
        other => Err(EnvError::UnknownEnv(other.to_string())),
    }
}

pub const ENV_NAMES: &[&str] = &["point_mass_targets", "modal_bandit"];

const NUM_TARGETS: usize = 3;

/// 2-D point mass driven by velocity commands, with three randomly placed disc
/// targets. Task `k` pays 1.0 for every step that ends inside target `k`.
#[derive(Clone, Debug)]
pub struct PointMassTargets {
    pub dt: f64,
    pub half_width: f64,
    pub target_radius: f64,
    pub min_separation: f64,
    pub episode_cap: usize,
    spec: ObservationSpec,
    position: [f64; 2],
    targets: [[f64; 2]; NUM_TARGETS],
    task: usize,
    steps: usize,
    started: bool,
    done: bool,
}

impl Default for PointMassTargets {
    fn default() -> Self {
        Self::new()
    }
}

impl PointMassTargets {
    pub fn new() -> Self {
        Self {
            dt: 0.05,
            half_width: 1.0,
            target_radius: 0.15,
            min_separation: 0.4,
            episode_cap: 100,
            spec: ObservationSpec {
                dim: 2 + 2 * NUM_TARGETS + NUM_TARGETS,
                proprio: vec![0, 1],
                targets: (2..2 + 2 * NUM_TARGETS).collect(),
                task_index: (2 + 2 * NUM_TARGETS..2 + 3 * NUM_TARGETS).collect(),
            },
            position: [0.0; 2],
            targets: [[0.0; 2]; NUM_TARGETS],
            task: 0,
            steps: 0,
            started: false,
            done: false,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        self.position
    }

    pub fn targets(&self) -> [[f64; 2]; NUM_TARGETS] {
        self.targets
    }

    /// Places agent and targets directly; used by tests and scripted setups.
    pub fn set_layout(&mut self, position: [f64; 2], targets: [[f64; 2]; NUM_TARGETS]) -> Vec<f64> {
        self.position = position;
        self.targets = targets;
        self.steps = 0;
        self.started = true;
        self.done = false;
        self.observation()
    }

    fn observation(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(self.spec.dim);
        obs.extend_from_slice(&self.position);
        for t in &self.targets {
            obs.push(t[0] - self.position[0]);
            obs.push(t[1] - self.position[1]);
        }
        obs.extend((0..NUM_TARGETS).map(|k| if k == self.task { 1.0 } else { 0.0 }));
        obs
    }

    fn sample_point(&self, rng: &mut dyn RngCore) -> [f64; 2] {
        let w = self.half_width;
        [rng.random_range(-w..w), rng.random_range(-w..w)]
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl Environment for PointMassTargets {
    fn name(&self) -> &'static str {
        "point_mass_targets"
    }

    fn observation_spec(&self) -> &ObservationSpec {
        &self.spec
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn action_bounds(&self) -> (f64, f64) {
        (-1.0, 1.0)
    }

    fn num_tasks(&self) -> usize {
        NUM_TARGETS
    }

    fn max_episode_steps(&self) -> usize {
        self.episode_cap
    }

    fn task(&self) -> usize {
        self.task
    }

    fn set_task(&mut self, task: usize) -> Result<(), EnvError> {
        if task >= NUM_TARGETS {
            return Err(EnvError::TaskOutOfRange {
                task,
                num_tasks: NUM_TARGETS,
            });
        }
        self.task = task;
        Ok(())
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        // Rejection sampling until spawn and all targets are pairwise separated.
        loop {
            let points: Vec<[f64; 2]> = (0..=NUM_TARGETS).map(|_| self.sample_point(rng)).collect();
            let separated = (0..points.len()).all(|i| {
                (i + 1..points.len()).all(|j| distance(points[i], points[j]) >= self.min_separation)
            });
            if separated {
                self.position = points[0];
                self.targets.copy_from_slice(&points[1..=NUM_TARGETS]);
                break;
            }
        }
        self.steps = 0;
        self.started = true;
        self.done = false;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        if !self.started {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        if action.len() != 2 {
            return Err(EnvError::ActionDim {
                expected: 2,
                got: action.len(),
            });
        }
        for (p, a) in self.position.iter_mut().zip(action) {
            *p = (*p + a.clamp(-1.0, 1.0) * self.dt).clamp(-self.half_width, self.half_width);
        }
        self.steps += 1;
        self.done = self.steps >= self.episode_cap;
        Ok(StepOutcome {
            observation: self.observation(),
            rewards: self.task_rewards(&self.raw_state()),
            done: self.done,
            terminal: false,
        })
    }

    fn raw_state(&self) -> Vec<f64> {
        let mut s = self.position.to_vec();
        for t in &self.targets {
            s.extend_from_slice(t);
        }
        s
    }

    fn task_rewards(&self, raw_state: &[f64]) -> Vec<f64> {
        let pos = [raw_state[0], raw_state[1]];
        (0..NUM_TARGETS)
            .map(|k| {
                let t = [raw_state[2 + 2 * k], raw_state[3 + 2 * k]];
                if distance(pos, t) <= self.target_radius {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Single-step bandit with a 1-D action and a bimodal reward: the larger of
/// two Gaussian bumps centred at ±0.5.
#[derive(Clone, Debug)]
pub struct ModalBandit {
    pub bump_width: f64,
    spec: ObservationSpec,
    last_action: f64,
    started: bool,
    done: bool,
}

impl Default for ModalBandit {
    fn default() -> Self {
        Self::new()
    }
}

impl ModalBandit {
    pub fn new() -> Self {
        Self {
            bump_width: 0.15,
            spec: ObservationSpec {
                dim: 1,
                proprio: vec![0],
                targets: vec![],
                task_index: vec![],
            },
            last_action: 0.0,
            started: false,
            done: false,
        }
    }

    pub fn reward(&self, action: f64) -> f64 {
        let a = action.clamp(-1.0, 1.0);
        let bump = |c: f64| (-(a - c).powi(2) / (2.0 * self.bump_width * self.bump_width)).exp();
        bump(0.5).max(bump(-0.5))
    }
}

impl Environment for ModalBandit {
    fn name(&self) -> &'static str {
        "modal_bandit"
    }

    fn observation_spec(&self) -> &ObservationSpec {
        &self.spec
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bounds(&self) -> (f64, f64) {
        (-1.0, 1.0)
    }

    fn num_tasks(&self) -> usize {
        1
    }

    fn max_episode_steps(&self) -> usize {
        1
    }

    fn task(&self) -> usize {
        0
    }

    fn set_task(&mut self, task: usize) -> Result<(), EnvError> {
        if task != 0 {
            return Err(EnvError::TaskOutOfRange { task, num_tasks: 1 });
        }
        Ok(())
    }

    fn reset(&mut self, _rng: &mut dyn RngCore) -> Vec<f64> {
        self.started = true;
        self.done = false;
        self.last_action = 0.0;
        vec![1.0]
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        if !self.started {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        if action.len() != 1 {
            return Err(EnvError::ActionDim {
                expected: 1,
                got: action.len(),
            });
        }
        self.last_action = action[0].clamp(-1.0, 1.0);
        self.done = true;
        Ok(StepOutcome {
            observation: vec![1.0],
            rewards: vec![self.reward(self.last_action)],
            done: true,
            terminal: true,
        })
    }

    fn raw_state(&self) -> Vec<f64> {
        vec![self.last_action]
    }

    fn task_rewards(&self, raw_state: &[f64]) -> Vec<f64> {
        vec![self.reward(raw_state[0])]
    }
}
