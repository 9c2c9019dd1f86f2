//! Option-conditioned action-value function with a hard-synced target copy.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffgraph::{Activation, Graph, GraphError, Mlp, MlpVars, Tensor, Var};
use crate::policy::{sample_categorical, PolicyHeads};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub observation_dim: usize,
    pub action_dim: usize,
    pub num_options: usize,
    /// One output head per task.
    pub num_tasks: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub layer_norm: bool,
    /// Pass actions through `tanh` before the network.
    pub squash_actions: bool,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            observation_dim: 1,
            action_dim: 1,
            num_options: 1,
            num_tasks: 1,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            // Without it a small critic stalls on rewards that are even in the action.
            layer_norm: true,
            squash_actions: true,
        }
    }
}

impl CriticConfig {
    pub fn input_dim(&self) -> usize {
        self.observation_dim + self.action_dim + self.num_options
    }
}

/// How the expectation over next options is formed in the TD target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetExpectation {
    /// Sample options from the posterior and actions from their components.
    #[default]
    Sampled,
    /// Sum over options weighted by the posterior; sample actions only.
    AnalyticOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub config: CriticConfig,
    pub online: Mlp,
    pub target: Mlp,
    pub steps_since_sync: usize,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(config: CriticConfig, rng: &mut R) -> Self {
        let mut sizes = vec![config.input_dim()];
        sizes.extend(&config.hidden);
        sizes.push(config.num_tasks);
        let online = Mlp::new(&sizes, config.activation, config.layer_norm, rng);
        Self {
            target: online.clone(),
            online,
            config,
            steps_since_sync: 0,
        }
    }

    /// Builds `[rows, obs + action + one-hot]` network inputs.
    pub fn inputs(
        &self,
        observations: &Tensor,
        actions: &Tensor,
        options: &[usize],
    ) -> Result<Tensor, GraphError> {
        let cfg = &self.config;
        let rows = observations.rows();
        if actions.rows() != rows || options.len() != rows || actions.last_dim() != cfg.action_dim {
            return Err(GraphError::ShapeMismatch {
                op: "critic_inputs",
                left: observations.shape().to_vec(),
                right: actions.shape().to_vec(),
            });
        }
        let mut values = Vec::with_capacity(rows * cfg.input_dim());
        for r in 0..rows {
            values.extend_from_slice(observations.row(r));
            if cfg.squash_actions {
                values.extend(actions.row(r).iter().map(|a| a.tanh()));
            } else {
                values.extend_from_slice(actions.row(r));
            }
            let o = options[r];
            if o >= cfg.num_options {
                return Err(GraphError::IndexOutOfRange {
                    op: "critic_inputs",
                    index: o,
                    bound: cfg.num_options,
                });
            }
            values.extend((0..cfg.num_options).map(|j| if j == o { 1.0 } else { 0.0 }));
        }
        Tensor::new(vec![rows, cfg.input_dim()], values)
    }

    /// `[rows, K]` online values.
    pub fn q_values(
        &self,
        observations: &Tensor,
        actions: &Tensor,
        options: &[usize],
    ) -> Result<Tensor, GraphError> {
        self.online
            .forward(&self.inputs(observations, actions, options)?)
    }

    /// `[rows, K]` target-network values.
    pub fn target_q_values(
        &self,
        observations: &Tensor,
        actions: &Tensor,
        options: &[usize],
    ) -> Result<Tensor, GraphError> {
        self.target
            .forward(&self.inputs(observations, actions, options)?)
    }

    pub fn q_value(
        &self,
        observation: &[f64],
        action: &[f64],
        option: usize,
        task: usize,
    ) -> Result<f64, GraphError> {
        let obs = Tensor::new(vec![1, observation.len()], observation.to_vec())?;
        let act = Tensor::new(vec![1, action.len()], action.to_vec())?;
        Ok(self.q_values(&obs, &act, &[option])?.row(0)[task])
    }

    pub fn register(&self, g: &mut Graph) -> MlpVars {
        self.online.register(g, true)
    }

    /// `[rows]` online values of each row's task head, as a graph node.
    pub fn q_node(
        &self,
        g: &mut Graph,
        vars: &MlpVars,
        observations: &Tensor,
        actions: &Tensor,
        options: &[usize],
        tasks: &[usize],
    ) -> Result<Var, GraphError> {
        let x = g.constant(self.inputs(observations, actions, options)?);
        let q = vars.apply(g, x)?;
        g.gather_last(q, tasks)
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
        self.steps_since_sync = 0;
    }

    /// Counts a learner step; syncs and returns true every `period` steps.
    pub fn tick(&mut self, period: usize) -> bool {
        self.steps_since_sync += 1;
        if self.steps_since_sync >= period {
            self.sync_target();
            true
        } else {
            false
        }
    }
}

/// Per-row inputs of a batch of TD targets.
pub struct TdInputs<'a> {
    /// `[R, D]` next observations `s_{t+1}`.
    pub next_observations: &'a Tensor,
    /// Target-policy heads evaluated at the next observations.
    pub next_heads: &'a PolicyHeads,
    /// `[R·M]` target-policy posterior `log π^H'(o | h_{t+1})`.
    pub next_log_posterior: &'a [f64],
    pub rewards: &'a [f64],
    /// `γ`, or 0 where `s_{t+1}` is terminal.
    pub discounts: &'a [f64],
    pub tasks: &'a [usize],
}

/// `r + γ·E[Q'(s', a', o')]` with `(a', o')` drawn from the target policy.
pub fn td_targets<R: Rng + ?Sized>(
    critic: &Critic,
    inputs: &TdInputs,
    samples: usize,
    expectation: TargetExpectation,
    rng: &mut R,
) -> Result<Vec<f64>, GraphError> {
    let rows = inputs.next_observations.rows();
    let heads = inputs.next_heads;
    let (m, a) = (heads.options, heads.action_dim);
    let samples = samples.max(1);
    let per_row = match expectation {
        TargetExpectation::Sampled => samples,
        TargetExpectation::AnalyticOptions => samples * m,
    };
    let mut obs = Vec::with_capacity(rows * per_row * inputs.next_observations.last_dim());
    let mut actions = Vec::with_capacity(rows * per_row * a);
    let mut options = Vec::with_capacity(rows * per_row);
    let mut weights = Vec::with_capacity(rows * per_row);
    for r in 0..rows {
        let post: Vec<f64> = inputs.next_log_posterior[r * m..(r + 1) * m]
            .iter()
            .map(|v| v.exp())
            .collect();
        for j in 0..per_row {
            let (o, w) = match expectation {
                TargetExpectation::Sampled => {
                    (sample_categorical(&post, rng), 1.0 / samples as f64)
                }
                TargetExpectation::AnalyticOptions => {
                    let o = j / samples;
                    (o, post[o] / samples as f64)
                }
            };
            obs.extend_from_slice(inputs.next_observations.row(r));
            let (mean, sd) = (heads.mean(r, o), heads.stddev(r, o));
            actions.extend(
                mean.iter()
                    .zip(sd)
                    .map(|(mu, s)| mu + s * rng.sample::<f64, _>(StandardNormal)),
            );
            options.push(o);
            weights.push(w);
        }
    }
    let n = rows * per_row;
    let obs = Tensor::new(vec![n, inputs.next_observations.last_dim()], obs)?;
    let actions = Tensor::new(vec![n, a], actions)?;
    let q = critic.target_q_values(&obs, &actions, &options)?;
    Ok((0..rows)
        .map(|r| {
            let task = inputs.tasks[r];
            let expected: f64 = (0..per_row)
                .map(|j| weights[r * per_row + j] * q.row(r * per_row + j)[task])
                .sum();
            inputs.rewards[r] + inputs.discounts[r] * expected
        })
        .collect())
}

/// Mean squared TD error of `q` against constant `targets`.
pub fn critic_loss(g: &mut Graph, q: Var, targets: &[f64]) -> Result<Var, GraphError> {
    let t = g.constant(Tensor::vector(targets.to_vec()));
    let diff = g.sub(q, t)?;
    let sq = g.square(diff);
    Ok(g.mean_all(sq))
}
