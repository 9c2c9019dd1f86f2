//! Flat, mixture and option policies.
//!
//! All three share one parametrization: a categorical controller over `M`
//! options, `M` Bernoulli terminations and `M` diagonal Gaussian components.
//! A mixture policy ignores the terminations (every step terminates) and a flat
//! policy is a mixture with a single component.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgraph::{
    sigmoid, softplus, softplus_inv, Activation, Graph, GraphError, Mlp, MlpVars, Tensor, Var,
};

const LN_2PI: f64 = 1.8378770664093453;
const OUTPUT_WEIGHT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error("option {option} out of range ({num_options} options)")]
    OptionOutOfRange { option: usize, num_options: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    Flat,
    Mixture,
    Option,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub num_options: usize,
    pub observation_dim: usize,
    pub action_dim: usize,
    /// Observation columns seen by the controller.
    pub controller_features: Vec<usize>,
    /// Observation columns seen by the components.
    pub component_features: Vec<usize>,
    pub mode: PolicyMode,
    pub action_min: f64,
    pub action_max: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub layer_norm: bool,
    /// Initial component stddev as a fraction of the action range.
    pub init_stddev_fraction: f64,
    pub min_stddev: f64,
    /// Terminations see the controller view; otherwise the component view.
    pub task_conditioned_terminations: bool,
    /// Forces β ≡ 1 in option mode.
    pub clamp_terminations: bool,
    /// Initial termination logit bias.
    pub init_termination_logit: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            num_options: 1,
            observation_dim: 1,
            action_dim: 1,
            controller_features: vec![0],
            component_features: vec![0],
            mode: PolicyMode::Option,
            action_min: -1.0,
            action_max: 1.0,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            layer_norm: false,
            init_stddev_fraction: 0.3,
            min_stddev: 1e-4,
            task_conditioned_terminations: true,
            clamp_terminations: false,
            init_termination_logit: 0.0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |msg: String| Err(PolicyError::InvalidConfig(msg));
        if self.num_options == 0 {
            return bad("num_options must be at least 1".into());
        }
        if self.mode == PolicyMode::Flat && self.num_options != 1 {
            return bad(format!(
                "flat mode needs num_options = 1, got {}",
                self.num_options
            ));
        }
        if self.action_dim == 0 || self.observation_dim == 0 {
            return bad("action_dim and observation_dim must be positive".into());
        }
        for (name, cols) in [
            ("controller_features", &self.controller_features),
            ("component_features", &self.component_features),
        ] {
            if cols.is_empty() {
                return bad(format!("{name} is empty"));
            }
            if let Some(c) = cols.iter().find(|&&c| c >= self.observation_dim) {
                return bad(format!(
                    "{name} index {c} outside observation of size {}",
                    self.observation_dim
                ));
            }
        }
        if self.action_min.partial_cmp(&self.action_max) != Some(std::cmp::Ordering::Less) {
            return bad("action_min must be below action_max".into());
        }
        if self.init_stddev_fraction <= 0.0 || self.min_stddev < 0.0 {
            return bad("stddev settings must be positive".into());
        }
        Ok(())
    }

    /// True when terminations are ignored and options are redrawn every step.
    pub fn always_terminates(&self) -> bool {
        self.mode != PolicyMode::Option || self.clamp_terminations
    }

    fn termination_features(&self) -> &[usize] {
        if self.task_conditioned_terminations {
            &self.controller_features
        } else {
            &self.component_features
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionPolicy {
    pub config: PolicyConfig,
    pub controller: Mlp,
    pub termination: Mlp,
    /// Outputs `M·A` means followed by `M·A` raw stddevs, option-major.
    pub components: Mlp,
}

/// Which parameter groups an optimizer step may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroups {
    pub controller: bool,
    pub termination: bool,
    pub components: bool,
}

impl Default for ParamGroups {
    fn default() -> Self {
        Self {
            controller: true,
            termination: true,
            components: true,
        }
    }
}

/// Distribution parameters for a batch of observations, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyHeads {
    pub rows: usize,
    pub options: usize,
    pub action_dim: usize,
    /// `[rows, M]` controller log-probabilities.
    pub log_controller: Vec<f64>,
    /// `[rows, M]` log β.
    pub log_termination: Vec<f64>,
    /// `[rows, M]` log (1 − β).
    pub log_continue: Vec<f64>,
    /// `[rows, M·A]`.
    pub means: Vec<f64>,
    /// `[rows, M·A]`.
    pub stddevs: Vec<f64>,
}

impl PolicyHeads {
    pub fn controller_probs(&self, row: usize) -> Vec<f64> {
        let m = self.options;
        self.log_controller[row * m..(row + 1) * m]
            .iter()
            .map(|v| v.exp())
            .collect()
    }

    pub fn termination_prob(&self, row: usize, option: usize) -> f64 {
        self.log_termination[row * self.options + option].exp()
    }

    pub fn mean(&self, row: usize, option: usize) -> &[f64] {
        let k = self.options * self.action_dim;
        let start = row * k + option * self.action_dim;
        &self.means[start..start + self.action_dim]
    }

    pub fn stddev(&self, row: usize, option: usize) -> &[f64] {
        let k = self.options * self.action_dim;
        let start = row * k + option * self.action_dim;
        &self.stddevs[start..start + self.action_dim]
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> PolicyHeads {
        let m = self.options;
        let k = m * self.action_dim;
        PolicyHeads {
            rows: len,
            options: m,
            action_dim: self.action_dim,
            log_controller: self.log_controller[start * m..(start + len) * m].to_vec(),
            log_termination: self.log_termination[start * m..(start + len) * m].to_vec(),
            log_continue: self.log_continue[start * m..(start + len) * m].to_vec(),
            means: self.means[start * k..(start + len) * k].to_vec(),
            stddevs: self.stddevs[start * k..(start + len) * k].to_vec(),
        }
    }

    pub fn component_log_prob(&self, row: usize, option: usize, action: &[f64]) -> f64 {
        gaussian_log_density(action, self.mean(row, option), self.stddev(row, option))
    }
}

/// Graph handles for the policy parameters; order matches [`OptionPolicy::params`].
#[derive(Clone, Debug)]
pub struct PolicyVars {
    pub controller: MlpVars,
    pub termination: MlpVars,
    pub components: MlpVars,
}

impl PolicyVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.controller.vars();
        out.extend(self.termination.vars());
        out.extend(self.components.vars());
        out
    }
}

/// Distribution parameters as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub rows: usize,
    pub options: usize,
    pub action_dim: usize,
    pub log_controller: Var,
    pub log_termination: Var,
    pub log_continue: Var,
    pub means: Var,
    pub stddevs: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExecutionState {
    /// `None` before the first step of an episode.
    pub option: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    #[default]
    Sample,
    /// Mean actions and argmax options; terminations are still sampled.
    Greedy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActOutput {
    pub action: Vec<f64>,
    pub option: usize,
    /// The controller was consulted this step (always true on the first step).
    pub terminated: bool,
    /// The executed option differs from the previous step's.
    pub switched: bool,
}

/// Diagonal Gaussian log-density summed over dimensions.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], stddev: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(stddev)
        .map(|((x, m), s)| {
            let z = (x - m) / s;
            -0.5 * z * z - s.ln() - 0.5 * LN_2PI
        })
        .sum()
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl OptionPolicy {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Result<Self, PolicyError> {
        config.validate()?;
        let (m, a) = (config.num_options, config.action_dim);
        let sizes = |input: usize, output: usize| {
            let mut s = vec![input];
            s.extend(&config.hidden);
            s.push(output);
            s
        };
        let mut controller = Mlp::new(
            &sizes(config.controller_features.len(), m),
            config.activation,
            config.layer_norm,
            rng,
        );
        let mut termination = Mlp::new(
            &sizes(config.termination_features().len(), m),
            config.activation,
            config.layer_norm,
            rng,
        );
        let mut components = Mlp::new(
            &sizes(config.component_features.len(), 2 * m * a),
            config.activation,
            config.layer_norm,
            rng,
        );
        for net in [&mut controller, &mut termination, &mut components] {
            net.last_layer_mut()
                .weight
                .values_mut()
                .iter_mut()
                .for_each(|w| *w *= OUTPUT_WEIGHT_SCALE);
        }
        termination
            .last_layer_mut()
            .bias
            .values_mut()
            .iter_mut()
            .for_each(|b| *b = config.init_termination_logit);
        let range = config.action_max - config.action_min;
        let std_bias =
            softplus_inv((config.init_stddev_fraction * range - config.min_stddev).max(1e-6));
        let bias = components.last_layer_mut().bias.values_mut();
        for j in 0..m {
            let mean = if m == 1 {
                0.5 * (config.action_min + config.action_max)
            } else {
                config.action_min + j as f64 * range / (m - 1) as f64
            };
            for d in 0..a {
                bias[j * a + d] = mean;
                bias[m * a + j * a + d] = std_bias;
            }
        }
        Ok(Self {
            config,
            controller,
            termination,
            components,
        })
    }

    pub fn num_options(&self) -> usize {
        self.config.num_options
    }

    pub fn action_dim(&self) -> usize {
        self.config.action_dim
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.controller.params();
        out.extend(self.termination.params());
        out.extend(self.components.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.controller.params_mut();
        out.extend(self.termination.params_mut());
        out.extend(self.components.params_mut());
        out
    }

    /// Which group each entry of [`Self::params`] belongs to.
    pub fn param_group_mask(&self, groups: ParamGroups) -> Vec<bool> {
        let mut out = vec![groups.controller; self.controller.params().len()];
        out.extend(vec![groups.termination; self.termination.params().len()]);
        out.extend(vec![groups.components; self.components.params().len()]);
        out
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> PolicyVars {
        PolicyVars {
            controller: self.controller.register(g, trainable),
            termination: self.termination.register(g, trainable),
            components: self.components.register(g, trainable),
        }
    }

    /// Plain evaluation of every head on a `[rows, observation_dim]` batch.
    pub fn heads(&self, observations: &Tensor) -> Result<PolicyHeads, PolicyError> {
        let cfg = &self.config;
        let (m, a) = (cfg.num_options, cfg.action_dim);
        let rows = observations.rows();
        let logits = self
            .controller
            .forward(&observations.select_columns(&cfg.controller_features)?)?;
        let mut log_controller = Vec::with_capacity(rows * m);
        for r in 0..rows {
            let row = logits.row(r);
            let lse = crate::diffgraph::log_sum_exp(row);
            log_controller.extend(row.iter().map(|v| v - lse));
        }
        let (log_termination, log_continue) = if cfg.always_terminates() {
            (vec![0.0; rows * m], vec![f64::NEG_INFINITY; rows * m])
        } else {
            let z = self
                .termination
                .forward(&observations.select_columns(cfg.termination_features())?)?;
            (
                z.values().iter().map(|&v| -softplus(-v)).collect(),
                z.values().iter().map(|&v| -softplus(v)).collect(),
            )
        };
        let out = self
            .components
            .forward(&observations.select_columns(&cfg.component_features)?)?;
        let k = m * a;
        let mut means = Vec::with_capacity(rows * k);
        let mut stddevs = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let row = out.row(r);
            means.extend_from_slice(&row[..k]);
            stddevs.extend(row[k..].iter().map(|&v| softplus(v) + cfg.min_stddev));
        }
        Ok(PolicyHeads {
            rows,
            options: m,
            action_dim: a,
            log_controller,
            log_termination,
            log_continue,
            means,
            stddevs,
        })
    }

    /// Graph evaluation of every head; observations enter as constants.
    pub fn head_vars(
        &self,
        g: &mut Graph,
        vars: &PolicyVars,
        observations: &Tensor,
    ) -> Result<HeadVars, PolicyError> {
        let cfg = &self.config;
        let (m, a) = (cfg.num_options, cfg.action_dim);
        let rows = observations.rows();
        let ctrl_in = g.constant(observations.select_columns(&cfg.controller_features)?);
        let logits = vars.controller.apply(g, ctrl_in)?;
        let log_controller = g.log_softmax_last(logits);
        let (log_termination, log_continue) = if cfg.always_terminates() {
            (
                g.constant(Tensor::zeros(&[rows, m])),
                g.constant(Tensor::filled(&[rows, m], f64::NEG_INFINITY)),
            )
        } else {
            let term_in = g.constant(observations.select_columns(cfg.termination_features())?);
            let z = vars.termination.apply(g, term_in)?;
            let neg_z = g.neg(z);
            (g.log_sigmoid(z), g.log_sigmoid(neg_z))
        };
        let comp_in = g.constant(observations.select_columns(&cfg.component_features)?);
        let out = vars.components.apply(g, comp_in)?;
        let means = g.slice_last(out, 0, m * a)?;
        let raw_std = g.slice_last(out, m * a, m * a)?;
        let std = g.softplus(raw_std);
        let stddevs = g.offset(std, cfg.min_stddev);
        Ok(HeadVars {
            rows,
            options: m,
            action_dim: a,
            log_controller,
            log_termination,
            log_continue,
            means,
            stddevs,
        })
    }

    pub fn heads_for(&self, observation: &[f64]) -> Result<PolicyHeads, PolicyError> {
        self.heads(&Tensor::new(
            vec![1, observation.len()],
            observation.to_vec(),
        )?)
    }

    pub fn controller_dist(&self, observation: &[f64]) -> Result<Vec<f64>, PolicyError> {
        Ok(self.heads_for(observation)?.controller_probs(0))
    }

    pub fn termination_prob(&self, observation: &[f64], option: usize) -> Result<f64, PolicyError> {
        self.check_option(option)?;
        if self.config.always_terminates() {
            return Ok(1.0);
        }
        let z = self.termination.forward(
            &Tensor::new(vec![1, observation.len()], observation.to_vec())?
                .select_columns(self.config.termination_features())?,
        )?;
        Ok(sigmoid(z.values()[option]))
    }

    pub fn component_log_prob(
        &self,
        observation: &[f64],
        option: usize,
        action: &[f64],
    ) -> Result<f64, PolicyError> {
        self.check_option(option)?;
        Ok(self
            .heads_for(observation)?
            .component_log_prob(0, option, action))
    }

    /// `log π^L(a|s,o) + log π^H(o|h)` given the posterior for the same history.
    pub fn joint_log_prob(
        &self,
        log_posterior: &[f64],
        observation: &[f64],
        action: &[f64],
        option: usize,
    ) -> Result<f64, PolicyError> {
        self.check_option(option)?;
        Ok(self.component_log_prob(observation, option, action)? + log_posterior[option])
    }

    /// One call-and-return step.
    pub fn act<R: Rng + ?Sized>(
        &self,
        state: &mut ExecutionState,
        observation: &[f64],
        mode: ActMode,
        rng: &mut R,
    ) -> Result<ActOutput, PolicyError> {
        let heads = self.heads_for(observation)?;
        let terminated = match state.option {
            None => true,
            Some(_) if self.config.always_terminates() => true,
            Some(prev) => {
                let beta = heads.termination_prob(0, prev);
                rng.random::<f64>() < beta
            }
        };
        let option = if terminated {
            let probs = heads.controller_probs(0);
            match mode {
                ActMode::Sample => sample_categorical(&probs, rng),
                ActMode::Greedy => argmax(&probs),
            }
        } else {
            state.option.expect("non-terminated step has an option")
        };
        let switched = state.option.is_some_and(|prev| prev != option);
        let mean = heads.mean(0, option);
        let action = match mode {
            ActMode::Sample => {
                let sd = heads.stddev(0, option);
                mean.iter()
                    .zip(sd)
                    .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
            ActMode::Greedy => mean.to_vec(),
        };
        state.option = Some(option);
        Ok(ActOutput {
            action,
            option,
            terminated,
            switched,
        })
    }

    /// Same policy with option indices relabeled: new option `i` is old `perm[i]`.
    pub fn permute_options(&self, perm: &[usize]) -> Self {
        let (m, a) = (self.config.num_options, self.config.action_dim);
        assert_eq!(perm.len(), m, "permutation length");
        let mut out = self.clone();
        let remap = |src: &Mlp, dst: &mut Mlp, columns: &dyn Fn(usize) -> usize| {
            let s = src.layers.last().expect("non-empty");
            let d = dst.last_layer_mut();
            let n = s.bias.numel();
            let k = s.weight.shape()[0];
            for c in 0..n {
                let from = columns(c);
                d.bias.values_mut()[c] = s.bias.values()[from];
                for r in 0..k {
                    d.weight.values_mut()[r * n + c] = s.weight.values()[r * n + from];
                }
            }
        };
        remap(&self.controller, &mut out.controller, &|c| perm[c]);
        remap(&self.termination, &mut out.termination, &|c| perm[c]);
        remap(&self.components, &mut out.components, &|c| {
            let (half, within) = (c / (m * a), c % (m * a));
            half * m * a + perm[within / a] * a + within % a
        });
        out
    }

    fn check_option(&self, option: usize) -> Result<(), PolicyError> {
        if option >= self.config.num_options {
            return Err(PolicyError::OptionOutOfRange {
                option,
                num_options: self.config.num_options,
            });
        }
        Ok(())
    }
}

impl HeadVars {
    /// Reads the current values back into plain heads.
    pub fn values(&self, g: &Graph) -> PolicyHeads {
        PolicyHeads {
            rows: self.rows,
            options: self.options,
            action_dim: self.action_dim,
            log_controller: g.value(self.log_controller).values().to_vec(),
            log_termination: g.value(self.log_termination).values().to_vec(),
            log_continue: g.value(self.log_continue).values().to_vec(),
            means: g.value(self.means).values().to_vec(),
            stddevs: g.value(self.stddevs).values().to_vec(),
        }
    }

    /// `[rows, M]` log-densities of one action per row under every component.
    pub fn action_log_likelihoods(
        &self,
        g: &mut Graph,
        actions: &Tensor,
    ) -> Result<Var, GraphError> {
        let (m, a) = (self.options, self.action_dim);
        let mut tiled = Vec::with_capacity(self.rows * m * a);
        for r in 0..self.rows {
            for _ in 0..m {
                tiled.extend_from_slice(actions.row(r));
            }
        }
        let x = g.constant(Tensor::new(vec![self.rows, m * a], tiled)?);
        let lp = gaussian_log_density_node(g, x, self.means, self.stddevs)?;
        let lp = g.reshape(lp, &[self.rows * m, a])?;
        let lp = g.sum_last(lp);
        g.reshape(lp, &[self.rows, m])
    }

    /// `[S]` log-densities of sample `s` (action row `s`) under component
    /// `options[s]` at head row `rows[s]`.
    pub fn sample_log_likelihoods(
        &self,
        g: &mut Graph,
        rows: &[usize],
        options: &[usize],
        actions: &Tensor,
    ) -> Result<Var, GraphError> {
        let (m, a) = (self.options, self.action_dim);
        let idx: Vec<usize> = rows.iter().zip(options).map(|(r, o)| r * m + o).collect();
        let means = g.reshape(self.means, &[self.rows * m, a])?;
        let stds = g.reshape(self.stddevs, &[self.rows * m, a])?;
        let mu = g.index_rows(means, &idx)?;
        let sd = g.index_rows(stds, &idx)?;
        let x = g.constant(actions.clone());
        let lp = gaussian_log_density_node(g, x, mu, sd)?;
        Ok(g.sum_last(lp))
    }
}

/// Elementwise Gaussian log-density of equally shaped nodes.
pub fn gaussian_log_density_node(
    g: &mut Graph,
    x: Var,
    mean: Var,
    stddev: Var,
) -> Result<Var, GraphError> {
    let diff = g.sub(x, mean)?;
    let z = g.div(diff, stddev)?;
    let z2 = g.square(z);
    let half = g.scale(z2, -0.5);
    let log_sd = g.log(stddev);
    let out = g.sub(half, log_sd)?;
    Ok(g.offset(out, -0.5 * (2.0 * PI).ln()))
}
