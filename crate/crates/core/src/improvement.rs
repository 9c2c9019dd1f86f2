//! Critic-weighted expectation-maximization policy improvement.
//!
//! The E-step draws `J` (action, option) pairs per history from the target
//! policy and reweights them by `softmax(Q/η)`, with the temperature `η` set
//! by descending the convex dual `g(η)`. The M-step fits the parametric policy
//! to the weighted samples by maximum likelihood, where the option likelihood
//! is the differentiable posterior from the inference module, under Lagrangian
//! trust regions on the controller, the terminations and the component means
//! and covariances.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critic::{critic_loss, td_targets, Critic, TargetExpectation, TdInputs};
use crate::diffgraph::{
    log_sum_exp, softplus, softplus_inv, Graph, GraphError, Optimizer, OptimizerConfig, Tensor, Var,
};
use crate::envs::ObservationSpec;
use crate::inference::{
    infer, InferenceConfig, InferenceError, OptionInputs, OptionPosterior, TrajectorySegment,
};
use crate::policy::{
    sample_categorical, HeadVars, OptionPolicy, ParamGroups, PolicyError, PolicyHeads, PolicyVars,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LearnerError {
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// KL budgets. An infinite budget disables the corresponding constraint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budgets {
    /// E-step bound on KL(q ‖ π).
    pub estep: f64,
    #[serde(with = "unbounded")]
    pub controller: f64,
    #[serde(with = "unbounded")]
    pub termination: f64,
    #[serde(with = "unbounded")]
    pub mean: f64,
    #[serde(with = "unbounded")]
    pub covariance: f64,
}

/// Infinite budgets travel through JSON as `null`.
mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        if value.is_finite() {
            s.serialize_f64(*value)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            estep: 0.1,
            controller: 1e-4,
            termination: 1e-4,
            mean: 5e-4,
            covariance: 5e-5,
        }
    }
}

impl Budgets {
    pub fn unconstrained(estep: f64) -> Self {
        Self {
            estep,
            controller: f64::INFINITY,
            termination: f64::INFINITY,
            mean: f64::INFINITY,
            covariance: f64::INFINITY,
        }
    }

    fn trust_regions(&self) -> [f64; 4] {
        [
            self.controller,
            self.termination,
            self.mean,
            self.covariance,
        ]
    }
}

/// Temperature and Lagrange multipliers, each stored as a softplus pre-image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmState {
    pub raw_temperature: f64,
    /// Controller, termination, mean, covariance.
    pub raw_multipliers: [f64; 4],
    pub budgets: Budgets,
}

impl EmState {
    pub fn new(budgets: Budgets, temperature: f64, multiplier: f64) -> Self {
        Self {
            raw_temperature: softplus_inv(temperature),
            raw_multipliers: [softplus_inv(multiplier); 4],
            budgets,
        }
    }

    pub fn temperature(&self) -> f64 {
        softplus(self.raw_temperature)
    }

    pub fn multipliers(&self) -> [f64; 4] {
        self.raw_multipliers.map(softplus)
    }
}

/// `J` samples for each of `R` histories, sample `r·J + j` belonging to history `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub histories: usize,
    pub samples: usize,
    pub options: Vec<usize>,
    /// `[R·J, A]`.
    pub actions: Tensor,
    /// Online critic value of each sample.
    pub q: Vec<f64>,
}

impl SampleSet {
    pub fn history_of(&self) -> Vec<usize> {
        (0..self.histories * self.samples)
            .map(|s| s / self.samples)
            .collect()
    }
}

/// Draws `o ~ π^H(·|h)` then `a ~ π^L(·|s, o)` and scores each pair with the online critic.
#[allow(clippy::too_many_arguments)]
pub fn estep_sample<R: Rng + ?Sized>(
    heads: &PolicyHeads,
    log_posterior: &[f64],
    critic: &Critic,
    observations: &Tensor,
    tasks: &[usize],
    samples: usize,
    rng: &mut R,
) -> Result<SampleSet, GraphError> {
    let (rows, m, a) = (heads.rows, heads.options, heads.action_dim);
    let n = rows * samples;
    let mut options = Vec::with_capacity(n);
    let mut actions = Vec::with_capacity(n * a);
    let mut obs = Vec::with_capacity(n * observations.last_dim());
    for r in 0..rows {
        let post: Vec<f64> = log_posterior[r * m..(r + 1) * m]
            .iter()
            .map(|v| v.exp())
            .collect();
        for _ in 0..samples {
            let o = sample_categorical(&post, rng);
            let (mean, sd) = (heads.mean(r, o), heads.stddev(r, o));
            actions.extend(
                mean.iter()
                    .zip(sd)
                    .map(|(mu, s)| mu + s * rng.sample::<f64, _>(StandardNormal)),
            );
            options.push(o);
            obs.extend_from_slice(observations.row(r));
        }
    }
    let actions = Tensor::new(vec![n, a], actions)?;
    let obs = Tensor::new(vec![n, observations.last_dim()], obs)?;
    let values = critic.q_values(&obs, &actions, &options)?;
    let q = (0..n).map(|s| values.row(s)[tasks[s / samples]]).collect();
    Ok(SampleSet {
        histories: rows,
        samples,
        options,
        actions,
        q,
    })
}

/// Per-history `softmax_j(Q_j / η)`.
pub fn estep_weights(q: &[f64], samples: usize, temperature: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(q.len());
    for chunk in q.chunks(samples) {
        let scaled: Vec<f64> = chunk.iter().map(|v| v / temperature).collect();
        let lse = log_sum_exp(&scaled);
        out.extend(scaled.iter().map(|v| (v - lse).exp()));
    }
    out
}

/// Mean over histories of KL(w ‖ uniform over the samples).
pub fn kl_to_uniform(weights: &[f64], samples: usize) -> f64 {
    let ln_j = (samples as f64).ln();
    let chunks = weights.chunks(samples);
    let count = chunks.len() as f64;
    chunks
        .map(|w| {
            w.iter()
                .filter(|&&v| v > 0.0)
                .map(|v| v * (v.ln() + ln_j))
                .sum::<f64>()
        })
        .sum::<f64>()
        / count
}

/// `g(η) = η·ε + η·mean_h[log mean_j exp(Q_hj / η)]`.
pub fn dual_value(q: &[f64], samples: usize, temperature: f64, epsilon: f64) -> f64 {
    let ln_j = (samples as f64).ln();
    let chunks = q.chunks(samples);
    let count = chunks.len() as f64;
    let inner: f64 = chunks
        .map(|c| log_sum_exp(&c.iter().map(|v| v / temperature).collect::<Vec<_>>()) - ln_j)
        .sum::<f64>()
        / count;
    temperature * epsilon + temperature * inner
}

/// Graph form of [`dual_value`] with `η = softplus(raw)`.
pub fn dual_loss(
    g: &mut Graph,
    raw_temperature: Var,
    q: &[f64],
    samples: usize,
    epsilon: f64,
) -> Result<Var, GraphError> {
    let rows = q.len() / samples;
    let eta = g.softplus(raw_temperature);
    let qv = g.constant(Tensor::new(vec![rows, samples], q.to_vec())?);
    let scaled = g.div(qv, eta)?;
    let lse = g.log_sum_exp_last(scaled);
    let inner = g.mean_all(lse);
    let inner = g.offset(inner, epsilon - (samples as f64).ln());
    g.mul(eta, inner)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemperatureSolver {
    /// Starting temperature; `None` starts from the small-KL estimate
    /// `σ_Q / sqrt(2ε)`, which keeps the solve invariant to the scale of `Q`.
    pub initial: Option<f64>,
    pub steps: usize,
    pub lr: f64,
    /// Per-step multiplicative learning-rate decay.
    pub decay: f64,
}

impl Default for TemperatureSolver {
    fn default() -> Self {
        Self {
            initial: None,
            steps: 4000,
            lr: 0.05,
            decay: 0.999,
        }
    }
}

/// Minimizes `g(η)` by adaptive gradient descent on the softplus pre-image.
pub fn solve_temperature(
    q: &[f64],
    samples: usize,
    epsilon: f64,
    solver: &TemperatureSolver,
) -> Result<f64, GraphError> {
    let initial = solver.initial.unwrap_or_else(|| {
        let spread = q
            .chunks(samples)
            .map(|c| {
                let mean = c.iter().sum::<f64>() / c.len() as f64;
                (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c.len() as f64).sqrt()
            })
            .sum::<f64>()
            / (q.len() / samples).max(1) as f64;
        (spread / (2.0 * epsilon).sqrt()).max(1e-3)
    });
    let mut raw = Tensor::scalar(softplus_inv(initial));
    let mut opt = Optimizer::new(OptimizerConfig::adam(solver.lr));
    let mut lr = solver.lr;
    for _ in 0..solver.steps {
        let mut g = Graph::new();
        let r = g.param(raw.clone());
        let loss = dual_loss(&mut g, r, q, samples, epsilon)?;
        let grads = g.backward(loss)?;
        opt.step(&mut [&mut raw], &[grads.wrt(r)]);
        lr *= solver.decay;
        opt.set_lr(lr);
    }
    Ok(softplus(raw.item()))
}

/// Everything the M-step needs besides the policy graph itself.
pub struct MStepInputs<'a> {
    /// Current-parameter heads on the `R` histories.
    pub heads: &'a HeadVars,
    /// Current-parameter posterior over the same histories.
    pub posterior: &'a OptionPosterior,
    /// Old (target) heads on the same histories.
    pub old: &'a PolicyHeads,
    pub samples: &'a SampleSet,
    pub weights: &'a [f64],
    /// Terminations are unused; their distance is identically zero.
    pub always_terminates: bool,
}

/// Graph nodes of the M-step.
#[derive(Clone, Copy, Debug)]
pub struct MStepTerms {
    /// Weighted NLL plus multiplier-weighted trust-region penalties (multipliers constant).
    pub policy_loss: Var,
    /// `Σ α_i (ε_i − T_i)` with distances constant; `None` when every budget is infinite.
    pub multiplier_loss: Option<Var>,
    pub nll: Var,
    /// Controller, termination, mean, covariance distances.
    pub distances: [Var; 4],
}

/// Critic-weighted maximum likelihood under decoupled KL trust regions.
/// `multipliers` are nodes holding `α ≥ 0`.
pub fn mstep_loss(
    g: &mut Graph,
    inputs: &MStepInputs,
    multipliers: &[Var; 4],
    budgets: &Budgets,
) -> Result<MStepTerms, GraphError> {
    let heads = inputs.heads;
    let old = inputs.old;
    let set = inputs.samples;
    let (rows, m, a) = (heads.rows, heads.options, heads.action_dim);

    // Weighted negative log-likelihood of log π^L + log π^H, averaged over histories.
    let history = set.history_of();
    let ll = heads.sample_log_likelihoods(g, &history, &set.options, &set.actions)?;
    let post_rows = g.index_rows(inputs.posterior.log_marginal, &history)?;
    let lp_h = g.gather_last(post_rows, &set.options)?;
    let joint = g.add(ll, lp_h)?;
    let w = g.constant(Tensor::vector(inputs.weights.to_vec()));
    let weighted = g.mul(joint, w)?;
    let total = g.sum_all(weighted);
    let nll = g.scale(total, -1.0 / set.histories as f64);

    // Controller: KL(old ‖ new) averaged over histories.
    let lc_old = Tensor::new(vec![rows, m], old.log_controller.clone())?;
    let p_old = g.constant(Tensor::new(
        vec![rows, m],
        old.log_controller.iter().map(|v| v.exp()).collect(),
    )?);
    let lc_old = g.constant(lc_old);
    let diff = g.sub(lc_old, heads.log_controller)?;
    let kl = g.mul(p_old, diff)?;
    let kl = g.sum_all(kl);
    let kl_controller = g.scale(kl, 1.0 / rows as f64);

    // Terminations: Bernoulli KL averaged over histories and options.
    let kl_termination = if inputs.always_terminates {
        g.scalar(0.0)
    } else {
        let lt_old = g.constant(Tensor::new(vec![rows, m], old.log_termination.clone())?);
        let lk_old = g.constant(Tensor::new(vec![rows, m], old.log_continue.clone())?);
        let bt = g.constant(Tensor::new(
            vec![rows, m],
            old.log_termination.iter().map(|v| v.exp()).collect(),
        )?);
        let bk = g.constant(Tensor::new(
            vec![rows, m],
            old.log_continue.iter().map(|v| v.exp()).collect(),
        )?);
        let dt = g.sub(lt_old, heads.log_termination)?;
        let dk = g.sub(lk_old, heads.log_continue)?;
        let t1 = g.mul(bt, dt)?;
        let t2 = g.mul(bk, dk)?;
        let s = g.add(t1, t2)?;
        let s = g.sum_all(s);
        g.scale(s, 1.0 / (rows * m) as f64)
    };

    // Gaussian components, decoupled into mean and covariance parts.
    let mu_old = g.constant(Tensor::new(vec![rows, m * a], old.means.clone())?);
    let sd_old_t = Tensor::new(vec![rows, m * a], old.stddevs.clone())?;
    let var_old = g.constant(Tensor::new(
        vec![rows, m * a],
        old.stddevs.iter().map(|s| s * s).collect(),
    )?);
    let sd_old = g.constant(sd_old_t);
    let dm = g.sub(heads.means, mu_old)?;
    let dm2 = g.square(dm);
    let maha = g.div(dm2, var_old)?;
    let maha = g.sum_all(maha);
    let kl_mean = g.scale(maha, 0.5 / (rows * m) as f64);
    let var_new = g.square(heads.stddevs);
    let ratio = g.div(var_old, var_new)?;
    let ratio = g.offset(ratio, -1.0);
    let log_sd_new = g.log(heads.stddevs);
    let log_sd_old = g.log(sd_old);
    let log_ratio = g.sub(log_sd_new, log_sd_old)?;
    let log_ratio = g.scale(log_ratio, 2.0);
    let cov = g.add(ratio, log_ratio)?;
    let cov = g.sum_all(cov);
    let kl_covariance = g.scale(cov, 0.5 / (rows * m) as f64);

    let distances = [kl_controller, kl_termination, kl_mean, kl_covariance];
    let mut policy_loss = nll;
    let mut multiplier_terms = Vec::new();
    for ((&d, &alpha), &eps) in distances
        .iter()
        .zip(multipliers)
        .zip(&budgets.trust_regions())
    {
        if !eps.is_finite() {
            continue;
        }
        let alpha_const = g.constant(g.value(alpha).clone());
        let excess = g.offset(d, -eps);
        let penalty = g.mul(alpha_const, excess)?;
        policy_loss = g.add(policy_loss, penalty)?;
        let slack = g.scalar(eps - g.item(d));
        multiplier_terms.push(g.mul(alpha, slack)?);
    }
    let multiplier_loss = match multiplier_terms.split_first() {
        None => None,
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = g.add(acc, t)?;
            }
            Some(acc)
        }
    };
    Ok(MStepTerms {
        policy_loss,
        multiplier_loss,
        nll,
        distances,
    })
}

/// Time-major learner inputs built from equal-length segments.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerBatch {
    pub len: usize,
    pub batch: usize,
    /// `[T·B, D]`, task one-hot set to each sequence's training task.
    pub observations: Tensor,
    /// `[(T−1)·B, A]`.
    pub actions: Tensor,
    /// Executed options, `(T−1)·B`.
    pub options: Vec<usize>,
    /// Rewards of each sequence's training task, `(T−1)·B`.
    pub rewards: Vec<f64>,
    /// Whether the observation after each transition is terminal, `(T−1)·B`.
    pub terminal_next: Vec<bool>,
    /// Training task of each sequence.
    pub tasks: Vec<usize>,
}

impl LearnerBatch {
    pub fn from_segments(
        segments: &[&TrajectorySegment],
        tasks: &[usize],
        spec: &ObservationSpec,
    ) -> Result<Self, LearnerError> {
        let first = segments
            .first()
            .ok_or_else(|| LearnerError::InvalidBatch("no segments".into()))?;
        let len = first.len();
        let batch = segments.len();
        if tasks.len() != batch {
            return Err(LearnerError::InvalidBatch(
                "one task per segment required".into(),
            ));
        }
        if len < 2
            || segments
                .iter()
                .any(|s| s.len() != len || s.actions.len() != len - 1)
        {
            return Err(LearnerError::InvalidBatch(
                "segments must share a length of at least 2".into(),
            ));
        }
        let dim = first.observations[0].len();
        let adim = first.actions[0].len();
        let mut obs = Vec::with_capacity(len * batch * dim);
        for t in 0..len {
            for (s, &k) in segments.iter().zip(tasks) {
                obs.extend(spec.with_task(&s.observations[t], k));
            }
        }
        let mut actions = Vec::with_capacity((len - 1) * batch * adim);
        let mut options = Vec::with_capacity((len - 1) * batch);
        let mut rewards = Vec::with_capacity((len - 1) * batch);
        let mut terminal_next = Vec::with_capacity((len - 1) * batch);
        for t in 0..len - 1 {
            for (s, &k) in segments.iter().zip(tasks) {
                actions.extend_from_slice(&s.actions[t]);
                options.push(s.options[t]);
                rewards.push(s.rewards[t][k]);
                terminal_next.push(s.terminal && t + 2 == len);
            }
        }
        Ok(Self {
            len,
            batch,
            observations: Tensor::new(vec![len * batch, dim], obs)?,
            actions: Tensor::new(vec![(len - 1) * batch, adim], actions)?,
            options,
            rewards,
            terminal_next,
            tasks: tasks.to_vec(),
        })
    }

    pub fn rows(&self) -> usize {
        self.len * self.batch
    }

    /// Task of every row of the first `steps` timesteps.
    pub fn row_tasks(&self, steps: usize) -> Vec<usize> {
        (0..steps * self.batch)
            .map(|r| self.tasks[r % self.batch])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub discount: f64,
    /// E-step samples per history.
    pub samples: usize,
    /// Samples per TD target.
    pub target_samples: usize,
    pub target_period: usize,
    pub policy_optimizer: OptimizerConfig,
    pub critic_optimizer: OptimizerConfig,
    /// Shared by the temperature and the multipliers.
    pub dual_optimizer: OptimizerConfig,
    pub budgets: Budgets,
    pub init_temperature: f64,
    pub init_multiplier: f64,
    pub inference: InferenceConfig,
    pub target_expectation: TargetExpectation,
    /// Draw E-step samples from the target policy rather than the online one.
    pub sample_from_target: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            discount: 0.99,
            samples: 20,
            target_samples: 10,
            target_period: 200,
            policy_optimizer: OptimizerConfig::adam(3e-4),
            critic_optimizer: OptimizerConfig::adam(3e-4),
            dual_optimizer: OptimizerConfig::adam(1e-2),
            budgets: Budgets::default(),
            init_temperature: 1.0,
            init_multiplier: 1.0,
            inference: InferenceConfig::default(),
            target_expectation: TargetExpectation::Sampled,
            sample_from_target: true,
        }
    }
}

/// Per-step learner diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub step: usize,
    pub policy_loss: f64,
    pub nll: f64,
    pub critic_loss: f64,
    pub dual_loss: f64,
    pub temperature: f64,
    pub alpha_controller: f64,
    pub alpha_termination: f64,
    pub alpha_mean: f64,
    pub alpha_covariance: f64,
    pub kl_controller: f64,
    pub kl_termination: f64,
    pub kl_mean: f64,
    pub kl_covariance: f64,
    pub estep_kl: f64,
    pub posterior_entropy: f64,
    pub mean_q: f64,
    pub target_synced: bool,
}

/// Policy, critic and dual variables plus their optimizers.
#[derive(Clone, Debug)]
pub struct Learner {
    pub config: LearnerConfig,
    pub policy: OptionPolicy,
    pub target_policy: OptionPolicy,
    pub critic: Critic,
    pub em: EmState,
    pub trainable: ParamGroups,
    pub steps: usize,
    policy_opt: Optimizer,
    critic_opt: Optimizer,
    dual_opt: Optimizer,
}

/// Heads and posterior values under fixed parameters.
pub fn plain_posterior(
    policy: &OptionPolicy,
    batch: &LearnerBatch,
    inference: &InferenceConfig,
) -> Result<(PolicyHeads, Vec<f64>), LearnerError> {
    let mut g = Graph::new();
    let vars = policy.register(&mut g, false);
    let heads = policy.head_vars(&mut g, &vars, &batch.observations)?;
    let actions = inference.action_conditioning.then_some(&batch.actions);
    let inputs = OptionInputs::from_heads(&mut g, &heads, actions, batch.batch, batch.len)?;
    let post = infer(&mut g, &inputs, inference)?;
    Ok((
        heads.values(&g),
        g.value(post.log_marginal).values().to_vec(),
    ))
}

impl Learner {
    pub fn new(config: LearnerConfig, policy: OptionPolicy, critic: Critic) -> Self {
        let em = EmState::new(
            config.budgets,
            config.init_temperature,
            config.init_multiplier,
        );
        Self {
            policy_opt: Optimizer::new(config.policy_optimizer),
            critic_opt: Optimizer::new(config.critic_optimizer),
            dual_opt: Optimizer::new(config.dual_optimizer),
            target_policy: policy.clone(),
            policy,
            critic,
            em,
            trainable: ParamGroups::default(),
            steps: 0,
            config,
        }
    }

    pub fn sync_targets(&mut self) {
        self.target_policy = self.policy.clone();
        self.critic.sync_target();
    }

    /// One optimizer step each for the policy, critic, temperature and multipliers.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        batch: &LearnerBatch,
        rng: &mut R,
    ) -> Result<Diagnostics, LearnerError> {
        let cfg = self.config.clone();
        let (len, b) = (batch.len, batch.batch);
        let rows = batch.rows();
        let acted = (len - 1) * b;

        let (target_heads, target_post) =
            plain_posterior(&self.target_policy, batch, &cfg.inference)?;
        let (sample_heads, sample_post) = if cfg.sample_from_target {
            (target_heads.clone(), target_post.clone())
        } else {
            plain_posterior(&self.policy, batch, &cfg.inference)?
        };
        let samples = estep_sample(
            &sample_heads,
            &sample_post,
            &self.critic,
            &batch.observations,
            &batch.row_tasks(len),
            cfg.samples,
            rng,
        )?;
        let temperature = self.em.temperature();
        let weights = estep_weights(&samples.q, cfg.samples, temperature);

        let m = self.policy.num_options();
        let next_obs = batch.observations.slice_rows(b, acted);
        let next_heads = target_heads.slice_rows(b, acted);
        let discounts: Vec<f64> = batch
            .terminal_next
            .iter()
            .map(|&t| if t { 0.0 } else { cfg.discount })
            .collect();
        let row_tasks = batch.row_tasks(len - 1);
        let targets = td_targets(
            &self.critic,
            &TdInputs {
                next_observations: &next_obs,
                next_heads: &next_heads,
                next_log_posterior: &target_post[b * m..],
                rewards: &batch.rewards,
                discounts: &discounts,
                tasks: &row_tasks,
            },
            cfg.target_samples,
            cfg.target_expectation,
            rng,
        )?;

        let mut g = Graph::new();
        let pvars = self.policy.register(&mut g, true);
        let cvars = self.critic.register(&mut g);
        let raw_eta = g.param(Tensor::scalar(self.em.raw_temperature));
        let raw_alpha: Vec<Var> = self
            .em
            .raw_multipliers
            .iter()
            .map(|&r| g.param(Tensor::scalar(r)))
            .collect();
        let alphas: Vec<Var> = raw_alpha.iter().map(|&r| g.softplus(r)).collect();
        let alphas: [Var; 4] = alphas.try_into().expect("four multipliers");

        let (terms, posterior) = self.mstep_graph(
            &mut g,
            &pvars,
            batch,
            &target_heads,
            &samples,
            &weights,
            &alphas,
        )?;
        let dual = dual_loss(&mut g, raw_eta, &samples.q, cfg.samples, cfg.budgets.estep)?;
        let current_obs = batch.observations.slice_rows(0, acted);
        let q = self.critic.q_node(
            &mut g,
            &cvars,
            &current_obs,
            &batch.actions,
            &batch.options,
            &row_tasks,
        )?;
        let closs = critic_loss(&mut g, q, &targets)?;

        let mut total = g.add(terms.policy_loss, dual)?;
        total = g.add(total, closs)?;
        if let Some(ml) = terms.multiplier_loss {
            total = g.add(total, ml)?;
        }
        let grads = g.backward(total)?;

        let mask = self.policy.param_group_mask(self.trainable);
        let pv = pvars.vars();
        let mut pgrads = Vec::new();
        let mut params = Vec::new();
        for ((p, &v), &train) in self.policy.params_mut().into_iter().zip(&pv).zip(&mask) {
            if train {
                pgrads.push(grads.wrt(v));
                params.push(p);
            }
        }
        self.policy_opt.step(&mut params, &pgrads);
        let cgrads: Vec<Tensor> = cvars.vars().iter().map(|&v| grads.wrt(v)).collect();
        self.critic_opt
            .step(&mut self.critic.online.params_mut(), &cgrads);
        let mut dual_params: Vec<Tensor> = std::iter::once(self.em.raw_temperature)
            .chain(self.em.raw_multipliers)
            .map(Tensor::scalar)
            .collect();
        let dual_grads: Vec<Tensor> = std::iter::once(raw_eta)
            .chain(raw_alpha.iter().copied())
            .map(|v| grads.wrt(v))
            .collect();
        self.dual_opt
            .step(&mut dual_params.iter_mut().collect::<Vec<_>>(), &dual_grads);
        self.em.raw_temperature = dual_params[0].item();
        for i in 0..4 {
            self.em.raw_multipliers[i] = dual_params[i + 1].item();
        }

        self.steps += 1;
        let synced = self.critic.tick(cfg.target_period);
        if synced {
            self.target_policy = self.policy.clone();
        }

        let lm = g.value(posterior.log_marginal);
        let entropy = (0..rows)
            .map(|r| -lm.row(r).iter().map(|l| l.exp() * l).sum::<f64>())
            .sum::<f64>()
            / rows as f64;
        let alpha = self.em.multipliers();
        Ok(Diagnostics {
            step: self.steps,
            policy_loss: g.item(terms.policy_loss),
            nll: g.item(terms.nll),
            critic_loss: g.item(closs),
            dual_loss: g.item(dual),
            temperature: self.em.temperature(),
            alpha_controller: alpha[0],
            alpha_termination: alpha[1],
            alpha_mean: alpha[2],
            alpha_covariance: alpha[3],
            kl_controller: g.item(terms.distances[0]),
            kl_termination: g.item(terms.distances[1]),
            kl_mean: g.item(terms.distances[2]),
            kl_covariance: g.item(terms.distances[3]),
            estep_kl: kl_to_uniform(&weights, cfg.samples),
            posterior_entropy: entropy,
            mean_q: samples.q.iter().sum::<f64>() / samples.q.len() as f64,
            target_synced: synced,
        })
    }

    /// Builds the M-step on the current policy graph.
    #[allow(clippy::too_many_arguments)]
    pub fn mstep_graph(
        &self,
        g: &mut Graph,
        pvars: &PolicyVars,
        batch: &LearnerBatch,
        old: &PolicyHeads,
        samples: &SampleSet,
        weights: &[f64],
        alphas: &[Var; 4],
    ) -> Result<(MStepTerms, OptionPosterior), LearnerError> {
        let heads = self.policy.head_vars(g, pvars, &batch.observations)?;
        let actions = self
            .config
            .inference
            .action_conditioning
            .then_some(&batch.actions);
        let inputs = OptionInputs::from_heads(g, &heads, actions, batch.batch, batch.len)?;
        let posterior = infer(g, &inputs, &self.config.inference)?;
        let terms = mstep_loss(
            g,
            &MStepInputs {
                heads: &heads,
                posterior: &posterior,
                old,
                samples,
                weights,
                always_terminates: self.policy.config.always_terminates(),
            },
            alphas,
            &self.em.budgets,
        )?;
        Ok((terms, posterior))
    }
}
