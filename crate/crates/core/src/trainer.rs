//! Synchronous actor/learner loop: rollouts feed the replay, the learner
//! samples relabeled batches, and greedy evaluation blocks are logged.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{option_entropy, switch_rate};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::RunConfig;
use crate::critic::{Critic, CriticConfig};
use crate::diffgraph::Activation;
use crate::envs::{make_env, EnvError, Environment};
use crate::improvement::{Diagnostics, Learner, LearnerBatch, LearnerConfig, LearnerError};
use crate::policy::{
    ActMode, ExecutionState, OptionPolicy, ParamGroups, PolicyConfig, PolicyError, PolicyMode,
};
use crate::replay::{Episode, ReplayBuffer, ReplayError};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("learner step {step}: {source}")]
    Learner { step: usize, source: LearnerError },
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Option policy with learned terminations.
    Ho2,
    /// As `Ho2` with the switch budget enforced during inference.
    Ho2Limits,
    /// Mixture policy: options redrawn every step.
    Rhpo,
    /// Single Gaussian.
    Mpo,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Ho2 => "ho2",
            Algorithm::Ho2Limits => "ho2-limits",
            Algorithm::Rhpo => "rhpo",
            Algorithm::Mpo => "mpo",
        }
    }

    pub fn policy_mode(self) -> PolicyMode {
        match self {
            Algorithm::Ho2 | Algorithm::Ho2Limits => PolicyMode::Option,
            Algorithm::Rhpo => PolicyMode::Mixture,
            Algorithm::Mpo => PolicyMode::Flat,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub mode: Algorithm,
    /// Switch budget `N`, used by `ho2-limits` only.
    pub switch_budget: usize,
    /// Ignored by `mpo`, which always has one component.
    pub num_options: usize,
    pub batch_size: usize,
    pub learner_steps: usize,
    /// One actor episode per this many learner steps.
    pub learner_steps_per_episode: usize,
    /// Episodes collected before the first learner step.
    pub warmup_episodes: usize,
    /// Actor episodes stop once this many environment steps were taken.
    pub max_env_steps: Option<usize>,
    /// Learner steps between evaluation blocks; 0 disables periodic evaluation.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Episodes of the evaluation that follows training.
    pub final_eval_episodes: usize,
    /// `sample` executes the policy as the actor does; `greedy` takes mean
    /// actions and argmax options.
    pub eval_mode: ActMode,
    /// Learner steps between metric records.
    pub log_interval: usize,
    /// Tasks acted on and relabeled to; empty means all.
    pub tasks: Vec<usize>,
    /// Load terminations and components from this checkpoint; the controller starts fresh.
    pub load_checkpoint: Option<String>,
    /// Keep loaded terminations and components fixed.
    pub freeze_low_level: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: Algorithm::Ho2,
            switch_budget: 4,
            num_options: 4,
            batch_size: 16,
            learner_steps: 10_000,
            learner_steps_per_episode: 50,
            warmup_episodes: 4,
            max_env_steps: None,
            eval_interval: 1000,
            eval_episodes: 20,
            final_eval_episodes: 20,
            eval_mode: ActMode::Sample,
            log_interval: 1,
            tasks: Vec::new(),
            load_checkpoint: None,
            freeze_low_level: true,
        }
    }
}

impl TrainerConfig {
    pub fn effective_options(&self) -> usize {
        if self.mode == Algorithm::Mpo {
            1
        } else {
            self.num_options
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyOptions {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub layer_norm: bool,
    pub init_stddev_fraction: f64,
    pub min_stddev: f64,
    /// Components see only the task-agnostic observation groups.
    pub information_asymmetry: bool,
    pub task_conditioned_terminations: bool,
    pub clamp_terminations: bool,
    pub init_termination_logit: f64,
}

impl Default for PolicyOptions {
    fn default() -> Self {
        let p = PolicyConfig::default();
        Self {
            hidden: p.hidden,
            activation: p.activation,
            layer_norm: p.layer_norm,
            init_stddev_fraction: p.init_stddev_fraction,
            min_stddev: p.min_stddev,
            information_asymmetry: true,
            task_conditioned_terminations: p.task_conditioned_terminations,
            clamp_terminations: p.clamp_terminations,
            init_termination_logit: p.init_termination_logit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticOptions {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub layer_norm: bool,
    pub squash_actions: bool,
}

impl Default for CriticOptions {
    fn default() -> Self {
        let c = CriticConfig::default();
        Self {
            hidden: c.hidden,
            activation: c.activation,
            layer_norm: c.layer_norm,
            squash_actions: c.squash_actions,
        }
    }
}

pub fn policy_config(run: &RunConfig, env: &dyn Environment) -> PolicyConfig {
    let spec = env.observation_spec();
    let (lo, hi) = env.action_bounds();
    let o = &run.policy;
    PolicyConfig {
        num_options: run.trainer.effective_options(),
        observation_dim: spec.dim,
        action_dim: env.action_dim(),
        controller_features: spec.all(),
        component_features: if o.information_asymmetry {
            spec.task_agnostic()
        } else {
            spec.all()
        },
        mode: run.trainer.mode.policy_mode(),
        action_min: lo,
        action_max: hi,
        hidden: o.hidden.clone(),
        activation: o.activation,
        layer_norm: o.layer_norm,
        init_stddev_fraction: o.init_stddev_fraction,
        min_stddev: o.min_stddev,
        task_conditioned_terminations: o.task_conditioned_terminations,
        clamp_terminations: o.clamp_terminations,
        init_termination_logit: o.init_termination_logit,
    }
}

pub fn critic_config(run: &RunConfig, env: &dyn Environment) -> CriticConfig {
    let c = &run.critic;
    CriticConfig {
        observation_dim: env.observation_spec().dim,
        action_dim: env.action_dim(),
        num_options: run.trainer.effective_options(),
        num_tasks: env.num_tasks(),
        hidden: c.hidden.clone(),
        activation: c.activation,
        layer_norm: c.layer_norm,
        squash_actions: c.squash_actions,
    }
}

/// Learner settings with the switch budget implied by the mode.
pub fn learner_config(run: &RunConfig) -> LearnerConfig {
    let mut cfg = run.learner.clone();
    cfg.inference.max_switches =
        (run.trainer.mode == Algorithm::Ho2Limits).then_some(run.trainer.switch_budget);
    cfg
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Plays one episode on `task` with call-and-return execution.
pub fn run_actor_episode<R: Rng>(
    policy: &OptionPolicy,
    env: &mut dyn Environment,
    task: usize,
    mode: ActMode,
    rng: &mut R,
) -> Result<Episode, TrainError> {
    env.set_task(task)?;
    let first = env.reset(rng as &mut dyn RngCore);
    let mut ep = Episode {
        observations: vec![first],
        actions: Vec::new(),
        options: Vec::new(),
        terminations: Vec::new(),
        switches: Vec::new(),
        rewards: Vec::new(),
        raw_states: vec![env.raw_state()],
        task,
        terminal: false,
    };
    let mut state = ExecutionState::default();
    loop {
        let obs = ep.observations.last().expect("non-empty");
        let out = policy.act(&mut state, obs, mode, rng)?;
        let step = env.step(&out.action)?;
        ep.actions.push(out.action);
        ep.options.push(out.option);
        ep.terminations.push(out.terminated);
        ep.switches.push(out.switched);
        ep.rewards.push(step.rewards);
        ep.observations.push(step.observation);
        ep.raw_states.push(env.raw_state());
        if step.done {
            ep.terminal = step.terminal;
            return Ok(ep);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub steps: usize,
    /// Return on each episode's own task.
    pub mean_return: Option<f64>,
    /// Fraction of episodes with at least one rewarded step on their task.
    pub success_rate: Option<f64>,
    /// Indexed by task; `None` for tasks not evaluated.
    pub return_per_task: Vec<Option<f64>>,
    pub success_per_task: Vec<Option<f64>>,
    pub option_entropy: Option<f64>,
    pub switch_rate: Option<f64>,
    /// Fraction of steps where the controller was consulted, first steps excluded.
    pub termination_rate: Option<f64>,
}

impl EvalSummary {
    pub fn from_episodes(episodes: &[Episode], num_tasks: usize) -> Self {
        let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        let returns: Vec<f64> = episodes.iter().map(|e| e.task_return(e.task)).collect();
        let success: Vec<f64> = episodes
            .iter()
            .map(|e| f64::from(u8::from(e.rewards.iter().any(|r| r[e.task] > 0.0))))
            .collect();
        let per_task = |values: &[f64]| -> Vec<Option<f64>> {
            (0..num_tasks)
                .map(|k| {
                    let xs: Vec<f64> = episodes
                        .iter()
                        .zip(values)
                        .filter(|(e, _)| e.task == k)
                        .map(|(_, &v)| v)
                        .collect();
                    mean(&xs)
                })
                .collect()
        };
        let options: Vec<usize> = episodes
            .iter()
            .flat_map(|e| e.options.iter().copied())
            .collect();
        let ids: Vec<usize> = episodes
            .iter()
            .enumerate()
            .flat_map(|(i, e)| std::iter::repeat_n(i, e.steps()))
            .collect();
        let later: Vec<f64> = episodes
            .iter()
            .flat_map(|e| {
                e.terminations
                    .iter()
                    .skip(1)
                    .map(|&t| f64::from(u8::from(t)))
            })
            .collect();
        Self {
            episodes: episodes.len(),
            steps: options.len(),
            mean_return: mean(&returns),
            success_rate: mean(&success),
            return_per_task: per_task(&returns),
            success_per_task: per_task(&success),
            option_entropy: option_entropy(&options).ok(),
            switch_rate: switch_rate(&options, &ids).ok(),
            termination_rate: mean(&later),
        }
    }
}

/// Episodes in `mode` cycling through `tasks`.
pub fn evaluate<R: Rng>(
    policy: &OptionPolicy,
    env: &mut dyn Environment,
    tasks: &[usize],
    episodes: usize,
    mode: ActMode,
    rng: &mut R,
) -> Result<(EvalSummary, Vec<Episode>), TrainError> {
    let mut out = Vec::with_capacity(episodes);
    for i in 0..episodes {
        out.push(run_actor_episode(
            policy,
            env,
            tasks[i % tasks.len()],
            mode,
            rng,
        )?);
    }
    Ok((EvalSummary::from_episodes(&out, env.num_tasks()), out))
}

#[derive(Serialize)]
struct LearnerRecord<'a> {
    schema_version: u32,
    kind: &'static str,
    env_steps: usize,
    episodes: usize,
    #[serde(flatten)]
    diagnostics: &'a Diagnostics,
}

#[derive(Serialize)]
struct EpisodeRecord {
    schema_version: u32,
    kind: &'static str,
    episode: usize,
    env_steps: usize,
    learner_step: usize,
    task: usize,
    #[serde(rename = "return")]
    ret: f64,
    length: usize,
    switches: usize,
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    schema_version: u32,
    kind: &'static str,
    learner_step: usize,
    env_steps: usize,
    episodes: usize,
    #[serde(flatten)]
    summary: &'a EvalSummary,
}

pub struct TrainOutcome {
    pub learner: Learner,
    pub final_eval: EvalSummary,
    pub env_steps: usize,
    pub episodes: usize,
    pub dropped_episodes: usize,
}

/// Replaces terminations and components with the checkpoint's, keeping the
/// freshly initialized controller.
pub fn load_low_level(policy: &mut OptionPolicy, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let shapes = |p: &OptionPolicy| -> Vec<Vec<usize>> {
        p.termination
            .params()
            .into_iter()
            .chain(p.components.params())
            .map(|t| t.shape().to_vec())
            .collect()
    };
    let (a, b) = (&policy.config, &ckpt.policy.config);
    if a.num_options != b.num_options
        || a.action_dim != b.action_dim
        || a.observation_dim != b.observation_dim
    {
        return Err(CheckpointError::Incompatible(format!(
            "checkpoint has {} options, action dim {}, observation dim {}; run expects {}, {}, {}",
            b.num_options,
            b.action_dim,
            b.observation_dim,
            a.num_options,
            a.action_dim,
            a.observation_dim
        )));
    }
    if a.component_features != b.component_features || shapes(policy) != shapes(&ckpt.policy) {
        return Err(CheckpointError::Incompatible(
            "termination or component networks differ in shape or inputs".into(),
        ));
    }
    policy.termination = ckpt.policy.termination.clone();
    policy.components = ckpt.policy.components.clone();
    Ok(())
}

/// Runs a full training job, writing `metrics.jsonl` and `checkpoint.bin` into `out_dir`.
pub fn train(run: &RunConfig, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    run.validate()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let tc = &run.trainer;
    let name = run.env.name.as_deref().expect("validated");
    let mut env = make_env(name, run.env.episode_cap)?;
    let mut eval_env = make_env(name, run.env.episode_cap)?;
    let tasks: Vec<usize> = if tc.tasks.is_empty() {
        (0..env.num_tasks()).collect()
    } else {
        tc.tasks.clone()
    };

    let mut init_rng = rng_stream(run.seed, 0);
    let mut actor_rng = rng_stream(run.seed, 1);
    let mut learner_rng = rng_stream(run.seed, 2);
    let mut eval_rng = rng_stream(run.seed, 3);

    let mut policy = OptionPolicy::new(policy_config(run, env.as_ref()), &mut init_rng)?;
    let critic = Critic::new(critic_config(run, env.as_ref()), &mut init_rng);
    let mut trainable = ParamGroups::default();
    if let Some(path) = &tc.load_checkpoint {
        let ckpt = Checkpoint::load(Path::new(path))?;
        load_low_level(&mut policy, &ckpt)?;
        trainable.termination = !tc.freeze_low_level;
        trainable.components = !tc.freeze_low_level;
    }
    let mut learner = Learner::new(learner_config(run), policy, critic);
    learner.trainable = trainable;

    std::fs::create_dir_all(out_dir)?;
    let mut metrics = BufWriter::new(File::create(out_dir.join("metrics.jsonl"))?);
    let replay = ReplayBuffer::new(run.replay.clone());
    let spec = env.observation_spec().clone();

    let mut env_steps = 0usize;
    let mut episodes = 0usize;
    let budget_left = |steps: usize| tc.max_env_steps.is_none_or(|cap| steps < cap);

    let mut collect = |learner: &Learner,
                       env: &mut Box<dyn Environment>,
                       metrics: &mut BufWriter<File>,
                       env_steps: &mut usize,
                       episodes: &mut usize|
     -> Result<(), TrainError> {
        let task = tasks[actor_rng.random_range(0..tasks.len())];
        let ep = run_actor_episode(
            &learner.policy,
            env.as_mut(),
            task,
            ActMode::Sample,
            &mut actor_rng,
        )?;
        *env_steps += ep.steps();
        *episodes += 1;
        let rewards_env = &**env;
        replay.append_episode(&ep, &|s| rewards_env.task_rewards(s))?;
        write_line(
            metrics,
            &EpisodeRecord {
                schema_version: METRICS_SCHEMA_VERSION,
                kind: "episode",
                episode: *episodes,
                env_steps: *env_steps,
                learner_step: learner.steps,
                task,
                ret: ep.task_return(task),
                length: ep.steps(),
                switches: ep.switches.iter().filter(|&&s| s).count(),
            },
        )
    };

    while (episodes < tc.warmup_episodes || replay.len() < tc.batch_size) && budget_left(env_steps)
    {
        collect(
            &learner,
            &mut env,
            &mut metrics,
            &mut env_steps,
            &mut episodes,
        )?;
    }

    if tc.learner_steps > 0 && replay.len() < tc.batch_size {
        return Err(TrainError::Config(format!(
            "replay holds {} segments after warmup, batch needs {}; raise the env step budget or shorten segments",
            replay.len(),
            tc.batch_size
        )));
    }

    for step in 0..tc.learner_steps {
        if step > 0 && step % tc.learner_steps_per_episode == 0 && budget_left(env_steps) {
            collect(
                &learner,
                &mut env,
                &mut metrics,
                &mut env_steps,
                &mut episodes,
            )?;
        }
        let segments = replay.sample_batch(tc.batch_size, &mut learner_rng)?;
        let batch_tasks: Vec<usize> = (0..tc.batch_size)
            .map(|_| tasks[learner_rng.random_range(0..tasks.len())])
            .collect();
        let refs: Vec<_> = segments.iter().collect();
        let batch = LearnerBatch::from_segments(&refs, &batch_tasks, &spec)
            .map_err(|source| TrainError::Learner { step, source })?;
        let diag = learner
            .step(&batch, &mut learner_rng)
            .map_err(|source| TrainError::Learner { step, source })?;
        if tc.log_interval > 0 && (step + 1) % tc.log_interval == 0 {
            write_line(
                &mut metrics,
                &LearnerRecord {
                    schema_version: METRICS_SCHEMA_VERSION,
                    kind: "learner",
                    env_steps,
                    episodes,
                    diagnostics: &diag,
                },
            )?;
        }
        if tc.eval_interval > 0 && (step + 1) % tc.eval_interval == 0 && tc.eval_episodes > 0 {
            let (summary, _) = evaluate(
                &learner.policy,
                eval_env.as_mut(),
                &tasks,
                tc.eval_episodes,
                tc.eval_mode,
                &mut eval_rng,
            )?;
            write_eval(
                &mut metrics,
                "eval",
                learner.steps,
                env_steps,
                episodes,
                &summary,
            )?;
        }
    }

    let (final_eval, _) = evaluate(
        &learner.policy,
        eval_env.as_mut(),
        &tasks,
        tc.final_eval_episodes,
        tc.eval_mode,
        &mut eval_rng,
    )?;
    write_eval(
        &mut metrics,
        "final_eval",
        learner.steps,
        env_steps,
        episodes,
        &final_eval,
    )?;
    metrics.flush()?;

    checkpoint_of(&learner, name, tc.mode, env_steps).save(&out_dir.join("checkpoint.bin"))?;
    Ok(TrainOutcome {
        final_eval,
        env_steps,
        episodes,
        dropped_episodes: replay.dropped_episodes(),
        learner,
    })
}

pub fn checkpoint_of(
    learner: &Learner,
    env: &str,
    mode: Algorithm,
    env_steps: usize,
) -> Checkpoint {
    let m = learner.em.raw_multipliers;
    Checkpoint {
        env: env.to_string(),
        algorithm: mode.name().to_string(),
        learner_steps: learner.steps as u64,
        env_steps: env_steps as u64,
        policy: learner.policy.clone(),
        critic: learner.critic.clone(),
        raw_duals: [learner.em.raw_temperature, m[0], m[1], m[2], m[3]],
    }
}

fn write_eval<W: Write>(
    w: &mut W,
    kind: &'static str,
    learner_step: usize,
    env_steps: usize,
    episodes: usize,
    summary: &EvalSummary,
) -> Result<(), TrainError> {
    write_line(
        w,
        &EvalRecord {
            schema_version: METRICS_SCHEMA_VERSION,
            kind,
            learner_step,
            env_steps,
            episodes,
            summary,
        },
    )
}

fn write_line<W: Write, T: Serialize>(w: &mut W, record: &T) -> Result<(), TrainError> {
    serde_json::to_writer(&mut *w, record)?;
    w.write_all(b"\n")?;
    Ok(())
}
