//! Option posteriors by forward dynamic programming.
//!
//! Options are latent variables of the trajectory. The filtered posterior
//! `π^H(o_t | h_t)` is propagated through the call-and-return transition
//! model one step at a time, in log space, with per-step normalization. The
//! switch-limited variant augments the state with the number of terminations
//! `n ≤ N` seen so far and drops paths that would exceed the budget.
//!
//! Batches are time-major: row `t·B + b` holds timestep `t` of sequence `b`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgraph::{Graph, GraphError, Tensor, Var};
use crate::policy::HeadVars;

/// Lower bound applied to normalized log-weights.
pub const LOG_WEIGHT_FLOOR: f64 = -80.0;
/// Largest `M^T` the brute-force oracle accepts.
pub const BRUTE_FORCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("option posterior underflowed at timestep {timestep}, sequence {sequence}")]
    Underflow { timestep: usize, sequence: usize },
    #[error("instance too large for enumeration: {options}^{len} sequences")]
    TooLarge { options: usize, len: usize },
    #[error("invalid inference input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Switch budget `N`; `None` is unlimited.
    pub max_switches: Option<usize>,
    /// Weight transitions by the previous action's component likelihood.
    pub action_conditioning: bool,
    /// Fault injection: skip per-step normalization. Only for negative controls.
    #[serde(skip)]
    pub skip_normalization: bool,
}

/// A fixed-length window of a trajectory, the history the posterior conditions on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySegment {
    /// `T` observations.
    pub observations: Vec<Vec<f64>>,
    /// `T − 1` actions; action `t` follows observation `t`.
    pub actions: Vec<Vec<f64>>,
    /// `T − 1` per-task reward vectors; reward `t` follows action `t`.
    pub rewards: Vec<Vec<f64>>,
    /// Executed options for the `T − 1` acted steps. Never read by inference.
    pub options: Vec<usize>,
    /// Raw environment states for the `T` observations, kept for relabeling.
    pub raw_states: Vec<Vec<f64>>,
    /// Whether observation `T − 1` is a terminal state (no bootstrap).
    pub terminal: bool,
}

impl TrajectorySegment {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Log-space inputs to the DP as graph nodes, each `[T·B, M]`.
#[derive(Clone, Copy, Debug)]
pub struct OptionInputs {
    pub len: usize,
    pub batch: usize,
    pub options: usize,
    /// `log π^C(o | s_t)`.
    pub log_controller: Var,
    /// `log β(s_t, o)`.
    pub log_termination: Var,
    /// `log (1 − β(s_t, o))`.
    pub log_continue: Var,
    /// `[(T−1)·B, M]` log π^L(a_t | s_t, o); required for action conditioning.
    pub log_likelihood: Option<Var>,
}

impl OptionInputs {
    /// Uses heads evaluated on `T·B` time-major observations. `actions` holds
    /// the first `(T−1)·B` rows of actions and is only needed for conditioning.
    pub fn from_heads(
        g: &mut Graph,
        heads: &HeadVars,
        actions: Option<&Tensor>,
        batch: usize,
        len: usize,
    ) -> Result<Self, InferenceError> {
        if heads.rows != batch * len {
            return Err(InferenceError::InvalidInput(format!(
                "{} head rows for batch {batch} × length {len}",
                heads.rows
            )));
        }
        let log_likelihood = match actions {
            Some(actions) if len > 1 => {
                let rows = (len - 1) * batch;
                if actions.rows() != rows {
                    return Err(InferenceError::InvalidInput(format!(
                        "expected {rows} action rows, got {}",
                        actions.rows()
                    )));
                }
                let acted = HeadVars {
                    rows,
                    means: g.slice_rows(heads.means, 0, rows)?,
                    stddevs: g.slice_rows(heads.stddevs, 0, rows)?,
                    ..*heads
                };
                Some(acted.action_log_likelihoods(g, actions)?)
            }
            _ => None,
        };
        Ok(Self {
            len,
            batch,
            options: heads.options,
            log_controller: heads.log_controller,
            log_termination: heads.log_termination,
            log_continue: heads.log_continue,
            log_likelihood,
        })
    }

    /// Builds inputs from unnormalized controller and termination logits.
    pub fn from_logits(
        g: &mut Graph,
        controller_logits: Var,
        termination_logits: Var,
        log_likelihood: Option<Var>,
        batch: usize,
        len: usize,
    ) -> Self {
        let options = g.value(controller_logits).last_dim();
        let log_controller = g.log_softmax_last(controller_logits);
        let log_termination = g.log_sigmoid(termination_logits);
        let neg = g.neg(termination_logits);
        let log_continue = g.log_sigmoid(neg);
        Self {
            len,
            batch,
            options,
            log_controller,
            log_termination,
            log_continue,
            log_likelihood,
        }
    }

    /// Constant inputs from a batch of equally sized raw instances.
    pub fn from_raw(g: &mut Graph, instances: &[RawInstance]) -> Result<Self, InferenceError> {
        let first = instances
            .first()
            .ok_or_else(|| InferenceError::InvalidInput("no instances".into()))?;
        let (len, options) = (first.len(), first.options());
        let batch = instances.len();
        for inst in instances {
            inst.validate()?;
            if inst.len() != len || inst.options() != options {
                return Err(InferenceError::InvalidInput(
                    "instances differ in size".into(),
                ));
            }
        }
        let gather = |f: &dyn Fn(&RawInstance, usize) -> Vec<f64>, steps: usize| {
            let mut v = Vec::with_capacity(steps * batch * options);
            for t in 0..steps {
                for inst in instances {
                    v.extend(f(inst, t));
                }
            }
            Tensor::new(vec![steps * batch, options], v)
        };
        let lc = gather(
            &|i, t| i.controller[t].iter().map(|p| p.ln()).collect(),
            len,
        )?;
        let lt = gather(
            &|i, t| i.termination[t].iter().map(|b| b.ln()).collect(),
            len,
        )?;
        let lk = gather(
            &|i, t| i.termination[t].iter().map(|b| (-b).ln_1p()).collect(),
            len,
        )?;
        let ll = if len > 1 {
            Some(g.constant(gather(&|i, t| i.log_likelihood[t].clone(), len - 1)?))
        } else {
            None
        };
        Ok(Self {
            len,
            batch,
            options,
            log_controller: g.constant(lc),
            log_termination: g.constant(lt),
            log_continue: g.constant(lk),
            log_likelihood: ll,
        })
    }
}

/// Filtered option posteriors for a batch of sequences.
#[derive(Clone, Copy, Debug)]
pub struct OptionPosterior {
    pub len: usize,
    pub batch: usize,
    pub options: usize,
    pub max_switches: Option<usize>,
    /// `[T·B, M]` log π^H(o_t | h_t).
    pub log_marginal: Var,
    /// `[T·B, (N+1)·M]` log π^H(o_t, n_t | h_t), column `n·M + o`; switch-limited only.
    pub log_joint: Option<Var>,
    /// `[T·B]` log of the pre-normalization mass at each step (0 at t = 0).
    pub log_normalizers: Var,
}

impl OptionPosterior {
    /// `[T][M]` posterior probabilities of sequence `b`.
    pub fn marginal(&self, g: &Graph, b: usize) -> Vec<Vec<f64>> {
        let v = g.value(self.log_marginal);
        (0..self.len)
            .map(|t| v.row(t * self.batch + b).iter().map(|x| x.exp()).collect())
            .collect()
    }

    /// `[T][M][N+1]` joint probabilities of sequence `b`.
    pub fn joint(&self, g: &Graph, b: usize) -> Option<Vec<Vec<Vec<f64>>>> {
        let joint = self.log_joint?;
        let n_cells = self.max_switches? + 1;
        let v = g.value(joint);
        Some(
            (0..self.len)
                .map(|t| {
                    let row = v.row(t * self.batch + b);
                    (0..self.options)
                        .map(|o| {
                            (0..n_cells)
                                .map(|n| row[n * self.options + o].exp())
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        )
    }

    /// Log of the total path weight retained, before any normalization.
    pub fn log_retained_mass(&self, g: &Graph, b: usize) -> f64 {
        let v = g.value(self.log_normalizers).values();
        (0..self.len).map(|t| v[t * self.batch + b]).sum()
    }
}

/// Call-and-return option transition `p(o_next | s, o_prev)`.
pub fn option_transition(controller: &[f64], termination: f64, prev: usize, next: usize) -> f64 {
    if next == prev {
        1.0 - termination * (1.0 - controller[next])
    } else {
        termination * controller[next]
    }
}

/// Transition over `(option, switch count)` cells, with no budget cap.
pub fn switch_transition(
    controller: &[f64],
    termination: f64,
    prev: (usize, usize),
    next: (usize, usize),
) -> f64 {
    let ((po, pn), (no, nn)) = (prev, next);
    if nn == pn && no == po {
        1.0 - termination
    } else if nn == pn + 1 {
        termination * controller[no]
    } else {
        0.0
    }
}

/// Dispatches on the configured switch budget.
pub fn infer(
    g: &mut Graph,
    inputs: &OptionInputs,
    config: &InferenceConfig,
) -> Result<OptionPosterior, InferenceError> {
    match config.max_switches {
        None => forward_posteriors(g, inputs, config),
        Some(n) => forward_posteriors_switch_limited(g, inputs, n, config),
    }
}

struct StepSlices {
    log_controller: Var,
    log_termination: Var,
    log_continue: Var,
}

fn step_slices(g: &mut Graph, inputs: &OptionInputs, t: usize) -> Result<StepSlices, GraphError> {
    let b = inputs.batch;
    Ok(StepSlices {
        log_controller: g.slice_rows(inputs.log_controller, t * b, b)?,
        log_termination: g.slice_rows(inputs.log_termination, t * b, b)?,
        log_continue: g.slice_rows(inputs.log_continue, t * b, b)?,
    })
}

fn check_inputs(
    g: &Graph,
    inputs: &OptionInputs,
    config: &InferenceConfig,
) -> Result<(), InferenceError> {
    if inputs.len == 0 || inputs.batch == 0 || inputs.options == 0 {
        return Err(InferenceError::InvalidInput("empty segment batch".into()));
    }
    let rows = inputs.len * inputs.batch;
    for v in [
        inputs.log_controller,
        inputs.log_termination,
        inputs.log_continue,
    ] {
        if g.shape(v) != [rows, inputs.options] {
            return Err(InferenceError::InvalidInput(format!(
                "expected [{rows}, {}] inputs, got {:?}",
                inputs.options,
                g.shape(v)
            )));
        }
    }
    if config.action_conditioning && inputs.len > 1 && inputs.log_likelihood.is_none() {
        return Err(InferenceError::InvalidInput(
            "action conditioning needs action likelihoods".into(),
        ));
    }
    Ok(())
}

/// Subtracts the per-row normalizer and floors; returns (normalized, normalizer).
fn normalize(
    g: &mut Graph,
    log_weights: Var,
    t: usize,
    config: &InferenceConfig,
) -> Result<(Var, Var), InferenceError> {
    let width = g.value(log_weights).last_dim();
    let norm = g.log_sum_exp_last(log_weights);
    if let Some(sequence) = g.value(norm).values().iter().position(|v| !v.is_finite()) {
        return Err(InferenceError::Underflow {
            timestep: t,
            sequence,
        });
    }
    if config.skip_normalization {
        return Ok((log_weights, norm));
    }
    let wide = g.broadcast_cols(norm, width);
    let normalized = g.sub(log_weights, wide)?;
    Ok((g.clamp_min(normalized, LOG_WEIGHT_FLOOR), norm))
}

/// Previous posterior plus, when conditioning, the previous action's likelihood.
fn emission_weighted(
    g: &mut Graph,
    inputs: &OptionInputs,
    prev: Var,
    t: usize,
    config: &InferenceConfig,
    repeat: usize,
) -> Result<Var, InferenceError> {
    if !config.action_conditioning {
        return Ok(prev);
    }
    let b = inputs.batch;
    let ll = inputs.log_likelihood.expect("checked");
    let ll = g.slice_rows(ll, (t - 1) * b, b)?;
    let ll = tile_last(g, ll, repeat)?;
    Ok(g.add(prev, ll)?)
}

/// Repeats a `[B, M]` node `k` times along the last axis.
fn tile_last(g: &mut Graph, x: Var, k: usize) -> Result<Var, GraphError> {
    if k == 1 {
        return Ok(x);
    }
    g.concat_last(&vec![x; k])
}

/// Unlimited-switch filtering posterior.
pub fn forward_posteriors(
    g: &mut Graph,
    inputs: &OptionInputs,
    config: &InferenceConfig,
) -> Result<OptionPosterior, InferenceError> {
    check_inputs(g, inputs, config)?;
    let (b, m) = (inputs.batch, inputs.options);
    let first = g.slice_rows(inputs.log_controller, 0, b)?;
    let mut prev = g.clamp_min(first, LOG_WEIGHT_FLOOR);
    let mut posts = vec![prev];
    let mut norms = vec![g.constant(Tensor::zeros(&[b]))];
    for t in 1..inputs.len {
        let s = step_slices(g, inputs, t)?;
        let w = emission_weighted(g, inputs, prev, t, config, 1)?;
        let stay = g.add(s.log_continue, w)?;
        let leaving = g.add(s.log_termination, w)?;
        let leaving = g.log_sum_exp_last(leaving);
        let leaving = g.broadcast_cols(leaving, m);
        let switch = g.add(s.log_controller, leaving)?;
        let both = g.stack_last(&[stay, switch])?;
        let lw = g.log_sum_exp_last(both);
        let (lp, norm) = normalize(g, lw, t, config)?;
        posts.push(lp);
        norms.push(norm);
        prev = lp;
    }
    Ok(OptionPosterior {
        len: inputs.len,
        batch: b,
        options: m,
        max_switches: None,
        log_marginal: g.concat_rows(&posts)?,
        log_joint: None,
        log_normalizers: g.concat_rows(&norms)?,
    })
}

/// Posterior over `(option, switch count ≤ max_switches)`.
pub fn forward_posteriors_switch_limited(
    g: &mut Graph,
    inputs: &OptionInputs,
    max_switches: usize,
    config: &InferenceConfig,
) -> Result<OptionPosterior, InferenceError> {
    check_inputs(g, inputs, config)?;
    let (b, m) = (inputs.batch, inputs.options);
    let cells = max_switches + 1;
    let neg_inf_block = g.constant(Tensor::filled(&[b, m], f64::NEG_INFINITY));
    let first = g.slice_rows(inputs.log_controller, 0, b)?;
    let mut init = vec![first];
    init.extend(std::iter::repeat_n(neg_inf_block, max_switches));
    let init = g.concat_last(&init)?;
    let mut prev = g.clamp_min(init, LOG_WEIGHT_FLOOR);
    let mut joints = vec![prev];
    let mut norms = vec![g.constant(Tensor::zeros(&[b]))];
    let neg_inf_col = g.constant(Tensor::filled(&[b, 1], f64::NEG_INFINITY));
    for t in 1..inputs.len {
        let s = step_slices(g, inputs, t)?;
        let w = emission_weighted(g, inputs, prev, t, config, cells)?;
        let cont = tile_last(g, s.log_continue, cells)?;
        let stay = g.add(cont, w)?;
        // Mass leaving each switch level, summed over options: [B, N+1].
        let term = tile_last(g, s.log_termination, cells)?;
        let leaving = g.add(term, w)?;
        let leaving = g.reshape(leaving, &[b * cells, m])?;
        let leaving = g.log_sum_exp_last(leaving);
        let leaving = g.reshape(leaving, &[b, cells])?;
        // Arrivals at level n come from level n − 1; level N + 1 is dropped.
        let shifted = if max_switches == 0 {
            neg_inf_col
        } else {
            let kept = g.slice_last(leaving, 0, max_switches)?;
            g.concat_last(&[neg_inf_col, kept])?
        };
        let shifted = g.reshape(shifted, &[b * cells])?;
        let shifted = g.broadcast_cols(shifted, m);
        let shifted = g.reshape(shifted, &[b, cells * m])?;
        let ctrl = tile_last(g, s.log_controller, cells)?;
        let switch = g.add(ctrl, shifted)?;
        let both = g.stack_last(&[stay, switch])?;
        let lw = g.log_sum_exp_last(both);
        let (lp, norm) = normalize(g, lw, t, config)?;
        joints.push(lp);
        norms.push(norm);
        prev = lp;
    }
    let log_joint = g.concat_rows(&joints)?;
    let levels: Vec<Var> = (0..cells)
        .map(|n| g.slice_last(log_joint, n * m, m))
        .collect::<Result<_, _>>()?;
    let stacked = g.stack_last(&levels)?;
    let log_marginal = g.log_sum_exp_last(stacked);
    Ok(OptionPosterior {
        len: inputs.len,
        batch: b,
        options: m,
        max_switches: Some(max_switches),
        log_marginal,
        log_joint: Some(log_joint),
        log_normalizers: g.concat_rows(&norms)?,
    })
}

/// Plain-valued DP inputs for one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawInstance {
    /// `[T][M]` controller probabilities.
    pub controller: Vec<Vec<f64>>,
    /// `[T][M]` termination probabilities `β(s_t, o)`.
    pub termination: Vec<Vec<f64>>,
    /// `[T−1][M]` log π^L(a_t | s_t, o).
    pub log_likelihood: Vec<Vec<f64>>,
}

impl RawInstance {
    pub fn len(&self) -> usize {
        self.controller.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controller.is_empty()
    }

    pub fn options(&self) -> usize {
        self.controller.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        let (t, m) = (self.len(), self.options());
        let ok = t >= 1
            && m >= 1
            && self.termination.len() == t
            && self.log_likelihood.len() == t - 1
            && self
                .controller
                .iter()
                .chain(&self.termination)
                .chain(&self.log_likelihood)
                .all(|r| r.len() == m);
        if ok {
            Ok(())
        } else {
            Err(InferenceError::InvalidInput("ragged raw instance".into()))
        }
    }
}

/// Per-timestep distributions computed by enumeration.
#[derive(Clone, Debug, PartialEq)]
pub struct BruteForcePosterior {
    /// `[T][M]`.
    pub marginal: Vec<Vec<f64>>,
    /// `[T][M][N+1]`; `N = T − 1` when unlimited.
    pub joint: Vec<Vec<Vec<f64>>>,
}

/// Exact posteriors by enumerating every option sequence. For each sequence
/// the switch count is tracked as a distribution: consecutive equal options
/// arise either by continuing (`1 − β`, no switch) or by terminating and
/// re-selecting (`β·π^C`, one switch).
pub fn brute_force_posteriors(
    instance: &RawInstance,
    config: &InferenceConfig,
) -> Result<BruteForcePosterior, InferenceError> {
    instance.validate()?;
    let (len, m) = (instance.len(), instance.options());
    if (m as f64).powi(len as i32) > BRUTE_FORCE_LIMIT {
        return Err(InferenceError::TooLarge { options: m, len });
    }
    let cells = config.max_switches.unwrap_or(len - 1).min(len - 1) + 1;
    let mut joint = vec![vec![vec![0.0; cells]; m]; len];
    for o in 0..m {
        let mut counts = vec![0.0; cells];
        counts[0] = instance.controller[0][o];
        enumerate(instance, config, 0, o, &counts, &mut joint);
    }
    let mut marginal = Vec::with_capacity(len);
    for step in joint.iter_mut() {
        let total: f64 = step.iter().flatten().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(InferenceError::Underflow {
                timestep: marginal.len(),
                sequence: 0,
            });
        }
        step.iter_mut().flatten().for_each(|v| *v /= total);
        marginal.push(step.iter().map(|row| row.iter().sum()).collect());
    }
    let full = config.max_switches.map_or(len, |n| n + 1);
    for step in joint.iter_mut() {
        for row in step.iter_mut() {
            row.resize(full.max(cells), 0.0);
        }
    }
    Ok(BruteForcePosterior { marginal, joint })
}

fn enumerate(
    inst: &RawInstance,
    config: &InferenceConfig,
    t: usize,
    option: usize,
    counts: &[f64],
    joint: &mut [Vec<Vec<f64>>],
) {
    for (acc, c) in joint[t][option].iter_mut().zip(counts) {
        *acc += c;
    }
    if t + 1 == inst.len() {
        return;
    }
    let emission = if config.action_conditioning {
        inst.log_likelihood[t][option].exp()
    } else {
        1.0
    };
    let beta = inst.termination[t + 1][option];
    let ctrl = &inst.controller[t + 1];
    let cells = counts.len();
    for next in 0..inst.options() {
        let mut out = vec![0.0; cells];
        for n in 0..cells {
            let w = counts[n] * emission;
            if next == option {
                out[n] += w * (1.0 - beta);
            }
            if n + 1 < cells {
                out[n + 1] += w * beta * ctrl[next];
            }
        }
        if out.iter().any(|&v| v > 0.0) {
            enumerate(inst, config, t + 1, next, &out, joint);
        }
    }
}
