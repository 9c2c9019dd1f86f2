//! Self-check harness: forward inference against exhaustive enumeration,
//! stochasticity of the transition tables, and gradients against central
//! differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffgraph::{Graph, Tensor};
use crate::inference::{
    brute_force_posteriors, infer, option_transition, switch_transition, InferenceConfig,
    InferenceError, OptionInputs, RawInstance,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub max_options: usize,
    pub max_len: usize,
    pub trials: usize,
    pub gradient_trials: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub stochasticity_tolerance: f64,
    pub gradient_tolerance: f64,
    /// Negative control: disables normalization inside the DP.
    pub skip_normalization: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            max_options: 3,
            max_len: 6,
            trials: 100,
            gradient_trials: 20,
            seed: 0,
            tolerance: 1e-8,
            stochasticity_tolerance: 1e-12,
            gradient_tolerance: 1e-4,
            skip_normalization: false,
        }
    }
}

/// An instance that broke a tolerance, serialized for replay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailingInstance {
    pub check: String,
    pub error: f64,
    pub max_switches: Option<usize>,
    pub action_conditioning: bool,
    pub instance: RawInstance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub trials: usize,
    pub max_marginal_error: f64,
    pub max_joint_error: f64,
    pub max_row_sum_error: f64,
    pub max_gradient_error: f64,
    pub passed: bool,
    pub failure: Option<FailingInstance>,
}

/// Random instance with probabilities bounded away from 0 and 1.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, len: usize, options: usize) -> RawInstance {
    let dist = |rng: &mut R| {
        let raw: Vec<f64> = (0..options).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let controller = (0..len).map(|_| dist(rng)).collect();
    let termination = (0..len)
        .map(|_| (0..options).map(|_| rng.random_range(0.02..0.98)).collect())
        .collect();
    let log_likelihood = (0..len.saturating_sub(1))
        .map(|_| (0..options).map(|_| rng.random_range(-3.0..1.0)).collect())
        .collect();
    RawInstance {
        controller,
        termination,
        log_likelihood,
    }
}

fn max_abs_diff<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>) -> f64 {
    a.zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest marginal and joint deviation between the DP and enumeration.
pub fn compare_with_enumeration(
    instance: &RawInstance,
    config: &InferenceConfig,
) -> Result<(f64, f64), InferenceError> {
    let mut g = Graph::new();
    let inputs = OptionInputs::from_raw(&mut g, std::slice::from_ref(instance))?;
    let post = infer(&mut g, &inputs, config)?;
    let oracle = brute_force_posteriors(instance, config)?;
    let marginal = post.marginal(&g, 0);
    let dm = max_abs_diff(marginal.iter().flatten(), oracle.marginal.iter().flatten());
    let dj = match post.joint(&g, 0) {
        Some(joint) => max_abs_diff(
            joint.iter().flatten().flatten(),
            oracle.joint.iter().flatten().flatten(),
        ),
        None => 0.0,
    };
    Ok((dm, dj))
}

/// Worst deviation from 1 of the row sums of both transition tables.
pub fn transition_row_error(controller: &[f64], termination: &[f64], max_switches: usize) -> f64 {
    let m = controller.len();
    let mut worst: f64 = 0.0;
    for prev in 0..m {
        let s: f64 = (0..m)
            .map(|next| option_transition(controller, termination[prev], prev, next))
            .sum();
        worst = worst.max((s - 1.0).abs());
        for n in 0..max_switches {
            let s: f64 = (0..m)
                .flat_map(|o| (0..=max_switches).map(move |k| (o, k)))
                .map(|next| switch_transition(controller, termination[prev], (prev, n), next))
                .sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    worst
}

/// Largest relative error between graph gradients of a random linear
/// functional of the log posterior and central differences, with respect to
/// controller logits, termination logits and action log-likelihoods. Also
/// returns the probabilities the logits encode.
pub fn gradient_error<R: Rng + ?Sized>(
    rng: &mut R,
    len: usize,
    options: usize,
    config: &InferenceConfig,
) -> Result<(f64, RawInstance), InferenceError> {
    let shape = |rows: usize| vec![rows, options];
    let mut draw = |rows: usize, lo: f64, hi: f64| {
        Tensor::new(
            shape(rows),
            (0..rows * options)
                .map(|_| rng.random_range(lo..hi))
                .collect(),
        )
    };
    let inputs = [
        draw(len, -1.5, 1.5)?,
        draw(len, -2.0, 2.0)?,
        draw(len - 1, -3.0, 1.0)?,
        draw(len, -1.0, 1.0)?,
    ];
    let coeffs = inputs[3].clone();
    let rows =
        |t: &Tensor, f: &dyn Fn(&[f64]) -> Vec<f64>| (0..t.rows()).map(|r| f(t.row(r))).collect();
    let instance = RawInstance {
        controller: rows(&inputs[0], &|z| {
            let lse = crate::diffgraph::log_sum_exp(z);
            z.iter().map(|v| (v - lse).exp()).collect()
        }),
        termination: rows(&inputs[1], &|z| {
            z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()
        }),
        log_likelihood: rows(&inputs[2], &|z| z.to_vec()),
    };

    let eval = |xs: &[Tensor; 3], grads: bool| -> Result<(f64, Vec<Tensor>), InferenceError> {
        let mut g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|x| g.param(x.clone())).collect();
        let inp = OptionInputs::from_logits(&mut g, vars[0], vars[1], Some(vars[2]), 1, len);
        let post = infer(&mut g, &inp, config)?;
        let c = g.constant(coeffs.clone());
        let prod = g.mul(post.log_marginal, c)?;
        let f = g.sum_all(prod);
        let value = g.item(f);
        if !grads {
            return Ok((value, Vec::new()));
        }
        let gr = g.backward(f)?;
        Ok((value, vars.iter().map(|&v| gr.wrt(v)).collect()))
    };
    let base = [inputs[0].clone(), inputs[1].clone(), inputs[2].clone()];
    let (_, analytic) = eval(&base, true)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..3 {
        for i in 0..base[k].numel() {
            let mut plus = base.clone();
            plus[k].values_mut()[i] += h;
            let mut minus = base.clone();
            minus[k].values_mut()[i] -= h;
            let numeric = (eval(&plus, false)?.0 - eval(&minus, false)?.0) / (2.0 * h);
            let a = analytic[k].values()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok((worst, instance))
}

pub fn run_oracle_check(config: &OracleConfig) -> Result<OracleReport, InferenceError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = OracleReport {
        trials: config.trials,
        max_marginal_error: 0.0,
        max_joint_error: 0.0,
        max_row_sum_error: 0.0,
        max_gradient_error: 0.0,
        passed: true,
        failure: None,
    };
    let fail = |report: &mut OracleReport,
                check: &str,
                error: f64,
                inst: &RawInstance,
                inf: &InferenceConfig| {
        report.passed = false;
        if report.failure.is_none() {
            report.failure = Some(FailingInstance {
                check: check.to_string(),
                error,
                max_switches: inf.max_switches,
                action_conditioning: inf.action_conditioning,
                instance: inst.clone(),
            });
        }
    };

    let max_m = config.max_options.max(2);
    let max_t = config.max_len.max(2);
    for trial in 0..config.trials {
        let m = 2 + trial % (max_m - 1);
        let len = 2 + (trial / (max_m - 1)) % (max_t - 1);
        let inst = random_instance(&mut rng, len, m);
        let limit = rng.random_range(0..len);
        for conditioning in [false, true] {
            for max_switches in [None, Some(limit)] {
                let inf = InferenceConfig {
                    max_switches,
                    action_conditioning: conditioning,
                    skip_normalization: config.skip_normalization,
                };
                // A failed DP is itself a breach of the tolerance.
                let (dm, dj) =
                    compare_with_enumeration(&inst, &inf).unwrap_or((f64::INFINITY, f64::INFINITY));
                report.max_marginal_error = report.max_marginal_error.max(dm);
                report.max_joint_error = report.max_joint_error.max(dj);
                let worst = dm.max(dj);
                if !(worst <= config.tolerance) {
                    fail(&mut report, "enumeration", worst, &inst, &inf);
                }
            }
        }
        let err = transition_row_error(&inst.controller[0], &inst.termination[0], len - 1);
        report.max_row_sum_error = report.max_row_sum_error.max(err);
        if !(err <= config.stochasticity_tolerance) {
            fail(
                &mut report,
                "stochasticity",
                err,
                &inst,
                &InferenceConfig::default(),
            );
        }
    }

    for trial in 0..config.gradient_trials {
        let m = 2 + trial % (max_m - 1);
        let len = 2 + (trial / (max_m - 1)) % (max_t.min(4) - 1);
        let inf = InferenceConfig {
            max_switches: (trial % 2 == 1).then_some(1),
            action_conditioning: true,
            skip_normalization: config.skip_normalization,
        };
        match gradient_error(&mut rng, len, m, &inf) {
            Ok((err, inst)) => {
                report.max_gradient_error = report.max_gradient_error.max(err);
                if !(err <= config.gradient_tolerance) {
                    fail(&mut report, "gradient", err, &inst, &inf);
                }
            }
            Err(_) => {
                report.max_gradient_error = f64::INFINITY;
                report.passed = false;
            }
        }
    }
    Ok(report)
}
