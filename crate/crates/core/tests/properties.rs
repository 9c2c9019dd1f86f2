use ho2::analysis::{option_entropy, silhouette, switch_rate};
use ho2::diffgraph::{log_sum_exp, Graph, Tensor};
use ho2::envs::{make_env, Environment, PointMassTargets};
use ho2::improvement::{dual_value, estep_weights};
use ho2::inference::{infer, InferenceConfig, OptionInputs, RawInstance, TrajectorySegment};
use ho2::policy::{ActMode, ExecutionState, OptionPolicy, PolicyConfig, PolicyMode};
use ho2::replay::{ReplayBuffer, ReplayConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64, len: usize, m: usize) -> RawInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dist = || {
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let controller = (0..len).map(|_| dist()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    RawInstance {
        controller,
        termination: (0..len)
            .map(|_| (0..m).map(|_| rng.random_range(0.01..0.99)).collect())
            .collect(),
        log_likelihood: (0..len - 1)
            .map(|_| (0..m).map(|_| rng.random_range(-5.0..2.0)).collect())
            .collect(),
    }
}

struct Posterior {
    marginal: Vec<Vec<f64>>,
    joint: Option<Vec<Vec<Vec<f64>>>>,
    log_mass: f64,
}

fn posterior(inst: &RawInstance, config: &InferenceConfig) -> Posterior {
    let mut g = Graph::new();
    let inputs = OptionInputs::from_raw(&mut g, std::slice::from_ref(inst)).unwrap();
    let post = infer(&mut g, &inputs, config).unwrap();
    Posterior {
        marginal: post.marginal(&g, 0),
        joint: post.joint(&g, 0),
        log_mass: post.log_retained_mass(&g, 0),
    }
}

fn policy(m: usize, seed: u64, mode: PolicyMode) -> OptionPolicy {
    // Point-mass layout: proprio 0..2, targets 2..8, task one-hot 8..11.
    let cfg = PolicyConfig {
        num_options: m,
        observation_dim: 11,
        action_dim: 2,
        controller_features: (0..11).collect(),
        component_features: vec![0, 1],
        mode,
        hidden: vec![8],
        ..PolicyConfig::default()
    };
    OptionPolicy::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn observation(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
    let task = rng.random_range(0..3);
    obs.extend((0..3).map(|k| f64::from(u8::from(k == task))));
    obs
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posteriors_sum_to_one(seed in any::<u64>(), len in 1usize..9, m in 1usize..5,
                             conditioning in any::<bool>(), budget in proptest::option::of(0usize..4)) {
        let inst = instance(seed, len, m);
        let post = posterior(&inst, &InferenceConfig { max_switches: budget, action_conditioning: conditioning, ..Default::default() });
        for row in &post.marginal {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }
        if let Some(joint) = post.joint {
            for step in joint {
                prop_assert!((step.iter().flatten().sum::<f64>() - 1.0).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn retained_mass_grows_with_the_budget(seed in any::<u64>(), len in 2usize..8, m in 2usize..4, conditioning in any::<bool>()) {
        let inst = instance(seed, len, m);
        let mass = |n: Option<usize>| posterior(&inst, &InferenceConfig { max_switches: n, action_conditioning: conditioning, ..Default::default() }).log_mass;
        let mut prev = f64::NEG_INFINITY;
        for n in 0..len {
            let cur = mass(Some(n));
            prop_assert!(cur >= prev - 1e-12, "N = {n}: {cur} < {prev}");
            prev = cur;
        }
        prop_assert!((mass(None) - prev).abs() <= 1e-10);
    }

    #[test]
    fn relabeling_options_permutes_posteriors(seed in any::<u64>(), len in 1usize..7, m in 2usize..5,
                                              conditioning in any::<bool>(), budget in proptest::option::of(0usize..3)) {
        let inst = instance(seed, len, m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut perm: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let relabel = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            rows.iter().map(|r| perm.iter().map(|&p| r[p]).collect()).collect()
        };
        let permuted = RawInstance {
            controller: relabel(&inst.controller),
            termination: relabel(&inst.termination),
            log_likelihood: relabel(&inst.log_likelihood),
        };
        let cfg = InferenceConfig { max_switches: budget, action_conditioning: conditioning, ..Default::default() };
        let a = posterior(&inst, &cfg).marginal;
        let b = posterior(&permuted, &cfg).marginal;
        for (ra, rb) in a.iter().zip(&b) {
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((rb[i] - ra[p]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn controller_distribution_sums_to_one(seed in any::<u64>(), m in 1usize..6, scale in 0.0f64..50.0) {
        let p = policy(m, seed, PolicyMode::Option);
        let obs: Vec<f64> = observation(seed).iter().map(|v| v * scale).collect();
        let probs = p.controller_dist(&obs).unwrap();
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(probs.iter().all(|&q| q >= 0.0));
    }

    #[test]
    fn asymmetric_components_ignore_task_features(seed in any::<u64>(), other in any::<u64>(), m in 1usize..5) {
        let p = policy(m, seed, PolicyMode::Option);
        let a = observation(seed);
        let mut b = observation(other);
        b[0] = a[0];
        b[1] = a[1];
        let (ha, hb) = (p.heads_for(&a).unwrap(), p.heads_for(&b).unwrap());
        let bits = |xs: &[f64]| xs.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        for o in 0..m {
            prop_assert_eq!(bits(ha.mean(0, o)), bits(hb.mean(0, o)));
            prop_assert_eq!(bits(ha.stddev(0, o)), bits(hb.stddev(0, o)));
        }
        // Once an option is held, the sampled action depends on the components alone.
        let cfg = PolicyConfig { task_conditioned_terminations: false, ..p.config.clone() };
        let local = OptionPolicy::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let act = |obs: &[f64]| {
            let mut rng = ChaCha8Rng::seed_from_u64(other);
            let mut state = ExecutionState { option: Some(0) };
            local.act(&mut state, obs, ActMode::Sample, &mut rng).unwrap()
        };
        let (oa, ob) = (act(&a), act(&b));
        prop_assert_eq!(oa.terminated, ob.terminated);
        if !oa.terminated {
            prop_assert_eq!(bits(&oa.action), bits(&ob.action));
        }
    }

    #[test]
    fn clamped_option_policy_matches_the_mixture(seed in any::<u64>(), m in 1usize..5, option_seed in any::<u64>()) {
        let base = policy(m, seed, PolicyMode::Option);
        let clamped = OptionPolicy { config: PolicyConfig { clamp_terminations: true, ..base.config.clone() }, ..base.clone() };
        let mixture = OptionPolicy { config: PolicyConfig { mode: PolicyMode::Mixture, ..base.config.clone() }, ..base };
        let obs = observation(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(option_seed);
        let action = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let o = rng.random_range(0..m);
        // With β ≡ 1 the posterior is the controller, whatever the history.
        let lp = |p: &OptionPolicy| -> Vec<f64> { p.controller_dist(&obs).unwrap().iter().map(|v| v.ln()).collect() };
        let ja = clamped.joint_log_prob(&lp(&clamped), &obs, &action, o).unwrap();
        let jb = mixture.joint_log_prob(&lp(&mixture), &obs, &action, o).unwrap();
        prop_assert!((ja - jb).abs() <= 1e-10);
        prop_assert_eq!(clamped.termination_prob(&obs, o).unwrap(), 1.0);
    }

    #[test]
    fn estep_weights_normalize_and_ignore_shifts(seed in any::<u64>(), j in 1usize..65, histories in 1usize..5,
                                                 eta in 1e-3f64..1e3, shift in -1e3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..j * histories).map(|_| rng.random_range(-5.0..5.0)).collect();
        let w = estep_weights(&q, j, eta);
        for chunk in w.chunks(j) {
            prop_assert!((chunk.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            prop_assert!(chunk.iter().all(|&v| v >= 0.0));
        }
        let shifted: Vec<f64> = q.iter().map(|v| v + shift).collect();
        let ws = estep_weights(&shifted, j, eta);
        prop_assert!(w.iter().zip(&ws).all(|(a, b)| (a - b).abs() <= 1e-10));
        let dg = dual_value(&shifted, j, eta, 0.1) - dual_value(&q, j, eta, 0.1);
        prop_assert!((dg - shift).abs() <= 1e-9 * (1.0 + shift.abs()));
    }

    #[test]
    fn fifo_keeps_the_newest_segments(capacity in 1usize..20, extra in 0usize..20) {
        let buffer = ReplayBuffer::new(ReplayConfig { capacity, segment_length: 2, stride: None });
        for k in 0..capacity + extra {
            buffer.push_segment(TrajectorySegment {
                observations: vec![vec![k as f64], vec![0.0]],
                actions: vec![vec![0.0]],
                rewards: vec![vec![0.0]],
                options: vec![0],
                raw_states: vec![vec![], vec![]],
                terminal: false,
            });
        }
        prop_assert_eq!(buffer.len(), capacity);
        let kept: Vec<f64> = (0..capacity).map(|i| buffer.segment(i).unwrap().observations[0][0]).collect();
        let expected: Vec<f64> = (extra..capacity + extra).map(|k| k as f64).collect();
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn entropy_is_bounded_by_the_log_of_distinct_options(options in proptest::collection::vec(0usize..6, 1..80)) {
        let mut distinct = options.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let h = option_entropy(&options).unwrap();
        let bound = (distinct.len() as f64).ln();
        prop_assert!(h <= bound + 1e-12);
        let counts: Vec<usize> = distinct.iter().map(|d| options.iter().filter(|&&o| o == *d).count()).collect();
        let uniform = counts.iter().all(|&c| c == counts[0]);
        prop_assert_eq!((h - bound).abs() <= 1e-12, uniform);
    }

    #[test]
    fn switch_rate_ignores_option_labels(options in proptest::collection::vec(0usize..5, 2..60), cut in 1usize..30, seed in any::<u64>()) {
        let episodes: Vec<usize> = (0..options.len()).map(|i| usize::from(i >= cut)).collect();
        let mut perm: Vec<usize> = (0..5).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..5).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let relabeled: Vec<usize> = options.iter().map(|&o| perm[o]).collect();
        prop_assert_eq!(switch_rate(&options, &episodes).unwrap(), switch_rate(&relabeled, &episodes).unwrap());
    }

    #[test]
    fn log_sum_exp_stays_finite(xs in proptest::collection::vec(-1e4f64..1e4, 1..20)) {
        let v = log_sum_exp(&xs);
        prop_assert!(v.is_finite());
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= max && v <= max + (xs.len() as f64).ln() + 1e-9);
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![1, xs.len()], xs.clone()).unwrap());
        let y = g.log_sum_exp_last(x);
        prop_assert!(g.value(y).values()[0].is_finite());
    }

    #[test]
    fn point_mass_is_deterministic_given_seed_and_actions(seed in any::<u64>(), actions in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..40)) {
        let roll = || {
            let mut env = PointMassTargets::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut trace = vec![env.reset(&mut rng)];
            for &(x, y) in &actions {
                let out = env.step(&[x, y]).unwrap();
                trace.push(out.observation);
                trace.push(out.rewards);
                if out.done { break; }
            }
            trace
        };
        prop_assert_eq!(roll(), roll());
    }

    #[test]
    fn task_rewards_depend_only_on_raw_state(seed in any::<u64>(), steps in 1usize..30) {
        let mut env = make_env("point_mass_targets", None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        env.reset(&mut rng);
        for _ in 0..steps {
            let a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let out = env.step(&a).unwrap();
            let raw = env.raw_state();
            // A fresh instance, never stepped, recomputes the same rewards.
            let fresh = make_env("point_mass_targets", None).unwrap();
            prop_assert_eq!(fresh.task_rewards(&raw), out.rewards.clone());
            if out.done { break; }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn silhouette_matches_pairwise_reference(seed in any::<u64>(), n in 2usize..200, dim in 1usize..9, k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let mut total = 0.0;
        for i in 0..n {
            let mut sums = vec![0.0; k];
            let mut counts = vec![0usize; k];
            for j in 0..n {
                if j != i {
                    sums[labels[j]] += d(&points[i], &points[j]);
                    counts[labels[j]] += 1;
                }
            }
            let own = labels[i];
            if counts[own] == 0 {
                continue;
            }
            let a = sums[own] / counts[own] as f64;
            let b = (0..k).filter(|&c| c != own && counts[c] > 0).map(|c| sums[c] / counts[c] as f64).fold(f64::INFINITY, f64::min);
            if a.max(b) > 0.0 {
                total += (b - a) / a.max(b);
            }
        }
        let reference = total / n as f64;
        prop_assert!((silhouette(&points, &labels).unwrap() - reference).abs() <= 1e-10);
    }
}
