use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ho2::analysis::{read_log, report, write_histogram_csv, ReportConfig};
use ho2::checkpoint::Checkpoint;
use ho2::config::RunConfig;
use ho2::envs::{make_env, ObservationSpec};
use ho2::oracle::{run_oracle_check, OracleConfig};
use ho2::policy::ActMode;
use ho2::replay::export_episode;
use ho2::trainer::{evaluate, train};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const KNOWN_ENVS: [&str; 2] = ["point_mass_targets", "modal_bandit"];

#[derive(Parser)]
#[command(
    name = "ho2",
    version,
    about = "Option learning with hindsight inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write metrics, a checkpoint and the resolved config.
    Train(TrainArgs),
    /// Roll out a checkpoint and write the episode log.
    Eval(EvalArgs),
    /// Compute option diagnostics from an episode log.
    Analyze(AnalyzeArgs),
    /// Check inference against enumeration and finite differences.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `trainer.mode=rhpo`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; defaults to `output_dir` or `runs/<mode>-seed<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Environment name; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    episode_cap: Option<usize>,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tasks to cycle through; all tasks when omitted.
    #[arg(long = "task")]
    tasks: Vec<usize>,
    /// Mean actions and argmax options instead of sampling.
    #[arg(long)]
    greedy: bool,
    /// Rollout log path; defaults to `<checkpoint>.rollout.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    log: PathBuf,
    /// Report path; defaults to `<log>.report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Environment whose observation layout the log uses; inferred from the
    /// observation size when omitted.
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    standardize: bool,
    #[arg(long, default_value_t = 2000)]
    max_points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the option histogram as CSV.
    #[arg(long)]
    histogram_csv: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 3)]
    max_options: usize,
    #[arg(long, default_value_t = 6)]
    max_len: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 20)]
    gradient_trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fault injection: disable normalization in the forward pass.
    #[arg(long)]
    skip_normalization: bool,
    /// Where to write the failing instance; defaults to `oracle-failure.json`.
    #[arg(long)]
    failure_out: Option<PathBuf>,
}

/// Exit 1 for runtime and tolerance failures, 2 for configuration errors.
struct Failure {
    code: u8,
    message: String,
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 1,
        message: e.to_string(),
    }
}

fn config_error(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: e.to_string(),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    std::fs::write(path, text + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let seed = std::env::var("HO2_SEED").ok();
    let mut config = RunConfig::load(args.config.as_deref(), &args.overrides, seed.as_deref())
        .map_err(config_error)?;
    let out = args
        .out
        .or_else(|| config.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| {
            PathBuf::from(format!(
                "runs/{}-seed{}",
                config.trainer.mode.name(),
                config.seed
            ))
        });
    config.output_dir = Some(out.display().to_string());
    std::fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    std::fs::write(
        out.join("resolved-config.json"),
        config.to_json_pretty() + "\n",
    )
    .map_err(runtime)?;
    let outcome = train(&config, &out).map_err(runtime)?;
    let line = serde_json::json!({
        "output_dir": out.display().to_string(),
        "learner_steps": outcome.learner.steps,
        "env_steps": outcome.env_steps,
        "episodes": outcome.episodes,
        "final_eval": outcome.final_eval,
    });
    println!("{line}");
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&args.checkpoint).map_err(config_error)?;
    let name = args.env.clone().unwrap_or_else(|| ckpt.env.clone());
    let mut env = make_env(&name, args.episode_cap).map_err(config_error)?;
    let pc = &ckpt.policy.config;
    if pc.observation_dim != env.observation_spec().dim || pc.action_dim != env.action_dim() {
        return Err(config_error(format!(
            "checkpoint expects observation dim {} and action dim {}; {name} has {} and {}",
            pc.observation_dim,
            pc.action_dim,
            env.observation_spec().dim,
            env.action_dim()
        )));
    }
    let tasks: Vec<usize> = if args.tasks.is_empty() {
        (0..env.num_tasks()).collect()
    } else {
        args.tasks.clone()
    };
    if let Some(k) = tasks.iter().find(|&&k| k >= env.num_tasks()) {
        return Err(config_error(format!("task {k} out of range for {name}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mode = if args.greedy {
        ActMode::Greedy
    } else {
        ActMode::Sample
    };
    let (summary, episodes) = evaluate(
        &ckpt.policy,
        env.as_mut(),
        &tasks,
        args.episodes,
        mode,
        &mut rng,
    )
    .map_err(runtime)?;
    let out = args
        .out
        .unwrap_or_else(|| with_suffix(&args.checkpoint, ".rollout.jsonl"));
    let mut w =
        BufWriter::new(File::create(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?);
    for (i, ep) in episodes.iter().enumerate() {
        export_episode(&mut w, i, ep).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    let summary_path = with_suffix(&out, ".summary.json");
    let record = serde_json::json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "algorithm": ckpt.algorithm,
        "env": name,
        "seed": args.seed,
        "tasks": tasks,
        "mode": mode,
        "count": summary.episodes,
        "summary": summary,
    });
    write_json(&summary_path, &record)?;
    println!("{record}");
    Ok(())
}

fn spec_for(name: Option<&str>, dim: usize) -> Result<ObservationSpec, Failure> {
    if let Some(n) = name {
        return Ok(make_env(n, None)
            .map_err(config_error)?
            .observation_spec()
            .clone());
    }
    for n in KNOWN_ENVS {
        let env = make_env(n, None).expect("known environment");
        if env.observation_spec().dim == dim {
            return Ok(env.observation_spec().clone());
        }
    }
    Ok(ObservationSpec {
        dim,
        proprio: (0..dim).collect(),
        targets: Vec::new(),
        task_index: Vec::new(),
    })
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), Failure> {
    let file =
        File::open(&args.log).map_err(|e| runtime(format!("{}: {e}", args.log.display())))?;
    let log = read_log(BufReader::new(file)).map_err(runtime)?;
    if log.is_empty() {
        return Err(runtime(format!("{}: log is empty", args.log.display())));
    }
    let spec = spec_for(args.env.as_deref(), log[0].observation.len())?;
    if log.iter().any(|r| r.observation.len() != spec.dim) {
        return Err(runtime("observations do not match the environment layout"));
    }
    let rep = report(
        &log,
        &spec,
        &ReportConfig {
            max_points: args.max_points,
            seed: args.seed,
            standardize: args.standardize,
        },
    );
    let path = args
        .report
        .unwrap_or_else(|| with_suffix(&args.log, ".report.json"));
    write_json(&path, &rep)?;
    if let Some(csv) = args.histogram_csv {
        let mut w = BufWriter::new(File::create(&csv).map_err(runtime)?);
        write_histogram_csv(&mut w, &rep.option_histogram).map_err(runtime)?;
        w.flush().map_err(runtime)?;
    }
    println!("{}", serde_json::to_string(&rep).map_err(runtime)?);
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> Result<(), Failure> {
    if args.max_options < 2 || args.max_len < 2 {
        return Err(config_error("max-options and max-len must be at least 2"));
    }
    if (args.max_options as f64).powi(args.max_len as i32) > ho2::inference::BRUTE_FORCE_LIMIT {
        return Err(config_error(
            "max-options^max-len exceeds the enumeration bound",
        ));
    }
    let cfg = OracleConfig {
        max_options: args.max_options,
        max_len: args.max_len,
        trials: args.trials,
        gradient_trials: args.gradient_trials,
        seed: args.seed,
        skip_normalization: args.skip_normalization,
        ..OracleConfig::default()
    };
    let rep = run_oracle_check(&cfg).map_err(runtime)?;
    println!("max marginal error {:e}", rep.max_marginal_error);
    println!("max joint error {:e}", rep.max_joint_error);
    println!("max transition row-sum error {:e}", rep.max_row_sum_error);
    println!("max gradient relative error {:e}", rep.max_gradient_error);
    if let Some(fail) = &rep.failure {
        let path = args
            .failure_out
            .unwrap_or_else(|| PathBuf::from("oracle-failure.json"));
        write_json(&path, fail)?;
        return Err(runtime(format!(
            "{} check exceeded tolerance ({:e}); instance written to {}",
            fail.check,
            fail.error,
            path.display()
        )));
    }
    if !rep.passed {
        return Err(runtime("oracle check failed"));
    }
    println!("all checks within tolerance");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::OracleCheck(a) => cmd_oracle(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
