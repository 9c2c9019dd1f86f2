//! Option-decomposition diagnostics over rollout logs: usage entropy, executed
//! switch rate and silhouette scores.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::ObservationSpec;
pub use crate::replay::StepRecord;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("log is empty")]
    Empty,
    #[error("no consecutive step pairs within any episode")]
    NoPairs,
    #[error("silhouette needs at least two distinct labels")]
    SingleLabel,
    #[error("invalid points: {0}")]
    InvalidPoints(String),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("io: {0}")]
    Io(String),
}

/// Steps of one or more episodes, in recording order.
pub type RolloutLog = Vec<StepRecord>;

/// Parses a JSONL log. Blank lines are skipped; line numbers start at 1.
pub fn read_log<R: BufRead>(reader: R) -> Result<RolloutLog, AnalysisError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| AnalysisError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord =
            serde_json::from_str(&line).map_err(|e| AnalysisError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn option_histogram(options: &[usize]) -> Vec<usize> {
    let m = options.iter().max().map_or(0, |&o| o + 1);
    let mut counts = vec![0; m];
    for &o in options {
        counts[o] += 1;
    }
    counts
}

/// Shannon entropy in nats of the empirical option frequencies.
pub fn option_entropy(options: &[usize]) -> Result<f64, AnalysisError> {
    if options.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let n = options.len() as f64;
    Ok(option_histogram(options)
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum())
}

/// Fraction of within-episode consecutive pairs whose option differs.
/// `episodes[i]` is the episode id of step `i`; pairs across ids never count.
pub fn switch_rate(options: &[usize], episodes: &[usize]) -> Result<f64, AnalysisError> {
    assert_eq!(options.len(), episodes.len(), "one episode id per step");
    let mut pairs = 0usize;
    let mut switches = 0usize;
    for i in 1..options.len() {
        if episodes[i] == episodes[i - 1] {
            pairs += 1;
            switches += usize::from(options[i] != options[i - 1]);
        }
    }
    if pairs == 0 {
        return Err(AnalysisError::NoPairs);
    }
    Ok(switches as f64 / pairs as f64)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette under Euclidean distance. Points alone in their cluster
/// score 0, as do points with `a = b = 0`.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64, AnalysisError> {
    if points.len() != labels.len() {
        return Err(AnalysisError::InvalidPoints(
            "one label per point required".into(),
        ));
    }
    if points.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let dim = points[0].len();
    if points
        .iter()
        .any(|p| p.len() != dim || p.iter().any(|x| !x.is_finite()))
    {
        return Err(AnalysisError::InvalidPoints(
            "points must be finite and of equal dimension".into(),
        ));
    }
    let mut index: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        let next = index.len();
        index.entry(l).or_insert(next);
    }
    let k = index.len();
    if k < 2 {
        return Err(AnalysisError::SingleLabel);
    }
    let cluster: Vec<usize> = labels.iter().map(|l| index[l]).collect();
    let mut sizes = vec![0usize; k];
    for &c in &cluster {
        sizes[c] += 1;
    }
    let n = points.len();
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[cluster[j]] += distance(&points[i], &points[j]);
            }
        }
        let own = cluster[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Per-feature z-scoring; constant features are only centred.
pub fn standardize(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let Some(first) = points.first() else {
        return Vec::new();
    };
    let n = points.len() as f64;
    let dim = first.len();
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; dim];
    for p in points {
        for ((v, x), m) in var.iter_mut().zip(p).zip(&mean) {
            *v += (x - m) * (x - m) / n;
        }
    }
    points
        .iter()
        .map(|p| {
            p.iter()
                .zip(&mean)
                .zip(&var)
                .map(|((x, m), v)| if *v > 0.0 { (x - m) / v.sqrt() } else { x - m })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub max_points: usize,
    pub seed: u64,
    pub standardize: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            max_points: 2000,
            seed: 0,
            standardize: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub episodes: usize,
    pub steps: usize,
    pub options_used: usize,
    pub option_histogram: Vec<usize>,
    pub option_entropy: Option<f64>,
    pub switch_rate: Option<f64>,
    pub silhouette_points: usize,
    pub silhouette_action: Option<f64>,
    /// Full observation.
    pub silhouette_state: Option<f64>,
    /// Proprioceptive features only.
    pub silhouette_state_proprio: Option<f64>,
    /// Task one-hot concatenated with target offsets.
    pub silhouette_task: Option<f64>,
    pub standardized: bool,
    pub errors: BTreeMap<String, String>,
}

fn subsample(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, max).into_vec();
    idx.sort_unstable();
    idx
}

/// Entropy, switch rate and silhouettes over actions, states and task
/// features. Failed metrics become `None` with the reason in `errors`.
pub fn report(log: &[StepRecord], spec: &ObservationSpec, config: &ReportConfig) -> Report {
    let options: Vec<usize> = log.iter().map(|r| r.option).collect();
    let episodes: Vec<usize> = log.iter().map(|r| r.episode).collect();
    let mut errors = BTreeMap::new();
    let mut keep = |name: &str, result: Result<f64, AnalysisError>| match result {
        Ok(v) => Some(v),
        Err(e) => {
            errors.insert(name.to_string(), e.to_string());
            None
        }
    };

    let entropy = keep("option_entropy", option_entropy(&options));
    let rate = keep("switch_rate", switch_rate(&options, &episodes));

    let idx = subsample(log.len(), config.max_points, config.seed);
    let labels: Vec<usize> = idx.iter().map(|&i| options[i]).collect();
    let features =
        |pick: &dyn Fn(&StepRecord) -> Vec<f64>| -> Result<Vec<Vec<f64>>, AnalysisError> {
            let pts: Vec<Vec<f64>> = idx.iter().map(|&i| pick(&log[i])).collect();
            if pts.first().is_some_and(|p| p.is_empty()) {
                return Err(AnalysisError::InvalidPoints(
                    "feature group is empty for this environment".into(),
                ));
            }
            Ok(if config.standardize {
                standardize(&pts)
            } else {
                pts
            })
        };
    let score = |pick: &dyn Fn(&StepRecord) -> Vec<f64>| {
        features(pick).and_then(|p| silhouette(&p, &labels))
    };
    let gather = |obs: &[f64], groups: &[&[usize]]| -> Vec<f64> {
        groups
            .iter()
            .flat_map(|g| g.iter().map(|&i| obs[i]))
            .collect()
    };

    let s_action = keep("silhouette_action", score(&|r| r.action.clone()));
    let s_state = keep("silhouette_state", score(&|r| r.observation.clone()));
    let s_proprio = keep(
        "silhouette_state_proprio",
        score(&|r| gather(&r.observation, &[&spec.proprio])),
    );
    let s_task = keep(
        "silhouette_task",
        score(&|r| gather(&r.observation, &[&spec.task_index, &spec.targets])),
    );

    let histogram = option_histogram(&options);
    let mut ids = episodes.clone();
    ids.dedup();
    Report {
        schema_version: REPORT_SCHEMA_VERSION,
        episodes: ids.len(),
        steps: log.len(),
        options_used: histogram.iter().filter(|&&c| c > 0).count(),
        option_histogram: histogram,
        option_entropy: entropy,
        switch_rate: rate,
        silhouette_points: idx.len(),
        silhouette_action: s_action,
        silhouette_state: s_state,
        silhouette_state_proprio: s_proprio,
        silhouette_task: s_task,
        standardized: config.standardize,
        errors,
    }
}

/// `option,count,frequency` rows.
pub fn write_histogram_csv<W: Write>(writer: &mut W, histogram: &[usize]) -> std::io::Result<()> {
    let total: usize = histogram.iter().sum();
    writeln!(writer, "option,count,frequency")?;
    for (o, &c) in histogram.iter().enumerate() {
        let f = if total > 0 {
            c as f64 / total as f64
        } else {
            0.0
        };
        writeln!(writer, "{o},{c},{f}")?;
    }
    Ok(())
}
