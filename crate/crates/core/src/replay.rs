//! Fixed-capacity FIFO replay of trajectory segments with hindsight relabeling.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::inference::TrajectorySegment;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("buffer holds {size} segments, batch of {requested} requested")]
    Underfull { size: usize, requested: usize },
    #[error("episode is inconsistent: {0}")]
    BadEpisode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One actor episode as recorded, before windowing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    /// `n + 1` observations.
    pub observations: Vec<Vec<f64>>,
    /// `n` actions.
    pub actions: Vec<Vec<f64>>,
    /// `n` executed options.
    pub options: Vec<usize>,
    /// `n` flags: the controller was consulted at this step.
    pub terminations: Vec<bool>,
    /// `n` flags: the executed option changed at this step.
    pub switches: Vec<bool>,
    /// `n` per-task reward vectors as reported by the environment.
    pub rewards: Vec<Vec<f64>>,
    /// `n + 1` raw environment states.
    pub raw_states: Vec<Vec<f64>>,
    /// Task pursued while acting.
    pub task: usize,
    /// The last observation is a genuine terminal state.
    pub terminal: bool,
}

impl Episode {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        let n = self.actions.len();
        let ok = self.observations.len() == n + 1
            && self.raw_states.len() == n + 1
            && self.options.len() == n
            && self.terminations.len() == n
            && self.switches.len() == n
            && self.rewards.len() == n;
        if ok {
            Ok(())
        } else {
            Err(ReplayError::BadEpisode(format!(
                "{n} actions with {} observations",
                self.observations.len()
            )))
        }
    }

    /// Return of task `k` as reported while acting.
    pub fn task_return(&self, k: usize) -> f64 {
        self.rewards.iter().map(|r| r[k]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    pub capacity: usize,
    /// Observations per segment.
    pub segment_length: usize,
    /// Offset between window starts; equal to the segment length for abutting windows.
    pub stride: Option<usize>,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            capacity: 10_000,
            segment_length: 8,
            stride: None,
        }
    }
}

#[derive(Debug, Default)]
struct Inner {
    segments: VecDeque<TrajectorySegment>,
    dropped_episodes: usize,
    appended_segments: usize,
}

/// Thread-safe ring of equal-length segments.
#[derive(Debug)]
pub struct ReplayBuffer {
    config: ReplayConfig,
    inner: Mutex<Inner>,
}

/// Windows an episode into segments, rewards recomputed for every task from
/// the raw states. Incomplete tails are dropped.
pub fn window_episode(
    episode: &Episode,
    segment_length: usize,
    stride: usize,
    task_rewards: &dyn Fn(&[f64]) -> Vec<f64>,
) -> Vec<TrajectorySegment> {
    let total = episode.observations.len();
    let relabeled: Vec<Vec<f64>> = episode.raw_states[1..]
        .iter()
        .map(|s| task_rewards(s))
        .collect();
    let mut out = Vec::new();
    let mut start = 0;
    while start + segment_length <= total {
        let end = start + segment_length;
        out.push(TrajectorySegment {
            observations: episode.observations[start..end].to_vec(),
            actions: episode.actions[start..end - 1].to_vec(),
            rewards: relabeled[start..end - 1].to_vec(),
            options: episode.options[start..end - 1].to_vec(),
            raw_states: episode.raw_states[start..end].to_vec(),
            terminal: episode.terminal && end == total,
        });
        start += stride.max(1);
    }
    out
}

impl ReplayBuffer {
    pub fn new(config: ReplayConfig) -> Self {
        Self {
            config,
            inner: Mutex::new(Inner::default()),
        }
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.config
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Relabels, windows and appends; returns the number of segments added.
    pub fn append_episode(
        &self,
        episode: &Episode,
        task_rewards: &dyn Fn(&[f64]) -> Vec<f64>,
    ) -> Result<usize, ReplayError> {
        episode.validate()?;
        let len = self.config.segment_length;
        let stride = self.config.stride.unwrap_or(len);
        let mut inner = self.lock();
        if episode.observations.len() < len {
            inner.dropped_episodes += 1;
            return Ok(0);
        }
        let segments = window_episode(episode, len, stride, task_rewards);
        let added = segments.len();
        for s in segments {
            if inner.segments.len() == self.config.capacity {
                inner.segments.pop_front();
            }
            inner.segments.push_back(s);
        }
        inner.appended_segments += added;
        Ok(added)
    }

    /// Appends an already windowed segment.
    pub fn push_segment(&self, segment: TrajectorySegment) {
        let mut inner = self.lock();
        if inner.segments.len() == self.config.capacity {
            inner.segments.pop_front();
        }
        inner.segments.push_back(segment);
        inner.appended_segments += 1;
    }

    pub fn len(&self) -> usize {
        self.lock().segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Episodes rejected for being shorter than one segment.
    pub fn dropped_episodes(&self) -> usize {
        self.lock().dropped_episodes
    }

    pub fn appended_segments(&self) -> usize {
        self.lock().appended_segments
    }

    /// Uniform sampling with replacement; only an empty buffer is underfull.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        size: usize,
        rng: &mut R,
    ) -> Result<Vec<TrajectorySegment>, ReplayError> {
        let inner = self.lock();
        let n = inner.segments.len();
        if n == 0 {
            return Err(ReplayError::Underfull {
                size: n,
                requested: size,
            });
        }
        Ok((0..size)
            .map(|_| inner.segments[rng.random_range(0..n)].clone())
            .collect())
    }

    pub fn segment(&self, index: usize) -> Option<TrajectorySegment> {
        self.lock().segments.get(index).cloned()
    }
}

/// One line of an episode log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub episode: usize,
    pub step: usize,
    pub task: usize,
    pub observation: Vec<f64>,
    pub action: Vec<f64>,
    pub option: usize,
    pub switched: bool,
    pub rewards: Vec<f64>,
}

/// Writes one JSON line per acted step.
pub fn export_episode<W: Write>(
    writer: &mut W,
    index: usize,
    episode: &Episode,
) -> Result<(), ReplayError> {
    for t in 0..episode.steps() {
        let record = StepRecord {
            episode: index,
            step: t,
            task: episode.task,
            observation: episode.observations[t].clone(),
            action: episode.actions[t].clone(),
            option: episode.options[t],
            switched: episode.switches[t],
            rewards: episode.rewards[t].clone(),
        };
        serde_json::to_writer(&mut *writer, &record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
