//! Run configuration: one JSON tree for every component, dotted-key
//! overrides, and validation that names the offending key.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::envs::make_env;
use crate::improvement::LearnerConfig;
use crate::replay::ReplayConfig;
use crate::trainer::{Algorithm, CriticOptions, PolicyOptions, TrainerConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{key}: required")]
    Missing { key: String },
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

impl ConfigError {
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Missing { key } | ConfigError::Invalid { key, .. } => Some(key),
            ConfigError::Io { .. } => None,
        }
    }

    fn invalid(key: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// `point_mass_targets` or `modal_bandit`.
    pub name: Option<String>,
    /// Overrides the environment's own step cap.
    pub episode_cap: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<String>,
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
    pub policy: PolicyOptions,
    pub critic: CriticOptions,
    pub learner: LearnerConfig,
    pub replay: ReplayConfig,
}

/// Sets `key` (dot separated) to `raw`, parsed as JSON when possible and as a
/// string otherwise. Intermediate objects are created as needed.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<(), ConfigError> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::invalid(key, "malformed key"));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            let parent = parts[..i].join(".");
            return Err(ConfigError::invalid(&parent, "is not an object"));
        }
        let map = node.as_object_mut().expect("checked");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("keys have at least one part")
}

/// Recursively overlays `top` onto `base`. Objects merge key by key, except
/// that a differing `kind` tag replaces the whole object.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            let retagged = matches!((b.get("kind"), t.get("kind")), (Some(x), Some(y)) if x != y);
            if retagged {
                *b = t;
                return;
            }
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `KEY=VALUE`.
pub fn parse_assignment(text: &str) -> Result<(&str, &str), ConfigError> {
    text.split_once('=')
        .ok_or_else(|| ConfigError::invalid(text, "override must look like key=value"))
}

impl RunConfig {
    /// Builds from defaults, an optional JSON file, `key=value` overrides and
    /// a seed override such as the `HO2_SEED` variable, in that order.
    pub fn load(
        path: Option<&Path>,
        overrides: &[String],
        seed: Option<&str>,
    ) -> Result<Self, ConfigError> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Io {
                    path: p.display().to_string(),
                    message: e.to_string(),
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| ConfigError::invalid("<config file>", e.to_string()))?
            }
            None => Value::Object(Default::default()),
        };
        if !file.is_object() {
            return Err(ConfigError::invalid(
                "<config file>",
                "top level must be an object",
            ));
        }
        let mut root = serde_json::to_value(Self::default()).expect("defaults serialize");
        merge(&mut root, file);
        for o in overrides {
            let (k, v) = parse_assignment(o)?;
            apply_override(&mut root, k, v)?;
        }
        if let Some(s) = seed {
            let n: u64 = s.trim().parse().map_err(|_| {
                ConfigError::invalid("HO2_SEED", format!("not an unsigned integer: {s:?}"))
            })?;
            apply_override(&mut root, "seed", &n.to_string())?;
        }
        let config = Self::from_value(root)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_value(value: Value) -> Result<Self, ConfigError> {
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." {
                "<root>".to_string()
            } else {
                path
            };
            ConfigError::Invalid {
                key,
                message: e.into_inner().to_string(),
            }
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let name = self
            .env
            .name
            .as_deref()
            .ok_or_else(|| ConfigError::Missing {
                key: "env.name".into(),
            })?;
        let env = make_env(name, self.env.episode_cap)
            .map_err(|e| ConfigError::invalid("env.name", e.to_string()))?;
        let t = &self.trainer;
        if t.mode != Algorithm::Mpo && t.num_options == 0 {
            return Err(ConfigError::invalid(
                "trainer.num_options",
                "must be at least 1",
            ));
        }
        if t.batch_size == 0 {
            return Err(ConfigError::invalid(
                "trainer.batch_size",
                "must be at least 1",
            ));
        }
        if t.learner_steps_per_episode == 0 {
            return Err(ConfigError::invalid(
                "trainer.learner_steps_per_episode",
                "must be at least 1",
            ));
        }
        if let Some(k) = t.tasks.iter().find(|&&k| k >= env.num_tasks()) {
            return Err(ConfigError::invalid(
                "trainer.tasks",
                format!("task {k} out of range for {} tasks", env.num_tasks()),
            ));
        }
        if self.learner.inference.max_switches.is_some() {
            return Err(ConfigError::invalid(
                "learner.inference.max_switches",
                "set trainer.mode=ho2-limits and trainer.switch_budget instead",
            ));
        }
        if self.replay.segment_length < 2 {
            return Err(ConfigError::invalid(
                "replay.segment_length",
                "must be at least 2",
            ));
        }
        if self.replay.segment_length > env.max_episode_steps() + 1 {
            return Err(ConfigError::invalid(
                "replay.segment_length",
                format!(
                    "{name} episodes hold at most {} observations",
                    env.max_episode_steps() + 1
                ),
            ));
        }
        if self.replay.capacity == 0 {
            return Err(ConfigError::invalid(
                "replay.capacity",
                "must be at least 1",
            ));
        }
        if self.learner.samples == 0 {
            return Err(ConfigError::invalid(
                "learner.samples",
                "must be at least 1",
            ));
        }
        if self.learner.target_samples == 0 {
            return Err(ConfigError::invalid(
                "learner.target_samples",
                "must be at least 1",
            ));
        }
        if !(self.learner.budgets.estep > 0.0) {
            return Err(ConfigError::invalid(
                "learner.budgets.estep",
                "must be positive",
            ));
        }
        if self.policy.hidden.contains(&0) {
            return Err(ConfigError::invalid(
                "policy.hidden",
                "layer widths must be positive",
            ));
        }
        if self.critic.hidden.contains(&0) {
            return Err(ConfigError::invalid(
                "critic.hidden",
                "layer widths must be positive",
            ));
        }
        Ok(())
    }

    /// Complete configuration with every default filled in.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn base() -> Vec<String> {
        vec!["env.name=point_mass_targets".to_string()]
    }

    #[test]
    fn missing_env_name_is_named() {
        let err = RunConfig::load(None, &[], None).unwrap_err();
        assert_eq!(err.key(), Some("env.name"));
        assert!(err.to_string().contains("env.name"));
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let mut o = base();
        o.push("trainer.mode=rhpo".into());
        o.push("learner.budgets.mean=0.01".into());
        o.push("policy.hidden=[16,16]".into());
        let c = RunConfig::load(None, &o, None).unwrap();
        assert_eq!(c.trainer.mode, Algorithm::Rhpo);
        assert_eq!(c.learner.budgets.mean, 0.01);
        assert_eq!(c.policy.hidden, vec![16, 16]);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let mut o = base();
        o.push("trainer.modee=ho2".into());
        let err = RunConfig::load(None, &o, None).unwrap_err();
        assert!(err.to_string().contains("modee"), "{err}");
        assert!(err.key().unwrap().starts_with("trainer"), "{err}");
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut o = base();
        o.push("replay.capacity=\"many\"".into());
        let err = RunConfig::load(None, &o, None).unwrap_err();
        assert_eq!(err.key(), Some("replay.capacity"));
    }

    #[test]
    fn seed_override_wins() {
        let mut o = base();
        o.push("seed=3".into());
        assert_eq!(RunConfig::load(None, &o, Some("11")).unwrap().seed, 11);
        let err = RunConfig::load(None, &o, Some("x")).unwrap_err();
        assert_eq!(err.key(), Some("HO2_SEED"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut o = base();
        o.push("learner.budgets.controller=null".into());
        let c = RunConfig::load(None, &o, None).unwrap();
        assert!(c.learner.budgets.controller.is_infinite());
        let text = c.to_json_pretty();
        let back = RunConfig::from_value(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json_pretty(), text);
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pm.json");
        std::fs::write(
            &path,
            json!({"env": {"name": "point_mass_targets"}, "trainer": {"mode": "mpo"}}).to_string(),
        )
        .unwrap();
        let c = RunConfig::load(Some(&path), &["trainer.mode=ho2-limits".into()], None).unwrap();
        assert_eq!(c.trainer.mode, Algorithm::Ho2Limits);
    }

    #[test]
    fn switch_budget_lives_in_trainer() {
        let mut o = base();
        o.push("learner.inference.max_switches=2".into());
        let err = RunConfig::load(None, &o, None).unwrap_err();
        assert_eq!(err.key(), Some("learner.inference.max_switches"));
    }

    #[test]
    fn segments_must_fit_in_an_episode() {
        let o = vec!["env.name=modal_bandit".to_string()];
        let err = RunConfig::load(None, &o, None).unwrap_err();
        assert_eq!(err.key(), Some("replay.segment_length"));
        let mut o = o;
        o.push("replay.segment_length=2".into());
        assert!(RunConfig::load(None, &o, None).is_ok());
    }

    #[test]
    fn leaf_overrides_keep_sibling_defaults() {
        let mut o = base();
        o.push("learner.policy_optimizer.lr=0.001".into());
        let c = RunConfig::load(None, &o, None).unwrap();
        assert_eq!(
            c.learner.policy_optimizer,
            crate::diffgraph::OptimizerConfig::adam(0.001)
        );
        let mut o = base();
        o.push(r#"learner.critic_optimizer={"kind":"sgd","lr":0.5}"#.into());
        let c = RunConfig::load(None, &o, None).unwrap();
        assert_eq!(
            c.learner.critic_optimizer,
            crate::diffgraph::OptimizerConfig::Sgd { lr: 0.5 }
        );
    }

    #[test]
    fn string_values_need_no_quotes() {
        let mut root = json!({});
        apply_override(&mut root, "env.name", "modal_bandit").unwrap();
        apply_override(&mut root, "trainer.max_env_steps", "100").unwrap();
        assert_eq!(
            root,
            json!({"env": {"name": "modal_bandit"}, "trainer": {"max_env_steps": 100}})
        );
        assert!(apply_override(&mut root, "env.name.x", "1").is_err());
        assert!(apply_override(&mut root, "a..b", "1").is_err());
    }
}
