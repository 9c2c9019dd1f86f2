//! Versioned binary checkpoints. Parameters are stored as little-endian
//! `f64` so a save/load cycle is bitwise exact.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critic::{Critic, CriticConfig};
use crate::diffgraph::Tensor;
use crate::policy::{OptionPolicy, PolicyConfig};

pub const MAGIC: &[u8; 8] = b"HO2CKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {VERSION})")]
    Version { found: u32 },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    env: String,
    algorithm: String,
    learner_steps: u64,
    env_steps: u64,
    policy: PolicyConfig,
    critic: CriticConfig,
}

/// Everything needed to resume evaluation or transfer.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub env: String,
    pub algorithm: String,
    pub learner_steps: u64,
    pub env_steps: u64,
    pub policy: OptionPolicy,
    pub critic: Critic,
    /// Softplus pre-images of the temperature and the four multipliers.
    pub raw_duals: [f64; 5],
}

fn write_tensors<W: Write>(w: &mut W, tensors: &[&Tensor]) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for t in tensors {
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.values() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

/// Overwrites `targets` in order; shapes must match exactly.
fn read_tensors<R: Read>(
    r: &mut R,
    targets: Vec<&mut Tensor>,
    what: &str,
) -> Result<(), CheckpointError> {
    let count = r.read_u32::<LittleEndian>()? as usize;
    if count != targets.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{what}: {count} tensors stored, {} expected",
            targets.len()
        )));
    }
    for (i, t) in targets.into_iter().enumerate() {
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>()? as usize);
        }
        if shape != t.shape() {
            return Err(CheckpointError::Corrupt(format!(
                "{what} tensor {i}: stored shape {shape:?}, expected {:?}",
                t.shape()
            )));
        }
        for v in t.values_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        let header = serde_json::to_vec(&Header {
            env: self.env.clone(),
            algorithm: self.algorithm.clone(),
            learner_steps: self.learner_steps,
            env_steps: self.env_steps,
            policy: self.policy.config.clone(),
            critic: self.critic.config.clone(),
        })?;
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(header.len() as u64)?;
        w.write_all(&header)?;
        write_tensors(w, &self.policy.params())?;
        write_tensors(w, &self.critic.online.params())?;
        write_tensors(w, &self.critic.target.params())?;
        for &d in &self.raw_duals {
            w.write_f64::<LittleEndian>(d)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let len = r.read_u64::<LittleEndian>()? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let header: Header = serde_json::from_slice(&buf)?;
        // Initialization is overwritten below; the rng only fixes shapes.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut policy = OptionPolicy::new(header.policy, &mut rng)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let mut critic = Critic::new(header.critic, &mut rng);
        read_tensors(r, policy.params_mut(), "policy")?;
        read_tensors(r, critic.online.params_mut(), "critic")?;
        read_tensors(r, critic.target.params_mut(), "target critic")?;
        let mut raw_duals = [0.0; 5];
        for d in &mut raw_duals {
            *d = r.read_f64::<LittleEndian>()?;
        }
        Ok(Self {
            env: header.env,
            algorithm: header.algorithm,
            learner_steps: header.learner_steps,
            env_steps: header.env_steps,
            policy,
            critic,
            raw_duals,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let policy = OptionPolicy::new(
            PolicyConfig {
                num_options: 3,
                observation_dim: 4,
                action_dim: 2,
                controller_features: vec![0, 1, 2, 3],
                component_features: vec![0, 1],
                hidden: vec![8],
                ..PolicyConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let mut critic = Critic::new(
            CriticConfig {
                observation_dim: 4,
                action_dim: 2,
                num_options: 3,
                num_tasks: 2,
                hidden: vec![8],
                ..CriticConfig::default()
            },
            &mut rng,
        );
        critic.online.params_mut()[0].values_mut()[0] = 0.1 + 0.2;
        Checkpoint {
            env: "point_mass_targets".into(),
            algorithm: "ho2".into(),
            learner_steps: 17,
            env_steps: 1234,
            policy,
            critic,
            raw_duals: [0.3, -1.0, f64::MIN_POSITIVE, 2.5, 1e-300],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ckpt = sample();
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        let bits = |c: &Checkpoint| -> Vec<u64> {
            c.policy
                .params()
                .iter()
                .flat_map(|t| t.values().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&back), bits(&ckpt));
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn rejects_foreign_and_future_files() {
        assert!(matches!(
            Checkpoint::read_from(&mut &b"NOTACKPTxxxx"[..]),
            Err(CheckpointError::BadMagic)
        ));
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf[8] = 99;
        assert!(matches!(
            Checkpoint::read_from(&mut buf.as_slice()),
            Err(CheckpointError::Version { found: 99 })
        ));
    }

    #[test]
    fn truncated_file_is_an_error() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}
