//! Hindsight off-policy option learning.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod critic;
pub mod diffgraph;
pub mod envs;
pub mod improvement;
pub mod inference;
pub mod oracle;
pub mod policy;
pub mod replay;
pub mod trainer;
