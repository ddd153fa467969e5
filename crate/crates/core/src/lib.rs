//! Value-decomposed soft actor-critic on toy environments with vector rewards.

pub mod approximator;
pub mod policy;
pub mod envs;
pub mod replay;
pub mod shaping;
pub mod gradsurgery;
pub mod sacd;
pub mod analysis;
pub mod rollout;
pub mod run;
