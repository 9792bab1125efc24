pub mod robot;
pub mod physics;
pub mod nn;
pub mod env;
pub mod dataset;
pub mod disc;
pub mod ppo;
pub mod variant;
pub mod rollout;
pub mod coopt;
pub mod eval;
