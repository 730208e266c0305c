//! Monitored on-policy trajectory synthesis for reasoning distillation.
//!
//! A student policy writes reasoning steps; a teacher scores each step and
//! sets an entropy-adaptive acceptance boundary. On the first breach the run
//! rewinds to the step with the sharpest value drop (whose predecessor was
//! safe), asks the teacher to continue from there, and stitches the
//! correction after the flawed student prefix behind a revision token.

pub mod backtrack;
pub mod baselines;
pub mod biaslab;
pub mod cli;
pub mod dataio;
pub mod monitor;
pub mod pipeline;
pub mod policy;
pub mod stitch;
pub mod types;

pub use types::*;
