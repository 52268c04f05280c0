//! Meta-learning an agent's initial policy against peers that keep learning,
//! in repeated matrix games with tabular softmax policies.

pub mod games;
pub mod harness;
pub mod learning;
pub mod meta;
pub mod opponent_modeling;
pub mod oracle;
pub mod policies;
pub mod tape;
pub mod zero_sum_analytic;
