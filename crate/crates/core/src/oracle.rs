//! Brute-force ground truth for tiny games.
//!
//! Nothing here touches the tape or the learning module: trajectories are
//! enumerated, gradients are written out analytically for softmax tables,
//! and meta-gradients come from central finite differences.

use thiserror::Error;

use crate::games::MatrixGame;
use crate::policies::PolicyParams;

/// Largest number of trajectories an oracle will enumerate.
pub const MAX_OUTCOMES: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("enumeration needs {needed} trajectories, limit is {limit}")]
    TooLarge { needed: u128, limit: u64 },
    #[error("exact meta-value supports chain length 1 or 2, got {0}")]
    ChainTooLong(usize),
    #[error("expected {expected} learning rates, got {got}")]
    LrCount { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExactOutcome {
    /// Joint-action index at each step.
    pub joint: Vec<usize>,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExactDistribution {
    pub outcomes: Vec<ExactOutcome>,
}

impl ExactDistribution {
    pub fn total_probability(&self) -> f64 {
        self.outcomes.iter().map(|o| o.prob).sum()
    }
}

fn guard(game: &MatrixGame, horizon: usize) -> Result<usize, OracleError> {
    let needed = (game.n_joint() as u128).checked_pow(horizon as u32).unwrap_or(u128::MAX);
    if needed > MAX_OUTCOMES as u128 {
        return Err(OracleError::TooLarge { needed, limit: MAX_OUTCOMES });
    }
    Ok(needed as usize)
}

fn joint_prob(game: &MatrixGame, probs: &[Vec<Vec<f64>>], state: usize, joint: usize) -> f64 {
    let acts = game.decode_joint(joint);
    let mut p = 1.0;
    for (k, &a) in acts.iter().enumerate() {
        p *= probs[k][state][a];
    }
    p
}

fn prob_tables(joint: &[PolicyParams]) -> Vec<Vec<Vec<f64>>> {
    joint
        .iter()
        .map(|p| (0..p.n_states).map(|s| p.action_probs(s)).collect())
        .collect()
}

/// Every joint-action sequence of length `horizon` with its probability.
pub fn enumerate_trajectories(
    game: &MatrixGame,
    joint: &[PolicyParams],
    horizon: usize,
) -> Result<ExactDistribution, OracleError> {
    let n = guard(game, horizon)?;
    let probs = prob_tables(joint);
    let nj = game.n_joint();
    let mut outcomes = Vec::with_capacity(n);
    let mut seq = vec![0usize; horizon];
    for _ in 0..n {
        let mut p = 1.0;
        let mut state = 0;
        for &j in &seq {
            p *= joint_prob(game, &probs, state, j);
            state = j + 1;
        }
        outcomes.push(ExactOutcome { joint: seq.clone(), prob: p });
        // odometer increment, last step fastest
        for pos in (0..horizon).rev() {
            seq[pos] += 1;
            if seq[pos] < nj {
                break;
            }
            seq[pos] = 0;
        }
    }
    Ok(ExactDistribution { outcomes })
}

fn discounted(game: &MatrixGame, seq: &[usize], gamma: f64, agent: usize) -> f64 {
    let mut g = 0.0;
    let mut d = 1.0;
    for &j in seq {
        g += d * game.reward(j, agent);
        d *= gamma;
    }
    g
}

pub fn exact_expected_return(
    game: &MatrixGame,
    joint: &[PolicyParams],
    horizon: usize,
    gamma: f64,
    agent: usize,
) -> Result<f64, OracleError> {
    let dist = enumerate_trajectories(game, joint, horizon)?;
    Ok(dist
        .outcomes
        .iter()
        .map(|o| o.prob * discounted(game, &o.joint, gamma, agent))
        .sum())
}

/// Gradient of agent `agent`'s exact expected discounted return with respect
/// to its own logits:
/// `sum_tau p(tau) G(tau) sum_t d/dlogits log pi(a_t | s_t)`.
pub fn exact_policy_gradient(
    game: &MatrixGame,
    joint: &[PolicyParams],
    horizon: usize,
    gamma: f64,
    agent: usize,
) -> Result<Vec<f64>, OracleError> {
    let dist = enumerate_trajectories(game, joint, horizon)?;
    let pol = &joint[agent];
    let na = pol.n_actions;
    let probs: Vec<Vec<f64>> = (0..pol.n_states).map(|s| pol.action_probs(s)).collect();
    let mut grad = vec![0.0; pol.logits.len()];
    let mut score = vec![0.0; pol.logits.len()];
    for o in &dist.outcomes {
        if o.prob == 0.0 {
            continue;
        }
        score.iter_mut().for_each(|x| *x = 0.0);
        let mut state = 0;
        for &j in &o.joint {
            let a = game.decode_joint(j)[agent];
            for b in 0..na {
                let ind = if a == b { 1.0 } else { 0.0 };
                score[state * na + b] += ind - probs[state][b];
            }
            state = j + 1;
        }
        let g = o.prob * discounted(game, &o.joint, gamma, agent);
        for (gi, si) in grad.iter_mut().zip(&score) {
            *gi += g * si;
        }
    }
    Ok(grad)
}

/// One exact policy-gradient ascent step for every agent.
pub fn exact_inner_update(
    game: &MatrixGame,
    joint: &[PolicyParams],
    alphas: &[f64],
    horizon: usize,
    gamma: f64,
) -> Result<Vec<PolicyParams>, OracleError> {
    if alphas.len() != joint.len() {
        return Err(OracleError::LrCount { expected: joint.len(), got: alphas.len() });
    }
    let mut next = joint.to_vec();
    for (k, p) in next.iter_mut().enumerate() {
        let g = exact_policy_gradient(game, joint, horizon, gamma, k)?;
        for (x, gx) in p.logits.iter_mut().zip(g) {
            *x += alphas[k] * gx;
        }
    }
    Ok(next)
}

/// Finite-horizon state-action values by backward induction.
///
/// `q[h][s * n_joint + j]` is agent `agent`'s value of playing joint action
/// `j` in state `s` with `h` steps left (h >= 1).
#[derive(Clone, Debug)]
pub struct ExactQTable {
    pub agent: usize,
    pub n_joint: usize,
    pub n_states: usize,
    pub q: Vec<Vec<f64>>,
}

impl ExactQTable {
    pub fn q(&self, steps_left: usize, state: usize, joint: usize) -> f64 {
        self.q[steps_left][state * self.n_joint + joint]
    }
}

pub fn exact_q_table(
    game: &MatrixGame,
    joint: &[PolicyParams],
    horizon: usize,
    gamma: f64,
    agent: usize,
) -> ExactQTable {
    let probs = prob_tables(joint);
    let nj = game.n_joint();
    let ns = game.n_states();
    let mut q = vec![vec![0.0; ns * nj]; horizon + 1];
    for h in 1..=horizon {
        for s in 0..ns {
            for j in 0..nj {
                let next = j + 1;
                let cont: f64 = if h > 1 {
                    (0..nj)
                        .map(|jn| joint_prob(game, &probs, next, jn) * q[h - 1][next * nj + jn])
                        .sum()
                } else {
                    0.0
                };
                q[h][s * nj + j] = game.reward(j, agent) + gamma * cont;
            }
        }
    }
    ExactQTable { agent, n_joint: nj, n_states: ns, q }
}

/// `V(s) = sum_j pi(j | s) Q_h(s, j)` from a Q table.
pub fn state_value(game: &MatrixGame, joint: &[PolicyParams], table: &ExactQTable, steps_left: usize, state: usize) -> f64 {
    let probs = prob_tables(joint);
    (0..table.n_joint)
        .map(|j| joint_prob(game, &probs, state, j) * table.q(steps_left, state, j))
        .sum()
}

/// Exact meta-value `sum_{l=0}^{L-1} J_agent(phi_{l+1})` where every agent
/// follows exact policy-gradient steps.
pub fn exact_meta_value(
    game: &MatrixGame,
    joint0: &[PolicyParams],
    alphas: &[f64],
    chain_len: usize,
    horizon: usize,
    gamma: f64,
    agent: usize,
) -> Result<f64, OracleError> {
    if chain_len == 0 || chain_len > 2 {
        return Err(OracleError::ChainTooLong(chain_len));
    }
    guard(game, horizon)?;
    let mut phi = joint0.to_vec();
    let mut total = 0.0;
    for _ in 0..chain_len {
        phi = exact_inner_update(game, &phi, alphas, horizon, gamma)?;
        total += exact_expected_return(game, &phi, horizon, gamma, agent)?;
    }
    Ok(total)
}

/// Central differences of [`exact_meta_value`] over the agent's initial logits.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_meta_grad(
    game: &MatrixGame,
    joint0: &[PolicyParams],
    alphas: &[f64],
    chain_len: usize,
    horizon: usize,
    gamma: f64,
    agent: usize,
    h: f64,
) -> Result<Vec<f64>, OracleError> {
    let n = joint0[agent].logits.len();
    let mut grad = Vec::with_capacity(n);
    for c in 0..n {
        let mut plus = joint0.to_vec();
        plus[agent].logits[c] += h;
        let mut minus = joint0.to_vec();
        minus[agent].logits[c] -= h;
        let vp = exact_meta_value(game, &plus, alphas, chain_len, horizon, gamma, agent)?;
        let vm = exact_meta_value(game, &minus, alphas, chain_len, horizon, gamma, agent)?;
        grad.push((vp - vm) / (2.0 * h));
    }
    Ok(grad)
}
