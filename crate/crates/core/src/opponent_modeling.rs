//! Inferring peer policies from observed actions.
//!
//! A fit maximizes `sum_t log pi(a_t | s_t, phi_hat)` over the peer's
//! logits by gradient ascent. Rows of a softmax table decouple, so each
//! visited state's gradient is scaled by its visit count; steps that lower
//! the total log-likelihood are halved until they do not.

use thiserror::Error;

use crate::learning::TrajectoryBatch;
use crate::policies::PolicyParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OmError {
    #[error("cannot fit an opponent model on an empty batch")]
    EmptyBatch,
    #[error("agent {agent} is not in the batch ({n_agents} agents)")]
    BadAgent { agent: usize, n_agents: usize },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum OmInit {
    /// Zero logits at the start of every chain.
    Uniform,
    /// The peer's true initial logits. Only used to check that a fit which
    /// never moves reproduces centralized training.
    TrueParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpponentModelConfig {
    pub lr_eta: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub init: OmInit,
}

impl Default for OpponentModelConfig {
    fn default() -> Self {
        Self { lr_eta: 4.0, tol: 1e-10, max_iters: 500, init: OmInit::Uniform }
    }
}

impl OpponentModelConfig {
    pub fn initial_estimate(&self, truth: &PolicyParams) -> PolicyParams {
        match self.init {
            OmInit::Uniform => PolicyParams::zeros(truth.agent_id, truth.n_states, truth.n_actions),
            OmInit::TrueParams => truth.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferredPeer {
    pub params_hat: PolicyParams,
    pub fit_log_likelihood: f64,
    pub iterations_used: usize,
    /// Log-likelihood before the first step and after every accepted step.
    pub history: Vec<f64>,
}

fn log_likelihood(counts: &[f64], logits: &[f64], n_actions: usize) -> f64 {
    let mut ll = 0.0;
    for (c_row, l_row) in counts.chunks(n_actions).zip(logits.chunks(n_actions)) {
        if c_row.iter().all(|&c| c == 0.0) {
            continue;
        }
        let lp = crate::policies::log_softmax(l_row);
        ll += c_row.iter().zip(&lp).map(|(c, l)| c * l).sum::<f64>();
    }
    ll
}

/// Fits `agent`'s logits to its actions in `batch`, starting from `init`.
pub fn fit_opponent(
    batch: &TrajectoryBatch,
    agent: usize,
    init: &PolicyParams,
    cfg: &OpponentModelConfig,
) -> Result<InferredPeer, OmError> {
    if batch.is_empty() || batch.horizon() == 0 {
        return Err(OmError::EmptyBatch);
    }
    let n_agents = batch.trajectories[0].n_agents;
    if agent >= n_agents {
        return Err(OmError::BadAgent { agent, n_agents });
    }
    let na = init.n_actions;
    let n_traj = batch.len() as f64;
    let mut counts = vec![0.0; init.logits.len()];
    for (traj, &w) in batch.trajectories.iter().zip(&batch.weights) {
        for t in 0..traj.horizon() {
            counts[traj.states[t] * na + traj.action(t, agent)] += w * n_traj;
        }
    }
    let total: f64 = counts.iter().sum();
    let visits: Vec<f64> = counts.chunks(na).map(|r| r.iter().sum()).collect();

    let mut logits = init.logits.clone();
    let mut ll = log_likelihood(&counts, &logits, na);
    let mut history = vec![ll];
    let mut iters = 0;
    let mut grad = vec![0.0; logits.len()];
    let mut trial = vec![0.0; logits.len()];
    while iters < cfg.max_iters {
        for s in 0..visits.len() {
            let row = &mut grad[s * na..(s + 1) * na];
            if visits[s] == 0.0 {
                row.iter_mut().for_each(|g| *g = 0.0);
                continue;
            }
            let p = crate::policies::softmax(&logits[s * na..(s + 1) * na]);
            for a in 0..na {
                row[a] = counts[s * na + a] / visits[s] - p[a];
            }
        }
        let mut eta = cfg.lr_eta;
        let mut accepted = None;
        for _ in 0..60 {
            for ((t, &x), &g) in trial.iter_mut().zip(&logits).zip(&grad) {
                *t = x + eta * g;
            }
            let new_ll = log_likelihood(&counts, &trial, na);
            if new_ll >= ll {
                accepted = Some(new_ll);
                break;
            }
            eta *= 0.5;
        }
        iters += 1;
        let Some(new_ll) = accepted else { break };
        std::mem::swap(&mut logits, &mut trial);
        let delta = (new_ll - ll) / total;
        ll = new_ll;
        history.push(ll);
        if delta.abs() < cfg.tol {
            break;
        }
    }
    Ok(InferredPeer {
        params_hat: PolicyParams { logits, ..init.clone() },
        fit_log_likelihood: ll,
        iterations_used: iters,
        history,
    })
}
