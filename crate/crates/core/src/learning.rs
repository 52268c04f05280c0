//! Trajectory collection, returns, the linear feature baseline, GAE, the
//! DiCE-wrapped policy-gradient inner update, and chain rollouts.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::games::MatrixGame;
use crate::opponent_modeling::{self, OpponentModelConfig};
use crate::policies::{sample_index, PolicyParams};
use crate::tape::{NodeId, Tape, TapeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearningError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("batch size and horizon must be at least 1 (K={k}, H={h})")]
    EmptyBatch { k: usize, h: usize },
    #[error("chain length must be at least 1")]
    EmptyChain,
    #[error("exact enumeration needs {needed} trajectories, limit is {limit}")]
    TooLarge { needed: u128, limit: u64 },
    #[error("chain was rolled out without a tape")]
    MissingTape,
    #[error("expected {expected} {what}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("opponent model: {0}")]
    OpponentModel(String),
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lam: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `H + 1` states, starting at 0.
    pub states: Vec<usize>,
    /// Joint-action index per step.
    pub joint: Vec<usize>,
    /// `actions[t * n_agents + k]`
    pub actions: Vec<usize>,
    /// `rewards[t * n_agents + k]`
    pub rewards: Vec<f64>,
    pub n_agents: usize,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.joint.len()
    }

    #[inline]
    pub fn action(&self, t: usize, agent: usize) -> usize {
        self.actions[t * self.n_agents + agent]
    }

    #[inline]
    pub fn reward(&self, t: usize, agent: usize) -> f64 {
        self.rewards[t * self.n_agents + agent]
    }

    pub fn agent_rewards(&self, agent: usize) -> Vec<f64> {
        (0..self.horizon()).map(|t| self.reward(t, agent)).collect()
    }

    fn from_joint(game: &MatrixGame, joint: Vec<usize>) -> Self {
        let n = game.n_agents;
        let mut states = Vec::with_capacity(joint.len() + 1);
        states.push(0);
        let mut actions = Vec::with_capacity(joint.len() * n);
        let mut rewards = Vec::with_capacity(joint.len() * n);
        for &j in &joint {
            actions.extend(game.decode_joint(j));
            rewards.extend_from_slice(game.payoff_by_index(j));
            states.push(j + 1);
        }
        Self { states, joint, actions, rewards, n_agents: n }
    }
}

/// `sum_{t >= from_t} gamma^(t - from_t) r_t` for one agent.
pub fn discounted_return(traj: &Trajectory, gamma: f64, agent: usize, from_t: usize) -> f64 {
    let mut g = 0.0;
    for t in (from_t..traj.horizon()).rev() {
        g = traj.reward(t, agent) + gamma * g;
    }
    g
}

/// Returns-to-go at every step, length `H`.
pub fn returns_to_go(traj: &Trajectory, gamma: f64, agent: usize) -> Vec<f64> {
    let h = traj.horizon();
    let mut out = vec![0.0; h];
    let mut g = 0.0;
    for t in (0..h).rev() {
        g = traj.reward(t, agent) + gamma * g;
        out[t] = g;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub trajectories: Vec<Trajectory>,
    /// Expectation weights: `1/K` when sampled, `p(tau)` when enumerated.
    pub weights: Vec<f64>,
    pub exact: bool,
    pub params_snapshot: Vec<PolicyParams>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.trajectories.first().map(|t| t.horizon()).unwrap_or(0)
    }

    /// Weighted mean of the discounted return from `s_0`.
    pub fn mean_return(&self, agent: usize, gamma: f64) -> f64 {
        self.trajectories
            .iter()
            .zip(&self.weights)
            .map(|(t, w)| w * discounted_return(t, gamma, agent, 0))
            .sum()
    }
}

/// `K` independent episodes of length `H` from the start state.
///
/// Randomness is consumed trajectory by trajectory, step by step, agent by
/// agent, one uniform variate per action.
pub fn collect_batch<R: Rng + ?Sized>(
    game: &MatrixGame,
    joint: &[PolicyParams],
    k: usize,
    h: usize,
    rng: &mut R,
) -> Result<TrajectoryBatch, LearningError> {
    if k == 0 || h == 0 {
        return Err(LearningError::EmptyBatch { k, h });
    }
    check_joint(game, joint)?;
    let probs: Vec<Vec<Vec<f64>>> = joint
        .iter()
        .map(|p| (0..p.n_states).map(|s| p.action_probs(s)).collect())
        .collect();
    let mut trajectories = Vec::with_capacity(k);
    let mut acts = vec![0usize; game.n_agents];
    for _ in 0..k {
        let mut seq = Vec::with_capacity(h);
        let mut state = 0;
        for _ in 0..h {
            for (agent, a) in acts.iter_mut().enumerate() {
                *a = sample_index(&probs[agent][state], rng);
            }
            let j = game.joint_index(&acts).expect("sampled actions are in range");
            seq.push(j);
            state = j + 1;
        }
        trajectories.push(Trajectory::from_joint(game, seq));
    }
    Ok(TrajectoryBatch {
        trajectories,
        weights: vec![1.0 / k as f64; k],
        exact: false,
        params_snapshot: joint.to_vec(),
    })
}

pub const MAX_EXACT_TRAJECTORIES: u64 = 1_000_000;

/// Every trajectory of length `H`, weighted by its probability.
pub fn exact_batch(game: &MatrixGame, joint: &[PolicyParams], h: usize) -> Result<TrajectoryBatch, LearningError> {
    if h == 0 {
        return Err(LearningError::EmptyBatch { k: 1, h });
    }
    check_joint(game, joint)?;
    let nj = game.n_joint();
    let needed = (nj as u128).checked_pow(h as u32).unwrap_or(u128::MAX);
    if needed > MAX_EXACT_TRAJECTORIES as u128 {
        return Err(LearningError::TooLarge { needed, limit: MAX_EXACT_TRAJECTORIES });
    }
    let logp: Vec<Vec<Vec<f64>>> = joint
        .iter()
        .map(|p| (0..p.n_states).map(|s| p.log_probs(s)).collect())
        .collect();
    let mut trajectories = Vec::with_capacity(needed as usize);
    let mut weights = Vec::with_capacity(needed as usize);
    let mut seq = vec![0usize; h];
    for _ in 0..needed {
        let traj = Trajectory::from_joint(game, seq.clone());
        let mut lp = 0.0;
        for t in 0..h {
            let s = traj.states[t];
            for (agent, table) in logp.iter().enumerate() {
                lp += table[s][traj.action(t, agent)];
            }
        }
        weights.push(lp.exp());
        trajectories.push(traj);
        for pos in (0..h).rev() {
            seq[pos] += 1;
            if seq[pos] < nj {
                break;
            }
            seq[pos] = 0;
        }
    }
    Ok(TrajectoryBatch { trajectories, weights, exact: true, params_snapshot: joint.to_vec() })
}

fn check_joint(game: &MatrixGame, joint: &[PolicyParams]) -> Result<(), LearningError> {
    if joint.len() != game.n_agents {
        return Err(LearningError::Shape { what: "agents", expected: game.n_agents, got: joint.len() });
    }
    for p in joint {
        let n = game.n_states() * game.n_actions;
        if p.logits.len() != n {
            return Err(LearningError::Shape { what: "logits", expected: n, got: p.logits.len() });
        }
    }
    Ok(())
}

pub const BASELINE_RIDGE: f64 = 1e-5;

/// Least-squares fit of discounted returns-to-go on
/// `[onehot(state), t/H, (t/H)^2, (t/H)^3, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearBaseline {
    pub coef: Vec<f64>,
    pub n_states: usize,
    pub horizon: usize,
}

impl LinearBaseline {
    fn features(n_states: usize, horizon: usize, state: usize, t: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        out[state] = 1.0;
        let x = t as f64 / horizon as f64;
        out[n_states] = x;
        out[n_states + 1] = x * x;
        out[n_states + 2] = x * x * x;
        out[n_states + 3] = 1.0;
    }

    pub fn fit(batch: &TrajectoryBatch, agent: usize, gamma: f64) -> LinearBaseline {
        let n_states = batch.params_snapshot.first().map(|p| p.n_states).unwrap_or(1);
        let horizon = batch.horizon();
        let d = n_states + 4;
        let n_traj = batch.len() as f64;
        let mut a = DMatrix::<f64>::zeros(d, d);
        let mut b = DVector::<f64>::zeros(d);
        let mut x = vec![0.0; d];
        for (traj, &w) in batch.trajectories.iter().zip(&batch.weights) {
            let w = w * n_traj;
            if w == 0.0 {
                continue;
            }
            let rtg = returns_to_go(traj, gamma, agent);
            for (t, &y) in rtg.iter().enumerate() {
                Self::features(n_states, horizon, traj.states[t], t, &mut x);
                for i in 0..d {
                    if x[i] == 0.0 {
                        continue;
                    }
                    b[i] += w * x[i] * y;
                    for j in 0..d {
                        a[(i, j)] += w * x[i] * x[j];
                    }
                }
            }
        }
        for i in 0..d {
            a[(i, i)] += BASELINE_RIDGE;
        }
        let coef = match a.clone().cholesky() {
            Some(ch) => ch.solve(&b),
            None => a.lu().solve(&b).unwrap_or_else(|| DVector::zeros(d)),
        };
        LinearBaseline { coef: coef.iter().cloned().collect(), n_states, horizon }
    }

    pub fn predict(&self, state: usize, t: usize) -> f64 {
        let mut x = vec![0.0; self.coef.len()];
        Self::features(self.n_states, self.horizon, state, t, &mut x);
        x.iter().zip(&self.coef).map(|(a, b)| a * b).sum()
    }

    /// Values along a trajectory, length `H + 1` with terminal value 0.
    pub fn values(&self, traj: &Trajectory) -> Vec<f64> {
        let h = traj.horizon();
        let mut v: Vec<f64> = (0..h).map(|t| self.predict(traj.states[t], t)).collect();
        v.push(0.0);
        v
    }
}

/// Fitted baseline values for every trajectory of the batch.
pub fn linear_baseline(batch: &TrajectoryBatch, agent: usize, gamma: f64) -> Vec<Vec<f64>> {
    let fit = LinearBaseline::fit(batch, agent, gamma);
    batch.trajectories.iter().map(|t| fit.values(t)).collect()
}

/// GAE with terminal value `values[H]` (0 for finished episodes).
pub fn gae_advantages(rewards: &[f64], values: &[f64], cfg: GaeConfig) -> Vec<f64> {
    let h = rewards.len();
    assert_eq!(values.len(), h + 1, "values must have length H + 1");
    let mut adv = vec![0.0; h];
    let mut acc = 0.0;
    for t in (0..h).rev() {
        let delta = rewards[t] + cfg.gamma * values[t + 1] - values[t];
        acc = delta + cfg.gamma * cfg.lam * acc;
        adv[t] = acc;
    }
    adv
}

/// Log-softmax table of one agent recorded on the tape.
#[derive(Clone, Debug)]
pub struct TapePolicy {
    pub logits: Vec<NodeId>,
    /// `log_probs[s * n_actions + a]`
    pub log_probs: Vec<NodeId>,
    pub n_actions: usize,
}

impl TapePolicy {
    pub fn build(tape: &mut Tape, logits: &[NodeId], n_actions: usize) -> Result<Self, TapeError> {
        let mut log_probs = Vec::with_capacity(logits.len());
        let mut shifted = Vec::with_capacity(n_actions);
        let mut exps = Vec::with_capacity(n_actions);
        for row in logits.chunks(n_actions) {
            let m = row.iter().map(|&x| tape.value(x)).fold(f64::NEG_INFINITY, f64::max);
            let mc = tape.constant(m)?;
            shifted.clear();
            exps.clear();
            for &x in row {
                let s = tape.sub(x, mc)?;
                shifted.push(s);
                exps.push(tape.exp(s)?);
            }
            let z = tape.sum(&exps)?;
            let lz = tape.log(z)?;
            for &s in &shifted {
                log_probs.push(tape.sub(s, lz)?);
            }
        }
        Ok(Self { logits: logits.to_vec(), log_probs, n_actions })
    }

    #[inline]
    pub fn log_prob(&self, state: usize, action: usize) -> NodeId {
        self.log_probs[state * self.n_actions + action]
    }
}

/// Inner learning rate as seen by the tape.
#[derive(Copy, Clone, Debug)]
pub enum LrNode {
    Fixed(f64),
    /// Learning rate `exp(node)`, differentiable.
    Log(NodeId),
}

/// Per-step log-probability sums shared by every agent's surrogate.
pub(crate) struct StepNodes {
    /// `w[k][t]`: joint log-probability of step `t`.
    pub w: Vec<Vec<NodeId>>,
    /// `c[k][t]`: joint log-probability of steps `0..=t`.
    pub c: Vec<Vec<NodeId>>,
}

pub(crate) fn step_nodes(
    tape: &mut Tape,
    batch: &TrajectoryBatch,
    policies: &[TapePolicy],
) -> Result<StepNodes, TapeError> {
    let mut w_all = Vec::with_capacity(batch.len());
    let mut c_all = Vec::with_capacity(batch.len());
    let mut lps = Vec::with_capacity(policies.len());
    for traj in &batch.trajectories {
        let h = traj.horizon();
        let mut w = Vec::with_capacity(h);
        let mut c = Vec::with_capacity(h);
        for t in 0..h {
            let s = traj.states[t];
            lps.clear();
            for (agent, pol) in policies.iter().enumerate() {
                lps.push(pol.log_prob(s, traj.action(t, agent)));
            }
            let wt = match lps.len() {
                1 => lps[0],
                2 => tape.add(lps[0], lps[1])?,
                _ => tape.sum(&lps)?,
            };
            w.push(wt);
            let ct = if t == 0 { wt } else { tape.add(c[t - 1], wt)? };
            c.push(ct);
        }
        w_all.push(w);
        c_all.push(c);
    }
    Ok(StepNodes { w: w_all, c: c_all })
}

/// Records `phi_{l+1} = phi_l + alpha * g` for every agent, where `g` is the
/// gradient of the agent's DiCE surrogate
///
/// `sum_k w_k sum_t [box(c_kt) gamma^t r_kt - box(w_kt) gamma^t b_kt]`
///
/// taken with graph creation, so the new parameters stay differentiable with
/// respect to every agent's current parameters. `b` is the linear baseline
/// fitted on this batch.
pub(crate) fn record_inner_update(
    tape: &mut Tape,
    batch: &TrajectoryBatch,
    policies: &[TapePolicy],
    lrs: &[LrNode],
    gamma: f64,
) -> Result<Vec<Vec<NodeId>>, LearningError> {
    let n_agents = policies.len();
    if lrs.len() != n_agents {
        return Err(LearningError::Shape { what: "learning rates", expected: n_agents, got: lrs.len() });
    }
    let nodes = step_nodes(tape, batch, policies)?;
    let mut boxed_c = Vec::new();
    let mut boxed_w = Vec::new();
    for (ck, wk) in nodes.c.iter().zip(&nodes.w) {
        for (&c, &w) in ck.iter().zip(wk) {
            boxed_c.push(tape.magic_box(&[c])?);
            boxed_w.push(tape.magic_box(&[w])?);
        }
    }
    let mut out = Vec::with_capacity(n_agents);
    let mut ids = Vec::with_capacity(boxed_c.len() * 2);
    let mut coefs = Vec::with_capacity(boxed_c.len() * 2);
    for agent in 0..n_agents {
        let baseline = linear_baseline(batch, agent, gamma);
        ids.clear();
        coefs.clear();
        let mut idx = 0;
        for ((traj, &wk), bk) in batch.trajectories.iter().zip(&batch.weights).zip(&baseline) {
            let mut disc = 1.0;
            for t in 0..traj.horizon() {
                let cr = wk * disc * traj.reward(t, agent);
                if cr != 0.0 {
                    ids.push(boxed_c[idx]);
                    coefs.push(cr);
                }
                let cb = -(wk * disc * bk[t]);
                if cb != 0.0 {
                    ids.push(boxed_w[idx]);
                    coefs.push(cb);
                }
                disc *= gamma;
                idx += 1;
            }
        }
        let logits = &policies[agent].logits;
        let grads = if ids.is_empty() {
            None
        } else {
            let surrogate = tape.lin_comb(&ids, &coefs)?;
            Some(tape.grad_nodes(surrogate, logits)?)
        };
        let mut next = Vec::with_capacity(logits.len());
        match (grads, lrs[agent]) {
            (None, _) => next.extend_from_slice(logits),
            (Some(g), LrNode::Fixed(alpha)) => {
                for (&x, &gx) in logits.iter().zip(&g) {
                    next.push(tape.lin_comb(&[x, gx], &[1.0, alpha])?);
                }
            }
            (Some(g), LrNode::Log(log_lr)) => {
                let alpha = tape.exp(log_lr)?;
                for (&x, &gx) in logits.iter().zip(&g) {
                    let step = tape.mul(alpha, gx)?;
                    next.push(tape.add(x, step)?);
                }
            }
        }
        out.push(next);
    }
    Ok(out)
}

/// One policy-gradient step for every agent, values only.
///
/// Runs the same recorded computation as the on-tape update on a scratch
/// tape, so the result is bit-identical to the values of the nodes a chain
/// rollout records.
pub fn inner_loop_update(
    joint: &[PolicyParams],
    batch: &TrajectoryBatch,
    inner_lrs: &[f64],
    gamma: f64,
) -> Result<Vec<PolicyParams>, LearningError> {
    let mut tape = Tape::new();
    let mut policies = Vec::with_capacity(joint.len());
    for p in joint {
        let logits: Vec<NodeId> = p.logits.iter().map(|&x| tape.param(x)).collect();
        policies.push(TapePolicy::build(&mut tape, &logits, p.n_actions)?);
    }
    let lrs: Vec<LrNode> = inner_lrs.iter().map(|&a| LrNode::Fixed(a)).collect();
    let next = record_inner_update(&mut tape, batch, &policies, &lrs, gamma)?;
    Ok(joint
        .iter()
        .zip(next)
        .map(|(p, nodes)| PolicyParams { logits: tape.values(&nodes), ..p.clone() })
        .collect())
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BatchMode {
    Sampled { k: usize },
    /// Full enumeration weighted by trajectory probability.
    Exact,
}

#[derive(Clone, Debug)]
pub struct ChainConfig {
    pub chain_len: usize,
    pub horizon: usize,
    pub batch: BatchMode,
    pub gamma: f64,
    /// Fixed inner learning rate per agent.
    pub inner_lrs: Vec<f64>,
    /// Per-step log learning rates of the meta-agent; overrides its entry
    /// of `inner_lrs` and is recorded as tape parameters.
    pub meta_log_lrs: Option<Vec<f64>>,
    pub meta_agent: usize,
    pub on_tape: bool,
    /// Replace peer parameters on the tape by likelihood fits.
    pub opponent_model: Option<OpponentModelConfig>,
}

#[derive(Clone, Debug)]
pub struct ChainStep {
    /// True joint parameters at this step.
    pub params: Vec<PolicyParams>,
    pub batch: TrajectoryBatch,
    /// Learning rates applied after this step's batch (empty on the last step).
    pub lrs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ChainTape {
    pub tape: Tape,
    pub meta_agent: usize,
    /// Meta-agent's initial logits (tape parameters).
    pub phi0: Vec<NodeId>,
    /// Meta-agent's per-step log learning rates, when learned.
    pub log_lrs: Vec<NodeId>,
    /// `policies[l][agent]` as used for batch `l`.
    pub policies: Vec<Vec<TapePolicy>>,
}

#[derive(Clone, Debug)]
pub struct ChainRollout {
    pub steps: Vec<ChainStep>,
    pub gamma: f64,
    pub tape: Option<ChainTape>,
    /// Final log-likelihood of each opponent fit, per step and peer.
    pub om_log_likelihoods: Vec<Vec<f64>>,
}

impl ChainRollout {
    pub fn chain_len(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn exact(&self) -> bool {
        self.steps.first().map(|s| s.batch.exact).unwrap_or(false)
    }

    /// Mean return of `agent` on every batch `0..=L`.
    pub fn mean_returns(&self, agent: usize) -> Vec<f64> {
        self.steps.iter().map(|s| s.batch.mean_return(agent, self.gamma)).collect()
    }
}

fn draw_batch<R: Rng + ?Sized>(
    game: &MatrixGame,
    joint: &[PolicyParams],
    cfg: &ChainConfig,
    rng: &mut R,
) -> Result<TrajectoryBatch, LearningError> {
    match cfg.batch {
        BatchMode::Sampled { k } => collect_batch(game, joint, k, cfg.horizon, rng),
        BatchMode::Exact => exact_batch(game, joint, cfg.horizon),
    }
}

/// Rolls out `phi_0 -> ... -> phi_L`, collecting `L + 1` batches.
///
/// With `on_tape`, the meta-agent's initial logits become tape parameters
/// and every update is recorded, so later policies are differentiable with
/// respect to them.
pub fn rollout_chain<R: Rng + ?Sized>(
    game: &MatrixGame,
    joint0: &[PolicyParams],
    cfg: &ChainConfig,
    rng: &mut R,
) -> Result<ChainRollout, LearningError> {
    if cfg.chain_len == 0 {
        return Err(LearningError::EmptyChain);
    }
    check_joint(game, joint0)?;
    let n = game.n_agents;
    if cfg.inner_lrs.len() != n {
        return Err(LearningError::Shape { what: "inner learning rates", expected: n, got: cfg.inner_lrs.len() });
    }
    if let Some(l) = &cfg.meta_log_lrs {
        if l.len() != cfg.chain_len {
            return Err(LearningError::Shape { what: "log learning rates", expected: cfg.chain_len, got: l.len() });
        }
    }
    let step_lrs = |l: usize| -> Vec<f64> {
        let mut lrs = cfg.inner_lrs.clone();
        if let Some(log_lrs) = &cfg.meta_log_lrs {
            lrs[cfg.meta_agent] = log_lrs[l].exp();
        }
        lrs
    };

    let mut steps = Vec::with_capacity(cfg.chain_len + 1);
    let mut om_lls = Vec::new();

    if !cfg.on_tape {
        let mut joint = joint0.to_vec();
        for l in 0..=cfg.chain_len {
            let batch = draw_batch(game, &joint, cfg, rng)?;
            if l == cfg.chain_len {
                steps.push(ChainStep { params: joint, batch, lrs: vec![] });
                break;
            }
            let lrs = step_lrs(l);
            let next = inner_loop_update(&joint, &batch, &lrs, cfg.gamma)?;
            steps.push(ChainStep { params: std::mem::replace(&mut joint, next), batch, lrs });
        }
        return Ok(ChainRollout { steps, gamma: cfg.gamma, tape: None, om_log_likelihoods: om_lls });
    }

    let mut tape = Tape::with_capacity(1 << 16);
    let phi0: Vec<NodeId> = joint0[cfg.meta_agent].logits.iter().map(|&x| tape.param(x)).collect();
    let log_lrs: Vec<NodeId> = cfg
        .meta_log_lrs
        .as_ref()
        .map(|v| v.iter().map(|&x| tape.param(x)).collect())
        .unwrap_or_default();
    // Tape view of every agent's current logits.
    let mut view: Vec<Vec<NodeId>> = Vec::with_capacity(n);
    for (agent, p) in joint0.iter().enumerate() {
        if agent == cfg.meta_agent {
            view.push(phi0.clone());
        } else if cfg.opponent_model.is_some() {
            view.push(vec![]);
        } else {
            view.push(p.logits.iter().map(|&x| tape.param(x)).collect());
        }
    }
    let mut joint = joint0.to_vec();
    let mut all_policies = Vec::with_capacity(cfg.chain_len + 1);
    for l in 0..=cfg.chain_len {
        let batch = draw_batch(game, &joint, cfg, rng)?;
        if let Some(om) = &cfg.opponent_model {
            let mut lls = Vec::new();
            for agent in (0..n).filter(|&a| a != cfg.meta_agent) {
                let init = if l == 0 {
                    om.initial_estimate(&joint0[agent])
                } else {
                    PolicyParams { logits: tape.values(&view[agent]), ..joint[agent].clone() }
                };
                let fit = opponent_modeling::fit_opponent(&batch, agent, &init, om)
                    .map_err(|e| LearningError::OpponentModel(e.to_string()))?;
                lls.push(fit.fit_log_likelihood);
                view[agent] = if l == 0 {
                    fit.params_hat.logits.iter().map(|&x| tape.param(x)).collect()
                } else {
                    // keep the derivative of the advanced estimate, move its value to the fit
                    let mut nodes = Vec::with_capacity(view[agent].len());
                    for (&adv, &x) in view[agent].iter().zip(&fit.params_hat.logits) {
                        let delta = tape.constant(x - tape.value(adv))?;
                        nodes.push(tape.add(adv, delta)?);
                    }
                    nodes
                };
            }
            om_lls.push(lls);
        }
        let policies: Vec<TapePolicy> = view
            .iter()
            .zip(&joint)
            .map(|(v, p)| TapePolicy::build(&mut tape, v, p.n_actions))
            .collect::<Result<_, _>>()?;
        if l == cfg.chain_len {
            all_policies.push(policies);
            steps.push(ChainStep { params: joint, batch, lrs: vec![] });
            break;
        }
        let lrs = step_lrs(l);
        let lr_nodes: Vec<LrNode> = (0..n)
            .map(|a| {
                if a == cfg.meta_agent && !log_lrs.is_empty() {
                    LrNode::Log(log_lrs[l])
                } else {
                    LrNode::Fixed(lrs[a])
                }
            })
            .collect();
        let next_nodes = record_inner_update(&mut tape, &batch, &policies, &lr_nodes, cfg.gamma)?;
        let next_joint = if cfg.opponent_model.is_some() {
            inner_loop_update(&joint, &batch, &lrs, cfg.gamma)?
        } else {
            joint
                .iter()
                .zip(&next_nodes)
                .map(|(p, nodes)| PolicyParams { logits: tape.values(nodes), ..p.clone() })
                .collect()
        };
        view = next_nodes;
        all_policies.push(policies);
        steps.push(ChainStep { params: std::mem::replace(&mut joint, next_joint), batch, lrs });
    }
    Ok(ChainRollout {
        steps,
        gamma: cfg.gamma,
        tape: Some(ChainTape { tape, meta_agent: cfg.meta_agent, phi0, log_lrs, policies: all_policies }),
        om_log_likelihoods: om_lls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::games::{make_ipd, MatrixGame};
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_joint(game: &MatrixGame, seed: u64) -> Vec<PolicyParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..game.n_agents)
            .map(|k| {
                let n = game.n_states() * game.n_actions;
                PolicyParams::from_logits(k, game.n_states(), game.n_actions, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            })
            .collect()
    }

    fn chain_cfg(l: usize, k: usize, h: usize, on_tape: bool) -> ChainConfig {
        ChainConfig {
            chain_len: l,
            horizon: h,
            batch: BatchMode::Sampled { k },
            gamma: 0.96,
            inner_lrs: vec![1.0, 0.3],
            meta_log_lrs: None,
            meta_agent: 0,
            on_tape,
            opponent_model: None,
        }
    }

    #[test]
    fn batch_shapes_and_rewards() {
        let g = make_ipd();
        let j = random_joint(&g, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = collect_batch(&g, &j, 4, 150, &mut rng).unwrap();
        assert_eq!(b.len(), 4);
        for t in &b.trajectories {
            assert_eq!(t.horizon(), 150);
            assert_eq!(t.states.len(), 151);
            assert!(t.rewards.iter().all(|r| [0.5, -0.5, 1.5, -1.5].contains(r)));
        }
        let sharp: Vec<_> = (0..2).map(|k| PolicyParams::from_logits(k, 5, 2, [60.0, -60.0].repeat(5))).collect();
        let b = collect_batch(&g, &sharp, 5, 10, &mut rng).unwrap();
        assert!(b.trajectories.windows(2).all(|w| w[0] == w[1]));
        assert!(collect_batch(&g, &j, 0, 3, &mut rng).is_err());
    }

    #[test]
    fn discounted_return_examples() {
        let g = MatrixGame::new("one", 1, 1, vec![1.0], 3).unwrap();
        let t = Trajectory::from_joint(&g, vec![0, 0, 0]);
        assert_eq!(discounted_return(&t, 0.5, 0, 0), 1.75);
        assert_eq!(discounted_return(&t, 0.0, 0, 1), 1.0);
        let ipd = make_ipd();
        let cc = Trajectory::from_joint(&ipd, vec![0, 0]);
        assert!((discounted_return(&cc, 0.96, 0, 0) - 0.98).abs() < 1e-15);
        assert!((discounted_return(&cc, 0.96, 1, 0) - 0.98).abs() < 1e-15);
    }

    #[test]
    fn gae_identities() {
        let r = [0.5, -1.5, 1.5, 0.5];
        let v = [0.3, -0.2, 0.7, 0.1, 0.0];
        let g = 0.9;
        let a1 = gae_advantages(&r, &v, GaeConfig { gamma: g, lam: 1.0 });
        let a0 = gae_advantages(&r, &v, GaeConfig { gamma: g, lam: 0.0 });
        let ipd = make_ipd();
        // joint indices matching rewards of agent 0: (C,C)=0.5, (C,D)=-1.5, (D,C)=1.5
        let t = Trajectory::from_joint(&ipd, vec![0, 1, 2, 0]);
        for s in 0..4 {
            assert!((a1[s] - (discounted_return(&t, g, 0, s) - v[s])).abs() < 1e-12);
            assert!((a0[s] - (r[s] + g * v[s + 1] - v[s])).abs() < 1e-12);
        }
        assert!(gae_advantages(&[0.0; 3], &[0.0; 4], GaeConfig { gamma: g, lam: 0.7 }).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn baseline_fits_constants() {
        // returns-to-go identically c: single reward c at t=0 with gamma=0 and H=1
        let g = MatrixGame::new("c", 1, 1, vec![0.8], 1).unwrap();
        let j = vec![PolicyParams::for_game(&g, 0)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = collect_batch(&g, &j, 6, 1, &mut rng).unwrap();
        let v = linear_baseline(&b, 0, 0.0);
        for row in v {
            assert!((row[0] - 0.8).abs() < 1e-5);
        }
    }

    #[test]
    fn inner_update_zero_lr_is_identity() {
        let g = make_ipd();
        let j = random_joint(&g, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = collect_batch(&g, &j, 4, 5, &mut rng).unwrap();
        let next = inner_loop_update(&j, &b, &[0.0, 0.0], 0.96).unwrap();
        assert_eq!(next, j);
    }

    #[test]
    fn exact_bandit_update_matches_closed_form() {
        let g = MatrixGame::new("bandit", 1, 2, vec![1.0, -0.5], 1).unwrap();
        let theta = -0.3;
        let j = vec![PolicyParams::from_logits(0, 3, 2, vec![theta, 0.0, 0.0, 0.0, 0.0, 0.0])];
        let b = exact_batch(&g, &j, 1).unwrap();
        let next = inner_loop_update(&j, &b, &[1.0], 0.9).unwrap();
        let p = 1.0 / (1.0 + (-theta).exp());
        let want = p * (1.0 - p) * 1.5;
        assert!((next[0].logits[0] - theta - want).abs() < 1e-12);
        assert!((next[0].logits[1] + want).abs() < 1e-12);
        let orc = oracle::exact_inner_update(&g, &j, &[1.0], 1, 0.9).unwrap();
        for (a, b) in next[0].logits.iter().zip(&orc[0].logits) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn peer_update_depends_on_meta_agent() {
        let g = make_ipd();
        let j = random_joint(&g, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let chain = rollout_chain(&g, &j, &chain_cfg(1, 8, 4, true), &mut rng).unwrap();
        let mut ct = chain.tape.unwrap();
        let peer_next = ct.policies[1][1].logits.clone();
        let phi0 = ct.phi0.clone();
        let any_nonzero = peer_next.iter().any(|&x| {
            let g = ct.tape.grad_values(x, &phi0).unwrap();
            g.iter().any(|v| *v != 0.0)
        });
        assert!(any_nonzero);
    }

    #[test]
    fn rollout_counts_determinism_and_recomputability() {
        let g = make_ipd();
        let j = random_joint(&g, 6);
        for on_tape in [false, true] {
            let cfg = chain_cfg(3, 4, 5, on_tape);
            let a = rollout_chain(&g, &j, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
            let b = rollout_chain(&g, &j, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
            assert_eq!(a.steps.len(), 4);
            for (x, y) in a.steps.iter().zip(&b.steps) {
                assert_eq!(x.params, y.params);
                assert_eq!(x.batch, y.batch);
            }
            for w in a.steps.windows(2) {
                let next = inner_loop_update(&w[0].params, &w[0].batch, &w[0].lrs, 0.96).unwrap();
                assert_eq!(next, w[1].params);
            }
        }
        let one = rollout_chain(&g, &j, &chain_cfg(1, 2, 2, false), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(one.steps.len(), 2);
    }

    #[test]
    fn tape_and_value_rollouts_agree() {
        let g = make_ipd();
        let j = random_joint(&g, 8);
        let a = rollout_chain(&g, &j, &chain_cfg(2, 4, 5, false), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = rollout_chain(&g, &j, &chain_cfg(2, 4, 5, true), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert_eq!(x.params, y.params);
        }
    }
}
