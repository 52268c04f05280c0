//! The outer loop: meta-gradients along a chain of joint policies, gradient
//! aggregation, and meta-training / meta-testing.
//!
//! For the meta-agent `i` and objective `sum_{m<L} E[G_i(tau_{m+1})]`, the
//! gradient with respect to `phi^i_0` has three parts:
//!
//! * current policy: scores of the meta-agent's actions in batch 0,
//! * own learning: scores of its actions in batches `1..=L`, differentiated
//!   through its recorded inner updates,
//! * peer learning: scores of every peer's actions in batches `1..=L`,
//!   differentiated through the peers' recorded inner updates.
//!
//! Within a batch the scores are weighted by GAE advantages. Scores of an
//! earlier batch `l' <= m` are weighted by the baselined return of batch
//! `m + 1`.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::games::MatrixGame;
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::{MetricRow, Phase};
use crate::harness::parallel::Runner;
use crate::learning::{
    self, gae_advantages, BatchMode, ChainConfig, ChainRollout, GaeConfig, LearningError, LinearBaseline,
    TrajectoryBatch,
};
use crate::opponent_modeling::{OmInit, OpponentModelConfig};
use crate::policies::{PolicyParams, Population, Split};
use crate::tape::{NodeId, Tape, TapeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaError {
    #[error(transparent)]
    Learning(#[from] LearningError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("chain was rolled out without a tape; the meta-gradient needs one")]
    MissingTape,
    #[error("non-finite meta-gradient at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("gradient aggregation needs at least one non-empty vector of equal lengths")]
    BadAggregate,
    #[error("{0}")]
    Setup(String),
    #[error("worker failed: {0}")]
    Worker(String),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    MetaMapg,
    MetaPg,
    NoOwnLearning,
    Reinforce,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::MetaMapg => "meta_mapg",
            Method::MetaPg => "meta_pg",
            Method::NoOwnLearning => "no_own_learning",
            Method::Reinforce => "reinforce",
        }
    }

    pub fn mask(self) -> TermMask {
        match self {
            Method::MetaMapg => TermMask { current: true, own: true, peer: true },
            Method::MetaPg => TermMask { current: true, own: true, peer: false },
            Method::NoOwnLearning => TermMask { current: true, own: false, peer: true },
            Method::Reinforce => TermMask { current: true, own: false, peer: false },
        }
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "meta_mapg" => Method::MetaMapg,
            "meta_pg" => Method::MetaPg,
            "no_own_learning" => Method::NoOwnLearning,
            "reinforce" => Method::Reinforce,
            _ => return Err(format!("unknown method {s:?}")),
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum EstimatorPath {
    /// One backward pass per term over explicit score-function objectives.
    ScoreFunction,
    /// A single backward pass through a magic-box surrogate.
    DiceAutodiff,
}

impl EstimatorPath {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorPath::ScoreFunction => "score_function",
            EstimatorPath::DiceAutodiff => "dice_autodiff",
        }
    }
}

impl FromStr for EstimatorPath {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "score_function" => EstimatorPath::ScoreFunction,
            "dice_autodiff" => EstimatorPath::DiceAutodiff,
            _ => return Err(format!("unknown estimator path {s:?}")),
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct MethodSpec {
    pub method: Method,
    pub path: EstimatorPath,
}

/// Which of the three terms enter the gradient.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TermMask {
    pub current: bool,
    pub own: bool,
    pub peer: bool,
}

/// Baseline subtracted from later-batch returns when they weight the
/// scores of earlier batches.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum CrossBaseline {
    /// The value fitted on the later batch at the start state.
    FittedValue,
    /// Raw discounted returns.
    None,
}

impl CrossBaseline {
    pub fn as_str(self) -> &'static str {
        match self {
            CrossBaseline::FittedValue => "fitted_value",
            CrossBaseline::None => "none",
        }
    }
}

impl FromStr for CrossBaseline {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "fitted_value" => CrossBaseline::FittedValue,
            "none" => CrossBaseline::None,
            _ => return Err(format!("unknown cross baseline {s:?}")),
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct MetaGradOptions {
    pub gae: GaeConfig,
    pub cross_baseline: CrossBaseline,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaTerms {
    pub current_policy: Vec<f64>,
    pub own_learning: Vec<f64>,
    pub peer_learning: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaGradient {
    /// Aligned with the meta-agent's initial logits.
    pub flat: Vec<f64>,
    pub terms: MetaTerms,
    /// Gradient for the meta-agent's per-step log inner learning rates
    /// (empty when they are not learned).
    pub lr_grad: Vec<f64>,
}

impl MetaGradient {
    pub fn is_finite(&self) -> bool {
        self.flat.iter().chain(&self.lr_grad).all(|x| x.is_finite())
    }
}

/// Mean discounted return of `agent` on batch `l + 1`, for `l = 0..L-1`.
pub fn meta_value_estimate(chain: &ChainRollout, agent: usize) -> Vec<f64> {
    chain.steps[1..].iter().map(|s| s.batch.mean_return(agent, chain.gamma)).collect()
}

/// Per-(batch, agent) coefficients on log-probability table entries.
struct Coefficients {
    /// `score[b][agent][s * A + a]`
    score: Vec<Vec<Vec<f64>>>,
}

fn advantages(batch: &TrajectoryBatch, agent: usize, gae: GaeConfig) -> (Vec<Vec<f64>>, f64, f64) {
    let fit = LinearBaseline::fit(batch, agent, gae.gamma);
    let mut adv = Vec::with_capacity(batch.len());
    let mut start_adv = 0.0;
    let mut start_ret = 0.0;
    for (traj, &w) in batch.trajectories.iter().zip(&batch.weights) {
        let v = fit.values(traj);
        let a = gae_advantages(&traj.agent_rewards(agent), &v, gae);
        start_ret += w * learning::discounted_return(traj, gae.gamma, agent, 0);
        start_adv += w * (learning::discounted_return(traj, gae.gamma, agent, 0) - v[0]);
        adv.push(a);
    }
    (adv, start_adv, start_ret)
}

fn add_in_batch(coef: &mut [f64], batch: &TrajectoryBatch, agent: usize, n_actions: usize, adv: &[Vec<f64>], gamma: f64) {
    for ((traj, &w), a) in batch.trajectories.iter().zip(&batch.weights).zip(adv) {
        let mut disc = 1.0;
        for t in 0..traj.horizon() {
            coef[traj.states[t] * n_actions + traj.action(t, agent)] += w * disc * a[t];
            disc *= gamma;
        }
    }
}

fn add_counts(coef: &mut [f64], batch: &TrajectoryBatch, agent: usize, n_actions: usize, scale: f64) {
    for (traj, &w) in batch.trajectories.iter().zip(&batch.weights) {
        for t in 0..traj.horizon() {
            coef[traj.states[t] * n_actions + traj.action(t, agent)] += scale * w;
        }
    }
}

fn coefficients(chain: &ChainRollout, agent_i: usize, reinforce: bool, opts: &MetaGradOptions) -> Coefficients {
    let n_agents = chain.steps[0].params.len();
    let na = chain.steps[0].params[0].n_actions;
    let size = chain.steps[0].params[0].logits.len();
    let mut score = vec![vec![vec![0.0; size]; n_agents]; chain.steps.len()];
    let gamma = opts.gae.gamma;
    if reinforce {
        let batch = &chain.steps[0].batch;
        let (adv, _, _) = advantages(batch, agent_i, opts.gae);
        add_in_batch(&mut score[0][agent_i], batch, agent_i, na, &adv, gamma);
        return Coefficients { score };
    }
    for m in 0..chain.chain_len() {
        let batch = &chain.steps[m + 1].batch;
        let (adv, start_adv, start_ret) = advantages(batch, agent_i, opts.gae);
        for agent in 0..n_agents {
            add_in_batch(&mut score[m + 1][agent], batch, agent, na, &adv, gamma);
        }
        let c = match opts.cross_baseline {
            CrossBaseline::FittedValue => start_adv,
            CrossBaseline::None => start_ret,
        };
        for lp in 0..=m {
            let earlier = &chain.steps[lp].batch;
            for agent in 0..n_agents {
                if lp == 0 && agent != agent_i {
                    // peers' initial parameters do not depend on phi^i_0
                    continue;
                }
                add_counts(&mut score[lp][agent], earlier, agent, na, c);
            }
        }
    }
    Coefficients { score }
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
enum Family {
    Current,
    Own,
    Peer,
}

fn family_entries(coef: &Coefficients, agent_i: usize, fam: Family) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for b in 0..coef.score.len() {
        for agent in 0..coef.score[b].len() {
            let belongs = match fam {
                Family::Current => b == 0 && agent == agent_i,
                Family::Own => b >= 1 && agent == agent_i,
                Family::Peer => b >= 1 && agent != agent_i,
            };
            if belongs {
                out.push((b, agent));
            }
        }
    }
    out
}

fn score_objective(
    tape: &mut Tape,
    ct_policies: &[Vec<learning::TapePolicy>],
    coef: &Coefficients,
    entries: &[(usize, usize)],
) -> Result<Option<NodeId>, TapeError> {
    let mut ids = Vec::new();
    let mut cs = Vec::new();
    for &(b, agent) in entries {
        for (e, &c) in coef.score[b][agent].iter().enumerate() {
            if c != 0.0 {
                ids.push(ct_policies[b][agent].log_probs[e]);
                cs.push(c);
            }
        }
    }
    if ids.is_empty() {
        return Ok(None);
    }
    tape.lin_comb(&ids, &cs).map(Some)
}

/// Magic-box version of the same objective: every step's log-probability
/// of the family enters through its own box, and every earlier-batch score
/// through one box over the batch's log-probability sum.
fn dice_objective(
    tape: &mut Tape,
    chain: &ChainRollout,
    ct_policies: &[Vec<learning::TapePolicy>],
    agent_i: usize,
    reinforce: bool,
    opts: &MetaGradOptions,
    fam: Family,
) -> Result<Option<NodeId>, TapeError> {
    let n_agents = chain.steps[0].params.len();
    let gamma = opts.gae.gamma;
    let mut ids = Vec::new();
    let mut cs = Vec::new();
    let wanted = |b: usize, agent: usize| match fam {
        Family::Current => b == 0 && agent == agent_i,
        Family::Own => b >= 1 && agent == agent_i,
        Family::Peer => b >= 1 && agent != agent_i,
    };
    let in_batch = |tape: &mut Tape, b: usize, adv: &[Vec<f64>], ids: &mut Vec<NodeId>, cs: &mut Vec<f64>| -> Result<(), TapeError> {
        let batch = &chain.steps[b].batch;
        for agent in (0..n_agents).filter(|&a| wanted(b, a)) {
            let pol = &ct_policies[b][agent];
            for ((traj, &w), a) in batch.trajectories.iter().zip(&batch.weights).zip(adv) {
                let mut disc = 1.0;
                for t in 0..traj.horizon() {
                    let c = w * disc * a[t];
                    if c != 0.0 {
                        ids.push(tape.magic_box(&[pol.log_prob(traj.states[t], traj.action(t, agent))])?);
                        cs.push(c);
                    }
                    disc *= gamma;
                }
            }
        }
        Ok(())
    };
    if reinforce {
        let (adv, _, _) = advantages(&chain.steps[0].batch, agent_i, opts.gae);
        in_batch(tape, 0, &adv, &mut ids, &mut cs)?;
    } else {
        for m in 0..chain.chain_len() {
            let (adv, start_adv, start_ret) = advantages(&chain.steps[m + 1].batch, agent_i, opts.gae);
            in_batch(tape, m + 1, &adv, &mut ids, &mut cs)?;
            let c = match opts.cross_baseline {
                CrossBaseline::FittedValue => start_adv,
                CrossBaseline::None => start_ret,
            };
            if c == 0.0 {
                continue;
            }
            for lp in 0..=m {
                for agent in (0..n_agents).filter(|&a| wanted(lp, a)) {
                    let batch = &chain.steps[lp].batch;
                    let pol = &ct_policies[lp][agent];
                    let mut lps = Vec::new();
                    let mut ws = Vec::new();
                    for (traj, &w) in batch.trajectories.iter().zip(&batch.weights) {
                        for t in 0..traj.horizon() {
                            lps.push(pol.log_prob(traj.states[t], traj.action(t, agent)));
                            ws.push(w);
                        }
                    }
                    let d = tape.lin_comb(&lps, &ws)?;
                    ids.push(tape.magic_box(&[d])?);
                    cs.push(c);
                }
            }
        }
    }
    if ids.is_empty() {
        return Ok(None);
    }
    tape.lin_comb(&ids, &cs).map(Some)
}

fn add_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Meta-gradient of the meta-agent recorded on `chain`'s tape.
///
/// The tape is restored to its previous length before returning, so calls
/// are repeatable.
pub fn meta_gradient(chain: &mut ChainRollout, spec: MethodSpec, opts: &MetaGradOptions) -> Result<MetaGradient, MetaError> {
    let reinforce = spec.method == Method::Reinforce;
    meta_gradient_masked(chain, spec.path, spec.method.mask(), reinforce, opts)
}

/// As [`meta_gradient`] with an explicit choice of terms. `reinforce`
/// replaces the chain objective by the plain return of batch 0.
pub fn meta_gradient_masked(
    chain: &mut ChainRollout,
    path: EstimatorPath,
    mask: TermMask,
    reinforce: bool,
    opts: &MetaGradOptions,
) -> Result<MetaGradient, MetaError> {
    let mut ct = chain.tape.take().ok_or(MetaError::MissingTape)?;
    let result = meta_gradient_on(&mut ct, chain, path, mask, reinforce, opts);
    chain.tape = Some(ct);
    result
}

fn meta_gradient_on(
    ct: &mut learning::ChainTape,
    chain: &ChainRollout,
    path: EstimatorPath,
    mask: TermMask,
    reinforce: bool,
    opts: &MetaGradOptions,
) -> Result<MetaGradient, MetaError> {
    let agent_i = ct.meta_agent;
    let n_phi = ct.phi0.len();
    let mut wrt = ct.phi0.clone();
    wrt.extend_from_slice(&ct.log_lrs);
    let zeros = vec![0.0; wrt.len()];
    let mark = ct.tape.mark();
    let tape = &mut ct.tape;
    let policies = &ct.policies;

    let families = [
        (Family::Current, mask.current),
        (Family::Own, mask.own),
        (Family::Peer, mask.peer),
    ];
    let mut parts: Vec<Vec<f64>> = Vec::with_capacity(3);
    let mut single = None;
    let outcome = (|| -> Result<(), MetaError> {
        match path {
            EstimatorPath::ScoreFunction => {
                let coef = coefficients(chain, agent_i, reinforce, opts);
                for (fam, on) in families {
                    if !on {
                        parts.push(zeros.clone());
                        continue;
                    }
                    let entries = family_entries(&coef, agent_i, fam);
                    let g = match score_objective(tape, policies, &coef, &entries)? {
                        Some(obj) => tape.grad_values(obj, &wrt)?,
                        None => zeros.clone(),
                    };
                    parts.push(g);
                }
            }
            EstimatorPath::DiceAutodiff => {
                let mut objs = Vec::new();
                for (fam, on) in families {
                    if !on {
                        parts.push(zeros.clone());
                        continue;
                    }
                    match dice_objective(tape, chain, policies, agent_i, reinforce, opts, fam)? {
                        Some(obj) => {
                            parts.push(tape.grad_values(obj, &wrt)?);
                            objs.push(obj);
                        }
                        None => parts.push(zeros.clone()),
                    }
                }
                if !objs.is_empty() {
                    let total = tape.sum(&objs)?;
                    single = Some(tape.grad_values(total, &wrt)?);
                }
            }
        }
        Ok(())
    })();
    tape.truncate(mark);
    outcome?;

    let summed = add_vec(&add_vec(&parts[0], &parts[1]), &parts[2]);
    let full = single.unwrap_or(summed);
    Ok(MetaGradient {
        flat: full[..n_phi].to_vec(),
        terms: MetaTerms {
            current_policy: parts[0][..n_phi].to_vec(),
            own_learning: parts[1][..n_phi].to_vec(),
            peer_learning: parts[2][..n_phi].to_vec(),
        },
        lr_grad: full[n_phi..].to_vec(),
    })
}

/// Policy gradient of `agent`'s return on one batch, in closed form for a
/// softmax table: `sum_k w_k sum_t gamma^t A_kt (onehot(a_t) - pi(.|s_t))`.
pub fn batch_policy_gradient(batch: &TrajectoryBatch, params: &PolicyParams, agent: usize, gae: GaeConfig) -> Vec<f64> {
    let (adv, _, _) = advantages(batch, agent, gae);
    let na = params.n_actions;
    let mut coef = vec![0.0; params.logits.len()];
    add_in_batch(&mut coef, batch, agent, na, &adv, gae.gamma);
    let mut g = vec![0.0; params.logits.len()];
    for s in 0..params.n_states {
        let p = params.action_probs(s);
        let row_total: f64 = coef[s * na..(s + 1) * na].iter().sum();
        for a in 0..na {
            g[s * na + a] = coef[s * na + a] - row_total * p[a];
        }
    }
    g
}

/// Gradient surgery: each gradient is projected off every gradient it
/// conflicts with, visited in a seeded random order. Returns the projected
/// vectors.
pub fn pcgrad_project<R: Rng + ?Sized>(grads: &[Vec<f64>], rng: &mut R) -> Result<Vec<Vec<f64>>, MetaError> {
    let n = grads.first().map(|g| g.len()).unwrap_or(0);
    if grads.is_empty() || n == 0 || grads.iter().any(|g| g.len() != n) {
        return Err(MetaError::BadAggregate);
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut out = Vec::with_capacity(grads.len());
    for (i, gi) in grads.iter().enumerate() {
        let mut g = gi.clone();
        let mut order: Vec<usize> = (0..grads.len()).filter(|&j| j != i).collect();
        order.shuffle(rng);
        for j in order {
            let gj = &grads[j];
            let d = dot(&g, gj);
            let nn = dot(gj, gj);
            if d < 0.0 && nn > 0.0 {
                let f = d / nn;
                for (x, y) in g.iter_mut().zip(gj) {
                    *x -= f * y;
                }
            }
        }
        out.push(g);
    }
    Ok(out)
}

/// Mean of the [`pcgrad_project`] vectors.
pub fn pcgrad<R: Rng + ?Sized>(grads: &[Vec<f64>], rng: &mut R) -> Result<Vec<f64>, MetaError> {
    let projected = pcgrad_project(grads, rng)?;
    let k = projected.len() as f64;
    let mut out = vec![0.0; projected[0].len()];
    for g in &projected {
        for (o, x) in out.iter_mut().zip(g) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|x| *x /= k);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaParams {
    pub phi0: PolicyParams,
    pub log_inner_lrs: Option<Vec<f64>>,
}

impl MetaParams {
    /// Flat vector `[logits..., log_lrs...]`.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.phi0.logits.clone();
        if let Some(l) = &self.log_inner_lrs {
            v.extend_from_slice(l);
        }
        v
    }
}

/// Gradient ascent step on the logits and, when learned, the log inner
/// learning rates.
pub fn outer_update(params: &MetaParams, grad: &[f64], beta: f64) -> Result<MetaParams, MetaError> {
    let n = params.phi0.logits.len();
    let m = params.log_inner_lrs.as_ref().map(|l| l.len()).unwrap_or(0);
    if grad.len() != n + m {
        return Err(MetaError::BadAggregate);
    }
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(MetaError::NonFinite { iteration: 0 });
    }
    let mut next = params.clone();
    for (x, g) in next.phi0.logits.iter_mut().zip(&grad[..n]) {
        *x += beta * g;
    }
    if let Some(l) = next.log_inner_lrs.as_mut() {
        for (x, g) in l.iter_mut().zip(&grad[n..]) {
            *x += beta * g;
        }
    }
    Ok(next)
}

/// Random stream for one unit of work, keyed by the master seed and a
/// structured job key.
pub fn job_rng(master_seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &k in key {
        h ^= k.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = splitmix(h);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(h);
    rng
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// job-key tags
const TAG_SAMPLE: u64 = 1;
const TAG_TRAIN_CHAIN: u64 = 2;
const TAG_PCGRAD: u64 = 3;
const TAG_VAL_CHAIN: u64 = 4;
const TAG_TEST_CHAIN: u64 = 5;

/// Everything a run needs besides the seed: config, game and population.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub game: MatrixGame,
    pub population: Population,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, MetaError> {
        let game = cfg.build_game().map_err(MetaError::Setup)?;
        let population = cfg.build_population(&game).map_err(MetaError::Setup)?;
        Ok(Self { cfg, game, population })
    }

    pub fn initial_params(&self) -> MetaParams {
        let phi0 = PolicyParams::for_game(&self.game, 0);
        let log_inner_lrs = self.cfg.learn_inner_lrs.then(|| vec![self.cfg.inner_lr.ln(); self.cfg.l]);
        MetaParams { phi0, log_inner_lrs }
    }

    fn chain_config(&self, params: &MetaParams, on_tape: bool, om: bool) -> ChainConfig {
        let c = &self.cfg;
        let mut inner_lrs = vec![c.peer_inner_lr; self.game.n_agents];
        inner_lrs[0] = c.inner_lr;
        ChainConfig {
            chain_len: c.l,
            horizon: c.h,
            batch: BatchMode::Sampled { k: c.k },
            gamma: c.gamma,
            inner_lrs,
            meta_log_lrs: params.log_inner_lrs.clone(),
            meta_agent: 0,
            on_tape,
            opponent_model: om.then(|| OpponentModelConfig {
                lr_eta: c.om_lr,
                tol: c.om_tol,
                max_iters: c.om_max_iters,
                init: OmInit::Uniform,
            }),
        }
    }

    fn grad_options(&self) -> MetaGradOptions {
        MetaGradOptions {
            gae: GaeConfig { gamma: self.cfg.gamma, lam: self.cfg.gae_lambda },
            cross_baseline: self.cfg.cross_baseline,
        }
    }

    /// Joint initial parameters: the meta-agent followed by peers drawn
    /// from population members.
    fn joint(&self, params: &MetaParams, members: &[usize]) -> Vec<PolicyParams> {
        let mut joint = vec![params.phi0.clone()];
        for (k, &m) in members.iter().enumerate() {
            let mut p = self.population.members[m].params.clone();
            p.agent_id = k + 1;
            joint.push(p);
        }
        joint
    }

    fn peers_per_chain(&self) -> usize {
        self.game.n_agents - 1
    }
}

/// Outcome of one chain: returns along the chain and, during training, the
/// meta-gradient.
#[derive(Clone, Debug)]
struct ChainResult {
    peer_id: usize,
    self_returns: Vec<f64>,
    peer_returns: Vec<f64>,
    grad: Option<Vec<f64>>,
}

fn summarize(self_returns: &[f64]) -> (f64, f64) {
    let post = &self_returns[1..];
    let auc: f64 = post.iter().sum();
    (auc / post.len() as f64, auc)
}

fn peer_mean_returns(chain: &ChainRollout, n_agents: usize) -> Vec<f64> {
    let per: Vec<Vec<f64>> = (1..n_agents).map(|a| chain.mean_returns(a)).collect();
    (0..chain.steps.len())
        .map(|l| per.iter().map(|r| r[l]).sum::<f64>() / per.len() as f64)
        .collect()
}

fn run_train_chain(exp: &Experiment, params: &MetaParams, members: &[usize], rng: &mut ChaCha8Rng) -> Result<ChainResult, MetaError> {
    let cfg = &exp.cfg;
    let joint = exp.joint(params, members);
    let reinforce = cfg.method == Method::Reinforce;
    let opts = exp.grad_options();
    let (chain, grad) = if reinforce {
        let chain = learning::rollout_chain(&exp.game, &joint, &exp.chain_config(params, false, false), rng)?;
        let mut g = batch_policy_gradient(&chain.steps[0].batch, &chain.steps[0].params[0], 0, opts.gae);
        if let Some(l) = &params.log_inner_lrs {
            g.extend(std::iter::repeat_n(0.0, l.len()));
        }
        (chain, g)
    } else {
        let mut chain =
            learning::rollout_chain(&exp.game, &joint, &exp.chain_config(params, true, cfg.opponent_modeling), rng)?;
        let mg = meta_gradient(&mut chain, MethodSpec { method: cfg.method, path: cfg.estimator_path }, &opts)?;
        let mut g = mg.flat;
        g.extend(mg.lr_grad);
        chain.tape = None;
        (chain, g)
    };
    Ok(ChainResult {
        peer_id: members[0],
        self_returns: chain.mean_returns(0),
        peer_returns: peer_mean_returns(&chain, exp.game.n_agents),
        grad: Some(grad),
    })
}

fn run_eval_chain(exp: &Experiment, params: &MetaParams, members: &[usize], rng: &mut ChaCha8Rng) -> Result<ChainResult, MetaError> {
    let joint = exp.joint(params, members);
    let chain = learning::rollout_chain(&exp.game, &joint, &exp.chain_config(params, false, false), rng)?;
    Ok(ChainResult {
        peer_id: members[0],
        self_returns: chain.mean_returns(0),
        peer_returns: peer_mean_returns(&chain, exp.game.n_agents),
        grad: None,
    })
}

/// Peer groups for evaluation: member `i` of the split is the first peer of
/// chain `i`; extra peers (more than two agents) are drawn from the split.
fn eval_groups(exp: &Experiment, split: Split, limit: usize, seed: u64, tag: u64) -> Vec<Vec<usize>> {
    let ids = exp.population.split(split);
    let n = if limit == 0 { ids.len() } else { limit.min(ids.len()) };
    let extra = exp.peers_per_chain() - 1;
    (0..n)
        .map(|i| {
            let mut g = vec![ids[i]];
            if extra > 0 {
                let mut rng = job_rng(exp.cfg.master_seed, &[seed, tag, i as u64, u64::MAX]);
                for _ in 0..extra {
                    g.push(*ids.choose(&mut rng).expect("non-empty split"));
                }
            }
            g
        })
        .collect()
}

fn collect<T>(results: Vec<Result<Result<T, MetaError>, String>>) -> Result<Vec<T>, MetaError> {
    results
        .into_iter()
        .map(|r| r.map_err(MetaError::Worker).and_then(|x| x))
        .collect()
}

fn evaluate(
    exp: &Experiment,
    params: &MetaParams,
    split: Split,
    limit: usize,
    seed: u64,
    tag: u64,
    iteration: usize,
    runner: &Runner,
) -> Result<Vec<ChainResult>, MetaError> {
    let groups = eval_groups(exp, split, limit, seed, tag);
    let master = exp.cfg.master_seed;
    collect(runner.map(groups.len(), |i| {
        let mut rng = job_rng(master, &[seed, tag, iteration as u64, i as u64]);
        run_eval_chain(exp, params, &groups[i], &mut rng)
    }))
}

fn row(exp: &Experiment, seed: u64, phase: Phase, iteration: Option<usize>, peer_id: usize, step: Option<usize>, self_r: f64, peer_r: f64, auc: Option<f64>) -> MetricRow {
    MetricRow {
        run_id: exp.cfg.run_id.clone(),
        method: exp.cfg.method_label(),
        seed,
        phase,
        iteration,
        peer_id: Some(peer_id),
        chain_step: step,
        mean_return_self: self_r,
        mean_return_peers: peer_r,
        auc,
    }
}

fn validation_score(
    exp: &Experiment,
    params: &MetaParams,
    seed: u64,
    iteration: usize,
    runner: &Runner,
    rows: &mut Vec<MetricRow>,
) -> Result<f64, MetaError> {
    let res = evaluate(exp, params, Split::Val, exp.cfg.val_peers, seed, TAG_VAL_CHAIN, iteration, runner)?;
    let mut total = 0.0;
    for r in &res {
        let (mean, auc) = summarize(&r.self_returns);
        let (pmean, _) = summarize(&r.peer_returns);
        total += auc;
        rows.push(row(exp, seed, Phase::Val, Some(iteration), r.peer_id, None, mean, pmean, Some(auc)));
    }
    Ok(total / res.len() as f64)
}

fn train_row(exp: &Experiment, seed: u64, it: usize, r: &ChainResult) -> MetricRow {
    let (mean, auc) = summarize(&r.self_returns);
    let (pmean, _) = summarize(&r.peer_returns);
    row(exp, seed, Phase::Train, Some(it), r.peer_id, None, mean, pmean, Some(auc))
}

/// One synchronous iteration: every chain sees the same parameters, and
/// the gradients are aggregated after all chains finish.
fn sync_iteration(
    exp: &Experiment,
    params: &MetaParams,
    groups: &[Vec<usize>],
    seed: u64,
    it: usize,
    runner: &Runner,
    rows: &mut Vec<MetricRow>,
) -> Result<MetaParams, MetaError> {
    let cfg = &exp.cfg;
    let master = cfg.master_seed;
    let results = collect(runner.map(groups.len(), |p| {
        let mut rng = job_rng(master, &[seed, TAG_TRAIN_CHAIN, it as u64, p as u64]);
        run_train_chain(exp, params, &groups[p], &mut rng)
    }))?;
    let mut grads = Vec::with_capacity(results.len());
    for r in results {
        rows.push(train_row(exp, seed, it, &r));
        let g = r.grad.expect("training chains carry a gradient");
        if g.iter().any(|x| !x.is_finite()) {
            return Err(MetaError::NonFinite { iteration: it });
        }
        grads.push(g);
    }
    let agg = if cfg.pcgrad {
        pcgrad(&grads, &mut job_rng(master, &[seed, TAG_PCGRAD, it as u64]))?
    } else {
        let n = grads.len() as f64;
        grads.iter().fold(vec![0.0; grads[0].len()], |acc, g| add_vec(&acc, g)).into_iter().map(|x| x / n).collect()
    };
    outer_update(params, &agg, cfg.outer_lr)
}

/// One asynchronous iteration: each chain reads the shared parameters when
/// it starts and applies its own gradient (scaled by `1 / peers_per_batch`)
/// as soon as it finishes. Results depend on thread timing.
fn async_iteration(
    exp: &Experiment,
    params: &MetaParams,
    groups: &[Vec<usize>],
    seed: u64,
    it: usize,
    runner: &Runner,
    rows: &mut Vec<MetricRow>,
) -> Result<MetaParams, MetaError> {
    let cfg = &exp.cfg;
    let master = cfg.master_seed;
    let shared = std::sync::Mutex::new(params.clone());
    let beta = cfg.outer_lr / groups.len() as f64;
    let results = collect(runner.map(groups.len(), |p| {
        let snapshot = shared.lock().expect("parameter lock").clone();
        let mut rng = job_rng(master, &[seed, TAG_TRAIN_CHAIN, it as u64, p as u64]);
        let r = run_train_chain(exp, &snapshot, &groups[p], &mut rng)?;
        let g = r.grad.as_ref().expect("training chains carry a gradient");
        let mut guard = shared.lock().expect("parameter lock");
        *guard = outer_update(&guard, g, beta)?;
        Ok(r)
    }))?;
    for r in &results {
        rows.push(train_row(exp, seed, it, r));
    }
    Ok(shared.into_inner().expect("parameter lock"))
}

/// Meta-training for one seed. Returns the parameters that scored best on
/// the validation split (or the final ones when validation is disabled)
/// together with train and validation rows.
pub fn meta_train(exp: &Experiment, seed: u64, runner: &Runner) -> Result<(MetaParams, Vec<MetricRow>), MetaError> {
    let cfg = &exp.cfg;
    let mut params = exp.initial_params();
    let mut rows = Vec::new();
    let mut best: Option<(f64, MetaParams)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let train_ids = exp.population.split(Split::Train).to_vec();
    if train_ids.is_empty() {
        return Err(MetaError::Setup("training split is empty".into()));
    }
    let validate = cfg.val_every > 0 && !exp.population.val.is_empty();
    let mut consider = |score: f64, p: &MetaParams, best: &mut Option<(f64, MetaParams)>| -> bool {
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            *best = Some((score, p.clone()));
            since_best = 0;
            false
        } else {
            since_best += 1;
            cfg.patience > 0 && since_best >= cfg.patience
        }
    };

    for it in 0..cfg.max_iters {
        if validate && it % cfg.val_every == 0 {
            let score = validation_score(exp, &params, seed, it, runner, &mut rows)?;
            if consider(score, &params, &mut best) {
                stopped_early = true;
                break;
            }
        }
        let mut srng = job_rng(cfg.master_seed, &[seed, TAG_SAMPLE, it as u64]);
        let groups: Vec<Vec<usize>> = (0..cfg.peers_per_batch)
            .map(|_| (0..exp.peers_per_chain()).map(|_| *train_ids.choose(&mut srng).expect("non-empty")).collect())
            .collect();
        let step = if cfg.async_mode {
            async_iteration(exp, &params, &groups, seed, it, runner, &mut rows)
        } else {
            sync_iteration(exp, &params, &groups, seed, it, runner, &mut rows)
        };
        params = step.map_err(|e| match e {
            MetaError::NonFinite { .. } => MetaError::NonFinite { iteration: it },
            other => other,
        })?;
    }
    if validate && cfg.max_iters > 0 && !stopped_early {
        let score = validation_score(exp, &params, seed, cfg.max_iters, runner, &mut rows)?;
        consider(score, &params, &mut best);
    }
    let chosen = match best {
        Some((_, p)) if validate => p,
        _ => params,
    };
    Ok((chosen, rows))
}

/// Meta-training with decentralized peers: peer parameters are never read,
/// only inferred from their actions. Equivalent to [`meta_train`] with
/// `opponent_modeling` switched on.
pub fn meta_train_om(exp: &Experiment, seed: u64, runner: &Runner) -> Result<(MetaParams, Vec<MetricRow>), MetaError> {
    let mut e = exp.clone();
    e.cfg.opponent_modeling = true;
    meta_train(&e, seed, runner)
}

/// Inner-loop-only adaptation against every test-split peer. Emits one row
/// per chain step and one summary row (with AUC) per peer.
pub fn meta_test(exp: &Experiment, params: &MetaParams, seed: u64, runner: &Runner) -> Result<Vec<MetricRow>, MetaError> {
    let res = evaluate(exp, params, Split::Test, exp.cfg.test_peers, seed, TAG_TEST_CHAIN, 0, runner)?;
    let mut rows = Vec::new();
    for r in &res {
        for (l, (s, p)) in r.self_returns.iter().zip(&r.peer_returns).enumerate() {
            rows.push(row(exp, seed, Phase::Test, None, r.peer_id, Some(l), *s, *p, None));
        }
        let (mean, auc) = summarize(&r.self_returns);
        let (pmean, _) = summarize(&r.peer_returns);
        rows.push(row(exp, seed, Phase::Test, None, r.peer_id, None, mean, pmean, Some(auc)));
    }
    Ok(rows)
}

/// Mean AUC over the summary rows of a phase.
pub fn mean_auc(rows: &[MetricRow], phase: Phase) -> f64 {
    let aucs: Vec<f64> = rows.iter().filter(|r| r.phase == phase).filter_map(|r| r.auc).collect();
    aucs.iter().sum::<f64>() / aucs.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::games::make_ipd;
    use rand::SeedableRng;

    fn ipd_chain(seed: u64, k: usize, h: usize, l: usize, exact: bool) -> ChainRollout {
        let g = make_ipd();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let joint: Vec<PolicyParams> = (0..2)
            .map(|a| PolicyParams::from_logits(a, 5, 2, (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let cfg = ChainConfig {
            chain_len: l,
            horizon: h,
            batch: if exact { BatchMode::Exact } else { BatchMode::Sampled { k } },
            gamma: 0.96,
            inner_lrs: vec![0.8, 0.5],
            meta_log_lrs: None,
            meta_agent: 0,
            on_tape: true,
            opponent_model: None,
        };
        learning::rollout_chain(&g, &joint, &cfg, &mut rng).unwrap()
    }

    fn opts() -> MetaGradOptions {
        MetaGradOptions { gae: GaeConfig { gamma: 0.96, lam: 0.95 }, cross_baseline: CrossBaseline::FittedValue }
    }

    #[test]
    fn terms_sum_to_flat_and_meta_pg_has_no_peer_term() {
        let mut chain = ipd_chain(1, 6, 4, 2, false);
        for path in [EstimatorPath::ScoreFunction, EstimatorPath::DiceAutodiff] {
            let g = meta_gradient(&mut chain, MethodSpec { method: Method::MetaMapg, path }, &opts()).unwrap();
            for c in 0..g.flat.len() {
                let s = g.terms.current_policy[c] + g.terms.own_learning[c] + g.terms.peer_learning[c];
                assert!((s - g.flat[c]).abs() < 1e-10);
            }
            assert!(g.terms.peer_learning.iter().any(|&x| x != 0.0));
            let pg = meta_gradient(&mut chain, MethodSpec { method: Method::MetaPg, path }, &opts()).unwrap();
            assert!(pg.terms.peer_learning.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn repeated_calls_are_identical() {
        let mut chain = ipd_chain(2, 4, 3, 2, false);
        let len = chain.tape.as_ref().unwrap().tape.len();
        let spec = MethodSpec { method: Method::MetaMapg, path: EstimatorPath::ScoreFunction };
        let a = meta_gradient(&mut chain, spec, &opts()).unwrap();
        let b = meta_gradient(&mut chain, spec, &opts()).unwrap();
        assert_eq!(a, b);
        assert_eq!(chain.tape.as_ref().unwrap().tape.len(), len);
    }

    #[test]
    fn reinforce_matches_closed_form_policy_gradient() {
        let mut chain = ipd_chain(3, 5, 4, 1, false);
        let spec = MethodSpec { method: Method::Reinforce, path: EstimatorPath::ScoreFunction };
        let g = meta_gradient(&mut chain, spec, &opts()).unwrap();
        let want = batch_policy_gradient(&chain.steps[0].batch, &chain.steps[0].params[0], 0, opts().gae);
        for (a, b) in g.flat.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(g.terms.own_learning.iter().chain(&g.terms.peer_learning).all(|&x| x == 0.0));
    }

    #[test]
    fn meta_value_estimate_examples() {
        let chain = ipd_chain(4, 3, 2, 2, false);
        let v = meta_value_estimate(&chain, 0);
        assert_eq!(v.len(), 2);
        assert_eq!(v[0], chain.steps[1].batch.mean_return(0, 0.96));
        let zero = MatrixGame::new("zero", 2, 2, vec![0.0; 8], 2).unwrap();
        let j = vec![PolicyParams::for_game(&zero, 0), PolicyParams::for_game(&zero, 1)];
        let cfg = ChainConfig {
            chain_len: 1,
            horizon: 2,
            batch: BatchMode::Sampled { k: 2 },
            gamma: 0.9,
            inner_lrs: vec![1.0, 1.0],
            meta_log_lrs: None,
            meta_agent: 0,
            on_tape: false,
            opponent_model: None,
        };
        let c = learning::rollout_chain(&zero, &j, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(meta_value_estimate(&c, 0), vec![0.0]);
    }

    #[test]
    fn pcgrad_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(pcgrad(&[vec![1.0, 0.0], vec![0.0, 1.0]], &mut rng).unwrap(), vec![0.5, 0.5]);
        assert_eq!(pcgrad(&[vec![1.0, 0.0], vec![-1.0, 0.0]], &mut rng).unwrap(), vec![0.0, 0.0]);
        assert_eq!(pcgrad(&[vec![1.0, 1.0], vec![1.0, -1.0]], &mut rng).unwrap(), vec![1.0, 0.0]);
        assert!(pcgrad(&[], &mut rng).is_err());
        assert!(pcgrad(&[vec![]], &mut rng).is_err());
    }

    #[test]
    fn outer_update_identities() {
        let p = MetaParams { phi0: PolicyParams::from_logits(0, 1, 2, vec![0.3, -0.2]), log_inner_lrs: Some(vec![0.1]) };
        assert_eq!(outer_update(&p, &[1.0, 2.0, 3.0], 0.0).unwrap(), p);
        assert_eq!(outer_update(&p, &[0.0, 0.0, 0.0], 0.5).unwrap(), p);
        let q = outer_update(&p, &[1.0, 0.0, 2.0], 0.5).unwrap();
        assert_eq!(q.phi0.logits, vec![0.8, -0.2]);
        assert_eq!(q.log_inner_lrs, Some(vec![1.1]));
        assert!(matches!(outer_update(&p, &[f64::NAN, 0.0, 0.0], 0.1), Err(MetaError::NonFinite { .. })));
    }

    #[test]
    fn learned_learning_rates_get_a_gradient() {
        let g = make_ipd();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let joint: Vec<PolicyParams> = (0..2)
            .map(|a| PolicyParams::from_logits(a, 5, 2, (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let cfg = ChainConfig {
            chain_len: 2,
            horizon: 3,
            batch: BatchMode::Sampled { k: 4 },
            gamma: 0.96,
            inner_lrs: vec![0.8, 0.5],
            meta_log_lrs: Some(vec![0.8f64.ln(); 2]),
            meta_agent: 0,
            on_tape: true,
            opponent_model: None,
        };
        let mut chain = learning::rollout_chain(&g, &joint, &cfg, &mut rng).unwrap();
        let mg = meta_gradient(&mut chain, MethodSpec { method: Method::MetaMapg, path: EstimatorPath::ScoreFunction }, &opts()).unwrap();
        assert_eq!(mg.lr_grad.len(), 2);
        assert!(mg.lr_grad[0] != 0.0);
    }

    #[test]
    fn meta_pg_equals_masked_meta_mapg_bit_for_bit() {
        let mut chain = ipd_chain(5, 6, 4, 2, false);
        for path in [EstimatorPath::ScoreFunction, EstimatorPath::DiceAutodiff] {
            let pg = meta_gradient(&mut chain, MethodSpec { method: Method::MetaPg, path }, &opts()).unwrap();
            let mask = TermMask { peer: false, ..Method::MetaMapg.mask() };
            let masked = meta_gradient_masked(&mut chain, path, mask, false, &opts()).unwrap();
            assert_eq!(pg, masked);
        }
    }

    fn om_chain(init: OmInit, max_iters: usize, exact: bool) -> (ChainRollout, ChainRollout) {
        let g = make_ipd();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let joint: Vec<PolicyParams> = (0..2)
            .map(|a| PolicyParams::from_logits(a, 5, 2, (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let mut cfg = ChainConfig {
            chain_len: 2,
            horizon: if exact { 2 } else { 5 },
            batch: if exact { BatchMode::Exact } else { BatchMode::Sampled { k: 6 } },
            gamma: 0.96,
            inner_lrs: vec![0.8, 0.5],
            meta_log_lrs: None,
            meta_agent: 0,
            on_tape: true,
            opponent_model: None,
        };
        let central = learning::rollout_chain(&g, &joint, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        cfg.opponent_model = Some(OpponentModelConfig { max_iters, init, ..Default::default() });
        let om = learning::rollout_chain(&g, &joint, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (central, om)
    }

    #[test]
    fn degenerate_opponent_model_reproduces_centralized_gradient() {
        for exact in [false, true] {
            let (mut central, mut om) = om_chain(OmInit::TrueParams, 0, exact);
            for path in [EstimatorPath::ScoreFunction, EstimatorPath::DiceAutodiff] {
                let spec = MethodSpec { method: Method::MetaMapg, path };
                let a = meta_gradient(&mut central, spec, &opts()).unwrap();
                let b = meta_gradient(&mut om, spec, &opts()).unwrap();
                let scale = a.flat.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                for (x, y) in a.flat.iter().zip(&b.flat) {
                    assert!((x - y).abs() <= 1e-6 * scale, "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn fitted_opponent_model_still_has_a_peer_term() {
        let (_, mut om) = om_chain(OmInit::Uniform, 500, false);
        let g = meta_gradient(&mut om, MethodSpec { method: Method::MetaMapg, path: EstimatorPath::ScoreFunction }, &opts()).unwrap();
        assert!(g.terms.peer_learning.iter().any(|&x| x != 0.0));
        assert_eq!(om.om_log_likelihoods.len(), 3);
    }

    fn small_experiment(extra: &str) -> Experiment {
        let text = format!("include = ipd_desk\nk = 2\nh = 3\nl = 1\npeers_per_batch = 3\nval_every = 0\ntest_peers = 4\n{extra}");
        Experiment::new(ExperimentConfig::parse(&text, None).unwrap()).unwrap()
    }

    #[test]
    fn zero_iterations_return_initial_params() {
        let exp = small_experiment("max_iters = 0");
        let runner = Runner::new(1).unwrap();
        let (p, rows) = meta_train(&exp, 0, &runner).unwrap();
        assert_eq!(p, exp.initial_params());
        assert!(rows.is_empty());
    }

    #[test]
    fn train_rows_are_iterations_times_peers() {
        let exp = small_experiment("max_iters = 4");
        let runner = Runner::new(1).unwrap();
        let (_, rows) = meta_train(&exp, 0, &runner).unwrap();
        assert_eq!(rows.iter().filter(|r| r.phase == Phase::Train).count(), 4 * 3);
        let om = meta_train_om(&exp, 0, &runner).unwrap().1;
        assert!(om.iter().all(|r| r.method == "meta_mapg_om"));
    }

    #[test]
    fn test_rows_and_auc() {
        let exp = small_experiment("max_iters = 0");
        let runner = Runner::new(1).unwrap();
        let rows = meta_test(&exp, &exp.initial_params(), 0, &runner).unwrap();
        // chain length 1: two per-step rows and one summary per peer
        assert_eq!(rows.len(), 4 * 3);
        for chunk in rows.chunks(3) {
            assert_eq!(chunk[2].auc, Some(chunk[1].mean_return_self));
            assert!(chunk[0].auc.is_none() && chunk[1].auc.is_none());
        }

        let mut zero = exp.clone();
        zero.game = MatrixGame::new("zero", 2, 2, vec![0.0; 8], 3).unwrap();
        let rows = meta_test(&zero, &zero.initial_params(), 0, &runner).unwrap();
        assert!(rows.iter().filter_map(|r| r.auc).all(|a| a == 0.0));
    }

    #[test]
    fn validation_selects_and_records() {
        let exp = small_experiment("max_iters = 3\nval_every = 1\nval_peers = 2");
        let runner = Runner::new(1).unwrap();
        let (_, rows) = meta_train(&exp, 0, &runner).unwrap();
        // checks at iterations 0, 1, 2 and after the last update
        assert_eq!(rows.iter().filter(|r| r.phase == Phase::Val).count(), 4 * 2);
    }

    proptest::proptest! {
        #[test]
        fn pcgrad_removes_pairwise_conflicts(
            grads in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 2..5),
            seed in 0u64..1000,
        ) {
            let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let projected = pcgrad_project(&grads, &mut rng).unwrap();
            if grads.len() == 2 {
                for (i, j) in [(0, 1), (1, 0)] {
                    if dot(&grads[i], &grads[j]) < 0.0 {
                        proptest::prop_assert!(dot(&projected[i], &grads[j]) >= -1e-10);
                    } else {
                        proptest::prop_assert_eq!(&projected[i], &grads[i]);
                    }
                }
            }
            let mean = pcgrad(&grads, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for c in 0..3 {
                let m = projected.iter().map(|g| g[c]).sum::<f64>() / projected.len() as f64;
                proptest::prop_assert!((m - mean[c]).abs() < 1e-12);
            }
        }
    }
}
