//! Stateless two-player zero-sum game with scalar parameters.
//!
//! Agent `i` maximizes `V^i = phi_i * phi_j`, agent `j` maximizes `-V^i`.
//! One exact inner step with rate `alpha` is taken by both players, and the
//! meta-agent's objective is `V^i` after that step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, TapeError};

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct ScalarPair {
    pub phi_i: f64,
    pub phi_j: f64,
}

impl ScalarPair {
    pub fn new(phi_i: f64, phi_j: f64) -> Self {
        Self { phi_i, phi_j }
    }

    pub fn value_i(&self) -> f64 {
        self.phi_i * self.phi_j
    }
}

pub fn inner_step(pair: ScalarPair, alpha: f64) -> ScalarPair {
    ScalarPair { phi_i: pair.phi_i + alpha * pair.phi_j, phi_j: pair.phi_j - alpha * pair.phi_i }
}

/// Full derivative of `V^i(phi_1)` with respect to `phi^i_0`, including the
/// peer's dependence on it.
pub fn mapg_grad(pair: ScalarPair, alpha: f64) -> f64 {
    let p1 = inner_step(pair, alpha);
    p1.phi_j - alpha * p1.phi_i
}

/// Derivative that treats the peer's updated parameter as fixed.
pub fn pg_grad(pair: ScalarPair, alpha: f64) -> f64 {
    inner_step(pair, alpha).phi_j
}

/// The same meta-gradient obtained by differentiating through both players'
/// recorded inner updates on the tape.
pub fn tape_meta_gradient(pair: ScalarPair, alpha: f64) -> Result<f64, TapeError> {
    let mut t = Tape::with_capacity(32);
    let pi = t.param(pair.phi_i);
    let pj = t.param(pair.phi_j);
    let vi = t.mul(pi, pj)?;
    let vj = t.neg(vi)?;
    let gi = t.grad_nodes(vi, &[pi])?[0];
    let gj = t.grad_nodes(vj, &[pj])?[0];
    let pi1 = t.lin_comb(&[pi, gi], &[1.0, alpha])?;
    let pj1 = t.lin_comb(&[pj, gj], &[1.0, alpha])?;
    let v1 = t.mul(pi1, pj1)?;
    Ok(t.grad_values(v1, &[pi])?[0])
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Fig3Config {
    pub n_samples: usize,
    pub alpha: f64,
    pub beta: f64,
    pub iters: usize,
    /// Half-width of the uniform range for the peer's initial parameter.
    pub peer_range: f64,
    /// Half-width of the uniform range for the meta-agent's initial parameter.
    pub meta_range: f64,
    pub seed: u64,
}

impl Default for Fig3Config {
    fn default() -> Self {
        Self { n_samples: 200, alpha: 0.75, beta: 0.01, iters: 300, peer_range: 1.0, meta_range: 0.5, seed: 0 }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Fig3Method {
    MetaMapg,
    MetaPg,
}

impl Fig3Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Fig3Method::MetaMapg => "meta_mapg",
            Fig3Method::MetaPg => "meta_pg",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fig3Row {
    pub iteration: usize,
    pub method: Fig3Method,
    pub mean: f64,
    pub ci95: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fig3Result {
    pub rows: Vec<Fig3Row>,
    /// `series[method][sample][iteration]`: `V^i` after the inner step, for
    /// iterations `0..=iters`.
    pub series: Vec<Vec<Vec<f64>>>,
}

impl Fig3Result {
    pub fn means(&self, method: Fig3Method) -> Vec<f64> {
        self.rows.iter().filter(|r| r.method == method).map(|r| r.mean).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,method,mean,ci95\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.16e},{:.16e}\n", r.iteration, r.method.as_str(), r.mean, r.ci95));
        }
        s
    }
}

/// Trains the meta-agent's initial parameter against random peers with each
/// method and records the post-update value at every iteration.
pub fn run_fig3(cfg: &Fig3Config) -> Fig3Result {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let starts: Vec<ScalarPair> = (0..cfg.n_samples)
        .map(|_| {
            let phi_j = rng.gen_range(-cfg.peer_range..=cfg.peer_range);
            let phi_i = if cfg.meta_range > 0.0 { rng.gen_range(-cfg.meta_range..=cfg.meta_range) } else { 0.0 };
            ScalarPair::new(phi_i, phi_j)
        })
        .collect();
    let methods = [Fig3Method::MetaMapg, Fig3Method::MetaPg];
    let mut series = Vec::new();
    let mut rows = Vec::new();
    for method in methods {
        let per_sample: Vec<Vec<f64>> = starts
            .iter()
            .map(|&p0| {
                let mut p = p0;
                let mut vals = Vec::with_capacity(cfg.iters + 1);
                for it in 0..=cfg.iters {
                    vals.push(inner_step(p, cfg.alpha).value_i());
                    if it < cfg.iters {
                        let g = match method {
                            Fig3Method::MetaMapg => mapg_grad(p, cfg.alpha),
                            Fig3Method::MetaPg => pg_grad(p, cfg.alpha),
                        };
                        p.phi_i += cfg.beta * g;
                    }
                }
                vals
            })
            .collect();
        for it in 0..=cfg.iters {
            let xs: Vec<f64> = per_sample.iter().map(|v| v[it]).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            rows.push(Fig3Row { iteration: it, method, mean, ci95: 1.96 * (var / n).sqrt() });
        }
        series.push(per_sample);
    }
    Fig3Result { rows, series }
}

/// Trailing moving average (shorter windows at the start).
pub fn smooth(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
