//! Oracle checks of the gradient machinery, shared by the `gradcheck`
//! command and the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::games::{make_ipd, make_rps, MatrixGame};
use crate::learning::{self, BatchMode, ChainConfig, GaeConfig};
use crate::meta::{meta_gradient, CrossBaseline, EstimatorPath, MetaGradOptions, Method, MethodSpec};
use crate::oracle::finite_diff_meta_grad;
use crate::policies::PolicyParams;
use crate::tape::Tape;
use crate::zero_sum_analytic::{mapg_grad, tape_meta_gradient, ScalarPair};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }

    fn failed(name: &str, err: impl std::fmt::Display) -> Self {
        Self::new(name, false, format!("error: {err}"))
    }
}

pub fn random_joint(game: &MatrixGame, rng: &mut ChaCha8Rng, scale: f64) -> Vec<PolicyParams> {
    (0..game.n_agents)
        .map(|a| {
            let n = game.n_states() * game.n_actions;
            PolicyParams::from_logits(a, game.n_states(), game.n_actions, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
        })
        .collect()
}

/// Relative error of `got` against `want`, with coordinates where
/// `|want| < abs_floor` compared absolutely.
pub fn max_mixed_error(got: &[f64], want: &[f64], abs_floor: f64) -> f64 {
    got.iter()
        .zip(want)
        .map(|(g, w)| if w.abs() < abs_floor { (g - w).abs() } else { (g - w).abs() / w.abs() })
        .fold(0.0, f64::max)
}

/// Exact-mode meta-gradients (both estimator paths) against central
/// differences of the exact meta-value, over `n_inits` random joint
/// initializations with chain length 1 and horizon 2.
pub fn exact_meta_grad_check(game: &MatrixGame, n_inits: usize, seed: u64) -> CheckOutcome {
    let name = format!("meta-gradient vs finite differences ({})", game.name);
    let (h, gamma) = (2, 0.96);
    let alphas = [0.7, 0.4];
    let alphas: Vec<f64> = (0..game.n_agents).map(|a| alphas[a.min(1)]).collect();
    let opts = MetaGradOptions { gae: GaeConfig { gamma, lam: 1.0 }, cross_baseline: CrossBaseline::FittedValue };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n_inits {
        let joint = random_joint(game, &mut rng, 1.0);
        let cfg = ChainConfig {
            chain_len: 1,
            horizon: h,
            batch: BatchMode::Exact,
            gamma,
            inner_lrs: alphas.clone(),
            meta_log_lrs: None,
            meta_agent: 0,
            on_tape: true,
            opponent_model: None,
        };
        let want = match finite_diff_meta_grad(game, &joint, &alphas, 1, h, gamma, 0, 1e-5) {
            Ok(w) => w,
            Err(e) => return CheckOutcome::failed(&name, e),
        };
        let mut chain = match learning::rollout_chain(game, &joint, &cfg, &mut rng) {
            Ok(c) => c,
            Err(e) => return CheckOutcome::failed(&name, e),
        };
        for path in [EstimatorPath::ScoreFunction, EstimatorPath::DiceAutodiff] {
            match meta_gradient(&mut chain, MethodSpec { method: Method::MetaMapg, path }, &opts) {
                Ok(g) => worst = worst.max(max_mixed_error(&g.flat, &want, 1e-8)),
                Err(e) => return CheckOutcome::failed(&name, e),
            }
        }
    }
    CheckOutcome::new(&name, worst < 1e-5, format!("{n_inits} inits, worst mixed error {worst:.3e} (limit 1e-5)"))
}

/// Magic-box forward value, and first and second derivatives of a
/// magic-box surrogate on a two-action bandit against the score-function
/// expressions `r d log pi(a)` and `r (d log pi d log pi^T + d^2 log pi)`.
pub fn dice_check(n_cases: usize, seed: u64) -> CheckOutcome {
    let name = "magic-box identities (two-action bandit)";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut forward_ok = true;
    for _ in 0..n_cases {
        let th = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let a = rng.gen_range(0..2usize);
        let r: f64 = rng.gen_range(-3.0..3.0);
        let mut t = Tape::new();
        let p = [t.param(th[0]), t.param(th[1])];
        let run = |t: &mut Tape| -> Result<(f64, Vec<f64>, Vec<Vec<f64>>), crate::tape::TapeError> {
            let pol = learning::TapePolicy::build(t, &p, 2)?;
            let lp = pol.log_prob(0, a);
            let b = t.magic_box(&[lp])?;
            let fwd = t.value(b);
            let surrogate = t.scale(b, r)?;
            let g = t.grad_nodes(surrogate, &p)?;
            let g1 = t.values(&g);
            let mut hess = Vec::new();
            for gi in g {
                hess.push(t.grad_values(gi, &p)?);
            }
            Ok((fwd, g1, hess))
        };
        let (fwd, g1, hess) = match run(&mut t) {
            Ok(x) => x,
            Err(e) => return CheckOutcome::failed(name, e),
        };
        forward_ok &= fwd == 1.0;
        let pi = crate::policies::softmax(&th);
        let score: Vec<f64> = (0..2).map(|k| f64::from(u8::from(k == a)) - pi[k]).collect();
        // d^2 log pi(a) / d th_k d th_l = -(pi_k [k == l] - pi_k pi_l)
        for k in 0..2 {
            worst = worst.max((g1[k] - r * score[k]).abs());
            for l in 0..2 {
                let d2 = -(if k == l { pi[k] } else { 0.0 } - pi[k] * pi[l]);
                worst = worst.max((hess[k][l] - r * (score[k] * score[l] + d2)).abs());
            }
        }
    }
    CheckOutcome::new(
        name,
        forward_ok && worst < 1e-10,
        format!("{n_cases} cases, forward exactly 1: {forward_ok}, worst error {worst:.3e} (limit 1e-10)"),
    )
}

/// Closed-form zero-sum meta-gradient against the taped one.
pub fn zero_sum_check(n_cases: usize, seed: u64) -> CheckOutcome {
    let name = "zero-sum closed form vs tape";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n_cases {
        let p = ScalarPair::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let alpha = rng.gen_range(0.0..1.5);
        match tape_meta_gradient(p, alpha) {
            Ok(g) => worst = worst.max((g - mapg_grad(p, alpha)).abs()),
            Err(e) => return CheckOutcome::failed(name, e),
        }
    }
    CheckOutcome::new(name, worst < 1e-10, format!("{n_cases} cases, worst |diff| {worst:.3e} (limit 1e-10)"))
}

/// Game names accepted by [`run_suite`].
pub const GAMES: &[&str] = &["ipd", "rps", "all"];

pub fn run_suite(game: &str) -> Result<Vec<CheckOutcome>, String> {
    let mut games = Vec::new();
    match game {
        "ipd" => games.push(make_ipd()),
        "rps" => games.push(make_rps(2).map_err(|e| e.to_string())?),
        "all" => {
            games.push(make_ipd());
            games.push(make_rps(2).map_err(|e| e.to_string())?);
        }
        _ => return Err(format!("unknown game {game:?}; expected one of {GAMES:?}")),
    }
    let mut out = vec![dice_check(20, 5), zero_sum_check(100, 6)];
    for g in &games {
        out.push(exact_meta_grad_check(g, 5, 7));
    }
    Ok(out)
}
