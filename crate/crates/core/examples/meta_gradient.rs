//! The meta-gradient of the meta-agent's initial policy, split into the
//! current-policy, own-learning and peer-learning terms, and checked against
//! finite differences of the exact meta-value on a tiny horizon.

use metamarl::games::make_ipd;
use metamarl::harness::gradcheck::random_joint;
use metamarl::learning::{rollout_chain, BatchMode, ChainConfig, GaeConfig};
use metamarl::meta::{meta_gradient, CrossBaseline, EstimatorPath, MetaGradOptions, Method, MethodSpec};
use metamarl::oracle::finite_diff_meta_grad;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let game = make_ipd();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let joint = random_joint(&game, &mut rng, 1.0);
    let alphas = [0.7, 0.4];
    let cfg = ChainConfig {
        chain_len: 1,
        horizon: 2,
        batch: BatchMode::Exact,
        gamma: 0.96,
        inner_lrs: alphas.to_vec(),
        meta_log_lrs: None,
        meta_agent: 0,
        on_tape: true,
        opponent_model: None,
    };
    let mut chain = rollout_chain(&game, &joint, &cfg, &mut rng)?;
    let opts = MetaGradOptions { gae: GaeConfig { gamma: 0.96, lam: 1.0 }, cross_baseline: CrossBaseline::FittedValue };
    let g = meta_gradient(&mut chain, MethodSpec { method: Method::MetaMapg, path: EstimatorPath::ScoreFunction }, &opts)?;
    let fd = finite_diff_meta_grad(&game, &joint, &alphas, 1, 2, 0.96, 0, 1e-5)?;

    println!("{:>5} {:>12} {:>12} {:>12} {:>12} {:>12}", "coord", "current", "own", "peer", "total", "finite diff");
    for c in 0..g.flat.len() {
        println!(
            "{c:>5} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
            g.terms.current_policy[c], g.terms.own_learning[c], g.terms.peer_learning[c], g.flat[c], fd[c]
        );
    }

    let pg = meta_gradient(&mut chain, MethodSpec { method: Method::MetaPg, path: EstimatorPath::DiceAutodiff }, &opts)?;
    println!("meta_pg drops the peer term; its gradient at coordinate 0 is {:.6}", pg.flat[0]);
    Ok(())
}
