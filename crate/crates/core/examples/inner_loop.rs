//! A chain of joint policies: every agent takes a policy-gradient step after
//! each batch, and the meta-agent's return is tracked along the chain.

use metamarl::games::make_ipd;
use metamarl::learning::{rollout_chain, BatchMode, ChainConfig};
use metamarl::policies::{ipd_population, PolicyParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let game = make_ipd();
    let pop = ipd_population(&game, 0)?;
    let peer = pop.members[pop.train[0]].params.clone();
    let joint = vec![PolicyParams::for_game(&game, 0), peer];
    let cfg = ChainConfig {
        chain_len: 5,
        horizon: 20,
        batch: BatchMode::Sampled { k: 32 },
        gamma: 0.96,
        inner_lrs: vec![1.0, 0.1],
        meta_log_lrs: None,
        meta_agent: 0,
        on_tape: false,
        opponent_model: None,
    };
    let chain = rollout_chain(&game, &joint, &cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let me = chain.mean_returns(0);
    let them = chain.mean_returns(1);
    for (l, (a, b)) in me.iter().zip(&them).enumerate() {
        let p = &chain.steps[l].params[0];
        println!("step {l}: return me {a:8.3} peer {b:8.3}   P(C | start) = {:.3}", p.action_probs(0)[0]);
    }
    Ok(())
}
