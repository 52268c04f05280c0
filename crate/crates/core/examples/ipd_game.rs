//! The iterated prisoner's dilemma, persona populations, and sampled episodes.

use metamarl::games::make_ipd;
use metamarl::learning::collect_batch;
use metamarl::policies::{ipd_population, PolicyParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let game = make_ipd();
    println!("{}: {} agents, {} actions, {} states", game.name, game.n_agents, game.n_actions, game.n_states());
    for a in 0..2 {
        for b in 0..2 {
            println!("  payoff({a}, {b}) = {:?}", game.payoff(&[a, b])?);
        }
    }

    let pop = ipd_population(&game, 0)?;
    println!("population: {} members, split {}/{}/{}", pop.members.len(), pop.train.len(), pop.val.len(), pop.test.len());
    let peer = &pop.members[pop.test[0]];
    println!("test peer 0 is {}; P(cooperate | s):", peer.spec.kind);
    for s in 0..game.n_states() {
        println!("  state {s}: {:.3}", peer.params.action_probs(s)[0]);
    }

    let me = PolicyParams::for_game(&game, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = collect_batch(&game, &[me, peer.params.clone()], 8, 10, &mut rng)?;
    println!("mean discounted return over 8 episodes: me {:.3}, peer {:.3}", batch.mean_return(0, 0.96), batch.mean_return(1, 0.96));
    Ok(())
}
