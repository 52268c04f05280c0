//! Inferring a peer's tabular policy from its actions by maximum likelihood.

use metamarl::games::make_ipd;
use metamarl::learning::collect_batch;
use metamarl::opponent_modeling::{fit_opponent, OpponentModelConfig};
use metamarl::policies::{ipd_population, PolicyParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let game = make_ipd();
    let pop = ipd_population(&game, 0)?;
    let peer = pop.members[pop.train[3]].params.clone();
    let me = PolicyParams::for_game(&game, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for k in [4, 32, 256] {
        let batch = collect_batch(&game, &[me.clone(), peer.clone()], k, 20, &mut rng)?;
        let fit = fit_opponent(&batch, 1, &PolicyParams::zeros(1, 5, 2), &OpponentModelConfig::default())?;
        let err = (0..5)
            .map(|s| (fit.params_hat.action_probs(s)[0] - peer.action_probs(s)[0]).abs())
            .fold(0.0, f64::max);
        println!(
            "{k:>4} episodes: {} iterations, log-likelihood {:.2}, max |P(C) error| {err:.3}",
            fit.iterations_used, fit.fit_log_likelihood
        );
    }
    Ok(())
}
