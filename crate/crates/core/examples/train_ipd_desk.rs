//! Meta-training and meta-testing on the desk-scale prisoner's dilemma for
//! each method, one seed, with fewer iterations than the full preset.
//!
//! `cargo run --release --example train_ipd_desk [iterations]`

use metamarl::harness::config::ExperimentConfig;
use metamarl::harness::metrics::Phase;
use metamarl::harness::parallel::Runner;
use metamarl::meta::{mean_auc, meta_test, meta_train, Experiment};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iters: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(100);
    let runner = Runner::new(1)?;
    for extra in ["method = reinforce", "method = meta_pg", "method = meta_mapg", "method = meta_mapg\nopponent_modeling = true"] {
        let cfg = ExperimentConfig::parse(&format!("include = ipd_desk\nmax_iters = {iters}\n{extra}"), None)?;
        let exp = Experiment::new(cfg)?;
        let before = meta_test(&exp, &exp.initial_params(), 0, &runner)?;
        let (params, _) = meta_train(&exp, 0, &runner)?;
        let after = meta_test(&exp, &params, 0, &runner)?;
        println!(
            "{:>14}: test AUC {:7.3} -> {:7.3}",
            exp.cfg.method_label(),
            mean_auc(&before, Phase::Test),
            mean_auc(&after, Phase::Test)
        );
    }
    Ok(())
}
