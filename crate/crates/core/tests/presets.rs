//! Shipped presets against the reference hyperparameter tables.

use metamarl::harness::config::{preset, ExperimentConfig, GameKind, PRESETS};

struct Table {
    name: &'static str,
    k: usize,
    h: usize,
    l: usize,
    gamma: f64,
    gae_lambda: f64,
    inner_lr: f64,
    peer_inner_lr: f64,
    outer_lr: f64,
    workers: usize,
}

const TABLES: &[Table] = &[
    Table { name: "ipd", k: 4, h: 150, l: 7, gamma: 0.96, gae_lambda: 0.95, inner_lr: 1.0, peer_inner_lr: 0.1, outer_lr: 1e-4, workers: 5 },
    Table { name: "rps", k: 64, h: 150, l: 7, gamma: 0.90, gae_lambda: 0.95, inner_lr: 0.01, peer_inner_lr: 0.01, outer_lr: 1e-5, workers: 5 },
];

#[test]
fn presets_match_tables() {
    for t in TABLES {
        let c = ExperimentConfig::load(t.name).unwrap();
        assert_eq!(
            (c.k, c.h, c.l, c.gamma, c.gae_lambda, c.inner_lr, c.peer_inner_lr, c.outer_lr, c.workers),
            (t.k, t.h, t.l, t.gamma, t.gae_lambda, t.inner_lr, t.peer_inner_lr, t.outer_lr, t.workers),
            "preset {}",
            t.name
        );
    }
}

#[test]
fn desk_preset_scales_down_ipd() {
    let c = ExperimentConfig::load("ipd_desk").unwrap();
    assert_eq!(c.game, GameKind::Ipd);
    assert_eq!((c.k, c.h, c.l, c.gamma), (32, 20, 3, 0.96));
    assert_eq!(c.seeds, vec![0, 1, 2, 3, 4]);
    assert_eq!(c.max_iters, 300);
}

#[test]
fn zero_sum_preset() {
    let c = ExperimentConfig::load("zero_sum").unwrap();
    assert_eq!((c.inner_lr, c.outer_lr, c.max_iters, c.samples), (0.75, 0.01, 300, 200));
}

#[test]
fn every_preset_parses() {
    for (name, _) in PRESETS {
        assert!(preset(name).is_some());
        ExperimentConfig::load(name).unwrap();
    }
}
