//! One test per acceptance criterion. Each prints a single
//! `ACCEPTANCE <n> PASS|FAIL` line before asserting.

use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use metamarl::games::{make_ipd, make_rps, COOPERATE};
use metamarl::harness::config::ExperimentConfig;
use metamarl::harness::gradcheck::{dice_check, random_joint, exact_meta_grad_check, zero_sum_check};
use metamarl::harness::metrics::Phase;
use metamarl::harness::parallel::Runner;
use metamarl::learning::{self, gae_advantages, BatchMode, ChainConfig, ChainRollout, GaeConfig};
use metamarl::meta::{
    mean_auc, meta_gradient, meta_gradient_masked, meta_test, meta_train, pcgrad_project, CrossBaseline,
    EstimatorPath, Experiment, MetaGradOptions, Method, MethodSpec, TermMask,
};
use metamarl::policies::{ipd_population, rps_population, PersonaKind, Population};
use metamarl::zero_sum_analytic::{run_fig3, smooth, Fig3Config, Fig3Method};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    println!("ACCEPTANCE {n} {}: {name} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "acceptance {n} failed: {name} ({detail})");
}

fn sampled_ipd_chain(rng: &mut ChaCha8Rng, k: usize, h: usize, l: usize) -> ChainRollout {
    let game = make_ipd();
    let joint = random_joint(&game, rng, 1.0);
    let cfg = ChainConfig {
        chain_len: l,
        horizon: h,
        batch: BatchMode::Sampled { k },
        gamma: 0.96,
        inner_lrs: vec![1.0, 0.1],
        meta_log_lrs: None,
        meta_agent: 0,
        on_tape: true,
        opponent_model: None,
    };
    learning::rollout_chain(&game, &joint, &cfg, rng).unwrap()
}

fn opts(lam: f64) -> MetaGradOptions {
    MetaGradOptions { gae: GaeConfig { gamma: 0.96, lam }, cross_baseline: CrossBaseline::FittedValue }
}

#[test]
fn criterion_01_zero_sum_adaptation_curves() {
    let start = Instant::now();
    let r = run_fig3(&Fig3Config { n_samples: 200, alpha: 0.75, beta: 0.01, iters: 300, ..Default::default() });
    let secs = start.elapsed().as_secs_f64();
    let mapg = smooth(&r.means(Fig3Method::MetaMapg), 10);
    let pg = smooth(&r.means(Fig3Method::MetaPg), 10);
    let monotone = mapg.windows(2).all(|w| w[1] >= w[0]);
    let gain = mapg[mapg.len() - 1] - mapg[0];
    let pg_drop = pg[pg.len() - 1] < pg[0];
    let samples = r.series.iter().all(|s| s.len() == 200);
    report(
        1,
        "zero-sum adaptation: Meta-MAPG rises, Meta-PG falls",
        monotone && gain >= 0.05 && pg_drop && samples && secs < 10.0,
        &format!(
            "mapg {:.4} -> {:.4} (gain {gain:.4}, non-decreasing {monotone}), pg {:.4} -> {:.4}, {secs:.2}s",
            mapg[0],
            mapg[mapg.len() - 1],
            pg[0],
            pg[pg.len() - 1]
        ),
    );
}

#[test]
fn criterion_02_zero_sum_closed_form_matches_tape() {
    let c = zero_sum_check(100, 2024);
    report(2, "zero-sum closed-form meta-gradient equals taped gradient", c.passed, &c.detail);
}

#[test]
fn criterion_03_meta_gradient_matches_finite_differences() {
    let start = Instant::now();
    let c = exact_meta_grad_check(&make_ipd(), 20, 3);
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        "exact-mode IPD meta-gradient (both paths) vs finite differences",
        c.passed && secs < 60.0,
        &format!("{}, {secs:.2}s", c.detail),
    );
}

#[test]
fn criterion_04_meta_pg_is_meta_mapg_without_peer_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ok = true;
    let mut checked = 0;
    for _ in 0..5 {
        let mut chain = sampled_ipd_chain(&mut rng, 8, 6, 2);
        for path in [EstimatorPath::ScoreFunction, EstimatorPath::DiceAutodiff] {
            let pg = meta_gradient(&mut chain, MethodSpec { method: Method::MetaPg, path }, &opts(0.95)).unwrap();
            let mask = TermMask { peer: false, ..Method::MetaMapg.mask() };
            let masked = meta_gradient_masked(&mut chain, path, mask, false, &opts(0.95)).unwrap();
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            ok &= bits(&pg.flat) == bits(&masked.flat);
            ok &= pg.terms.peer_learning.iter().all(|&x| x == 0.0);
            checked += 1;
        }
    }
    report(4, "Meta-PG is bit-identical to Meta-MAPG with the peer term zeroed", ok, &format!("{checked} chain/path pairs"));
}

#[test]
fn criterion_05_magic_box_identities() {
    let c = dice_check(50, 5);
    report(5, "magic-box forward value and derivatives on a bandit", c.passed, &c.detail);
}

#[test]
fn criterion_06_estimator_paths_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let mut chain = sampled_ipd_chain(&mut rng, 8, 6, 2);
        let a = meta_gradient(&mut chain, MethodSpec { method: Method::MetaMapg, path: EstimatorPath::ScoreFunction }, &opts(0.95)).unwrap();
        let b = meta_gradient(&mut chain, MethodSpec { method: Method::MetaMapg, path: EstimatorPath::DiceAutodiff }, &opts(0.95)).unwrap();
        let scale = a.flat.iter().chain(&b.flat).fold(0.0f64, |m, x| m.max(x.abs()));
        for (x, y) in a.flat.iter().zip(&b.flat) {
            worst = worst.max((x - y).abs() / scale.max(f64::MIN_POSITIVE));
        }
    }
    report(6, "score-function and magic-box paths agree", worst < 1e-6, &format!("10 chains, worst relative diff {worst:.3e} (limit 1e-6)"));
}

struct DeskResults {
    auc: Vec<(String, f64)>,
    secs: f64,
}

impl DeskResults {
    fn get(&self, label: &str) -> f64 {
        self.auc.iter().find(|(l, _)| l == label).map(|x| x.1).expect("method was run")
    }
}

fn desk_results() -> &'static DeskResults {
    static CELL: OnceLock<DeskResults> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let runner = Runner::new(1).unwrap();
        let mut auc = Vec::new();
        for (label, extra) in [
            ("meta_mapg", "method = meta_mapg"),
            ("meta_pg", "method = meta_pg"),
            ("reinforce", "method = reinforce"),
            ("meta_mapg_om", "method = meta_mapg\nopponent_modeling = true"),
        ] {
            let cfg = ExperimentConfig::parse(&format!("include = ipd_desk\n{extra}"), None).unwrap();
            assert_eq!((cfg.k, cfg.h, cfg.l, cfg.gamma, cfg.max_iters, cfg.seeds.len()), (32, 20, 3, 0.96, 300, 5));
            let exp = Experiment::new(cfg.clone()).unwrap();
            let mut rows = Vec::new();
            for &seed in &cfg.seeds {
                let (params, _) = meta_train(&exp, seed, &runner).unwrap();
                rows.extend(meta_test(&exp, &params, seed, &runner).unwrap());
            }
            auc.push((label.to_string(), mean_auc(&rows, Phase::Test)));
        }
        DeskResults { auc, secs: start.elapsed().as_secs_f64() }
    })
}

#[test]
fn criterion_07_desk_ipd_ordering() {
    let d = desk_results();
    let (mapg, pg, rf) = (d.get("meta_mapg"), d.get("meta_pg"), d.get("reinforce"));
    report(
        7,
        "desk IPD test AUC: Meta-MAPG >= Meta-PG >= REINFORCE, margin >= 0.5",
        mapg >= pg && pg >= rf && mapg - rf >= 0.5 && d.secs < 600.0,
        &format!("meta_mapg {mapg:.3}, meta_pg {pg:.3}, reinforce {rf:.3}, margin {:.3}, all four methods {:.1}s", mapg - rf, d.secs),
    );
}

#[test]
fn criterion_08_opponent_modeling_sandwich() {
    let d = desk_results();
    let (mapg, pg, om) = (d.get("meta_mapg"), d.get("meta_pg"), d.get("meta_mapg_om"));
    report(
        8,
        "desk IPD test AUC: Meta-PG <= OM variant <= Meta-MAPG + 0.1",
        om >= pg && om <= mapg + 0.1,
        &format!("meta_pg {pg:.3}, om {om:.3}, meta_mapg {mapg:.3}"),
    );
}

fn population_ok(pop: &Population, sizes: (usize, usize, usize)) -> bool {
    let mut ok = (pop.train.len(), pop.val.len(), pop.test.len()) == sizes;
    let mut all: Vec<usize> = pop.train.iter().chain(&pop.val).chain(&pop.test).copied().collect();
    all.sort_unstable();
    ok &= all == (0..pop.members.len()).collect::<Vec<_>>();
    for m in &pop.members {
        for s in 0..m.params.n_states {
            let p = m.params.action_probs(s);
            ok &= match m.spec.kind {
                PersonaKind::Cooperating => (0.5..=1.0).contains(&p[COOPERATE]),
                PersonaKind::Defecting => (0.0..=0.5).contains(&p[COOPERATE]),
                PersonaKind::Rock | PersonaKind::Paper | PersonaKind::Scissors => {
                    let pref = match m.spec.kind {
                        PersonaKind::Rock => 0,
                        PersonaKind::Paper => 1,
                        _ => 2,
                    };
                    let others = (0..3).filter(|&a| a != pref).all(|a| p[pref] > p[a]);
                    others && p[pref] >= 1.0 / 3.0 - 1e-12 && p[pref] <= 1.0
                }
                PersonaKind::Uniform => true,
            };
        }
    }
    ok
}

#[test]
fn criterion_09_component_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // GAE: lambda = 1 gives returns-to-go minus values, lambda = 0 the TD residuals
    let mut gae_err: f64 = 0.0;
    for _ in 0..100 {
        let h = rng.gen_range(1..12);
        let r: Vec<f64> = (0..h).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut v: Vec<f64> = (0..h).map(|_| rng.gen_range(-2.0..2.0)).collect();
        v.push(0.0);
        let g = rng.gen_range(0.0..0.99);
        let a1 = gae_advantages(&r, &v, GaeConfig { gamma: g, lam: 1.0 });
        let a0 = gae_advantages(&r, &v, GaeConfig { gamma: g, lam: 0.0 });
        for t in 0..h {
            let rtg: f64 = (t..h).map(|u| g.powi((u - t) as i32) * r[u]).sum();
            gae_err = gae_err.max((a1[t] - (rtg - v[t])).abs());
            gae_err = gae_err.max((a0[t] - (r[t] + g * v[t + 1] - v[t])).abs());
        }
    }
    // PCGrad: every originally conflicting pair is resolved
    let mut pc_worst: f64 = 0.0;
    for _ in 0..200 {
        let grads: Vec<Vec<f64>> = (0..2).map(|_| (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        let projected = pcgrad_project(&grads, &mut rng).unwrap();
        for (i, j) in [(0, 1), (1, 0)] {
            if dot(&grads[i], &grads[j]) < 0.0 {
                pc_worst = pc_worst.min(dot(&projected[i], &grads[j]));
            }
        }
    }
    let ipd = ipd_population(&make_ipd(), 0).unwrap();
    let rps = rps_population(&make_rps(2).unwrap(), 0).unwrap();
    let pops = population_ok(&ipd, (400, 40, 40)) && population_ok(&rps, (600, 60, 60));
    report(
        9,
        "GAE identities, PCGrad conflict removal, population invariants",
        gae_err < 1e-12 && pc_worst >= -1e-10 && pops,
        &format!("GAE max error {gae_err:.3e}, min projected dot {pc_worst:.3e}, populations ok {pops}"),
    );
}

#[test]
fn criterion_10_metrics_are_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_metamarl");
    let mut outputs = Vec::new();
    for workers in [1, 8] {
        let out = dir.path().join(format!("w{workers}"));
        let status = Command::new(bin)
            .args(["train", "ipd_desk", "--workers", &workers.to_string(), "--out"])
            .arg(&out)
            .env_remove("METAMARL_SEED")
            .status()
            .unwrap();
        assert!(status.success());
        outputs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    let same = outputs[0] == outputs[1];
    report(
        10,
        "train ipd_desk: workers 1 and 8 give byte-identical metrics.csv",
        same && !outputs[0].is_empty(),
        &format!("{} bytes each", outputs[0].len()),
    );
}
