//! Flat `key = value` experiment configuration.
//!
//! Lines are applied in order; `include = <preset or path>` splices another
//! file in place, so keys after it override the included values. `#` starts
//! a comment.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::games::{make_ipd, make_rps, MatrixGame};
use crate::meta::{CrossBaseline, EstimatorPath, Method};
use crate::policies::{ipd_population, rps_population, Population};

pub const PRESETS: &[(&str, &str)] = &[
    ("ipd", include_str!("../../presets/ipd.cfg")),
    ("ipd_desk", include_str!("../../presets/ipd_desk.cfg")),
    ("rps", include_str!("../../presets/rps.cfg")),
    ("zero_sum", include_str!("../../presets/zero_sum.cfg")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{source_name}:{line}: {msg}")]
    Syntax { source_name: String, line: usize, msg: String },
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("include cycle through {0}")]
    Cycle(String),
    #[error("invalid value for {key}: {msg}")]
    Value { key: String, msg: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum GameKind {
    Ipd,
    Rps,
    ZeroSum,
}

impl GameKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GameKind::Ipd => "ipd",
            GameKind::Rps => "rps",
            GameKind::ZeroSum => "zero_sum",
        }
    }
}

impl FromStr for GameKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "ipd" => GameKind::Ipd,
            "rps" => GameKind::Rps,
            "zero_sum" => GameKind::ZeroSum,
            _ => return Err(format!("unknown game {s:?}")),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub game: GameKind,
    pub n_agents: usize,
    pub method: Method,
    pub estimator_path: EstimatorPath,
    pub k: usize,
    pub h: usize,
    pub l: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    /// Inner learning rate of the meta-agent.
    pub inner_lr: f64,
    /// Inner learning rate of every peer.
    pub peer_inner_lr: f64,
    pub outer_lr: f64,
    pub learn_inner_lrs: bool,
    pub opponent_modeling: bool,
    pub om_lr: f64,
    pub om_tol: f64,
    pub om_max_iters: usize,
    pub cross_baseline: CrossBaseline,
    pub pcgrad: bool,
    /// `ipd`, `rps`, or a path to a population dump.
    pub population: String,
    pub population_seed: u64,
    pub peers_per_batch: usize,
    pub max_iters: usize,
    pub patience: usize,
    pub val_every: usize,
    /// Validation chains per check (0 = the whole split).
    pub val_peers: usize,
    /// Test chains (0 = the whole split).
    pub test_peers: usize,
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    pub workers: usize,
    pub async_mode: bool,
    /// Sample count for the zero-sum game.
    pub samples: usize,
    /// Directory the population path is resolved against.
    pub base_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            game: GameKind::Ipd,
            n_agents: 2,
            method: Method::MetaMapg,
            estimator_path: EstimatorPath::ScoreFunction,
            k: 4,
            h: 150,
            l: 7,
            gamma: 0.96,
            gae_lambda: 0.95,
            inner_lr: 1.0,
            peer_inner_lr: 0.1,
            outer_lr: 1e-4,
            learn_inner_lrs: false,
            opponent_modeling: false,
            om_lr: 4.0,
            om_tol: 1e-10,
            om_max_iters: 500,
            cross_baseline: CrossBaseline::FittedValue,
            pcgrad: true,
            population: "ipd".into(),
            population_seed: 0,
            peers_per_batch: 5,
            max_iters: 100,
            patience: 0,
            val_every: 0,
            val_peers: 0,
            test_peers: 0,
            seeds: vec![0],
            master_seed: 0,
            workers: 1,
            async_mode: false,
            samples: 200,
            base_dir: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| ConfigError::Value { key: key.into(), msg: e.to_string() })
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::Value { key: key.into(), msg: format!("expected a boolean, got {v:?}") }),
    }
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "run_id" => self.run_id = v.to_string(),
            "game" => self.game = parse_value(key, v)?,
            "n_agents" => self.n_agents = parse_value(key, v)?,
            "method" => self.method = parse_value(key, v)?,
            "estimator_path" => self.estimator_path = parse_value(key, v)?,
            "k" => self.k = parse_value(key, v)?,
            "h" => self.h = parse_value(key, v)?,
            "l" => self.l = parse_value(key, v)?,
            "gamma" => self.gamma = parse_value(key, v)?,
            "gae_lambda" => self.gae_lambda = parse_value(key, v)?,
            "inner_lr" => self.inner_lr = parse_value(key, v)?,
            "peer_inner_lr" => self.peer_inner_lr = parse_value(key, v)?,
            "outer_lr" => self.outer_lr = parse_value(key, v)?,
            "learn_inner_lrs" => self.learn_inner_lrs = parse_bool(key, v)?,
            "opponent_modeling" => self.opponent_modeling = parse_bool(key, v)?,
            "om_lr" => self.om_lr = parse_value(key, v)?,
            "om_tol" => self.om_tol = parse_value(key, v)?,
            "om_max_iters" => self.om_max_iters = parse_value(key, v)?,
            "cross_baseline" => self.cross_baseline = parse_value(key, v)?,
            "pcgrad" => self.pcgrad = parse_bool(key, v)?,
            "population" => self.population = v.to_string(),
            "population_seed" => self.population_seed = parse_value(key, v)?,
            "peers_per_batch" => self.peers_per_batch = parse_value(key, v)?,
            "max_iters" => self.max_iters = parse_value(key, v)?,
            "patience" => self.patience = parse_value(key, v)?,
            "val_every" => self.val_every = parse_value(key, v)?,
            "val_peers" => self.val_peers = parse_value(key, v)?,
            "test_peers" => self.test_peers = parse_value(key, v)?,
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_value(key, s))
                    .collect::<Result<_, _>>()?
            }
            "master_seed" => self.master_seed = parse_value(key, v)?,
            "workers" => self.workers = parse_value(key, v)?,
            "async_mode" => self.async_mode = parse_bool(key, v)?,
            "samples" => self.samples = parse_value(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses config text. Relative includes and population paths resolve
    /// against `base_dir`.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig { base_dir: base_dir.map(Path::to_path_buf), ..Default::default() };
        let mut stack = BTreeSet::new();
        apply(&mut cfg, text, "<config>", base_dir, &mut stack)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        Self::parse(&text, path.parent())
    }

    /// A preset by name or a file path.
    pub fn load(name_or_path: &str) -> Result<Self, ConfigError> {
        match preset(name_or_path) {
            Some(text) if !Path::new(name_or_path).exists() => Self::parse(text, None),
            _ => Self::from_file(Path::new(name_or_path)),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.k < 1 {
            return bad("k must be at least 1");
        }
        if self.h < 1 {
            return bad("h must be at least 1");
        }
        if self.l < 1 {
            return bad("l must be at least 1");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if self.workers < 1 {
            return bad("workers must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.peers_per_batch < 1 {
            return bad("peers_per_batch must be at least 1");
        }
        for (name, x) in [
            ("inner_lr", self.inner_lr),
            ("peer_inner_lr", self.peer_inner_lr),
            ("outer_lr", self.outer_lr),
            ("om_lr", self.om_lr),
        ] {
            if !x.is_finite() || x < 0.0 {
                return Err(ConfigError::Invalid(format!("{name} must be finite and non-negative")));
            }
        }
        if self.learn_inner_lrs && self.inner_lr <= 0.0 {
            return bad("learned inner learning rates need a positive initial inner_lr");
        }
        if self.n_agents < 2 {
            return bad("n_agents must be at least 2");
        }
        if matches!(self.game, GameKind::Ipd | GameKind::ZeroSum) && self.n_agents != 2 {
            return bad("this game has exactly two agents");
        }
        if self.run_id.is_empty() || self.run_id.contains([',', '\n', '"']) {
            return bad("run_id must be non-empty without commas or quotes");
        }
        Ok(())
    }

    /// Resolved configuration in canonical key order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        vec![
            ("run_id", self.run_id.clone()),
            ("game", self.game.as_str().into()),
            ("n_agents", self.n_agents.to_string()),
            ("method", self.method.as_str().into()),
            ("estimator_path", self.estimator_path.as_str().into()),
            ("k", self.k.to_string()),
            ("h", self.h.to_string()),
            ("l", self.l.to_string()),
            ("gamma", format!("{:?}", self.gamma)),
            ("gae_lambda", format!("{:?}", self.gae_lambda)),
            ("inner_lr", format!("{:?}", self.inner_lr)),
            ("peer_inner_lr", format!("{:?}", self.peer_inner_lr)),
            ("outer_lr", format!("{:?}", self.outer_lr)),
            ("learn_inner_lrs", self.learn_inner_lrs.to_string()),
            ("opponent_modeling", self.opponent_modeling.to_string()),
            ("om_lr", format!("{:?}", self.om_lr)),
            ("om_tol", format!("{:?}", self.om_tol)),
            ("om_max_iters", self.om_max_iters.to_string()),
            ("cross_baseline", self.cross_baseline.as_str().into()),
            ("pcgrad", self.pcgrad.to_string()),
            ("population", self.population.clone()),
            ("population_seed", self.population_seed.to_string()),
            ("peers_per_batch", self.peers_per_batch.to_string()),
            ("max_iters", self.max_iters.to_string()),
            ("patience", self.patience.to_string()),
            ("val_every", self.val_every.to_string()),
            ("val_peers", self.val_peers.to_string()),
            ("test_peers", self.test_peers.to_string()),
            ("seeds", seeds.join(",")),
            ("master_seed", self.master_seed.to_string()),
            ("workers", self.workers.to_string()),
            ("async_mode", self.async_mode.to_string()),
            ("samples", self.samples.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of the canonical text, leaving out keys that do not change
    /// results (`workers`).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_pairs() {
            if k == "workers" {
                continue;
            }
            h.update(format!("{k} = {v}\n").as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Method label used in metrics rows.
    pub fn method_label(&self) -> String {
        if self.opponent_modeling {
            format!("{}_om", self.method.as_str())
        } else {
            self.method.as_str().to_string()
        }
    }

    pub fn build_game(&self) -> Result<MatrixGame, String> {
        match self.game {
            GameKind::Ipd => Ok(make_ipd()),
            GameKind::Rps => make_rps(self.n_agents).map_err(|e| e.to_string()),
            GameKind::ZeroSum => Err("the zero-sum game has scalar parameters and no population".into()),
        }
    }

    pub fn build_population(&self, game: &MatrixGame) -> Result<Population, String> {
        let pop = match self.population.as_str() {
            "ipd" => ipd_population(game, self.population_seed).map_err(|e| e.to_string())?,
            "rps" => rps_population(game, self.population_seed).map_err(|e| e.to_string())?,
            path => {
                let p = match &self.base_dir {
                    Some(d) if Path::new(path).is_relative() => d.join(path),
                    _ => PathBuf::from(path),
                };
                let text = std::fs::read_to_string(&p).map_err(|e| format!("cannot read {}: {e}", p.display()))?;
                Population::load(&text).map_err(|e| e.to_string())?
            }
        };
        let shape_ok = pop
            .members
            .iter()
            .all(|m| m.params.n_states == game.n_states() && m.params.n_actions == game.n_actions);
        if !shape_ok {
            return Err(format!("population {} does not fit game {}", self.population, game.name));
        }
        Ok(pop)
    }
}

fn apply(
    cfg: &mut ExperimentConfig,
    text: &str,
    source_name: &str,
    base_dir: Option<&Path>,
    stack: &mut BTreeSet<String>,
) -> Result<(), ConfigError> {
    if !stack.insert(source_name.to_string()) {
        return Err(ConfigError::Cycle(source_name.to_string()));
    }
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let syntax = |msg: &str| ConfigError::Syntax { source_name: source_name.into(), line: i + 1, msg: msg.into() };
        let (k, v) = line.split_once('=').ok_or_else(|| syntax("expected key = value"))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(syntax("empty key"));
        }
        if k == "include" {
            let as_path = base_dir.map(|d| d.join(v)).unwrap_or_else(|| PathBuf::from(v));
            if as_path.is_file() {
                let body = std::fs::read_to_string(&as_path)
                    .map_err(|e| ConfigError::Io { path: as_path.display().to_string(), msg: e.to_string() })?;
                let name = as_path.display().to_string();
                apply(cfg, &body, &name, as_path.parent(), stack)?;
            } else if let Some(body) = preset(v) {
                apply(cfg, body, v, base_dir, stack)?;
            } else {
                return Err(syntax(&format!("cannot include {v:?}: no such preset or file")));
            }
        } else {
            cfg.set(k, v)?;
        }
    }
    stack.remove(source_name);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn include_then_override() {
        let c = ExperimentConfig::parse("include = ipd\nk = 7\n# comment\nmethod = meta_pg", None).unwrap();
        assert_eq!(c.k, 7);
        assert_eq!(c.h, 150);
        assert_eq!(c.method, Method::MetaPg);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(ExperimentConfig::parse("k 3", None), Err(ConfigError::Syntax { .. })));
        assert!(matches!(ExperimentConfig::parse("nope = 3", None), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(ExperimentConfig::parse("gamma = 1.0", None), Err(ConfigError::Invalid(_))));
        assert!(matches!(ExperimentConfig::parse("k = 0", None), Err(ConfigError::Invalid(_))));
        assert!(matches!(ExperimentConfig::parse("gae_lambda = 1.5", None), Err(ConfigError::Invalid(_))));
        assert!(matches!(ExperimentConfig::parse("method = lola", None), Err(ConfigError::Value { .. })));
        assert!(ExperimentConfig::parse("include = missing_preset", None).is_err());
    }

    #[test]
    fn hash_ignores_workers_only() {
        let a = ExperimentConfig::parse("include = ipd_desk", None).unwrap();
        let b = ExperimentConfig::parse("include = ipd_desk\nworkers = 8", None).unwrap();
        let c = ExperimentConfig::parse("include = ipd_desk\nk = 31", None).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn canonical_text_round_trips() {
        let a = ExperimentConfig::parse("include = ipd_desk\nouter_lr = 0.1\nseeds = 3,4", None).unwrap();
        let b = ExperimentConfig::parse(&a.to_text(), None).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn include_cycle_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.cfg"), "include = b.cfg\n").unwrap();
        std::fs::write(dir.path().join("b.cfg"), "include = a.cfg\n").unwrap();
        let e = ExperimentConfig::from_file(&dir.path().join("a.cfg")).unwrap_err();
        assert!(matches!(e, ConfigError::Cycle(_)));
    }
}
