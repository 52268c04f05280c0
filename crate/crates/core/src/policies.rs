//! Tabular softmax policies, persona sampling and persona populations.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::games::MatrixGame;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("persona kind {kind} does not fit game {game}")]
    KindMismatch { kind: PersonaKind, game: String },
    #[error("unknown persona kind {0:?}")]
    UnknownKind(String),
    #[error("split sizes {train}+{val}+{test} do not add up to {total} members")]
    BadSplit { train: usize, val: usize, test: usize, total: usize },
    #[error("population text, line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Logits of one agent, row-major `[n_states x n_actions]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub agent_id: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub logits: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(agent_id: usize, n_states: usize, n_actions: usize) -> Self {
        Self { agent_id, n_states, n_actions, logits: vec![0.0; n_states * n_actions] }
    }

    pub fn for_game(game: &MatrixGame, agent_id: usize) -> Self {
        Self::zeros(agent_id, game.n_states(), game.n_actions)
    }

    pub fn from_logits(agent_id: usize, n_states: usize, n_actions: usize, logits: Vec<f64>) -> Self {
        assert_eq!(logits.len(), n_states * n_actions, "logit table shape");
        assert!(logits.iter().all(|x| x.is_finite()), "logits must be finite");
        Self { agent_id, n_states, n_actions, logits }
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.logits[state * self.n_actions..(state + 1) * self.n_actions]
    }

    pub fn action_probs(&self, state: usize) -> Vec<f64> {
        softmax(self.row(state))
    }

    pub fn log_probs(&self, state: usize) -> Vec<f64> {
        log_softmax(self.row(state))
    }

    /// Draws an action by inverse CDF on one uniform variate; returns the
    /// action and its log-probability.
    pub fn sample_action<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> (usize, f64) {
        let p = self.action_probs(state);
        let a = sample_index(&p, rng);
        (a, self.log_probs(state)[a])
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
    let ls = s.ln();
    row.iter().map(|x| x - m - ls).collect()
}

pub(crate) fn sample_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the last partial sum
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum PersonaKind {
    Cooperating,
    Defecting,
    Rock,
    Paper,
    Scissors,
    Uniform,
}

impl PersonaKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PersonaKind::Cooperating => "cooperating",
            PersonaKind::Defecting => "defecting",
            PersonaKind::Rock => "rock",
            PersonaKind::Paper => "paper",
            PersonaKind::Scissors => "scissors",
            PersonaKind::Uniform => "uniform",
        }
    }

    fn fits(self, game: &MatrixGame) -> bool {
        match self {
            PersonaKind::Cooperating | PersonaKind::Defecting => game.n_actions == 2,
            PersonaKind::Rock | PersonaKind::Paper | PersonaKind::Scissors => game.n_actions == 3,
            PersonaKind::Uniform => true,
        }
    }
}

impl fmt::Display for PersonaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PersonaKind {
    type Err = PolicyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "cooperating" => PersonaKind::Cooperating,
            "defecting" => PersonaKind::Defecting,
            "rock" => PersonaKind::Rock,
            "paper" => PersonaKind::Paper,
            "scissors" => PersonaKind::Scissors,
            "uniform" => PersonaKind::Uniform,
            _ => return Err(PolicyError::UnknownKind(s.to_string())),
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct PersonaSpec {
    pub kind: PersonaKind,
    pub seed: u64,
}

// Keeps logits finite when a sampled probability is 0.
const MIN_PROB: f64 = 1e-12;

/// Samples a persona from its own seed, so every population member can be
/// regenerated from its record alone.
pub fn sample_persona(game: &MatrixGame, spec: PersonaSpec, agent_id: usize) -> Result<PolicyParams, PolicyError> {
    if !spec.kind.fits(game) {
        return Err(PolicyError::KindMismatch { kind: spec.kind, game: game.name.clone() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_states = game.n_states();
    let n_actions = game.n_actions;
    let mut logits = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states {
        let probs: Vec<f64> = match spec.kind {
            PersonaKind::Uniform => vec![1.0 / n_actions as f64; n_actions],
            PersonaKind::Cooperating => {
                let pc = rng.gen_range(0.5..1.0);
                vec![pc, 1.0 - pc]
            }
            PersonaKind::Defecting => {
                let pc = rng.gen_range(0.0..0.5);
                vec![pc, 1.0 - pc]
            }
            PersonaKind::Rock => preference_row(0, &mut rng),
            PersonaKind::Paper => preference_row(1, &mut rng),
            PersonaKind::Scissors => preference_row(2, &mut rng),
        };
        if spec.kind == PersonaKind::Uniform {
            logits.extend(std::iter::repeat_n(0.0, n_actions));
        } else {
            logits.extend(probs.iter().map(|p| p.max(MIN_PROB).ln()));
        }
    }
    Ok(PolicyParams::from_logits(agent_id, n_states, n_actions, logits))
}

/// Preferred action gets p ~ U[1/3, 1]; the rest is split uniformly between
/// the other two, redrawn until the preferred action is strictly largest.
fn preference_row<R: Rng>(preferred: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let p = rng.gen_range(1.0 / 3.0..=1.0);
        let rest = 1.0 - p;
        let u: f64 = rng.gen();
        let (a, b) = (rest * u, rest * (1.0 - u));
        if p > a && p > b {
            let mut row = vec![0.0; 3];
            row[preferred] = p;
            row[(preferred + 1) % 3] = a;
            row[(preferred + 2) % 3] = b;
            return row;
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub spec: PersonaSpec,
    pub params: PolicyParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub game: String,
    pub members: Vec<Member>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Population {
    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_of(&self, idx: usize) -> Split {
        if self.train.contains(&idx) {
            Split::Train
        } else if self.val.contains(&idx) {
            Split::Val
        } else {
            Split::Test
        }
    }

    /// One header line, then one line per member:
    /// `kind seed split logit...` with logits in round-trip exponent form.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let (ns, na) = self
            .members
            .first()
            .map(|m| (m.params.n_states, m.params.n_actions))
            .unwrap_or((0, 0));
        out.push_str(&format!(
            "population game={} members={} n_states={} n_actions={}\n",
            self.game,
            self.members.len(),
            ns,
            na
        ));
        for (i, m) in self.members.iter().enumerate() {
            out.push_str(&format!("{} {} {}", m.spec.kind, m.spec.seed, self.split_of(i).as_str()));
            for x in &m.params.logits {
                out.push_str(&format!(" {x:.16e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn load(text: &str) -> Result<Population, PolicyError> {
        let perr = |line: usize, msg: &str| PolicyError::Parse { line, msg: msg.to_string() };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty input"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("population") {
            return Err(perr(1, "missing population header"));
        }
        let mut game = None;
        let mut count = None;
        let mut ns = None;
        let mut na = None;
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| perr(1, "malformed header field"))?;
            match k {
                "game" => game = Some(v.to_string()),
                "members" => count = v.parse::<usize>().ok(),
                "n_states" => ns = v.parse::<usize>().ok(),
                "n_actions" => na = v.parse::<usize>().ok(),
                _ => return Err(perr(1, "unknown header field")),
            }
        }
        let (game, count, ns, na) = match (game, count, ns, na) {
            (Some(g), Some(c), Some(s), Some(a)) => (g, c, s, a),
            _ => return Err(perr(1, "incomplete header")),
        };
        let mut pop = Population { game, members: vec![], train: vec![], val: vec![], test: vec![] };
        for (ln, line) in lines {
            let ln = ln + 1;
            let mut f = line.split_whitespace();
            let kind: PersonaKind = f.next().ok_or_else(|| perr(ln, "missing kind"))?.parse()?;
            let seed: u64 = f
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| perr(ln, "bad seed"))?;
            let split = match f.next() {
                Some("train") => Split::Train,
                Some("val") => Split::Val,
                Some("test") => Split::Test,
                _ => return Err(perr(ln, "bad split")),
            };
            let logits: Vec<f64> = f
                .map(|x| x.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| perr(ln, "bad logit"))?;
            if logits.len() != ns * na || logits.iter().any(|x| !x.is_finite()) {
                return Err(perr(ln, "logit count or value"));
            }
            let idx = pop.members.len();
            match split {
                Split::Train => pop.train.push(idx),
                Split::Val => pop.val.push(idx),
                Split::Test => pop.test.push(idx),
            }
            pop.members.push(Member {
                spec: PersonaSpec { kind, seed },
                params: PolicyParams::from_logits(1, ns, na, logits),
            });
        }
        if pop.members.len() != count {
            return Err(perr(1, "member count does not match header"));
        }
        Ok(pop)
    }
}

/// Samples `count` personas per kind, shuffles, and splits into
/// train/val/test of the given sizes.
pub fn build_population(
    game: &MatrixGame,
    counts: &[(PersonaKind, usize)],
    split: (usize, usize, usize),
    seed: u64,
) -> Result<Population, PolicyError> {
    let total: usize = counts.iter().map(|c| c.1).sum();
    if split.0 + split.1 + split.2 != total {
        return Err(PolicyError::BadSplit { train: split.0, val: split.1, test: split.2, total });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members = Vec::with_capacity(total);
    for &(kind, n) in counts {
        for _ in 0..n {
            let spec = PersonaSpec { kind, seed: rng.next_u64() };
            members.push(Member { spec, params: sample_persona(game, spec, 1)? });
        }
    }
    members.shuffle(&mut rng);
    let train = (0..split.0).collect();
    let val = (split.0..split.0 + split.1).collect();
    let test = (split.0 + split.1..total).collect();
    Ok(Population { game: game.name.clone(), members, train, val, test })
}

pub fn ipd_population(game: &MatrixGame, seed: u64) -> Result<Population, PolicyError> {
    build_population(
        game,
        &[(PersonaKind::Cooperating, 240), (PersonaKind::Defecting, 240)],
        (400, 40, 40),
        seed,
    )
}

pub fn rps_population(game: &MatrixGame, seed: u64) -> Result<Population, PolicyError> {
    build_population(
        game,
        &[(PersonaKind::Rock, 240), (PersonaKind::Paper, 240), (PersonaKind::Scissors, 240)],
        (600, 60, 60),
        seed,
    )
}
