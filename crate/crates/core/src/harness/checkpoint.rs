//! Text checkpoints of meta-parameters.
//!
//! ```text
//! metamarl-checkpoint 1
//! config_hash <sha256 hex>
//! master_seed <u64>
//! seed <u64>
//! policy <agent_id> <n_states> <n_actions>
//! logits <v>...
//! log_inner_lrs <count> <v>...
//! ```
//!
//! Reals are written with 17 significant digits, which round-trips every
//! `f64` exactly.

use thiserror::Error;

use crate::meta::MetaParams;
use crate::policies::PolicyParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("checkpoint line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint was written for config {found}, current config is {expected}")]
    HashMismatch { expected: String, found: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: MetaParams,
    pub config_hash: String,
    pub master_seed: u64,
    pub seed: u64,
}

fn reals(xs: &[f64]) -> String {
    xs.iter().map(|x| format!(" {x:.16e}")).collect()
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let p = &self.params.phi0;
        let mut s = format!(
            "metamarl-checkpoint 1\nconfig_hash {}\nmaster_seed {}\nseed {}\npolicy {} {} {}\nlogits{}\n",
            self.config_hash,
            self.master_seed,
            self.seed,
            p.agent_id,
            p.n_states,
            p.n_actions,
            reals(&p.logits)
        );
        match &self.params.log_inner_lrs {
            Some(l) => s.push_str(&format!("log_inner_lrs {}{}\n", l.len(), reals(l))),
            None => s.push_str("log_inner_lrs none\n"),
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, CheckpointError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()));
        let mut next = |tag: &str| -> Result<(usize, Vec<&str>), CheckpointError> {
            match lines.next() {
                Some((n, f)) if f.first() == Some(&tag) => Ok((n, f[1..].to_vec())),
                Some((n, _)) => Err(CheckpointError::Parse { line: n, msg: format!("expected {tag}") }),
                None => Err(CheckpointError::Parse { line: 0, msg: format!("truncated before {tag}") }),
            }
        };
        let perr = |line: usize, msg: &str| CheckpointError::Parse { line, msg: msg.to_string() };
        fn one<T: std::str::FromStr>(n: usize, f: &[&str]) -> Result<T, CheckpointError> {
            match f {
                [x] => x.parse().map_err(|_| CheckpointError::Parse { line: n, msg: format!("bad value {x:?}") }),
                _ => Err(CheckpointError::Parse { line: n, msg: "expected one value".into() }),
            }
        }
        let parse_reals = |n: usize, f: &[&str]| -> Result<Vec<f64>, CheckpointError> {
            f.iter()
                .map(|x| x.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| perr(n, "bad real")))
                .collect()
        };
        let (n, f) = next("metamarl-checkpoint")?;
        if f != ["1"] {
            return Err(perr(n, "unsupported version"));
        }
        let (n, f) = next("config_hash")?;
        let config_hash: String = one(n, &f)?;
        let (n, f) = next("master_seed")?;
        let master_seed = one(n, &f)?;
        let (n, f) = next("seed")?;
        let seed = one(n, &f)?;
        let (n, f) = next("policy")?;
        let dims: Vec<usize> = f.iter().map(|x| x.parse().map_err(|_| perr(n, "bad shape"))).collect::<Result<_, _>>()?;
        let [agent_id, n_states, n_actions] = dims[..] else {
            return Err(perr(n, "expected three dimensions"));
        };
        let (n, f) = next("logits")?;
        let logits = parse_reals(n, &f)?;
        if logits.len() != n_states * n_actions {
            return Err(perr(n, "logit count does not match shape"));
        }
        let (n, f) = next("log_inner_lrs")?;
        let log_inner_lrs = match f.as_slice() {
            ["none"] => None,
            [count, rest @ ..] => {
                let c: usize = count.parse().map_err(|_| perr(n, "bad count"))?;
                let v = parse_reals(n, rest)?;
                if v.len() != c {
                    return Err(perr(n, "count does not match values"));
                }
                Some(v)
            }
            [] => return Err(perr(n, "missing values")),
        };
        let phi0 = PolicyParams::from_logits(agent_id, n_states, n_actions, logits);
        Ok(Checkpoint { params: MetaParams { phi0, log_inner_lrs }, config_hash, master_seed, seed })
    }

    /// Parses and refuses a checkpoint written under a different config.
    pub fn load(text: &str, expected_hash: &str) -> Result<Self, CheckpointError> {
        let c = Self::parse(text)?;
        if c.config_hash != expected_hash {
            return Err(CheckpointError::HashMismatch { expected: expected_hash.into(), found: c.config_hash });
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ckpt(logits: Vec<f64>, lrs: Option<Vec<f64>>) -> Checkpoint {
        Checkpoint {
            params: MetaParams { phi0: PolicyParams::from_logits(0, logits.len() / 2, 2, logits), log_inner_lrs: lrs },
            config_hash: "abc".into(),
            master_seed: 7,
            seed: 2,
        }
    }

    #[test]
    fn mismatch_and_empty() {
        let c = ckpt(vec![0.1, -0.2], None);
        assert!(matches!(Checkpoint::load(&c.to_text(), "abd"), Err(CheckpointError::HashMismatch { .. })));
        assert!(Checkpoint::parse("").is_err());
        assert!(Checkpoint::parse("metamarl-checkpoint 2\n").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            logits in proptest::collection::vec(-1e6f64..1e6, 1..6).prop_map(|mut v| { if v.len() % 2 == 1 { v.push(0.5) } v }),
            lrs in proptest::option::of(proptest::collection::vec(-5.0f64..5.0, 0..4)),
        ) {
            let c = ckpt(logits, lrs);
            let back = Checkpoint::load(&c.to_text(), "abc").unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
