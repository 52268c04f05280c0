//! Repeated matrix games with the previous joint action as state.
//!
//! State 0 is the episode start; state `1 + j` means the previous joint
//! action had row-major index `j` (agent 0 is the most significant digit).

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GameError {
    #[error("game needs at least {min} agents, got {got}")]
    TooFewAgents { min: usize, got: usize },
    #[error("action {action} of agent {agent} is out of range (game has {n_actions} actions)")]
    BadAction { agent: usize, action: usize, n_actions: usize },
    #[error("joint action has {got} entries, game has {expected} agents")]
    BadArity { expected: usize, got: usize },
    #[error("state {state} is out of range (game has {n_states} states)")]
    BadState { state: usize, n_states: usize },
    #[error("payoff table has {got} entries, expected {expected}")]
    BadPayoff { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixGame {
    pub name: String,
    pub n_agents: usize,
    pub n_actions: usize,
    /// `payoff[j * n_agents + k]` is agent `k`'s reward for joint action `j`.
    payoff: Vec<f64>,
    pub horizon_default: usize,
    /// True when rewards for more than two players are sums of pairwise
    /// two-player payoffs.
    pub pairwise_sum: bool,
}

impl MatrixGame {
    pub fn new(
        name: &str,
        n_agents: usize,
        n_actions: usize,
        payoff: Vec<f64>,
        horizon_default: usize,
    ) -> Result<Self, GameError> {
        if n_agents < 1 {
            return Err(GameError::TooFewAgents { min: 1, got: n_agents });
        }
        let expected = n_actions.pow(n_agents as u32) * n_agents;
        if payoff.len() != expected {
            return Err(GameError::BadPayoff { expected, got: payoff.len() });
        }
        Ok(Self {
            name: name.to_string(),
            n_agents,
            n_actions,
            payoff,
            horizon_default,
            pairwise_sum: false,
        })
    }

    pub fn n_joint(&self) -> usize {
        self.n_actions.pow(self.n_agents as u32)
    }

    pub fn n_states(&self) -> usize {
        self.n_joint() + 1
    }

    pub fn joint_index(&self, actions: &[usize]) -> Result<usize, GameError> {
        if actions.len() != self.n_agents {
            return Err(GameError::BadArity { expected: self.n_agents, got: actions.len() });
        }
        let mut idx = 0;
        for (agent, &a) in actions.iter().enumerate() {
            if a >= self.n_actions {
                return Err(GameError::BadAction { agent, action: a, n_actions: self.n_actions });
            }
            idx = idx * self.n_actions + a;
        }
        Ok(idx)
    }

    pub fn decode_joint(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.n_agents];
        for k in (0..self.n_agents).rev() {
            out[k] = idx % self.n_actions;
            idx /= self.n_actions;
        }
        out
    }

    pub fn encode_state(&self, prev: Option<&[usize]>) -> Result<usize, GameError> {
        match prev {
            None => Ok(0),
            Some(a) => Ok(self.joint_index(a)? + 1),
        }
    }

    pub fn decode_state(&self, state: usize) -> Result<Option<Vec<usize>>, GameError> {
        if state >= self.n_states() {
            return Err(GameError::BadState { state, n_states: self.n_states() });
        }
        Ok(if state == 0 { None } else { Some(self.decode_joint(state - 1)) })
    }

    pub fn payoff(&self, actions: &[usize]) -> Result<&[f64], GameError> {
        let j = self.joint_index(actions)?;
        Ok(self.payoff_by_index(j))
    }

    #[inline]
    pub fn payoff_by_index(&self, joint: usize) -> &[f64] {
        &self.payoff[joint * self.n_agents..(joint + 1) * self.n_agents]
    }

    #[inline]
    pub fn reward(&self, joint: usize, agent: usize) -> f64 {
        self.payoff[joint * self.n_agents + agent]
    }

    /// Transitions ignore the current state: the next state is the joint
    /// action just played.
    pub fn step(&self, state: usize, actions: &[usize]) -> Result<(usize, Vec<f64>), GameError> {
        if state >= self.n_states() {
            return Err(GameError::BadState { state, n_states: self.n_states() });
        }
        let j = self.joint_index(actions)?;
        Ok((j + 1, self.payoff_by_index(j).to_vec()))
    }

    pub fn is_zero_sum(&self) -> bool {
        (0..self.n_joint()).all(|j| self.payoff_by_index(j).iter().sum::<f64>().abs() < 1e-12)
    }
}

pub const COOPERATE: usize = 0;
pub const DEFECT: usize = 1;
pub const ROCK: usize = 0;
pub const PAPER: usize = 1;
pub const SCISSORS: usize = 2;

/// Iterated prisoner's dilemma with actions C=0, D=1.
pub fn make_ipd() -> MatrixGame {
    let payoff = vec![
        0.5, 0.5, // (C, C)
        -1.5, 1.5, // (C, D)
        1.5, -1.5, // (D, C)
        -0.5, -0.5, // (D, D)
    ];
    MatrixGame::new("ipd", 2, 2, payoff, 150).expect("static table")
}

fn rps_pair(a: usize, b: usize) -> f64 {
    match (a + 3 - b) % 3 {
        0 => 0.0,
        1 => 1.0,
        _ => -1.0,
    }
}

/// Rock-paper-scissors (R=0, P=1, S=2). With more than two players each
/// reward is the sum of the two-player payoffs against every other player.
pub fn make_rps(n_agents: usize) -> Result<MatrixGame, GameError> {
    if n_agents < 2 {
        return Err(GameError::TooFewAgents { min: 2, got: n_agents });
    }
    let mut game = MatrixGame::new(
        &format!("rps{n_agents}"),
        n_agents,
        3,
        vec![0.0; 3usize.pow(n_agents as u32) * n_agents],
        150,
    )?;
    for j in 0..game.n_joint() {
        let acts = game.decode_joint(j);
        for k in 0..n_agents {
            let r: f64 = (0..n_agents).filter(|&m| m != k).map(|m| rps_pair(acts[k], acts[m])).sum();
            game.payoff[j * n_agents + k] = r;
        }
    }
    game.name = if n_agents == 2 { "rps".into() } else { format!("rps{n_agents}") };
    game.pairwise_sum = n_agents > 2;
    Ok(game)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ipd_table() {
        let g = make_ipd();
        assert_eq!(g.n_states(), 5);
        assert_eq!(g.payoff(&[COOPERATE, COOPERATE]).unwrap(), &[0.5, 0.5]);
        assert_eq!(g.payoff(&[COOPERATE, DEFECT]).unwrap(), &[-1.5, 1.5]);
        assert_eq!(g.payoff(&[DEFECT, COOPERATE]).unwrap(), &[1.5, -1.5]);
        assert_eq!(g.payoff(&[DEFECT, DEFECT]).unwrap(), &[-0.5, -0.5]);
        assert!(!g.is_zero_sum());
    }

    #[test]
    fn rps_two_player_table() {
        let g = make_rps(2).unwrap();
        assert_eq!(g.payoff(&[ROCK, PAPER]).unwrap(), &[-1.0, 1.0]);
        assert_eq!(g.payoff(&[SCISSORS, SCISSORS]).unwrap(), &[0.0, 0.0]);
        assert_eq!(g.payoff(&[PAPER, ROCK]).unwrap(), &[1.0, -1.0]);
        assert_eq!(g.payoff(&[SCISSORS, PAPER]).unwrap(), &[1.0, -1.0]);
        assert!(!g.pairwise_sum);
    }

    #[test]
    fn rps_three_player_is_pairwise_and_zero_sum() {
        let g = make_rps(3).unwrap();
        assert_eq!(g.payoff(&[ROCK, PAPER, SCISSORS]).unwrap(), &[0.0, 0.0, 0.0]);
        assert_eq!(g.payoff(&[ROCK, ROCK, SCISSORS]).unwrap(), &[1.0, 1.0, -2.0]);
        assert_eq!(g.n_joint(), 27);
        assert!(g.is_zero_sum());
        assert!(g.pairwise_sum);
        assert!(make_rps(4).unwrap().is_zero_sum());
        assert_eq!(make_rps(1), Err(GameError::TooFewAgents { min: 2, got: 1 }));
    }

    #[test]
    fn state_encoding() {
        let g = make_ipd();
        assert_eq!(g.encode_state(None).unwrap(), 0);
        assert_eq!(g.encode_state(Some(&[COOPERATE, COOPERATE])).unwrap(), 1);
        assert_eq!(g.decode_state(1).unwrap(), Some(vec![COOPERATE, COOPERATE]));
        assert_eq!(g.encode_state(Some(&[DEFECT, DEFECT])).unwrap(), 4);
        assert_eq!(g.decode_state(0).unwrap(), None);
        assert!(g.encode_state(Some(&[2, 0])).is_err());
        assert!(g.decode_state(5).is_err());
        for s in 1..g.n_states() {
            let a = g.decode_state(s).unwrap().unwrap();
            assert_eq!(g.encode_state(Some(&a)).unwrap(), s);
        }
    }

    #[test]
    fn step_ignores_state() {
        let g = make_ipd();
        for s in 0..5 {
            assert_eq!(g.step(s, &[COOPERATE, DEFECT]).unwrap(), (2, vec![-1.5, 1.5]));
        }
        assert_eq!(g.step(3, &[COOPERATE, COOPERATE]).unwrap(), (1, vec![0.5, 0.5]));
        let r = make_rps(2).unwrap();
        let (s, rew) = r.step(0, &[PAPER, ROCK]).unwrap();
        assert_eq!(r.decode_state(s).unwrap(), Some(vec![PAPER, ROCK]));
        assert_eq!(rew, vec![1.0, -1.0]);
        assert!(g.step(0, &[0, 5]).is_err());
    }
}
