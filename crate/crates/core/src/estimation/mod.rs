//! Penalized maximum-likelihood estimation, Gram bookkeeping and confidence radii.

mod confidence;
mod gram;
mod mle;

use serde::{Deserialize, Serialize};

pub use confidence::ConfidenceConstants;
pub use gram::GramAccumulator;
pub use mle::{
    fit_reward_mle, fit_transition_mle, reward_objective, reward_stationarity,
    transition_objective, transition_stationarity, MleConfig, MleFit,
};

/// One observed step `(s_h^k, a_h^k, r, s_{h+1}^k)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub episode: usize,
    pub step: usize,
    pub s: f64,
    pub a: usize,
    pub r: f64,
    pub s_next: f64,
}

/// Transitions in arrival order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct History {
    pub transitions: Vec<Transition>,
}

impl History {
    pub fn new() -> History {
        History::default()
    }

    pub fn push(&mut self, t: Transition) {
        self.transitions.push(t);
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Transition> {
        self.transitions.iter()
    }

    /// Transitions of episodes `< k` (episodes are numbered from 1).
    pub fn before_episode(&self, k: usize) -> &[Transition] {
        let end = self.transitions.partition_point(|t| t.episode < k);
        &self.transitions[..end]
    }
}

impl FromIterator<Transition> for History {
    fn from_iter<I: IntoIterator<Item = Transition>>(iter: I) -> History {
        History {
            transitions: iter.into_iter().collect(),
        }
    }
}
