//! Online distributed control law: learned feedforward plus error feedback
//! with adaptive gains.
//!
//! Every per-agent computation goes through a [`LocalView`], which only hands
//! out states the agent is allowed to read (itself, its neighbours and the
//! leader when linked). Any other read fails and is counted, which is what the
//! simulator's locality audit reports.

use std::cell::Cell;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{AgentState, LeaderSample};
use crate::formation::{
    augmented_error, inverse_error, local_error, positive, ControllerGains, FormationError,
    FormationSpec,
};
use crate::graph::{CommGraph, GraphError, LEADER};
use crate::neuralnet::{encode_input, NeuralPolicy, NnError};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("agent {agent} attempted to read agent {target} outside its neighbourhood")]
    LocalityViolation { agent: usize, target: usize },
    #[error(transparent)]
    Formation(#[from] FormationError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error("model evaluation failed: {0}")]
    Model(String),
}

/// Adaptive gains of one agent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveGains {
    pub d1: f64,
    pub d2: f64,
}

/// `(d1, d2)` for every follower, starting at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationState {
    pub agents: Vec<AdaptiveGains>,
}

impl AdaptationState {
    pub fn zeros(num_followers: usize) -> Self {
        AdaptationState {
            agents: vec![AdaptiveGains::default(); num_followers],
        }
    }

    pub fn agent(&self, i: usize) -> AdaptiveGains {
        self.agents[i - 1]
    }
}

/// Immutable picture of every agent at the start of a control step.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'a> {
    pub t: f64,
    pub followers: &'a [AgentState],
    pub leader: &'a LeaderSample,
}

/// Read-restricted window on a [`Snapshot`] for one agent.
pub struct LocalView<'a> {
    owner: usize,
    snapshot: Snapshot<'a>,
    permitted: BTreeSet<usize>,
    violations: Cell<u32>,
}

impl<'a> LocalView<'a> {
    pub fn new(g: &CommGraph, owner: usize, snapshot: Snapshot<'a>) -> Result<Self, GraphError> {
        Ok(LocalView {
            owner,
            snapshot,
            permitted: g.permitted_reads(owner)?,
            violations: Cell::new(0),
        })
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn time(&self) -> f64 {
        self.snapshot.t
    }

    fn check(&self, target: usize) -> Result<(), ControlError> {
        if self.permitted.contains(&target) {
            Ok(())
        } else {
            self.violations.set(self.violations.get() + 1);
            Err(ControlError::LocalityViolation {
                agent: self.owner,
                target,
            })
        }
    }

    /// State of follower `j`.
    pub fn follower(&self, j: usize) -> Result<&'a AgentState, ControlError> {
        self.check(j)?;
        self.snapshot
            .followers
            .get(j.wrapping_sub(1))
            .ok_or(ControlError::LocalityViolation {
                agent: self.owner,
                target: j,
            })
    }

    pub fn own(&self) -> &'a AgentState {
        &self.snapshot.followers[self.owner - 1]
    }

    pub fn leader(&self) -> Result<&'a LeaderSample, ControlError> {
        self.check(LEADER)?;
        Ok(self.snapshot.leader)
    }

    /// Number of refused reads so far.
    pub fn violations(&self) -> u32 {
        self.violations.get()
    }
}

/// Error signals of one agent at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSignals {
    pub e1: Vec<f64>,
    pub e1_rate: Vec<f64>,
    pub e2: Vec<f64>,
    pub e2_inverse: Vec<f64>,
}

/// `(e1, e1')` of the view's owner.
pub fn local_errors(
    g: &CommGraph,
    spec: &FormationSpec,
    view: &LocalView<'_>,
) -> Result<(Vec<f64>, Vec<f64>), ControlError> {
    let i = view.owner();
    let own = view.own();
    let mut positions = Vec::new();
    let mut velocities = Vec::new();
    for &j in g.neighbors(i)? {
        let s = view.follower(j)?;
        positions.push((j, s.x1.as_slice()));
        velocities.push((j, s.x2.as_slice()));
    }
    let leader = if g.has_leader_link(i)? {
        Some(view.leader()?)
    } else {
        None
    };
    let e1 = local_error(spec, i, &own.x1, &positions, leader.map(|l| l.x1.as_slice()), true)?;
    let e1_rate = local_error(
        spec,
        i,
        &own.x2,
        &velocities,
        leader.map(|l| l.x2.as_slice()),
        false,
    )?;
    Ok((e1, e1_rate))
}

/// `e1`, `e1'`, `e2` and the dead-zoned inverse error from the agent's view.
pub fn local_signals(
    g: &CommGraph,
    spec: &FormationSpec,
    gains: &ControllerGains,
    view: &LocalView<'_>,
) -> Result<AgentSignals, ControlError> {
    let (e1, e1_rate) = local_errors(g, spec, view)?;
    let e2 = augmented_error(&e1, &e1_rate, gains.agent(view.owner()).k1)?;
    let e2_inverse = inverse_error(&e2, gains.epsilon());
    Ok(AgentSignals {
        e1,
        e1_rate,
        e2,
        e2_inverse,
    })
}

/// Network input for the view's owner with all augmented-graph neighbours
/// active.
pub fn policy_input(
    g: &CommGraph,
    policy: &NeuralPolicy,
    view: &LocalView<'_>,
) -> Result<Vec<f64>, ControlError> {
    let i = view.owner();
    let own = view.own().stacked();
    let mut states = Vec::new();
    for j in g.augmented_neighbors(i)? {
        let stacked = if j == LEADER {
            let l = view.leader()?;
            let mut v = l.x1.clone();
            v.extend_from_slice(&l.x2);
            v
        } else {
            view.follower(j)?.stacked()
        };
        states.push((j, stacked));
    }
    let refs: Vec<(usize, &[f64])> = states.iter().map(|(j, s)| (*j, s.as_slice())).collect();
    let ids: Vec<usize> = states.iter().map(|(j, _)| *j).collect();
    Ok(encode_input(policy.layout(), &own, &refs, &ids)?)
}

/// `u = u_nn - (k2 + d1) e2 - d2 e2_inverse`.
pub fn control_law(
    u_nn: &[f64],
    e2: &[f64],
    e2_inverse: &[f64],
    d: AdaptiveGains,
    k2: f64,
) -> Result<Vec<f64>, FormationError> {
    positive("k2", k2)?;
    if e2.len() != u_nn.len() || e2_inverse.len() != u_nn.len() {
        return Err(FormationError::DimensionMismatch {
            got: e2.len().max(e2_inverse.len()),
            expected: u_nn.len(),
        });
    }
    let gain = k2 + d.d1;
    Ok(u_nn
        .iter()
        .zip(e2.iter().zip(e2_inverse))
        .map(|(u, (e, h))| u - gain * e - d.d2 * h)
        .collect())
}

/// `(mu1 |e2|^2, mu2 |e2|)`.
pub fn adaptation_rates(e2: &[f64], mu1: f64, mu2: f64) -> Result<(f64, f64), FormationError> {
    positive("mu1", mu1)?;
    positive("mu2", mu2)?;
    let sq: f64 = e2.iter().map(|v| v * v).sum();
    Ok((mu1 * sq, mu2 * sq.sqrt()))
}

/// Which parts of the law are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LawTerms {
    pub feedforward: bool,
    pub feedback: bool,
}

/// Full control computation for one agent from its local view.
pub fn agent_control(
    g: &CommGraph,
    spec: &FormationSpec,
    gains: &ControllerGains,
    view: &LocalView<'_>,
    d: AdaptiveGains,
    policy: Option<&NeuralPolicy>,
    terms: LawTerms,
) -> Result<(Vec<f64>, AgentSignals), ControlError> {
    let i = view.owner();
    let signals = local_signals(g, spec, gains, view)?;
    let n = signals.e2.len();
    let u_nn = match (terms.feedforward, policy) {
        (true, Some(p)) => p.forward(&policy_input(g, p, view)?)?,
        _ => vec![0.0; n],
    };
    if !terms.feedback {
        return Ok((u_nn, signals));
    }
    let u = control_law(&u_nn, &signals.e2, &signals.e2_inverse, d, gains.agent(i).k2)?;
    Ok((u, signals))
}
