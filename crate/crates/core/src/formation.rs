//! Formation offsets, controller gains and the error signals built on them.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{CommGraph, LEADER};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormationError {
    #[error("offsets do not match the graph: {0}")]
    SpecGraphMismatch(String),
    #[error("dimension mismatch: got {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("gain `{name}` must be positive, got {value}")]
    NonPositiveGain { name: &'static str, value: f64 },
    #[error("equilibrium system is singular")]
    SingularSystem,
}

/// Desired offsets `c_ij` for every incidence of the augmented graph. Agent
/// `i` wants `x_i = x_j - c_ij`; `j = 0` refers to the leader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct FormationSpec {
    n: usize,
    offsets: BTreeMap<(usize, usize), Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetEntry {
    pub i: usize,
    pub j: usize,
    pub c: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    n: usize,
    offsets: Vec<OffsetEntry>,
}

impl TryFrom<RawSpec> for FormationSpec {
    type Error = FormationError;
    fn try_from(raw: RawSpec) -> Result<Self, Self::Error> {
        let mut offsets = BTreeMap::new();
        for e in raw.offsets {
            if e.c.len() != raw.n {
                return Err(FormationError::DimensionMismatch {
                    got: e.c.len(),
                    expected: raw.n,
                });
            }
            if offsets.insert((e.i, e.j), e.c).is_some() {
                return Err(FormationError::SpecGraphMismatch(format!(
                    "duplicate offset ({}, {})",
                    e.i, e.j
                )));
            }
        }
        Ok(FormationSpec { n: raw.n, offsets })
    }
}

impl From<FormationSpec> for RawSpec {
    fn from(s: FormationSpec) -> Self {
        RawSpec {
            n: s.n,
            offsets: s.entries(),
        }
    }
}

/// Required `(i, j)` incidences of the augmented graph, in canonical order.
fn incidences(g: &CommGraph) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 1..=g.num_followers() {
        for j in g.augmented_neighbors(i).expect("index in range") {
            out.push((i, j));
        }
    }
    out
}

impl FormationSpec {
    /// Builds a spec from explicit entries and checks it covers exactly the
    /// incidences of `g`.
    pub fn new(g: &CommGraph, n: usize, entries: Vec<OffsetEntry>) -> Result<Self, FormationError> {
        let spec = FormationSpec::try_from(RawSpec { n, offsets: entries })?;
        spec.check_graph(g)?;
        Ok(spec)
    }

    /// Independent uniform draws in `(-range, range)` per axis. With
    /// `antisymmetric`, follower pairs get `c_ji = -c_ij`.
    pub fn random(g: &CommGraph, n: usize, seed: u64, range: f64, antisymmetric: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offsets: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for (i, j) in incidences(g) {
            if antisymmetric && j != LEADER {
                if let Some(c) = offsets.get(&(j, i)) {
                    let neg = c.iter().map(|v| -v).collect();
                    offsets.insert((i, j), neg);
                    continue;
                }
            }
            let c = (0..n).map(|_| rng.gen_range(-range..range)).collect();
            offsets.insert((i, j), c);
        }
        FormationSpec { n, offsets }
    }

    /// Consistent offsets realising absolute follower targets relative to
    /// the leader position: `c_ij = target_j - target_i`, `c_i0 = leader - target_i`.
    pub fn from_targets(
        g: &CommGraph,
        targets: &[Vec<f64>],
        leader_pos: &[f64],
    ) -> Result<Self, FormationError> {
        check_len(targets.len(), g.num_followers())?;
        let n = leader_pos.len();
        let mut offsets = BTreeMap::new();
        for (i, j) in incidences(g) {
            let other = if j == LEADER { leader_pos } else { &targets[j - 1][..] };
            check_len(targets[i - 1].len(), n)?;
            let c = other.iter().zip(&targets[i - 1]).map(|(o, s)| o - s).collect();
            offsets.insert((i, j), c);
        }
        Ok(FormationSpec { n, offsets })
    }

    /// All zero offsets: consensus on the leader position.
    pub fn zeros(g: &CommGraph, n: usize) -> Self {
        let offsets = incidences(g).into_iter().map(|k| (k, vec![0.0; n])).collect();
        FormationSpec { n, offsets }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn offset(&self, i: usize, j: usize) -> Option<&[f64]> {
        self.offsets.get(&(i, j)).map(Vec::as_slice)
    }

    pub fn entries(&self) -> Vec<OffsetEntry> {
        self.offsets
            .iter()
            .map(|(&(i, j), c)| OffsetEntry { i, j, c: c.clone() })
            .collect()
    }

    pub fn check_graph(&self, g: &CommGraph) -> Result<(), FormationError> {
        let required = incidences(g);
        if required.len() != self.offsets.len()
            || required.iter().any(|k| !self.offsets.contains_key(k))
        {
            return Err(FormationError::SpecGraphMismatch(format!(
                "expected offsets for {:?}, found {:?}",
                required,
                self.offsets.keys().collect::<Vec<_>>()
            )));
        }
        if self.offsets.values().flatten().any(|v| !v.is_finite()) {
            return Err(FormationError::SpecGraphMismatch("non-finite offset".into()));
        }
        Ok(())
    }
}

fn check_len(got: usize, expected: usize) -> Result<(), FormationError> {
    if got == expected {
        Ok(())
    } else {
        Err(FormationError::DimensionMismatch { got, expected })
    }
}

/// Per-agent gains of the adaptive law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentGains {
    pub k1: f64,
    pub k2: f64,
    pub mu1: f64,
    pub mu2: f64,
}

impl Default for AgentGains {
    fn default() -> Self {
        AgentGains {
            k1: 1.0,
            k2: 2.0,
            mu1: 0.5,
            mu2: 0.5,
        }
    }
}

pub const DEFAULT_DEAD_ZONE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    per_agent: Vec<AgentGains>,
    epsilon: f64,
}

impl ControllerGains {
    pub fn new(per_agent: Vec<AgentGains>, epsilon: f64) -> Result<Self, FormationError> {
        for g in &per_agent {
            for (name, value) in [("k1", g.k1), ("k2", g.k2), ("mu1", g.mu1), ("mu2", g.mu2)] {
                positive(name, value)?;
            }
        }
        positive("epsilon", epsilon)?;
        Ok(ControllerGains { per_agent, epsilon })
    }

    pub fn uniform(num_followers: usize, gains: AgentGains, epsilon: f64) -> Result<Self, FormationError> {
        Self::new(vec![gains; num_followers], epsilon)
    }

    /// Gains of follower `i` (1-based).
    pub fn agent(&self, i: usize) -> &AgentGains {
        &self.per_agent[i - 1]
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn len(&self) -> usize {
        self.per_agent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_agent.is_empty()
    }
}

pub(crate) fn positive(name: &'static str, value: f64) -> Result<(), FormationError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(FormationError::NonPositiveGain { name, value })
    }
}

/// Error of one agent from the states it can see. `neighbors` lists each
/// follower neighbour's vector (position or velocity); `leader` must be
/// `Some` exactly when the agent is linked to the leader. With
/// `with_offsets = false` the offsets are dropped, which gives the rate.
pub fn local_error(
    spec: &FormationSpec,
    i: usize,
    own: &[f64],
    neighbors: &[(usize, &[f64])],
    leader: Option<&[f64]>,
    with_offsets: bool,
) -> Result<Vec<f64>, FormationError> {
    let n = spec.n;
    check_len(own.len(), n)?;
    let mut e = vec![0.0; n];
    let others = neighbors.iter().copied().chain(leader.map(|l| (LEADER, l)));
    for (j, other) in others {
        check_len(other.len(), n)?;
        let c = spec.offset(i, j).ok_or_else(|| {
            FormationError::SpecGraphMismatch(format!("no offset for ({i}, {j})"))
        })?;
        for k in 0..n {
            e[k] += own[k] - other[k];
            if with_offsets {
                e[k] += c[k];
            }
        }
    }
    Ok(e)
}

fn stacked_error(
    g: &CommGraph,
    spec: &FormationSpec,
    values: &[Vec<f64>],
    leader: &[f64],
    with_offsets: bool,
) -> Result<Vec<Vec<f64>>, FormationError> {
    check_len(values.len(), g.num_followers())?;
    check_len(leader.len(), spec.n)?;
    spec.check_graph(g)?;
    (1..=g.num_followers())
        .map(|i| {
            let nbrs: Vec<(usize, &[f64])> = g
                .neighbors(i)
                .expect("index in range")
                .iter()
                .map(|&j| (j, values[j - 1].as_slice()))
                .collect();
            let lead = g.has_leader_link(i).expect("index in range").then_some(leader);
            local_error(spec, i, &values[i - 1], &nbrs, lead, with_offsets)
        })
        .collect()
}

/// `e_{i,1}` for every follower.
pub fn formation_error(
    g: &CommGraph,
    spec: &FormationSpec,
    positions: &[Vec<f64>],
    leader_pos: &[f64],
) -> Result<Vec<Vec<f64>>, FormationError> {
    stacked_error(g, spec, positions, leader_pos, true)
}

/// Time derivative of `e_{i,1}` from velocities.
pub fn formation_error_rate(
    g: &CommGraph,
    spec: &FormationSpec,
    velocities: &[Vec<f64>],
    leader_vel: &[f64],
) -> Result<Vec<Vec<f64>>, FormationError> {
    stacked_error(g, spec, velocities, leader_vel, false)
}

/// `e2 = e1' + k1 e1`.
pub fn augmented_error(e1: &[f64], e1_rate: &[f64], k1: f64) -> Result<Vec<f64>, FormationError> {
    positive("k1", k1)?;
    check_len(e1_rate.len(), e1.len())?;
    Ok(e1.iter().zip(e1_rate).map(|(e, r)| r + k1 * e).collect())
}

/// `e2 / |e2|^2` outside the dead zone `|e2| < epsilon`, zero inside it.
pub fn inverse_error(e2: &[f64], epsilon: f64) -> Vec<f64> {
    let sq: f64 = e2.iter().map(|v| v * v).sum();
    if sq.sqrt() >= epsilon && sq > 0.0 {
        e2.iter().map(|v| v / sq).collect()
    } else {
        vec![0.0; e2.len()]
    }
}

/// Follower positions at which every `e_{i,1}` vanishes for the given leader
/// position. Solves `((L + B) kron I_n) x = -r` one axis at a time.
pub fn solve_equilibrium(
    g: &CommGraph,
    spec: &FormationSpec,
    leader_pos: &[f64],
) -> Result<Vec<Vec<f64>>, FormationError> {
    spec.check_graph(g)?;
    let n = spec.n;
    check_len(leader_pos.len(), n)?;
    let num = g.num_followers();
    let m: DMatrix<f64> = g.laplacian_plus_b();
    let chol = m.clone().cholesky().ok_or(FormationError::SingularSystem)?;
    let mut out = vec![vec![0.0; n]; num];
    for axis in 0..n {
        let rhs = DVector::from_iterator(
            num,
            (1..=num).map(|i| {
                let mut r = 0.0;
                for &j in g.neighbors(i).expect("index in range") {
                    r += spec.offset(i, j).expect("checked")[axis];
                }
                if g.has_leader_link(i).expect("index in range") {
                    r += spec.offset(i, LEADER).expect("checked")[axis] - leader_pos[axis];
                }
                -r
            }),
        );
        let x = chol.solve(&rhs);
        let residual = (&m * &x - &rhs).amax();
        if !residual.is_finite() || residual > 1e-10 * (1.0 + rhs.amax()) {
            return Err(FormationError::SingularSystem);
        }
        for i in 0..num {
            out[i][axis] = x[i];
        }
    }
    Ok(out)
}
