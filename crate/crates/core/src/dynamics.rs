//! Randomised "unknown" second-order agent dynamics and the leader reference.
//!
//! Each follower evolves as `x1' = x2`, `x2' = f_i(x, t) + g_i(x, t) u` with
//!
//! ```text
//! f_i(x, t) = A_i tanh(B_i x1) + c_i sin(w_i t + phi_i)
//! g_i(x, t) = a_i I + S_i S_i^T / (1 + |x1|^2)
//! ```
//!
//! The parameters stay private to [`SystemRealization`]; callers only get
//! evaluations, so nothing on the controller side can peek at the model.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("agent index {index} out of range 1..={num_agents}")]
    IndexOutOfRange { index: usize, num_agents: usize },
    #[error("non-finite state for agent {0}")]
    NonFiniteState(usize),
    #[error("state has dimension {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
}

/// Position-like and velocity-like halves of one agent's state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
}

impl AgentState {
    pub fn zeros(n: usize) -> Self {
        AgentState {
            x1: vec![0.0; n],
            x2: vec![0.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.x1.len()
    }

    pub fn is_finite(&self) -> bool {
        self.x1.iter().chain(&self.x2).all(|v| v.is_finite())
    }

    /// `[x1, x2]` as one vector of length `2n`.
    pub fn stacked(&self) -> Vec<f64> {
        let mut v = self.x1.clone();
        v.extend_from_slice(&self.x2);
        v
    }

    pub fn from_stacked(v: &[f64]) -> Self {
        let n = v.len() / 2;
        AgentState {
            x1: v[..n].to_vec(),
            x2: v[n..].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AgentParams {
    // n x n, row-major
    drift_a: Vec<f64>,
    drift_b: Vec<f64>,
    gain_s: Vec<f64>,
    gain_floor: f64,
    forcing: Vec<f64>,
    omega: f64,
    phase: f64,
}

/// One draw of the per-agent drift and input-gain functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemRealization {
    n: usize,
    seed: u64,
    variation: f64,
    agents: Vec<AgentParams>,
}

const NOMINAL_GAIN_FLOOR: f64 = 1.0;
const GAIN_FLOOR_SPREAD: f64 = 0.5;
const MIN_GAIN_FLOOR: f64 = 0.1;
const NOMINAL_OMEGA: f64 = 0.55;
const OMEGA_SPREAD: f64 = 0.45;
const FORCING_SPREAD: f64 = 0.5;

fn matvec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = m[r * n..(r + 1) * n].iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

fn matvec_transposed(m: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (r, &vr) in v.iter().enumerate() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += m[r * n + c] * vr;
        }
    }
}

impl SystemRealization {
    /// Samples `num_agents` agents in dimension `n`. Every random quantity is
    /// `nominal + variation * spread * U(-1, 1)`, so `variation = 0` yields
    /// identical nominal agents (`f = 0`, `g = I`).
    pub fn sample(
        seed: u64,
        n: usize,
        num_agents: usize,
        variation: f64,
    ) -> Result<Self, DynamicsError> {
        if n == 0 {
            return Err(DynamicsError::InvalidDimension("n must be >= 1".into()));
        }
        if num_agents == 0 {
            return Err(DynamicsError::InvalidDimension("need at least one agent".into()));
        }
        if !(variation >= 0.0 && variation.is_finite()) {
            return Err(DynamicsError::InvalidDimension(format!(
                "variation must be finite and >= 0, got {variation}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sym = |rng: &mut ChaCha8Rng, spread: f64| -> f64 {
            variation * spread * rng.gen_range(-1.0..=1.0)
        };
        let agents = (0..num_agents)
            .map(|_| {
                let gain_floor =
                    (NOMINAL_GAIN_FLOOR + sym(&mut rng, GAIN_FLOOR_SPREAD)).max(MIN_GAIN_FLOOR);
                let drift_a = (0..n * n).map(|_| sym(&mut rng, 1.0)).collect();
                let drift_b = (0..n * n).map(|_| sym(&mut rng, 1.0)).collect();
                let gain_s = (0..n * n).map(|_| sym(&mut rng, 1.0)).collect();
                let forcing = (0..n).map(|_| sym(&mut rng, FORCING_SPREAD)).collect();
                let omega = NOMINAL_OMEGA + sym(&mut rng, OMEGA_SPREAD);
                let phase = sym(&mut rng, PI);
                AgentParams {
                    drift_a,
                    drift_b,
                    gain_s,
                    gain_floor,
                    forcing,
                    omega,
                    phase,
                }
            })
            .collect();
        Ok(SystemRealization {
            n,
            seed,
            variation,
            agents,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn variation(&self) -> f64 {
        self.variation
    }

    /// Lower bound on the eigenvalues of `g_i`, i.e. `a_i`.
    pub fn gain_floor(&self, i: usize) -> Result<f64, DynamicsError> {
        Ok(self.params(i)?.gain_floor)
    }

    fn params(&self, i: usize) -> Result<&AgentParams, DynamicsError> {
        if i == 0 || i > self.agents.len() {
            return Err(DynamicsError::IndexOutOfRange {
                index: i,
                num_agents: self.agents.len(),
            });
        }
        Ok(&self.agents[i - 1])
    }

    fn check_state(&self, i: usize, x: &AgentState) -> Result<(), DynamicsError> {
        if x.x1.len() != self.n || x.x2.len() != self.n {
            return Err(DynamicsError::DimensionMismatch {
                got: x.x1.len().max(x.x2.len()),
                expected: self.n,
            });
        }
        if !x.is_finite() {
            return Err(DynamicsError::NonFiniteState(i));
        }
        Ok(())
    }

    fn drift_into(&self, p: &AgentParams, x1: &[f64], t: f64, out: &mut [f64]) {
        let n = self.n;
        let mut inner = vec![0.0; n];
        matvec(&p.drift_b, x1, &mut inner);
        inner.iter_mut().for_each(|v| *v = v.tanh());
        matvec(&p.drift_a, &inner, out);
        let s = (p.omega * t + p.phase).sin();
        for (o, c) in out.iter_mut().zip(&p.forcing) {
            *o += c * s;
        }
    }

    /// `(f_i(x, t), g_i(x, t))`.
    pub fn eval(
        &self,
        i: usize,
        x: &AgentState,
        t: f64,
    ) -> Result<(Vec<f64>, DMatrix<f64>), DynamicsError> {
        let p = self.params(i)?;
        self.check_state(i, x)?;
        let n = self.n;
        let mut f = vec![0.0; n];
        self.drift_into(p, &x.x1, t, &mut f);
        let s = DMatrix::from_row_slice(n, n, &p.gain_s);
        let scale = 1.0 / (1.0 + x.x1.iter().map(|v| v * v).sum::<f64>());
        let mut g = &s * s.transpose() * scale;
        for k in 0..n {
            g[(k, k)] += p.gain_floor;
        }
        Ok((f, g))
    }

    /// `f_i(x, t) + g_i(x, t) u` without materialising `g_i`.
    pub fn acceleration(
        &self,
        i: usize,
        x: &AgentState,
        t: f64,
        u: &[f64],
    ) -> Result<Vec<f64>, DynamicsError> {
        let p = self.params(i)?;
        self.check_state(i, x)?;
        if u.len() != self.n {
            return Err(DynamicsError::DimensionMismatch {
                got: u.len(),
                expected: self.n,
            });
        }
        Ok(self.acceleration_unchecked(p, &x.x1, t, u))
    }

    fn acceleration_unchecked(&self, p: &AgentParams, x1: &[f64], t: f64, u: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n];
        self.drift_into(p, x1, t, &mut out);
        let scale = 1.0 / (1.0 + x1.iter().map(|v| v * v).sum::<f64>());
        let mut stu = vec![0.0; n];
        matvec_transposed(&p.gain_s, u, &mut stu);
        let mut sstu = vec![0.0; n];
        matvec(&p.gain_s, &stu, &mut sstu);
        for k in 0..n {
            out[k] += p.gain_floor * u[k] + scale * sstu[k];
        }
        out
    }

    /// Hot-path variant for the integrator: `x1` is the position slice of
    /// agent `i` and inputs are assumed validated.
    pub(crate) fn acceleration_raw(&self, i: usize, x1: &[f64], t: f64, u: &[f64]) -> Vec<f64> {
        self.acceleration_unchecked(&self.agents[i - 1], x1, t, u)
    }
}

/// Leader reference trajectory given in closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LeaderProfile {
    /// `(r cos wt, r sin wt, climb t, 0, ...)`, truncated to the state dimension.
    Helix { radius: f64, omega: f64, climb: f64 },
    /// Leader parked at a fixed point.
    Static { position: Vec<f64> },
}

impl Default for LeaderProfile {
    fn default() -> Self {
        LeaderProfile::Helix {
            radius: 1.0,
            omega: 0.2,
            climb: 0.05,
        }
    }
}

/// Leader position, velocity and acceleration at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderSample {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub u: Vec<f64>,
}

impl LeaderProfile {
    pub fn at(&self, t: f64, n: usize) -> LeaderSample {
        let mut s = LeaderSample {
            x1: vec![0.0; n],
            x2: vec![0.0; n],
            u: vec![0.0; n],
        };
        match self {
            LeaderProfile::Helix {
                radius,
                omega,
                climb,
            } => {
                let (sin, cos) = (omega * t).sin_cos();
                let w2 = omega * omega;
                let cols = [
                    (radius * cos, -radius * omega * sin, -radius * w2 * cos),
                    (radius * sin, radius * omega * cos, -radius * w2 * sin),
                    (climb * t, *climb, 0.0),
                ];
                for (k, (p, v, a)) in cols.into_iter().enumerate().take(n) {
                    s.x1[k] = p;
                    s.x2[k] = v;
                    s.u[k] = a;
                }
            }
            LeaderProfile::Static { position } => {
                for (k, p) in position.iter().enumerate().take(n) {
                    s.x1[k] = *p;
                }
            }
        }
        s
    }

    pub fn validate(&self, n: usize) -> Result<(), DynamicsError> {
        match self {
            LeaderProfile::Helix {
                radius,
                omega,
                climb,
            } => {
                if ![radius, omega, climb].iter().all(|v| v.is_finite()) {
                    return Err(DynamicsError::InvalidDimension(
                        "helix parameters must be finite".into(),
                    ));
                }
            }
            LeaderProfile::Static { position } => {
                if position.len() != n {
                    return Err(DynamicsError::DimensionMismatch {
                        got: position.len(),
                        expected: n,
                    });
                }
            }
        }
        Ok(())
    }
}
