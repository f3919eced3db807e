//! Fixed-step closed-loop simulation.
//!
//! Each step takes a snapshot of every state, lets every agent compute its
//! input from a [`LocalView`] of that snapshot, then advances plant and
//! adaptive gains together with one RK4 step. Inputs are held constant over
//! the four stages.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::control::{
    agent_control, AdaptiveGains, AgentSignals, ControlError, LawTerms,
    LocalView, Snapshot,
};
use crate::datagen::{expert_agent_control, ExpertGains};
use crate::dynamics::{AgentState, DynamicsError, LeaderProfile, LeaderSample, SystemRealization};
use crate::formation::{
    augmented_error, formation_error, formation_error_rate, ControllerGains, FormationError,
    FormationSpec,
};
use crate::graph::{CommGraph, LEADER};
use crate::neuralnet::NeuralPolicy;
use crate::par::{self, Execution};

/// Any state norm above this aborts the run.
pub const BLOW_UP_NORM: f64 = 1e6;
/// Smallest follower count for which per-step control fans out.
const PAR_MIN_AGENTS: usize = 32;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("state of agent {agent} left the admissible region at t={t}")]
    NonFiniteState { t: f64, agent: usize },
    #[error("non-finite derivative at t={t}")]
    NonFiniteDerivative { t: f64 },
    #[error("log is empty")]
    EmptyLog,
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("mode {0} needs one policy per follower")]
    MissingPolicies(ControllerMode),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Formation(#[from] FormationError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerMode {
    Expert,
    NeuroAdaptive,
    AdaptiveOnly,
    NnOnly,
}

impl ControllerMode {
    pub const ALL: [ControllerMode; 4] = [
        ControllerMode::Expert,
        ControllerMode::NeuroAdaptive,
        ControllerMode::AdaptiveOnly,
        ControllerMode::NnOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ControllerMode::Expert => "expert",
            ControllerMode::NeuroAdaptive => "neuro-adaptive",
            ControllerMode::AdaptiveOnly => "adaptive-only",
            ControllerMode::NnOnly => "nn-only",
        }
    }

    pub fn needs_policies(self) -> bool {
        matches!(self, ControllerMode::NeuroAdaptive | ControllerMode::NnOnly)
    }

    /// Whether the adaptive gains evolve in this mode.
    pub fn adapts(self) -> bool {
        matches!(self, ControllerMode::NeuroAdaptive | ControllerMode::AdaptiveOnly)
    }
}

impl fmt::Display for ControllerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ControllerMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ControllerMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

/// Everything a closed-loop run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub t_end: f64,
    pub log_stride: usize,
    pub graph: CommGraph,
    pub spec: FormationSpec,
    pub gains: ControllerGains,
    pub expert: ExpertGains,
    pub system: SystemRealization,
    pub leader: LeaderProfile,
    pub mode: ControllerMode,
    pub initial: Vec<AgentState>,
}

impl SimConfig {
    pub fn num_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.t_end > self.dt && self.t_end.is_finite()) {
            return bad(format!("t_end must exceed dt, got {}", self.t_end));
        }
        if self.log_stride == 0 {
            return bad("log_stride must be >= 1".into());
        }
        let num = self.graph.num_followers();
        let n = self.spec.dim();
        if self.initial.len() != num
            || self.system.num_agents() != num
            || self.gains.len() != num
        {
            return bad(format!(
                "follower count mismatch: graph {num}, initial {}, system {}, gains {}",
                self.initial.len(),
                self.system.num_agents(),
                self.gains.len()
            ));
        }
        if self.system.dim() != n || self.initial.iter().any(|s| s.dim() != n || s.x2.len() != n) {
            return bad("state dimension mismatch".into());
        }
        if self.initial.iter().any(|s| !s.is_finite()) {
            return bad("non-finite initial state".into());
        }
        self.spec.check_graph(&self.graph)?;
        self.leader.validate(n)?;
        Ok(())
    }

    /// Content hash of the config (and policies, when given).
    pub fn hash(&self, policies: Option<&[NeuralPolicy]>) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serialises"));
        if let Some(p) = policies {
            h.update(serde_json::to_vec(p).expect("policies serialise"));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-agent decision rule driven by the simulator.
pub trait AgentController: Sync {
    fn control(&self, view: &LocalView<'_>, d: AdaptiveGains) -> Result<Vec<f64>, ControlError>;
}

/// The neuro-adaptive law and its ablations.
pub struct AdaptiveController<'a> {
    pub graph: &'a CommGraph,
    pub spec: &'a FormationSpec,
    pub gains: &'a ControllerGains,
    pub policies: Option<&'a [NeuralPolicy]>,
    pub terms: LawTerms,
}

impl AgentController for AdaptiveController<'_> {
    fn control(&self, view: &LocalView<'_>, d: AdaptiveGains) -> Result<Vec<f64>, ControlError> {
        let policy = self.policies.map(|p| &p[view.owner() - 1]);
        let (u, _) = agent_control(self.graph, self.spec, self.gains, view, d, policy, self.terms)?;
        Ok(u)
    }
}

/// Offline model-aware teacher. It reads neighbour states through the view
/// like everyone else but also queries the hidden model and the leader's
/// reference acceleration.
pub struct ExpertController<'a> {
    pub graph: &'a CommGraph,
    pub spec: &'a FormationSpec,
    pub system: &'a SystemRealization,
    pub leader: &'a LeaderProfile,
    pub gains: ExpertGains,
}

impl AgentController for ExpertController<'_> {
    fn control(&self, view: &LocalView<'_>, _d: AdaptiveGains) -> Result<Vec<f64>, ControlError> {
        let reference = self.leader.at(view.time(), self.spec.dim());
        expert_agent_control(self.system, self.graph, self.spec, view, &reference.u, self.gains)
    }
}

/// Logged history of one follower.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentSeries {
    pub x1: Vec<Vec<f64>>,
    pub x2: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub e1: Vec<Vec<f64>>,
    pub e1_rate: Vec<Vec<f64>>,
    pub e2: Vec<Vec<f64>>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimLog {
    pub n: usize,
    pub mode: ControllerMode,
    /// Set for expert runs, which use model access and are offline only.
    pub offline_expert: bool,
    pub config_hash: String,
    pub times: Vec<f64>,
    pub leader_x1: Vec<Vec<f64>>,
    pub agents: Vec<AgentSeries>,
    /// Refused reads since the previous logged step, summed over agents.
    pub audit: Vec<u64>,
}

impl SimLog {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn total_violations(&self) -> u64 {
        self.audit.iter().sum()
    }

    pub fn final_positions(&self) -> Vec<Vec<f64>> {
        self.agents.iter().map(|a| a.x1.last().cloned().unwrap_or_default()).collect()
    }
}

/// One classical RK4 step of `y' = f(y, t)`.
pub fn rk4_step<F>(mut f: F, y: &[f64], t: f64, dt: f64) -> Result<Vec<f64>, SimError>
where
    F: FnMut(&[f64], f64) -> Vec<f64>,
{
    let mut eval = |y: &[f64], t: f64| -> Result<Vec<f64>, SimError> {
        let k = f(y, t);
        if k.iter().all(|v| v.is_finite()) {
            Ok(k)
        } else {
            Err(SimError::NonFiniteDerivative { t })
        }
    };
    let axpy = |a: f64, k: &[f64]| -> Vec<f64> { y.iter().zip(k).map(|(y, k)| y + a * k).collect() };
    let k1 = eval(y, t)?;
    let k2 = eval(&axpy(0.5 * dt, &k1), t + 0.5 * dt)?;
    let k3 = eval(&axpy(0.5 * dt, &k2), t + 0.5 * dt)?;
    let k4 = eval(&axpy(dt, &k3), t + dt)?;
    Ok((0..y.len())
        .map(|j| y[j] + dt / 6.0 * (k1[j] + 2.0 * (k2[j] + k3[j]) + k4[j]))
        .collect())
}

// Flat closed-loop state: [x1_1, x2_1, ..., x1_N, x2_N, d1_1, d2_1, ..., d1_N, d2_N].
struct Packing {
    n: usize,
    num: usize,
}

impl Packing {
    fn len(&self) -> usize {
        self.num * (2 * self.n + 2)
    }

    fn pack(&self, states: &[AgentState], d: &[AdaptiveGains]) -> Vec<f64> {
        let mut y = Vec::with_capacity(self.len());
        for s in states {
            y.extend_from_slice(&s.x1);
            y.extend_from_slice(&s.x2);
        }
        for g in d {
            y.push(g.d1);
            y.push(g.d2);
        }
        y
    }

    fn agent<'y>(&self, y: &'y [f64], k: usize) -> (&'y [f64], &'y [f64]) {
        let base = k * 2 * self.n;
        (&y[base..base + self.n], &y[base + self.n..base + 2 * self.n])
    }

    fn unpack(&self, y: &[f64]) -> (Vec<AgentState>, Vec<AdaptiveGains>) {
        let states = (0..self.num)
            .map(|k| {
                let (x1, x2) = self.agent(y, k);
                AgentState {
                    x1: x1.to_vec(),
                    x2: x2.to_vec(),
                }
            })
            .collect();
        let off = self.num * 2 * self.n;
        let d = (0..self.num)
            .map(|k| AdaptiveGains {
                d1: y[off + 2 * k],
                d2: y[off + 2 * k + 1],
            })
            .collect();
        (states, d)
    }
}

/// `e1`, `e1'` and `e2` for all followers, evaluated centrally from the full
/// state. Used for logging and for the adaptation dynamics, never by the
/// per-agent controllers.
pub fn global_signals(
    graph: &CommGraph,
    spec: &FormationSpec,
    gains: &ControllerGains,
    states: &[AgentState],
    leader: &LeaderSample,
) -> Result<Vec<AgentSignals>, FormationError> {
    let pos: Vec<Vec<f64>> = states.iter().map(|s| s.x1.clone()).collect();
    let vel: Vec<Vec<f64>> = states.iter().map(|s| s.x2.clone()).collect();
    let e1 = formation_error(graph, spec, &pos, &leader.x1)?;
    let rate = formation_error_rate(graph, spec, &vel, &leader.x2)?;
    e1.into_iter()
        .zip(rate)
        .enumerate()
        .map(|(k, (e1, e1_rate))| {
            let e2 = augmented_error(&e1, &e1_rate, gains.agent(k + 1).k1)?;
            Ok(AgentSignals {
                e2_inverse: crate::formation::inverse_error(&e2, gains.epsilon()),
                e1,
                e1_rate,
                e2,
            })
        })
        .collect()
}

/// Runs `cfg` with the controller its mode names.
pub fn run_closed_loop(
    cfg: &SimConfig,
    policies: Option<&[NeuralPolicy]>,
) -> Result<SimLog, SimError> {
    run_closed_loop_with(cfg, policies, Execution::Auto)
}

pub fn run_closed_loop_with(
    cfg: &SimConfig,
    policies: Option<&[NeuralPolicy]>,
    exec: Execution,
) -> Result<SimLog, SimError> {
    cfg.validate()?;
    let num = cfg.graph.num_followers();
    if cfg.mode.needs_policies() && policies.map_or(true, |p| p.len() != num) {
        return Err(SimError::MissingPolicies(cfg.mode));
    }
    let hash = cfg.hash(policies);
    match cfg.mode {
        ControllerMode::Expert => {
            let ctrl = ExpertController {
                graph: &cfg.graph,
                spec: &cfg.spec,
                system: &cfg.system,
                leader: &cfg.leader,
                gains: cfg.expert,
            };
            simulate(cfg, &ctrl, hash, exec)
        }
        mode => {
            let terms = LawTerms {
                feedforward: mode != ControllerMode::AdaptiveOnly,
                feedback: mode != ControllerMode::NnOnly,
            };
            let ctrl = AdaptiveController {
                graph: &cfg.graph,
                spec: &cfg.spec,
                gains: &cfg.gains,
                policies,
                terms,
            };
            simulate(cfg, &ctrl, hash, exec)
        }
    }
}

/// Runs `cfg` with an arbitrary controller; `cfg.mode` only decides whether
/// the adaptive gains evolve.
pub fn simulate(
    cfg: &SimConfig,
    controller: &dyn AgentController,
    config_hash: String,
    exec: Execution,
) -> Result<SimLog, SimError> {
    cfg.validate()?;
    let n = cfg.spec.dim();
    let num = cfg.graph.num_followers();
    let packing = Packing { n, num };
    let adapts = cfg.mode.adapts();
    let stencil = ErrorStencil::new(cfg);
    let steps = cfg.num_steps();
    let mut y = packing.pack(&cfg.initial, &vec![AdaptiveGains::default(); num]);
    let mut log = SimLog {
        n,
        mode: cfg.mode,
        offline_expert: cfg.mode == ControllerMode::Expert,
        config_hash,
        times: Vec::new(),
        leader_x1: Vec::new(),
        agents: vec![AgentSeries::default(); num],
        audit: Vec::new(),
    };
    let mut pending_violations = 0u64;

    for step in 0..=steps {
        let t = step as f64 * cfg.dt;
        let (states, d) = packing.unpack(&y);
        let leader = cfg.leader.at(t, n);
        let snapshot = Snapshot {
            t,
            followers: &states,
            leader: &leader,
        };
        let results = par::map_indexed(exec, num, PAR_MIN_AGENTS, |k| {
            let view = LocalView::new(&cfg.graph, k + 1, snapshot).expect("valid index");
            let u = controller.control(&view, d[k]);
            (u, view.violations())
        });
        let mut controls = Vec::with_capacity(num);
        for (u, v) in results {
            pending_violations += v as u64;
            controls.push(u?);
        }
        if controls.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SimError::NonFiniteDerivative { t });
        }

        if step % cfg.log_stride == 0 {
            let signals = global_signals(&cfg.graph, &cfg.spec, &cfg.gains, &states, &leader)?;
            log.times.push(t);
            log.leader_x1.push(leader.x1.clone());
            log.audit.push(pending_violations);
            pending_violations = 0;
            for (k, series) in log.agents.iter_mut().enumerate() {
                series.x1.push(states[k].x1.clone());
                series.x2.push(states[k].x2.clone());
                series.u.push(controls[k].clone());
                series.d1.push(d[k].d1);
                series.d2.push(d[k].d2);
                let s = &signals[k];
                series.e1.push(s.e1.clone());
                series.e1_rate.push(s.e1_rate.clone());
                series.e2.push(s.e2.clone());
            }
        }
        if step == steps {
            break;
        }

        let rhs = |y: &[f64], t: f64| -> Vec<f64> {
            closed_loop_rate(cfg, &packing, &stencil, &controls, adapts, y, t)
        };
        y = rk4_step(rhs, &y, t, cfg.dt)?;
        for k in 0..num {
            let (x1, x2) = packing.agent(&y, k);
            let norm = x1.iter().chain(x2).map(|v| v * v).sum::<f64>().sqrt();
            if !(norm <= BLOW_UP_NORM) {
                return Err(SimError::NonFiniteState {
                    t: t + cfg.dt,
                    agent: k + 1,
                });
            }
        }
    }
    Ok(log)
}

/// Incidence list of every follower with its offsets, so the adaptation
/// rates can be evaluated from the packed state without allocating.
struct ErrorStencil {
    n: usize,
    // (neighbour follower index or None for the leader, offset)
    terms: Vec<Vec<(Option<usize>, Vec<f64>)>>,
    k1: Vec<f64>,
    mu: Vec<(f64, f64)>,
}

impl ErrorStencil {
    fn new(cfg: &SimConfig) -> Self {
        let g = &cfg.graph;
        let num = g.num_followers();
        let terms = (1..=num)
            .map(|i| {
                let mut t: Vec<(Option<usize>, Vec<f64>)> = g
                    .neighbors(i)
                    .expect("index in range")
                    .iter()
                    .map(|&j| (Some(j - 1), cfg.spec.offset(i, j).expect("validated").to_vec()))
                    .collect();
                if g.has_leader_link(i).expect("index in range") {
                    t.push((None, cfg.spec.offset(i, LEADER).expect("validated").to_vec()));
                }
                t
            })
            .collect();
        ErrorStencil {
            n: cfg.spec.dim(),
            terms,
            k1: (1..=num).map(|i| cfg.gains.agent(i).k1).collect(),
            mu: (1..=num).map(|i| (cfg.gains.agent(i).mu1, cfg.gains.agent(i).mu2)).collect(),
        }
    }

    /// `|e2|` of follower `k` (0-based) from the packed state.
    fn e2_norm(&self, packing: &Packing, y: &[f64], leader: &LeaderSample, k: usize) -> f64 {
        let (x1, x2) = packing.agent(y, k);
        let mut sq = 0.0;
        for c in 0..self.n {
            let mut e1 = 0.0;
            let mut rate = 0.0;
            for (j, off) in &self.terms[k] {
                let (p, v) = match j {
                    Some(j) => {
                        let (p, v) = packing.agent(y, *j);
                        (p[c], v[c])
                    }
                    None => (leader.x1[c], leader.x2[c]),
                };
                e1 += x1[c] - p + off[c];
                rate += x2[c] - v;
            }
            let e2 = rate + self.k1[k] * e1;
            sq += e2 * e2;
        }
        sq.sqrt()
    }
}

fn closed_loop_rate(
    cfg: &SimConfig,
    packing: &Packing,
    stencil: &ErrorStencil,
    controls: &[Vec<f64>],
    adapts: bool,
    y: &[f64],
    t: f64,
) -> Vec<f64> {
    let n = packing.n;
    let num = packing.num;
    let mut rate = vec![0.0; packing.len()];
    for k in 0..num {
        let (x1, x2) = packing.agent(y, k);
        let base = k * 2 * n;
        rate[base..base + n].copy_from_slice(x2);
        let acc = cfg.system.acceleration_raw(k + 1, x1, t, &controls[k]);
        rate[base + n..base + 2 * n].copy_from_slice(&acc);
    }
    if adapts {
        let leader = cfg.leader.at(t, n);
        let off = num * 2 * n;
        for k in 0..num {
            let e2 = stencil.e2_norm(packing, y, &leader, k);
            let (mu1, mu2) = stencil.mu[k];
            rate[off + 2 * k] = mu1 * e2 * e2;
            rate[off + 2 * k + 1] = mu2 * e2;
        }
    }
    rate
}

/// Summary of one agent's `|e1| + |e1'|` curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub initial: f64,
    pub final_value: f64,
    pub peak: f64,
    /// First logged time after which the signal stays at or below 5% of its
    /// initial value; `None` if it never settles.
    pub settling_time: Option<f64>,
}

pub const SETTLING_FRACTION: f64 = 0.05;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|e1(t)| + |e1'(t)|` per agent on the logged grid.
pub fn error_series(log: &SimLog) -> Vec<Vec<f64>> {
    log.agents
        .iter()
        .map(|a| a.e1.iter().zip(&a.e1_rate).map(|(e, r)| norm(e) + norm(r)).collect())
        .collect()
}

pub fn summarize(times: &[f64], series: &[f64]) -> Result<ErrorSummary, SimError> {
    if series.is_empty() || series.len() != times.len() {
        return Err(SimError::EmptyLog);
    }
    let initial = series[0];
    let threshold = SETTLING_FRACTION * initial;
    let mut settle = Some(times[0]);
    for (k, &v) in series.iter().enumerate().rev() {
        if v > threshold {
            settle = times.get(k + 1).copied();
            break;
        }
    }
    Ok(ErrorSummary {
        initial,
        final_value: *series.last().unwrap(),
        peak: series.iter().copied().fold(0.0, f64::max),
        settling_time: settle,
    })
}

pub fn metrics(log: &SimLog) -> Result<Vec<ErrorSummary>, SimError> {
    if log.is_empty() || log.agents.is_empty() {
        return Err(SimError::EmptyLog);
    }
    error_series(log)
        .iter()
        .map(|s| summarize(&log.times, s))
        .collect()
}

/// One row per `(t, agent)`.
pub fn write_csv(log: &SimLog, path: &Path) -> Result<(), SimError> {
    let io = |source| SimError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let n = log.n;
    let mut header = vec!["t".to_string(), "agent".to_string()];
    for prefix in ["x1", "x2", "u"] {
        header.extend((1..=n).map(|k| format!("{prefix}_{k}")));
    }
    header.extend(["e1_norm", "e1dot_norm", "d1hat", "d2hat"].map(String::from));
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (step, t) in log.times.iter().enumerate() {
        for (k, a) in log.agents.iter().enumerate() {
            let mut row = vec![t.to_string(), (k + 1).to_string()];
            for v in [&a.x1[step], &a.x2[step], &a.u[step]] {
                row.extend(v.iter().map(|x| x.to_string()));
            }
            row.push(norm(&a.e1[step]).to_string());
            row.push(norm(&a.e1_rate[step]).to_string());
            row.push(a.d1[step].to_string());
            row.push(a.d2[step].to_string());
            writeln!(w, "{}", row.join(",")).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rk4_exponential_decay() {
        let y = rk4_step(|y, _| vec![-y[0]], &[1.0], 0.0, 0.1).unwrap();
        assert!((y[0] - (-0.1f64).exp()).abs() < 1e-7);
        assert!((y[0] - 0.9048375).abs() < 1e-7);
    }

    #[test]
    fn rk4_zero_rate_is_identity() {
        let y0 = [1.5, -2.0, 3.25];
        let y = rk4_step(|y, _| vec![0.0; y.len()], &y0, 4.0, 0.3).unwrap();
        assert_eq!(y, y0.to_vec());
    }

    #[test]
    fn rk4_reports_non_finite() {
        let r = rk4_step(|_, _| vec![f64::NAN], &[1.0], 0.0, 0.1);
        assert!(matches!(r, Err(SimError::NonFiniteDerivative { .. })));
    }

    #[test]
    fn settling_of_exponential() {
        let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.1).collect();
        let s: Vec<f64> = times.iter().map(|t| (-t).exp()).collect();
        let m = summarize(&times, &s).unwrap();
        let ts = m.settling_time.unwrap();
        assert!((ts - 20f64.ln()).abs() <= 0.1);
        assert_eq!(m.initial, 1.0);
        assert_eq!(m.peak, 1.0);
    }

    #[test]
    fn zero_signal_settles_immediately() {
        let times = [0.0, 0.1, 0.2];
        let m = summarize(&times, &[0.0; 3]).unwrap();
        assert_eq!(m.settling_time, Some(0.0));
        assert_eq!((m.initial, m.final_value, m.peak), (0.0, 0.0, 0.0));
    }

    #[test]
    fn unsettled_signal() {
        let m = summarize(&[0.0, 1.0, 2.0], &[1.0, 0.01, 0.5]).unwrap();
        assert_eq!(m.settling_time, None);
        assert!(summarize(&[], &[]).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in ControllerMode::ALL {
            assert_eq!(m.as_str().parse::<ControllerMode>().unwrap(), m);
        }
        assert!("bogus".parse::<ControllerMode>().is_err());
    }

    #[test]
    fn stencil_matches_local_signals() {
        use rand::{Rng, SeedableRng};
        let cfg = crate::config::ExperimentConfig::preset()
            .sim_config(ControllerMode::NeuroAdaptive)
            .unwrap();
        let packing = Packing {
            n: cfg.spec.dim(),
            num: cfg.graph.num_followers(),
        };
        let stencil = ErrorStencil::new(&cfg);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let y: Vec<f64> = (0..packing.len()).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t = rng.gen_range(0.0..50.0);
            let leader = cfg.leader.at(t, packing.n);
            let (states, _) = packing.unpack(&y);
            let signals = global_signals(&cfg.graph, &cfg.spec, &cfg.gains, &states, &leader).unwrap();
            for (k, sig) in signals.iter().enumerate() {
                let g = cfg.gains.agent(k + 1);
                let (r1, r2) = crate::control::adaptation_rates(&sig.e2, g.mu1, g.mu2).unwrap();
                let e2 = stencil.e2_norm(&packing, &y, &leader, k);
                assert!((g.mu1 * e2 * e2 - r1).abs() <= 1e-12 * (1.0 + r1));
                assert!((g.mu2 * e2 - r2).abs() <= 1e-12 * (1.0 + r2));
            }
        }
    }
}
