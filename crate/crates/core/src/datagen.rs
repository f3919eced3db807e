//! Offline demonstration data: a model-aware expert drives sampled systems
//! and every follower's (own state, neighbour states, control) triple is
//! recorded at a fixed sample period.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{local_errors, ControlError, LocalView, Snapshot};
use crate::dynamics::{AgentState, DynamicsError, LeaderProfile, LeaderSample, SystemRealization};
use crate::formation::{
    solve_equilibrium, AgentGains, ControllerGains, FormationError, FormationSpec,
};
use crate::graph::{CommGraph, LEADER};
use crate::neuralnet::{encode_input, InputLayout, NnError, Sample};
use crate::par::{self, Execution};
use crate::simcore::{self, ControllerMode, SimConfig, SimError};

pub const DATASET_FORMAT: &str = "formctl-ds-v1";

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("trajectory {traj}: {source}")]
    Simulation {
        traj: usize,
        #[source]
        source: SimError,
    },
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Formation(#[from] FormationError),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported dataset format `{found}`, expected `{expected}`")]
    FormatVersionMismatch { found: String, expected: String },
    #[error("corrupt dataset at line {line}: {reason}")]
    CorruptRecord { line: usize, reason: String },
    #[error("agent {0} has no records")]
    EmptyAgent(usize),
    #[error(transparent)]
    Network(#[from] NnError),
}

/// Proportional and derivative gains of the expert.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertGains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for ExpertGains {
    fn default() -> Self {
        ExpertGains { kp: 4.0, kd: 4.0 }
    }
}

/// Feedback-linearising expert for one agent:
/// `u = g^-1 (-f + u0 - kp e1 - kd e1')`. Neighbour information comes from
/// the view; `reference_accel` is the leader's acceleration profile, which
/// the offline teacher knows regardless of leader links.
pub fn expert_agent_control(
    system: &SystemRealization,
    graph: &CommGraph,
    spec: &FormationSpec,
    view: &LocalView<'_>,
    reference_accel: &[f64],
    gains: ExpertGains,
) -> Result<Vec<f64>, ControlError> {
    let i = view.owner();
    let (e1, e1_rate) = local_errors(graph, spec, view)?;
    let (f, g) = system
        .eval(i, view.own(), view.time())
        .map_err(|e| ControlError::Model(e.to_string()))?;
    let n = f.len();
    if reference_accel.len() != n {
        return Err(ControlError::Model("reference acceleration has wrong width".into()));
    }
    let rhs = DVector::from_iterator(
        n,
        (0..n).map(|k| -f[k] + reference_accel[k] - gains.kp * e1[k] - gains.kd * e1_rate[k]),
    );
    let chol = g
        .cholesky()
        .ok_or_else(|| ControlError::Model(format!("g_{i} is not positive definite")))?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

/// Expert inputs for every follower from a full snapshot.
pub fn expert_control(
    system: &SystemRealization,
    graph: &CommGraph,
    spec: &FormationSpec,
    states: &[AgentState],
    leader: &LeaderSample,
    t: f64,
    gains: ExpertGains,
) -> Result<Vec<Vec<f64>>, DatagenError> {
    if states.len() != graph.num_followers() || leader.u.len() != spec.dim() {
        return Err(DatagenError::DimensionMismatch(format!(
            "{} states for {} followers",
            states.len(),
            graph.num_followers()
        )));
    }
    let snapshot = Snapshot {
        t,
        followers: states,
        leader,
    };
    (1..=graph.num_followers())
        .map(|i| {
            let view = LocalView::new(graph, i, snapshot).expect("index in range");
            Ok(expert_agent_control(system, graph, spec, &view, &leader.u, gains)?)
        })
        .collect()
}

/// Scenario shared by every trajectory: topology, formation and leader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub n: usize,
    pub graph: CommGraph,
    pub spec: FormationSpec,
    pub leader: LeaderProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub trajectories: usize,
    pub horizon: f64,
    pub sample_period: f64,
    /// Integration step of the expert runs.
    pub dt: f64,
    pub seed: u64,
    pub variation: f64,
    /// Initial positions and velocities are drawn within this half-width of
    /// the equilibrium and the leader velocity.
    pub init_half_width: f64,
    pub expert: ExpertGains,
    /// Per-trajectory probability of dropping each follower edge.
    pub edge_drop_prob: f64,
    /// Draw fresh random offsets for every trajectory.
    pub vary_offsets: bool,
    pub offset_range: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            trajectories: 100,
            horizon: 30.0,
            sample_period: 0.1,
            dt: 0.01,
            seed: 2024,
            variation: 1.0,
            init_half_width: 2.0,
            expert: ExpertGains::default(),
            edge_drop_prob: 0.0,
            vary_offsets: false,
            offset_range: 1.0,
        }
    }
}

impl GenerationConfig {
    fn stride(&self) -> Result<usize, DatagenError> {
        let ratio = self.sample_period / self.dt;
        let stride = ratio.round();
        if !(stride >= 1.0) || (ratio - stride).abs() > 1e-9 * ratio {
            return Err(DatagenError::InvalidConfig(format!(
                "sample_period {} must be a whole multiple of dt {}",
                self.sample_period, self.dt
            )));
        }
        Ok(stride as usize)
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: &str| Err(DatagenError::InvalidConfig(m.into()));
        if self.trajectories == 0 {
            return bad("need at least one trajectory");
        }
        if !(self.horizon > 0.0 && self.dt > 0.0 && self.sample_period > 0.0) {
            return bad("horizon, dt and sample_period must be positive");
        }
        if self.horizon <= self.dt {
            return bad("horizon must exceed dt");
        }
        if !(0.0..1.0).contains(&self.edge_drop_prob) {
            return bad("edge_drop_prob must lie in [0, 1)");
        }
        if !(self.init_half_width >= 0.0 && self.variation >= 0.0 && self.offset_range > 0.0) {
            return bad("init_half_width, variation must be >= 0 and offset_range > 0");
        }
        self.stride().map(|_| ())
    }
}

/// Mixes a base seed with a trajectory index and a stream tag.
pub fn derive_seed(seed: u64, index: u64, stream: u64) -> u64 {
    let mut z = seed
        ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SYSTEM: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_GRAPH: u64 = 3;
const STREAM_OFFSETS: u64 = 4;

/// Initial states uniformly within `half_width` of the equilibrium (positions)
/// and of the leader velocity (velocities).
pub fn initial_states_near_equilibrium(
    graph: &CommGraph,
    spec: &FormationSpec,
    leader: &LeaderSample,
    half_width: f64,
    seed: u64,
) -> Result<Vec<AgentState>, FormationError> {
    let eq = solve_equilibrium(graph, spec, &leader.x1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |v: f64| {
        if half_width > 0.0 {
            v + rng.gen_range(-half_width..=half_width)
        } else {
            v
        }
    };
    Ok(eq
        .into_iter()
        .map(|p| AgentState {
            x1: p.iter().map(|&v| jitter(v)).collect(),
            x2: leader.x2.iter().map(|&v| jitter(v)).collect(),
        })
        .collect())
}

/// Everything that defines trajectory `k` of a generation run.
#[derive(Debug, Clone)]
pub struct TrajectoryPlan {
    pub graph: CommGraph,
    pub spec: FormationSpec,
    pub system: SystemRealization,
    pub initial: Vec<AgentState>,
}

fn restrict_spec(spec: &FormationSpec, graph: &CommGraph) -> FormationSpec {
    let entries = spec
        .entries()
        .into_iter()
        .filter(|e| {
            if e.j == LEADER {
                graph.has_leader_link(e.i).unwrap_or(false)
            } else {
                graph.neighbors(e.i).map(|s| s.contains(&e.j)).unwrap_or(false)
            }
        })
        .collect();
    FormationSpec::new(graph, spec.dim(), entries).expect("subset of a valid spec")
}

fn trajectory_graph(base: &CommGraph, prob: f64, seed: u64) -> CommGraph {
    if prob <= 0.0 {
        return base.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let links = base.leader_links();
    for _ in 0..100 {
        let kept: Vec<(usize, usize)> =
            base.edges().into_iter().filter(|_| !rng.gen_bool(prob)).collect();
        if let Ok(g) = CommGraph::new(base.num_followers(), &kept, &links) {
            return g;
        }
    }
    base.clone()
}

pub fn plan_trajectory(
    scenario: &Scenario,
    cfg: &GenerationConfig,
    k: usize,
) -> Result<TrajectoryPlan, DatagenError> {
    let idx = k as u64;
    let graph = trajectory_graph(
        &scenario.graph,
        cfg.edge_drop_prob,
        derive_seed(cfg.seed, idx, STREAM_GRAPH),
    );
    let spec = if cfg.vary_offsets {
        FormationSpec::random(
            &graph,
            scenario.n,
            derive_seed(cfg.seed, idx, STREAM_OFFSETS),
            cfg.offset_range,
            false,
        )
    } else {
        restrict_spec(&scenario.spec, &graph)
    };
    let system = SystemRealization::sample(
        derive_seed(cfg.seed, idx, STREAM_SYSTEM),
        scenario.n,
        graph.num_followers(),
        cfg.variation,
    )?;
    let leader0 = scenario.leader.at(0.0, scenario.n);
    let initial = initial_states_near_equilibrium(
        &graph,
        &spec,
        &leader0,
        cfg.init_half_width,
        derive_seed(cfg.seed, idx, STREAM_INIT),
    )?;
    Ok(TrajectoryPlan {
        graph,
        spec,
        system,
        initial,
    })
}

/// Closed-loop expert config for a plan.
pub fn expert_sim_config(
    scenario: &Scenario,
    cfg: &GenerationConfig,
    plan: &TrajectoryPlan,
) -> Result<SimConfig, DatagenError> {
    Ok(SimConfig {
        dt: cfg.dt,
        t_end: cfg.horizon,
        log_stride: cfg.stride()?,
        graph: plan.graph.clone(),
        spec: plan.spec.clone(),
        gains: ControllerGains::uniform(plan.graph.num_followers(), AgentGains::default(), 1e-3)?,
        expert: cfg.expert,
        system: plan.system.clone(),
        leader: scenario.leader.clone(),
        mode: ControllerMode::Expert,
        initial: plan.initial.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborState {
    pub id: usize,
    pub state: Vec<f64>,
}

/// One sample of one agent in one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub traj: usize,
    pub t: f64,
    /// `[x1, x2]`.
    pub state: Vec<f64>,
    /// Augmented-graph neighbours in ascending id order.
    pub neighbors: Vec<NeighborState>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format: String,
    pub n: usize,
    pub num_followers: usize,
    pub num_trajectories: usize,
    pub sample_period: f64,
    pub seed: u64,
    pub num_records: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub meta: DatasetMeta,
    /// `records[i-1]` belongs to follower `i`, ordered by `(traj, t)`.
    pub records: Vec<Vec<Record>>,
}

/// Outcome of one expert run, used for sanity reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertRunSummary {
    pub traj: usize,
    /// `max_i |e1_i| + |e1_i'|` at the end of the run.
    pub final_error: f64,
}

fn records_from_log(
    k: usize,
    graph: &CommGraph,
    leader: &LeaderProfile,
    log: &simcore::SimLog,
) -> Vec<Vec<Record>> {
    let stacked = |j: usize, s: usize| -> Vec<f64> {
        if j == LEADER {
            let l = leader.at(log.times[s], log.n);
            let mut v = l.x1;
            v.extend_from_slice(&l.x2);
            v
        } else {
            let a = &log.agents[j - 1];
            let mut v = a.x1[s].clone();
            v.extend_from_slice(&a.x2[s]);
            v
        }
    };
    (1..=graph.num_followers())
        .map(|i| {
            let nbrs = graph.augmented_neighbors(i).expect("index in range");
            (0..log.times.len())
                .map(|s| Record {
                    traj: k,
                    t: log.times[s],
                    state: stacked(i, s),
                    neighbors: nbrs
                        .iter()
                        .map(|&j| NeighborState {
                            id: j,
                            state: stacked(j, s),
                        })
                        .collect(),
                    u: log.agents[i - 1].u[s].clone(),
                })
                .collect()
        })
        .collect()
}

/// Runs one expert trajectory and returns its per-agent records.
pub fn generate_trajectory(
    scenario: &Scenario,
    cfg: &GenerationConfig,
    k: usize,
) -> Result<(Vec<Vec<Record>>, ExpertRunSummary), DatagenError> {
    let plan = plan_trajectory(scenario, cfg, k)?;
    let sim = expert_sim_config(scenario, cfg, &plan)?;
    let log = simcore::run_closed_loop_with(&sim, None, Execution::Sequential)
        .map_err(|source| DatagenError::Simulation { traj: k, source })?;
    let records = records_from_log(k, &plan.graph, &scenario.leader, &log);
    let final_error = simcore::error_series(&log)
        .iter()
        .map(|s| *s.last().unwrap())
        .fold(0.0, f64::max);
    Ok((records, ExpertRunSummary { traj: k, final_error }))
}

/// All trajectories, generated in parallel and merged in `(traj, t)` order.
pub fn generate_dataset(
    scenario: &Scenario,
    cfg: &GenerationConfig,
) -> Result<(TrajectoryDataset, Vec<ExpertRunSummary>), DatagenError> {
    generate_dataset_with(scenario, cfg, Execution::Auto)
}

pub fn generate_dataset_with(
    scenario: &Scenario,
    cfg: &GenerationConfig,
    exec: Execution,
) -> Result<(TrajectoryDataset, Vec<ExpertRunSummary>), DatagenError> {
    cfg.validate()?;
    scenario.spec.check_graph(&scenario.graph)?;
    let runs = par::try_map_indexed(exec, cfg.trajectories, 2, |k| {
        generate_trajectory(scenario, cfg, k)
    })?;
    let num = scenario.graph.num_followers();
    let mut records: Vec<Vec<Record>> = vec![Vec::new(); num];
    let mut summaries = Vec::with_capacity(runs.len());
    for (per_agent, summary) in runs {
        for (dst, src) in records.iter_mut().zip(per_agent) {
            dst.extend(src);
        }
        summaries.push(summary);
    }
    let meta = DatasetMeta {
        format: DATASET_FORMAT.into(),
        n: scenario.n,
        num_followers: num,
        num_trajectories: cfg.trajectories,
        sample_period: cfg.sample_period,
        seed: cfg.seed,
        num_records: records.iter().map(Vec::len).sum(),
    };
    Ok((TrajectoryDataset { meta, records }, summaries))
}

impl TrajectoryDataset {
    /// Encoded `(input, target)` pairs of follower `i`.
    pub fn training_samples(&self, i: usize) -> Result<Vec<Sample>, DatagenError> {
        let layout = InputLayout::new(self.meta.n, self.meta.num_followers, i)?;
        let recs = self
            .records
            .get(i.wrapping_sub(1))
            .ok_or(DatagenError::EmptyAgent(i))?;
        if recs.is_empty() {
            return Err(DatagenError::EmptyAgent(i));
        }
        recs.iter()
            .map(|r| {
                let states: Vec<(usize, &[f64])> =
                    r.neighbors.iter().map(|nb| (nb.id, nb.state.as_slice())).collect();
                let ids: Vec<usize> = r.neighbors.iter().map(|nb| nb.id).collect();
                Ok(Sample {
                    input: encode_input(&layout, &r.state, &states, &ids)?,
                    target: r.u.clone(),
                })
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    agent: usize,
    traj: usize,
    t: f64,
    state: Vec<f64>,
    neighbors: Vec<NeighborState>,
    u: Vec<f64>,
}

impl RecordLine {
    fn new(agent: usize, r: &Record) -> Self {
        RecordLine {
            agent,
            traj: r.traj,
            t: r.t,
            state: r.state.clone(),
            neighbors: r.neighbors.clone(),
            u: r.u.clone(),
        }
    }

    fn into_record(self) -> Record {
        Record {
            traj: self.traj,
            t: self.t,
            state: self.state,
            neighbors: self.neighbors,
            u: self.u,
        }
    }
}

/// Writes the header line then one JSON record per line, ordered by
/// `(traj, t, agent)`.
pub fn write_dataset(d: &TrajectoryDataset, path: &Path) -> Result<(), DatagenError> {
    let io = |source| DatagenError::IoFailure {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let header = serde_json::to_string(&d.meta).expect("meta serialises");
    writeln!(w, "{header}").map_err(io)?;
    let mut cursors = vec![0usize; d.records.len()];
    loop {
        // pick the agent whose next record has the smallest (traj, t, agent)
        let next = (0..d.records.len())
            .filter(|&a| cursors[a] < d.records[a].len())
            .min_by(|&a, &b| {
                let ra = &d.records[a][cursors[a]];
                let rb = &d.records[b][cursors[b]];
                (ra.traj, ra.t, a)
                    .partial_cmp(&(rb.traj, rb.t, b))
                    .expect("finite times")
            });
        let Some(a) = next else { break };
        let line = RecordLine::new(a + 1, &d.records[a][cursors[a]]);
        cursors[a] += 1;
        let text = serde_json::to_string(&line).expect("record serialises");
        writeln!(w, "{text}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<TrajectoryDataset, DatagenError> {
    let io = |source| DatagenError::IoFailure {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(io)?,
        None => {
            return Err(DatagenError::CorruptRecord {
                line: 1,
                reason: "missing header".into(),
            })
        }
    };
    let probe: serde_json::Value =
        serde_json::from_str(&header).map_err(|e| DatagenError::CorruptRecord {
            line: 1,
            reason: e.to_string(),
        })?;
    let found = probe.get("format").and_then(|v| v.as_str()).unwrap_or("<none>");
    if found != DATASET_FORMAT {
        return Err(DatagenError::FormatVersionMismatch {
            found: found.into(),
            expected: DATASET_FORMAT.into(),
        });
    }
    let meta: DatasetMeta =
        serde_json::from_str(&header).map_err(|e| DatagenError::CorruptRecord {
            line: 1,
            reason: e.to_string(),
        })?;
    let mut records = vec![Vec::new(); meta.num_followers];
    let mut count = 0usize;
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        let line = line.map_err(io)?;
        let corrupt = |reason: String| DatagenError::CorruptRecord {
            line: lineno,
            reason,
        };
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        if rec.agent == 0 || rec.agent > meta.num_followers {
            return Err(corrupt(format!("agent {} out of range", rec.agent)));
        }
        let agent = rec.agent;
        let r = rec.into_record();
        let w = 2 * meta.n;
        if r.state.len() != w
            || r.u.len() != meta.n
            || r.neighbors.iter().any(|nb| nb.state.len() != w)
        {
            return Err(corrupt("vector width does not match n".into()));
        }
        if !r.t.is_finite()
            || r.state.iter().chain(&r.u).any(|v| !v.is_finite())
            || r.neighbors.iter().flat_map(|nb| &nb.state).any(|v| !v.is_finite())
        {
            return Err(corrupt("non-finite value".into()));
        }
        if let Some(prev) = records[agent - 1].last() {
            let prev: &Record = prev;
            if (prev.traj, prev.t) >= (r.traj, r.t) {
                return Err(corrupt("records out of (traj, t) order".into()));
            }
        }
        records[agent - 1].push(r);
        count += 1;
    }
    if count != meta.num_records {
        return Err(DatagenError::CorruptRecord {
            line: count + 1,
            reason: format!("expected {} records, found {count}", meta.num_records),
        });
    }
    Ok(TrajectoryDataset { meta, records })
}
