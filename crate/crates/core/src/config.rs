//! Experiment configuration file (TOML).
//!
//! Every table rejects unknown keys. All random streams derive from the single
//! top-level `seed`, so one number pins a whole experiment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{derive_seed, initial_states_near_equilibrium, ExpertGains, GenerationConfig, Scenario};
use crate::dynamics::{DynamicsError, LeaderProfile, SystemRealization};
use crate::formation::{AgentGains, ControllerGains, FormationError, FormationSpec, OffsetEntry};
use crate::graph::{CommGraph, GraphError};
use crate::neuralnet::TrainHyper;
use crate::simcore::{ControllerMode, SimConfig};

/// Preset reproducing the five-follower experiment.
pub const BUNDLED_PRESET: &str = include_str!("../../../configs/paper.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Formation(#[from] FormationError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub n: usize,
    pub followers: usize,
    /// Spread of the test system drawn for online runs.
    #[serde(default = "one")]
    pub variation: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub edges: Vec<(usize, usize)>,
    pub leader_links: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Offsets {
    /// Must be the string `"random"`.
    Keyword(String),
    Explicit(Vec<OffsetEntry>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormationSection {
    pub offsets: Offsets,
    #[serde(default = "one")]
    pub range: f64,
    #[serde(default)]
    pub antisymmetric: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentGainOverride {
    pub id: usize,
    pub k1: Option<f64>,
    pub k2: Option<f64>,
    pub mu1: Option<f64>,
    pub mu2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainsSection {
    pub k1: f64,
    pub k2: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub epsilon: f64,
    pub agent: Vec<AgentGainOverride>,
}

impl Default for GainsSection {
    fn default() -> Self {
        let d = AgentGains::default();
        GainsSection {
            k1: d.k1,
            k2: d.k2,
            mu1: d.mu1,
            mu2: d.mu2,
            epsilon: crate::formation::DEFAULT_DEAD_ZONE,
            agent: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationSection {
    pub trajectories: usize,
    pub horizon: f64,
    pub sample_period: f64,
    pub dt: f64,
    pub variation: f64,
    pub init_half_width: f64,
    pub expert_kp: f64,
    pub expert_kd: f64,
    pub edge_drop_prob: f64,
    pub vary_offsets: bool,
}

impl Default for GenerationSection {
    fn default() -> Self {
        let g = GenerationConfig::default();
        GenerationSection {
            trajectories: g.trajectories,
            horizon: g.horizon,
            sample_period: g.sample_period,
            dt: g.dt,
            variation: g.variation,
            init_half_width: g.init_half_width,
            expert_kp: g.expert.kp,
            expert_kd: g.expert.kd,
            edge_drop_prob: g.edge_drop_prob,
            vary_offsets: g.vary_offsets,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub validation_fraction: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let h = TrainHyper::default();
        TrainingSection {
            hidden: vec![64, 64],
            epochs: h.epochs,
            batch_size: h.batch_size,
            learning_rate: h.learning_rate,
            momentum: h.momentum,
            validation_fraction: h.validation_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub dt: f64,
    pub t_end: f64,
    pub log_stride: usize,
    pub mode: ControllerMode,
    pub init_half_width: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            dt: 1e-3,
            t_end: 55.0,
            log_stride: 100,
            mode: ControllerMode::NeuroAdaptive,
            init_half_width: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub system: SystemSection,
    pub graph: GraphSection,
    pub formation: FormationSection,
    #[serde(default)]
    pub leader: LeaderProfile,
    #[serde(default)]
    pub gains: GainsSection,
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub output: OutputSection,
}

// Stream tags for seeds derived from the master seed.
const SEED_GENERATION: u64 = 10;
const SEED_TEST_SYSTEM: u64 = 11;
const SEED_OFFSETS: u64 = 12;
const SEED_TRAINING: u64 = 13;
const SEED_INITIAL: u64 = 14;
const SEED_NETWORK_INIT: u64 = 15;

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn preset() -> Self {
        Self::from_toml_str(BUNDLED_PRESET).expect("bundled preset is valid")
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Checks everything that can be checked without running anything.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.system.n == 0 || self.system.followers == 0 {
            return bad("system.n and system.followers must be >= 1".into());
        }
        if let Offsets::Keyword(k) = &self.formation.offsets {
            if k != "random" {
                return bad(format!("formation.offsets must be \"random\" or a list, got \"{k}\""));
            }
        }
        if self.training.epochs == 0 || self.training.batch_size == 0 {
            return bad("training.epochs and training.batch_size must be >= 1".into());
        }
        if self.training.hidden.iter().any(|&h| h == 0) {
            return bad("training.hidden widths must be >= 1".into());
        }
        let graph = self.comm_graph()?;
        self.formation_spec(&graph)?;
        self.controller_gains()?;
        self.leader.validate(self.system.n)?;
        self.generation_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let s = &self.simulation;
        if !(s.dt > 0.0 && s.t_end > s.dt && s.log_stride >= 1 && s.init_half_width >= 0.0) {
            return bad("simulation needs dt > 0, t_end > dt, log_stride >= 1".into());
        }
        Ok(())
    }

    pub fn comm_graph(&self) -> Result<CommGraph, ConfigError> {
        Ok(CommGraph::new(
            self.system.followers,
            &self.graph.edges,
            &self.graph.leader_links,
        )?)
    }

    pub fn formation_spec(&self, graph: &CommGraph) -> Result<FormationSpec, ConfigError> {
        let n = self.system.n;
        Ok(match &self.formation.offsets {
            Offsets::Keyword(_) => FormationSpec::random(
                graph,
                n,
                derive_seed(self.seed, 0, SEED_OFFSETS),
                self.formation.range,
                self.formation.antisymmetric,
            ),
            Offsets::Explicit(entries) => FormationSpec::new(graph, n, entries.clone())?,
        })
    }

    pub fn controller_gains(&self) -> Result<ControllerGains, ConfigError> {
        let g = &self.gains;
        let base = AgentGains {
            k1: g.k1,
            k2: g.k2,
            mu1: g.mu1,
            mu2: g.mu2,
        };
        let mut per_agent = vec![base; self.system.followers];
        for o in &g.agent {
            let slot = per_agent
                .get_mut(o.id.wrapping_sub(1))
                .ok_or_else(|| ConfigError::Invalid(format!("gains.agent id {} out of range", o.id)))?;
            slot.k1 = o.k1.unwrap_or(slot.k1);
            slot.k2 = o.k2.unwrap_or(slot.k2);
            slot.mu1 = o.mu1.unwrap_or(slot.mu1);
            slot.mu2 = o.mu2.unwrap_or(slot.mu2);
        }
        Ok(ControllerGains::new(per_agent, g.epsilon)?)
    }

    pub fn scenario(&self) -> Result<Scenario, ConfigError> {
        let graph = self.comm_graph()?;
        let spec = self.formation_spec(&graph)?;
        Ok(Scenario {
            n: self.system.n,
            graph,
            spec,
            leader: self.leader.clone(),
        })
    }

    pub fn generation_config(&self) -> GenerationConfig {
        let g = &self.generation;
        GenerationConfig {
            trajectories: g.trajectories,
            horizon: g.horizon,
            sample_period: g.sample_period,
            dt: g.dt,
            seed: derive_seed(self.seed, 0, SEED_GENERATION),
            variation: g.variation,
            init_half_width: g.init_half_width,
            expert: ExpertGains {
                kp: g.expert_kp,
                kd: g.expert_kd,
            },
            edge_drop_prob: g.edge_drop_prob,
            vary_offsets: g.vary_offsets,
            offset_range: self.formation.range,
        }
    }

    /// Training hyperparameters for follower `i`.
    pub fn train_hyper(&self, i: usize) -> TrainHyper {
        let t = &self.training;
        TrainHyper {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            validation_fraction: t.validation_fraction,
            seed: derive_seed(self.seed, i as u64, SEED_TRAINING),
        }
    }

    pub fn network_seed(&self, i: usize) -> u64 {
        derive_seed(self.seed, i as u64, SEED_NETWORK_INIT)
    }

    /// The unseen system the online controller is tested on.
    pub fn test_system(&self) -> Result<SystemRealization, ConfigError> {
        Ok(SystemRealization::sample(
            derive_seed(self.seed, 0, SEED_TEST_SYSTEM),
            self.system.n,
            self.system.followers,
            self.system.variation,
        )?)
    }

    pub fn sim_config(&self, mode: ControllerMode) -> Result<SimConfig, ConfigError> {
        let scenario = self.scenario()?;
        let leader0 = scenario.leader.at(0.0, scenario.n);
        let initial = initial_states_near_equilibrium(
            &scenario.graph,
            &scenario.spec,
            &leader0,
            self.simulation.init_half_width,
            derive_seed(self.seed, 0, SEED_INITIAL),
        )?;
        Ok(SimConfig {
            dt: self.simulation.dt,
            t_end: self.simulation.t_end,
            log_stride: self.simulation.log_stride,
            graph: scenario.graph,
            spec: scenario.spec,
            gains: self.controller_gains()?,
            expert: ExpertGains {
                kp: self.generation.expert_kp,
                kd: self.generation.expert_kd,
            },
            system: self.test_system()?,
            leader: self.leader.clone(),
            mode,
            initial,
        })
    }
}
