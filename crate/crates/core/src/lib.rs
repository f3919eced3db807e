//! Distributed neuro-adaptive formation control for leader-follower
//! multi-agent systems with unknown second-order dynamics.
//!
//! The pipeline has two stages. Offline, a model-aware expert drives many
//! randomly sampled systems and each follower's network is fitted to the
//! recorded inputs ([`datagen`], [`neuralnet`]). Online, every follower runs
//! the learned feedforward together with error feedback whose gains adapt as
//! the run goes ([`control`]), using only what its neighbours share.
//! [`simcore`] closes the loop and audits that locality.

pub mod config;
pub mod control;
pub mod datagen;
pub mod dynamics;
pub mod formation;
pub mod graph;
pub mod neuralnet;
pub mod par;
pub mod pipeline;
pub mod plot;
pub mod simcore;

pub use control::{AdaptationState, AdaptiveGains, LocalView};
pub use datagen::{GenerationConfig, Scenario, TrajectoryDataset};
pub use dynamics::{AgentState, LeaderProfile, SystemRealization};
pub use formation::{ControllerGains, FormationSpec};
pub use graph::CommGraph;
pub use neuralnet::{NeuralPolicy, TrainHyper};
pub use simcore::{ControllerMode, SimConfig, SimLog};
