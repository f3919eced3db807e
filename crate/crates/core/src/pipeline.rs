//! End-to-end experiment stages and the acceptance gates of a reproduction run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::datagen::{self, DatagenError, ExpertRunSummary, TrajectoryDataset};
use crate::formation::solve_equilibrium;
use crate::neuralnet::{self, InputLayout, NeuralPolicy, NnError, TrainingReport};
use crate::par::{self, Execution};
use crate::plot;
use crate::simcore::{self, ControllerMode, ErrorSummary, SimError, SimLog};

// Gate thresholds.
pub const FINAL_FRACTION: f64 = 0.05;
pub const TAIL_FRACTION: f64 = 0.10;
pub const TAIL_START: f64 = 45.0;
pub const EXPERT_TOLERANCE: f64 = 1e-2;
pub const EQUILIBRIUM_TOLERANCE: f64 = 1e-2;
pub const VALIDATION_FRACTION_OF_VARIANCE: f64 = 0.10;
/// Trajectory count of the `--fast` variant.
pub const FAST_TRAJECTORIES: usize = 20;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("agent {agent}: {source}")]
    Training {
        agent: usize,
        #[source]
        source: NnError,
    },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing artifact {0}")]
    MissingArtifact(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PipelineError>,
    },
}

impl PipelineError {
    fn at(stage: &'static str) -> impl FnOnce(PipelineError) -> PipelineError {
        move |e| PipelineError::Stage {
            stage,
            source: Box::new(e),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// File names inside an output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Artifacts { dir: dir.into() }
    }
    pub fn ensure(&self) -> Result<(), PipelineError> {
        fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))
    }
    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.jsonl")
    }
    pub fn expert_summary(&self) -> PathBuf {
        self.dir.join("expert_summary.json")
    }
    pub fn policy(&self, i: usize) -> PathBuf {
        self.dir.join(format!("policy_agent{i}.json"))
    }
    pub fn training_report(&self) -> PathBuf {
        self.dir.join("training_report.json")
    }
    pub fn sim_csv(&self, mode: ControllerMode) -> PathBuf {
        self.dir.join(format!("sim_{mode}.csv"))
    }
    pub fn metrics(&self, mode: ControllerMode) -> PathBuf {
        self.dir.join(format!("metrics_{mode}.json"))
    }
    pub fn error_plot(&self, mode: ControllerMode) -> PathBuf {
        self.dir.join(format!("errors_{mode}.svg"))
    }
    pub fn plan_plot(&self, mode: ControllerMode) -> PathBuf {
        self.dir.join(format!("plan_{mode}.svg"))
    }
    pub fn gates(&self) -> PathBuf {
        self.dir.join("gates.json")
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("plain data serialises");
    fs::write(path, text).map_err(io_err(path))
}

pub fn generate(
    cfg: &ExperimentConfig,
    exec: Execution,
) -> Result<(TrajectoryDataset, Vec<ExpertRunSummary>), PipelineError> {
    let scenario = cfg.scenario()?;
    Ok(datagen::generate_dataset_with(&scenario, &cfg.generation_config(), exec)?)
}

pub fn gen_data(
    cfg: &ExperimentConfig,
    out: &Artifacts,
    exec: Execution,
) -> Result<(TrajectoryDataset, Vec<ExpertRunSummary>), PipelineError> {
    out.ensure()?;
    let (ds, summaries) = generate(cfg, exec)?;
    datagen::write_dataset(&ds, &out.dataset())?;
    write_json(&summaries, &out.expert_summary())?;
    Ok((ds, summaries))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentReport {
    pub agent: usize,
    pub num_samples: usize,
    pub report: TrainingReport,
}

/// Fits normalisation and trains one policy per follower on its own slice.
pub fn train_policies(
    cfg: &ExperimentConfig,
    ds: &TrajectoryDataset,
    exec: Execution,
) -> Result<Vec<(NeuralPolicy, AgentReport)>, PipelineError> {
    let num = ds.meta.num_followers;
    if num != cfg.system.followers || ds.meta.n != cfg.system.n {
        return Err(DatagenError::DimensionMismatch(format!(
            "dataset has {} followers in R^{}, config has {} in R^{}",
            num, ds.meta.n, cfg.system.followers, cfg.system.n
        ))
        .into());
    }
    // Check every slice before spending time on any of them.
    for i in 1..=num {
        if ds.records[i - 1].is_empty() {
            return Err(PipelineError::Training {
                agent: i,
                source: NnError::EmptyDataset,
            });
        }
    }
    par::try_map_indexed(exec, num, 1, |k| {
        let i = k + 1;
        let samples = ds.training_samples(i)?;
        let wrap = |source| PipelineError::Training { agent: i, source };
        let layout = InputLayout::new(cfg.system.n, num, i).map_err(wrap)?;
        let mut policy = NeuralPolicy::new(layout, &cfg.training.hidden, cfg.network_seed(i)).map_err(wrap)?;
        policy.fit_normalization(&samples).map_err(wrap)?;
        let (trained, report) = neuralnet::train(&policy, &samples, &cfg.train_hyper(i)).map_err(wrap)?;
        Ok((
            trained,
            AgentReport {
                agent: i,
                num_samples: samples.len(),
                report,
            },
        ))
    })
}

pub fn save_policies(
    out: &Artifacts,
    trained: &[(NeuralPolicy, AgentReport)],
) -> Result<(), PipelineError> {
    out.ensure()?;
    for (p, r) in trained {
        neuralnet::save_policy(p, &out.policy(r.agent))?;
    }
    let reports: Vec<&AgentReport> = trained.iter().map(|(_, r)| r).collect();
    write_json(&reports, &out.training_report())
}

pub fn train(
    cfg: &ExperimentConfig,
    out: &Artifacts,
    exec: Execution,
) -> Result<Vec<(NeuralPolicy, AgentReport)>, PipelineError> {
    let path = out.dataset();
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(path.display().to_string()));
    }
    let ds = datagen::read_dataset(&path)?;
    let trained = train_policies(cfg, &ds, exec)?;
    save_policies(out, &trained)?;
    Ok(trained)
}

/// Loads the per-agent policies and checks each against its layout.
pub fn load_policies(cfg: &ExperimentConfig, out: &Artifacts) -> Result<Vec<NeuralPolicy>, PipelineError> {
    (1..=cfg.system.followers)
        .map(|i| {
            let path = out.policy(i);
            if !path.exists() {
                return Err(PipelineError::MissingArtifact(path.display().to_string()));
            }
            let p = neuralnet::load_policy(&path)?;
            p.check_layout(&InputLayout::new(cfg.system.n, cfg.system.followers, i)?)?;
            Ok(p)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: ControllerMode,
    pub config_hash: String,
    pub offline_expert: bool,
    pub locality_violations: u64,
    pub agents: Vec<ErrorSummary>,
}

pub fn run(
    cfg: &ExperimentConfig,
    mode: ControllerMode,
    policies: Option<&[NeuralPolicy]>,
    exec: Execution,
) -> Result<SimLog, PipelineError> {
    let sim = cfg.sim_config(mode)?;
    let policies = if mode.needs_policies() { policies } else { None };
    Ok(simcore::run_closed_loop_with(&sim, policies, exec)?)
}

/// Writes the CSV log, metrics and both plots of a finished run.
pub fn write_run(log: &SimLog, out: &Artifacts) -> Result<RunMetrics, PipelineError> {
    out.ensure()?;
    let mode = log.mode;
    simcore::write_csv(log, &out.sim_csv(mode))?;
    let m = RunMetrics {
        mode,
        config_hash: log.config_hash.clone(),
        offline_expert: log.offline_expert,
        locality_violations: log.total_violations(),
        agents: simcore::metrics(log)?,
    };
    write_json(&m, &out.metrics(mode))?;
    let p = out.error_plot(mode);
    plot::write_svg(&plot::error_plot(log), &p).map_err(io_err(&p))?;
    let p = out.plan_plot(mode);
    plot::write_svg(&plot::plan_plot(log), &p).map_err(io_err(&p))?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Gate {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Gate {
            name: name.into(),
            passed,
            detail,
        }
    }
}

/// Every agent ends below 5% of its initial error and stays below 10% from
/// `TAIL_START` on.
pub fn convergence_gate(log: &SimLog) -> Gate {
    let series = simcore::error_series(log);
    let mut worst_final: f64 = 0.0;
    let mut worst_tail: f64 = 0.0;
    let mut ok = !series.is_empty();
    for s in &series {
        let init = s[0];
        let fin = *s.last().unwrap();
        let tail = log
            .times
            .iter()
            .zip(s)
            .filter(|(t, _)| **t >= TAIL_START - 1e-9)
            .map(|(_, v)| *v)
            .fold(0.0, f64::max);
        let (rf, rt) = if init > 0.0 { (fin / init, tail / init) } else { (0.0, 0.0) };
        worst_final = worst_final.max(rf);
        worst_tail = worst_tail.max(rt);
        ok &= fin <= FINAL_FRACTION * init && (init == 0.0 || tail < TAIL_FRACTION * init);
    }
    Gate::new(
        "convergence",
        ok,
        format!("worst final/initial {worst_final:.3e} (<= {FINAL_FRACTION}), worst tail/initial {worst_tail:.3e} (< {TAIL_FRACTION})"),
    )
}

pub fn expert_gate(summaries: &[ExpertRunSummary]) -> Gate {
    let worst = summaries.iter().map(|s| s.final_error).fold(0.0, f64::max);
    let ok = !summaries.is_empty() && summaries.iter().all(|s| s.final_error < EXPERT_TOLERANCE);
    Gate::new(
        "expert-sanity",
        ok,
        format!("{} runs, worst final error {worst:.3e} (< {EXPERT_TOLERANCE})", summaries.len()),
    )
}

/// Largest distance between final follower positions and the formation
/// equilibrium for the final leader position.
pub fn equilibrium_error(cfg: &ExperimentConfig, log: &SimLog) -> Result<f64, PipelineError> {
    let scenario = cfg.scenario()?;
    let leader = log.leader_x1.last().ok_or(SimError::EmptyLog)?;
    let eq = solve_equilibrium(&scenario.graph, &scenario.spec, leader)
        .map_err(|e| PipelineError::Config(e.into()))?;
    Ok(log
        .final_positions()
        .iter()
        .zip(&eq)
        .map(|(x, p)| x.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max))
}

pub fn equilibrium_gate(cfg: &ExperimentConfig, log: &SimLog) -> Result<Gate, PipelineError> {
    let err = equilibrium_error(cfg, log)?;
    Ok(Gate::new(
        "equilibrium",
        err <= EQUILIBRIUM_TOLERANCE,
        format!("max position error {err:.3e} (<= {EQUILIBRIUM_TOLERANCE})"),
    ))
}

pub fn is_nondecreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] >= w[0])
}

pub fn monotonicity_gate(log: &SimLog) -> Gate {
    let ok = log.agents.iter().all(|a| is_nondecreasing(&a.d1) && is_nondecreasing(&a.d2));
    let last = |f: fn(&simcore::AgentSeries) -> &Vec<f64>| {
        log.agents
            .iter()
            .map(|a| f(a).last().copied().unwrap_or(0.0))
            .fold(0.0, f64::max)
    };
    Gate::new(
        "adaptation-monotone",
        ok,
        format!("max final d1 {:.3e}, d2 {:.3e}", last(|a| &a.d1), last(|a| &a.d2)),
    )
}

pub fn locality_gate(log: &SimLog) -> Gate {
    let v = log.total_violations();
    Gate::new("locality", v == 0, format!("{v} refused reads"))
}

pub fn validation_gate(reports: &[AgentReport]) -> Gate {
    let mut worst: f64 = 0.0;
    let mut ok = !reports.is_empty();
    for r in reports {
        match (r.report.validation_loss, r.report.validation_target_variance) {
            (Some(l), Some(v)) if v > 0.0 => {
                worst = worst.max(l / v);
                ok &= l < VALIDATION_FRACTION_OF_VARIANCE * v;
            }
            _ => ok = false,
        }
    }
    Gate::new(
        "validation-mse",
        ok,
        format!("worst validation MSE / target variance {worst:.3e} (< {VALIDATION_FRACTION_OF_VARIANCE})"),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reproduction {
    pub gates: Vec<Gate>,
    /// Reported alongside the gates but not part of the verdict.
    pub diagnostics: Vec<Gate>,
    pub metrics: RunMetrics,
    pub reports: Vec<AgentReport>,
}

impl Reproduction {
    pub fn passed(&self) -> bool {
        self.gates.iter().all(|g| g.passed)
    }
}

/// Shrinks a config to the fast variant: fewer trajectories, same horizon.
pub fn fast_variant(cfg: &mut ExperimentConfig) {
    cfg.generation.trajectories = cfg.generation.trajectories.min(FAST_TRAJECTORIES);
}

/// gen-data, train and a neuro-adaptive run, followed by the gates.
pub fn reproduce(
    cfg: &ExperimentConfig,
    out: &Artifacts,
    exec: Execution,
    mut progress: impl FnMut(&str),
) -> Result<Reproduction, PipelineError> {
    progress("generating expert data");
    let (ds, summaries) = gen_data(cfg, out, exec).map_err(PipelineError::at("gen-data"))?;
    progress("training policies");
    let trained = train_policies(cfg, &ds, exec)
        .and_then(|t| save_policies(out, &t).map(|_| t))
        .map_err(PipelineError::at("train"))?;
    let (policies, reports): (Vec<NeuralPolicy>, Vec<AgentReport>) = trained.into_iter().unzip();
    progress("simulating");
    let log = run(cfg, ControllerMode::NeuroAdaptive, Some(&policies), exec)
        .map_err(PipelineError::at("simulate"))?;
    let metrics = write_run(&log, out).map_err(PipelineError::at("simulate"))?;
    let gates = vec![
        convergence_gate(&log),
        expert_gate(&summaries),
        equilibrium_gate(cfg, &log).map_err(PipelineError::at("evaluate"))?,
        monotonicity_gate(&log),
        locality_gate(&log),
    ];
    let diagnostics = vec![validation_gate(&reports)];
    write_json(&(&gates, &diagnostics), &out.gates())?;
    Ok(Reproduction {
        gates,
        diagnostics,
        metrics,
        reports,
    })
}

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const SWEEP_DEPTHS: [usize; 3] = [1, 2, 3];
pub const SWEEP_WIDTHS: [usize; 3] = [4, 16, 32];
pub const SWEEP_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCase {
    pub depth: usize,
    pub width: usize,
    pub seed: u64,
    pub max_relative_error: f64,
}

/// Backprop against central differences on random networks of every depth
/// and width in the sweep, each with a random input and target.
pub fn gradient_sweep(n: usize, num_followers: usize, exec: Execution) -> Result<Vec<GradientCase>, NnError> {
    use rand::{Rng, SeedableRng};
    let mut cases = Vec::new();
    for &depth in &SWEEP_DEPTHS {
        for &width in &SWEEP_WIDTHS {
            for &seed in &SWEEP_SEEDS {
                cases.push((depth, width, seed));
            }
        }
    }
    par::try_map_indexed(exec, cases.len(), 1, |k| {
        let (depth, width, seed) = cases[k];
        let layout = InputLayout::new(n, num_followers, 1)?;
        let policy = NeuralPolicy::new(layout, &vec![width; depth], seed)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
        let sample = neuralnet::Sample {
            input: (0..layout.width()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            target: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        Ok(GradientCase {
            depth,
            width,
            seed,
            max_relative_error: neuralnet::gradient_check(&policy, &sample)?,
        })
    })
}
