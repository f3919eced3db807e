//! End-to-end acceptance criteria. Each test writes one PASS/FAIL line to
//! stderr (bypassing the harness capture) before asserting, so the full
//! verdict table is visible in a plain `cargo test` run.
//!
//! The preset pipeline (expert data, training, closed-loop runs) is shared
//! between criteria and built once.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use formctl::config::ExperimentConfig;
use formctl::datagen::{read_dataset, write_dataset, ExpertRunSummary, TrajectoryDataset};
use formctl::formation::{formation_error, inverse_error, solve_equilibrium, FormationSpec};
use formctl::graph::CommGraph;
use formctl::neuralnet::{encode_input, load_policy, save_policy, InputLayout, NeuralPolicy, Sample};
use formctl::par::Execution;
use formctl::pipeline::{self, gradient_sweep, SWEEP_DEPTHS, SWEEP_SEEDS, SWEEP_WIDTHS};
use formctl::simcore::{rk4_step, ControllerMode, SimLog};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances.
const FINAL_FRACTION: f64 = 0.05;
const TAIL_FRACTION: f64 = 0.10;
const TAIL_START: f64 = 45.0;
const EXPERT_BOUND: f64 = 1e-2;
const EXPERT_TIME: f64 = 30.0;
const EQUILIBRIUM_BOUND: f64 = 1e-2;
const RK4_MIN_SLOPE: f64 = 3.8;
const RK4_DECAY_TOL: f64 = 1e-7;
const GRADIENT_TOL: f64 = 1e-4;
const DEAD_ZONE_TOL: f64 = 1e-12;
const MATRIX_FORM_TOL: f64 = 1e-12;

fn report(id: u32, name: &str, ok: bool, detail: &str) {
    let line = format!(
        "acceptance {id:>2} {name:<28} {} {detail}\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let mut err = std::io::stderr().lock();
    let _ = err.write_all(line.as_bytes());
    let _ = err.flush();
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

struct Preset {
    cfg: ExperimentConfig,
    dataset: TrajectoryDataset,
    summaries: Vec<ExpertRunSummary>,
    policies: Vec<NeuralPolicy>,
    neuro: SimLog,
}

fn preset() -> &'static Preset {
    static CELL: OnceLock<Preset> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ExperimentConfig::preset();
        let start = Instant::now();
        let (dataset, summaries) = pipeline::generate(&cfg, Execution::Auto).unwrap();
        let trained = pipeline::train_policies(&cfg, &dataset, Execution::Auto).unwrap();
        let policies: Vec<NeuralPolicy> = trained.into_iter().map(|(p, _)| p).collect();
        let neuro = pipeline::run(&cfg, ControllerMode::NeuroAdaptive, Some(&policies), Execution::Auto).unwrap();
        let _ = writeln!(
            std::io::stderr().lock(),
            "acceptance: preset pipeline (T={}, dt={}) built in {:.1}s",
            cfg.generation.trajectories,
            cfg.simulation.dt,
            start.elapsed().as_secs_f64()
        );
        Preset {
            cfg,
            dataset,
            summaries,
            policies,
            neuro,
        }
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-agent `|e1| + |e1'|` along a logged run, from the raw trajectories.
fn logged_errors(cfg: &ExperimentConfig, log: &SimLog) -> Vec<Vec<f64>> {
    let sc = cfg.scenario().unwrap();
    let n = sc.n;
    (1..=sc.graph.num_followers())
        .map(|i| {
            (0..log.len())
                .map(|s| {
                    let lead = sc.leader.at(log.times[s], n);
                    let a = &log.agents[i - 1];
                    let mut e = vec![0.0; n];
                    let mut r = vec![0.0; n];
                    let mut add = |x1: &[f64], x2: &[f64], c: &[f64]| {
                        for k in 0..n {
                            e[k] += a.x1[s][k] - x1[k] + c[k];
                            r[k] += a.x2[s][k] - x2[k];
                        }
                    };
                    for &j in sc.graph.neighbors(i).unwrap() {
                        let b = &log.agents[j - 1];
                        add(&b.x1[s], &b.x2[s], sc.spec.offset(i, j).unwrap());
                    }
                    if sc.graph.has_leader_link(i).unwrap() {
                        add(&log.leader_x1[s], &lead.x2, sc.spec.offset(i, 0).unwrap());
                    }
                    norm(&e) + norm(&r)
                })
                .collect()
        })
        .collect()
}

#[test]
fn criterion_01_formation_convergence() {
    let p = preset();
    let series = logged_errors(&p.cfg, &p.neuro);
    let t_end = *p.neuro.times.last().unwrap();
    let mut ok = (t_end - 55.0).abs() < 1e-9 && p.cfg.generation.trajectories == 100;
    let (mut worst_final, mut worst_tail) = (0.0f64, 0.0f64);
    for s in &series {
        let init = s[0];
        let fin = *s.last().unwrap();
        let tail = p
            .neuro
            .times
            .iter()
            .zip(s)
            .filter(|(t, _)| **t >= TAIL_START - 1e-9)
            .map(|(_, v)| *v)
            .fold(0.0, f64::max);
        worst_final = worst_final.max(fin / init);
        worst_tail = worst_tail.max(tail / init);
        ok &= init > 0.0 && fin <= FINAL_FRACTION * init && tail < TAIL_FRACTION * init;
    }
    report(
        1,
        "formation convergence",
        ok,
        &format!("worst final/initial {worst_final:.3e} (<= {FINAL_FRACTION}), worst t>=45 max/initial {worst_tail:.3e} (< {TAIL_FRACTION})"),
    );
}

#[test]
fn criterion_02_expert_sanity() {
    let p = preset();
    let sc = p.cfg.scenario().unwrap();
    let n = sc.n;
    let num_traj = p.dataset.meta.num_trajectories;
    // Recompute every follower's error at t = 30 from the recorded states.
    let mut worst = vec![0.0f64; num_traj];
    let mut seen = vec![0usize; num_traj];
    for (k, recs) in p.dataset.records.iter().enumerate() {
        let i = k + 1;
        for r in recs.iter().filter(|r| (r.t - EXPERT_TIME).abs() < 1e-9) {
            let mut e = vec![0.0; n];
            let mut rate = vec![0.0; n];
            for nb in &r.neighbors {
                let c = sc.spec.offset(i, nb.id).unwrap();
                for c_k in 0..n {
                    e[c_k] += r.state[c_k] - nb.state[c_k] + c[c_k];
                    rate[c_k] += r.state[n + c_k] - nb.state[n + c_k];
                }
            }
            worst[r.traj] = worst[r.traj].max(norm(&e) + norm(&rate));
            seen[r.traj] += 1;
        }
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    let agrees = p
        .summaries
        .iter()
        .all(|s| (s.final_error - worst[s.traj]).abs() <= 1e-9 * (1.0 + worst[s.traj]));
    let ok = num_traj == 100
        && seen.iter().all(|&c| c == sc.graph.num_followers())
        && agrees
        && worst.iter().all(|&w| w < EXPERT_BOUND);
    report(
        2,
        "expert sanity",
        ok,
        &format!("{num_traj} sampled systems, worst max_i error at t=30 {max:.3e} (< {EXPERT_BOUND})"),
    );
}

#[test]
fn criterion_03_equilibrium_oracle() {
    let p = preset();
    let sc = p.cfg.scenario().unwrap();
    let leader = p.neuro.leader_x1.last().unwrap();
    let eq = solve_equilibrium(&sc.graph, &sc.spec, leader).unwrap();
    // The oracle itself must zero the formation error.
    let residual = formation_error(&sc.graph, &sc.spec, &eq, leader)
        .unwrap()
        .iter()
        .map(|e| norm(e))
        .fold(0.0, f64::max);
    let err = p
        .neuro
        .final_positions()
        .iter()
        .zip(&eq)
        .map(|(x, q)| norm(&x.iter().zip(q).map(|(a, b)| a - b).collect::<Vec<_>>()))
        .fold(0.0, f64::max);
    report(
        3,
        "equilibrium oracle",
        residual < 1e-10 && err <= EQUILIBRIUM_BOUND,
        &format!("max |x_i(55) - x_i*| {err:.3e} (<= {EQUILIBRIUM_BOUND}), oracle residual {residual:.1e}"),
    );
}

#[test]
fn criterion_04_integrator_order() {
    // y'' = -y + cos 2t with y(0) = 1, y'(0) = 1/2.
    let f = |y: &[f64], t: f64| vec![y[1], -y[0] + (2.0 * t).cos()];
    let exact = |t: f64| (4.0 / 3.0) * t.cos() + 0.5 * t.sin() - (2.0 * t).cos() / 3.0;
    let err = |h: f64| {
        let steps = (2.0 / h).round() as usize;
        let mut y = vec![1.0, 0.5];
        for s in 0..steps {
            y = rk4_step(f, &y, s as f64 * h, h).unwrap();
        }
        (y[0] - exact(2.0)).abs()
    };
    let hs: [f64; 4] = [0.2, 0.1, 0.05, 0.025];
    let pts: Vec<(f64, f64)> = hs.iter().map(|&h| (h.ln(), err(h).ln())).collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let y = rk4_step(|y: &[f64], _| vec![-y[0]], &[1.0], 0.0, 0.1).unwrap();
    let decay = (y[0] - (-0.1f64).exp()).abs();
    report(
        4,
        "integrator order",
        slope >= RK4_MIN_SLOPE && decay <= RK4_DECAY_TOL,
        &format!("slope {slope:.3} (>= {RK4_MIN_SLOPE}), decay step error {decay:.2e} (<= {RK4_DECAY_TOL})"),
    );
}

#[test]
fn criterion_05_gradient_check() {
    let cases = gradient_sweep(3, 5, Execution::Auto).unwrap();
    let worst = cases.iter().map(|c| c.max_relative_error).fold(0.0, f64::max);
    let expected = SWEEP_DEPTHS.len() * SWEEP_WIDTHS.len() * SWEEP_SEEDS.len();
    report(
        5,
        "gradient check",
        cases.len() == expected && worst <= GRADIENT_TOL,
        &format!("{} networks, worst relative error {worst:.3e} (<= {GRADIENT_TOL})", cases.len()),
    );
}

#[test]
fn criterion_06_dead_zone_identity() {
    let eps = ExperimentConfig::preset().gains.epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (mut outside, mut inside, mut worst) = (0usize, 0usize, 0.0f64);
    let mut ok = true;
    while outside < 10_000 {
        let scale = 10f64.powf(rng.gen_range(-4.0..3.0));
        let e2: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let hat = inverse_error(&e2, eps);
        if norm(&e2) >= eps {
            let ip: f64 = e2.iter().zip(&hat).map(|(a, b)| a * b).sum();
            worst = worst.max((ip - 1.0).abs());
            outside += 1;
        } else {
            ok &= hat.iter().all(|&v| v == 0.0);
            inside += 1;
        }
    }
    report(
        6,
        "dead-zone identity",
        ok && inside > 0 && worst <= DEAD_ZONE_TOL,
        &format!("{outside} draws outside, worst |<e2,e2^> - 1| {worst:.2e}; {inside} inside all zero"),
    );
}

fn online_logs() -> &'static [SimLog] {
    static CELL: OnceLock<Vec<SimLog>> = OnceLock::new();
    CELL.get_or_init(|| {
        let p = preset();
        let mut logs = vec![p.neuro.clone()];
        for mode in [ControllerMode::AdaptiveOnly, ControllerMode::NnOnly, ControllerMode::Expert] {
            logs.push(pipeline::run(&p.cfg, mode, Some(&p.policies), Execution::Auto).unwrap());
        }
        logs
    })
}

#[test]
fn criterion_07_adaptation_monotone() {
    let logs = online_logs();
    let mut ok = true;
    let mut steps = 0;
    for log in logs {
        for a in &log.agents {
            ok &= a.d1.windows(2).all(|w| w[1] >= w[0]) && a.d2.windows(2).all(|w| w[1] >= w[0]);
            ok &= a.d1.iter().chain(&a.d2).all(|&v| v >= 0.0);
            steps += a.d1.len();
        }
        if !log.mode.adapts() {
            ok &= log.agents.iter().all(|a| a.d1.iter().chain(&a.d2).all(|&v| v == 0.0));
        }
    }
    let modes: Vec<&str> = logs.iter().map(|l| l.mode.as_str()).collect();
    report(
        7,
        "adaptation monotonicity",
        ok,
        &format!("{steps} logged agent-steps over {modes:?}"),
    );
}

#[test]
fn criterion_08_locality_audit() {
    let logs = online_logs();
    let counts: Vec<(String, u64)> = logs.iter().map(|l| (l.mode.to_string(), l.total_violations())).collect();
    let full = logs.iter().all(|l| (l.times.last().unwrap() - 55.0).abs() < 1e-9);
    report(
        8,
        "locality audit",
        full && counts.iter().all(|(_, v)| *v == 0),
        &format!("refused reads per mode {counts:?}"),
    );
}

#[test]
fn criterion_09_mask_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut triples = 0;
    let mut ok = true;
    while triples < 1000 {
        let n = rng.gen_range(1..4);
        let num = rng.gen_range(2..7);
        let layout = InputLayout::new(n, num, rng.gen_range(1..=num)).unwrap();
        let hidden: Vec<usize> = (0..rng.gen_range(1..3)).map(|_| rng.gen_range(2..20)).collect();
        let policy = NeuralPolicy::new(layout, &hidden, rng.gen()).unwrap();
        let sw = layout.state_width();
        let own: Vec<f64> = (0..sw).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let ids: Vec<usize> = layout.slot_ids().collect();
        let states: Vec<Vec<f64>> = ids.iter().map(|_| (0..sw).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
        let active: Vec<usize> = ids.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
        if active.len() == ids.len() {
            continue;
        }
        let refs: Vec<(usize, &[f64])> = ids.iter().copied().zip(states.iter().map(|s| s.as_slice())).collect();
        let input = encode_input(&layout, &own, &refs, &active).unwrap();
        // Perturb the raw contents of every inactive slot.
        let mut perturbed = input.clone();
        for id in ids.iter().filter(|id| !active.contains(id)) {
            let off = layout.slot_offset(*id).unwrap();
            for v in &mut perturbed[off..off + sw] {
                *v = rng.gen_range(-1e4..1e4);
            }
        }
        let a = policy.forward(&input).unwrap();
        let b = policy.forward(&perturbed).unwrap();
        ok &= a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
        triples += 1;
    }
    report(9, "mask invariance", ok, &format!("{triples} triples bit-identical"));
}

#[test]
fn criterion_10_serialization() {
    let p = preset();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dataset.jsonl");
    write_dataset(&p.dataset, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut ok = back.meta == p.dataset.meta && back.records.len() == p.dataset.records.len();
    let mut values = 0usize;
    for (xs, ys) in back.records.iter().zip(&p.dataset.records) {
        ok &= xs.len() == ys.len();
        for (x, y) in xs.iter().zip(ys) {
            ok &= x.traj == y.traj && x.t.to_bits() == y.t.to_bits();
            ok &= bits(&x.state) == bits(&y.state) && bits(&x.u) == bits(&y.u);
            ok &= x.neighbors.len() == y.neighbors.len();
            for (a, b) in x.neighbors.iter().zip(&y.neighbors) {
                ok &= a.id == b.id && bits(&a.state) == bits(&b.state);
            }
            values += x.state.len() + x.u.len();
        }
    }
    let mut params = 0usize;
    for (k, policy) in p.policies.iter().enumerate() {
        let path = dir.path().join(format!("policy_{k}.json"));
        save_policy(policy, &path).unwrap();
        let q = load_policy(&path).unwrap();
        ok &= bits(&q.params()) == bits(&policy.params()) && q == *policy;
        let samples: Vec<Sample> = p.dataset.training_samples(k + 1).unwrap().into_iter().take(100).collect();
        for s in &samples {
            ok &= bits(&q.forward(&s.input).unwrap()) == bits(&policy.forward(&s.input).unwrap());
        }
        params += q.num_params();
    }
    report(
        10,
        "serialization round trip",
        ok,
        &format!("{} records ({values}+ values) and {} policies ({params} parameters) bit-exact", back.meta.num_records, p.policies.len()),
    );
}

#[test]
fn criterion_11_matrix_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut worst = 0.0f64;
    for case in 0..1000u64 {
        let num = rng.gen_range(1..9);
        let mut edges: Vec<(usize, usize)> = (2..=num).map(|i| (rng.gen_range(1..i), i)).collect();
        for _ in 0..num {
            let (a, b) = (rng.gen_range(1..=num), rng.gen_range(1..=num));
            let e = (a.min(b), a.max(b));
            if a != b && !edges.contains(&e) {
                edges.push(e);
            }
        }
        let mut links: Vec<u8> = (0..num).map(|_| rng.gen_range(0..2)).collect();
        links[rng.gen_range(0..num)] = 1;
        let g = CommGraph::new(num, &edges, &links).unwrap();
        let n = rng.gen_range(1..4);
        let spec = FormationSpec::random(&g, n, case, 1.0, false);
        let x: Vec<Vec<f64>> = (0..num).map(|_| (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
        let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let e = formation_error(&g, &spec, &x, &x0).unwrap();
        // ((L + B) kron I_n) x + r, with r_i = sum_j c_ij + b_i (c_i0 - x0).
        let m = g.laplacian_plus_b();
        let xs = DVector::from_iterator(num * n, x.iter().flatten().copied());
        let big = m.kronecker(&nalgebra::DMatrix::<f64>::identity(n, n));
        let lin = big * xs;
        for i in 1..=num {
            for k in 0..n {
                let mut r = 0.0;
                for &j in g.neighbors(i).unwrap() {
                    r += spec.offset(i, j).unwrap()[k];
                }
                if links[i - 1] == 1 {
                    r += spec.offset(i, 0).unwrap()[k] - x0[k];
                }
                worst = worst.max((e[i - 1][k] - (lin[(i - 1) * n + k] + r)).abs());
            }
        }
    }
    report(
        11,
        "matrix-form equivalence",
        worst <= MATRIX_FORM_TOL,
        &format!("1000 random instances, worst deviation {worst:.2e} (<= {MATRIX_FORM_TOL})"),
    );
}
