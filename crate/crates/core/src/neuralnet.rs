//! Per-agent multilayer perceptron policies.
//!
//! The input has a fixed width: the agent's own state followed by one slot for
//! every other agent id (leader first, then followers in ascending order,
//! skipping the owner). Each slot is `2n` state entries plus a presence flag.
//! Absent agents are "disabled" by clearing the flag; the forward pass then
//! feeds exact zeros for the slot's state entries, so whatever is stored there
//! cannot influence the output.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const POLICY_FORMAT: &str = "formctl-nn-v1";

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: got {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("agent id {0} has no slot in this layout")]
    UnknownNeighborId(usize),
    #[error("active neighbour {0} has no state")]
    MissingNeighborState(usize),
    #[error("non-finite input value")]
    NonFiniteInput,
    #[error("training set is empty")]
    EmptyDataset,
    #[error("training loss became non-finite at epoch {0}")]
    DivergedLoss(usize),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("unsupported policy format `{found}`, expected `{expected}`")]
    FormatVersionMismatch { found: String, expected: String },
    #[error("malformed policy file: {0}")]
    Corrupt(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Input slot arrangement for one agent's network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub n: usize,
    pub num_followers: usize,
    pub owner: usize,
}

impl InputLayout {
    pub fn new(n: usize, num_followers: usize, owner: usize) -> Result<Self, NnError> {
        if n == 0 || num_followers == 0 || owner == 0 || owner > num_followers {
            return Err(NnError::InvalidArchitecture(format!(
                "bad layout n={n}, N={num_followers}, owner={owner}"
            )));
        }
        Ok(InputLayout {
            n,
            num_followers,
            owner,
        })
    }

    pub fn state_width(&self) -> usize {
        2 * self.n
    }

    pub fn slot_width(&self) -> usize {
        2 * self.n + 1
    }

    /// `2n + N (2n + 1)`.
    pub fn width(&self) -> usize {
        self.state_width() + self.num_followers * self.slot_width()
    }

    /// Agent ids owning a slot, in slot order.
    pub fn slot_ids(&self) -> impl Iterator<Item = usize> + '_ {
        (0..=self.num_followers).filter(move |&j| j != self.owner)
    }

    /// Offset of the slot belonging to agent `id`.
    pub fn slot_offset(&self, id: usize) -> Option<usize> {
        if id == self.owner || id > self.num_followers {
            return None;
        }
        let rank = if id < self.owner { id } else { id - 1 };
        Some(self.state_width() + rank * self.slot_width())
    }

    fn mask_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_followers).map(move |r| self.state_width() + r * self.slot_width() + 2 * self.n)
    }
}

/// Builds the network input for `layout.owner`. `neighbor_states` may list
/// states in any order and may include agents outside `active_ids`; those
/// are ignored.
pub fn encode_input(
    layout: &InputLayout,
    own: &[f64],
    neighbor_states: &[(usize, &[f64])],
    active_ids: &[usize],
) -> Result<Vec<f64>, NnError> {
    let sw = layout.state_width();
    if own.len() != sw {
        return Err(NnError::DimensionMismatch {
            got: own.len(),
            expected: sw,
        });
    }
    let mut v = vec![0.0; layout.width()];
    v[..sw].copy_from_slice(own);
    for &(id, _) in neighbor_states {
        layout
            .slot_offset(id)
            .ok_or(NnError::UnknownNeighborId(id))?;
    }
    for &id in active_ids {
        let off = layout.slot_offset(id).ok_or(NnError::UnknownNeighborId(id))?;
        let state = neighbor_states
            .iter()
            .find(|(j, _)| *j == id)
            .map(|(_, s)| *s)
            .ok_or(NnError::MissingNeighborState(id))?;
        if state.len() != sw {
            return Err(NnError::DimensionMismatch {
                got: state.len(),
                expected: sw,
            });
        }
        v[off..off + sw].copy_from_slice(state);
        v[off + sw] = 1.0;
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(NnError::NonFiniteInput);
    }
    Ok(v)
}

/// Dense layer, weights stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Normalization {
    input_shift: Vec<f64>,
    input_scale: Vec<f64>,
    output_shift: Vec<f64>,
    output_scale: Vec<f64>,
}

impl Normalization {
    fn identity(input: usize, output: usize) -> Self {
        Normalization {
            input_shift: vec![0.0; input],
            input_scale: vec![1.0; input],
            output_shift: vec![0.0; output],
            output_scale: vec![1.0; output],
        }
    }
}

/// MLP with tanh hidden layers and a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralPolicy {
    layout: InputLayout,
    sizes: Vec<usize>,
    layers: Vec<Layer>,
    norm: Normalization,
}

/// One supervised pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            momentum: 0.9,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Training MSE before the first update, then after every epoch.
    pub epoch_losses: Vec<f64>,
    pub validation_loss: Option<f64>,
    /// Per-component variance of the validation targets, averaged.
    pub validation_target_variance: Option<f64>,
    pub epochs_run: usize,
    /// Epoch whose weights were kept (lowest training loss; 0 = initial).
    pub kept_epoch: usize,
    pub hyper: TrainHyper,
}

impl TrainingReport {
    pub fn initial_loss(&self) -> f64 {
        self.epoch_losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        self.epoch_losses[self.kept_epoch]
    }
}

/// Scratch buffers for one forward/backward pass.
struct Workspace {
    // activations[0] is the normalised input; activations[k] the output of layer k.
    activations: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl NeuralPolicy {
    /// Glorot-uniform initialisation with zero biases and identity
    /// normalisation.
    pub fn new(layout: InputLayout, hidden: &[usize], seed: u64) -> Result<Self, NnError> {
        if hidden.iter().any(|&h| h == 0) {
            return Err(NnError::InvalidArchitecture("hidden layer of width 0".into()));
        }
        let mut sizes = vec![layout.width()];
        sizes.extend_from_slice(hidden);
        sizes.push(layout.n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Layer {
                    weights: (0..w[0] * w[1]).map(|_| rng.gen_range(-limit..limit)).collect(),
                    biases: vec![0.0; w[1]],
                }
            })
            .collect();
        let norm = Normalization::identity(layout.width(), layout.n);
        Ok(NeuralPolicy {
            layout,
            sizes,
            layers,
            norm,
        })
    }

    /// Network from explicit layers. Layer `k` maps `sizes[k]` to
    /// `sizes[k+1]`; the first must accept the layout width and the last
    /// must emit `n` values.
    pub fn from_layers(layout: InputLayout, layers: Vec<Layer>) -> Result<Self, NnError> {
        let mut sizes = vec![layout.width()];
        for (k, l) in layers.iter().enumerate() {
            let input = sizes[k];
            if l.biases.is_empty() || l.weights.len() != input * l.biases.len() {
                return Err(NnError::InvalidArchitecture(format!(
                    "layer {k}: {} weights for {} inputs and {} outputs",
                    l.weights.len(),
                    input,
                    l.biases.len()
                )));
            }
            sizes.push(l.biases.len());
        }
        if layers.is_empty() || *sizes.last().unwrap() != layout.n {
            return Err(NnError::InvalidArchitecture("output width must equal n".into()));
        }
        let norm = Normalization::identity(layout.width(), layout.n);
        Ok(NeuralPolicy {
            layout,
            sizes,
            layers,
            norm,
        })
    }

    pub fn layout(&self) -> &InputLayout {
        &self.layout
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn check_layout(&self, expected: &InputLayout) -> Result<(), NnError> {
        if self.layout.width() != expected.width() {
            return Err(NnError::DimensionMismatch {
                got: self.layout.width(),
                expected: expected.width(),
            });
        }
        if self.layout.n != expected.n {
            return Err(NnError::DimensionMismatch {
                got: self.layout.n,
                expected: expected.n,
            });
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Weights then biases, layer by layer.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.biases);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<(), NnError> {
        if p.len() != self.num_params() {
            return Err(NnError::DimensionMismatch {
                got: p.len(),
                expected: self.num_params(),
            });
        }
        let mut at = 0;
        for l in &mut self.layers {
            let w = l.weights.len();
            l.weights.copy_from_slice(&p[at..at + w]);
            at += w;
            let b = l.biases.len();
            l.biases.copy_from_slice(&p[at..at + b]);
            at += b;
        }
        Ok(())
    }

    /// Sets input/output standardisation from data. State features in
    /// neighbour slots use only samples where that slot is active; presence
    /// flags are left unscaled.
    pub fn fit_normalization(&mut self, samples: &[Sample]) -> Result<(), NnError> {
        if samples.is_empty() {
            return Err(NnError::EmptyDataset);
        }
        let width = self.layout.width();
        let sw = self.layout.state_width();
        let mut norm = Normalization::identity(width, self.layout.n);
        let slot_of = |f: usize| -> Option<(usize, usize)> {
            (f >= sw).then(|| {
                let r = (f - sw) / self.layout.slot_width();
                (r, sw + r * self.layout.slot_width() + 2 * self.layout.n)
            })
        };
        for f in 0..width {
            let slot = slot_of(f);
            if slot.map_or(false, |(_, m)| m == f) {
                continue;
            }
            let values: Vec<f64> = samples
                .iter()
                .filter(|s| slot.map_or(true, |(_, m)| s.input[m] != 0.0))
                .map(|s| s.input[f])
                .collect();
            if let Some((shift, scale)) = mean_std(&values) {
                norm.input_shift[f] = shift;
                norm.input_scale[f] = scale;
            }
        }
        for k in 0..self.layout.n {
            let values: Vec<f64> = samples.iter().map(|s| s.target[k]).collect();
            if let Some((shift, scale)) = mean_std(&values) {
                norm.output_shift[k] = shift;
                norm.output_scale[k] = scale;
            }
        }
        self.norm = norm;
        Ok(())
    }

    fn normalize_into(&self, input: &[f64], out: &mut [f64]) {
        let sw = self.layout.state_width();
        let slot = self.layout.slot_width();
        for f in 0..sw {
            out[f] = (input[f] - self.norm.input_shift[f]) / self.norm.input_scale[f];
        }
        for m in self.layout.mask_positions() {
            let start = m - 2 * self.layout.n;
            debug_assert_eq!((start - sw) % slot, 0);
            if input[m] == 0.0 {
                out[start..=m].iter_mut().for_each(|v| *v = 0.0);
            } else {
                for f in start..m {
                    out[f] = (input[f] - self.norm.input_shift[f]) / self.norm.input_scale[f];
                }
                out[m] = input[m];
            }
        }
    }

    fn workspace(&self) -> Workspace {
        Workspace {
            activations: self.sizes.iter().map(|&s| vec![0.0; s]).collect(),
            deltas: self.sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    // Fills ws.activations; the last entry is the normalised output.
    fn forward_ws(&self, input: &[f64], ws: &mut Workspace) {
        self.normalize_into(input, &mut ws.activations[0]);
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let (prev, next) = ws.activations.split_at_mut(k + 1);
            let x = &prev[k];
            let y = &mut next[0];
            let fan_in = x.len();
            for (r, out) in y.iter_mut().enumerate() {
                let row = &layer.weights[r * fan_in..(r + 1) * fan_in];
                let z = layer.biases[r] + dot(row, x);
                *out = if k == last { z } else { z.tanh() };
            }
        }
    }

    /// Policy output `u_nn` for an encoded input.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        if input.len() != self.layout.width() {
            return Err(NnError::DimensionMismatch {
                got: input.len(),
                expected: self.layout.width(),
            });
        }
        let mut ws = self.workspace();
        self.forward_ws(input, &mut ws);
        Ok(self.denormalize(ws.activations.last().unwrap()))
    }

    fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.norm.output_shift.iter().zip(&self.norm.output_scale))
            .map(|(v, (s, c))| v * c + s)
            .collect()
    }

    fn normalized_target(&self, target: &[f64], k: usize) -> f64 {
        (target[k] - self.norm.output_shift[k]) / self.norm.output_scale[k]
    }

    /// `0.5 |y - t|^2` in standardised output units.
    pub fn loss(&self, input: &[f64], target: &[f64]) -> Result<f64, NnError> {
        self.check_sample(input, target)?;
        let mut ws = self.workspace();
        self.forward_ws(input, &mut ws);
        Ok(self.half_sq_error(ws.activations.last().unwrap(), target))
    }

    fn half_sq_error(&self, y: &[f64], target: &[f64]) -> f64 {
        0.5 * y
            .iter()
            .enumerate()
            .map(|(k, v)| (v - self.normalized_target(target, k)).powi(2))
            .sum::<f64>()
    }

    fn check_sample(&self, input: &[f64], target: &[f64]) -> Result<(), NnError> {
        if input.len() != self.layout.width() {
            return Err(NnError::DimensionMismatch {
                got: input.len(),
                expected: self.layout.width(),
            });
        }
        if target.len() != self.layout.n {
            return Err(NnError::DimensionMismatch {
                got: target.len(),
                expected: self.layout.n,
            });
        }
        Ok(())
    }

    /// Backpropagation of [`NeuralPolicy::loss`]; gradients are added into
    /// `grad` (same order as [`NeuralPolicy::params`]). Returns the loss.
    fn accumulate_gradient(
        &self,
        input: &[f64],
        target: &[f64],
        ws: &mut Workspace,
        grad: &mut [f64],
    ) -> f64 {
        self.forward_ws(input, ws);
        let depth = self.layers.len();
        let loss = self.half_sq_error(&ws.activations[depth], target);
        for k in 0..self.layout.n {
            ws.deltas[depth][k] = ws.activations[depth][k] - self.normalized_target(target, k);
        }
        let mut offsets = Vec::with_capacity(depth);
        let mut at = 0;
        for l in &self.layers {
            offsets.push(at);
            at += l.weights.len() + l.biases.len();
        }
        for k in (0..depth).rev() {
            let layer = &self.layers[k];
            let fan_in = self.sizes[k];
            let (dw, db) = grad[offsets[k]..offsets[k] + layer.weights.len() + layer.biases.len()]
                .split_at_mut(layer.weights.len());
            let (lower, upper) = ws.deltas.split_at_mut(k + 1);
            let delta = &upper[0];
            let x = &ws.activations[k];
            for (r, &d) in delta.iter().enumerate() {
                db[r] += d;
                if d != 0.0 {
                    for (g, xi) in dw[r * fan_in..(r + 1) * fan_in].iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            if k > 0 {
                let below = &mut lower[k];
                below.iter_mut().for_each(|v| *v = 0.0);
                for (r, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        let row = &layer.weights[r * fan_in..(r + 1) * fan_in];
                        for (b, w) in below.iter_mut().zip(row) {
                            *b += d * w;
                        }
                    }
                }
                for (b, a) in below.iter_mut().zip(&ws.activations[k]) {
                    *b *= 1.0 - a * a;
                }
            }
        }
        loss
    }

    /// Gradient of [`NeuralPolicy::loss`] for a single sample.
    pub fn gradient(&self, input: &[f64], target: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_sample(input, target)?;
        let mut ws = self.workspace();
        let mut grad = vec![0.0; self.num_params()];
        self.accumulate_gradient(input, target, &mut ws, &mut grad);
        Ok(grad)
    }

    /// Mean squared error in raw output units, averaged over samples and
    /// output components.
    pub fn mse(&self, samples: &[Sample]) -> f64 {
        mse_of(self, samples.iter())
    }
}

fn mse_of<'a>(p: &NeuralPolicy, samples: impl Iterator<Item = &'a Sample>) -> f64 {
    let samples: Vec<&Sample> = samples.collect();
    let inputs: Vec<Vec<f64>> = samples.iter().map(|s| p.normalized(&s.input)).collect();
    let rows: Vec<usize> = (0..samples.len()).collect();
    mse_rows(p, &rows, &inputs, |i| &samples[i].target)
}

/// Raw-unit MSE over `rows`, given pre-normalised inputs.
fn mse_rows<'t>(p: &NeuralPolicy, rows: &[usize], inputs: &[Vec<f64>], target: impl Fn(usize) -> &'t [f64]) -> f64 {
    let mut ws = BatchWorkspace::default();
    let n = p.layout.n;
    let mut total = 0.0;
    for chunk in rows.chunks(EVAL_CHUNK) {
        p.forward_batch(chunk, inputs, &mut ws);
        let out = ws.acts.last().unwrap();
        for (r, &i) in chunk.iter().enumerate() {
            let u = p.denormalize(&out[r * n..(r + 1) * n]);
            total += u.iter().zip(target(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
    }
    if rows.is_empty() {
        0.0
    } else {
        total / (rows.len() * n) as f64
    }
}

const EVAL_CHUNK: usize = 256;

/// Row-major activations and deltas of a mini-batch (`rows x width`).
#[derive(Default)]
struct BatchWorkspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

/// `c = a * b` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    let last = |r: usize, c: usize, rs: usize, cs: usize| (r - 1) * rs + (c - 1) * cs;
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    assert!(a.len() > last(m, k, rsa, csa));
    assert!(b.len() > last(k, n, rsb, csb));
    assert!(c.len() > last(m, n, rsc, csc));
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

impl NeuralPolicy {
    fn normalized(&self, input: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; input.len()];
        self.normalize_into(input, &mut v);
        v
    }

    /// Forward pass over `inputs[rows]` (already normalised).
    fn forward_batch(&self, rows: &[usize], inputs: &[Vec<f64>], ws: &mut BatchWorkspace) {
        let b = rows.len();
        ws.acts.resize_with(self.sizes.len(), Vec::new);
        ws.deltas.resize_with(self.sizes.len(), Vec::new);
        for (k, &s) in self.sizes.iter().enumerate() {
            ws.acts[k].resize(b * s, 0.0);
            ws.deltas[k].resize(b * s, 0.0);
        }
        let width = self.sizes[0];
        for (r, &i) in rows.iter().enumerate() {
            ws.acts[0][r * width..(r + 1) * width].copy_from_slice(&inputs[i]);
        }
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = (self.sizes[k], self.sizes[k + 1]);
            let (prev, next) = ws.acts.split_at_mut(k + 1);
            let z = &mut next[0];
            // Z = A W^T
            gemm(
                (b, fan_in, fan_out),
                &prev[k],
                (fan_in, 1),
                &layer.weights,
                (1, fan_in),
                z,
                (fan_out, 1),
            );
            for row in z.chunks_exact_mut(fan_out) {
                for (v, bias) in row.iter_mut().zip(&layer.biases) {
                    *v += bias;
                    if k != last {
                        *v = v.tanh();
                    }
                }
            }
        }
    }

    /// Sum over the batch of per-sample gradients, written into `grad`.
    fn batch_gradient(
        &self,
        rows: &[usize],
        inputs: &[Vec<f64>],
        targets: &[Vec<f64>],
        ws: &mut BatchWorkspace,
        grad: &mut [f64],
    ) {
        self.forward_batch(rows, inputs, ws);
        let b = rows.len();
        let depth = self.layers.len();
        let n = self.layout.n;
        for (r, &i) in rows.iter().enumerate() {
            for k in 0..n {
                ws.deltas[depth][r * n + k] = ws.acts[depth][r * n + k] - targets[i][k];
            }
        }
        let mut at = grad.len();
        for k in (0..depth).rev() {
            let layer = &self.layers[k];
            let (fan_in, fan_out) = (self.sizes[k], self.sizes[k + 1]);
            at -= layer.weights.len() + layer.biases.len();
            let (dw, db) = grad[at..at + layer.weights.len() + layer.biases.len()]
                .split_at_mut(layer.weights.len());
            let (lower, upper) = ws.deltas.split_at_mut(k + 1);
            let dz = &upper[0];
            // dW = dZ^T A
            gemm(
                (fan_out, b, fan_in),
                dz,
                (1, fan_out),
                &ws.acts[k],
                (fan_in, 1),
                dw,
                (fan_in, 1),
            );
            db.iter_mut().for_each(|v| *v = 0.0);
            for row in dz.chunks_exact(fan_out) {
                for (g, d) in db.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if k > 0 {
                let below = &mut lower[k];
                // dA = dZ W, then through tanh'
                gemm(
                    (b, fan_out, fan_in),
                    dz,
                    (fan_out, 1),
                    &layer.weights,
                    (fan_in, 1),
                    below,
                    (fan_in, 1),
                );
                for (d, a) in below.iter_mut().zip(&ws.acts[k]) {
                    *d *= 1.0 - a * a;
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut acc = [0.0; 4];
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
    let sd = var.sqrt();
    Some((m, if sd > 1e-8 { sd } else { 1.0 }))
}

fn target_variance<'a>(samples: impl Iterator<Item = &'a Sample> + Clone, n: usize) -> f64 {
    let count = samples.clone().count() as f64;
    (0..n)
        .map(|k| {
            let m = samples.clone().map(|s| s.target[k]).sum::<f64>() / count;
            samples.clone().map(|s| (s.target[k] - m).powi(2)).sum::<f64>() / count
        })
        .sum::<f64>()
        / n as f64
}

/// Mini-batch gradient descent with momentum on the squared-error imitation
/// loss. Keeps the weights of the epoch with the lowest training MSE.
pub fn train(
    policy: &NeuralPolicy,
    samples: &[Sample],
    hyper: &TrainHyper,
) -> Result<(NeuralPolicy, TrainingReport), NnError> {
    if samples.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    for s in samples {
        policy.check_sample(&s.input, &s.target)?;
    }
    if hyper.batch_size == 0 || !(hyper.learning_rate > 0.0) {
        return Err(NnError::InvalidArchitecture(
            "batch_size and learning_rate must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let frac = hyper.validation_fraction.clamp(0.0, 0.9);
    let num_val = ((samples.len() as f64) * frac).floor() as usize;
    let num_val = num_val.min(samples.len() - 1);
    let (val_idx, train_idx) = order.split_at(num_val);
    let mut train_idx = train_idx.to_vec();

    let mut p = policy.clone();
    let inputs: Vec<Vec<f64>> = samples.iter().map(|s| p.normalized(&s.input)).collect();
    let targets: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| (0..p.layout.n).map(|k| p.normalized_target(&s.target, k)).collect())
        .collect();
    let mut eval_idx = train_idx.clone();
    eval_idx.sort_unstable();
    let train_mse = |p: &NeuralPolicy| mse_rows(p, &eval_idx, &inputs, |i| &samples[i].target);
    let initial = train_mse(&p);
    if !initial.is_finite() {
        return Err(NnError::DivergedLoss(0));
    }
    let mut losses = vec![initial];
    let mut best = (initial, 0usize, p.params());

    let num_params = p.num_params();
    let mut velocity = vec![0.0; num_params];
    let mut grad = vec![0.0; num_params];
    let mut params = p.params();
    let mut ws = BatchWorkspace::default();
    for epoch in 1..=hyper.epochs {
        train_idx.shuffle(&mut rng);
        for batch in train_idx.chunks(hyper.batch_size) {
            p.batch_gradient(batch, &inputs, &targets, &mut ws, &mut grad);
            let scale = 1.0 / batch.len() as f64;
            for ((w, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = hyper.momentum * *v - hyper.learning_rate * g * scale;
                *w += *v;
            }
            p.set_params(&params)?;
        }
        let loss = train_mse(&p);
        if !loss.is_finite() {
            return Err(NnError::DivergedLoss(epoch));
        }
        losses.push(loss);
        if loss < best.0 {
            best = (loss, epoch, params.clone());
        }
    }
    p.set_params(&best.2)?;
    let val: Vec<&Sample> = val_idx.iter().map(|&i| &samples[i]).collect();
    let (validation_loss, validation_target_variance) = if val.is_empty() {
        (None, None)
    } else {
        (
            Some(mse_rows(&p, val_idx, &inputs, |i| &samples[i].target)),
            Some(target_variance(val.iter().copied(), p.layout.n)),
        )
    };
    let report = TrainingReport {
        epoch_losses: losses,
        validation_loss,
        validation_target_variance,
        epochs_run: hyper.epochs,
        kept_epoch: best.1,
        hyper: *hyper,
    };
    Ok((p, report))
}

const FD_STEP: f64 = 1e-5;
// Relative errors are measured against max(|analytic|, |numeric|, floor).
const RELATIVE_FLOOR: f64 = 1e-6;

/// Largest relative disagreement between backprop and central differences
/// over every parameter.
pub fn gradient_check(policy: &NeuralPolicy, sample: &Sample) -> Result<f64, NnError> {
    let analytic = policy.gradient(&sample.input, &sample.target)?;
    gradient_check_against(policy, sample, &analytic)
}

/// Same as [`gradient_check`] but against a caller-supplied gradient.
pub fn gradient_check_against(
    policy: &NeuralPolicy,
    sample: &Sample,
    analytic: &[f64],
) -> Result<f64, NnError> {
    policy.check_sample(&sample.input, &sample.target)?;
    let base = policy.params();
    if analytic.len() != base.len() {
        return Err(NnError::DimensionMismatch {
            got: analytic.len(),
            expected: base.len(),
        });
    }
    let mut probe = policy.clone();
    let mut params = base.clone();
    let mut worst: f64 = 0.0;
    for k in 0..base.len() {
        params[k] = base[k] + FD_STEP;
        probe.set_params(&params)?;
        let plus = probe.loss(&sample.input, &sample.target)?;
        params[k] = base[k] - FD_STEP;
        probe.set_params(&params)?;
        let minus = probe.loss(&sample.input, &sample.target)?;
        params[k] = base[k];
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let denom = analytic[k].abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        worst = worst.max((analytic[k] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    format: String,
    activation: String,
    policy: NeuralPolicy,
}

#[derive(Deserialize)]
struct FormatProbe {
    format: Option<String>,
}

pub fn save_policy(policy: &NeuralPolicy, path: &Path) -> Result<(), NnError> {
    let file = PolicyFile {
        format: POLICY_FORMAT.into(),
        activation: "tanh-hidden/linear-output".into(),
        policy: policy.clone(),
    };
    let text = serde_json::to_string(&file).map_err(|e| NnError::Corrupt(e.to_string()))?;
    fs::write(path, text).map_err(|source| NnError::IoFailure {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_policy(path: &Path) -> Result<NeuralPolicy, NnError> {
    let text = fs::read_to_string(path).map_err(|source| NnError::IoFailure {
        path: path.display().to_string(),
        source,
    })?;
    let probe: FormatProbe =
        serde_json::from_str(&text).map_err(|e| NnError::Corrupt(e.to_string()))?;
    match probe.format.as_deref() {
        Some(POLICY_FORMAT) => {}
        other => {
            return Err(NnError::FormatVersionMismatch {
                found: other.unwrap_or("<none>").into(),
                expected: POLICY_FORMAT.into(),
            })
        }
    }
    let file: PolicyFile =
        serde_json::from_str(&text).map_err(|e| NnError::Corrupt(e.to_string()))?;
    let p = file.policy;
    let rebuilt = NeuralPolicy::from_layers(p.layout, p.layers.clone())
        .map_err(|e| NnError::Corrupt(e.to_string()))?;
    if rebuilt.sizes != p.sizes
        || p.norm.input_shift.len() != p.layout.width()
        || p.norm.input_scale.len() != p.layout.width()
        || p.norm.output_shift.len() != p.layout.n
        || p.norm.output_scale.len() != p.layout.n
    {
        return Err(NnError::Corrupt("inconsistent layer or normalisation sizes".into()));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> InputLayout {
        InputLayout::new(3, 5, 3).unwrap()
    }

    #[test]
    fn layout_width_and_slots() {
        let l = layout();
        assert_eq!(l.width(), 6 + 5 * 7);
        assert_eq!(l.slot_ids().collect::<Vec<_>>(), vec![0, 1, 2, 4, 5]);
        assert_eq!(l.slot_offset(0), Some(6));
        assert_eq!(l.slot_offset(4), Some(6 + 3 * 7));
        assert_eq!(l.slot_offset(3), None);
    }

    #[test]
    fn encode_with_no_neighbors() {
        let l = layout();
        let own = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let v = encode_input(&l, &own, &[], &[]).unwrap();
        assert_eq!(&v[..6], &own);
        assert!(v[6..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn encode_preset_agent_three() {
        let l = layout();
        let own = [0.0; 6];
        let states: Vec<(usize, Vec<f64>)> =
            [0usize, 1, 2, 4, 5].iter().map(|&j| (j, vec![j as f64 + 1.0; 6])).collect();
        let view: Vec<(usize, &[f64])> = states.iter().map(|(j, s)| (*j, s.as_slice())).collect();
        let v = encode_input(&l, &own, &view, &[2, 4, 0]).unwrap();
        for id in [0usize, 2, 4] {
            let off = l.slot_offset(id).unwrap();
            assert!(v[off..off + 6].iter().all(|&x| x == id as f64 + 1.0));
            assert_eq!(v[off + 6], 1.0);
        }
        for id in [1usize, 5] {
            let off = l.slot_offset(id).unwrap();
            assert!(v[off..off + 7].iter().all(|&x| x == 0.0));
        }
        let mut reversed = view.clone();
        reversed.reverse();
        assert_eq!(encode_input(&l, &own, &reversed, &[4, 0, 2]).unwrap(), v);
    }

    #[test]
    fn encode_errors() {
        let l = layout();
        let own = [0.0; 6];
        let s = [0.0; 6];
        assert!(matches!(
            encode_input(&l, &own, &[(3, &s)], &[3]),
            Err(NnError::UnknownNeighborId(3))
        ));
        assert!(matches!(
            encode_input(&l, &own, &[(9, &s)], &[]),
            Err(NnError::UnknownNeighborId(9))
        ));
        assert!(matches!(
            encode_input(&l, &own[..4], &[], &[]),
            Err(NnError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            encode_input(&l, &own, &[(2, &s[..3])], &[2]),
            Err(NnError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let l = layout();
        let mut p = NeuralPolicy::new(l, &[8, 8], 1).unwrap();
        p.set_params(&vec![0.0; p.num_params()]).unwrap();
        let input = vec![0.7; l.width()];
        assert_eq!(p.forward(&input).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn linear_layer_selects_coordinate() {
        let l = InputLayout::new(1, 1, 1).unwrap();
        // width = 2 + 3; pick the own position entry
        let mut weights = vec![0.0; l.width()];
        weights[0] = 1.0;
        let p = NeuralPolicy::from_layers(l, vec![Layer { weights, biases: vec![0.0] }]).unwrap();
        let out = p.forward(&[0.37, -2.0, 5.0, 6.0, 1.0]).unwrap();
        assert_eq!(out, vec![0.37]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = NeuralPolicy::new(layout(), &[4], 0).unwrap();
        assert!(matches!(p.forward(&[0.0; 3]), Err(NnError::DimensionMismatch { .. })));
    }

    #[test]
    fn fixed_point_data_stays_fixed() {
        let l = InputLayout::new(2, 2, 1).unwrap();
        let p = NeuralPolicy::new(l, &[6], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<Sample> = (0..200)
            .map(|_| {
                let input: Vec<f64> = (0..l.width()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let target = p.forward(&input).unwrap();
                Sample { input, target }
            })
            .collect();
        let hyper = TrainHyper { epochs: 5, ..TrainHyper::default() };
        let (trained, report) = train(&p, &samples, &hyper).unwrap();
        assert!(report.initial_loss() < 1e-28);
        assert!(report.final_loss() < 1e-20);
        assert!(trained.mse(&samples) < 1e-20);
    }

    #[test]
    fn empty_training_set() {
        let p = NeuralPolicy::new(layout(), &[4], 0).unwrap();
        assert!(matches!(train(&p, &[], &TrainHyper::default()), Err(NnError::EmptyDataset)));
    }

    #[test]
    fn divergence_is_reported() {
        let l = InputLayout::new(1, 1, 1).unwrap();
        let p = NeuralPolicy::new(l, &[], 0).unwrap();
        let samples: Vec<Sample> = (0..64)
            .map(|k| Sample {
                input: vec![k as f64 * 1e3, 0.0, 0.0, 0.0, 0.0],
                target: vec![1.0],
            })
            .collect();
        let hyper = TrainHyper { epochs: 50, learning_rate: 10.0, ..TrainHyper::default() };
        assert!(matches!(train(&p, &samples, &hyper), Err(NnError::DivergedLoss(_))));
    }

    #[test]
    fn zero_network_gradient_check_agrees() {
        let l = InputLayout::new(2, 2, 2).unwrap();
        let mut p = NeuralPolicy::new(l, &[5, 5], 0).unwrap();
        p.set_params(&vec![0.0; p.num_params()]).unwrap();
        let sample = Sample { input: vec![0.3; l.width()], target: vec![0.0; 2] };
        let g = p.gradient(&sample.input, &sample.target).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert_eq!(gradient_check(&p, &sample).unwrap(), 0.0);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let l = InputLayout::new(2, 2, 2).unwrap();
        let p = NeuralPolicy::new(l, &[5], 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sample = Sample {
            input: (0..l.width()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            target: vec![0.5, -0.5],
        };
        let mut g = p.gradient(&sample.input, &sample.target).unwrap();
        assert!(gradient_check_against(&p, &sample, &g).unwrap() <= 1e-4);
        let k = g.len() - 1;
        g[k] = g[k] * 1.5 + 0.1;
        assert!(gradient_check_against(&p, &sample, &g).unwrap() > 1e-2);
    }

    #[test]
    fn batched_gradient_sums_per_sample_gradients() {
        let l = InputLayout::new(2, 3, 2).unwrap();
        let mut p = NeuralPolicy::new(l, &[7, 5], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<Sample> = (0..11)
            .map(|_| {
                let mut input: Vec<f64> = (0..l.width()).map(|_| rng.gen_range(-2.0..2.0)).collect();
                for (r, m) in l.mask_positions().enumerate() {
                    input[m] = if r % 2 == 0 { 1.0 } else { 0.0 };
                }
                Sample {
                    input,
                    target: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                }
            })
            .collect();
        p.fit_normalization(&samples).unwrap();
        let inputs: Vec<Vec<f64>> = samples.iter().map(|s| p.normalized(&s.input)).collect();
        let targets: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| (0..2).map(|k| p.normalized_target(&s.target, k)).collect())
            .collect();
        let rows = [3usize, 0, 7, 10, 5];
        let mut ws = BatchWorkspace::default();
        let mut grad = vec![f64::NAN; p.num_params()];
        p.batch_gradient(&rows, &inputs, &targets, &mut ws, &mut grad);
        let mut expected = vec![0.0; p.num_params()];
        for &i in &rows {
            let g = p.gradient(&samples[i].input, &samples[i].target).unwrap();
            expected.iter_mut().zip(g).for_each(|(e, g)| *e += g);
        }
        for (a, b) in grad.iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}
