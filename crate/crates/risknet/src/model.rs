//! Message-passing network over the provisioning metagraph.
//!
//! The model carries a hidden state per metagraph node (one per SLA, one per
//! component). States start as zero-padded raw features. Each iteration, every
//! edge produces a message in both directions through one of four affine maps
//! (working/backup × direction) applied to the concatenation of sender and
//! receiver states; each node sums its incoming messages over both edge types
//! and feeds the sum to a GRU cell (one cell per node side) to update its
//! state. After a fixed number of iterations a SELU multi-layer readout maps
//! each SLA state to the location and scale of a Student-t penalty
//! distribution.
//!
//! Everything is hand-rolled: forward, reverse-mode gradients, and the
//! optimizer hooks work on plain `f64` tensors, keeping results exactly
//! reproducible across machines and thread counts.
//!
//! ## Factorized aggregation
//!
//! A message map with weight `W` on `concat(h_sender, h_receiver)` splits into
//! `W = [W_send | W_recv]`, so the summed message over a node's incoming edges
//! of one type is
//!
//! ```text
//! Σ_u (W_send·h_u + W_recv·h_v + b) = W_send·(Σ_u h_u) + deg·(W_recv·h_v + b)
//! ```
//!
//! One matrix-vector product per node instead of one per edge. This form *is*
//! the aggregation semantics of the model (neighbor states are summed in
//! ascending node order before the map is applied), and forward and backward
//! both use it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, axpy_scaled, Mat};
use crate::metagraph::{FeatureSet, MetaGraph, NormStats, N_COMPONENT_FEATURES, N_SLA_FEATURES};
use crate::rng::{stream_rng, StreamRng};
use crate::tdist;

/// SELU activation constants (the standard self-normalizing pair).
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// Additive floor keeping the scale head strictly positive.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Version tag written into every checkpoint.
pub const CHECKPOINT_VERSION: &str = "risknet-ckpt-1";

/// Architecture and loss hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    /// Width of every node state.
    pub hidden_dim: usize,
    /// Width of every message.
    pub msg_dim: usize,
    /// Number of message-passing iterations.
    pub t_steps: usize,
    /// Dropout probabilities after readout hidden layers 1 and 2.
    pub dropout_rates: (f64, f64),
    /// Coefficient of the squared-entry penalty on the four message weights.
    pub l2_coeff: f64,
    /// Degrees of freedom of the Student-t output distribution.
    pub nu: f64,
    /// Widths of the three readout hidden layers.
    pub readout_sizes: (usize, usize, usize),
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            hidden_dim: 32,
            msg_dim: 64,
            t_steps: 6,
            dropout_rates: (0.2, 0.1),
            l2_coeff: 0.01,
            nu: 5.0,
            readout_sizes: (64, 64, 32),
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim < N_COMPONENT_FEATURES || self.hidden_dim < N_SLA_FEATURES {
            return Err(Error::param(
                "hidden_dim must be at least the raw feature width",
            ));
        }
        if self.msg_dim == 0 {
            return Err(Error::param("msg_dim must be positive"));
        }
        if self.t_steps == 0 {
            return Err(Error::param("t_steps must be at least 1"));
        }
        let (p1, p2) = self.dropout_rates;
        if !(0.0..1.0).contains(&p1) || !(0.0..1.0).contains(&p2) {
            return Err(Error::param("dropout rates must lie in [0, 1)"));
        }
        if !(self.l2_coeff >= 0.0) {
            return Err(Error::param("l2_coeff must be non-negative"));
        }
        if !(self.nu > 0.0) {
            return Err(Error::param("nu must be positive"));
        }
        let (r1, r2, r3) = self.readout_sizes;
        if r1 == 0 || r2 == 0 || r3 == 0 {
            return Err(Error::param("readout layer sizes must be positive"));
        }
        Ok(())
    }
}

/// One of the four per-edge-type, per-direction message maps, stored in the
/// factorized form `W = [w_sender | w_receiver]` plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageMap {
    pub w_sender: Mat,
    pub w_receiver: Mat,
    pub bias: Vec<f64>,
}

impl MessageMap {
    fn zeros(hidden: usize, msg: usize) -> Self {
        MessageMap {
            w_sender: Mat::zeros(msg, hidden),
            w_receiver: Mat::zeros(msg, hidden),
            bias: vec![0.0; msg],
        }
    }
}

/// Gated recurrent unit: reset gate `r`, update gate `z`, candidate `n`.
///
/// ```text
/// r  = sigmoid(w_reset·x     + u_reset·h     + b_reset)
/// z  = sigmoid(w_update·x    + u_update·h    + b_update)
/// n  = tanh   (w_candidate·x + u_candidate·(r∘h) + b_candidate)
/// h' = (1−z)∘h + z∘n
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub w_reset: Mat,
    pub w_update: Mat,
    pub w_candidate: Mat,
    pub u_reset: Mat,
    pub u_update: Mat,
    pub u_candidate: Mat,
    pub b_reset: Vec<f64>,
    pub b_update: Vec<f64>,
    pub b_candidate: Vec<f64>,
}

impl GruCell {
    fn zeros(hidden: usize, input: usize) -> Self {
        GruCell {
            w_reset: Mat::zeros(hidden, input),
            w_update: Mat::zeros(hidden, input),
            w_candidate: Mat::zeros(hidden, input),
            u_reset: Mat::zeros(hidden, hidden),
            u_update: Mat::zeros(hidden, hidden),
            u_candidate: Mat::zeros(hidden, hidden),
            b_reset: vec![0.0; hidden],
            b_update: vec![0.0; hidden],
            b_candidate: vec![0.0; hidden],
        }
    }
}

/// A dense layer of the readout.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Affine {
    fn zeros(out: usize, input: usize) -> Self {
        Affine { weight: Mat::zeros(out, input), bias: vec![0.0; out] }
    }
}

/// All trainable tensors. The same struct doubles as a gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub msg_working_sla_to_comp: MessageMap,
    pub msg_backup_sla_to_comp: MessageMap,
    pub msg_working_comp_to_sla: MessageMap,
    pub msg_backup_comp_to_sla: MessageMap,
    pub gru_comp: GruCell,
    pub gru_sla: GruCell,
    /// Four layers: hidden → r1 → r2 → r3 → 2.
    pub readout: Vec<Affine>,
}

impl ModelParams {
    /// All-zero tensors shaped for `hyper`.
    pub fn zeros(hyper: &Hyper) -> ModelParams {
        let h = hyper.hidden_dim;
        let m = hyper.msg_dim;
        let (r1, r2, r3) = hyper.readout_sizes;
        ModelParams {
            msg_working_sla_to_comp: MessageMap::zeros(h, m),
            msg_backup_sla_to_comp: MessageMap::zeros(h, m),
            msg_working_comp_to_sla: MessageMap::zeros(h, m),
            msg_backup_comp_to_sla: MessageMap::zeros(h, m),
            gru_comp: GruCell::zeros(h, m),
            gru_sla: GruCell::zeros(h, m),
            readout: vec![
                Affine::zeros(r1, h),
                Affine::zeros(r2, r1),
                Affine::zeros(r3, r2),
                Affine::zeros(2, r3),
            ],
        }
    }

    /// Glorot-uniform initialization: every weight entry is drawn uniformly
    /// from ±√(6/(fan_in+fan_out)), biases stay zero. Weights are filled in
    /// the fixed [`tensors`](Self::tensors) order from the ChaCha stream
    /// `(seed, 0)`, so the result is fully determined by `(hyper, seed)`.
    ///
    /// The two halves of a factorized message map share the limit of the
    /// unsplit weight, whose fan-in is `2·hidden_dim`.
    pub fn init(hyper: &Hyper, seed: u64) -> Result<ModelParams> {
        hyper.validate()?;
        let mut params = ModelParams::zeros(hyper);
        let mut rng = stream_rng(seed, 0);
        let h = hyper.hidden_dim as f64;
        let m = hyper.msg_dim as f64;
        let msg_limit = (6.0 / (2.0 * h + m)).sqrt();
        for map in [
            &mut params.msg_working_sla_to_comp,
            &mut params.msg_backup_sla_to_comp,
            &mut params.msg_working_comp_to_sla,
            &mut params.msg_backup_comp_to_sla,
        ] {
            fill_uniform(&mut map.w_sender.data, msg_limit, &mut rng);
            fill_uniform(&mut map.w_receiver.data, msg_limit, &mut rng);
        }
        let w_limit = (6.0 / (m + h)).sqrt();
        let u_limit = (6.0 / (h + h)).sqrt();
        for gru in [&mut params.gru_comp, &mut params.gru_sla] {
            fill_uniform(&mut gru.w_reset.data, w_limit, &mut rng);
            fill_uniform(&mut gru.w_update.data, w_limit, &mut rng);
            fill_uniform(&mut gru.w_candidate.data, w_limit, &mut rng);
            fill_uniform(&mut gru.u_reset.data, u_limit, &mut rng);
            fill_uniform(&mut gru.u_update.data, u_limit, &mut rng);
            fill_uniform(&mut gru.u_candidate.data, u_limit, &mut rng);
        }
        for layer in &mut params.readout {
            let limit = (6.0 / (layer.weight.rows + layer.weight.cols) as f64).sqrt();
            fill_uniform(&mut layer.weight.data, limit, &mut rng);
        }
        Ok(params)
    }

    /// Immutable views of every tensor as `(name, values, shape)`, in the
    /// fixed canonical order used for initialization and checkpoints.
    pub fn tensors(&self) -> Vec<(String, &[f64], Vec<usize>)> {
        let mut out: Vec<(String, &[f64], Vec<usize>)> = Vec::new();
        let maps = [
            ("msg_working_sla_to_comp", &self.msg_working_sla_to_comp),
            ("msg_backup_sla_to_comp", &self.msg_backup_sla_to_comp),
            ("msg_working_comp_to_sla", &self.msg_working_comp_to_sla),
            ("msg_backup_comp_to_sla", &self.msg_backup_comp_to_sla),
        ];
        for (name, map) in maps {
            out.push((format!("{name}.w_sender"), &map.w_sender.data, vec![
                map.w_sender.rows,
                map.w_sender.cols,
            ]));
            out.push((format!("{name}.w_receiver"), &map.w_receiver.data, vec![
                map.w_receiver.rows,
                map.w_receiver.cols,
            ]));
            out.push((format!("{name}.bias"), &map.bias, vec![map.bias.len()]));
        }
        for (name, gru) in [("gru_comp", &self.gru_comp), ("gru_sla", &self.gru_sla)] {
            for (gate, w, u, b) in [
                ("reset", &gru.w_reset, &gru.u_reset, &gru.b_reset),
                ("update", &gru.w_update, &gru.u_update, &gru.b_update),
                ("candidate", &gru.w_candidate, &gru.u_candidate, &gru.b_candidate),
            ] {
                out.push((format!("{name}.w_{gate}"), &w.data, vec![w.rows, w.cols]));
                out.push((format!("{name}.u_{gate}"), &u.data, vec![u.rows, u.cols]));
                out.push((format!("{name}.b_{gate}"), b, vec![b.len()]));
            }
        }
        for (i, layer) in self.readout.iter().enumerate() {
            out.push((format!("readout.{i}.weight"), &layer.weight.data, vec![
                layer.weight.rows,
                layer.weight.cols,
            ]));
            out.push((format!("readout.{i}.bias"), &layer.bias, vec![layer.bias.len()]));
        }
        out
    }

    /// Mutable twin of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>, Vec<usize>)> {
        let mut out: Vec<(String, &mut Vec<f64>, Vec<usize>)> = Vec::new();
        let maps = [
            ("msg_working_sla_to_comp", &mut self.msg_working_sla_to_comp),
            ("msg_backup_sla_to_comp", &mut self.msg_backup_sla_to_comp),
            ("msg_working_comp_to_sla", &mut self.msg_working_comp_to_sla),
            ("msg_backup_comp_to_sla", &mut self.msg_backup_comp_to_sla),
        ];
        for (name, map) in maps {
            let ws_shape = vec![map.w_sender.rows, map.w_sender.cols];
            let wr_shape = vec![map.w_receiver.rows, map.w_receiver.cols];
            let b_shape = vec![map.bias.len()];
            out.push((format!("{name}.w_sender"), &mut map.w_sender.data, ws_shape));
            out.push((format!("{name}.w_receiver"), &mut map.w_receiver.data, wr_shape));
            out.push((format!("{name}.bias"), &mut map.bias, b_shape));
        }
        for (name, gru) in [("gru_comp", &mut self.gru_comp), ("gru_sla", &mut self.gru_sla)] {
            for (gate, w, u, b) in [
                ("reset", &mut gru.w_reset, &mut gru.u_reset, &mut gru.b_reset),
                ("update", &mut gru.w_update, &mut gru.u_update, &mut gru.b_update),
                (
                    "candidate",
                    &mut gru.w_candidate,
                    &mut gru.u_candidate,
                    &mut gru.b_candidate,
                ),
            ] {
                let w_shape = vec![w.rows, w.cols];
                let u_shape = vec![u.rows, u.cols];
                let b_shape = vec![b.len()];
                out.push((format!("{name}.w_{gate}"), &mut w.data, w_shape));
                out.push((format!("{name}.u_{gate}"), &mut u.data, u_shape));
                out.push((format!("{name}.b_{gate}"), b, b_shape));
            }
        }
        for (i, layer) in self.readout.iter_mut().enumerate() {
            let w_shape = vec![layer.weight.rows, layer.weight.cols];
            let b_shape = vec![layer.bias.len()];
            out.push((format!("readout.{i}.weight"), &mut layer.weight.data, w_shape));
            out.push((format!("readout.{i}.bias"), &mut layer.bias, b_shape));
        }
        out
    }

    /// Total number of scalar parameters.
    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, v, _)| v.len()).sum()
    }

    /// Concatenates all tensors into one flat vector (canonical order).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (_, values, _) in self.tensors() {
            out.extend_from_slice(values);
        }
        out
    }

    /// Overwrites all tensors from a flat vector produced by [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::param("flat parameter vector has the wrong length"));
        }
        let mut offset = 0;
        for (_, values, _) in self.tensors_mut() {
            let len = values.len();
            values.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// Squared-entry sum of the four message weight matrices (both halves,
    /// biases excluded) — the quantity the training loss penalizes.
    pub fn message_weight_sq_sum(&self) -> f64 {
        [
            &self.msg_working_sla_to_comp,
            &self.msg_backup_sla_to_comp,
            &self.msg_working_comp_to_sla,
            &self.msg_backup_comp_to_sla,
        ]
        .iter()
        .map(|m| m.w_sender.sq_sum() + m.w_receiver.sq_sum())
        .sum()
    }
}

fn fill_uniform(values: &mut [f64], limit: f64, rng: &mut StreamRng) {
    for v in values.iter_mut() {
        *v = crate::rng::uniform_in(rng, -limit, limit);
    }
}

/// Whether a forward pass applies dropout. `Train` draws inverted-dropout
/// masks from the supplied stream; `Eval` is deterministic.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut StreamRng),
}

/// Per-SLA Student-t parameters in normalized label units.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// One training/evaluation sample: a metagraph, its normalized features and
/// one normalized penalty label per SLA.
#[derive(Clone, Debug)]
pub struct Example {
    pub metagraph: MetaGraph,
    pub features: FeatureSet,
    pub labels: Vec<f64>,
}

impl Example {
    pub fn new(metagraph: MetaGraph, features: FeatureSet, labels: Vec<f64>) -> Result<Example> {
        if metagraph.n_slas == 0 {
            return Err(Error::param("an example must contain at least one SLA"));
        }
        if labels.len() != metagraph.n_slas {
            return Err(Error::param("label count must match the SLA count"));
        }
        if labels.iter().any(|y| !y.is_finite()) {
            return Err(Error::param("labels must be finite"));
        }
        check_dims(&metagraph, &features)?;
        Ok(Example { metagraph, features, labels })
    }
}

fn check_dims(mg: &MetaGraph, features: &FeatureSet) -> Result<()> {
    if features.component_features.rows != mg.n_components
        || features.component_features.cols != N_COMPONENT_FEATURES
        || features.sla_features.rows != mg.n_slas
        || features.sla_features.cols != N_SLA_FEATURES
    {
        return Err(Error::param("feature matrix shape does not match the metagraph"));
    }
    Ok(())
}

/// Incoming-neighbor lists per node and edge type, in ascending sender order
/// (the canonical summation order of the aggregation).
struct Incidence {
    comp_working: Vec<Vec<usize>>,
    comp_backup: Vec<Vec<usize>>,
    sla_working: Vec<Vec<usize>>,
    sla_backup: Vec<Vec<usize>>,
}

impl Incidence {
    fn build(mg: &MetaGraph) -> Incidence {
        let mut inc = Incidence {
            comp_working: vec![Vec::new(); mg.n_components],
            comp_backup: vec![Vec::new(); mg.n_components],
            sla_working: vec![Vec::new(); mg.n_slas],
            sla_backup: vec![Vec::new(); mg.n_slas],
        };
        // Edges are sorted (sla, component) lexicographically, so pushing in
        // iteration order leaves every list ascending.
        for &(s, c) in &mg.edges_working {
            inc.comp_working[c].push(s);
            inc.sla_working[s].push(c);
        }
        for &(s, c) in &mg.edges_backup {
            inc.comp_backup[c].push(s);
            inc.sla_backup[s].push(c);
        }
        inc
    }
}

fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

fn selu_deriv(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

/// Numerically stable `ln(1 + eˣ)`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Writes the initial state matrix: raw features zero-padded to `hidden`.
fn padded_states(features: &Mat, hidden: usize) -> Mat {
    let mut h = Mat::zeros(features.rows, hidden);
    for r in 0..features.rows {
        h.row_mut(r)[..features.cols].copy_from_slice(features.row(r));
    }
    h
}

/// Adds the summed messages of one edge type to `out` using the factorized
/// form. `ns` is the sum of sender states, `deg` the number of incoming
/// edges; a node with no edges of this type contributes exactly zero, so the
/// caller skips the call entirely.
fn message_into(map: &MessageMap, ns: &[f64], deg: f64, h_recv: &[f64], tmp: &mut [f64], out: &mut [f64]) {
    map.w_sender.matvec_add(ns, out);
    tmp.copy_from_slice(&map.bias);
    map.w_receiver.matvec_add(h_recv, tmp);
    axpy_scaled(out, tmp, deg);
}

/// One GRU application. `r`, `z`, `n` receive the gate activations (the
/// backward pass needs them); `rh` is scratch for `r∘h`.
#[allow(clippy::too_many_arguments)]
fn gru_step(
    cell: &GruCell,
    x: &[f64],
    h: &[f64],
    r: &mut [f64],
    z: &mut [f64],
    n: &mut [f64],
    rh: &mut [f64],
    h_new: &mut [f64],
) {
    r.copy_from_slice(&cell.b_reset);
    cell.w_reset.matvec_add(x, r);
    cell.u_reset.matvec_add(h, r);
    for v in r.iter_mut() {
        *v = sigmoid(*v);
    }
    z.copy_from_slice(&cell.b_update);
    cell.w_update.matvec_add(x, z);
    cell.u_update.matvec_add(h, z);
    for v in z.iter_mut() {
        *v = sigmoid(*v);
    }
    for i in 0..h.len() {
        rh[i] = r[i] * h[i];
    }
    n.copy_from_slice(&cell.b_candidate);
    cell.w_candidate.matvec_add(x, n);
    cell.u_candidate.matvec_add(rh, n);
    for v in n.iter_mut() {
        *v = v.tanh();
    }
    for i in 0..h.len() {
        h_new[i] = (1.0 - z[i]) * h[i] + z[i] * n[i];
    }
}

/// Reverse of [`gru_step`]. Consumes `g_out = ∂L/∂h'` and accumulates
/// parameter gradients into `grad` plus `∂L/∂x` and `∂L/∂h` into the
/// caller's buffers.
#[allow(clippy::too_many_arguments)]
fn gru_backward(
    cell: &GruCell,
    grad: &mut GruCell,
    x: &[f64],
    h: &[f64],
    r: &[f64],
    z: &[f64],
    n: &[f64],
    g_out: &[f64],
    d_x: &mut [f64],
    d_h: &mut [f64],
    scratch: &mut GruBackScratch,
) {
    let dim = h.len();
    let GruBackScratch { da_r, da_z, da_n, g_rh, rh } = scratch;
    for i in 0..dim {
        // h' = (1−z)∘h + z∘n
        let g = g_out[i];
        da_z[i] = g * (n[i] - h[i]) * z[i] * (1.0 - z[i]);
        da_n[i] = g * z[i] * (1.0 - n[i] * n[i]);
        d_h[i] += g * (1.0 - z[i]);
        rh[i] = r[i] * h[i];
    }
    grad.w_candidate.add_outer(da_n, x, 1.0);
    grad.u_candidate.add_outer(da_n, rh, 1.0);
    axpy(&mut grad.b_candidate, da_n);
    g_rh.fill(0.0);
    cell.u_candidate.matvec_t_add(da_n, g_rh);
    for i in 0..dim {
        d_h[i] += g_rh[i] * r[i];
        da_r[i] = g_rh[i] * h[i] * r[i] * (1.0 - r[i]);
    }
    grad.w_update.add_outer(da_z, x, 1.0);
    grad.u_update.add_outer(da_z, h, 1.0);
    axpy(&mut grad.b_update, da_z);
    cell.u_update.matvec_t_add(da_z, d_h);
    grad.w_reset.add_outer(da_r, x, 1.0);
    grad.u_reset.add_outer(da_r, h, 1.0);
    axpy(&mut grad.b_reset, da_r);
    cell.u_reset.matvec_t_add(da_r, d_h);
    cell.w_reset.matvec_t_add(da_r, d_x);
    cell.w_update.matvec_t_add(da_z, d_x);
    cell.w_candidate.matvec_t_add(da_n, d_x);
}

struct GruBackScratch {
    da_r: Vec<f64>,
    da_z: Vec<f64>,
    da_n: Vec<f64>,
    g_rh: Vec<f64>,
    rh: Vec<f64>,
}

impl GruBackScratch {
    fn new(hidden: usize) -> Self {
        GruBackScratch {
            da_r: vec![0.0; hidden],
            da_z: vec![0.0; hidden],
            da_n: vec![0.0; hidden],
            g_rh: vec![0.0; hidden],
            rh: vec![0.0; hidden],
        }
    }
}

/// Draws one inverted-dropout mask row: entries are `1/(1−p)` with
/// probability `1−p` and `0` otherwise.
fn draw_mask(rng: &mut StreamRng, p: f64, out: &mut [f64]) {
    let keep = 1.0 / (1.0 - p);
    for v in out.iter_mut() {
        *v = if rng.random::<f64>() < p { 0.0 } else { keep };
    }
}

/// Runs the readout on one SLA state. `mask1`/`mask2` multiply the first and
/// second hidden activations (all-ones in Eval mode semantics = pass `None`).
/// Returns `(raw_mu, raw_scale)`; optional tape rows capture intermediates.
#[allow(clippy::too_many_arguments)]
fn readout_row(
    params: &ModelParams,
    x: &[f64],
    mask1: Option<&[f64]>,
    mask2: Option<&[f64]>,
    a1: &mut [f64],
    h1: &mut [f64],
    a2: &mut [f64],
    h2: &mut [f64],
    a3: &mut [f64],
    h3: &mut [f64],
) -> (f64, f64) {
    let lay = &params.readout;
    a1.copy_from_slice(&lay[0].bias);
    lay[0].weight.matvec_add(x, a1);
    for i in 0..a1.len() {
        h1[i] = selu(a1[i]);
        if let Some(m) = mask1 {
            h1[i] *= m[i];
        }
    }
    a2.copy_from_slice(&lay[1].bias);
    lay[1].weight.matvec_add(h1, a2);
    for i in 0..a2.len() {
        h2[i] = selu(a2[i]);
        if let Some(m) = mask2 {
            h2[i] *= m[i];
        }
    }
    a3.copy_from_slice(&lay[2].bias);
    lay[2].weight.matvec_add(h2, a3);
    for i in 0..a3.len() {
        h3[i] = selu(a3[i]);
    }
    let mut raw = [0.0; 2];
    raw.copy_from_slice(&lay[3].bias);
    lay[3].weight.matvec_add(h3, &mut raw);
    (raw[0], raw[1])
}

/// Shared state-evolution loop. Calls `on_step` after computing each step's
/// intermediates (tape building hooks in here; the lean path passes a no-op).
struct StepBuffers {
    ns_w: Mat,
    ns_b: Mat,
    msum: Mat,
    r: Mat,
    z: Mat,
    n: Mat,
}

impl StepBuffers {
    fn new(nodes: usize, hidden: usize, msg: usize) -> Self {
        StepBuffers {
            ns_w: Mat::zeros(nodes, hidden),
            ns_b: Mat::zeros(nodes, hidden),
            msum: Mat::zeros(nodes, msg),
            r: Mat::zeros(nodes, hidden),
            z: Mat::zeros(nodes, hidden),
            n: Mat::zeros(nodes, hidden),
        }
    }
}

/// Computes one side's neighbor sums, message sums and GRU update.
/// Reads `h_self`/`h_other` (pre-update states), writes `h_next` and fills
/// `buf` with the intermediates.
#[allow(clippy::too_many_arguments)]
fn side_step(
    map_working: &MessageMap,
    map_backup: &MessageMap,
    gru: &GruCell,
    working: &[Vec<usize>],
    backup: &[Vec<usize>],
    h_self: &Mat,
    h_other: &Mat,
    h_next: &mut Mat,
    buf: &mut StepBuffers,
    tmp_msg: &mut [f64],
    rh: &mut [f64],
) {
    for i in 0..h_self.rows {
        let msum = buf.msum.row_mut(i);
        msum.fill(0.0);
        if !working[i].is_empty() {
            let ns = buf.ns_w.row_mut(i);
            ns.fill(0.0);
            for &u in &working[i] {
                axpy(ns, h_other.row(u));
            }
            message_into(map_working, ns, working[i].len() as f64, h_self.row(i), tmp_msg, msum);
        }
        if !backup[i].is_empty() {
            let ns = buf.ns_b.row_mut(i);
            ns.fill(0.0);
            for &u in &backup[i] {
                axpy(ns, h_other.row(u));
            }
            message_into(map_backup, ns, backup[i].len() as f64, h_self.row(i), tmp_msg, msum);
        }
    }
    for i in 0..h_self.rows {
        gru_step(
            gru,
            buf.msum.row(i),
            h_self.row(i),
            buf.r.row_mut(i),
            buf.z.row_mut(i),
            buf.n.row_mut(i),
            rh,
            h_next.row_mut(i),
        );
    }
}

/// Runs inference: message passing followed by the distribution heads.
///
/// Returns per-SLA `(μ, σ)` in normalized label units, with
/// `σ = softplus(raw) + SCALE_FLOOR` strictly positive. In `Train` mode the
/// readout applies fresh dropout masks drawn from the given stream (one mask
/// row per SLA, layer 1 then layer 2, in ascending SLA order).
pub fn forward(
    params: &ModelParams,
    hyper: &Hyper,
    mg: &MetaGraph,
    features: &FeatureSet,
    mode: Mode,
) -> Result<Prediction> {
    hyper.validate()?;
    check_dims(mg, features)?;
    let inc = Incidence::build(mg);
    let hidden = hyper.hidden_dim;
    let (r1, r2, r3) = hyper.readout_sizes;

    let mut h_comp = padded_states(&features.component_features, hidden);
    let mut h_sla = padded_states(&features.sla_features, hidden);
    let mut h_comp_next = Mat::zeros(mg.n_components, hidden);
    let mut h_sla_next = Mat::zeros(mg.n_slas, hidden);
    let mut buf_comp = StepBuffers::new(mg.n_components, hidden, hyper.msg_dim);
    let mut buf_sla = StepBuffers::new(mg.n_slas, hidden, hyper.msg_dim);
    let mut tmp_msg = vec![0.0; hyper.msg_dim];
    let mut rh = vec![0.0; hidden];

    for _ in 0..hyper.t_steps {
        side_step(
            &params.msg_working_sla_to_comp,
            &params.msg_backup_sla_to_comp,
            &params.gru_comp,
            &inc.comp_working,
            &inc.comp_backup,
            &h_comp,
            &h_sla,
            &mut h_comp_next,
            &mut buf_comp,
            &mut tmp_msg,
            &mut rh,
        );
        side_step(
            &params.msg_working_comp_to_sla,
            &params.msg_backup_comp_to_sla,
            &params.gru_sla,
            &inc.sla_working,
            &inc.sla_backup,
            &h_sla,
            &h_comp,
            &mut h_sla_next,
            &mut buf_sla,
            &mut tmp_msg,
            &mut rh,
        );
        std::mem::swap(&mut h_comp, &mut h_comp_next);
        std::mem::swap(&mut h_sla, &mut h_sla_next);
    }

    let mut mu = Vec::with_capacity(mg.n_slas);
    let mut sigma = Vec::with_capacity(mg.n_slas);
    let mut mask1 = vec![0.0; r1];
    let mut mask2 = vec![0.0; r2];
    let (mut a1, mut h1) = (vec![0.0; r1], vec![0.0; r1]);
    let (mut a2, mut h2) = (vec![0.0; r2], vec![0.0; r2]);
    let (mut a3, mut h3) = (vec![0.0; r3], vec![0.0; r3]);
    let mut mode = mode;
    for k in 0..mg.n_slas {
        let masks = match &mut mode {
            Mode::Eval => (None, None),
            Mode::Train(rng) => {
                draw_mask(rng, hyper.dropout_rates.0, &mut mask1);
                draw_mask(rng, hyper.dropout_rates.1, &mut mask2);
                (Some(mask1.as_slice()), Some(mask2.as_slice()))
            }
        };
        let (raw_mu, raw_scale) = readout_row(
            params,
            h_sla.row(k),
            masks.0,
            masks.1,
            &mut a1,
            &mut h1,
            &mut a2,
            &mut h2,
            &mut a3,
            &mut h3,
        );
        mu.push(raw_mu);
        sigma.push(softplus(raw_scale) + SCALE_FLOOR);
    }
    Ok(Prediction { mu, sigma })
}

/// Averages `n_passes` Train-mode forward passes (pass `i` draws its dropout
/// masks from the ChaCha stream `(seed, i)`); returns the mean `μ` and mean
/// `σ` per SLA. With one pass this reproduces a single Train-mode forward
/// exactly.
pub fn predict_mc_dropout(
    params: &ModelParams,
    hyper: &Hyper,
    mg: &MetaGraph,
    features: &FeatureSet,
    n_passes: usize,
    seed: u64,
) -> Result<Prediction> {
    if n_passes == 0 {
        return Err(Error::param("n_passes must be at least 1"));
    }
    let mut mu = vec![0.0; mg.n_slas];
    let mut sigma = vec![0.0; mg.n_slas];
    for pass in 0..n_passes {
        let mut rng = stream_rng(seed, pass as u64);
        let pred = forward(params, hyper, mg, features, Mode::Train(&mut rng))?;
        axpy(&mut mu, &pred.mu);
        axpy(&mut sigma, &pred.sigma);
    }
    let scale = 1.0 / n_passes as f64;
    for v in mu.iter_mut() {
        *v *= scale;
    }
    for v in sigma.iter_mut() {
        *v *= scale;
    }
    Ok(Prediction { mu, sigma })
}

// ---------------------------------------------------------------------------
// Training pass: forward with tape, then exact reverse-mode gradients.
// ---------------------------------------------------------------------------

struct SideTape {
    ns_w: Vec<Mat>,
    ns_b: Vec<Mat>,
    msum: Vec<Mat>,
    r: Vec<Mat>,
    z: Vec<Mat>,
    n: Vec<Mat>,
    h: Vec<Mat>,
}

struct ReadoutTape {
    a1: Mat,
    h1: Mat,
    a2: Mat,
    h2: Mat,
    a3: Mat,
    h3: Mat,
    raw: Mat,
    mask1: Option<Mat>,
    mask2: Option<Mat>,
}

struct Tape {
    comp: SideTape,
    sla: SideTape,
    readout: ReadoutTape,
}

fn forward_tape(
    params: &ModelParams,
    hyper: &Hyper,
    mg: &MetaGraph,
    features: &FeatureSet,
    inc: &Incidence,
    mut rng: Option<&mut StreamRng>,
) -> (Prediction, Tape) {
    let hidden = hyper.hidden_dim;
    let msg = hyper.msg_dim;
    let (r1, r2, r3) = hyper.readout_sizes;
    let t_steps = hyper.t_steps;

    let mut comp = SideTape {
        ns_w: Vec::with_capacity(t_steps),
        ns_b: Vec::with_capacity(t_steps),
        msum: Vec::with_capacity(t_steps),
        r: Vec::with_capacity(t_steps),
        z: Vec::with_capacity(t_steps),
        n: Vec::with_capacity(t_steps),
        h: vec![padded_states(&features.component_features, hidden)],
    };
    let mut sla = SideTape {
        ns_w: Vec::with_capacity(t_steps),
        ns_b: Vec::with_capacity(t_steps),
        msum: Vec::with_capacity(t_steps),
        r: Vec::with_capacity(t_steps),
        z: Vec::with_capacity(t_steps),
        n: Vec::with_capacity(t_steps),
        h: vec![padded_states(&features.sla_features, hidden)],
    };
    let mut tmp_msg = vec![0.0; msg];
    let mut rh = vec![0.0; hidden];

    for t in 0..t_steps {
        let mut buf_comp = StepBuffers::new(mg.n_components, hidden, msg);
        let mut buf_sla = StepBuffers::new(mg.n_slas, hidden, msg);
        let mut h_comp_next = Mat::zeros(mg.n_components, hidden);
        let mut h_sla_next = Mat::zeros(mg.n_slas, hidden);
        side_step(
            &params.msg_working_sla_to_comp,
            &params.msg_backup_sla_to_comp,
            &params.gru_comp,
            &inc.comp_working,
            &inc.comp_backup,
            &comp.h[t],
            &sla.h[t],
            &mut h_comp_next,
            &mut buf_comp,
            &mut tmp_msg,
            &mut rh,
        );
        side_step(
            &params.msg_working_comp_to_sla,
            &params.msg_backup_comp_to_sla,
            &params.gru_sla,
            &inc.sla_working,
            &inc.sla_backup,
            &sla.h[t],
            &comp.h[t],
            &mut h_sla_next,
            &mut buf_sla,
            &mut tmp_msg,
            &mut rh,
        );
        comp.h.push(h_comp_next);
        sla.h.push(h_sla_next);
        for (side, buf) in [(&mut comp, buf_comp), (&mut sla, buf_sla)] {
            side.ns_w.push(buf.ns_w);
            side.ns_b.push(buf.ns_b);
            side.msum.push(buf.msum);
            side.r.push(buf.r);
            side.z.push(buf.z);
            side.n.push(buf.n);
        }
    }

    let mut readout = ReadoutTape {
        a1: Mat::zeros(mg.n_slas, r1),
        h1: Mat::zeros(mg.n_slas, r1),
        a2: Mat::zeros(mg.n_slas, r2),
        h2: Mat::zeros(mg.n_slas, r2),
        a3: Mat::zeros(mg.n_slas, r3),
        h3: Mat::zeros(mg.n_slas, r3),
        raw: Mat::zeros(mg.n_slas, 2),
        mask1: rng.as_ref().map(|_| Mat::zeros(mg.n_slas, r1)),
        mask2: rng.as_ref().map(|_| Mat::zeros(mg.n_slas, r2)),
    };
    let mut mu = Vec::with_capacity(mg.n_slas);
    let mut sigma = Vec::with_capacity(mg.n_slas);
    let h_final = &sla.h[t_steps];
    for k in 0..mg.n_slas {
        if let Some(rng) = rng.as_deref_mut() {
            draw_mask(rng, hyper.dropout_rates.0, readout.mask1.as_mut().unwrap().row_mut(k));
            draw_mask(rng, hyper.dropout_rates.1, readout.mask2.as_mut().unwrap().row_mut(k));
        }
        let (mut a1, mut h1) = (vec![0.0; r1], vec![0.0; r1]);
        let (mut a2, mut h2) = (vec![0.0; r2], vec![0.0; r2]);
        let (mut a3, mut h3) = (vec![0.0; r3], vec![0.0; r3]);
        let (raw_mu, raw_scale) = readout_row(
            params,
            h_final.row(k),
            readout.mask1.as_ref().map(|m| m.row(k)),
            readout.mask2.as_ref().map(|m| m.row(k)),
            &mut a1,
            &mut h1,
            &mut a2,
            &mut h2,
            &mut a3,
            &mut h3,
        );
        readout.a1.row_mut(k).copy_from_slice(&a1);
        readout.h1.row_mut(k).copy_from_slice(&h1);
        readout.a2.row_mut(k).copy_from_slice(&a2);
        readout.h2.row_mut(k).copy_from_slice(&h2);
        readout.a3.row_mut(k).copy_from_slice(&a3);
        readout.h3.row_mut(k).copy_from_slice(&h3);
        readout.raw.row_mut(k).copy_from_slice(&[raw_mu, raw_scale]);
        mu.push(raw_mu);
        sigma.push(softplus(raw_scale) + SCALE_FLOOR);
    }
    (Prediction { mu, sigma }, Tape { comp, sla, readout })
}

/// Backward of one message map at one receiver node.
#[allow(clippy::too_many_arguments)]
fn message_backward(
    map: &MessageMap,
    grad: &mut MessageMap,
    gm: &[f64],
    ns: &[f64],
    senders: &[usize],
    h_recv: &[f64],
    d_senders: &mut Mat,
    d_recv: &mut [f64],
    g_ns: &mut [f64],
) {
    let deg = senders.len() as f64;
    grad.w_sender.add_outer(gm, ns, 1.0);
    g_ns.fill(0.0);
    map.w_sender.matvec_t_add(gm, g_ns);
    for &u in senders {
        axpy(d_senders.row_mut(u), g_ns);
    }
    grad.w_receiver.add_outer(gm, h_recv, deg);
    axpy_scaled(&mut grad.bias, gm, deg);
    g_ns.fill(0.0);
    map.w_receiver.matvec_t_add(gm, g_ns);
    axpy_scaled(d_recv, &g_ns[..h_recv.len()], deg);
}

/// Mean negative log-likelihood over a batch plus the squared-entry penalty
/// on the message weights: each example contributes the mean of its per-SLA
/// `−log t_ν(y; μ, σ)` terms, and examples are averaged.
///
/// Fails with a numerical error if the result is not finite.
pub fn loss(
    params: &ModelParams,
    hyper: &Hyper,
    batch: &[&Example],
    mode: Mode,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::param("loss requires a non-empty batch"));
    }
    let mut mode = mode;
    let mut data = 0.0;
    for ex in batch {
        let pred = match &mut mode {
            Mode::Eval => forward(params, hyper, &ex.metagraph, &ex.features, Mode::Eval)?,
            Mode::Train(rng) => {
                forward(params, hyper, &ex.metagraph, &ex.features, Mode::Train(rng))?
            }
        };
        let mut sum = 0.0;
        for k in 0..ex.labels.len() {
            sum += -tdist::logpdf(ex.labels[k], pred.mu[k], pred.sigma[k], hyper.nu);
        }
        data += sum / ex.labels.len() as f64;
    }
    let value = data / batch.len() as f64 + hyper.l2_coeff * params.message_weight_sq_sum();
    if !value.is_finite() {
        return Err(Error::numerical("loss is not finite"));
    }
    Ok(value)
}

/// Tape forward plus exact reverse-mode backward of one (possibly merged)
/// example. `weights[k]` multiplies the k-th SLA's NLL term; the weighted
/// data loss is returned and parameter gradients accumulate into `grads`.
fn accumulate_example_gradients(
    params: &ModelParams,
    hyper: &Hyper,
    ex: &Example,
    weights: &[f64],
    rng: Option<&mut StreamRng>,
    grads: &mut ModelParams,
) -> Result<f64> {
    let mut data = 0.0;
    {
        check_dims(&ex.metagraph, &ex.features)?;
        let mg = &ex.metagraph;
        let inc = Incidence::build(mg);
        let (pred, tape) = forward_tape(params, hyper, mg, &ex.features, &inc, rng);

        let hidden = hyper.hidden_dim;
        let (r1, r2, r3) = hyper.readout_sizes;
        let n_slas = mg.n_slas;
        let nu = hyper.nu;

        // Loss seeds and readout backward.
        let mut d_h_sla = Mat::zeros(n_slas, hidden);
        let mut da1 = vec![0.0; r1];
        let mut da2 = vec![0.0; r2];
        let mut da3 = vec![0.0; r3];
        let mut d_h1 = vec![0.0; r1];
        let mut d_h2 = vec![0.0; r2];
        let mut d_h3 = vec![0.0; r3];
        for k in 0..n_slas {
            let (y, mu, sig) = (ex.labels[k], pred.mu[k], pred.sigma[k]);
            data += weights[k] * -tdist::logpdf(y, mu, sig, nu);
            let zs = (y - mu) / sig;
            let d_mu = weights[k] * (-(nu + 1.0) * zs / (sig * (nu + zs * zs)));
            let d_sig = weights[k] * ((1.0 - (nu + 1.0) * zs * zs / (nu + zs * zs)) / sig);
            let raw_scale = tape.readout.raw.row(k)[1];
            let d_raw = [d_mu, d_sig * sigmoid(raw_scale)];

            // Layer 4 (linear heads).
            let lay = &params.readout;
            grads.readout[3].weight.add_outer(&d_raw, tape.readout.h3.row(k), 1.0);
            axpy(&mut grads.readout[3].bias, &d_raw);
            d_h3.fill(0.0);
            lay[3].weight.matvec_t_add(&d_raw, &mut d_h3);
            // Layer 3 (SELU, no dropout).
            let a3 = tape.readout.a3.row(k);
            for i in 0..r3 {
                da3[i] = d_h3[i] * selu_deriv(a3[i]);
            }
            grads.readout[2].weight.add_outer(&da3, tape.readout.h2.row(k), 1.0);
            axpy(&mut grads.readout[2].bias, &da3);
            d_h2.fill(0.0);
            lay[2].weight.matvec_t_add(&da3, &mut d_h2);
            // Layer 2 (SELU then dropout mask 2).
            let a2 = tape.readout.a2.row(k);
            for i in 0..r2 {
                let m = tape.readout.mask2.as_ref().map_or(1.0, |m| m.row(k)[i]);
                da2[i] = d_h2[i] * m * selu_deriv(a2[i]);
            }
            grads.readout[1].weight.add_outer(&da2, tape.readout.h1.row(k), 1.0);
            axpy(&mut grads.readout[1].bias, &da2);
            d_h1.fill(0.0);
            lay[1].weight.matvec_t_add(&da2, &mut d_h1);
            // Layer 1 (SELU then dropout mask 1).
            let a1 = tape.readout.a1.row(k);
            for i in 0..r1 {
                let m = tape.readout.mask1.as_ref().map_or(1.0, |m| m.row(k)[i]);
                da1[i] = d_h1[i] * m * selu_deriv(a1[i]);
            }
            grads.readout[0].weight.add_outer(&da1, tape.sla.h[hyper.t_steps].row(k), 1.0);
            axpy(&mut grads.readout[0].bias, &da1);
            lay[0].weight.matvec_t_add(&da1, d_h_sla.row_mut(k));
        }

        // Walk the message-passing steps backwards.
        let mut d_h_comp = Mat::zeros(mg.n_components, hidden);
        let mut scratch = GruBackScratch::new(hidden);
        let mut g_ns = vec![0.0; hidden.max(hyper.msg_dim)];
        for t in (0..hyper.t_steps).rev() {
            let mut d_h_comp_prev = Mat::zeros(mg.n_components, hidden);
            let mut d_h_sla_prev = Mat::zeros(n_slas, hidden);
            let mut d_msum_comp = Mat::zeros(mg.n_components, hyper.msg_dim);
            let mut d_msum_sla = Mat::zeros(n_slas, hyper.msg_dim);
            for i in 0..mg.n_components {
                gru_backward(
                    &params.gru_comp,
                    &mut grads.gru_comp,
                    tape.comp.msum[t].row(i),
                    tape.comp.h[t].row(i),
                    tape.comp.r[t].row(i),
                    tape.comp.z[t].row(i),
                    tape.comp.n[t].row(i),
                    d_h_comp.row(i),
                    d_msum_comp.row_mut(i),
                    d_h_comp_prev.row_mut(i),
                    &mut scratch,
                );
            }
            for k in 0..n_slas {
                gru_backward(
                    &params.gru_sla,
                    &mut grads.gru_sla,
                    tape.sla.msum[t].row(k),
                    tape.sla.h[t].row(k),
                    tape.sla.r[t].row(k),
                    tape.sla.z[t].row(k),
                    tape.sla.n[t].row(k),
                    d_h_sla.row(k),
                    d_msum_sla.row_mut(k),
                    d_h_sla_prev.row_mut(k),
                    &mut scratch,
                );
            }
            for i in 0..mg.n_components {
                if !inc.comp_working[i].is_empty() {
                    message_backward(
                        &params.msg_working_sla_to_comp,
                        &mut grads.msg_working_sla_to_comp,
                        d_msum_comp.row(i),
                        tape.comp.ns_w[t].row(i),
                        &inc.comp_working[i],
                        tape.comp.h[t].row(i),
                        &mut d_h_sla_prev,
                        d_h_comp_prev.row_mut(i),
                        &mut g_ns[..hidden],
                    );
                }
                if !inc.comp_backup[i].is_empty() {
                    message_backward(
                        &params.msg_backup_sla_to_comp,
                        &mut grads.msg_backup_sla_to_comp,
                        d_msum_comp.row(i),
                        tape.comp.ns_b[t].row(i),
                        &inc.comp_backup[i],
                        tape.comp.h[t].row(i),
                        &mut d_h_sla_prev,
                        d_h_comp_prev.row_mut(i),
                        &mut g_ns[..hidden],
                    );
                }
            }
            for k in 0..n_slas {
                if !inc.sla_working[k].is_empty() {
                    message_backward(
                        &params.msg_working_comp_to_sla,
                        &mut grads.msg_working_comp_to_sla,
                        d_msum_sla.row(k),
                        tape.sla.ns_w[t].row(k),
                        &inc.sla_working[k],
                        tape.sla.h[t].row(k),
                        &mut d_h_comp_prev,
                        d_h_sla_prev.row_mut(k),
                        &mut g_ns[..hidden],
                    );
                }
                if !inc.sla_backup[k].is_empty() {
                    message_backward(
                        &params.msg_backup_comp_to_sla,
                        &mut grads.msg_backup_comp_to_sla,
                        d_msum_sla.row(k),
                        tape.sla.ns_b[t].row(k),
                        &inc.sla_backup[k],
                        tape.sla.h[t].row(k),
                        &mut d_h_comp_prev,
                        d_h_sla_prev.row_mut(k),
                        &mut g_ns[..hidden],
                    );
                }
            }
            d_h_comp = d_h_comp_prev;
            d_h_sla = d_h_sla_prev;
        }
    }

    Ok(data)
}

/// Adds the squared-entry penalty on the message weights (value and
/// gradient) and runs the finiteness checks shared by the loss entry points.
fn finalize_loss(
    params: &ModelParams,
    hyper: &Hyper,
    data: f64,
    mut grads: ModelParams,
) -> Result<(f64, ModelParams)> {
    let value = data + hyper.l2_coeff * params.message_weight_sq_sum();
    let two_l2 = 2.0 * hyper.l2_coeff;
    for (g, p) in [
        (&mut grads.msg_working_sla_to_comp, &params.msg_working_sla_to_comp),
        (&mut grads.msg_backup_sla_to_comp, &params.msg_backup_sla_to_comp),
        (&mut grads.msg_working_comp_to_sla, &params.msg_working_comp_to_sla),
        (&mut grads.msg_backup_comp_to_sla, &params.msg_backup_comp_to_sla),
    ] {
        axpy_scaled(&mut g.w_sender.data, &p.w_sender.data, two_l2);
        axpy_scaled(&mut g.w_receiver.data, &p.w_receiver.data, two_l2);
    }

    if !value.is_finite() {
        return Err(Error::numerical("loss is not finite"));
    }
    for (name, values, _) in grads.tensors() {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("non-finite gradient in {name}")));
        }
    }
    Ok((value, grads))
}

/// [`loss`] plus exact reverse-mode gradients for every parameter tensor.
/// The batch is merged into one block-diagonal example so a single
/// forward/backward serves all members; accumulation order is fixed, so the
/// result is independent of thread count by construction.
pub fn loss_and_gradients(
    params: &ModelParams,
    hyper: &Hyper,
    batch: &[&Example],
    mode: Mode,
) -> Result<(f64, ModelParams)> {
    let (merged, weights) = merge_examples(batch)?;
    weighted_loss_and_gradients(params, hyper, &merged, &weights, mode)
}

/// Loss and gradients of a single (possibly merged) example whose SLA loss
/// terms carry explicit weights: data = Σ_k weights\[k\]·nll_k, plus the
/// squared-entry penalty on the message weights.
pub fn weighted_loss_and_gradients(
    params: &ModelParams,
    hyper: &Hyper,
    example: &Example,
    weights: &[f64],
    mode: Mode,
) -> Result<(f64, ModelParams)> {
    hyper.validate()?;
    if weights.len() != example.metagraph.n_slas {
        return Err(Error::param("weight count must match the SLA count"));
    }
    let mut mode = mode;
    let mut grads = ModelParams::zeros(hyper);
    let rng = match &mut mode {
        Mode::Eval => None,
        Mode::Train(rng) => Some(&mut **rng),
    };
    let data = accumulate_example_gradients(params, hyper, example, weights, rng, &mut grads)?;
    finalize_loss(params, hyper, data, grads)
}

/// Weighted data loss plus penalty without gradients; the weight convention
/// matches [`weighted_loss_and_gradients`].
pub fn weighted_loss(
    params: &ModelParams,
    hyper: &Hyper,
    example: &Example,
    weights: &[f64],
    mode: Mode,
) -> Result<f64> {
    if weights.len() != example.metagraph.n_slas {
        return Err(Error::param("weight count must match the SLA count"));
    }
    let pred = forward(params, hyper, &example.metagraph, &example.features, mode)?;
    let mut data = 0.0;
    for (k, &y) in example.labels.iter().enumerate() {
        data += weights[k] * -tdist::logpdf(y, pred.mu[k], pred.sigma[k], hyper.nu);
    }
    let value = data + hyper.l2_coeff * params.message_weight_sq_sum();
    if !value.is_finite() {
        return Err(Error::numerical("loss is not finite"));
    }
    Ok(value)
}

/// Pooled mean negative log-likelihood over every (example, SLA) pair, in
/// deterministic-inference mode with no weight penalty. This is the metric
/// reported for test/validation splits and compared against the
/// standard-t(0, 1) baseline.
pub fn mean_nll(params: &ModelParams, hyper: &Hyper, examples: &[&Example]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let pred = forward(params, hyper, &ex.metagraph, &ex.features, Mode::Eval)?;
        for (k, &y) in ex.labels.iter().enumerate() {
            sum += -tdist::logpdf(y, pred.mu[k], pred.sigma[k], hyper.nu);
        }
        count += ex.labels.len();
    }
    if count == 0 {
        return Err(Error::param("mean_nll needs at least one SLA"));
    }
    let value = sum / count as f64;
    if !value.is_finite() {
        return Err(Error::numerical("mean NLL is not finite"));
    }
    Ok(value)
}

/// Disjoint union of a batch: node indices are offset per member, features
/// and labels are stacked, and each SLA's loss weight is set to
/// `1/(batch_size · member_sla_count)` so the merged weighted loss equals
/// the batch mean of per-example SLA-mean losses. Edge lists stay in
/// canonical order because members are appended whole and offsets grow
/// monotonically.
pub fn merge_examples(batch: &[&Example]) -> Result<(Example, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::param("cannot merge an empty batch"));
    }
    let batch_scale = 1.0 / batch.len() as f64;
    let total_components: usize = batch.iter().map(|e| e.metagraph.n_components).sum();
    let total_slas: usize = batch.iter().map(|e| e.metagraph.n_slas).sum();
    let mut mg = MetaGraph {
        n_components: 0,
        n_slas: 0,
        edges_working: Vec::new(),
        edges_backup: Vec::new(),
    };
    let mut component_features = Mat::zeros(total_components, N_COMPONENT_FEATURES);
    let mut sla_features = Mat::zeros(total_slas, N_SLA_FEATURES);
    let mut labels = Vec::with_capacity(total_slas);
    let mut weights = Vec::with_capacity(total_slas);
    for ex in batch {
        let (sla_off, comp_off) = (mg.n_slas, mg.n_components);
        for &(s, c) in &ex.metagraph.edges_working {
            mg.edges_working.push((s + sla_off, c + comp_off));
        }
        for &(s, c) in &ex.metagraph.edges_backup {
            mg.edges_backup.push((s + sla_off, c + comp_off));
        }
        for r in 0..ex.metagraph.n_components {
            component_features
                .row_mut(comp_off + r)
                .copy_from_slice(ex.features.component_features.row(r));
        }
        for r in 0..ex.metagraph.n_slas {
            sla_features
                .row_mut(sla_off + r)
                .copy_from_slice(ex.features.sla_features.row(r));
        }
        labels.extend_from_slice(&ex.labels);
        let w = batch_scale / ex.metagraph.n_slas as f64;
        weights.extend((0..ex.metagraph.n_slas).map(|_| w));
        mg.n_slas += ex.metagraph.n_slas;
        mg.n_components += ex.metagraph.n_components;
    }
    let features = FeatureSet { component_features, sla_features };
    let example = Example::new(mg, features, labels)?;
    Ok((example, weights))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorJson {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointJson {
    version: String,
    hyper: Hyper,
    norm: NormStats,
    params: Vec<TensorJson>,
}

/// Serializes parameters, hyperparameters and normalization statistics into
/// the versioned checkpoint JSON.
pub fn checkpoint_to_json(
    params: &ModelParams,
    hyper: &Hyper,
    norm: &NormStats,
) -> Result<String> {
    let ck = CheckpointJson {
        version: CHECKPOINT_VERSION.to_string(),
        hyper: hyper.clone(),
        norm: norm.clone(),
        params: params
            .tensors()
            .into_iter()
            .map(|(name, values, shape)| TensorJson { name, shape, values: values.to_vec() })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&ck)?)
}

/// Parses and validates a checkpoint: version tag, tensor names, and shapes
/// must all match the declared hyperparameters exactly.
pub fn checkpoint_from_json(text: &str) -> Result<(ModelParams, Hyper, NormStats)> {
    let ck: CheckpointJson = serde_json::from_str(text)?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint version {:?} (expected {CHECKPOINT_VERSION:?})",
            ck.version
        )));
    }
    ck.hyper.validate()?;
    let mut params = ModelParams::zeros(&ck.hyper);
    let mut seen = std::collections::BTreeSet::new();
    {
        let mut slots: std::collections::BTreeMap<String, (&mut Vec<f64>, Vec<usize>)> = params
            .tensors_mut()
            .into_iter()
            .map(|(name, values, shape)| (name, (values, shape)))
            .collect();
        for tensor in &ck.params {
            let (values, shape) = slots
                .get_mut(&tensor.name)
                .ok_or_else(|| Error::data(format!("unknown tensor {:?}", tensor.name)))?;
            if !seen.insert(tensor.name.clone()) {
                return Err(Error::data(format!("duplicate tensor {:?}", tensor.name)));
            }
            if *shape != tensor.shape {
                return Err(Error::data(format!(
                    "tensor {:?} has shape {:?}, expected {:?}",
                    tensor.name, tensor.shape, shape
                )));
            }
            if tensor.values.len() != values.len() {
                return Err(Error::data(format!(
                    "tensor {:?} has {} values, expected {}",
                    tensor.name,
                    tensor.values.len(),
                    values.len()
                )));
            }
            values.copy_from_slice(&tensor.values);
        }
        if seen.len() != slots.len() {
            let missing: Vec<&String> =
                slots.keys().filter(|k| !seen.contains(*k)).collect();
            return Err(Error::data(format!("checkpoint is missing tensors {missing:?}")));
        }
    }
    Ok((params, ck.hyper, ck.norm))
}
