//! Differentiable feed-forward networks with analytic backpropagation.
//!
//! A network is a sequence of fully connected layers
//!
//! ```text
//! z = x · W + b        W is in_dim×out_dim, b is a row vector
//! h = act(z)           act ∈ {relu, identity}
//! y = dropout(h)       inverted dropout, train mode only
//! ```
//!
//! All math is f64. Parameters live in a [`ParamStore`]: a flat, ordered,
//! name-addressed collection of value arrays with paired gradient arrays.
//! [`forward`] records a [`ForwardTape`] (inputs, pre/post-activations,
//! dropout masks) and [`backward`] replays it to accumulate analytic
//! gradients (`+=`, so several losses can be combined before a step).
//!
//! Dropout is *inverted*: training keeps a unit with probability
//! `1 − rate` and scales it by `1/(1 − rate)`; evaluation is a pure
//! pass-through. Masks are either resampled per element from a caller
//! RNG, or — for stable sampled-subnetwork hypotheses — fixed per-unit
//! masks that are a pure function of `(seed, mask_id, layer index)`.
//!
//! The optimizer is SGD with optional Nesterov momentum and additive
//! weight decay, matching the common deep-learning convention:
//!
//! ```text
//! g = grad + wd·w
//! v = μ·v + g
//! w -= lr · lr_multiplier · (g + μ·v)    (nesterov)
//! w -= lr · lr_multiplier · v            (plain momentum)
//! ```

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mat::{self, Mat};
use crate::seeds;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Checkpoint schema version written by [`Checkpoint::from_parts`].
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Layer specification
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Shape + nonlinearity + dropout of one fully connected layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub dropout_rate: f64,
}

impl LayerSpec {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        dropout_rate: f64,
    ) -> Result<Self> {
        if in_dim < 1 || out_dim < 1 {
            return Err(Error::config(format!(
                "layer dims must be ≥ 1, got {in_dim}→{out_dim}"
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate must be in [0,1), got {dropout_rate}"
            )));
        }
        Ok(LayerSpec {
            in_dim,
            out_dim,
            activation,
            dropout_rate,
        })
    }

    /// Plain layer without dropout.
    pub fn plain(in_dim: usize, out_dim: usize, activation: Activation) -> Result<Self> {
        LayerSpec::new(in_dim, out_dim, activation, 0.0)
    }
}

/// An immutable stack of layer specs with validated dimension chaining.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
}

impl Network {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::config(format!(
                    "layer dims do not chain: {}→{} followed by {}→{}",
                    w[0].in_dim, w[0].out_dim, w[1].in_dim, w[1].out_dim
                )));
            }
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn weight_name(layer: usize) -> String {
        format!("l{layer}.w")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("l{layer}.b")
    }

    /// Total parameter count (weights + biases).
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.in_dim * l.out_dim + l.out_dim)
            .sum()
    }

    /// Fresh parameter store: weights ~ Uniform(−a, a) with
    /// a = sqrt(6/(in_dim+out_dim)), biases zero. Deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = seeds::rng_from(seed);
        let mut store = ParamStore::new();
        for (i, l) in self.layers.iter().enumerate() {
            let a = (6.0 / (l.in_dim + l.out_dim) as f64).sqrt();
            let w: Vec<f64> = (0..l.in_dim * l.out_dim)
                .map(|_| (2.0 * rng.random::<f64>() - 1.0) * a)
                .collect();
            store
                .add(Network::weight_name(i), w, 1.0)
                .expect("fresh store: names unique");
            store
                .add(Network::bias_name(i), vec![0.0; l.out_dim], 1.0)
                .expect("fresh store: names unique");
        }
        store
    }
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

/// One named parameter array with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
    pub lr_multiplier: f64,
}

/// Ordered, name-addressed collection of parameter arrays; the unit of
/// optimization. Names are unique, `values` and `grads` always have equal
/// length, and every `lr_multiplier` is positive.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        values: Vec<f64>,
        lr_multiplier: f64,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        if !(lr_multiplier > 0.0 && lr_multiplier.is_finite()) {
            return Err(Error::config(format!(
                "lr_multiplier must be finite and > 0, got {lr_multiplier}"
            )));
        }
        let grads = vec![0.0; values.len()];
        self.entries.push(ParamEntry {
            name,
            values,
            grads,
            lr_multiplier,
        });
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            for g in &mut e.grads {
                *g = 0.0;
            }
        }
    }

    pub fn set_all_lr_multiplier(&mut self, m: f64) {
        assert!(m > 0.0, "lr_multiplier must be > 0");
        for e in &mut self.entries {
            e.lr_multiplier = m;
        }
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// Flat copy of all values in entry order (snapshot support).
    pub fn values_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for e in &self.entries {
            out.extend_from_slice(&e.values);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Dropout behavior for one forward pass. `Disabled` is both the eval mode
/// and the "train with dropout turned off" flag; the two train modes differ
/// in how masks are drawn.
pub enum Dropout<'a> {
    /// Identity pass-through (eval mode).
    Disabled,
    /// Fresh per-element masks drawn from the caller's RNG.
    Resample(&'a mut ChaCha8Rng),
    /// Per-unit mask, a pure function of (seed, mask_id, layer index),
    /// broadcast over the batch and reused across calls.
    Fixed { seed: u64, mask_id: u64 },
}

/// Cached mask multipliers for one layer: 0 for dropped units, 1/(1−rate)
/// for kept ones.
#[derive(Clone, Debug)]
pub enum MaskTape {
    None,
    PerElem(Mat),
    PerUnit(Vec<f64>),
}

/// Everything one layer's backward pass needs, as produced by [`forward`].
#[derive(Clone, Debug)]
pub struct LayerTape {
    /// Input actually fed to `x·W + b` (post-dropout output of the previous
    /// layer).
    pub input: Mat,
    /// Pre-activation `z = x·W + b`.
    pub pre_act: Mat,
    /// Post-activation `act(z)` before dropout.
    pub post_act: Mat,
    pub mask: MaskTape,
}

/// Per-layer caches for one batch; consumed by [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardTape {
    pub layers: Vec<LayerTape>,
}

impl ForwardTape {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn batch_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input.rows())
    }
}

fn fixed_unit_mask(seed: u64, mask_id: u64, layer_idx: usize, out_dim: usize, rate: f64) -> Vec<f64> {
    let s = seeds::derive_seed_indexed(
        seeds::derive_seed_indexed(seed, "mask", mask_id),
        "layer",
        layer_idx as u64,
    );
    let mut rng = seeds::rng_from(s);
    let keep = 1.0 - rate;
    (0..out_dim)
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect()
}

fn layer_params<'s>(params: &'s ParamStore, i: usize, l: &LayerSpec) -> Result<(&'s ParamEntry, &'s ParamEntry)> {
    let w = params
        .get(&Network::weight_name(i))
        .ok_or_else(|| Error::config(format!("missing parameter entry {:?}", Network::weight_name(i))))?;
    let b = params
        .get(&Network::bias_name(i))
        .ok_or_else(|| Error::config(format!("missing parameter entry {:?}", Network::bias_name(i))))?;
    if w.values.len() != l.in_dim * l.out_dim {
        return Err(Error::config(format!(
            "shape mismatch: {} has {} values, layer wants {}x{}",
            w.name,
            w.values.len(),
            l.in_dim,
            l.out_dim
        )));
    }
    if b.values.len() != l.out_dim {
        return Err(Error::config(format!(
            "shape mismatch: {} has {} values, layer wants {}",
            b.name,
            b.values.len(),
            l.out_dim
        )));
    }
    Ok((w, b))
}

/// Run the network on a batch, producing logits and the tape for backprop.
pub fn forward(
    net: &Network,
    params: &ParamStore,
    x: &Mat,
    mut dropout: Dropout<'_>,
) -> Result<(Mat, ForwardTape)> {
    if x.cols() != net.in_dim() {
        return Err(Error::config(format!(
            "shape mismatch: input has {} columns, network expects {}",
            x.cols(),
            net.in_dim()
        )));
    }
    if !x.is_finite() {
        return Err(Error::domain("non-finite input to forward"));
    }

    let mut tapes = Vec::with_capacity(net.depth());
    let mut cur = x.clone();
    for (i, l) in net.layers().iter().enumerate() {
        let (w, b) = layer_params(params, i, l)?;
        let wm = Mat::from_vec(l.in_dim, l.out_dim, w.values.clone());
        // z = x·W + b
        let mut pre = mat::matmul(&cur, &wm);
        let bias = &b.values;
        mat::for_each_row_mut(&mut pre, |row| {
            for (v, bj) in row.iter_mut().zip(bias) {
                *v += bj;
            }
        });
        // h = act(z)
        let mut post = pre.clone();
        if l.activation == Activation::Relu {
            mat::for_each_row_mut(&mut post, |row| {
                for v in row {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            });
        }
        // y = dropout(h)
        let (out, mask) = if l.dropout_rate > 0.0 {
            match &mut dropout {
                Dropout::Disabled => (post.clone(), MaskTape::None),
                Dropout::Resample(rng) => {
                    let keep = 1.0 - l.dropout_rate;
                    let mut mask = Mat::zeros(post.rows(), post.cols());
                    for v in mask.data_mut() {
                        *v = if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        };
                    }
                    let mut out = post.clone();
                    for (o, m) in out.data_mut().iter_mut().zip(mask.data()) {
                        *o *= m;
                    }
                    (out, MaskTape::PerElem(mask))
                }
                Dropout::Fixed { seed, mask_id } => {
                    let mask = fixed_unit_mask(*seed, *mask_id, i, l.out_dim, l.dropout_rate);
                    let mut out = post.clone();
                    mat::for_each_row_mut(&mut out, |row| {
                        for (v, m) in row.iter_mut().zip(&mask) {
                            *v *= m;
                        }
                    });
                    (out, MaskTape::PerUnit(mask))
                }
            }
        } else {
            (post.clone(), MaskTape::None)
        };
        tapes.push(LayerTape {
            input: cur,
            pre_act: pre,
            post_act: post,
            mask,
        });
        cur = out;
    }
    Ok((cur, ForwardTape { layers: tapes }))
}

/// Convenience: eval-mode forward, logits only.
pub fn forward_eval(net: &Network, params: &ParamStore, x: &Mat) -> Result<Mat> {
    forward(net, params, x, Dropout::Disabled).map(|(logits, _)| logits)
}

/// Backpropagate `dlogits` through the taped forward pass, accumulating
/// (`+=`) weight/bias gradients into `params` and returning the input
/// gradient.
pub fn backward(
    net: &Network,
    params: &mut ParamStore,
    tape: &ForwardTape,
    dlogits: &Mat,
) -> Result<Mat> {
    if tape.depth() != net.depth() {
        return Err(Error::config(format!(
            "shape mismatch: tape depth {} vs network depth {}",
            tape.depth(),
            net.depth()
        )));
    }
    let last = &tape.layers[net.depth() - 1];
    if dlogits.shape() != last.pre_act.shape() {
        return Err(Error::config(format!(
            "shape mismatch: dlogits {:?} vs logits {:?}",
            dlogits.shape(),
            last.pre_act.shape()
        )));
    }

    let mut grad = dlogits.clone();
    for (i, l) in net.layers().iter().enumerate().rev() {
        let t = &tape.layers[i];
        if t.input.cols() != l.in_dim || t.pre_act.cols() != l.out_dim {
            return Err(Error::config(format!(
                "shape mismatch: tape layer {i} does not match network layer ({}→{})",
                l.in_dim, l.out_dim
            )));
        }
        // Through dropout.
        match &t.mask {
            MaskTape::None => {}
            MaskTape::PerElem(m) => {
                for (g, mv) in grad.data_mut().iter_mut().zip(m.data()) {
                    *g *= mv;
                }
            }
            MaskTape::PerUnit(mask) => {
                mat::for_each_row_mut(&mut grad, |row| {
                    for (g, m) in row.iter_mut().zip(mask) {
                        *g *= m;
                    }
                });
            }
        }
        // Through the activation.
        if l.activation == Activation::Relu {
            for (g, z) in grad.data_mut().iter_mut().zip(t.pre_act.data()) {
                if *z <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        // dW = xᵀ·G, db = column sums of G, dx = G·Wᵀ.
        let dw = mat::matmul_at_b(&t.input, &grad);
        {
            let w_entry = params
                .get(&Network::weight_name(i))
                .ok_or_else(|| Error::config(format!("missing parameter entry {:?}", Network::weight_name(i))))?;
            if w_entry.values.len() != dw.data().len() {
                return Err(Error::config(format!(
                    "shape mismatch: gradient for {} has {} values, store has {}",
                    w_entry.name,
                    dw.data().len(),
                    w_entry.values.len()
                )));
            }
        }
        let wm = {
            let w_entry = params.get(&Network::weight_name(i)).expect("checked above");
            Mat::from_vec(l.in_dim, l.out_dim, w_entry.values.clone())
        };
        {
            let w_entry = params.get_mut(&Network::weight_name(i)).expect("checked above");
            for (g, d) in w_entry.grads.iter_mut().zip(dw.data()) {
                *g += d;
            }
        }
        {
            let b_entry = params
                .get_mut(&Network::bias_name(i))
                .ok_or_else(|| Error::config(format!("missing parameter entry {:?}", Network::bias_name(i))))?;
            if b_entry.grads.len() != l.out_dim {
                return Err(Error::config(format!(
                    "shape mismatch: bias gradient for layer {i} has dim {}, store has {}",
                    l.out_dim,
                    b_entry.grads.len()
                )));
            }
            // Reduce the column sums locally first, then accumulate once,
            // so each backward call contributes a single addend per bias
            // component (mirrors how dW lands as one matmul result).
            let mut db = vec![0.0; l.out_dim];
            for row in grad.iter_rows() {
                for (g, d) in db.iter_mut().zip(row) {
                    *g += d;
                }
            }
            for (g, d) in b_entry.grads.iter_mut().zip(&db) {
                *g += d;
            }
        }
        grad = mat::matmul_a_bt(&grad, &wm);
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// N×K row-stochastic matrix of predicted label probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbBatch {
    mat: Mat,
}

impl ProbBatch {
    /// Wrap an existing matrix, validating row-stochasticity (rows sum to 1
    /// within 1e-9, entries in [0,1]). Intended for tests and ingestion;
    /// the hot path is [`softmax`].
    pub fn from_mat(mat: Mat) -> Result<Self> {
        for (i, row) in mat.iter_rows().enumerate() {
            let mut sum = 0.0;
            for &v in row {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::domain(format!(
                        "probability out of range at row {i}: {v}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::domain(format!("row {i} sums to {sum}, not 1")));
            }
        }
        Ok(ProbBatch { mat })
    }

    /// Test/fixture convenience; panics on invalid rows.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        ProbBatch::from_mat(Mat::from_rows(rows)).expect("valid probability rows")
    }

    /// Skip validation (crate-internal: finite-difference probes sit
    /// slightly off the simplex by construction).
    pub(crate) fn from_mat_unchecked(mat: Mat) -> Self {
        ProbBatch { mat }
    }

    pub fn rows(&self) -> usize {
        self.mat.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.mat.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.mat.row(i)
    }

    pub fn mat(&self) -> &Mat {
        &self.mat
    }

    pub fn into_mat(self) -> Mat {
        self.mat
    }
}

/// Row-wise softmax with per-row max subtraction (finite for logits of any
/// magnitude).
pub fn softmax(logits: &Mat) -> ProbBatch {
    let mut p = logits.clone();
    mat::for_each_row_mut(&mut p, |row| {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row {
            *v /= sum;
        }
    });
    ProbBatch { mat: p }
}

/// Pull a probability-space cotangent back to logit space:
/// `dz_ik = p_ik · (dp_ik − Σ_j dp_ij · p_ij)`.
pub fn softmax_backward(probs: &ProbBatch, dprobs: &Mat) -> Mat {
    assert_eq!(
        probs.mat.shape(),
        dprobs.shape(),
        "softmax_backward: shape mismatch"
    );
    let mut out = dprobs.clone();
    let k = probs.num_classes();
    for (orow, prow) in out
        .data_mut()
        .chunks_exact_mut(k)
        .zip(probs.mat.iter_rows())
    {
        let mut inner = 0.0;
        for (d, p) in orow.iter().zip(prow) {
            inner += d * p;
        }
        for (d, p) in orow.iter_mut().zip(prow) {
            *d = p * (*d - inner);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// SGD with Nesterov momentum
// ---------------------------------------------------------------------------

/// Per-entry velocity buffers, aligned with a store's entry order.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    velocities: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(store: &ParamStore) -> Self {
        SgdState {
            velocities: store
                .entries()
                .iter()
                .map(|e| vec![0.0; e.values.len()])
                .collect(),
        }
    }

    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.velocities
    }

    pub fn from_velocities(v: Vec<Vec<f64>>) -> Self {
        SgdState { velocities: v }
    }
}

/// One SGD step over every entry in the store. Effective learning rate is
/// `base_lr × lr_multiplier`; weight decay enters as an additive gradient
/// term `wd·w` *before* the momentum update; gradients are zeroed after the
/// step.
pub fn sgd_step(
    store: &mut ParamStore,
    state: &mut SgdState,
    base_lr: f64,
    momentum: f64,
    nesterov: bool,
    weight_decay: f64,
) {
    assert!(base_lr > 0.0, "base_lr must be > 0");
    assert!(
        (0.0..1.0).contains(&momentum),
        "momentum must be in [0,1), got {momentum}"
    );
    assert!(weight_decay >= 0.0, "weight_decay must be ≥ 0");
    assert_eq!(
        state.velocities.len(),
        store.entries().len(),
        "sgd_step: state does not match store"
    );
    for (e, vel) in store.entries_mut().iter_mut().zip(&mut state.velocities) {
        assert_eq!(vel.len(), e.values.len(), "sgd_step: velocity length");
        let lr = base_lr * e.lr_multiplier;
        for ((val, g_slot), v_slot) in
            e.values.iter_mut().zip(&mut e.grads).zip(vel.iter_mut())
        {
            let g = *g_slot + weight_decay * *val;
            let v = momentum * *v_slot + g;
            *v_slot = v;
            let d = if nesterov { g + momentum * v } else { v };
            *val -= lr * d;
            *g_slot = 0.0;
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub lr_multiplier: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityEntry {
    pub name: String,
    pub velocity: Vec<f64>,
}

/// Versioned JSON snapshot of one network: layer specs, parameter values
/// (gradients are not persisted), and optional optimizer velocities.
/// Numbers serialize as shortest-round-trip decimals, so reloading is
/// value-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layer_specs: Vec<LayerSpec>,
    pub entries: Vec<CheckpointEntry>,
    pub optimizer_state: Option<Vec<VelocityEntry>>,
}

impl Checkpoint {
    pub fn from_parts(net: &Network, store: &ParamStore, opt: Option<&SgdState>) -> Self {
        let entries = store
            .entries()
            .iter()
            .map(|e| CheckpointEntry {
                name: e.name.clone(),
                lr_multiplier: e.lr_multiplier,
                values: e.values.clone(),
            })
            .collect();
        let optimizer_state = opt.map(|s| {
            store
                .entries()
                .iter()
                .zip(s.velocities())
                .map(|(e, v)| VelocityEntry {
                    name: e.name.clone(),
                    velocity: v.clone(),
                })
                .collect()
        });
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            layer_specs: net.layers().to_vec(),
            entries,
            optimizer_state,
        }
    }

    /// Rebuild (network, store, optimizer state), validating shapes.
    pub fn into_parts(self) -> Result<(Network, ParamStore, Option<SgdState>)> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint format_version {}",
                self.format_version
            )));
        }
        let net = Network::new(self.layer_specs)?;
        let mut store = ParamStore::new();
        for e in &self.entries {
            store.add(e.name.clone(), e.values.clone(), e.lr_multiplier)?;
        }
        // Every layer must have weight/bias entries of the right size.
        for (i, l) in net.layers().iter().enumerate() {
            layer_params(&store, i, l)?;
        }
        let opt = match self.optimizer_state {
            None => None,
            Some(vel) => {
                if vel.len() != store.entries().len() {
                    return Err(Error::config(format!(
                        "optimizer_state has {} entries, store has {}",
                        vel.len(),
                        store.entries().len()
                    )));
                }
                let mut v = Vec::with_capacity(vel.len());
                for (ve, e) in vel.iter().zip(store.entries()) {
                    if ve.name != e.name || ve.velocity.len() != e.values.len() {
                        return Err(Error::config(format!(
                            "optimizer_state entry {:?} does not match parameter {:?}",
                            ve.name, e.name
                        )));
                    }
                    v.push(ve.velocity.clone());
                }
                Some(SgdState::from_velocities(v))
            }
        };
        Ok((net, store, opt))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relu_layer(i: usize, o: usize) -> LayerSpec {
        LayerSpec::plain(i, o, Activation::Relu).unwrap()
    }

    fn id_layer(i: usize, o: usize) -> LayerSpec {
        LayerSpec::plain(i, o, Activation::Identity).unwrap()
    }

    fn random_x(n: usize, d: usize, seed: u64) -> Mat {
        let mut rng = seeds::rng_from(seed);
        Mat::from_vec(n, d, (0..n * d).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect())
    }

    #[test]
    fn zero_net_maps_to_zero_logits() {
        let net = Network::new(vec![relu_layer(3, 4), id_layer(4, 2)]).unwrap();
        let mut store = net.init_params(0);
        for e in store.entries_mut() {
            for v in &mut e.values {
                *v = 0.0;
            }
        }
        let x = random_x(5, 3, 1);
        let (logits, _) = forward(&net, &store, &x, Dropout::Disabled).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = Network::new(vec![id_layer(3, 3)]).unwrap();
        let mut store = net.init_params(0);
        let w = store.get_mut("l0.w").unwrap();
        w.values = vec![
            1.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, 1.0,
        ];
        let x = random_x(4, 3, 2);
        let (logits, _) = forward(&net, &store, &x, Dropout::Disabled).unwrap();
        assert_eq!(logits, x);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let net = Network::new(vec![relu_layer(4, 8), id_layer(8, 3)]).unwrap();
        let store = net.init_params(7);
        let x = random_x(6, 4, 3);
        let (a, _) = forward(&net, &store, &x, Dropout::Disabled).unwrap();
        let (b, _) = forward(&net, &store, &x, Dropout::Disabled).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn forward_rejects_bad_shapes_and_nonfinite() {
        let net = Network::new(vec![id_layer(3, 2)]).unwrap();
        let store = net.init_params(0);
        let bad = Mat::zeros(2, 4);
        assert!(matches!(
            forward(&net, &store, &bad, Dropout::Disabled),
            Err(Error::Config(_))
        ));
        let mut nan = Mat::zeros(2, 3);
        nan.set(0, 0, f64::NAN);
        assert!(matches!(
            forward(&net, &store, &nan, Dropout::Disabled),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn softmax_uniform_and_overflow_cases() {
        let p = softmax(&Mat::from_rows(&[&[0.0, 0.0, 0.0, 0.0]]));
        for &v in p.row(0) {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let p = softmax(&Mat::from_rows(&[&[1000.0, 0.0]]));
        assert!(p.row(0)[0] > 1.0 - 1e-12);
        assert!(p.row(0).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_frozen_value_case() {
        // softmax(1,2,3) computed independently at high precision.
        let p = softmax(&Mat::from_rows(&[&[1.0, 2.0, 3.0]]));
        let expect = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (v, e) in p.row(0).iter().zip(&expect) {
            assert!((v - e).abs() < 1e-12, "got {v}, want {e}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_for_large_magnitudes() {
        let mut rng = seeds::rng_from(9);
        for _ in 0..200 {
            let scale = [1.0, 10.0, 1e3][rng.random_range(0..3)];
            let logits = Mat::from_vec(
                1,
                5,
                (0..5).map(|_| (2.0 * rng.random::<f64>() - 1.0) * scale).collect(),
            );
            let p = softmax(&logits);
            let sum: f64 = p.row(0).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            // Entries can underflow to exactly 0.0 for logit gaps ≳ 745.
            assert!(p.row(0).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn backward_zero_cotangent_is_a_noop() {
        let net = Network::new(vec![relu_layer(3, 5), id_layer(5, 2)]).unwrap();
        let mut store = net.init_params(11);
        let x = random_x(4, 3, 12);
        let (logits, tape) = forward(&net, &store, &x, Dropout::Disabled).unwrap();
        let dx = backward(&net, &mut store, &tape, &Mat::zeros(logits.rows(), logits.cols())).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        for e in store.entries() {
            assert!(e.grads.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    #[allow(clippy::neg_multiply)] // hand-written products mirror the dW = xᵀG formula term by term
    fn single_linear_layer_gradients_match_hand_formulas() {
        let net = Network::new(vec![id_layer(2, 2)]).unwrap();
        let mut store = net.init_params(13);
        let x = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let (_, tape) = forward(&net, &store, &x, Dropout::Disabled).unwrap();
        let g = Mat::from_rows(&[&[0.5, -1.0], &[2.0, 0.25]]);
        let dx = backward(&net, &mut store, &tape, &g).unwrap();

        // dW = xᵀG
        let expect_dw = [
            1.0 * 0.5 + 3.0 * 2.0,
            1.0 * -1.0 + 3.0 * 0.25,
            2.0 * 0.5 + 4.0 * 2.0,
            2.0 * -1.0 + 4.0 * 0.25,
        ];
        let dw = &store.get("l0.w").unwrap().grads;
        for (a, b) in dw.iter().zip(&expect_dw) {
            assert!((a - b).abs() < 1e-12);
        }
        // db = column sums of G
        let db = &store.get("l0.b").unwrap().grads;
        assert!((db[0] - 2.5).abs() < 1e-12);
        assert!((db[1] - -0.75).abs() < 1e-12);
        // dx = G·Wᵀ
        let w = &store.get("l0.w").unwrap().values;
        for i in 0..2 {
            for j in 0..2 {
                let expect = g.get(i, 0) * w[j * 2] + g.get(i, 1) * w[j * 2 + 1];
                assert!((dx.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_accumulation_matches_summed_cotangent() {
        let net = Network::new(vec![relu_layer(3, 6), id_layer(6, 2)]).unwrap();
        let mut s1 = net.init_params(21);
        let mut s2 = s1.clone();
        let x = random_x(5, 3, 22);
        let g1 = random_x(5, 2, 23);
        let g2 = random_x(5, 2, 24);

        let (_, tape) = forward(&net, &s1, &x, Dropout::Disabled).unwrap();
        backward(&net, &mut s1, &tape, &g1).unwrap();
        backward(&net, &mut s1, &tape, &g2).unwrap();

        let mut gsum = g1.clone();
        gsum.add_inplace(&g2);
        let (_, tape2) = forward(&net, &s2, &x, Dropout::Disabled).unwrap();
        backward(&net, &mut s2, &tape2, &gsum).unwrap();

        for (e1, e2) in s1.entries().iter().zip(s2.entries()) {
            for (a, b) in e1.grads.iter().zip(&e2.grads) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sgd_zero_grads_is_a_noop_and_plain_step_matches() {
        let net = Network::new(vec![id_layer(2, 2)]).unwrap();
        let mut store = net.init_params(31);
        let before = store.values_flat();
        let mut state = SgdState::new(&store);
        sgd_step(&mut store, &mut state, 0.1, 0.0, false, 0.0);
        assert_eq!(store.values_flat(), before);

        // w' = w − lr·g
        let g = 0.25;
        for e in store.entries_mut() {
            for gr in &mut e.grads {
                *gr = g;
            }
        }
        sgd_step(&mut store, &mut state, 0.1, 0.0, false, 0.0);
        for (w1, w0) in store.values_flat().iter().zip(&before) {
            assert!((w1 - (w0 - 0.1 * g)).abs() < 1e-15);
        }
        // grads zeroed after the step
        assert!(store.entries().iter().all(|e| e.grads.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn sgd_two_step_momentum_matches_closed_form() {
        let mu = 0.9_f64;
        let lr = 0.05_f64;
        let g = 0.3_f64;
        for nesterov in [false, true] {
            let mut store = ParamStore::new();
            store.add("l0.w", vec![1.0], 1.0).unwrap();
            store.add("l0.b", vec![0.0], 1.0).unwrap();
            let mut state = SgdState::new(&store);
            for _ in 0..2 {
                store.get_mut("l0.w").unwrap().grads[0] = g;
                sgd_step(&mut store, &mut state, lr, mu, nesterov, 0.0);
            }
            // v1 = g, v2 = (1+μ)g
            // nesterov: d1 = (1+μ)g, d2 = (1+μ+μ²)g → Δ = (2+2μ+μ²)·lr·g
            // plain:    d1 = g,      d2 = (1+μ)g   → Δ = (2+μ)·lr·g
            let total = if nesterov {
                (2.0 + 2.0 * mu + mu * mu) * lr * g
            } else {
                (2.0 + mu) * lr * g
            };
            let w = store.get("l0.w").unwrap().values[0];
            assert!((w - (1.0 - total)).abs() < 1e-15, "nesterov={nesterov}");
        }
    }

    #[test]
    fn sgd_weight_decay_and_lr_multiplier() {
        let mut store = ParamStore::new();
        store.add("w", vec![2.0], 0.1).unwrap();
        let mut state = SgdState::new(&store);
        // g_eff = 0 + wd·w = 0.5·2 = 1; Δ = lr·mult·1 = 0.01·0.1... wait:
        // lr=0.1, mult=0.1 → w' = 2 − 0.1·0.1·1 = 1.99
        sgd_step(&mut store, &mut state, 0.1, 0.0, false, 0.5);
        assert!((store.get("w").unwrap().values[0] - 1.99).abs() < 1e-15);
    }

    #[test]
    fn fixed_masks_are_stable_and_distinct() {
        let spec = LayerSpec::new(4, 16, Activation::Relu, 0.5).unwrap();
        let net = Network::new(vec![spec]).unwrap();
        let store = net.init_params(41);
        let x = random_x(3, 4, 42);
        let f = |mask_id: u64| {
            forward(&net, &store, &x, Dropout::Fixed { seed: 99, mask_id })
                .unwrap()
                .0
        };
        let a1 = f(0);
        let a2 = f(0);
        let b = f(1);
        for (u, v) in a1.data().iter().zip(a2.data()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
        assert!(a1.data().iter().zip(b.data()).any(|(u, v)| u != v));
    }

    #[test]
    fn fixed_mask_multipliers_are_zero_or_inverse_keep() {
        let mask = super::fixed_unit_mask(7, 3, 1, 64, 0.25);
        let keep = 0.75;
        assert!(mask.iter().all(|&m| m == 0.0 || (m - 1.0 / keep).abs() < 1e-15));
        assert!(mask.contains(&0.0));
        assert!(mask.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn eval_mode_ignores_dropout() {
        let spec = LayerSpec::new(3, 8, Activation::Relu, 0.5).unwrap();
        let out = LayerSpec::plain(8, 2, Activation::Identity).unwrap();
        let net = Network::new(vec![spec, out]).unwrap();
        let store = net.init_params(51);
        let x = random_x(4, 3, 52);
        let (eval_logits, _) = forward(&net, &store, &x, Dropout::Disabled).unwrap();

        // A dropout-free twin must agree exactly in eval mode.
        let twin = Network::new(vec![relu_layer(3, 8), id_layer(8, 2)]).unwrap();
        let (twin_logits, _) = forward(&twin, &store, &x, Dropout::Disabled).unwrap();
        assert_eq!(eval_logits, twin_logits);

        // Train mode with resampling differs (overwhelmingly likely).
        let mut rng = seeds::rng_from(53);
        let (train_logits, _) = forward(&net, &store, &x, Dropout::Resample(&mut rng)).unwrap();
        assert!(eval_logits
            .data()
            .iter()
            .zip(train_logits.data())
            .any(|(a, b)| a != b));
    }

    #[test]
    fn checkpoint_round_trip_is_value_exact() {
        let net = Network::new(vec![relu_layer(3, 8), id_layer(8, 2)]).unwrap();
        let mut store = net.init_params(61);
        store.get_mut("l0.w").unwrap().lr_multiplier = 0.1;
        let mut state = SgdState::new(&store);
        // Take a step so velocities are nonzero.
        for e in store.entries_mut() {
            for g in &mut e.grads {
                *g = 0.123456789;
            }
        }
        sgd_step(&mut store, &mut state, 0.01, 0.9, true, 5e-4);

        let ckpt = Checkpoint::from_parts(&net, &store, Some(&state));
        let json = serde_json::to_string(&ckpt).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(ckpt, back);
        let (net2, store2, state2) = back.into_parts().unwrap();
        assert_eq!(net.layers(), net2.layers());
        for (a, b) in store.entries().iter().zip(store2.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.lr_multiplier, b.lr_multiplier);
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let state2 = state2.unwrap();
        for (a, b) in state.velocities().iter().zip(state2.velocities()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn param_store_rejects_duplicates_and_bad_multiplier() {
        let mut s = ParamStore::new();
        s.add("w", vec![1.0], 1.0).unwrap();
        assert!(s.add("w", vec![2.0], 1.0).is_err());
        assert!(s.add("v", vec![1.0], 0.0).is_err());
    }

    #[test]
    fn layer_spec_validation() {
        assert!(LayerSpec::new(0, 3, Activation::Relu, 0.0).is_err());
        assert!(LayerSpec::new(3, 3, Activation::Relu, 1.0).is_err());
        assert!(LayerSpec::new(3, 3, Activation::Relu, 0.99).is_ok());
        assert!(Network::new(vec![
            LayerSpec::plain(2, 4, Activation::Relu).unwrap(),
            LayerSpec::plain(5, 2, Activation::Identity).unwrap(),
        ])
        .is_err());
    }
}
