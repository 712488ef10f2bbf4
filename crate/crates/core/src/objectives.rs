//! Scalar objectives and their gradients with respect to probability
//! outputs: entropies, mutual information, hypothesis disparity, the
//! disparity-regularized composite, and the baseline regularizers.
//!
//! All entropies are in nats. Every logarithm is ε-clamped on its
//! *argument*: `ln(x + ε)` with `ε = 1e-12`, so one-hot rows are safe and
//! entropies may undershoot zero by at most `ln(1+ε) ≈ 1e-12`.
//!
//! For a row-stochastic batch `p` (N×K) and hypothesis list `p_1..p_M`:
//!
//! ```text
//! H(Ŷ|X)  = (1/N) Σ_i Σ_k −p_ik ln(p_ik+ε)            conditional entropy
//! H(Ŷ)    = Σ_k −q_k ln(q_k+ε),  q = column means      marginal entropy
//! MI      = H(Ŷ) − H(Ŷ|X)
//! HD      = red_{j≠a} (1/N) Σ_i d(p_a,i , p_j,i)       anchor a, d ∈ {CE, KL}
//! composite = (1/M) Σ_m −MI(p_m) + λ·HD
//! ```
//!
//! The CE and KL forms of the composite differ exactly by
//! `λ(M−1)·H(Ŷ_a|X)` under the summed reduction — the extra term is an
//! additional confidence pressure on the anchor; [`ce_kl_identity_residual`]
//! measures how far a computation strays from that identity (machine
//! precision, by construction).
//!
//! Gradients flow through *both* arguments of `d` (no stop-gradient on the
//! anchor) and through both entropy terms of MI.

use serde::{Deserialize, Serialize};

use crate::diffnet::{ParamStore, ProbBatch};
use crate::error::{Error, Result};
use crate::mat::Mat;

/// Clamp added to every logarithm argument.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    CrossEntropy,
    Kl,
}

impl DivergenceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DivergenceKind::CrossEntropy => "cross_entropy",
            DivergenceKind::Kl => "kl",
        }
    }
}

impl std::fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" => Ok(DivergenceKind::CrossEntropy),
            "kl" => Ok(DivergenceKind::Kl),
            other => Err(Error::config(format!(
                "unknown divergence {other:?}; expected cross_entropy (ce) or kl"
            ))),
        }
    }
}

/// How the M−1 anchor↔other disparities are reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

impl Reduction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            other => Err(Error::config(format!(
                "unknown reduction {other:?}; expected mean or sum"
            ))),
        }
    }
}

/// The adaptation objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// (1/M)·Σ −MI + λ·HD — the headline composite.
    Hdmi,
    /// (1/M)·Σ −MI, no disparity term.
    MiEnsemble,
    /// MI maximization with a single hypothesis (M must be 1).
    MiSingle,
    /// total = HD alone.
    HdOnly,
    /// (1/M)·Σ H(Ŷ|X) + λ·HD — MI with the marginal term removed.
    CondEntropyHd,
    /// (1/M)·Σ −MI + λ·Σw².
    MiL2,
    /// (1/M)·Σ −MI + λ·‖w−w_src‖².
    MiL2Source,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 7] = [
        ObjectiveKind::Hdmi,
        ObjectiveKind::MiEnsemble,
        ObjectiveKind::MiSingle,
        ObjectiveKind::HdOnly,
        ObjectiveKind::CondEntropyHd,
        ObjectiveKind::MiL2,
        ObjectiveKind::MiL2Source,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectiveKind::Hdmi => "hdmi",
            ObjectiveKind::MiEnsemble => "mi_ensemble",
            ObjectiveKind::MiSingle => "mi_single",
            ObjectiveKind::HdOnly => "hd_only",
            ObjectiveKind::CondEntropyHd => "cond_entropy_hd",
            ObjectiveKind::MiL2 => "mi_l2",
            ObjectiveKind::MiL2Source => "mi_l2_source",
        }
    }

    /// Whether the objective includes the λ-weighted disparity term.
    pub fn uses_hd(&self) -> bool {
        matches!(
            self,
            ObjectiveKind::Hdmi | ObjectiveKind::HdOnly | ObjectiveKind::CondEntropyHd
        )
    }

    /// Whether the objective includes a λ-weighted parameter penalty.
    pub fn l2_mode(&self) -> Option<L2Mode> {
        match self {
            ObjectiveKind::MiL2 => Some(L2Mode::L2),
            ObjectiveKind::MiL2Source => Some(L2Mode::L2Source),
            _ => None,
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveKind::ALL
            .iter()
            .find(|k| k.as_str() == s)
            .copied()
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown objective {s:?}; expected one of {}",
                    ObjectiveKind::ALL.map(|k| k.as_str()).join(", ")
                ))
            })
    }
}

/// The signed pieces a logged loss decomposes into. Fields the selected
/// objective does not use are 0, so `total` is always the exact signed
/// combination of the live components:
///
/// ```text
/// total = −marginal_entropy + mean(conditional_entropy) + λ·hd + λ·reg
/// ```
///
/// (`hd_only` is the exception: total = hd, unweighted.)
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Hypothesis-mean marginal entropy H(Ŷ), nats; 0 if unused.
    pub marginal_entropy: f64,
    /// Per-hypothesis conditional entropies H(Ŷ|X), nats; empty if unused.
    pub conditional_entropy: Vec<f64>,
    /// Disparity term value; 0 if unused.
    pub hd: f64,
    /// Parameter-penalty value; 0 if unused.
    pub reg: f64,
    pub lambda: f64,
}

fn require_nonempty(p: &ProbBatch, what: &str) -> Result<()> {
    if p.rows() == 0 {
        return Err(Error::domain(format!("{what}: empty batch")));
    }
    if p.num_classes() == 0 {
        return Err(Error::domain(format!("{what}: zero classes")));
    }
    Ok(())
}

fn require_aligned(ps: &[ProbBatch], what: &str) -> Result<()> {
    if ps.is_empty() {
        return Err(Error::config(format!("{what}: no hypotheses")));
    }
    require_nonempty(&ps[0], what)?;
    let shape = (ps[0].rows(), ps[0].num_classes());
    for (m, p) in ps.iter().enumerate() {
        if (p.rows(), p.num_classes()) != shape {
            return Err(Error::config(format!(
                "{what}: hypothesis {m} has shape {:?}, expected {:?}",
                (p.rows(), p.num_classes()),
                shape
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Entropies and mutual information
// ---------------------------------------------------------------------------

/// Mean per-row entropy `(1/N)·Σ_i Σ_k −p_ik·ln(p_ik+ε)`, nats.
pub fn conditional_entropy(p: &ProbBatch) -> Result<f64> {
    require_nonempty(p, "conditional_entropy")?;
    let n = p.rows() as f64;
    let mut acc = 0.0;
    for row in p.mat().iter_rows() {
        for &v in row {
            acc -= v * (v + LOG_EPS).ln();
        }
    }
    Ok(acc / n)
}

/// Value plus gradient d/dp (N×K matrix).
pub fn conditional_entropy_grad(p: &ProbBatch) -> Result<(f64, Mat)> {
    let h = conditional_entropy(p)?;
    let n = p.rows() as f64;
    let mut grad = p.mat().clone();
    for g in grad.data_mut() {
        let v = *g;
        *g = -((v + LOG_EPS).ln() + v / (v + LOG_EPS)) / n;
    }
    Ok((h, grad))
}

/// Column-mean distribution of a batch.
pub fn column_means(p: &ProbBatch) -> Vec<f64> {
    let n = p.rows() as f64;
    let mut q = vec![0.0; p.num_classes()];
    for row in p.mat().iter_rows() {
        for (qk, &v) in q.iter_mut().zip(row) {
            *qk += v;
        }
    }
    for qk in &mut q {
        *qk /= n;
    }
    q
}

/// Entropy of the column-mean distribution, nats.
pub fn marginal_entropy(p: &ProbBatch) -> Result<f64> {
    require_nonempty(p, "marginal_entropy")?;
    let q = column_means(p);
    Ok(q.iter().map(|&v| -v * (v + LOG_EPS).ln()).sum())
}

/// Value plus gradient d/dp. The gradient is constant down each column:
/// `∂H/∂p_ik = −(ln(q_k+ε) + q_k/(q_k+ε))/N`.
pub fn marginal_entropy_grad(p: &ProbBatch) -> Result<(f64, Mat)> {
    require_nonempty(p, "marginal_entropy")?;
    let n = p.rows() as f64;
    let q = column_means(p);
    let h = q.iter().map(|&v| -v * (v + LOG_EPS).ln()).sum();
    let col: Vec<f64> = q
        .iter()
        .map(|&v| -((v + LOG_EPS).ln() + v / (v + LOG_EPS)) / n)
        .collect();
    let mut grad = Mat::zeros(p.rows(), p.num_classes());
    for row in grad.data_mut().chunks_exact_mut(col.len()) {
        row.copy_from_slice(&col);
    }
    Ok((h, grad))
}

/// `MI = H(Ŷ) − H(Ŷ|X)` on one batch, nats.
pub fn mutual_information(p: &ProbBatch) -> Result<f64> {
    Ok(marginal_entropy(p)? - conditional_entropy(p)?)
}

/// MI value plus the per-hypothesis triple (mi, marginal, conditional) and
/// gradient d(MI)/dp.
pub fn mutual_information_grad(p: &ProbBatch) -> Result<(f64, f64, f64, Mat)> {
    let (hm, gm) = marginal_entropy_grad(p)?;
    let (hc, gc) = conditional_entropy_grad(p)?;
    let mut grad = gm;
    for (a, b) in grad.data_mut().iter_mut().zip(gc.data()) {
        *a -= b;
    }
    Ok((hm - hc, hm, hc, grad))
}

// ---------------------------------------------------------------------------
// Hypothesis disparity
// ---------------------------------------------------------------------------

fn reduction_scale(m: usize, reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Mean => 1.0 / (m - 1) as f64,
        Reduction::Sum => 1.0,
    }
}

/// Divergence between the anchor hypothesis and every other one, batch-mean
/// per pair, reduced over the M−1 pairs. `M = 1` yields 0.
pub fn hypothesis_disparity(
    ps: &[ProbBatch],
    anchor: usize,
    kind: DivergenceKind,
    reduction: Reduction,
) -> Result<f64> {
    require_aligned(ps, "hypothesis_disparity")?;
    let m = ps.len();
    if anchor >= m {
        return Err(Error::config(format!(
            "anchor index {anchor} out of range for M={m}"
        )));
    }
    if m == 1 {
        return Ok(0.0);
    }
    let n = ps[0].rows() as f64;
    let a = &ps[anchor];
    let scale = reduction_scale(m, reduction);
    let mut total = 0.0;
    for (j, other) in ps.iter().enumerate() {
        if j == anchor {
            continue;
        }
        let mut pair = 0.0;
        for (prow, qrow) in a.mat().iter_rows().zip(other.mat().iter_rows()) {
            for (&pv, &qv) in prow.iter().zip(qrow) {
                pair += match kind {
                    DivergenceKind::CrossEntropy => -pv * (qv + LOG_EPS).ln(),
                    DivergenceKind::Kl => pv * ((pv + LOG_EPS).ln() - (qv + LOG_EPS).ln()),
                };
            }
        }
        total += pair / n;
    }
    Ok(total * scale)
}

/// Disparity value plus gradients d(HD)/dp_m for every hypothesis. Both the
/// anchor branch and each non-anchor branch receive gradient.
pub fn hypothesis_disparity_grad(
    ps: &[ProbBatch],
    anchor: usize,
    kind: DivergenceKind,
    reduction: Reduction,
) -> Result<(f64, Vec<Mat>)> {
    let value = hypothesis_disparity(ps, anchor, kind, reduction)?;
    let m = ps.len();
    let (n_rows, k) = (ps[0].rows(), ps[0].num_classes());
    let mut grads: Vec<Mat> = (0..m).map(|_| Mat::zeros(n_rows, k)).collect();
    if m == 1 {
        return Ok((value, grads));
    }
    let n = n_rows as f64;
    let scale = reduction_scale(m, reduction) / n;
    let a = ps[anchor].mat();
    for j in 0..m {
        if j == anchor {
            continue;
        }
        let q = ps[j].mat();
        // Gradient into the non-anchor branch: ∂d/∂q_k = −p_k/(q_k+ε).
        {
            let gq = grads[j].data_mut();
            for (g, (&pv, &qv)) in gq.iter_mut().zip(a.data().iter().zip(q.data())) {
                *g -= scale * (pv / (qv + LOG_EPS));
            }
        }
        // Gradient into the anchor branch.
        {
            let ga = grads[anchor].data_mut();
            match kind {
                DivergenceKind::CrossEntropy => {
                    // ∂(−Σ p ln(q+ε))/∂p_k = −ln(q_k+ε)
                    for (g, &qv) in ga.iter_mut().zip(q.data()) {
                        *g -= scale * (qv + LOG_EPS).ln();
                    }
                }
                DivergenceKind::Kl => {
                    // ∂(Σ p(ln(p+ε)−ln(q+ε)))/∂p_k
                    //   = ln(p_k+ε) − ln(q_k+ε) + p_k/(p_k+ε)
                    // The ratio is scaled as its own product, mirroring the
                    // non-anchor branch, so that when p == q the two branch
                    // contributions are exact negations and the disparity
                    // gradient cancels bitwise.
                    for (g, (&pv, &qv)) in ga.iter_mut().zip(a.data().iter().zip(q.data())) {
                        *g += scale * ((pv + LOG_EPS).ln() - (qv + LOG_EPS).ln())
                            + scale * (pv / (pv + LOG_EPS));
                    }
                }
            }
        }
    }
    Ok((value, grads))
}

// ---------------------------------------------------------------------------
// Composite objectives
// ---------------------------------------------------------------------------

/// Evaluate the selected probability-space objective. `reg` is the value of
/// the parameter penalty for the `mi_l2` / `mi_l2_source` kinds (the caller
/// computes it from the stores it considers trainable); ignored otherwise.
pub fn objective_loss(
    kind: ObjectiveKind,
    ps: &[ProbBatch],
    anchor: usize,
    lambda: f64,
    divergence: DivergenceKind,
    reduction: Reduction,
    reg: f64,
) -> Result<LossBreakdown> {
    objective_eval(kind, ps, anchor, lambda, divergence, reduction, reg, false)
        .map(|(b, _)| b)
}

/// Like [`objective_loss`], also returning d(total)/dp_m for every
/// hypothesis (probability-space only; parameter-penalty gradients are the
/// caller's, see [`add_l2_grad`] / [`add_l2_source_grad`]).
pub fn objective_grad(
    kind: ObjectiveKind,
    ps: &[ProbBatch],
    anchor: usize,
    lambda: f64,
    divergence: DivergenceKind,
    reduction: Reduction,
    reg: f64,
) -> Result<(LossBreakdown, Vec<Mat>)> {
    let (b, g) = objective_eval(kind, ps, anchor, lambda, divergence, reduction, reg, true)?;
    Ok((b, g.expect("gradients requested")))
}

#[allow(clippy::too_many_arguments)]
fn objective_eval(
    kind: ObjectiveKind,
    ps: &[ProbBatch],
    anchor: usize,
    lambda: f64,
    divergence: DivergenceKind,
    reduction: Reduction,
    reg: f64,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<Mat>>)> {
    require_aligned(ps, "objective")?;
    if lambda < 0.0 {
        return Err(Error::config(format!("lambda must be ≥ 0, got {lambda}")));
    }
    let m = ps.len();
    if kind == ObjectiveKind::MiSingle && m != 1 {
        return Err(Error::config(format!(
            "mi_single requires exactly one hypothesis, got M={m}"
        )));
    }
    if anchor >= m {
        return Err(Error::config(format!(
            "anchor index {anchor} out of range for M={m}"
        )));
    }
    let shape = (ps[0].rows(), ps[0].num_classes());
    let mfl = m as f64;

    let mut grads: Option<Vec<Mat>> =
        want_grad.then(|| (0..m).map(|_| Mat::zeros(shape.0, shape.1)).collect());

    let mut marginal_sum = 0.0;
    let mut conditional = Vec::new();
    let mut total = 0.0;

    // MI part: (1/M)·Σ −MI  (hdmi, mi_ensemble, mi_single, mi_l2*), or the
    // conditional part alone: (1/M)·Σ H(Ŷ|X)  (cond_entropy_hd).
    match kind {
        ObjectiveKind::Hdmi
        | ObjectiveKind::MiEnsemble
        | ObjectiveKind::MiSingle
        | ObjectiveKind::MiL2
        | ObjectiveKind::MiL2Source => {
            for (i, p) in ps.iter().enumerate() {
                if let Some(gs) = &mut grads {
                    let (mi, hm, hc, gmi) = mutual_information_grad(p)?;
                    total += -mi / mfl;
                    marginal_sum += hm;
                    conditional.push(hc);
                    let g = &mut gs[i];
                    for (gd, s) in g.data_mut().iter_mut().zip(gmi.data()) {
                        *gd -= s / mfl;
                    }
                } else {
                    let hm = marginal_entropy(p)?;
                    let hc = conditional_entropy(p)?;
                    total += -(hm - hc) / mfl;
                    marginal_sum += hm;
                    conditional.push(hc);
                }
            }
        }
        ObjectiveKind::CondEntropyHd => {
            for (i, p) in ps.iter().enumerate() {
                if let Some(gs) = &mut grads {
                    let (hc, gc) = conditional_entropy_grad(p)?;
                    total += hc / mfl;
                    conditional.push(hc);
                    let g = &mut gs[i];
                    for (gd, s) in g.data_mut().iter_mut().zip(gc.data()) {
                        *gd += s / mfl;
                    }
                } else {
                    let hc = conditional_entropy(p)?;
                    total += hc / mfl;
                    conditional.push(hc);
                }
            }
        }
        ObjectiveKind::HdOnly => {}
    }

    // HD part. Skipped entirely when λ == 0 so the λ=0 composite is the MI
    // objective *bitwise* (same floats, same code path).
    let mut hd = 0.0;
    match kind {
        ObjectiveKind::Hdmi | ObjectiveKind::CondEntropyHd => {
            if lambda != 0.0 {
                if let Some(gs) = &mut grads {
                    let (v, hg) = hypothesis_disparity_grad(ps, anchor, divergence, reduction)?;
                    hd = v;
                    total += lambda * hd;
                    for (g, h) in gs.iter_mut().zip(hg) {
                        for (gd, s) in g.data_mut().iter_mut().zip(h.data()) {
                            *gd += lambda * s;
                        }
                    }
                } else {
                    hd = hypothesis_disparity(ps, anchor, divergence, reduction)?;
                    total += lambda * hd;
                }
            }
        }
        ObjectiveKind::HdOnly => {
            if let Some(gs) = &mut grads {
                let (v, hg) = hypothesis_disparity_grad(ps, anchor, divergence, reduction)?;
                hd = v;
                total += hd;
                for (g, h) in gs.iter_mut().zip(hg) {
                    for (gd, s) in g.data_mut().iter_mut().zip(h.data()) {
                        *gd += s;
                    }
                }
            } else {
                hd = hypothesis_disparity(ps, anchor, divergence, reduction)?;
                total += hd;
            }
        }
        _ => {}
    }

    // Parameter penalty (value supplied by the caller).
    let mut reg_out = 0.0;
    if kind.l2_mode().is_some() {
        reg_out = reg;
        total += lambda * reg;
    }

    Ok((
        LossBreakdown {
            total,
            marginal_entropy: if conditional.is_empty() || kind == ObjectiveKind::CondEntropyHd {
                0.0
            } else {
                marginal_sum / mfl
            },
            conditional_entropy: conditional,
            hd,
            reg: reg_out,
            lambda,
        },
        grads,
    ))
}

/// The headline composite: `(1/M)·Σ −MI + λ·HD`.
pub fn hdmi_loss(
    ps: &[ProbBatch],
    anchor: usize,
    lambda: f64,
    kind: DivergenceKind,
    reduction: Reduction,
) -> Result<LossBreakdown> {
    objective_loss(ObjectiveKind::Hdmi, ps, anchor, lambda, kind, reduction, 0.0)
}

/// The marginal-free ablation: `(1/M)·Σ H(Ŷ|X) + λ·HD`.
pub fn conditional_entropy_loss(
    ps: &[ProbBatch],
    lambda: f64,
    anchor: usize,
    kind: DivergenceKind,
    reduction: Reduction,
) -> Result<LossBreakdown> {
    objective_loss(
        ObjectiveKind::CondEntropyHd,
        ps,
        anchor,
        lambda,
        kind,
        reduction,
        0.0,
    )
}

/// `|L_CE − L_KL − λ(M−1)·H(Ŷ_anchor|X)|` under the summed reduction; the
/// identity holds to machine precision for any inputs.
pub fn ce_kl_identity_residual(ps: &[ProbBatch], anchor: usize, lambda: f64) -> Result<f64> {
    require_aligned(ps, "ce_kl_identity_residual")?;
    if ps.len() < 2 {
        return Err(Error::config(
            "ce_kl_identity_residual: identity is stated for M ≥ 2",
        ));
    }
    let l_ce = hdmi_loss(ps, anchor, lambda, DivergenceKind::CrossEntropy, Reduction::Sum)?;
    let l_kl = hdmi_loss(ps, anchor, lambda, DivergenceKind::Kl, Reduction::Sum)?;
    let h_anchor = conditional_entropy(&ps[anchor])?;
    let m = ps.len() as f64;
    Ok((l_ce.total - l_kl.total - lambda * (m - 1.0) * h_anchor).abs())
}

// ---------------------------------------------------------------------------
// Parameter penalties and the supervised loss
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Mode {
    L2,
    L2Source,
}

/// Σ w² over one store (`l2`), or Σ (w − w_src)² against a flat snapshot of
/// the same store (`l2_source`).
pub fn l2_regularizers(store: &ParamStore, snapshot: Option<&[f64]>, mode: L2Mode) -> Result<f64> {
    match mode {
        L2Mode::L2 => Ok(store
            .entries()
            .iter()
            .flat_map(|e| e.values.iter())
            .map(|&w| w * w)
            .sum()),
        L2Mode::L2Source => {
            let snap = snapshot
                .ok_or_else(|| Error::config("l2_source regularizer requires a source snapshot"))?;
            if snap.len() != store.num_values() {
                return Err(Error::config(format!(
                    "snapshot has {} values, store has {}",
                    snap.len(),
                    store.num_values()
                )));
            }
            let mut acc = 0.0;
            let mut it = snap.iter();
            for e in store.entries() {
                for &w in &e.values {
                    let s = it.next().expect("length checked");
                    let d = w - s;
                    acc += d * d;
                }
            }
            Ok(acc)
        }
    }
}

/// Accumulate `weight·2w` into the store's gradients (the λ-scaled gradient
/// of Σw²).
pub fn add_l2_grad(store: &mut ParamStore, weight: f64) {
    for e in store.entries_mut() {
        for (g, &w) in e.grads.iter_mut().zip(&e.values) {
            *g += weight * 2.0 * w;
        }
    }
}

/// Accumulate `weight·2(w − w_src)` into the store's gradients.
pub fn add_l2_source_grad(store: &mut ParamStore, snapshot: &[f64], weight: f64) -> Result<()> {
    if snapshot.len() != store.num_values() {
        return Err(Error::config(format!(
            "snapshot has {} values, store has {}",
            snapshot.len(),
            store.num_values()
        )));
    }
    let mut it = snapshot.iter();
    for e in store.entries_mut() {
        for (g, &w) in e.grads.iter_mut().zip(&e.values) {
            let s = it.next().expect("length checked");
            *g += weight * 2.0 * (w - s);
        }
    }
    Ok(())
}

/// Supervised cross-entropy averaged over hypotheses and samples:
/// `(1/(M·N))·Σ_m Σ_i −ln(p_m,i,y_i + ε)`.
pub fn source_ce_loss(ps: &[ProbBatch], labels: &[usize]) -> Result<f64> {
    require_aligned(ps, "source_ce_loss")?;
    let (n, k) = (ps[0].rows(), ps[0].num_classes());
    if labels.len() != n {
        return Err(Error::config(format!(
            "source_ce_loss: {} labels for {} rows",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::domain(format!(
            "label {bad} out of range for K={k}"
        )));
    }
    let denom = (ps.len() * n) as f64;
    let mut acc = 0.0;
    for p in ps {
        for (row, &y) in p.mat().iter_rows().zip(labels) {
            acc -= (row[y] + LOG_EPS).ln();
        }
    }
    Ok(acc / denom)
}

/// Value plus d/dp_m for every hypothesis:
/// `∂/∂p_ik = −1[k=y_i] / (M·N·(p_iy+ε))`.
pub fn source_ce_grad(ps: &[ProbBatch], labels: &[usize]) -> Result<(f64, Vec<Mat>)> {
    let value = source_ce_loss(ps, labels)?;
    let (n, k) = (ps[0].rows(), ps[0].num_classes());
    let denom = (ps.len() * n) as f64;
    let grads = ps
        .iter()
        .map(|p| {
            let mut g = Mat::zeros(n, k);
            for (i, &y) in labels.iter().enumerate() {
                let pv = p.row(i)[y];
                g.set(i, y, -1.0 / (denom * (pv + LOG_EPS)));
            }
            g
        })
        .collect();
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use rand::Rng;

    /// Random row-stochastic batch via softmax of uniform logits.
    fn random_probs(n: usize, k: usize, seed: u64) -> ProbBatch {
        let mut rng = seeds::rng_from(seed);
        let logits = Mat::from_vec(
            n,
            k,
            (0..n * k).map(|_| 6.0 * rng.random::<f64>() - 3.0).collect(),
        );
        crate::diffnet::softmax(&logits)
    }

    /// Central finite difference along probability entries, checked against
    /// an analytic gradient. The perturbed matrices sit slightly off the
    /// simplex on purpose: the gradient formulas are plain partial
    /// derivatives, valid off the simplex too.
    fn check_prob_grad(
        value_of: impl Fn(&ProbBatch) -> f64,
        analytic: &Mat,
        p: &ProbBatch,
        tol: f64,
    ) {
        let eps = 1e-6;
        for i in 0..p.rows() {
            for j in 0..p.num_classes() {
                let mut hi = p.mat().clone();
                hi.set(i, j, hi.get(i, j) + eps);
                let mut lo = p.mat().clone();
                lo.set(i, j, lo.get(i, j) - eps);
                let f_hi = value_of(&probs_unchecked(hi));
                let f_lo = value_of(&probs_unchecked(lo));
                let fd = (f_hi - f_lo) / (2.0 * eps);
                let an = analytic.get(i, j);
                let denom = fd.abs().max(an.abs()).max(1e-3);
                assert!(
                    ((fd - an) / denom).abs() < tol,
                    "grad mismatch at ({i},{j}): fd={fd}, analytic={an}"
                );
            }
        }
    }

    fn probs_unchecked(mat: Mat) -> ProbBatch {
        ProbBatch::from_mat_unchecked(mat)
    }

    #[test]
    fn conditional_entropy_cases() {
        let onehot = ProbBatch::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let h = conditional_entropy(&onehot).unwrap();
        assert!(h.abs() < 1e-10);

        let uniform = ProbBatch::from_rows(&[&[0.25; 4], &[0.25; 4]]);
        let h = conditional_entropy(&uniform).unwrap();
        assert!((h - 4.0_f64.ln()).abs() < 1e-9);

        // Frozen oracle: rows (0.9,0.1), (0.2,0.8) → 0.4127426984648181 nats.
        let p = ProbBatch::from_rows(&[&[0.9, 0.1], &[0.2, 0.8]]);
        let h = conditional_entropy(&p).unwrap();
        assert!((h - 0.4127426984648181).abs() < 1e-6, "got {h}");
    }

    #[test]
    fn marginal_entropy_cases() {
        let same = ProbBatch::from_rows(&[&[0.3, 0.7], &[0.3, 0.7]]);
        let h = marginal_entropy(&same).unwrap();
        let expect = -(0.3_f64 * 0.3_f64.ln() + 0.7 * 0.7_f64.ln());
        assert!((h - expect).abs() < 1e-9);

        let onehot = ProbBatch::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let h = marginal_entropy(&onehot).unwrap();
        assert!((h - 2.0_f64.ln()).abs() < 1e-9);

        // Frozen oracle: mean (0.55,0.45) → 0.688138813713588 nats.
        let p = ProbBatch::from_rows(&[&[0.9, 0.1], &[0.2, 0.8]]);
        let h = marginal_entropy(&p).unwrap();
        assert!((h - 0.688138813713588).abs() < 1e-6, "got {h}");
    }

    #[test]
    fn mutual_information_cases() {
        let same = ProbBatch::from_rows(&[&[0.3, 0.7], &[0.3, 0.7]]);
        assert!(mutual_information(&same).unwrap().abs() < 1e-10);

        let onehot = ProbBatch::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let mi = mutual_information(&onehot).unwrap();
        assert!((mi - 2.0_f64.ln()).abs() < 1e-9);

        // Frozen oracle: 0.688138813713588 − 0.4127426984648181.
        let p = ProbBatch::from_rows(&[&[0.9, 0.1], &[0.2, 0.8]]);
        let mi = mutual_information(&p).unwrap();
        assert!((mi - 0.2753961152487699).abs() < 1e-6, "got {mi}");
    }

    #[test]
    fn empty_batch_is_a_domain_error() {
        let empty = probs_unchecked(Mat::zeros(0, 3));
        assert!(matches!(
            conditional_entropy(&empty),
            Err(Error::Domain(_))
        ));
        assert!(matches!(marginal_entropy(&empty), Err(Error::Domain(_))));
    }

    #[test]
    fn mi_bounds_on_random_batches() {
        for seed in 0..200 {
            let k = 2 + (seed as usize % 4);
            let p = random_probs(1 + (seed as usize % 17), k, 1000 + seed);
            let mi = mutual_information(&p).unwrap();
            let hm = marginal_entropy(&p).unwrap();
            assert!(mi >= -1e-9, "MI={mi} at seed {seed}");
            assert!(mi <= (k as f64).ln() + 1e-9);
            assert!(mi <= hm + 1e-9);
            assert!(hm <= (k as f64).ln() + 1e-9);
        }
    }

    #[test]
    fn disparity_cases() {
        let p = random_probs(6, 3, 1);
        let same = vec![p.clone(), p.clone(), p.clone()];
        let hd = hypothesis_disparity(&same, 0, DivergenceKind::Kl, Reduction::Mean).unwrap();
        assert!(hd.abs() < 1e-10);

        // CE against itself is the conditional entropy.
        let hd = hypothesis_disparity(&same, 1, DivergenceKind::CrossEntropy, Reduction::Mean)
            .unwrap();
        let h = conditional_entropy(&p).unwrap();
        assert!((hd - h).abs() < 1e-10);

        // Frozen oracle: anchor (0.9,0.1) vs (0.2,0.8), CE
        //   = −0.9·ln0.2 − 0.1·ln0.8 = 1.4708084763221112.
        let a = ProbBatch::from_rows(&[&[0.9, 0.1]]);
        let b = ProbBatch::from_rows(&[&[0.2, 0.8]]);
        let hd = hypothesis_disparity(
            &[a, b],
            0,
            DivergenceKind::CrossEntropy,
            Reduction::Mean,
        )
        .unwrap();
        assert!((hd - 1.4708084763221112).abs() < 1e-6, "got {hd}");
    }

    #[test]
    fn disparity_reduction_scaling_is_exact() {
        let ps: Vec<ProbBatch> = (0..4).map(|i| random_probs(8, 3, 40 + i)).collect();
        for kind in [DivergenceKind::CrossEntropy, DivergenceKind::Kl] {
            let mean = hypothesis_disparity(&ps, 2, kind, Reduction::Mean).unwrap();
            let sum = hypothesis_disparity(&ps, 2, kind, Reduction::Sum).unwrap();
            assert_eq!(sum.to_bits(), (mean * 3.0).to_bits());
        }
    }

    #[test]
    fn disparity_anchor_out_of_range() {
        let ps = vec![random_probs(4, 2, 7), random_probs(4, 2, 8)];
        assert!(matches!(
            hypothesis_disparity(&ps, 2, DivergenceKind::Kl, Reduction::Mean),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ce_kl_decomposition() {
        // CE(p,q) = H(p) + KL(p‖q) within 1e-10 under the shared ε clamp.
        for seed in 0..50 {
            let ps = vec![random_probs(5, 4, 100 + seed), random_probs(5, 4, 200 + seed)];
            let ce = hypothesis_disparity(&ps, 0, DivergenceKind::CrossEntropy, Reduction::Sum)
                .unwrap();
            let kl = hypothesis_disparity(&ps, 0, DivergenceKind::Kl, Reduction::Sum).unwrap();
            let h = conditional_entropy(&ps[0]).unwrap();
            assert!((ce - (h + kl)).abs() < 1e-10, "seed {seed}");
        }
    }

    #[test]
    fn hdmi_total_matches_component_recomputation() {
        let ps: Vec<ProbBatch> = (0..3).map(|i| random_probs(10, 3, 300 + i)).collect();
        let b = hdmi_loss(&ps, 1, 0.5, DivergenceKind::CrossEntropy, Reduction::Mean).unwrap();
        let mut expect = 0.0;
        for p in &ps {
            expect += -mutual_information(p).unwrap() / 3.0;
        }
        expect += 0.5
            * hypothesis_disparity(&ps, 1, DivergenceKind::CrossEntropy, Reduction::Mean)
                .unwrap();
        assert!((b.total - expect).abs() < 1e-12);
        // Breakdown recombination.
        let mean_cond: f64 =
            b.conditional_entropy.iter().sum::<f64>() / b.conditional_entropy.len() as f64;
        assert!((b.total - (-b.marginal_entropy + mean_cond + b.lambda * b.hd)).abs() < 1e-12);
    }

    #[test]
    fn hdmi_identical_hypotheses_kl_reduces_to_mi() {
        let p = random_probs(7, 3, 11);
        let ps = vec![p.clone(), p.clone()];
        let b = hdmi_loss(&ps, 0, 0.7, DivergenceKind::Kl, Reduction::Mean).unwrap();
        let mi = mutual_information(&p).unwrap();
        assert!((b.total - -mi).abs() < 1e-9);
    }

    #[test]
    fn lambda_zero_is_bitwise_mi_ensemble() {
        let ps: Vec<ProbBatch> = (0..2).map(|i| random_probs(9, 4, 500 + i)).collect();
        let hdmi = objective_loss(
            ObjectiveKind::Hdmi,
            &ps,
            0,
            0.0,
            DivergenceKind::CrossEntropy,
            Reduction::Mean,
            0.0,
        )
        .unwrap();
        let mi = objective_loss(
            ObjectiveKind::MiEnsemble,
            &ps,
            0,
            0.0,
            DivergenceKind::CrossEntropy,
            Reduction::Mean,
            0.0,
        )
        .unwrap();
        assert_eq!(hdmi.total.to_bits(), mi.total.to_bits());
        assert_eq!(hdmi, mi);
    }

    #[test]
    fn identity_residual_is_tiny() {
        let mut rng = seeds::rng_from(77);
        for case in 0..200 {
            let m = 2 + case % 3;
            let lambda: f64 = rng.random();
            let n = 1 + case % 9;
            let ps: Vec<ProbBatch> = (0..m)
                .map(|i| random_probs(n, 2 + case % 3, 900 + 10 * case as u64 + i as u64))
                .collect();
            let anchor = case % m;
            let r = ce_kl_identity_residual(&ps, anchor, lambda).unwrap();
            assert!(r < 1e-9, "case {case}: residual {r}");
        }
    }

    #[test]
    fn hd_only_and_cond_entropy_hd_totals() {
        let ps: Vec<ProbBatch> = (0..3).map(|i| random_probs(6, 3, 600 + i)).collect();
        let hd = hypothesis_disparity(&ps, 0, DivergenceKind::Kl, Reduction::Mean).unwrap();
        let b = objective_loss(
            ObjectiveKind::HdOnly,
            &ps,
            0,
            0.5,
            DivergenceKind::Kl,
            Reduction::Mean,
            0.0,
        )
        .unwrap();
        assert_eq!(b.total.to_bits(), hd.to_bits());
        assert_eq!(b.marginal_entropy, 0.0);

        let b = conditional_entropy_loss(&ps, 0.25, 0, DivergenceKind::Kl, Reduction::Mean)
            .unwrap();
        let mean_cond: f64 = ps
            .iter()
            .map(|p| conditional_entropy(p).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((b.total - (mean_cond + 0.25 * hd)).abs() < 1e-12);
    }

    #[test]
    fn l2_regularizer_cases() {
        let mut store = ParamStore::new();
        store.add("w", vec![3.0, 4.0], 1.0).unwrap();
        assert_eq!(
            l2_regularizers(&store, None, L2Mode::L2).unwrap(),
            25.0
        );
        let snap = store.values_flat();
        assert_eq!(
            l2_regularizers(&store, Some(&snap), L2Mode::L2Source).unwrap(),
            0.0
        );
        assert!(matches!(
            l2_regularizers(&store, None, L2Mode::L2Source),
            Err(Error::Config(_))
        ));
        let shifted = vec![2.0, 6.0];
        assert_eq!(
            l2_regularizers(&store, Some(&shifted), L2Mode::L2Source).unwrap(),
            1.0 + 4.0
        );
    }

    #[test]
    fn l2_grads_accumulate() {
        let mut store = ParamStore::new();
        store.add("w", vec![3.0, -4.0], 1.0).unwrap();
        add_l2_grad(&mut store, 0.5);
        assert_eq!(store.get("w").unwrap().grads, vec![3.0, -4.0]);
        let snap = vec![1.0, 1.0];
        add_l2_source_grad(&mut store, &snap, 1.0).unwrap();
        // += 2(w−s): 2·2=4, 2·(−5)=−10
        assert_eq!(store.get("w").unwrap().grads, vec![7.0, -14.0]);
    }

    #[test]
    fn source_ce_cases() {
        let perfect = vec![ProbBatch::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]])];
        let l = source_ce_loss(&perfect, &[0, 1]).unwrap();
        assert!(l.abs() < 1e-10);

        let uniform = vec![ProbBatch::from_rows(&[&[0.25; 4]])];
        let l = source_ce_loss(&uniform, &[2]).unwrap();
        assert!((l - 4.0_f64.ln()).abs() < 1e-9);

        // M=2 equals per-hypothesis average.
        let a = random_probs(5, 3, 21);
        let b = random_probs(5, 3, 22);
        let labels = [0, 2, 1, 1, 0];
        let joint = source_ce_loss(&[a.clone(), b.clone()], &labels).unwrap();
        let la = source_ce_loss(&[a], &labels).unwrap();
        let lb = source_ce_loss(&[b], &labels).unwrap();
        assert!((joint - (la + lb) / 2.0).abs() < 1e-12);

        let bad = vec![ProbBatch::from_rows(&[&[0.5, 0.5]])];
        assert!(matches!(
            source_ce_loss(&bad, &[7]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn prob_space_gradients_match_finite_differences() {
        let p = random_probs(4, 3, 31);

        let (_, g) = conditional_entropy_grad(&p).unwrap();
        check_prob_grad(
            |q| conditional_entropy(q).unwrap(),
            &g,
            &p,
            1e-6,
        );

        let (_, g) = marginal_entropy_grad(&p).unwrap();
        check_prob_grad(|q| marginal_entropy(q).unwrap(), &g, &p, 1e-6);

        let (_, _, _, g) = mutual_information_grad(&p).unwrap();
        check_prob_grad(|q| mutual_information(q).unwrap(), &g, &p, 1e-5);
    }

    #[test]
    fn disparity_gradients_match_finite_differences_both_branches() {
        let ps: Vec<ProbBatch> = (0..3).map(|i| random_probs(4, 3, 700 + i)).collect();
        for kind in [DivergenceKind::CrossEntropy, DivergenceKind::Kl] {
            let (_, grads) =
                hypothesis_disparity_grad(&ps, 0, kind, Reduction::Mean).unwrap();
            for m in 0..3 {
                let others: Vec<ProbBatch> = ps.clone();
                check_prob_grad(
                    |q| {
                        let mut v = others.clone();
                        v[m] = q.clone();
                        hypothesis_disparity(&v, 0, kind, Reduction::Mean).unwrap()
                    },
                    &grads[m],
                    &ps[m],
                    1e-5,
                );
            }
        }
    }
}
