//! The two training loops and the end-to-end pipeline.
//!
//! [`train_source`] fits all M hypotheses jointly on labeled source data
//! by minimizing the mean per-hypothesis cross-entropy through the shared
//! extractor. [`adapt_target`] then adapts the extractor on *unlabeled*
//! target data by minimizing the configured objective, with classifiers
//! frozen by default. [`run_pipeline`] composes generation, both loops,
//! and the full analysis into one run directory.
//!
//! Determinism: every stochastic choice (batch order, dropout, anchor
//! draw) is derived from the phase seed with its own tag, so a run is a
//! pure function of its config. Held-out target labels enter only through
//! the explicit `eval_labels` argument, which feeds the run log and the
//! final report — never the optimization.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::analysis::{self, AnalysisReport};
use crate::diffnet::{sgd_step, SgdState};
use crate::error::{Error, Result};
use crate::hypotheses::{average_probs, ArchSpec, HypothesisSet, PredictMode, SourceSnapshot, Variant};
use crate::mat::Mat;
use crate::objectives::{
    l2_regularizers, add_l2_grad, add_l2_source_grad, objective_grad, source_ce_grad,
    DivergenceKind, LossBreakdown, ObjectiveKind, Reduction,
};
use crate::seeds;
use crate::shiftdata::{generate, BatchIter, Dataset, ShiftSpec};
use rand::Rng;

/// How the anchor hypothesis is selected at the start of adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// Uniform draw from `0..M`, derived from the adaptation seed — the
    /// same index for every objective under the same seed.
    SeededRandom,
    /// A caller-pinned index.
    Fixed(usize),
}

/// Hyperparameters of the supervised source phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub extractor_lr_multiplier: f64,
    /// Train-mode dropout during loss computation.
    pub train_dropout: bool,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            steps: 1000,
            batch_size: 64,
            lr: 1e-2,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            extractor_lr_multiplier: 1.0,
            train_dropout: true,
            eval_every: 25,
            seed: 0,
        }
    }
}

fn check_optimizer_fields(
    what: &str,
    batch_size: usize,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    extractor_lr_multiplier: f64,
    eval_every: usize,
) -> Result<()> {
    if batch_size < 1 {
        return Err(Error::config(format!("{what}: batch_size must be ≥ 1")));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::config(format!("{what}: lr must be finite and > 0, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::config(format!(
            "{what}: momentum must be in [0,1), got {momentum}"
        )));
    }
    if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(Error::config(format!(
            "{what}: weight_decay must be finite and ≥ 0, got {weight_decay}"
        )));
    }
    if !(extractor_lr_multiplier > 0.0 && extractor_lr_multiplier.is_finite()) {
        return Err(Error::config(format!(
            "{what}: extractor_lr_multiplier must be finite and > 0, got {extractor_lr_multiplier}"
        )));
    }
    if eval_every < 1 {
        return Err(Error::config(format!("{what}: eval_every must be ≥ 1")));
    }
    Ok(())
}

impl SourceConfig {
    /// `steps = 0` is allowed here (a no-op training run).
    pub fn validate(&self) -> Result<()> {
        check_optimizer_fields(
            "source config",
            self.batch_size,
            self.lr,
            self.momentum,
            self.weight_decay,
            self.extractor_lr_multiplier,
            self.eval_every,
        )
    }
}

/// Hyperparameters of the unsupervised target phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub objective: ObjectiveKind,
    pub lambda: f64,
    pub divergence: DivergenceKind,
    pub reduction: Reduction,
    pub anchor_policy: AnchorPolicy,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub extractor_lr_multiplier: f64,
    pub freeze_classifiers: bool,
    pub shared_extractor: bool,
    /// Train-mode dropout during loss computation (metrics always run in
    /// eval mode).
    pub train_dropout: bool,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            objective: ObjectiveKind::Hdmi,
            lambda: 0.5,
            divergence: DivergenceKind::CrossEntropy,
            reduction: Reduction::Mean,
            anchor_policy: AnchorPolicy::SeededRandom,
            steps: 1000,
            batch_size: 64,
            lr: 1e-2,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            // Desk-scale analog of the reduced-backbone-rate discipline: the
            // extractor fine-tunes slower than the base rate so adaptation
            // settles on its plateau instead of sliding past it. 1.0 recovers
            // a uniform rate.
            extractor_lr_multiplier: 0.58,
            freeze_classifiers: true,
            shared_extractor: true,
            // Loss forward passes run in eval mode by default: with nets this
            // small, dropout noise dominates the adaptation signal. The MC
            // variant needs `true` — its heads only differ through their
            // fixed masks, which apply in train mode.
            train_dropout: false,
            eval_every: 25,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::config("adapt config: steps must be ≥ 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!(
                "adapt config: lambda must be finite and ≥ 0, got {}",
                self.lambda
            )));
        }
        check_optimizer_fields(
            "adapt config",
            self.batch_size,
            self.lr,
            self.momentum,
            self.weight_decay,
            self.extractor_lr_multiplier,
            self.eval_every,
        )
    }
}

/// One evaluation point of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    /// 1-based step count at which the evaluation ran.
    pub step: usize,
    /// Loss breakdown of the step's training batch.
    pub loss: LossBreakdown,
    pub acc_anchor: f64,
    pub acc_ensemble: f64,
    /// Mean pairwise argmax-disagreement on the full evaluation set.
    pub disagreement: f64,
    /// Seconds since the loop started (diagnostic only; not serialized).
    pub wall_time_s: f64,
}

impl RunRecord {
    /// Mean mutual information implied by the breakdown:
    /// H(Ŷ) − mean H(Ŷ|X); 0 when the objective tracked neither term.
    pub fn mi(&self) -> f64 {
        if self.loss.conditional_entropy.is_empty() {
            return 0.0;
        }
        let mean_cond = self.loss.conditional_entropy.iter().sum::<f64>()
            / self.loss.conditional_entropy.len() as f64;
        self.loss.marginal_entropy - mean_cond
    }
}

/// All evaluation points of one run, in step order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<RunRecord>,
}

impl RunLog {
    /// Write `step,total,mi,hd,acc_anchor,acc_ensemble,disagreement`, one
    /// row per record. Wall time is deliberately excluded so the file is
    /// byte-deterministic.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,total,mi,hd,acc_anchor,acc_ensemble,disagreement\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.step,
                r.loss.total,
                r.mi(),
                r.loss.hd,
                r.acc_anchor,
                r.acc_ensemble,
                r.disagreement
            );
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Per-phase optimizer state: one velocity buffer per parameter store,
/// reset at phase start.
struct PhaseOptimizer {
    ext: Vec<SgdState>,
    clf: Vec<SgdState>,
}

impl PhaseOptimizer {
    fn new(set: &HypothesisSet) -> Self {
        PhaseOptimizer {
            ext: set.extractor_stores().iter().map(SgdState::new).collect(),
            clf: set.classifier_stores().iter().map(SgdState::new).collect(),
        }
    }
}

/// Step every trainable store; frozen classifier stores are skipped and
/// their gradient accumulators cleared instead.
fn step_stores(
    set: &mut HypothesisSet,
    opt: &mut PhaseOptimizer,
    lr: f64,
    momentum: f64,
    nesterov: bool,
    weight_decay: f64,
    freeze_classifiers: bool,
) {
    for (store, state) in set.extractor_stores_mut().iter_mut().zip(&mut opt.ext) {
        sgd_step(store, state, lr, momentum, nesterov, weight_decay);
    }
    for (store, state) in set.classifier_stores_mut().iter_mut().zip(&mut opt.clf) {
        if freeze_classifiers {
            store.zero_grads();
        } else {
            sgd_step(store, state, lr, momentum, nesterov, weight_decay);
        }
    }
}

/// Full-set eval-mode metrics for one run-log record.
fn eval_record(
    set: &HypothesisSet,
    x: &Mat,
    labels: Option<&[usize]>,
    anchor: usize,
    step: usize,
    loss: LossBreakdown,
    started: &Instant,
) -> Result<RunRecord> {
    let probs = set.predict_all(x, PredictMode::Eval)?;
    let (acc_anchor, acc_ensemble) = match labels {
        Some(y) => (
            analysis::accuracy(&probs[anchor], y)?,
            analysis::accuracy(&average_probs(&probs), y)?,
        ),
        None => (f64::NAN, f64::NAN),
    };
    let disagreement = if probs.len() >= 2 {
        analysis::disagreement_rates(&probs, None)?
            .0
            .mean_off_diagonal()
    } else {
        0.0
    };
    Ok(RunRecord {
        step,
        loss,
        acc_anchor,
        acc_ensemble,
        disagreement,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

fn gather_labels(y: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| y[i]).collect()
}

/// Supervised multi-hypothesis source training: minimizes the mean
/// per-hypothesis cross-entropy jointly through the shared extractor.
/// Evaluation records use the source set itself.
pub fn train_source(
    set: &mut HypothesisSet,
    source: &Dataset,
    cfg: &SourceConfig,
) -> Result<RunLog> {
    cfg.validate()?;
    source.validate()?;
    let y = source
        .y
        .as_ref()
        .ok_or_else(|| Error::config("source training requires a labeled dataset"))?;
    if source.k != set.num_classes() {
        return Err(Error::config(format!(
            "dataset has K={} but the hypothesis set predicts {} classes",
            source.k,
            set.num_classes()
        )));
    }

    for store in set.extractor_stores_mut() {
        store.set_all_lr_multiplier(cfg.extractor_lr_multiplier);
    }
    for store in set.classifier_stores_mut() {
        store.set_all_lr_multiplier(1.0);
    }

    let mut opt = PhaseOptimizer::new(set);
    let mut batches = BatchIter::new(
        source.n(),
        cfg.batch_size,
        seeds::derive_seed(cfg.seed, "src.batches"),
        true,
    )?;
    let mut dropout_rng = seeds::rng_from(seeds::derive_seed(cfg.seed, "src.dropout"));
    let started = Instant::now();
    let anchor = set.anchor().unwrap_or(0);
    let mut log = RunLog::default();

    for step in 1..=cfg.steps {
        let idx = batches.next_batch();
        let xb = source.x.gather_rows(&idx);
        let yb = gather_labels(y, &idx);
        let fwd = set.forward_train(&xb, &mut dropout_rng, cfg.train_dropout)?;
        let (ce, dprobs) = source_ce_grad(&fwd.probs, &yb)?;
        set.backward_train(&fwd, &dprobs)?;
        step_stores(
            set,
            &mut opt,
            cfg.lr,
            cfg.momentum,
            cfg.nesterov,
            cfg.weight_decay,
            false,
        );
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let loss = LossBreakdown {
                total: ce,
                marginal_entropy: 0.0,
                conditional_entropy: Vec::new(),
                hd: 0.0,
                reg: 0.0,
                lambda: 0.0,
            };
            log.records
                .push(eval_record(set, &source.x, Some(y), anchor, step, loss, &started)?);
        }
    }
    Ok(log)
}

/// Sum of the configured L2 penalty over the trainable stores.
fn trainable_reg(
    set: &HypothesisSet,
    cfg: &AdaptConfig,
    snapshot: Option<&SourceSnapshot>,
) -> Result<f64> {
    let Some(mode) = cfg.objective.l2_mode() else {
        return Ok(0.0);
    };
    let mut total = 0.0;
    for (i, store) in set.extractor_stores().iter().enumerate() {
        let snap = snapshot.map(|s| s.extractors[i].as_slice());
        total += l2_regularizers(store, snap, mode)?;
    }
    if !cfg.freeze_classifiers {
        for (i, store) in set.classifier_stores().iter().enumerate() {
            let snap = snapshot.map(|s| s.classifiers[i].as_slice());
            total += l2_regularizers(store, snap, mode)?;
        }
    }
    Ok(total)
}

/// Accumulate the λ-weighted L2 gradient into every trainable store.
fn add_reg_grads(
    set: &mut HypothesisSet,
    cfg: &AdaptConfig,
    snapshot: Option<&SourceSnapshot>,
) -> Result<()> {
    let Some(mode) = cfg.objective.l2_mode() else {
        return Ok(());
    };
    let freeze = cfg.freeze_classifiers;
    match mode {
        crate::objectives::L2Mode::L2 => {
            for store in set.extractor_stores_mut() {
                add_l2_grad(store, cfg.lambda);
            }
            if !freeze {
                for store in set.classifier_stores_mut() {
                    add_l2_grad(store, cfg.lambda);
                }
            }
        }
        crate::objectives::L2Mode::L2Source => {
            let snap = snapshot.expect("validated before the loop");
            for (i, store) in set.extractor_stores_mut().iter_mut().enumerate() {
                add_l2_source_grad(store, &snap.extractors[i], cfg.lambda)?;
            }
            if !freeze {
                for (i, store) in set.classifier_stores_mut().iter_mut().enumerate() {
                    add_l2_source_grad(store, &snap.classifiers[i], cfg.lambda)?;
                }
            }
        }
    }
    Ok(())
}

/// Unsupervised target adaptation. The target dataset must be unlabeled;
/// `eval_labels` (the held-out ground truth) feeds only the run-log
/// metrics. The anchor is drawn once per `anchor_policy`, recorded on the
/// set, and identical across objectives for a given seed.
pub fn adapt_target(
    set: &mut HypothesisSet,
    target: &Dataset,
    cfg: &AdaptConfig,
    snapshot: Option<&SourceSnapshot>,
    eval_labels: Option<&[usize]>,
) -> Result<RunLog> {
    cfg.validate()?;
    target.validate()?;
    if target.y.is_some() {
        return Err(Error::config(
            "adapt_target requires an unlabeled target dataset; labels must stay held out",
        ));
    }
    if cfg.objective == ObjectiveKind::MiSingle && set.m() != 1 {
        return Err(Error::config(format!(
            "mi_single requires M=1, got M={}",
            set.m()
        )));
    }
    if cfg.objective.l2_mode() == Some(crate::objectives::L2Mode::L2Source) {
        let snap = snapshot.ok_or_else(|| {
            Error::config("objective mi_l2_source requires a source snapshot")
        })?;
        if snap.extractors.len() != set.extractor_stores().len()
            || snap.classifiers.len() != set.classifier_stores().len()
        {
            return Err(Error::config(
                "source snapshot layout does not match the hypothesis set",
            ));
        }
    }
    if let Some(y) = eval_labels {
        if y.len() != target.n() {
            return Err(Error::config(format!(
                "{} eval labels for {} target rows",
                y.len(),
                target.n()
            )));
        }
    }

    let anchor = match cfg.anchor_policy {
        AnchorPolicy::SeededRandom => {
            let mut rng = seeds::rng_from(seeds::derive_seed(cfg.seed, "anchor"));
            rng.random_range(0..set.m())
        }
        AnchorPolicy::Fixed(i) => i,
    };
    set.set_anchor(anchor)?;

    for store in set.extractor_stores_mut() {
        store.set_all_lr_multiplier(cfg.extractor_lr_multiplier);
    }
    for store in set.classifier_stores_mut() {
        store.set_all_lr_multiplier(1.0);
    }

    let mut opt = PhaseOptimizer::new(set);
    let mut batches = BatchIter::new(
        target.n(),
        cfg.batch_size,
        seeds::derive_seed(cfg.seed, "tgt.batches"),
        true,
    )?;
    let mut dropout_rng = seeds::rng_from(seeds::derive_seed(cfg.seed, "tgt.dropout"));
    let started = Instant::now();
    let mut log = RunLog::default();

    for step in 1..=cfg.steps {
        let idx = batches.next_batch();
        let xb = target.x.gather_rows(&idx);
        let fwd = set.forward_train(&xb, &mut dropout_rng, cfg.train_dropout)?;
        let reg = trainable_reg(set, cfg, snapshot)?;
        let (breakdown, dprobs) = objective_grad(
            cfg.objective,
            &fwd.probs,
            anchor,
            cfg.lambda,
            cfg.divergence,
            cfg.reduction,
            reg,
        )?;
        set.backward_train(&fwd, &dprobs)?;
        add_reg_grads(set, cfg, snapshot)?;
        step_stores(
            set,
            &mut opt,
            cfg.lr,
            cfg.momentum,
            cfg.nesterov,
            cfg.weight_decay,
            cfg.freeze_classifiers,
        );
        if step % cfg.eval_every == 0 || step == cfg.steps {
            log.records.push(eval_record(
                set,
                &target.x,
                eval_labels,
                anchor,
                step,
                breakdown,
                &started,
            )?);
        }
    }
    Ok(log)
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Hypothesis-set shape knobs resolved by the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub m: usize,
    pub variant: Variant,
    /// Dropout rate of the classifier's hidden layer.
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            m: 2,
            variant: Variant::Ic,
            dropout_rate: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::config(format!("M must be ≥ 1, got {}", self.m)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Everything a full run needs. `adapt: None` means source-only: train,
/// evaluate on the target, skip adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub shift: ShiftSpec,
    pub model: ModelConfig,
    pub source: SourceConfig,
    pub adapt: Option<AdaptConfig>,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.shift.validate()?;
        self.model.validate()?;
        self.source.validate()?;
        if let Some(a) = &self.adapt {
            a.validate()?;
            if a.objective == ObjectiveKind::MiSingle && self.model.m != 1 {
                return Err(Error::config(format!(
                    "mi_single requires M=1, got M={}",
                    self.model.m
                )));
            }
            if let AnchorPolicy::Fixed(i) = a.anchor_policy {
                if i >= self.model.m {
                    return Err(Error::config(format!(
                        "fixed anchor {i} out of range for M={}",
                        self.model.m
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `report.json`: the resolved config plus the final target-set analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: PipelineConfig,
    pub analysis: AnalysisReport,
}

fn write_pretty_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generate data, train on source, optionally adapt on target, analyze,
/// and write every artifact into `run_dir`:
/// `config.json`, `source.ckpt.json`, `adapted.ckpt.json`, `runlog.csv`,
/// `report.json`, `bins.csv`, `disagreement.csv`, `klmatrix.csv`,
/// `predictions.csv`.
pub fn run_pipeline(cfg: &PipelineConfig, run_dir: &Path) -> Result<RunReport> {
    cfg.validate()?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    write_pretty_json(cfg, &run_dir.join("config.json"))?;

    let pair = generate(&cfg.shift)?;
    let arch = ArchSpec::default_arch(pair.source.d(), cfg.shift.k, cfg.model.dropout_rate)?;
    let mut set = HypothesisSet::build_set(&arch, cfg.model.m, cfg.model.variant, cfg.source.seed)?;

    let source_log = train_source(&mut set, &pair.source, &cfg.source)?;
    set.to_checkpoint().save_json(&run_dir.join("source.ckpt.json"))?;

    let runlog = match &cfg.adapt {
        Some(acfg) => {
            let snapshot = set.to_target(acfg.freeze_classifiers, acfg.shared_extractor);
            adapt_target(
                &mut set,
                &pair.target,
                acfg,
                Some(&snapshot),
                Some(&pair.target_labels),
            )?
        }
        None => source_log,
    };
    set.to_checkpoint().save_json(&run_dir.join("adapted.ckpt.json"))?;
    runlog.write_csv(&run_dir.join("runlog.csv"))?;

    let probs = set.predict_all(&pair.target.x, PredictMode::Eval)?;
    let anchor = set.anchor().unwrap_or(0);
    let analysis = analysis::build_report(&probs, anchor, &pair.target_labels, "runlog.csv")?;
    analysis::write_bins_csv(&analysis.bins, &run_dir.join("bins.csv"))?;
    analysis::write_matrix_csv(&analysis.disagreement, &run_dir.join("disagreement.csv"))?;
    analysis::write_matrix_csv(&analysis.kl, &run_dir.join("klmatrix.csv"))?;
    analysis::write_predictions_csv(&probs, &pair.target_labels, &run_dir.join("predictions.csv"))?;

    let report = RunReport {
        config: cfg.clone(),
        analysis,
    };
    write_pretty_json(&report, &run_dir.join("report.json"))?;
    Ok(report)
}
