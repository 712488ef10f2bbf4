//! The single-run commands: `gen`, `train-source`, `adapt`, `eval`, `run`.

use std::path::{Path, PathBuf};

use hdmi_lab::adapt::{adapt_target, run_pipeline, train_source, PipelineConfig, RunReport};
use hdmi_lab::analysis::{self, AnalysisReport};
use hdmi_lab::hypotheses::{ArchSpec, HypothesisSet, PredictMode, SetCheckpoint};
use hdmi_lab::shiftdata::{self, Dataset, GeneratedPair};
use hdmi_lab::{Error, Result};
use serde::Serialize;

use crate::config::{unique_dir, ResolvedConfig};

pub const SOURCE_CSV: &str = "source.csv";
pub const TARGET_CSV: &str = "target.csv";
pub const TARGET_LABELS_CSV: &str = "target.labels.csv";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const SOURCE_CKPT: &str = "source.ckpt.json";

fn write_pretty_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A checkpoint (or any input artifact) the user points us at must exist —
/// a missing one is the *user's* mistake, reported as validation, not IO.
fn require_artifact(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "missing {what}: {} (generate it first or pass the right path)",
            path.display()
        )))
    }
}

/// Generate a source/target pair and write the four dataset files.
pub fn cmd_gen(cfg: &ResolvedConfig, data_dir: Option<PathBuf>) -> Result<PathBuf> {
    let dir = data_dir.unwrap_or_else(|| {
        cfg.out_root.join(format!(
            "data_{}_s{}",
            cfg.pipeline.shift.generator, cfg.pipeline.shift.seed
        ))
    });
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let pair = shiftdata::generate(&cfg.pipeline.shift)?;
    shiftdata::save_csv(&pair.source, &dir.join(SOURCE_CSV))?;
    shiftdata::save_csv(&pair.target, &dir.join(TARGET_CSV))?;
    shiftdata::save_labels_csv(&pair.target_labels, &dir.join(TARGET_LABELS_CSV))?;
    shiftdata::save_manifest(&cfg.pipeline.shift, &dir.join(MANIFEST_JSON))?;
    println!(
        "wrote {SOURCE_CSV}, {TARGET_CSV}, {TARGET_LABELS_CSV}, {MANIFEST_JSON} to {}",
        dir.display()
    );
    Ok(dir)
}

/// Dataset inputs for the training/evaluation commands: either loaded from a
/// `gen` directory or generated in memory from the resolved spec.
struct DataSource {
    source: Option<Dataset>,
    target: Option<Dataset>,
    target_labels: Option<Vec<usize>>,
}

impl DataSource {
    fn from_dir(dir: &Path, cfg: &ResolvedConfig, need_source: bool) -> Result<DataSource> {
        // The manifest, when present, is authoritative for K (the directory
        // may hold a different generation than the current flags describe).
        let manifest = dir.join(MANIFEST_JSON);
        let k = if manifest.is_file() {
            shiftdata::load_manifest(&manifest)?.k
        } else {
            cfg.pipeline.shift.k
        };
        let source_path = dir.join(SOURCE_CSV);
        let source = if need_source {
            require_artifact(&source_path, "source dataset")?;
            Some(shiftdata::load_csv(&source_path, true, Some(k))?)
        } else if source_path.is_file() {
            Some(shiftdata::load_csv(&source_path, true, Some(k))?)
        } else {
            None
        };
        let target_path = dir.join(TARGET_CSV);
        let target = if target_path.is_file() {
            Some(shiftdata::load_csv(&target_path, false, Some(k))?)
        } else {
            None
        };
        let labels_path = dir.join(TARGET_LABELS_CSV);
        let target_labels = if labels_path.is_file() {
            let labels = shiftdata::load_labels_csv(&labels_path)?;
            if let Some(bad) = labels.iter().find(|&&l| l >= k) {
                return Err(Error::config(format!(
                    "label {bad} in {} is out of range for K={k}",
                    labels_path.display()
                )));
            }
            Some(labels)
        } else {
            None
        };
        Ok(DataSource {
            source,
            target,
            target_labels,
        })
    }

    fn generated(cfg: &ResolvedConfig) -> Result<DataSource> {
        let GeneratedPair {
            source,
            target,
            target_labels,
        } = shiftdata::generate(&cfg.pipeline.shift)?;
        Ok(DataSource {
            source: Some(source),
            target: Some(target),
            target_labels: Some(target_labels),
        })
    }

    fn load(dir: Option<&Path>, cfg: &ResolvedConfig, need_source: bool) -> Result<DataSource> {
        match dir {
            Some(d) => DataSource::from_dir(d, cfg, need_source),
            None => DataSource::generated(cfg),
        }
    }
}

/// Train the source hypotheses and save a set checkpoint.
pub fn cmd_train_source(
    cfg: &ResolvedConfig,
    data_dir: Option<PathBuf>,
    ckpt: Option<PathBuf>,
) -> Result<PathBuf> {
    let data = DataSource::load(data_dir.as_deref(), cfg, true)?;
    let source = data.source.expect("need_source loads the source dataset");
    let arch = ArchSpec::default_arch(source.d(), source.k, cfg.pipeline.model.dropout_rate)?;
    let mut set = HypothesisSet::build_set(
        &arch,
        cfg.pipeline.model.m,
        cfg.pipeline.model.variant,
        cfg.pipeline.source.seed,
    )?;
    let log = train_source(&mut set, &source, &cfg.pipeline.source)?;
    let path = ckpt.unwrap_or_else(|| cfg.out_root.join(SOURCE_CKPT));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    set.to_checkpoint().save_json(&path)?;
    if let Some(last) = log.records.last() {
        println!(
            "source training: {} steps, final train accuracy {:.4}",
            cfg.pipeline.source.steps, last.acc_ensemble
        );
    }
    println!("wrote {}", path.display());
    Ok(path)
}

/// Shared tail of `adapt` / `eval` / `run`: evaluate the set on the target
/// data and write the analysis artifacts next to the run log.
fn write_analysis(
    set: &HypothesisSet,
    target: &Dataset,
    labels: &[usize],
    runlog_name: &str,
    dir: &Path,
) -> Result<AnalysisReport> {
    let probs = set.predict_all(&target.x, PredictMode::Eval)?;
    let anchor = set.anchor().unwrap_or(0);
    let report = analysis::build_report(&probs, anchor, labels, runlog_name)?;
    analysis::write_bins_csv(&report.bins, &dir.join("bins.csv"))?;
    analysis::write_matrix_csv(&report.disagreement, &dir.join("disagreement.csv"))?;
    analysis::write_matrix_csv(&report.kl, &dir.join("klmatrix.csv"))?;
    analysis::write_predictions_csv(&probs, labels, &dir.join("predictions.csv"))?;
    Ok(report)
}

fn require_target_and_labels(data: DataSource, dir: Option<&Path>) -> Result<(Dataset, Vec<usize>)> {
    let missing = |name: &str| {
        Error::config(match dir {
            Some(d) => format!("missing {name}: {}", d.join(name).display()),
            None => format!("missing {name}"),
        })
    };
    let target = data.target.ok_or_else(|| missing(TARGET_CSV))?;
    let labels = data.target_labels.ok_or_else(|| missing(TARGET_LABELS_CSV))?;
    if labels.len() != target.n() {
        return Err(Error::config(format!(
            "target has {} rows but {} labels",
            target.n(),
            labels.len()
        )));
    }
    Ok((target, labels))
}

/// Adapt a source checkpoint on unlabeled target data; write the adapted
/// checkpoint plus the full report artifacts into a run directory.
pub fn cmd_adapt(
    cfg: &ResolvedConfig,
    ckpt: Option<PathBuf>,
    data_dir: Option<PathBuf>,
    run_dir: Option<PathBuf>,
) -> Result<PathBuf> {
    let acfg = cfg
        .pipeline
        .adapt
        .clone()
        .ok_or_else(|| Error::config("objective is source_only; nothing to adapt"))?;
    let ckpt_path = ckpt.unwrap_or_else(|| cfg.out_root.join(SOURCE_CKPT));
    require_artifact(&ckpt_path, "source checkpoint")?;
    let mut set = HypothesisSet::from_checkpoint(&SetCheckpoint::load_json(&ckpt_path)?)?;

    let data = DataSource::load(data_dir.as_deref(), cfg, false)?;
    let (target, labels) = require_target_and_labels(data, data_dir.as_deref())?;

    let dir = run_dir.unwrap_or_else(|| unique_dir(&cfg.out_root, &cfg.run_dir_name()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let snapshot = set.to_target(acfg.freeze_classifiers, acfg.shared_extractor);
    let log = adapt_target(&mut set, &target, &acfg, Some(&snapshot), Some(&labels))?;

    write_pretty_json(&cfg.pipeline, &dir.join("config.json"))?;
    set.to_checkpoint().save_json(&dir.join("adapted.ckpt.json"))?;
    log.write_csv(&dir.join("runlog.csv"))?;
    let report = write_analysis(&set, &target, &labels, "runlog.csv", &dir)?;
    write_pretty_json(
        &RunReport {
            config: cfg.pipeline.clone(),
            analysis: report.clone(),
        },
        &dir.join("report.json"),
    )?;
    println!(
        "adapted {}: anchor accuracy {:.4}, ensemble accuracy {:.4}",
        cfg.objective, report.accuracy_anchor, report.accuracy_ensemble
    );
    println!("wrote {}", dir.display());
    Ok(dir)
}

/// Evaluate a checkpoint on labeled target data without training.
pub fn cmd_eval(
    cfg: &ResolvedConfig,
    ckpt: Option<PathBuf>,
    data_dir: Option<PathBuf>,
    run_dir: Option<PathBuf>,
) -> Result<PathBuf> {
    let ckpt_path = ckpt.unwrap_or_else(|| cfg.out_root.join(SOURCE_CKPT));
    require_artifact(&ckpt_path, "checkpoint")?;
    let set = HypothesisSet::from_checkpoint(&SetCheckpoint::load_json(&ckpt_path)?)?;

    let data = DataSource::load(data_dir.as_deref(), cfg, false)?;
    let (target, labels) = require_target_and_labels(data, data_dir.as_deref())?;

    let dir = run_dir.unwrap_or_else(|| {
        unique_dir(
            &cfg.out_root,
            &format!("eval_s{}", cfg.pipeline.shift.seed),
        )
    });
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    // No training ran, so the report references no run log.
    let report = write_analysis(&set, &target, &labels, "", &dir)?;
    write_pretty_json(&report, &dir.join("report.json"))?;
    println!(
        "eval: anchor accuracy {:.4}, ensemble accuracy {:.4}, ece {:.4}",
        report.accuracy_anchor, report.accuracy_ensemble, report.ece
    );
    println!("wrote {}", dir.display());
    Ok(dir)
}

/// Full pipeline into a run directory named `<objective>_m<M>_l<λ>_s<seed>`.
pub fn cmd_run(cfg: &ResolvedConfig, run_dir: Option<PathBuf>) -> Result<(PathBuf, RunReport)> {
    let dir = run_dir.unwrap_or_else(|| unique_dir(&cfg.out_root, &cfg.run_dir_name()));
    let report = run_pipeline(&cfg.pipeline, &dir)?;
    println!(
        "{}: anchor accuracy {:.4}, ensemble accuracy {:.4}, ece {:.4}, brier {:.4}",
        cfg.objective,
        report.analysis.accuracy_anchor,
        report.analysis.accuracy_ensemble,
        report.analysis.ece,
        report.analysis.brier
    );
    println!("wrote {}", dir.display());
    Ok((dir, report))
}

/// Build a grid-point pipeline from the base resolution: same data and
/// optimizer settings, with objective/M/λ/seed replaced.
pub fn grid_pipeline(
    base: &ResolvedConfig,
    objective: &str,
    m: usize,
    lambda: f64,
    seed: u64,
) -> Result<PipelineConfig> {
    let staged = ResolvedConfig {
        pipeline: base.pipeline.clone(),
        objective: objective.to_string(),
        lambda,
        out_root: base.out_root.clone(),
        provenance: base.provenance.clone(),
    };
    let mut pipeline = staged.pipeline;
    pipeline.model.m = m;
    pipeline.shift.seed = seed;
    pipeline.source.seed = seed;
    // The base adapt settings survive even when the base objective was
    // source_only, so grid points can turn adaptation back on.
    let mut adapt = pipeline.adapt.take().unwrap_or_default();
    adapt.lambda = lambda;
    adapt.seed = seed;
    if objective == crate::config::SOURCE_ONLY {
        pipeline.adapt = None;
    } else {
        adapt.objective = objective.parse()?;
        pipeline.adapt = Some(adapt);
    }
    pipeline.validate()?;
    Ok(pipeline)
}
