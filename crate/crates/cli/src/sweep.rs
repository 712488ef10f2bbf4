//! Grid runners: `sweep` over (objective × M × λ × seed) and the pinned
//! nine-configuration `ablate` table. Grid points are independent, so they
//! execute on a bounded worker pool; summary assembly is a single
//! sequential reduce.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hdmi_lab::adapt::{run_pipeline, PipelineConfig, RunReport};
use hdmi_lab::objectives::DivergenceKind;
use hdmi_lab::{Error, Result};

use crate::commands::grid_pipeline;
use crate::config::{parse_f64_list, unique_dir, ResolvedConfig, SOURCE_ONLY};

/// Axis values for a sweep. The grid is the full cartesian product, so the
/// number of runs is the product of the axis lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub objectives: Vec<String>,
    pub ms: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    /// Parse the four comma-separated axis lists.
    pub fn parse(objectives: &str, ms: &str, lambdas: &str, seeds: &str) -> Result<SweepSpec> {
        let spec = SweepSpec {
            objectives: objectives
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
            ms: parse_usize_list(ms)?,
            lambdas: parse_f64_list(lambdas)?,
            seeds: parse_seed_list(seeds)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.objectives.is_empty()
            || self.ms.is_empty()
            || self.lambdas.is_empty()
            || self.seeds.is_empty()
        {
            return Err(Error::config("sweep: every axis needs at least one value"));
        }
        for o in &self.objectives {
            if o != SOURCE_ONLY {
                o.parse::<hdmi_lab::objectives::ObjectiveKind>()?;
            }
        }
        Ok(())
    }

    pub fn total_runs(&self) -> usize {
        self.objectives.len() * self.ms.len() * self.lambdas.len() * self.seeds.len()
    }
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .map_err(|e| Error::config(format!("bad integer {t:?}: {e}")))
        })
        .collect()
}

/// Comma-separated seed list.
pub fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<u64>()
                .map_err(|e| Error::config(format!("bad seed {t:?}: {e}")))
        })
        .collect()
}

/// The metrics one successful run contributes to the summary table.
#[derive(Clone, Copy, Debug)]
pub struct RowMetrics {
    pub acc_anchor: f64,
    pub acc_ensemble: f64,
    pub ece: f64,
    pub brier: f64,
    pub disagreement: f64,
}

impl RowMetrics {
    fn from_report(report: &RunReport) -> RowMetrics {
        RowMetrics {
            acc_anchor: report.analysis.accuracy_anchor,
            acc_ensemble: report.analysis.accuracy_ensemble,
            ece: report.analysis.ece,
            brier: report.analysis.brier,
            disagreement: report.analysis.disagreement.mean_off_diagonal(),
        }
    }
}

/// One planned grid point: everything a worker needs, laid out before any
/// worker starts so directory names are assigned race-free.
struct PlannedRun {
    label: String,
    m: usize,
    lambda: f64,
    seed: u64,
    pipeline: PipelineConfig,
    dir: PathBuf,
}

struct FinishedRun {
    label: String,
    m: usize,
    lambda: f64,
    seed: u64,
    outcome: std::result::Result<RowMetrics, String>,
}

/// Keep the status cell on one line and free of the CSV delimiter.
fn sanitize_status(msg: &str) -> String {
    msg.replace(',', ";").replace(['\n', '\r'], " ")
}

fn execute_one(plan: &PlannedRun) -> FinishedRun {
    let outcome = run_pipeline(&plan.pipeline, &plan.dir)
        .map(|report| RowMetrics::from_report(&report))
        .map_err(|e| sanitize_status(&e.to_string()));
    FinishedRun {
        label: plan.label.clone(),
        m: plan.m,
        lambda: plan.lambda,
        seed: plan.seed,
        outcome,
    }
}

#[cfg(feature = "parallel")]
fn execute_all(plans: &[PlannedRun], jobs: Option<usize>) -> Result<Vec<FinishedRun>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    Ok(pool.install(|| plans.par_iter().map(execute_one).collect()))
}

#[cfg(not(feature = "parallel"))]
fn execute_all(plans: &[PlannedRun], _jobs: Option<usize>) -> Result<Vec<FinishedRun>> {
    Ok(plans.iter().map(execute_one).collect())
}

const SUMMARY_HEADER: &str =
    "objective,m,lambda,seed,acc_anchor,acc_ensemble,ece,brier,disagreement,status\n";

fn push_run_row(out: &mut String, run: &FinishedRun) {
    match &run.outcome {
        Ok(v) => {
            let _ = writeln!(
                out,
                "{},{},{:?},{},{:?},{:?},{:?},{:?},{:?},ok",
                run.label,
                run.m,
                run.lambda,
                run.seed,
                v.acc_anchor,
                v.acc_ensemble,
                v.ece,
                v.brier,
                v.disagreement
            );
        }
        Err(msg) => {
            let _ = writeln!(
                out,
                "{},{},{:?},{},,,,,,{}",
                run.label, run.m, run.lambda, run.seed, msg
            );
        }
    }
}

/// `mean±sd` over the successful runs of one configuration; sd is the
/// population standard deviation. Empty cells when every seed failed.
fn aggregate_cells(ok: &[RowMetrics]) -> [String; 5] {
    if ok.is_empty() {
        return Default::default();
    }
    let n = ok.len() as f64;
    let cell = |get: fn(&RowMetrics) -> f64| -> String {
        let mean = ok.iter().map(get).sum::<f64>() / n;
        let var = ok.iter().map(|r| (get(r) - mean).powi(2)).sum::<f64>() / n;
        format!("{:.6}±{:.6}", mean, var.sqrt())
    };
    [
        cell(|r| r.acc_anchor),
        cell(|r| r.acc_ensemble),
        cell(|r| r.ece),
        cell(|r| r.brier),
        cell(|r| r.disagreement),
    ]
}

fn push_aggregate_row(out: &mut String, runs: &[FinishedRun]) {
    let ok: Vec<RowMetrics> = runs
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok().copied())
        .collect();
    let cells = aggregate_cells(&ok);
    let first = &runs[0];
    let _ = writeln!(
        out,
        "{},{},{:?},all,{},{},{},{},{},ok:{}/{}",
        first.label,
        first.m,
        first.lambda,
        cells[0],
        cells[1],
        cells[2],
        cells[3],
        cells[4],
        ok.len(),
        runs.len()
    );
}

fn write_table(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Run the full grid and write `summary.csv` under the output root: one row
/// per run in grid order, then one `seed=all` aggregate row per
/// (objective, M, λ) configuration. Failed grid points keep their row (with
/// the error in `status`) and the sweep continues.
pub fn cmd_sweep(
    base: &ResolvedConfig,
    spec: &SweepSpec,
    jobs: Option<usize>,
) -> Result<PathBuf> {
    spec.validate()?;
    std::fs::create_dir_all(&base.out_root).map_err(|e| Error::io(&base.out_root, e))?;

    let mut plans = Vec::with_capacity(spec.total_runs());
    for objective in &spec.objectives {
        for &m in &spec.ms {
            for &lambda in &spec.lambdas {
                for &seed in &spec.seeds {
                    let pipeline = grid_pipeline(base, objective, m, lambda, seed)?;
                    let name = format!("{objective}_m{m}_l{lambda}_s{seed}");
                    plans.push(PlannedRun {
                        label: objective.clone(),
                        m,
                        lambda,
                        seed,
                        pipeline,
                        dir: unique_dir(&base.out_root, &name),
                    });
                }
            }
        }
    }

    let runs = execute_all(&plans, jobs)?;

    let mut out = String::from(SUMMARY_HEADER);
    for run in &runs {
        push_run_row(&mut out, run);
    }
    // Runs were planned seeds-innermost, so each configuration occupies one
    // contiguous block of `seeds.len()` rows.
    for block in runs.chunks(spec.seeds.len()) {
        push_aggregate_row(&mut out, block);
    }

    let path = base.out_root.join("summary.csv");
    write_table(&path, &out)?;
    let n_ok = runs.iter().filter(|r| r.outcome.is_ok()).count();
    println!("sweep: {}/{} runs succeeded", n_ok, runs.len());
    println!("wrote {}", path.display());
    Ok(path)
}

/// One row of the pinned ablation table: a display label, the objective it
/// runs, and the config tweaks that distinguish it from the plain grid
/// point.
struct AblationRow {
    label: &'static str,
    objective: &'static str,
    divergence: Option<DivergenceKind>,
    shared_extractor: Option<bool>,
}

const ABLATION_ROWS: [AblationRow; 9] = [
    AblationRow {
        label: "source_only",
        objective: SOURCE_ONLY,
        divergence: None,
        shared_extractor: None,
    },
    AblationRow {
        label: "mi_ensemble",
        objective: "mi_ensemble",
        divergence: None,
        shared_extractor: None,
    },
    AblationRow {
        label: "hdmi",
        objective: "hdmi",
        divergence: None,
        shared_extractor: None,
    },
    AblationRow {
        label: "hdmi_kl",
        objective: "hdmi",
        divergence: Some(DivergenceKind::Kl),
        shared_extractor: None,
    },
    AblationRow {
        label: "hdmi_indep_psi",
        objective: "hdmi",
        divergence: None,
        shared_extractor: Some(false),
    },
    AblationRow {
        label: "hd_only",
        objective: "hd_only",
        divergence: None,
        shared_extractor: None,
    },
    AblationRow {
        label: "cond_entropy_hd",
        objective: "cond_entropy_hd",
        divergence: None,
        shared_extractor: None,
    },
    AblationRow {
        label: "mi_l2",
        objective: "mi_l2",
        divergence: None,
        shared_extractor: None,
    },
    AblationRow {
        label: "mi_l2_source",
        objective: "mi_l2_source",
        divergence: None,
        shared_extractor: None,
    },
];

/// Run the nine pinned configurations over `seeds` and write
/// `ablation.csv`: exactly one aggregate row per configuration, in table
/// order. Per-seed artifacts land in individual run directories.
pub fn cmd_ablate(base: &ResolvedConfig, seeds: &[u64], jobs: Option<usize>) -> Result<PathBuf> {
    if seeds.is_empty() {
        return Err(Error::config("ablate: need at least one seed"));
    }
    std::fs::create_dir_all(&base.out_root).map_err(|e| Error::io(&base.out_root, e))?;

    let m = base.pipeline.model.m;
    let lambda = base.lambda;
    let mut plans = Vec::with_capacity(ABLATION_ROWS.len() * seeds.len());
    for row in &ABLATION_ROWS {
        for &seed in seeds {
            let mut pipeline = grid_pipeline(base, row.objective, m, lambda, seed)?;
            if let Some(a) = pipeline.adapt.as_mut() {
                if let Some(d) = row.divergence {
                    a.divergence = d;
                }
                if let Some(s) = row.shared_extractor {
                    a.shared_extractor = s;
                }
            }
            let name = format!("{}_m{m}_l{lambda}_s{seed}", row.label);
            plans.push(PlannedRun {
                label: row.label.to_string(),
                m,
                lambda,
                seed,
                pipeline,
                dir: unique_dir(&base.out_root, &name),
            });
        }
    }

    let runs = execute_all(&plans, jobs)?;

    let mut out = String::from(
        "config,m,lambda,acc_anchor,acc_ensemble,ece,brier,disagreement,status\n",
    );
    for block in runs.chunks(seeds.len()) {
        let ok: Vec<RowMetrics> = block
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok().copied())
            .collect();
        let cells = aggregate_cells(&ok);
        let _ = writeln!(
            out,
            "{},{},{:?},{},{},{},{},{},ok:{}/{}",
            block[0].label,
            block[0].m,
            block[0].lambda,
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            cells[4],
            ok.len(),
            block.len()
        );
    }

    let path = base.out_root.join("ablation.csv");
    write_table(&path, &out)?;
    let n_ok = runs.iter().filter(|r| r.outcome.is_ok()).count();
    println!("ablate: {}/{} runs succeeded", n_ok, runs.len());
    println!("wrote {}", path.display());
    Ok(path)
}
