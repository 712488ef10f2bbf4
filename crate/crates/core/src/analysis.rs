//! Evaluation metrics and diagnostic artifacts: accuracy (overall and
//! per-class), calibration (Brier, ECE, reliability bins), pairwise
//! disagreement and KL matrices, hypothesis-level error profiles, and the
//! CSV/JSON writers that put them on disk.
//!
//! Everything here is a pure function of predictions and labels; nothing
//! touches training state.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::diffnet::ProbBatch;
use crate::error::{Error, Result};
use crate::objectives::LOG_EPS;

/// Index of the row maximum, ties broken toward the lowest index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_labels(p: &ProbBatch, y: &[usize]) -> Result<()> {
    if p.rows() != y.len() {
        return Err(Error::config(format!(
            "{} prediction rows but {} labels",
            p.rows(),
            y.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= p.num_classes()) {
        return Err(Error::domain(format!(
            "label {bad} out of range for K={}",
            p.num_classes()
        )));
    }
    Ok(())
}

/// Fraction of samples whose argmax matches the label.
pub fn accuracy(p: &ProbBatch, y: &[usize]) -> Result<f64> {
    check_labels(p, y)?;
    if y.is_empty() {
        return Err(Error::domain("accuracy of an empty batch"));
    }
    let hits = (0..p.rows())
        .filter(|&i| argmax_row(p.row(i)) == y[i])
        .count();
    Ok(hits as f64 / y.len() as f64)
}

/// Recall of each class. Errors if some class in `0..k` has no samples.
pub fn per_class_accuracy(p: &ProbBatch, y: &[usize], k: usize) -> Result<Vec<f64>> {
    check_labels(p, y)?;
    if k != p.num_classes() {
        return Err(Error::config(format!(
            "per_class_accuracy: K={k} but predictions have {} classes",
            p.num_classes()
        )));
    }
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for i in 0..p.rows() {
        counts[y[i]] += 1;
        if argmax_row(p.row(i)) == y[i] {
            hits[y[i]] += 1;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::domain(format!(
            "per_class_accuracy: class {empty} has no samples"
        )));
    }
    Ok(hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| h as f64 / c as f64)
        .collect())
}

/// Multiclass Brier score: mean over samples of Σ_k (p_ik − 1[y_i=k])².
/// Range [0, 2].
pub fn brier(p: &ProbBatch, y: &[usize]) -> Result<f64> {
    check_labels(p, y)?;
    if y.is_empty() {
        return Err(Error::domain("brier of an empty batch"));
    }
    let mut total = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        for (k, &v) in p.row(i).iter().enumerate() {
            let t = if yi == k { 1.0 } else { 0.0 };
            total += (v - t) * (v - t);
        }
    }
    Ok(total / y.len() as f64)
}

/// One-vs-rest Brier score for a single positive class (range [0, 1]);
/// provided for parity with binary calibration summaries.
pub fn brier_binary(p: &ProbBatch, y: &[usize], positive_class: usize) -> Result<f64> {
    check_labels(p, y)?;
    if y.is_empty() {
        return Err(Error::domain("brier of an empty batch"));
    }
    if positive_class >= p.num_classes() {
        return Err(Error::config(format!(
            "positive_class {positive_class} out of range for K={}",
            p.num_classes()
        )));
    }
    let mut total = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let v = p.row(i)[positive_class];
        let t = if yi == positive_class { 1.0 } else { 0.0 };
        total += (v - t) * (v - t);
    }
    Ok(total / y.len() as f64)
}

/// Per-bin reliability data over `B` equal-width, right-closed confidence
/// bins. Empty bins carry zero confidence/accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    /// B+1 edges: 0, 1/B, …, 1.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean_confidence: Vec<f64>,
    pub accuracy: Vec<f64>,
}

/// Bin index for a top-label confidence: bin `b` covers
/// `(b/B, (b+1)/B]`, except bin 0 which also includes 0.
fn bin_index(conf: f64, b: usize) -> usize {
    if conf <= 0.0 {
        return 0;
    }
    ((conf * b as f64).ceil() as usize).clamp(1, b) - 1
}

/// Expected calibration error with top-label confidence binning:
/// `ECE = Σ_b (count_b/N)·|acc_b − conf_b|`; empty bins contribute 0.
pub fn ece(p: &ProbBatch, y: &[usize], b: usize) -> Result<(f64, ReliabilityBins)> {
    check_labels(p, y)?;
    if b < 1 {
        return Err(Error::config("ece needs at least one bin"));
    }
    if y.is_empty() {
        return Err(Error::domain("ece of an empty batch"));
    }
    let mut counts = vec![0usize; b];
    let mut conf_sum = vec![0.0; b];
    let mut hit_sum = vec![0.0; b];
    for (i, &yi) in y.iter().enumerate() {
        let row = p.row(i);
        let pred = argmax_row(row);
        let conf = row[pred];
        let bin = bin_index(conf, b);
        counts[bin] += 1;
        conf_sum[bin] += conf;
        if pred == yi {
            hit_sum[bin] += 1.0;
        }
    }
    let n = y.len() as f64;
    let mut value = 0.0;
    let mut mean_confidence = vec![0.0; b];
    let mut accuracy = vec![0.0; b];
    for bin in 0..b {
        if counts[bin] == 0 {
            continue;
        }
        let c = counts[bin] as f64;
        mean_confidence[bin] = conf_sum[bin] / c;
        accuracy[bin] = hit_sum[bin] / c;
        value += (c / n) * (accuracy[bin] - mean_confidence[bin]).abs();
    }
    let bin_edges = (0..=b).map(|i| i as f64 / b as f64).collect();
    Ok((
        value,
        ReliabilityBins {
            bin_edges,
            counts,
            mean_confidence,
            accuracy,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    Rate,
    Kl,
}

/// M×M disagreement summary. `rate`: symmetric, zero diagonal, entries in
/// [0,1]. `kl`: entry (row i, col j) is the batch-mean KL[p_j ‖ p_i]
/// (columns index p, rows index q in KL[p‖q]); zero diagonal, asymmetric
/// in general.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisagreementMatrix {
    pub kind: MatrixKind,
    pub m: usize,
    /// Row-major M×M.
    pub values: Vec<f64>,
}

impl DisagreementMatrix {
    pub fn zero(kind: MatrixKind, m: usize) -> Self {
        DisagreementMatrix {
            kind,
            m,
            values: vec![0.0; m * m],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.m + j] = v;
    }

    /// Mean of the off-diagonal entries (0 for M=1).
    pub fn mean_off_diagonal(&self) -> f64 {
        if self.m < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 0..self.m {
            for j in 0..self.m {
                if i != j {
                    total += self.get(i, j);
                }
            }
        }
        total / (self.m * (self.m - 1)) as f64
    }
}

fn check_batches(ps: &[ProbBatch]) -> Result<()> {
    if ps.len() < 2 {
        return Err(Error::config(format!(
            "need at least 2 hypotheses, got {}",
            ps.len()
        )));
    }
    let (n, k) = (ps[0].rows(), ps[0].num_classes());
    if n == 0 {
        return Err(Error::domain("empty prediction batch"));
    }
    for p in ps {
        if p.rows() != n || p.num_classes() != k {
            return Err(Error::config("prediction batches disagree on shape"));
        }
    }
    Ok(())
}

/// Pairwise argmax-disagreement rates; entry (i,j) is the fraction of
/// samples where hypotheses i and j predict different classes. With labels,
/// also the per-hypothesis error rate (disagreement with the truth).
pub fn disagreement_rates(
    ps: &[ProbBatch],
    y: Option<&[usize]>,
) -> Result<(DisagreementMatrix, Option<Vec<f64>>)> {
    check_batches(ps)?;
    let m = ps.len();
    let n = ps[0].rows();
    let preds: Vec<Vec<usize>> = ps
        .iter()
        .map(|p| (0..n).map(|i| argmax_row(p.row(i))).collect())
        .collect();
    let mut mat = DisagreementMatrix::zero(MatrixKind::Rate, m);
    for i in 0..m {
        for j in (i + 1)..m {
            let d = (0..n).filter(|&s| preds[i][s] != preds[j][s]).count();
            let rate = d as f64 / n as f64;
            mat.set(i, j, rate);
            mat.set(j, i, rate);
        }
    }
    let vs_truth = match y {
        Some(y) => {
            check_labels(&ps[0], y)?;
            Some(
                preds
                    .iter()
                    .map(|pr| {
                        let wrong = (0..n).filter(|&s| pr[s] != y[s]).count();
                        wrong as f64 / n as f64
                    })
                    .collect(),
            )
        }
        None => None,
    };
    Ok((mat, vs_truth))
}

/// KL divergence KL[p ‖ q] between two probability rows, with the shared
/// ε clamp inside both logarithms.
fn kl_rows(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| a * ((a + LOG_EPS).ln() - (b + LOG_EPS).ln()))
        .sum()
}

/// Pairwise KL matrix: entry (row i, col j) = batch-mean KL[p_j ‖ p_i].
pub fn kl_matrix(ps: &[ProbBatch]) -> Result<DisagreementMatrix> {
    check_batches(ps)?;
    let m = ps.len();
    let n = ps[0].rows();
    let mut mat = DisagreementMatrix::zero(MatrixKind::Kl, m);
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let mut total = 0.0;
            for s in 0..n {
                total += kl_rows(ps[j].row(s), ps[i].row(s));
            }
            mat.set(i, j, total / n as f64);
        }
    }
    Ok(mat)
}

/// Per-sample correctness patterns for M hypotheses. Bit `m` of a pattern
/// is set when hypothesis `m` is correct, so the all-ones pattern
/// `2^M − 1` means every hypothesis got the sample right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorProfile {
    pub m: usize,
    /// One pattern per sample.
    pub patterns: Vec<u32>,
    /// Histogram over the 2^M patterns.
    pub counts: Vec<usize>,
}

pub fn hypothesis_error_profile(ps: &[ProbBatch], y: &[usize]) -> Result<ErrorProfile> {
    if ps.is_empty() {
        return Err(Error::config("error profile needs at least one hypothesis"));
    }
    let m = ps.len();
    if m > 20 {
        return Err(Error::config(format!(
            "error profile limited to M ≤ 20 (2^M histogram), got {m}"
        )));
    }
    for p in ps {
        check_labels(p, y)?;
    }
    let n = y.len();
    let mut patterns = Vec::with_capacity(n);
    let mut counts = vec![0usize; 1 << m];
    for (s, &ys) in y.iter().enumerate() {
        let mut pat = 0u32;
        for (i, p) in ps.iter().enumerate() {
            if argmax_row(p.row(s)) == ys {
                pat |= 1 << i;
            }
        }
        patterns.push(pat);
        counts[pat as usize] += 1;
    }
    Ok(ErrorProfile { m, patterns, counts })
}

/// Number of (sample, hypothesis) pairs that were correct in `reference`
/// but wrong in `current` — errors introduced between the two profiles.
pub fn new_error_count(reference: &ErrorProfile, current: &ErrorProfile) -> Result<usize> {
    if reference.m != current.m || reference.patterns.len() != current.patterns.len() {
        return Err(Error::config(
            "error profiles disagree on M or sample count",
        ));
    }
    Ok(reference
        .patterns
        .iter()
        .zip(&current.patterns)
        .map(|(&before, &after)| (before & !after).count_ones() as usize)
        .sum())
}

/// The full evaluation summary written to `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub accuracy_anchor: f64,
    pub accuracy_ensemble: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Mean of `per_class_accuracy`.
    pub per_class_average: f64,
    pub brier: f64,
    pub ece: f64,
    pub bins: ReliabilityBins,
    pub disagreement: DisagreementMatrix,
    pub kl: DisagreementMatrix,
    /// Per-hypothesis error rate against the ground truth.
    pub disagreement_vs_truth: Vec<f64>,
    /// Relative path of the run log these metrics accompany.
    pub runlog: String,
}

/// Build a report from per-hypothesis predictions, the anchor index, and
/// ground-truth labels. Calibration metrics are computed on the ensemble.
pub fn build_report(
    ps: &[ProbBatch],
    anchor: usize,
    y: &[usize],
    runlog: &str,
) -> Result<AnalysisReport> {
    if ps.is_empty() {
        return Err(Error::config("report needs at least one hypothesis"));
    }
    if anchor >= ps.len() {
        return Err(Error::config(format!(
            "anchor {anchor} out of range for M={}",
            ps.len()
        )));
    }
    let ensemble = crate::hypotheses::average_probs(ps);
    let k = ensemble.num_classes();
    let accuracy_anchor = accuracy(&ps[anchor], y)?;
    let accuracy_ensemble = accuracy(&ensemble, y)?;
    let per_class = per_class_accuracy(&ensemble, y, k)?;
    let per_class_average = per_class.iter().sum::<f64>() / per_class.len() as f64;
    let brier_v = brier(&ensemble, y)?;
    let (ece_v, bins) = ece(&ensemble, y, 10)?;
    let (disagreement, vs_truth) = if ps.len() >= 2 {
        let (mat, vt) = disagreement_rates(ps, Some(y))?;
        (mat, vt.expect("labels supplied"))
    } else {
        let err = 1.0 - accuracy(&ps[0], y)?;
        (DisagreementMatrix::zero(MatrixKind::Rate, 1), vec![err])
    };
    let kl = if ps.len() >= 2 {
        kl_matrix(ps)?
    } else {
        DisagreementMatrix::zero(MatrixKind::Kl, 1)
    };
    Ok(AnalysisReport {
        accuracy_anchor,
        accuracy_ensemble,
        per_class_accuracy: per_class,
        per_class_average,
        brier: brier_v,
        ece: ece_v,
        bins,
        disagreement,
        kl,
        disagreement_vs_truth: vs_truth,
        runlog: runlog.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Artifact writers
// ---------------------------------------------------------------------------

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reliability-diagram data: `edge_lo,edge_hi,count,conf,acc`, one row per
/// bin.
pub fn write_bins_csv(bins: &ReliabilityBins, path: &Path) -> Result<()> {
    let mut out = String::from("edge_lo,edge_hi,count,conf,acc\n");
    let b = bins.counts.len();
    for i in 0..b {
        let _ = writeln!(
            out,
            "{:?},{:?},{},{:?},{:?}",
            bins.bin_edges[i],
            bins.bin_edges[i + 1],
            bins.counts[i],
            bins.mean_confidence[i],
            bins.accuracy[i]
        );
    }
    write_text(path, &out)
}

/// M×M matrix as CSV with header `h0,...,h{M-1}` and one row per
/// hypothesis.
pub fn write_matrix_csv(matrix: &DisagreementMatrix, path: &Path) -> Result<()> {
    let header: Vec<String> = (0..matrix.m).map(|j| format!("h{j}")).collect();
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..matrix.m {
        let row: Vec<String> = (0..matrix.m).map(|j| format!("{:?}", matrix.get(i, j))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

/// Per-sample dump: label, every hypothesis' argmax and top probability,
/// and the ensemble's.
pub fn write_predictions_csv(
    ps: &[ProbBatch],
    y: &[usize],
    path: &Path,
) -> Result<()> {
    if ps.is_empty() {
        return Err(Error::config("predictions dump needs at least one hypothesis"));
    }
    for p in ps {
        check_labels(p, y)?;
    }
    let ensemble = crate::hypotheses::average_probs(ps);
    let mut out = String::from("sample,label");
    for i in 0..ps.len() {
        let _ = write!(out, ",h{i}_pred,h{i}_conf");
    }
    out.push_str(",ensemble_pred,ensemble_conf\n");
    for (s, &ys) in y.iter().enumerate() {
        let _ = write!(out, "{s},{ys}");
        for p in ps {
            let row = p.row(s);
            let pred = argmax_row(row);
            let _ = write!(out, ",{pred},{:?}", row[pred]);
        }
        let row = ensemble.row(s);
        let pred = argmax_row(row);
        let _ = writeln!(out, ",{pred},{:?}", row[pred]);
    }
    write_text(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use rand::Rng;

    fn probs(rows: &[&[f64]]) -> ProbBatch {
        ProbBatch::from_rows(rows)
    }

    fn random_probs(n: usize, k: usize, seed: u64) -> ProbBatch {
        let mut rng = seeds::rng_from(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        probs(&refs)
    }

    #[test]
    fn accuracy_and_tie_break() {
        let p = probs(&[&[0.9, 0.1], &[0.2, 0.8]]);
        assert_eq!(accuracy(&p, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&p, &[1, 0]).unwrap(), 0.0);

        // Uniform rows tie-break to class 0.
        let u = probs(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert_eq!(accuracy(&u, &[0, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&u, &[1, 1]).unwrap(), 0.0);

        assert!(accuracy(&p, &[0]).is_err(), "shape mismatch");
        assert!(accuracy(&p, &[0, 2]).is_err(), "label out of range");
    }

    #[test]
    fn per_class_matches_recall_oracle() {
        // 3 classes, imbalanced: class 0 → 2/3 right, class 1 → 1/1,
        // class 2 → 0/2.
        let p = probs(&[
            &[0.8, 0.1, 0.1],
            &[0.7, 0.2, 0.1],
            &[0.1, 0.8, 0.1],
            &[0.1, 0.8, 0.1],
            &[0.9, 0.05, 0.05],
            &[0.1, 0.8, 0.1],
        ]);
        let y = [0, 0, 0, 1, 2, 2];
        let pc = per_class_accuracy(&p, &y, 3).unwrap();
        assert_eq!(pc, vec![2.0 / 3.0, 1.0, 0.0]);
        let mean = pc.iter().sum::<f64>() / 3.0;
        assert!((mean - (2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-15);

        let err = per_class_accuracy(&p, &[0, 0, 0, 1, 1, 1], 3).unwrap_err();
        assert!(err.to_string().contains("class 2"), "got: {err}");
    }

    #[test]
    fn brier_cases() {
        // Perfect one-hot → 0.
        let p = probs(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(brier(&p, &[0, 1]).unwrap(), 0.0);

        // Uniform K=2 on any labels → 0.5.
        let u = probs(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!((brier(&u, &[0, 1]).unwrap() - 0.5).abs() < 1e-15);

        // Direct-summation oracle on a mixed batch.
        let p = probs(&[&[0.7, 0.2, 0.1], &[0.3, 0.3, 0.4]]);
        let y = [0, 2];
        let oracle = ((0.7 - 1.0f64).powi(2) + 0.04 + 0.01
            + 0.09 + 0.09 + (0.4 - 1.0f64).powi(2))
            / 2.0;
        assert!((brier(&p, &y).unwrap() - oracle).abs() < 1e-12);

        // Worst case: confident and wrong → 2.
        let w = probs(&[&[1.0, 0.0]]);
        assert!((brier(&w, &[1]).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn brier_decreases_along_the_path_to_truth() {
        let y = [1usize, 0, 2];
        let base = probs(&[
            &[0.5, 0.3, 0.2],
            &[0.2, 0.5, 0.3],
            &[0.4, 0.4, 0.2],
        ]);
        let mut last = f64::INFINITY;
        for t in [0.0, 0.5, 1.0] {
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|i| {
                    (0..3)
                        .map(|k| {
                            let target = if y[i] == k { 1.0 } else { 0.0 };
                            (1.0 - t) * base.row(i)[k] + t * target
                        })
                        .collect()
                })
                .collect();
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let b = brier(&probs(&refs), &y).unwrap();
            assert!(b < last, "brier not decreasing at t={t}");
            last = b;
        }
        assert_eq!(last, 0.0);
    }

    #[test]
    fn brier_binary_one_vs_rest() {
        let p = probs(&[&[0.7, 0.3], &[0.2, 0.8]]);
        let y = [0, 1];
        // Positive class 1: (0.3-0)² and (0.8-1)² → (0.09+0.04)/2.
        assert!((brier_binary(&p, &y, 1).unwrap() - 0.065).abs() < 1e-15);
        assert!(brier_binary(&p, &y, 2).is_err());
    }

    #[test]
    fn ece_trivial_cases() {
        // All confidence 1.0 and correct → 0.
        let p = probs(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let (e, bins) = ece(&p, &[0, 0], 10).unwrap();
        assert_eq!(e, 0.0);
        assert_eq!(bins.counts.iter().sum::<usize>(), 2);
        assert_eq!(bins.counts[9], 2, "confidence 1.0 lands in the last bin");

        // All confidence 0.6, 60% correct → 0 (single-bin match).
        let rows: Vec<Vec<f64>> = (0..10).map(|_| vec![0.6, 0.4]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let p = probs(&refs);
        let y: Vec<usize> = (0..10).map(|i| usize::from(i >= 6)).collect();
        let (e, _) = ece(&p, &y, 10).unwrap();
        assert!(e.abs() < 1e-12, "got {e}");
    }

    #[test]
    fn ece_hand_binned_case() {
        // Confidences {0.95,0.95,0.55,0.55}, correctness {1,0,1,0}.
        // Bin (0.9,1.0]: 2 samples, conf .95, acc .5 → (2/4)·0.45
        // Bin (0.5,0.6]: 2 samples, conf .55, acc .5 → (2/4)·0.05
        let p = probs(&[
            &[0.95, 0.05],
            &[0.95, 0.05],
            &[0.55, 0.45],
            &[0.55, 0.45],
        ]);
        let y = [0, 1, 0, 1];
        let (e, bins) = ece(&p, &y, 10).unwrap();
        assert!((e - 0.25).abs() < 1e-12, "got {e}");
        assert_eq!(bins.counts[9], 2);
        assert_eq!(bins.counts[5], 2);
        assert!((bins.mean_confidence[9] - 0.95).abs() < 1e-12);
        assert!((bins.accuracy[5] - 0.5).abs() < 1e-12);
        // Invariants: edges 0..1 strictly increasing, counts sum to N.
        assert_eq!(bins.bin_edges[0], 0.0);
        assert_eq!(bins.bin_edges[10], 1.0);
        assert!(bins.bin_edges.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(bins.counts.iter().sum::<usize>(), 4);
    }

    #[test]
    fn ece_and_brier_are_permutation_invariant() {
        let p = random_probs(50, 3, 77);
        let mut rng = seeds::rng_from(78);
        let y: Vec<usize> = (0..50).map(|_| rng.random_range(0..3)).collect();
        let (e0, _) = ece(&p, &y, 10).unwrap();
        let b0 = brier(&p, &y).unwrap();

        // Reverse the sample order.
        let rows: Vec<Vec<f64>> = (0..50).rev().map(|i| p.row(i).to_vec()).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let pr = probs(&refs);
        let yr: Vec<usize> = y.iter().rev().copied().collect();
        let (e1, _) = ece(&pr, &yr, 10).unwrap();
        let b1 = brier(&pr, &yr).unwrap();
        assert!((e0 - e1).abs() < 1e-12);
        assert!((b0 - b1).abs() < 1e-12);
    }

    #[test]
    fn disagreement_rate_cases() {
        let a = probs(&[&[0.9, 0.1], &[0.9, 0.1], &[0.1, 0.9], &[0.1, 0.9]]);
        let b = probs(&[&[0.9, 0.1], &[0.1, 0.9], &[0.9, 0.1], &[0.1, 0.9]]);

        // Identical batches → zero matrix.
        let (mat, _) = disagreement_rates(&[a.clone(), a.clone()], None).unwrap();
        assert!(mat.values.iter().all(|&v| v == 0.0));

        // Disagree on exactly half.
        let (mat, vs) = disagreement_rates(&[a.clone(), b.clone()], Some(&[0, 0, 1, 1])).unwrap();
        assert_eq!(mat.get(0, 1), 0.5);
        assert_eq!(mat.get(1, 0), 0.5);
        assert_eq!(mat.get(0, 0), 0.0);
        let vs = vs.unwrap();
        assert_eq!(vs[0], 0.0, "hypothesis 0 matches the labels");
        assert_eq!(vs[1], 0.5);

        assert!(disagreement_rates(std::slice::from_ref(&a), None).is_err(), "M=1 rejected");
    }

    #[test]
    fn disagreement_matches_brute_force_for_m3() {
        let ps: Vec<ProbBatch> = (0..3).map(|i| random_probs(40, 4, 100 + i)).collect();
        let (mat, _) = disagreement_rates(&ps, None).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j {
                    0.0
                } else {
                    (0..40)
                        .filter(|&s| argmax_row(ps[i].row(s)) != argmax_row(ps[j].row(s)))
                        .count() as f64
                        / 40.0
                };
                assert_eq!(mat.get(i, j), expect);
            }
        }
        // Symmetry + range invariants.
        for i in 0..3 {
            assert_eq!(mat.get(i, i), 0.0);
            for j in 0..3 {
                assert_eq!(mat.get(i, j), mat.get(j, i));
                assert!((0.0..=1.0).contains(&mat.get(i, j)));
            }
        }
    }

    #[test]
    fn kl_matrix_hand_case_and_asymmetry() {
        let a = probs(&[&[0.7, 0.3]]);
        let b = probs(&[&[0.4, 0.6]]);
        let mat = kl_matrix(&[a.clone(), b.clone()]).unwrap();
        // Entry (row q=1, col p=0) = KL[p_0 ‖ p_1].
        let kl_ab = 0.7 * (0.7f64 / 0.4).ln() + 0.3 * (0.3f64 / 0.6).ln();
        let kl_ba = 0.4 * (0.4f64 / 0.7).ln() + 0.6 * (0.6f64 / 0.3).ln();
        assert!((mat.get(1, 0) - kl_ab).abs() < 1e-9);
        assert!((mat.get(0, 1) - kl_ba).abs() < 1e-9);
        assert!(mat.get(0, 1) != mat.get(1, 0), "KL is asymmetric here");
        assert_eq!(mat.get(0, 0), 0.0);

        // Identical hypotheses → diagonal and off-diagonal both ≤ 1e-10.
        let mat = kl_matrix(&[a.clone(), a.clone()]).unwrap();
        assert!(mat.values.iter().all(|&v| v.abs() <= 1e-10));
    }

    #[test]
    fn error_profile_patterns() {
        let perfect = probs(&[&[0.9, 0.1], &[0.1, 0.9], &[0.9, 0.1]]);
        let y = [0usize, 1, 0];

        // All correct → single all-ones pattern.
        let prof = hypothesis_error_profile(&[perfect.clone(), perfect.clone()], &y).unwrap();
        assert_eq!(prof.counts[0b11], 3);
        assert_eq!(prof.counts.iter().sum::<usize>(), 3);

        // Hypothesis 0 perfect, hypothesis 1 mixed → patterns ⊆ {01, 11}.
        let mixed = probs(&[&[0.9, 0.1], &[0.8, 0.2], &[0.2, 0.8]]);
        let prof = hypothesis_error_profile(&[perfect.clone(), mixed.clone()], &y).unwrap();
        for (pat, &count) in prof.counts.iter().enumerate() {
            if count > 0 {
                assert!(pat & 0b01 != 0, "hypothesis 0 should always be correct");
            }
        }
        assert_eq!(prof.counts[0b01], 2);
        assert_eq!(prof.counts[0b11], 1);
    }

    #[test]
    fn new_errors_match_set_difference() {
        let y = [0usize, 1, 0, 1];
        let before = probs(&[&[0.9, 0.1], &[0.1, 0.9], &[0.9, 0.1], &[0.1, 0.9]]);
        let after = probs(&[&[0.9, 0.1], &[0.9, 0.1], &[0.1, 0.9], &[0.1, 0.9]]);
        let pb = hypothesis_error_profile(&[before.clone(), before.clone()], &y).unwrap();
        let pa = hypothesis_error_profile(&[after.clone(), after.clone()], &y).unwrap();
        // Samples 1 and 2 became wrong for both hypotheses → 4 new errors.
        assert_eq!(new_error_count(&pb, &pa).unwrap(), 4);
        // Brute force over (sample, hypothesis) pairs.
        let mut brute = 0;
        for s in 0..4 {
            for h in 0..2 {
                let was = pb.patterns[s] & (1 << h) != 0;
                let is = pa.patterns[s] & (1 << h) != 0;
                if was && !is {
                    brute += 1;
                }
            }
        }
        assert_eq!(brute, 4);
        // Reverse direction: nothing was wrong before, so no pair is
        // "correct after but wrong before".
        assert_eq!(new_error_count(&pa, &pb).unwrap(), 0);
    }

    #[test]
    fn report_and_writers() {
        let dir = std::env::temp_dir().join(format!("analysis-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let ps: Vec<ProbBatch> = (0..2).map(|i| random_probs(30, 3, 200 + i)).collect();
        let mut rng = seeds::rng_from(202);
        let y: Vec<usize> = (0..30).map(|_| rng.random_range(0..3)).collect();

        let report = build_report(&ps, 0, &y, "runlog.csv").unwrap();
        assert_eq!(report.per_class_accuracy.len(), 3);
        let mean = report.per_class_accuracy.iter().sum::<f64>() / 3.0;
        assert!((report.per_class_average - mean).abs() < 1e-15);
        assert_eq!(report.runlog, "runlog.csv");
        assert!(report.disagreement_vs_truth.iter().all(|v| (0.0..=1.0).contains(v)));

        // JSON round-trip is exact.
        let json = serde_json::to_string(&report).unwrap();
        let back: AnalysisReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);

        // bins.csv: header + one row per bin.
        let bp = dir.join("bins.csv");
        write_bins_csv(&report.bins, &bp).unwrap();
        let text = std::fs::read_to_string(&bp).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "edge_lo,edge_hi,count,conf,acc");
        assert_eq!(lines.count(), 10);

        // Matrix CSV: header + M rows, entries parse back exactly.
        let mp = dir.join("klmatrix.csv");
        write_matrix_csv(&report.kl, &mp).unwrap();
        let text = std::fs::read_to_string(&mp).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "h0,h1");
        assert_eq!(lines.len(), 3);
        let first: f64 = lines[1].split(',').next().unwrap().parse().unwrap();
        assert_eq!(first, report.kl.get(0, 0));

        // predictions.csv: header + one row per sample.
        let pp = dir.join("predictions.csv");
        write_predictions_csv(&ps, &y, &pp).unwrap();
        let text = std::fs::read_to_string(&pp).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "sample,label,h0_pred,h0_conf,h1_pred,h1_conf,ensemble_pred,ensemble_conf"
        );
        assert_eq!(lines.len(), 31);

        // Single-hypothesis report degenerates cleanly.
        let solo = build_report(&ps[..1], 0, &y, "runlog.csv").unwrap();
        assert_eq!(solo.disagreement.m, 1);
        assert_eq!(solo.disagreement_vs_truth.len(), 1);
        assert!((solo.disagreement_vs_truth[0] - (1.0 - solo.accuracy_anchor)).abs() < 1e-15);

        std::fs::remove_dir_all(&dir).unwrap();
    }
}
