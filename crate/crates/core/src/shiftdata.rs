//! Synthetic source/target dataset pairs with a controllable,
//! label-preserving covariate shift, plus CSV ingestion and batching.
//!
//! Both generators are 2-D and class-balanced. The target domain is drawn
//! from the *same* label-conditional process as the source and then pushed
//! through a deterministic, label-preserving transform: a rotation about
//! the target sample centroid, or a global translation + scale. Target
//! labels are recorded for evaluation but kept out of the target
//! [`Dataset`] itself, so adaptation code cannot touch them by
//! construction.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::seeds;

/// Radius of the circle the Gaussian-blob means sit on.
const BLOB_RADIUS: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    TwoMoons,
    GaussBlobs,
}

impl std::fmt::Display for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Generator::TwoMoons => "two_moons",
            Generator::GaussBlobs => "gauss_blobs",
        })
    }
}

impl std::str::FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_moons" => Ok(Generator::TwoMoons),
            "gauss_blobs" => Ok(Generator::GaussBlobs),
            _ => Err(Error::config(format!(
                "unknown generator {s:?}; expected two_moons or gauss_blobs"
            ))),
        }
    }
}

/// The label-preserving transform applied to the target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Shift {
    /// Rotate every target point by `rotation_deg` (counterclockwise,
    /// degrees) about the target sample centroid.
    Rotation { rotation_deg: f64 },
    /// `x ↦ scale·x + translation`.
    Affine { translation: Vec<f64>, scale: f64 },
}

/// Full recipe for one source/target pair. `generate` is a pure function
/// of this value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub generator: Generator,
    pub n_source: usize,
    pub n_target: usize,
    pub noise_sd: f64,
    pub shift: Shift,
    pub k: usize,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config(format!("K must be ≥ 2, got {}", self.k)));
        }
        if self.generator == Generator::TwoMoons && self.k != 2 {
            return Err(Error::config(format!(
                "two_moons is a K=2 generator, got K={}",
                self.k
            )));
        }
        if self.n_source < self.k || self.n_target < self.k {
            return Err(Error::config(format!(
                "need at least K={} samples per domain, got n_source={}, n_target={}",
                self.k, self.n_source, self.n_target
            )));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::config(format!(
                "noise_sd must be finite and ≥ 0, got {}",
                self.noise_sd
            )));
        }
        match &self.shift {
            Shift::Rotation { rotation_deg } => {
                if !rotation_deg.is_finite() {
                    return Err(Error::config("rotation_deg must be finite"));
                }
            }
            Shift::Affine { translation, scale } => {
                if translation.len() != 2 {
                    return Err(Error::config(format!(
                        "translation must have 2 components for 2-D generators, got {}",
                        translation.len()
                    )));
                }
                if translation.iter().any(|t| !t.is_finite()) {
                    return Err(Error::config("translation must be finite"));
                }
                if !(scale.is_finite() && *scale > 0.0) {
                    return Err(Error::config(format!(
                        "scale must be finite and > 0, got {scale}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A feature matrix with optional labels. Target datasets carry `y = None`;
/// their ground truth lives in a sibling labels file consumed only by
/// evaluation code.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Mat,
    pub y: Option<Vec<usize>>,
    pub k: usize,
    pub domain_tag: String,
}

impl Dataset {
    pub fn new(x: Mat, y: Option<Vec<usize>>, k: usize, domain_tag: impl Into<String>) -> Result<Self> {
        let ds = Dataset {
            x,
            y,
            k,
            domain_tag: domain_tag.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.x.is_finite() {
            return Err(Error::domain(format!(
                "dataset {:?} contains non-finite features",
                self.domain_tag
            )));
        }
        if let Some(y) = &self.y {
            if y.len() != self.x.rows() {
                return Err(Error::domain(format!(
                    "dataset {:?}: {} labels for {} rows",
                    self.domain_tag,
                    y.len(),
                    self.x.rows()
                )));
            }
            let mut counts = vec![0usize; self.k];
            for &label in y {
                if label >= self.k {
                    return Err(Error::domain(format!(
                        "dataset {:?}: label {} out of range for K={}",
                        self.domain_tag, label, self.k
                    )));
                }
                counts[label] += 1;
            }
            if let Some(empty) = counts.iter().position(|&c| c == 0) {
                return Err(Error::domain(format!(
                    "dataset {:?}: class {} has no samples",
                    self.domain_tag, empty
                )));
            }
        }
        Ok(())
    }
}

/// Output of [`generate`]: a labeled source, an unlabeled target, and the
/// target's held-out ground truth.
#[derive(Clone, Debug)]
pub struct GeneratedPair {
    pub source: Dataset,
    pub target: Dataset,
    pub target_labels: Vec<usize>,
}

/// Per-class sample counts: as balanced as integer division allows
/// (every count within ±1 of n/k).
fn class_counts(n: usize, k: usize) -> Vec<usize> {
    let base = n / k;
    let extra = n % k;
    (0..k).map(|c| base + usize::from(c < extra)).collect()
}

/// Noiseless class-conditional mean curve/point for parameter `t ∈ [0,1]`.
/// Two moons traces the class's arc; blobs ignore `t` and return the mean.
fn class_process_point(generator: Generator, k: usize, class: usize, t: f64) -> (f64, f64) {
    match generator {
        Generator::TwoMoons => {
            let a = t * std::f64::consts::PI;
            if class == 0 {
                (a.cos(), a.sin())
            } else {
                (1.0 - a.cos(), 0.5 - a.sin())
            }
        }
        Generator::GaussBlobs => {
            let angle = 2.0 * std::f64::consts::PI * class as f64 / k as f64;
            (BLOB_RADIUS * angle.cos(), BLOB_RADIUS * angle.sin())
        }
    }
}

/// Draw `n` class-balanced samples from the label-conditional process,
/// then shuffle so class blocks do not survive into batch order.
fn draw_domain(spec: &ShiftSpec, n: usize, seed: u64) -> Result<(Mat, Vec<usize>)> {
    let mut rng = seeds::rng_from(seed);
    let noise = Normal::new(0.0, spec.noise_sd)
        .map_err(|e| Error::config(format!("invalid noise_sd: {e}")))?;
    let counts = class_counts(n, spec.k);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let t = rng.random::<f64>();
            let (mx, my) = class_process_point(spec.generator, spec.k, class, t);
            let px = mx + noise.sample(&mut rng);
            let py = my + noise.sample(&mut rng);
            points.push((px, py));
            labels.push(class);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut x = Mat::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    for (row, &src) in order.iter().enumerate() {
        x.set(row, 0, points[src].0);
        x.set(row, 1, points[src].1);
        y.push(labels[src]);
    }
    Ok((x, y))
}

/// Apply the label-preserving shift in place. Exact-zero shifts
/// short-circuit so an unshifted target is bit-identical to the raw draw.
fn apply_shift(x: &mut Mat, shift: &Shift) {
    match shift {
        Shift::Rotation { rotation_deg } => {
            if *rotation_deg == 0.0 {
                return;
            }
            let n = x.rows() as f64;
            let (mut cx, mut cy) = (0.0, 0.0);
            for row in x.iter_rows() {
                cx += row[0];
                cy += row[1];
            }
            cx /= n;
            cy /= n;
            let (s, c) = rotation_deg.to_radians().sin_cos();
            for i in 0..x.rows() {
                let dx = x.get(i, 0) - cx;
                let dy = x.get(i, 1) - cy;
                x.set(i, 0, c * dx - s * dy + cx);
                x.set(i, 1, s * dx + c * dy + cy);
            }
        }
        Shift::Affine { translation, scale } => {
            if *scale == 1.0 && translation.iter().all(|&t| t == 0.0) {
                return;
            }
            for i in 0..x.rows() {
                for (j, &t) in translation.iter().enumerate() {
                    x.set(i, j, scale * x.get(i, j) + t);
                }
            }
        }
    }
}

/// Generate a source/target pair per `spec`. Deterministic: equal specs
/// produce bit-identical datasets.
pub fn generate(spec: &ShiftSpec) -> Result<GeneratedPair> {
    spec.validate()?;
    let (sx, sy) = draw_domain(spec, spec.n_source, seeds::derive_seed(spec.seed, "data.source"))?;
    let (mut tx, ty) = draw_domain(spec, spec.n_target, seeds::derive_seed(spec.seed, "data.target"))?;
    apply_shift(&mut tx, &spec.shift);
    let source = Dataset::new(sx, Some(sy), spec.k, "source")?;
    let target = Dataset::new(tx, None, spec.k, "target")?;
    Ok(GeneratedPair {
        source,
        target,
        target_labels: ty,
    })
}

// ---------------------------------------------------------------------------
// CSV I/O
// ---------------------------------------------------------------------------

/// Sibling path holding a dataset's held-out labels:
/// `dir/name.csv → dir/name.labels.csv`.
pub fn labels_path(dataset_path: &Path) -> PathBuf {
    let stem = dataset_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    dataset_path.with_file_name(format!("{stem}.labels.csv"))
}

/// Write `ds` as CSV with header `f0,...,f{d-1}[,label]`. Floats use the
/// shortest representation that parses back to the identical value.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..ds.d()).map(|j| format!("f{j}")).collect();
    out.push_str(&header.join(","));
    if ds.y.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for (i, row) in ds.x.iter_rows().enumerate() {
        let mut first = true;
        for &v in row {
            if !first {
                out.push(',');
            }
            first = false;
            out.push_str(&format!("{v:?}"));
        }
        if let Some(y) = &ds.y {
            out.push_str(&format!(",{}", y[i]));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load a dataset written by [`save_csv`]. With `labeled = false`, a
/// trailing `label` column (if present) is dropped. `k` overrides the
/// class count; when absent it is inferred as `max(label)+1` for labeled
/// loads and left at 0 for unlabeled ones.
pub fn load_csv(path: &Path, labeled: bool, k: Option<usize>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let file_has_label = cols.last() == Some(&"label");
    let d = if file_has_label { cols.len() - 1 } else { cols.len() };
    if d == 0 {
        return Err(Error::parse(path, 1, "no feature columns"));
    }
    for (j, name) in cols.iter().take(d).enumerate() {
        let expected = format!("f{j}");
        if *name != expected {
            return Err(Error::parse(
                path,
                1,
                format!("expected header column {expected:?}, found {name:?}"),
            ));
        }
    }
    if labeled && !file_has_label {
        return Err(Error::parse(path, 1, "labeled load but no label column"));
    }

    let expected_width = cols.len();
    let mut data = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut n = 0usize;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_width {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected {expected_width} fields, found {}", fields.len()),
            ));
        }
        for field in &fields[..d] {
            let v: f64 = field.parse().map_err(|_| {
                Error::parse(path, line_no, format!("invalid float {field:?}"))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(path, line_no, format!("non-finite value {field:?}")));
            }
            data.push(v);
        }
        if labeled {
            let raw = fields[d];
            let label: usize = raw.parse().map_err(|_| {
                Error::parse(path, line_no, format!("invalid label {raw:?}"))
            })?;
            if let Some(k) = k {
                if label >= k {
                    return Err(Error::parse(
                        path,
                        line_no,
                        format!("label {label} out of range for K={k}"),
                    ));
                }
            }
            labels.push(label);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::parse(path, 1, "no data rows"));
    }
    let x = Mat::from_vec(n, d, data);
    let tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    if labeled {
        let k = k.unwrap_or_else(|| labels.iter().max().map_or(0, |&m| m + 1));
        Dataset::new(x, Some(labels), k, tag)
    } else {
        Dataset::new(x, None, k.unwrap_or(0), tag)
    }
}

/// Write held-out labels as a one-column CSV with header `label`.
pub fn save_labels_csv(labels: &[usize], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(labels.len() * 3 + 6);
    out.push_str("label\n");
    for &l in labels {
        let _ = writeln!(out, "{l}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_labels_csv(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "label")) => {}
        Some((_, other)) => {
            return Err(Error::parse(
                path,
                1,
                format!("expected header \"label\", found {other:?}"),
            ))
        }
        None => return Err(Error::parse(path, 1, "empty file")),
    }
    let mut labels = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let l: usize = line
            .parse()
            .map_err(|_| Error::parse(path, idx + 1, format!("invalid label {line:?}")))?;
        labels.push(l);
    }
    Ok(labels)
}

/// Write the generating [`ShiftSpec`] as `manifest.json` next to the
/// datasets it produced.
pub fn save_manifest(spec: &ShiftSpec, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(spec)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<ShiftSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: ShiftSpec = serde_json::from_str(&text)?;
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Endless stream of row-index batches. Each epoch's permutation is a pure
/// function of `(seed, epoch)`; the final short batch of an epoch is
/// included.
#[derive(Clone, Debug)]
pub struct BatchIter {
    n: usize,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    epoch: u64,
    pos: usize,
    perm: Vec<usize>,
}

impl BatchIter {
    pub fn new(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Self> {
        if n < 1 {
            return Err(Error::config("batch_iterator needs a non-empty dataset"));
        }
        if batch_size < 1 {
            return Err(Error::config("batch_size must be ≥ 1"));
        }
        let mut it = BatchIter {
            n,
            batch_size,
            seed,
            shuffle,
            epoch: 0,
            pos: 0,
            perm: Vec::new(),
        };
        it.perm = it.epoch_perm(0);
        Ok(it)
    }

    fn epoch_perm(&self, epoch: u64) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.n).collect();
        if self.shuffle {
            let mut rng = seeds::rng_from(seeds::derive_seed_indexed(self.seed, "epoch", epoch));
            perm.shuffle(&mut rng);
        }
        perm
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    /// Next batch of row indices; rolls over to a fresh epoch permutation
    /// when the current one is exhausted.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.n {
            self.epoch += 1;
            self.perm = self.epoch_perm(self.epoch);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.n);
        let batch = self.perm[self.pos..end].to_vec();
        self.pos = end;
        batch
    }
}
