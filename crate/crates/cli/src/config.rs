//! Configuration resolution.
//!
//! Three layers, later wins, with per-key provenance:
//!
//! 1. preset defaults (`desk` unless another preset is named),
//! 2. a flat `key = value` config file,
//! 3. command-line flags.
//!
//! The product is a [`ResolvedConfig`]: a fully-typed pipeline description
//! plus the output root and the provenance of every key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hdmi_lab::adapt::{AdaptConfig, AnchorPolicy, ModelConfig, PipelineConfig, SourceConfig};
use hdmi_lab::objectives::ObjectiveKind;
use hdmi_lab::shiftdata::{Generator, Shift, ShiftSpec};
use hdmi_lab::{Error, Result};
use serde::{Deserialize, Serialize};

/// Output root when neither `HDMI_LAB_OUT`, the config file, nor `--out`
/// names one.
pub const DEFAULT_OUT: &str = "runs";

/// Environment variable overriding the built-in default output root.
pub const OUT_ENV_VAR: &str = "HDMI_LAB_OUT";

/// Objective value that turns adaptation off entirely.
pub const SOURCE_ONLY: &str = "source_only";

/// Every key the config file (and the matching `--key` flag) understands,
/// with a one-line description used in error messages and `--help`.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    ("generator", "dataset family: two_moons | gauss_blobs"),
    ("n_source", "number of source samples"),
    ("n_target", "number of target samples"),
    ("noise_sd", "per-coordinate Gaussian noise of the generator"),
    ("shift", "covariate-shift family: rotation | affine"),
    ("rotation_deg", "rotation angle in degrees (shift = rotation)"),
    ("translation", "comma-separated translation vector (shift = affine)"),
    ("scale", "multiplicative scale (shift = affine)"),
    ("k", "number of classes"),
    ("m", "number of hypotheses"),
    ("variant", "hypothesis construction: ic | mc"),
    ("dropout_rate", "dropout rate of the classifier hidden layer"),
    ("source_steps", "source-training steps"),
    ("source_batch_size", "source-training batch size"),
    ("source_lr", "source-training learning rate"),
    ("source_momentum", "source-training momentum"),
    ("source_nesterov", "source-training Nesterov flag: true | false"),
    ("source_weight_decay", "source-training weight decay"),
    (
        "source_extractor_lr_multiplier",
        "source-phase extractor learning-rate multiplier",
    ),
    (
        "source_train_dropout",
        "train-mode dropout during source loss passes: true | false",
    ),
    ("source_eval_every", "source-training evaluation interval"),
    (
        "objective",
        "adaptation objective: hdmi | mi_ensemble | mi_single | hd_only | \
         cond_entropy_hd | mi_l2 | mi_l2_source | source_only",
    ),
    ("lambda", "disparity / penalty weight λ"),
    ("divergence", "disparity divergence: cross_entropy | kl"),
    ("reduction", "disparity reduction over pairs: mean | sum"),
    ("anchor", "anchor policy: random | a fixed head index"),
    ("steps", "adaptation steps"),
    ("batch_size", "adaptation batch size"),
    ("lr", "adaptation learning rate"),
    ("momentum", "adaptation momentum"),
    ("nesterov", "adaptation Nesterov flag: true | false"),
    ("weight_decay", "adaptation weight decay"),
    (
        "extractor_lr_multiplier",
        "adaptation-phase extractor learning-rate multiplier",
    ),
    (
        "freeze_classifiers",
        "freeze classifier heads during adaptation: true | false",
    ),
    (
        "shared_extractor",
        "share one extractor across heads during adaptation: true | false",
    ),
    (
        "train_dropout",
        "train-mode dropout during adaptation loss passes: true | false",
    ),
    ("eval_every", "adaptation evaluation interval"),
    ("seed", "master seed; data, source, and adaptation derive from it"),
    ("out", "output root directory"),
];

fn known_key_list() -> String {
    KNOWN_KEYS
        .iter()
        .map(|(k, _)| *k)
        .collect::<Vec<_>>()
        .join(", ")
}

/// Where a resolved key's value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Default,
    File,
    Flag,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Default => "default",
            Provenance::File => "file",
            Provenance::Flag => "flag",
        })
    }
}

/// Typed flag-side overrides; `None` means the flag was not given. The
/// config-file side arrives as strings and is parsed through the same
/// setters.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub generator: Option<String>,
    pub n_source: Option<usize>,
    pub n_target: Option<usize>,
    pub noise_sd: Option<f64>,
    pub shift: Option<String>,
    pub rotation_deg: Option<f64>,
    pub translation: Option<String>,
    pub scale: Option<f64>,
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub variant: Option<String>,
    pub dropout_rate: Option<f64>,
    pub source_steps: Option<usize>,
    pub source_batch_size: Option<usize>,
    pub source_lr: Option<f64>,
    pub source_momentum: Option<f64>,
    pub source_nesterov: Option<bool>,
    pub source_weight_decay: Option<f64>,
    pub source_extractor_lr_multiplier: Option<f64>,
    pub source_train_dropout: Option<bool>,
    pub source_eval_every: Option<usize>,
    pub objective: Option<String>,
    pub lambda: Option<f64>,
    pub divergence: Option<String>,
    pub reduction: Option<String>,
    pub anchor: Option<String>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub nesterov: Option<bool>,
    pub weight_decay: Option<f64>,
    pub extractor_lr_multiplier: Option<f64>,
    pub freeze_classifiers: Option<bool>,
    pub shared_extractor: Option<bool>,
    pub train_dropout: Option<bool>,
    pub eval_every: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// The shift family named by the `shift` key, before the angle / translation
/// / scale details are attached.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShiftKind {
    Rotation,
    Affine,
}

impl std::str::FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(ShiftKind::Rotation),
            "affine" => Ok(ShiftKind::Affine),
            other => Err(Error::config(format!(
                "unknown shift {other:?}; expected rotation or affine"
            ))),
        }
    }
}

/// Mutable resolution state: preset defaults plus whatever the file and the
/// flags have overridden so far.
struct Staging {
    generator: Generator,
    n_source: usize,
    n_target: usize,
    noise_sd: f64,
    shift_kind: ShiftKind,
    rotation_deg: f64,
    translation: Vec<f64>,
    scale: f64,
    k: usize,
    model: ModelConfig,
    source: SourceConfig,
    adapt: AdaptConfig,
    objective: String,
    seed: u64,
    out: PathBuf,
    provenance: BTreeMap<String, Provenance>,
}

impl Staging {
    fn from_preset(preset: &str) -> Result<Staging> {
        let (generator, noise_sd, rotation_deg, k) = match preset {
            "desk" => (Generator::TwoMoons, 0.08, 40.0, 2),
            "blobs" => (Generator::GaussBlobs, 0.5, 25.0, 3),
            other => {
                return Err(Error::config(format!(
                    "unknown preset {other:?}; expected desk or blobs"
                )))
            }
        };
        let mut provenance = BTreeMap::new();
        for (key, _) in KNOWN_KEYS {
            provenance.insert((*key).to_string(), Provenance::Default);
        }
        Ok(Staging {
            generator,
            n_source: 600,
            n_target: 600,
            noise_sd,
            shift_kind: ShiftKind::Rotation,
            rotation_deg,
            translation: vec![0.0, 0.0],
            scale: 1.0,
            k,
            model: ModelConfig::default(),
            source: SourceConfig::default(),
            adapt: AdaptConfig::default(),
            objective: ObjectiveKind::Hdmi.as_str().to_string(),
            seed: 1,
            out: default_out_root(),
            provenance,
        })
    }

    fn mark(&mut self, key: &str, prov: Provenance) {
        self.provenance.insert(key.to_string(), prov);
    }

    /// Apply one `key = value` pair given in string form (the config-file
    /// path). Unknown keys and malformed values are validation errors.
    fn apply_str(&mut self, key: &str, value: &str, prov: Provenance) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("key {key}: cannot parse {value:?}")))
        }
        fn boolean(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(Error::config(format!(
                    "key {key}: expected true or false, got {other:?}"
                ))),
            }
        }
        match key {
            "generator" => self.generator = value.parse()?,
            "n_source" => self.n_source = num(key, value)?,
            "n_target" => self.n_target = num(key, value)?,
            "noise_sd" => self.noise_sd = num(key, value)?,
            "shift" => self.shift_kind = value.parse()?,
            "rotation_deg" => self.rotation_deg = num(key, value)?,
            "translation" => self.translation = parse_f64_list(value)?,
            "scale" => self.scale = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "m" => self.model.m = num(key, value)?,
            "variant" => self.model.variant = value.parse()?,
            "dropout_rate" => self.model.dropout_rate = num(key, value)?,
            "source_steps" => self.source.steps = num(key, value)?,
            "source_batch_size" => self.source.batch_size = num(key, value)?,
            "source_lr" => self.source.lr = num(key, value)?,
            "source_momentum" => self.source.momentum = num(key, value)?,
            "source_nesterov" => self.source.nesterov = boolean(key, value)?,
            "source_weight_decay" => self.source.weight_decay = num(key, value)?,
            "source_extractor_lr_multiplier" => {
                self.source.extractor_lr_multiplier = num(key, value)?
            }
            "source_train_dropout" => self.source.train_dropout = boolean(key, value)?,
            "source_eval_every" => self.source.eval_every = num(key, value)?,
            "objective" => self.objective = parse_objective_label(value)?,
            "lambda" => self.adapt.lambda = num(key, value)?,
            "divergence" => self.adapt.divergence = value.parse()?,
            "reduction" => self.adapt.reduction = value.parse()?,
            "anchor" => self.adapt.anchor_policy = parse_anchor(value)?,
            "steps" => self.adapt.steps = num(key, value)?,
            "batch_size" => self.adapt.batch_size = num(key, value)?,
            "lr" => self.adapt.lr = num(key, value)?,
            "momentum" => self.adapt.momentum = num(key, value)?,
            "nesterov" => self.adapt.nesterov = boolean(key, value)?,
            "weight_decay" => self.adapt.weight_decay = num(key, value)?,
            "extractor_lr_multiplier" => self.adapt.extractor_lr_multiplier = num(key, value)?,
            "freeze_classifiers" => self.adapt.freeze_classifiers = boolean(key, value)?,
            "shared_extractor" => self.adapt.shared_extractor = boolean(key, value)?,
            "train_dropout" => self.adapt.train_dropout = boolean(key, value)?,
            "eval_every" => self.adapt.eval_every = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            unknown => {
                return Err(Error::config(format!(
                    "unknown key {unknown:?}; known keys: {}",
                    known_key_list()
                )))
            }
        }
        self.mark(key, prov);
        Ok(())
    }

    /// Apply the typed flag-side overrides (always [`Provenance::Flag`]).
    /// Scalars are routed through the same string setters as the config file
    /// (`{:?}` renders `f64` losslessly); `out` stays a typed path.
    fn apply_flags(&mut self, o: &Overrides) -> Result<()> {
        macro_rules! fwd {
            ($field:ident) => {
                if let Some(v) = &o.$field {
                    self.apply_str(stringify!($field), v.as_str(), Provenance::Flag)?;
                }
            };
            ($field:ident, $fmt:literal) => {
                if let Some(v) = &o.$field {
                    self.apply_str(stringify!($field), &format!($fmt, v), Provenance::Flag)?;
                }
            };
        }
        fwd!(generator);
        fwd!(n_source, "{}");
        fwd!(n_target, "{}");
        fwd!(noise_sd, "{:?}");
        fwd!(shift);
        fwd!(rotation_deg, "{:?}");
        fwd!(translation);
        fwd!(scale, "{:?}");
        fwd!(k, "{}");
        fwd!(m, "{}");
        fwd!(variant);
        fwd!(dropout_rate, "{:?}");
        fwd!(source_steps, "{}");
        fwd!(source_batch_size, "{}");
        fwd!(source_lr, "{:?}");
        fwd!(source_momentum, "{:?}");
        fwd!(source_nesterov, "{}");
        fwd!(source_weight_decay, "{:?}");
        fwd!(source_extractor_lr_multiplier, "{:?}");
        fwd!(source_train_dropout, "{}");
        fwd!(source_eval_every, "{}");
        fwd!(objective);
        fwd!(lambda, "{:?}");
        fwd!(divergence);
        fwd!(reduction);
        fwd!(anchor);
        fwd!(steps, "{}");
        fwd!(batch_size, "{}");
        fwd!(lr, "{:?}");
        fwd!(momentum, "{:?}");
        fwd!(nesterov, "{}");
        fwd!(weight_decay, "{:?}");
        fwd!(extractor_lr_multiplier, "{:?}");
        fwd!(freeze_classifiers, "{}");
        fwd!(shared_extractor, "{}");
        fwd!(train_dropout, "{}");
        fwd!(eval_every, "{}");
        fwd!(seed, "{}");
        if let Some(v) = &o.out {
            self.out = v.clone();
            self.mark("out", Provenance::Flag);
        }
        Ok(())
    }

    fn provenance_of(&self, key: &str) -> Provenance {
        self.provenance
            .get(key)
            .copied()
            .unwrap_or(Provenance::Default)
    }

    fn finish(mut self) -> Result<ResolvedConfig> {
        // A detail key of the other shift family must not be silently
        // ignored.
        match self.shift_kind {
            ShiftKind::Rotation => {
                for key in ["translation", "scale"] {
                    if self.provenance_of(key) != Provenance::Default {
                        return Err(Error::config(format!(
                            "key {key} is set but shift = rotation; set shift = affine \
                             or drop the key"
                        )));
                    }
                }
            }
            ShiftKind::Affine => {
                if self.provenance_of("rotation_deg") != Provenance::Default {
                    return Err(Error::config(
                        "key rotation_deg is set but shift = affine; set shift = rotation \
                         or drop the key",
                    ));
                }
            }
        }
        let shift = match self.shift_kind {
            ShiftKind::Rotation => Shift::Rotation {
                rotation_deg: self.rotation_deg,
            },
            ShiftKind::Affine => Shift::Affine {
                translation: self.translation.clone(),
                scale: self.scale,
            },
        };
        // One master seed feeds every phase; the phases themselves derive
        // disjoint streams from it.
        self.source.seed = self.seed;
        self.adapt.seed = self.seed;
        let spec = ShiftSpec {
            generator: self.generator,
            n_source: self.n_source,
            n_target: self.n_target,
            noise_sd: self.noise_sd,
            shift,
            k: self.k,
            seed: self.seed,
        };
        let lambda = self.adapt.lambda;
        let adapt = if self.objective == SOURCE_ONLY {
            None
        } else {
            let mut a = self.adapt.clone();
            a.objective = self.objective.parse()?;
            Some(a)
        };
        let pipeline = PipelineConfig {
            shift: spec,
            model: self.model.clone(),
            source: self.source.clone(),
            adapt,
        };
        pipeline.validate()?;
        Ok(ResolvedConfig {
            pipeline,
            objective: self.objective,
            lambda,
            out_root: self.out,
            provenance: self.provenance,
        })
    }
}

/// Comma-separated real numbers (used by `translation` and the sweep λ
/// axis).
pub fn parse_f64_list(value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::config(format!("cannot parse {t:?} as a number")))
        })
        .collect()
}

/// `objective` accepts the seven objective kinds plus `source_only`.
fn parse_objective_label(value: &str) -> Result<String> {
    if value == SOURCE_ONLY {
        return Ok(value.to_string());
    }
    let kind: ObjectiveKind = value.parse().map_err(|_| {
        Error::config(format!(
            "unknown objective {value:?}; expected one of {}, {SOURCE_ONLY}",
            ObjectiveKind::ALL.map(|k| k.as_str()).join(", ")
        ))
    })?;
    Ok(kind.as_str().to_string())
}

fn parse_anchor(value: &str) -> Result<AnchorPolicy> {
    if value == "random" {
        return Ok(AnchorPolicy::SeededRandom);
    }
    value
        .parse::<usize>()
        .map(AnchorPolicy::Fixed)
        .map_err(|_| {
            Error::config(format!(
                "anchor must be \"random\" or a head index, got {value:?}"
            ))
        })
}

/// `HDMI_LAB_OUT` overrides the built-in default; file and flags override
/// both.
pub fn default_out_root() -> PathBuf {
    match std::env::var_os(OUT_ENV_VAR) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(DEFAULT_OUT),
    }
}

/// Parse a flat `key = value` config file. `#` starts a comment line; blank
/// lines are ignored. Errors carry the file and line.
pub fn parse_config_file(path: &Path) -> Result<Vec<(String, String, usize)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::parse(
                path,
                idx + 1,
                format!("expected key = value, got {line:?}"),
            ));
        };
        pairs.push((key.trim().to_string(), value.trim().to_string(), idx + 1));
    }
    Ok(pairs)
}

/// A fully-resolved invocation: typed pipeline, output root, and the
/// provenance of every known key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub pipeline: PipelineConfig,
    /// The objective label as given; `source_only` ⇔ `pipeline.adapt` is
    /// `None`.
    pub objective: String,
    /// λ as resolved, kept even for source-only runs so run-directory names
    /// stay uniform.
    pub lambda: f64,
    pub out_root: PathBuf,
    pub provenance: BTreeMap<String, Provenance>,
}

impl ResolvedConfig {
    /// `<objective>_m<M>_l<λ>_s<seed>`.
    pub fn run_dir_name(&self) -> String {
        format!(
            "{}_m{}_l{}_s{}",
            self.objective, self.pipeline.model.m, self.lambda, self.pipeline.shift.seed
        )
    }

    /// The keys that differ from the preset defaults, rendered for humans.
    pub fn override_summary(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        for (key, prov) in &self.provenance {
            if *prov != Provenance::Default {
                parts.push(format!("{key} ({prov})"));
            }
        }
        if parts.is_empty() {
            "all defaults".to_string()
        } else {
            parts.join(", ")
        }
    }
}

/// Resolve preset defaults, then the optional config file, then flags.
pub fn resolve(
    preset: Option<&str>,
    config_file: Option<&Path>,
    flags: &Overrides,
) -> Result<ResolvedConfig> {
    let mut staging = Staging::from_preset(preset.unwrap_or("desk"))?;
    if let Some(path) = config_file {
        for (key, value, line) in parse_config_file(path)? {
            staging
                .apply_str(&key, &value, Provenance::File)
                .map_err(|e| match e {
                    Error::Config(msg) => Error::parse(path, line, msg),
                    other => other,
                })?;
        }
    }
    staging.apply_flags(flags)?;
    staging.finish()
}

/// First free directory among `root/name`, `root/name_2`, `root/name_3`, …
pub fn unique_dir(root: &Path, name: &str) -> PathBuf {
    let first = root.join(name);
    if !first.exists() {
        return first;
    }
    for i in 2.. {
        let candidate = root.join(format!("{name}_{i}"));
        if !candidate.exists() {
            return candidate;
        }
    }
    unreachable!("ran out of suffixes");
}
