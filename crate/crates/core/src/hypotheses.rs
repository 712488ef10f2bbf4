//! Hypothesis sets: one feature extractor ψ feeding M classifier heads.
//!
//! A hypothesis is `h_i = f_i ∘ ψ`. Two ways to get M of them:
//!
//! - **IC** (independent classifiers): M parameter stores, each classifier
//!   initialized from its own derived seed.
//! - **MC** (Monte-Carlo dropout): one classifier store viewed through M
//!   *fixed* dropout masks; mask `i` is a pure function of the set's mask
//!   seed and `mask_id = i`, so each head is a stable sub-network.
//!
//! The extractor is shared by default; [`HypothesisSet::to_target`] can
//! split it into M identical copies for the independent-ψ ablation. After
//! `to_target`, classifier freezing is recorded on the set and enforced by
//! the adaptation loop (frozen stores are never stepped and their gradient
//! accumulators are cleared every step).

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::diffnet::{
    self, softmax, Activation, Checkpoint, Dropout, ForwardTape, LayerSpec, Network, ParamStore,
    ProbBatch,
};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::seeds;
use rand_chacha::ChaCha8Rng;

pub const SET_CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Independent classifier initializations.
    Ic,
    /// One classifier store, M fixed dropout masks.
    Mc,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Ic => "ic",
            Variant::Mc => "mc",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ic" => Ok(Variant::Ic),
            "mc" => Ok(Variant::Mc),
            _ => Err(Error::config(format!(
                "unknown variant {s:?}; expected ic or mc"
            ))),
        }
    }
}

/// Layer stacks for the extractor and the classifier head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub extractor: Vec<LayerSpec>,
    pub classifier: Vec<LayerSpec>,
}

impl ArchSpec {
    /// The stock architecture: extractor `[d_in→64 relu, 64→32 relu]`
    /// (32-wide bottleneck), classifier `[32→32 relu dropout, 32→K
    /// identity]`.
    pub fn default_arch(d_in: usize, num_classes: usize, dropout_rate: f64) -> Result<ArchSpec> {
        Ok(ArchSpec {
            extractor: vec![
                LayerSpec::plain(d_in, 64, Activation::Relu)?,
                LayerSpec::plain(64, 32, Activation::Relu)?,
            ],
            classifier: vec![
                LayerSpec::new(32, 32, Activation::Relu, dropout_rate)?,
                LayerSpec::plain(32, num_classes, Activation::Identity)?,
            ],
        })
    }

    fn build_networks(&self) -> Result<(Network, Network)> {
        let ext = Network::new(self.extractor.clone())?;
        let clf = Network::new(self.classifier.clone())?;
        if ext.out_dim() != clf.in_dim() {
            return Err(Error::config(format!(
                "extractor output dim {} does not match classifier input dim {}",
                ext.out_dim(),
                clf.in_dim()
            )));
        }
        Ok((ext, clf))
    }
}

/// Immutable copy of all parameter values at the end of source training;
/// aligned with the live set's store layout at snapshot time.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSnapshot {
    pub extractors: Vec<Vec<f64>>,
    pub classifiers: Vec<Vec<f64>>,
}

/// One shared feature extractor plus M classifier heads.
#[derive(Clone, Debug)]
pub struct HypothesisSet {
    extractor_net: Network,
    classifier_net: Network,
    /// One store when the extractor is shared; M after an independent-ψ
    /// split.
    extractor_stores: Vec<ParamStore>,
    /// M stores for IC; exactly one for MC.
    classifier_stores: Vec<ParamStore>,
    variant: Variant,
    m: usize,
    num_classes: usize,
    frozen_classifiers: bool,
    /// Root of the fixed MC mask streams.
    mask_seed: u64,
    anchor: Option<usize>,
    seed: u64,
}

/// Prediction mode for [`HypothesisSet::predict_all`].
pub enum PredictMode<'a> {
    /// Dropout off everywhere; MC heads coincide.
    Eval,
    /// IC heads resample dropout from `rng`; MC heads apply their fixed
    /// masks. `dropout: false` disables dropout while keeping the
    /// train-mode plumbing (ablation flag).
    Train { rng: &'a mut ChaCha8Rng, dropout: bool },
}

/// Tapes and probabilities from one training-mode forward pass of every
/// head; consumed by [`HypothesisSet::backward_train`].
pub struct TrainForward {
    pub probs: Vec<ProbBatch>,
    ext_tapes: Vec<ForwardTape>,
    clf_tapes: Vec<ForwardTape>,
}

impl HypothesisSet {
    /// Construct a fresh set. IC: M classifier stores with seeds derived
    /// per head. MC: one classifier store plus M reserved mask ids.
    pub fn build_set(arch: &ArchSpec, m: usize, variant: Variant, seed: u64) -> Result<Self> {
        if m < 1 {
            return Err(Error::config(format!("M must be ≥ 1, got {m}")));
        }
        let (extractor_net, classifier_net) = arch.build_networks()?;
        let extractor_stores = vec![extractor_net.init_params(seeds::derive_seed(seed, "extractor"))];
        let classifier_stores = match variant {
            Variant::Ic => (0..m)
                .map(|i| {
                    classifier_net.init_params(seeds::derive_seed_indexed(seed, "classifier", i as u64))
                })
                .collect(),
            Variant::Mc => vec![classifier_net.init_params(seeds::derive_seed(seed, "classifier"))],
        };
        let num_classes = classifier_net.out_dim();
        Ok(HypothesisSet {
            extractor_net,
            classifier_net,
            extractor_stores,
            classifier_stores,
            variant,
            m,
            num_classes,
            frozen_classifiers: false,
            mask_seed: seeds::derive_seed(seed, "mcmask"),
            anchor: None,
            seed,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn frozen_classifiers(&self) -> bool {
        self.frozen_classifiers
    }

    pub fn anchor(&self) -> Option<usize> {
        self.anchor
    }

    pub fn set_anchor(&mut self, anchor: usize) -> Result<()> {
        if anchor >= self.m {
            return Err(Error::config(format!(
                "anchor {anchor} out of range for M={}",
                self.m
            )));
        }
        self.anchor = Some(anchor);
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn extractor_net(&self) -> &Network {
        &self.extractor_net
    }

    pub fn classifier_net(&self) -> &Network {
        &self.classifier_net
    }

    pub fn extractor_stores(&self) -> &[ParamStore] {
        &self.extractor_stores
    }

    pub fn classifier_stores(&self) -> &[ParamStore] {
        &self.classifier_stores
    }

    /// Mutable store access for optimizers and gradient checks. The layout
    /// (store count, entry names, entry lengths) must not be changed.
    pub fn extractor_stores_mut(&mut self) -> &mut [ParamStore] {
        &mut self.extractor_stores
    }

    /// See [`Self::extractor_stores_mut`].
    pub fn classifier_stores_mut(&mut self) -> &mut [ParamStore] {
        &mut self.classifier_stores
    }

    /// Index of the extractor store feeding head `head`.
    pub fn extractor_index(&self, head: usize) -> usize {
        if self.extractor_stores.len() == 1 {
            0
        } else {
            head
        }
    }

    /// Index of the classifier store behind head `head`.
    pub fn classifier_index(&self, head: usize) -> usize {
        match self.variant {
            Variant::Ic => head,
            Variant::Mc => 0,
        }
    }

    fn head_dropout<'a>(
        &self,
        head: usize,
        rng: &'a mut ChaCha8Rng,
        dropout: bool,
    ) -> Dropout<'a> {
        if !dropout {
            return Dropout::Disabled;
        }
        match self.variant {
            Variant::Ic => Dropout::Resample(rng),
            Variant::Mc => Dropout::Fixed {
                seed: self.mask_seed,
                mask_id: head as u64,
            },
        }
    }

    /// Probability outputs of all M heads.
    pub fn predict_all(&self, x: &Mat, mode: PredictMode<'_>) -> Result<Vec<ProbBatch>> {
        match mode {
            PredictMode::Eval => {
                let mut features = Vec::with_capacity(self.extractor_stores.len());
                for store in &self.extractor_stores {
                    features.push(diffnet::forward_eval(&self.extractor_net, store, x)?);
                }
                (0..self.m)
                    .map(|head| {
                        let f = &features[self.extractor_index(head)];
                        let logits = diffnet::forward_eval(
                            &self.classifier_net,
                            &self.classifier_stores[self.classifier_index(head)],
                            f,
                        )?;
                        Ok(softmax(&logits))
                    })
                    .collect()
            }
            PredictMode::Train { rng, dropout } => {
                Ok(self.forward_train(x, rng, dropout)?.probs)
            }
        }
    }

    /// Training-mode forward of every head, keeping tapes for
    /// [`Self::backward_train`]. The RNG is consumed in a fixed order:
    /// extractor store(s) first, then heads 0..M.
    pub fn forward_train(
        &self,
        x: &Mat,
        rng: &mut ChaCha8Rng,
        dropout: bool,
    ) -> Result<TrainForward> {
        let mut features = Vec::with_capacity(self.extractor_stores.len());
        let mut ext_tapes = Vec::with_capacity(self.extractor_stores.len());
        for store in &self.extractor_stores {
            let ctx = if dropout {
                Dropout::Resample(rng)
            } else {
                Dropout::Disabled
            };
            let (f, tape) = diffnet::forward(&self.extractor_net, store, x, ctx)?;
            features.push(f);
            ext_tapes.push(tape);
        }
        let mut probs = Vec::with_capacity(self.m);
        let mut clf_tapes = Vec::with_capacity(self.m);
        for head in 0..self.m {
            let f = &features[self.extractor_index(head)];
            let ctx = self.head_dropout(head, rng, dropout);
            let (logits, tape) = diffnet::forward(
                &self.classifier_net,
                &self.classifier_stores[self.classifier_index(head)],
                f,
                ctx,
            )?;
            probs.push(softmax(&logits));
            clf_tapes.push(tape);
        }
        Ok(TrainForward {
            probs,
            ext_tapes,
            clf_tapes,
        })
    }

    /// Backpropagate per-head probability cotangents through classifiers
    /// and extractor(s), accumulating gradients into the stores.
    pub fn backward_train(&mut self, fwd: &TrainForward, dprobs: &[Mat]) -> Result<()> {
        if dprobs.len() != self.m {
            return Err(Error::config(format!(
                "backward_train: {} cotangents for M={}",
                dprobs.len(),
                self.m
            )));
        }
        let mut dfeatures: Vec<Option<Mat>> = vec![None; self.extractor_stores.len()];
        for (head, dp) in dprobs.iter().enumerate() {
            let dlogits = diffnet::softmax_backward(&fwd.probs[head], dp);
            let ci = self.classifier_index(head);
            let dfeat = diffnet::backward(
                &self.classifier_net,
                &mut self.classifier_stores[ci],
                &fwd.clf_tapes[head],
                &dlogits,
            )?;
            let ei = self.extractor_index(head);
            match &mut dfeatures[ei] {
                Some(acc) => acc.add_inplace(&dfeat),
                slot => *slot = Some(dfeat),
            }
        }
        for (ei, dfeat) in dfeatures.into_iter().enumerate() {
            let dfeat = dfeat.expect("every extractor feeds at least one head");
            diffnet::backward(
                &self.extractor_net,
                &mut self.extractor_stores[ei],
                &fwd.ext_tapes[ei],
                &dfeat,
            )?;
        }
        Ok(())
    }

    /// Row-wise arithmetic mean of all M probability outputs.
    pub fn ensemble_predict(&self, x: &Mat) -> Result<ProbBatch> {
        let probs = self.predict_all(x, PredictMode::Eval)?;
        Ok(average_probs(&probs))
    }

    /// Output of the single hypothesis `anchor`.
    pub fn anchor_predict(&self, x: &Mat, anchor: usize) -> Result<ProbBatch> {
        if anchor >= self.m {
            return Err(Error::config(format!(
                "anchor {anchor} out of range for M={}",
                self.m
            )));
        }
        let mut probs = self.predict_all(x, PredictMode::Eval)?;
        Ok(probs.swap_remove(anchor))
    }

    /// Switch the set to its target-adaptation configuration and return an
    /// immutable parameter snapshot. `freeze_classifiers` records whether
    /// the adaptation loop may step classifier stores;
    /// `shared_extractor = false` splits the shared extractor into M
    /// identical copies (independent-ψ ablation).
    pub fn to_target(&mut self, freeze_classifiers: bool, shared_extractor: bool) -> SourceSnapshot {
        if !shared_extractor && self.extractor_stores.len() == 1 && self.m > 1 {
            let shared = self.extractor_stores[0].clone();
            self.extractor_stores = (0..self.m).map(|_| shared.clone()).collect();
        }
        self.frozen_classifiers = freeze_classifiers;
        self.snapshot()
    }

    /// Copy of every parameter value, aligned with the current store layout.
    pub fn snapshot(&self) -> SourceSnapshot {
        SourceSnapshot {
            extractors: self.extractor_stores.iter().map(|s| s.values_flat()).collect(),
            classifiers: self
                .classifier_stores
                .iter()
                .map(|s| s.values_flat())
                .collect(),
        }
    }

    pub fn to_checkpoint(&self) -> SetCheckpoint {
        let mut extractors = self
            .extractor_stores
            .iter()
            .map(|s| Checkpoint::from_parts(&self.extractor_net, s, None));
        SetCheckpoint {
            format_version: SET_CHECKPOINT_FORMAT_VERSION,
            m: self.m,
            variant: self.variant,
            num_classes: self.num_classes,
            anchor: self.anchor,
            seed: self.seed,
            mask_seed: self.mask_seed,
            frozen_classifiers: self.frozen_classifiers,
            extractor: extractors.next().expect("at least one extractor store"),
            extra_extractors: extractors.collect(),
            classifiers: self
                .classifier_stores
                .iter()
                .map(|s| Checkpoint::from_parts(&self.classifier_net, s, None))
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &SetCheckpoint) -> Result<Self> {
        if ckpt.format_version != SET_CHECKPOINT_FORMAT_VERSION {
            return Err(Error::config(format!(
                "unsupported set checkpoint format_version {}",
                ckpt.format_version
            )));
        }
        if ckpt.m < 1 {
            return Err(Error::config("checkpoint has M < 1"));
        }
        let (ext_net, mut ext_stores) = {
            let (net, store, _) = ckpt.extractor.clone().into_parts()?;
            (net, vec![store])
        };
        for extra in &ckpt.extra_extractors {
            let (net, store, _) = extra.clone().into_parts()?;
            if net.layers() != ext_net.layers() {
                return Err(Error::config(
                    "extractor copies disagree on layer specs",
                ));
            }
            ext_stores.push(store);
        }
        if ext_stores.len() != 1 && ext_stores.len() != ckpt.m {
            return Err(Error::config(format!(
                "checkpoint has {} extractor stores for M={}",
                ext_stores.len(),
                ckpt.m
            )));
        }
        let expected_classifiers = match ckpt.variant {
            Variant::Ic => ckpt.m,
            Variant::Mc => 1,
        };
        if ckpt.classifiers.len() != expected_classifiers {
            return Err(Error::config(format!(
                "{} variant with M={} expects {} classifier stores, checkpoint has {}",
                ckpt.variant,
                ckpt.m,
                expected_classifiers,
                ckpt.classifiers.len()
            )));
        }
        let mut clf_net: Option<Network> = None;
        let mut clf_stores = Vec::with_capacity(ckpt.classifiers.len());
        for c in &ckpt.classifiers {
            let (net, store, _) = c.clone().into_parts()?;
            if let Some(existing) = &clf_net {
                if existing.layers() != net.layers() {
                    return Err(Error::config("classifier heads disagree on layer specs"));
                }
            } else {
                clf_net = Some(net);
            }
            clf_stores.push(store);
        }
        let clf_net = clf_net.expect("at least one classifier");
        if ext_net.out_dim() != clf_net.in_dim() {
            return Err(Error::config(format!(
                "extractor output dim {} does not match classifier input dim {}",
                ext_net.out_dim(),
                clf_net.in_dim()
            )));
        }
        if let Some(a) = ckpt.anchor {
            if a >= ckpt.m {
                return Err(Error::config(format!(
                    "checkpoint anchor {a} out of range for M={}",
                    ckpt.m
                )));
            }
        }
        let num_classes = clf_net.out_dim();
        Ok(HypothesisSet {
            extractor_net: ext_net,
            classifier_net: clf_net,
            extractor_stores: ext_stores,
            classifier_stores: clf_stores,
            variant: ckpt.variant,
            m: ckpt.m,
            num_classes,
            frozen_classifiers: ckpt.frozen_classifiers,
            mask_seed: ckpt.mask_seed,
            anchor: ckpt.anchor,
            seed: ckpt.seed,
        })
    }
}

/// Row-wise arithmetic mean of probability batches (all same shape).
pub fn average_probs(probs: &[ProbBatch]) -> ProbBatch {
    assert!(!probs.is_empty(), "average_probs: empty list");
    let mut acc = probs[0].mat().clone();
    for p in &probs[1..] {
        acc.add_inplace(p.mat());
    }
    acc.scale_inplace(1.0 / probs.len() as f64);
    ProbBatch::from_mat_unchecked(acc)
}

/// Set-level checkpoint: composes one network checkpoint per store.
/// `extra_extractors` is empty unless the set was split for the
/// independent-ψ ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetCheckpoint {
    pub format_version: u32,
    pub m: usize,
    pub variant: Variant,
    pub num_classes: usize,
    pub anchor: Option<usize>,
    pub seed: u64,
    pub mask_seed: u64,
    pub frozen_classifiers: bool,
    pub extractor: Checkpoint,
    pub extra_extractors: Vec<Checkpoint>,
    pub classifiers: Vec<Checkpoint>,
}

impl SetCheckpoint {
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
