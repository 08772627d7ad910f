//! Training: configuration, optimizer, learning-rate policy, the combined
//! objective, one optimization step and evaluation.
//!
//! One step on a class-balanced batch:
//!
//! 1. strong views of source and landmark images (weak views when strong
//!    augmentation on labeled paths is switched off), strong and weak views of
//!    the unlabeled images;
//! 2. `L_ce`: mean cross-entropy over source rows plus mean over landmark rows;
//! 3. `L_ua` from the configured plugin on the weak unlabeled embeddings;
//! 4. `L_cata`: prototypical (`ecacl_p`) or hard-triplet (`ecacl_t`) alignment
//!    of source rows against landmark rows;
//! 5. `L_cona`: gated weak-view pseudo-labels applied to strong views;
//! 6. `total = L_ce + α L_ua + λ1 L_cata + λ2 L_cona`, backward, one SGD step.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::alignment::{self, Mined};
use crate::augment::{AugKind, BatchAugmenter, Image, Pipeline, StrongAugSpec, WeakAugSpec};
use crate::consistency::{self, GatedPseudoBatch};
use crate::data::{
    apply_shift, generate_synthetic, select_landmarks, BalancedBatch, BalancedSampler, BatchShape, DomainDataset,
    ShiftSpec, SplitSpec, SyntheticSpec, TargetSplit,
};
use crate::model::{BoundModel, ClassifierSpec, EncoderSpec, Model, ParamGroup};
use crate::seed::{rng_for, stream};
use crate::tensor::{Tape, Tensor, Var};
use crate::uda::{self, UdaInputs, UdaKind, UdaTerm};
use crate::{math, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Prototypical categorical alignment.
    EcaclP,
    /// Hard-triplet categorical alignment.
    EcaclT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub normalize: bool,
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![128, 64],
            embed_dim: 32,
            normalize: true,
            temperature: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub momentum: f64,
    /// Base rate for the classifier.
    pub lr_head: f64,
    /// Base rate for the encoder.
    pub lr_body: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            lr_head: 0.01,
            lr_body: 0.001,
        }
    }
}

/// `lr(p) = base · (1 + γ p)^(−β)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub gamma: f64,
    pub beta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            gamma: 10.0,
            beta: 0.75,
        }
    }
}

/// Every hyperparameter of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub uda: UdaTerm,
    pub lambda1: f64,
    pub lambda2: f64,
    pub sigma: f64,
    pub margin: f64,
    pub batch: BatchShape,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub total_steps: u64,
    pub eval_every: u64,
    pub run_seed: u64,
    pub strong_aug: StrongAugSpec,
    pub weak_aug: WeakAugSpec,
    /// Strong augmentation on the labeled (source and landmark) paths; when
    /// off those paths use the weak pipeline.
    pub strong_on_labeled: bool,
    pub model: ModelConfig,
    pub data: SyntheticSpec,
    pub shift: ShiftSpec,
    pub shift_seed: u64,
    pub split: SplitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::EcaclP,
            uda: UdaTerm::default(),
            lambda1: 0.1,
            lambda2: 1.0,
            sigma: 0.8,
            margin: 1.0,
            batch: BatchShape::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            total_steps: 3000,
            eval_every: 200,
            run_seed: 0,
            strong_aug: StrongAugSpec::default(),
            weak_aug: WeakAugSpec::default(),
            strong_on_labeled: true,
            model: ModelConfig::default(),
            data: SyntheticSpec::default(),
            shift: ShiftSpec::default(),
            shift_seed: 11,
            split: SplitSpec::default(),
        }
    }
}

impl TrainConfig {
    /// Plain supervised training on source plus landmarks: no alignment terms.
    pub fn source_and_target_only(mut self) -> Self {
        self.lambda1 = 0.0;
        self.lambda2 = 0.0;
        self.uda = UdaTerm::none();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return bad(format!(
                "lambda1/lambda2 must be >= 0, got {}/{}",
                self.lambda1, self.lambda2
            ));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return bad(format!("sigma must be in [0, 1], got {}", self.sigma));
        }
        if !(self.margin >= 0.0) {
            return bad(format!("margin must be >= 0, got {}", self.margin));
        }
        let b = &self.batch;
        if b.classes == 0 || b.source_per_class == 0 || b.target_per_class == 0 || b.unlabeled == 0 {
            return bad(format!("batch sizes must be positive: {b:?}"));
        }
        if b.classes > self.data.num_classes {
            return bad(format!(
                "M = {} exceeds the {} classes",
                b.classes, self.data.num_classes
            ));
        }
        if b.target_per_class > self.split.shots_per_class {
            return bad(format!(
                "N_t = {} exceeds shots per class {}",
                b.target_per_class, self.split.shots_per_class
            ));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.momentum) || !(o.lr_head >= 0.0) || !(o.lr_body >= 0.0) {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        if !(self.schedule.gamma >= 0.0) || !(self.schedule.beta >= 0.0) {
            return bad(format!("invalid schedule {:?}", self.schedule));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be >= 1".into());
        }
        if self.model.embed_dim == 0 || self.model.hidden_dims.contains(&0) || !(self.model.temperature > 0.0) {
            return bad(format!("invalid model settings {:?}", self.model));
        }
        self.uda.validate()?;
        self.strong_aug.validate()?;
        self.weak_aug.validate()?;
        Ok(())
    }

    pub fn encoder_spec(&self, input_dim: usize) -> EncoderSpec {
        EncoderSpec {
            input_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            embed_dim: self.model.embed_dim,
        }
    }

    pub fn classifier_spec(&self, num_classes: usize) -> ClassifierSpec {
        ClassifierSpec {
            embed_dim: self.model.embed_dim,
            num_classes,
            normalize: self.model.normalize,
            temperature: self.model.temperature,
        }
    }

    /// Fresh model initialized from `run_seed`.
    pub fn init_model(&self, input_dim: usize, num_classes: usize) -> Result<Model> {
        let mut rng = rng_for([self.run_seed, 0, 0, stream::INIT]);
        Model::new(self.encoder_spec(input_dim), self.classifier_spec(num_classes), &mut rng)
    }
}

/// Learning rate at training progress `p ∈ [0, 1]`.
pub fn lr_at(p: f64, base_lr: f64, gamma: f64, beta: f64) -> f64 {
    base_lr * math::powf(1.0 + gamma * p, -beta)
}

/// SGD with heavy-ball momentum: `v ← μ v + g; θ ← θ − lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, shapes: &[usize]) -> Self {
        Self {
            momentum,
            velocity: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(momentum: f64, model: &Model) -> Self {
        let sizes: Vec<usize> = model.parameters().iter().map(|(_, _, t)| t.numel()).collect();
        Self::new(momentum, &sizes)
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lrs: &[f64]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() || lrs.len() != params.len() {
            return Err(Error::Dimension {
                op: "sgd_momentum_step",
                left: vec![self.velocity.len()],
                right: vec![params.len(), grads.len(), lrs.len()],
            });
        }
        for (((p, g), v), &lr) in params.iter_mut().zip(grads).zip(&mut self.velocity).zip(lrs) {
            if p.numel() != v.len() || g.len() != v.len() {
                return Err(Error::Dimension {
                    op: "sgd_momentum_step",
                    left: p.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            for ((theta, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *theta -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Loss components of one step. `total = ce + α·ua + λ1·cata + λ2·cona`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ce: f64,
    pub ua: f64,
    pub cata: f64,
    pub cona: f64,
    pub total: f64,
}

/// Step diagnostics that are not losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub lr_head: f64,
    pub lr_body: f64,
    pub gate_passed: usize,
    pub gate_total: usize,
    pub skipped_triplets: usize,
    pub clamped_probs: usize,
    pub empty_triplets: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub split: String,
    /// `None` for classes with no samples (excluded from the mean).
    pub per_class_accuracy: Vec<Option<f64>>,
    pub mean_class_accuracy: f64,
    pub overall_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub losses: Option<LossComponents>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diagnostics: Option<StepDiagnostics>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

/// Per-class accuracy, mean class accuracy and overall accuracy of
/// `predictions` against `labels`.
pub fn accuracy_metrics(predictions: &[usize], labels: &[usize], num_classes: usize) -> (Vec<Option<f64>>, f64, f64, Vec<String>) {
    let mut hits = vec![0usize; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        counts[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let mut warnings = Vec::new();
    let per_class: Vec<Option<f64>> = hits
        .iter()
        .zip(&counts)
        .enumerate()
        .map(|(k, (&h, &n))| {
            if n == 0 {
                warnings.push(format!("class {k} has no samples; excluded from MCA"));
                None
            } else {
                Some(h as f64 / n as f64)
            }
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mca = if present.is_empty() {
        0.0
    } else {
        math::sum(&present) / present.len() as f64
    };
    let total_hits: usize = hits.iter().sum();
    let overall = if labels.is_empty() {
        0.0
    } else {
        total_hits as f64 / labels.len() as f64
    };
    (per_class, mca, overall, warnings)
}

/// Flattens images into a `B × (H·W·C)` matrix.
pub fn images_to_matrix(images: &[&Image]) -> Result<Tensor> {
    let d = images.first().map_or(0, |im| im.len());
    if images.is_empty() || d == 0 {
        return Err(Error::Shape("empty image batch".into()));
    }
    let mut data = Vec::with_capacity(images.len() * d);
    for im in images {
        if im.len() != d {
            return Err(Error::Shape("images of mixed size in one batch".into()));
        }
        data.extend_from_slice(im.pixels());
    }
    Tensor::matrix(images.len(), d, data)
}

const EVAL_CHUNK: usize = 256;

/// Argmax predictions on raw (unaugmented) images, ties to the lowest class.
pub fn predict(model: &Model, images: &[Image]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let logits = model.predict_logits(&images_to_matrix(&refs)?)?;
        let c = logits.cols();
        out.extend(logits.data().chunks(c).map(|r| math::argmax(r).unwrap_or(0)));
    }
    Ok(out)
}

pub fn evaluate(model: &Model, dataset: &DomainDataset, step: u64, split: &str) -> Result<MetricsRecord> {
    let preds = predict(model, dataset.images())?;
    let (per_class_accuracy, mca, overall, warnings) =
        accuracy_metrics(&preds, dataset.labels(), dataset.num_classes());
    Ok(MetricsRecord {
        step,
        split: split.into(),
        per_class_accuracy,
        mean_class_accuracy: mca,
        overall_accuracy: overall,
        losses: None,
        diagnostics: None,
        warnings,
    })
}

/// Source set plus the split target set.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub source: DomainDataset,
    pub target: TargetSplit,
}

impl TrainData {
    pub fn num_classes(&self) -> usize {
        self.source.num_classes()
    }

    pub fn input_dim(&self) -> usize {
        self.source.input_dim()
    }
}

/// Augmented inputs of one step.
#[derive(Debug, Clone)]
pub struct StepViews {
    /// Source rows, then landmark rows.
    pub labeled: Tensor,
    pub source_labels: Vec<usize>,
    pub landmark_labels: Vec<usize>,
    pub unlabeled_strong: Tensor,
    pub unlabeled_weak: Tensor,
}

impl StepViews {
    pub fn num_source(&self) -> usize {
        self.source_labels.len()
    }
}

/// Applies the augmentation pipelines for one step.
pub fn prepare_views(
    config: &TrainConfig,
    data: &TrainData,
    batch: &BalancedBatch,
    step: u64,
    augmenter: &dyn BatchAugmenter,
) -> Result<StepViews> {
    let mut labeled: Vec<&Image> = batch.source.iter().map(|&i| &data.source.images()[i]).collect();
    labeled.extend(batch.landmarks.iter().map(|&i| &data.target.landmarks.images()[i]));
    let unlabeled: Vec<&Image> = batch
        .unlabeled
        .iter()
        .map(|&i| &data.target.unlabeled.images()[i])
        .collect();

    let strong = AugKind::Strong(config.strong_aug.clone());
    let weak = AugKind::Weak(config.weak_aug.clone());
    let (labeled_kind, labeled_pipe) = if config.strong_on_labeled {
        (&strong, Pipeline::StrongLabeled)
    } else {
        (&weak, Pipeline::WeakLabeled)
    };
    let seed = config.run_seed;
    let lab = augmenter.augment(&labeled, labeled_kind, seed, step, labeled_pipe);
    let us = augmenter.augment(&unlabeled, &strong, seed, step, Pipeline::StrongUnlabeled);
    let uw = augmenter.augment(&unlabeled, &weak, seed, step, Pipeline::WeakUnlabeled);
    Ok(StepViews {
        labeled: images_to_matrix(&lab.iter().collect::<Vec<_>>())?,
        source_labels: batch.source_labels.clone(),
        landmark_labels: batch.landmark_labels.clone(),
        unlabeled_strong: images_to_matrix(&us.iter().collect::<Vec<_>>())?,
        unlabeled_weak: images_to_matrix(&uw.iter().collect::<Vec<_>>())?,
    })
}

/// The recorded objective of one step.
#[derive(Debug)]
pub struct Objective {
    pub tape: Tape,
    pub bound: BoundModel,
    pub total: Var,
    pub ce: Var,
    pub ua: Var,
    pub cata: Var,
    pub cona: Var,
    pub labeled_logits: Var,
    pub gate: Option<GatedPseudoBatch>,
    pub mined: Option<Mined>,
    pub clamped: usize,
    pub empty_triplets: bool,
}

impl Objective {
    pub fn components(&self) -> LossComponents {
        let v = |x: Var| self.tape.value(x).data()[0];
        LossComponents {
            ce: v(self.ce),
            ua: v(self.ua),
            cata: v(self.cata),
            cona: v(self.cona),
            total: v(self.total),
        }
    }

    pub fn backward(&mut self) -> Result<Vec<Vec<f64>>> {
        self.tape.backward(self.total)?;
        Ok(self.bound.gradients(&self.tape))
    }
}

/// Mean cross-entropy of `logits` rows against `labels`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick_per_row(logp, labels)?;
    let mean = tape.mean(picked);
    Ok(tape.neg(mean))
}

/// Records the full objective for `model` on prepared `views`.
pub fn build_objective(model: &Model, config: &TrainConfig, views: &StepViews) -> Result<Objective> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let ns = views.num_source();
    let nl = views.labeled.rows();
    let num_classes = model.classifier_spec().num_classes;
    let source_rows: Vec<usize> = (0..ns).collect();
    let landmark_rows: Vec<usize> = (ns..nl).collect();

    let x_l = tape.constant(views.labeled.clone());
    let f_l = bound.forward_features(&mut tape, x_l)?;
    let logits_l = bound.forward_logits(&mut tape, f_l)?;

    // Cross-entropy: a mean over source rows plus a mean over landmark rows.
    let mut all_labels = views.source_labels.clone();
    all_labels.extend_from_slice(&views.landmark_labels);
    let logp = tape.log_softmax(logits_l)?;
    let picked = tape.pick_per_row(logp, &all_labels)?;
    let src = tape.gather_rows(picked, &source_rows)?;
    let lmk = tape.gather_rows(picked, &landmark_rows)?;
    let src_mean = tape.mean(src);
    let lmk_mean = tape.mean(lmk);
    let ll = tape.add(src_mean, lmk_mean)?;
    let ce = tape.neg(ll);

    let f_src = tape.gather_rows(f_l, &source_rows)?;
    let f_lmk = tape.gather_rows(f_l, &landmark_rows)?;

    let needs_unlabeled = config.uda.name != UdaKind::None || config.lambda2 > 0.0;
    let f_uw = if needs_unlabeled {
        let x_uw = tape.constant(views.unlabeled_weak.clone());
        Some(bound.forward_features(&mut tape, x_uw)?)
    } else {
        None
    };

    let (ua, ua_weighted) = match f_uw {
        Some(f_uw) if config.uda.name != UdaKind::None => {
            let l = uda::uda_loss(
                &mut tape,
                &config.uda,
                &UdaInputs {
                    model: &bound,
                    source_features: f_src,
                    source_labels: &views.source_labels,
                    unlabeled_features: f_uw,
                },
            )?;
            (l.raw, l.weighted)
        }
        _ => {
            let z = tape.constant(Tensor::scalar(0.0));
            (z, z)
        }
    };

    let mut mined = None;
    let mut empty_triplets = false;
    let cata = if config.lambda1 > 0.0 {
        match config.variant {
            Variant::EcaclP => {
                // Prototypes exist only for the classes present in the batch;
                // labels are re-indexed onto those rows.
                let mut present: Vec<usize> = views.landmark_labels.clone();
                present.sort_unstable();
                present.dedup();
                let mut map = vec![usize::MAX; num_classes];
                for (row, &c) in present.iter().enumerate() {
                    map[c] = row;
                }
                let lmk_labels: Vec<usize> = views.landmark_labels.iter().map(|&y| map[y]).collect();
                let src_labels: Vec<usize> = views
                    .source_labels
                    .iter()
                    .map(|&y| map.get(y).copied().filter(|&r| r != usize::MAX).ok_or(Error::Coverage { class: y }))
                    .collect::<Result<_>>()?;
                let protos = alignment::compute_prototypes(&mut tape, f_lmk, &lmk_labels, present.len())?;
                alignment::prototypical_loss(&mut tape, f_src, &src_labels, &protos)?
            }
            Variant::EcaclT => {
                let m = alignment::mine_hard_triplets(
                    tape.value(f_lmk),
                    &views.landmark_labels,
                    tape.value(f_src),
                    &views.source_labels,
                )?;
                let t = alignment::triplet_loss(&mut tape, &m.triplets, f_lmk, f_src, config.margin)?;
                empty_triplets = t.empty;
                mined = Some(m);
                t.loss
            }
        }
    } else {
        tape.constant(Tensor::scalar(0.0))
    };

    let mut gate = None;
    let mut clamped = 0;
    let cona = match f_uw {
        Some(f_uw) if config.lambda2 > 0.0 => {
            let logits_w = bound.forward_logits(&mut tape, f_uw)?;
            let p_w = tape.softmax(logits_w)?;
            let g = consistency::gate_pseudo_labels(tape.value(p_w), config.sigma)?;
            let x_us = tape.constant(views.unlabeled_strong.clone());
            let f_us = bound.forward_features(&mut tape, x_us)?;
            let logits_s = bound.forward_logits(&mut tape, f_us)?;
            let p_s = tape.softmax(logits_s)?;
            let c = consistency::consistency_loss(&mut tape, &g, p_s)?;
            clamped = c.clamped;
            gate = Some(g);
            c.loss
        }
        _ => tape.constant(Tensor::scalar(0.0)),
    };

    let cata_w = tape.scale(cata, config.lambda1);
    let cona_w = tape.scale(cona, config.lambda2);
    let t1 = tape.add(ce, ua_weighted)?;
    let t2 = tape.add(t1, cata_w)?;
    let total = tape.add(t2, cona_w)?;

    Ok(Objective {
        tape,
        bound,
        total,
        ce,
        ua,
        cata,
        cona,
        labeled_logits: logits_l,
        gate,
        mined,
        clamped,
        empty_triplets,
    })
}

/// What one call to [`Trainer::step`] produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub record: MetricsRecord,
    pub gradients: Vec<Vec<f64>>,
}

/// Owns the model and optimizer state of one run.
pub struct Trainer<'a> {
    config: TrainConfig,
    model: Model,
    optimizer: Sgd,
    augmenter: &'a dyn BatchAugmenter,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, model: Model, augmenter: &'a dyn BatchAugmenter) -> Result<Self> {
        config.validate()?;
        let optimizer = Sgd::for_model(config.optimizer.momentum, &model);
        Ok(Self {
            config,
            model,
            optimizer,
            augmenter,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn optimizer(&self) -> &Sgd {
        &self.optimizer
    }

    /// Learning rates for the head and body groups at `step`.
    pub fn learning_rates(&self, step: u64) -> (f64, f64) {
        let p = (step as f64 / self.config.total_steps as f64).clamp(0.0, 1.0);
        let s = &self.config.schedule;
        let o = &self.config.optimizer;
        (
            lr_at(p, o.lr_head, s.gamma, s.beta),
            lr_at(p, o.lr_body, s.gamma, s.beta),
        )
    }

    /// One optimization step on `batch`. Fails without touching the model when
    /// the objective is not finite.
    pub fn step(&mut self, data: &TrainData, batch: &BalancedBatch, step: u64) -> Result<StepOutcome> {
        let views = prepare_views(&self.config, data, batch, step, self.augmenter)?;
        let mut objective = build_objective(&self.model, &self.config, &views)?;
        let losses = objective.components();
        if !losses.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite objective at step {step}: ce={} ua={} cata={} cona={} total={}",
                losses.ce, losses.ua, losses.cata, losses.cona, losses.total
            )));
        }
        let gradients = objective.backward()?;
        let (lr_head, lr_body) = self.learning_rates(step);
        let lrs: Vec<f64> = self
            .model
            .parameters()
            .iter()
            .map(|(_, g, _)| match g {
                ParamGroup::Head => lr_head,
                ParamGroup::Body => lr_body,
            })
            .collect();
        let mut params = self.model.parameters_mut();
        self.optimizer.step(&mut params, &gradients, &lrs)?;

        // Train-batch accuracy on the labeled rows, from the pre-update logits.
        let labels: Vec<usize> = views
            .source_labels
            .iter()
            .chain(&views.landmark_labels)
            .copied()
            .collect();
        let (per_class_accuracy, mca, overall, _) = {
            let logits = objective.tape.value(objective.labeled_logits);
            let c = logits.cols();
            let preds: Vec<usize> = logits.data().chunks(c).map(|r| math::argmax(r).unwrap_or(0)).collect();
            accuracy_metrics(&preds, &labels, data.num_classes())
        };
        let gate = objective.gate.take();
        let record = MetricsRecord {
            step,
            split: "train".into(),
            per_class_accuracy,
            mean_class_accuracy: mca,
            overall_accuracy: overall,
            losses: Some(losses),
            diagnostics: Some(StepDiagnostics {
                lr_head,
                lr_body,
                gate_passed: gate.as_ref().map_or(0, GatedPseudoBatch::passed),
                gate_total: gate.as_ref().map_or(0, GatedPseudoBatch::len),
                skipped_triplets: objective.mined.as_ref().map_or(0, |m| m.skipped),
                clamped_probs: objective.clamped,
                empty_triplets: objective.empty_triplets,
            }),
            warnings: Vec::new(),
        };
        Ok(StepOutcome { record, gradients })
    }

    /// Runs `total_steps` steps, evaluating on `eval_set` every `eval_every`
    /// steps and after the last one. Every record goes through `sink`; the
    /// final evaluation is returned.
    pub fn fit(
        &mut self,
        data: &TrainData,
        sampler: &BalancedSampler,
        eval_set: &DomainDataset,
        mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<MetricsRecord> {
        let total = self.config.total_steps;
        let every = self.config.eval_every;
        let mut last_eval = None;
        for step in 0..total {
            let batch = sampler.batch(step);
            let outcome = self.step(data, &batch, step)?;
            sink(&outcome.record)?;
            let done = step + 1;
            if (every > 0 && done % every == 0) || done == total {
                let rec = evaluate(&self.model, eval_set, done, EVAL_SPLIT)?;
                sink(&rec)?;
                last_eval = Some(rec);
            }
        }
        last_eval.ok_or_else(|| Error::Config("no training steps were run".into()))
    }
}

/// Split name used for target evaluation records.
pub const EVAL_SPLIT: &str = "target_unlabeled";

/// Builds the synthetic source domain, the shifted target domain and the
/// landmark split described by `config`.
pub fn prepare_data(config: &TrainConfig) -> Result<TrainData> {
    let source = generate_synthetic(&config.data)?;
    let raw_target = generate_synthetic(&SyntheticSpec {
        base_seed: config.data.base_seed.wrapping_add(1),
        ..config.data.clone()
    })?;
    let target = apply_shift(&raw_target, &config.shift, config.shift_seed)?;
    let split = select_landmarks(&target, &config.split)?;
    Ok(TrainData { source, target: split })
}

/// Sampler for `data` with the batch shape and seed of `config`.
pub fn sampler_for(config: &TrainConfig, data: &TrainData) -> Result<BalancedSampler> {
    BalancedSampler::new(
        &data.source,
        &data.target.landmarks,
        data.target.unlabeled.len(),
        config.batch,
        config.run_seed,
    )
}
