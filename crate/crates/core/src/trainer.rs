//! Training loop for the dual-head model: per-step forward, the two losses,
//! gradient balancing at the shared embedding, AdamW, and per-epoch
//! metrics. Also evaluation and the plain-classifier baseline.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::{encode, encode_values, BackboneConfig, BackboneParams, BackboneVars, LayerVars};
use crate::data::{hflip, inject_label_noise, subset, Dataset};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::objective::{
    adaptive_weight, class_logits, text_alignment_loss, text_prediction, total_loss, DualHeads, HeadVars,
    ADAPTIVE_EPS,
};
use crate::optim::{warmup_cosine_lr, AdamW, AdamWConfig};
use crate::rng::Rng;
use crate::scalar::{c, Scalar};
use crate::schedule::{lambda_at, ScheduleSpec};
use crate::tensor::Tensor;
use crate::text_targets::WhitenedTargetSet;

const STREAM_BACKBONE: u64 = 1;
const STREAM_TEXT_HEAD: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_FLIP: u64 = 4;
const STREAM_NOISE: u64 = 5;
const STREAM_SUBSET: u64 = 6;

/// Images per forward pass in [`evaluate`] and [`embed_dataset`].
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: BackboneConfig,
    pub backbone: BackboneParams<T>,
    pub heads: DualHeads<T>,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub heads: HeadVars,
}

impl ModelVars {
    /// Rebuilds the handles from a flat list in [`Model::named`] order.
    pub fn from_flat(vars: &[Var], depth: usize) -> Result<Self> {
        let expected = 4 + 12 * depth + 2 + 4;
        if vars.len() != expected {
            return Err(Error::shape("model vars", &[expected], &[vars.len()]));
        }
        let layers = vars[4..4 + 12 * depth]
            .chunks_exact(12)
            .map(|l| LayerVars {
                ln1_gamma: l[0],
                ln1_beta: l[1],
                qkv_w: l[2],
                qkv_b: l[3],
                proj_w: l[4],
                proj_b: l[5],
                ln2_gamma: l[6],
                ln2_beta: l[7],
                fc1_w: l[8],
                fc1_b: l[9],
                fc2_w: l[10],
                fc2_b: l[11],
            })
            .collect();
        let k = 4 + 12 * depth;
        Ok(ModelVars {
            backbone: BackboneVars {
                patch_proj: vars[0],
                patch_bias: vars[1],
                cls_token: vars[2],
                pos_embed: vars[3],
                layers,
                final_gamma: vars[k],
                final_beta: vars[k + 1],
            },
            heads: HeadVars {
                cls_w: vars[k + 2],
                cls_b: vars[k + 3],
                txt_w: vars[k + 4],
                txt_b: vars[k + 5],
            },
        })
    }

    /// Same order as [`Model::named`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.backbone.all();
        v.extend(self.heads.all());
        v
    }
}

impl<T: Scalar> Model<T> {
    /// Backbone and class head come from one stream, the text head from
    /// another, so a model that never uses its text head starts from the
    /// same weights as one built for plain classification.
    pub fn init(config: &BackboneConfig, classes: usize, d_txt: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::derived(seed, STREAM_BACKBONE);
        let mut txt_rng = Rng::derived(seed, STREAM_TEXT_HEAD);
        let backbone = BackboneParams::init(config, &mut rng)?;
        let heads = DualHeads::init(config.width, classes, d_txt, &mut rng, &mut txt_rng);
        Ok(Model {
            config: config.clone(),
            backbone,
            heads,
        })
    }

    pub fn classes(&self) -> usize {
        self.heads.classes()
    }

    pub fn d_txt(&self) -> usize {
        self.heads.d_txt()
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.backbone.named();
        for (name, t) in self.heads.named() {
            out.push((format!("heads.{name}"), t));
        }
        out
    }

    /// Same order as [`Model::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.backbone.tensors_mut();
        out.extend(self.heads.tensors_mut());
        out
    }

    pub fn check(&self) -> Result<()> {
        self.backbone.check(&self.config)?;
        self.heads.check()?;
        if self.heads.width() != self.config.width {
            return Err(Error::shape("head width", &[self.config.width], &[self.heads.width()]));
        }
        Ok(())
    }

    pub fn register(&self, g: &mut Graph<T>) -> ModelVars {
        ModelVars {
            backbone: self.backbone.register(g),
            heads: self.heads.register(g),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            backbone: self.backbone.cast(),
            heads: self.heads.cast(),
        }
    }

    /// Embeddings `z` for a batch of images.
    pub fn embed(&self, images: &[&[T]]) -> Result<Tensor<T>> {
        encode_values(&self.backbone, &self.config, images)
    }

    /// Class logits for a batch of images; the text head is not evaluated.
    pub fn logits(&self, images: &[&[T]]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let backbone = self.backbone.register(&mut g);
        let heads = self.heads.register(&mut g);
        let z = encode(&mut g, &backbone, &self.config, images)?;
        let logits = class_logits(&mut g, z, &heads)?;
        Ok(g.tensor(logits))
    }
}

fn default_d_txt() -> usize {
    64
}
fn default_true() -> bool {
    true
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-3
}
fn default_wd() -> f64 {
    0.05
}
fn default_warmup() -> usize {
    3
}
fn default_smoothing() -> f64 {
    0.1
}
fn default_fraction() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default = "default_d_txt")]
    pub d_txt: usize,
    pub schedule: ScheduleSpec,
    #[serde(default = "default_true")]
    pub adaptive: bool,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise_rho: f64,
    #[serde(default = "default_fraction")]
    pub data_fraction: f64,
    #[serde(default)]
    pub l2_normalize_alignment: bool,
    /// Random horizontal flips of training images.
    #[serde(default)]
    pub hflip: bool,
    /// Train a plain classifier: no text head, no alignment term.
    #[serde(default)]
    pub baseline: bool,
}

impl TrainConfig {
    /// Desk-scale defaults with a constant schedule at `lambda`.
    pub fn new(lambda: f64, epochs: usize) -> Self {
        TrainConfig {
            backbone: BackboneConfig::default(),
            d_txt: default_d_txt(),
            schedule: ScheduleSpec::constant(lambda, epochs),
            adaptive: true,
            epochs,
            batch_size: default_batch(),
            learning_rate: default_lr(),
            weight_decay: default_wd(),
            warmup_epochs: default_warmup(),
            label_smoothing: default_smoothing(),
            seed: 0,
            noise_rho: 0.0,
            data_fraction: 1.0,
            l2_normalize_alignment: false,
            hflip: false,
            baseline: false,
        }
    }

    /// Whether the alignment term can be active at some epoch.
    pub fn uses_text(&self) -> bool {
        !self.baseline && self.schedule.peak > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.schedule.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.schedule.total_epochs != self.epochs {
            return Err(Error::Config(format!(
                "schedule spans {} epochs but training runs {}",
                self.schedule.total_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.uses_text() && self.batch_size < 2 {
            return Err(Error::Config("the alignment loss needs batch_size >= 2".into()));
        }
        if self.d_txt < 8 {
            return Err(Error::Config("d_txt must be at least 8".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_rho) {
            return Err(Error::Config("noise_rho must be in [0, 1]".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config("data_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One line of the metric log. Losses, `alpha_adapt` and `lambda_t` are
/// means over the epoch's steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_txt: f64,
    pub alpha_adapt: f64,
    pub lambda_t: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
    pub wall_time: f64,
}

/// What happened on one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: usize,
    /// Indices into the (noised, subsetted) training set.
    pub batch: Vec<usize>,
    pub lambda_t: f64,
    pub alpha_adapt: f64,
    pub l_cls: f64,
    pub l_txt: Option<f64>,
}

/// Observers for a training run. All methods default to no-ops.
pub trait TrainHooks {
    /// Seconds since the run started; `core` has no clock of its own.
    fn elapsed_seconds(&mut self) -> f64 {
        0.0
    }

    /// Called before the update of each step with the parameters that
    /// produced the step's losses.
    fn on_step(&mut self, _info: &StepInfo, _model: &Model<f32>) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _record: &MetricRecord, _model: &Model<f32>) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<MetricRecord>,
    pub steps: usize,
    /// The training set as actually used: labels noised, then subsetted.
    pub train_set: Dataset,
    pub flipped_labels: usize,
}

/// Number of optimization steps of a full-data run, which subsetted runs
/// keep fixed.
pub fn planned_steps(config: &TrainConfig, full_len: usize) -> usize {
    config.epochs * full_len.div_ceil(config.batch_size)
}

/// Trains a fresh model. `eval` is scored after every epoch; `targets`
/// must cover every training id whenever the alignment term can be active.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    eval: Option<&Dataset>,
    targets: Option<&WhitenedTargetSet>,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let cfg = &config.backbone;
    if dataset.image_size != cfg.image_size || dataset.channels != cfg.channels {
        return Err(Error::shape(
            "dataset geometry",
            &[cfg.image_size, cfg.channels],
            &[dataset.image_size, dataset.channels],
        ));
    }
    let classes = dataset.num_classes();

    let noisy = inject_label_noise(&dataset.labels(), config.noise_rho, classes.max(2), config.seed ^ STREAM_NOISE)?;
    let noised = dataset.with_labels(&noisy.labels)?;
    let train_set = subset(&noised, config.data_fraction, config.seed ^ STREAM_SUBSET)?;
    let n = train_set.len();

    let target_rows: Vec<Vec<f32>> = if config.uses_text() {
        let targets = targets.ok_or_else(|| Error::MissingTarget("no target set supplied".into()))?;
        if targets.dim() != config.d_txt {
            return Err(Error::shape("targets", &[config.d_txt], &[targets.dim()]));
        }
        train_set
            .samples
            .iter()
            .map(|s| {
                targets
                    .get(&s.id)
                    .map(|row| row.iter().map(|&v| v as f32).collect())
                    .ok_or_else(|| Error::MissingTarget(s.id.clone()))
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut model = Model::<f32>::init(cfg, classes, config.d_txt, config.seed)?;
    let mut opt = AdamW::<f32>::new(AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let decay: Vec<bool> = model.named().iter().map(|(_, t)| t.shape().len() >= 2).collect();

    let b = config.batch_size;
    let total_steps = planned_steps(config, dataset.len());
    let steps_per_epoch = n.div_ceil(b);
    let full_steps_per_epoch = dataset.len().div_ceil(b);
    let warmup_steps = config.warmup_epochs * full_steps_per_epoch;
    let epochs_run = total_steps.div_ceil(steps_per_epoch);

    let mut shuffle_rng = Rng::derived(config.seed, STREAM_SHUFFLE);
    let mut flip_rng = Rng::derived(config.seed, STREAM_FLIP);
    let mut log = Vec::with_capacity(epochs_run);
    let mut step = 0usize;

    for epoch in 0..epochs_run {
        let order = shuffle_rng.permutation(n);
        let mut sums = [0.0f64; 4];
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut steps_this_epoch = 0usize;
        for chunk in order.chunks(b) {
            if step == total_steps {
                break;
            }
            // schedule position on the full-data epoch grid
            let sched_epoch = step * config.epochs / total_steps;
            let lambda = if config.baseline {
                0.0
            } else {
                lambda_at(&config.schedule, sched_epoch)?
            };
            let flipped: Vec<Option<Vec<f32>>> = chunk
                .iter()
                .map(|&i| {
                    (config.hflip && flip_rng.bernoulli(0.5))
                        .then(|| hflip(&train_set.samples[i].image, cfg.image_size, cfg.channels))
                })
                .collect();
            let images: Vec<&[f32]> = chunk
                .iter()
                .zip(&flipped)
                .map(|(&i, f)| f.as_deref().unwrap_or(&train_set.samples[i].image))
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.samples[i].label).collect();

            let targets_t = if lambda > 0.0 {
                let mut t = Vec::with_capacity(chunk.len() * config.d_txt);
                for &i in chunk {
                    t.extend_from_slice(&target_rows[i]);
                }
                Some(Tensor::new(&[chunk.len(), config.d_txt], t)?)
            } else {
                None
            };
            let mut g = Graph::<f32>::new();
            let vars = model.register(&mut g);
            let StepLosses {
                logits,
                l_cls,
                l_txt,
                alpha,
                loss,
                ..
            } = step_losses(
                &mut g,
                &vars,
                cfg,
                &StepInputs {
                    images: &images,
                    labels: &labels,
                    targets: targets_t.as_ref(),
                    lambda,
                    alpha: if config.adaptive { AlphaMode::Adaptive } else { AlphaMode::Fixed(1.0) },
                    smoothing: config.label_smoothing,
                    normalize: config.l2_normalize_alignment,
                },
            )?;
            let l_cls_v = g.item(l_cls) as f64;
            let l_txt_v = l_txt.map(|v| g.item(v) as f64);
            if !g.item(loss).is_finite() || !alpha.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }

            for (row, &y) in g.value(logits).chunks_exact(classes).zip(&labels) {
                if argmax(row) == y {
                    correct += 1;
                }
            }
            seen += chunk.len();
            sums[0] += l_cls_v;
            sums[1] += l_txt_v.unwrap_or(0.0);
            sums[2] += alpha;
            sums[3] += lambda;
            steps_this_epoch += 1;

            hooks.on_step(
                &StepInfo {
                    epoch,
                    step,
                    batch: chunk.to_vec(),
                    lambda_t: lambda,
                    alpha_adapt: alpha,
                    l_cls: l_cls_v,
                    l_txt: l_txt_v,
                },
                &model,
            )?;

            g.backward(loss)?;
            let lr = warmup_cosine_lr(config.learning_rate, step, total_steps, warmup_steps);
            let all = vars.all();
            for (idx, param) in model.tensors_mut().into_iter().enumerate() {
                if let Some(grad) = g.grad(all[idx]) {
                    opt.step(idx, param, grad, lr, decay[idx])
                        .map_err(|_| Error::Diverged { epoch, step })?;
                }
            }
            step += 1;
        }
        let k = steps_this_epoch.max(1) as f64;
        let eval_accuracy = match eval {
            Some(e) => Some(evaluate(&model, e)?),
            None => None,
        };
        let record = MetricRecord {
            epoch,
            l_cls: sums[0] / k,
            l_txt: sums[1] / k,
            alpha_adapt: sums[2] / k,
            lambda_t: sums[3] / k,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            eval_accuracy,
            wall_time: hooks.elapsed_seconds(),
        };
        hooks.on_epoch(&record, &model)?;
        log.push(record);
    }

    Ok(TrainOutcome {
        model,
        log,
        steps: step,
        train_set,
        flipped_labels: noisy.flipped,
    })
}

/// How the alignment term is weighted on a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaMode {
    /// Gradient-balancing weight recomputed from this batch.
    Adaptive,
    Fixed(f64),
}

/// One batch worth of objective inputs.
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<'a, T> {
    pub images: &'a [&'a [T]],
    pub labels: &'a [usize],
    /// `B x d_txt`; required when `lambda > 0`.
    pub targets: Option<&'a Tensor<T>>,
    pub lambda: f64,
    pub alpha: AlphaMode,
    pub smoothing: f64,
    pub normalize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub z: Var,
    pub logits: Var,
    pub l_cls: Var,
    /// Absent when `lambda == 0`: the text branch is not built at all.
    pub l_txt: Option<Var>,
    pub alpha: f64,
    pub loss: Var,
}

/// Builds the training objective for one batch on `g`. With adaptive
/// weighting, `alpha` comes from two scoped backward passes to `z` and
/// enters the total loss as a constant.
pub fn step_losses<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    cfg: &BackboneConfig,
    inputs: &StepInputs<'_, T>,
) -> Result<StepLosses> {
    let z = encode(g, &vars.backbone, cfg, inputs.images)?;
    let logits = class_logits(g, z, &vars.heads)?;
    let l_cls = g.cross_entropy(logits, inputs.labels, inputs.smoothing)?;
    let mut alpha = match inputs.alpha {
        AlphaMode::Fixed(a) => a,
        AlphaMode::Adaptive => 1.0,
    };
    let mut l_txt = None;
    if inputs.lambda > 0.0 {
        let targets = inputs
            .targets
            .ok_or_else(|| Error::MissingTarget("batch targets".into()))?;
        let p_txt = text_prediction(g, z, &vars.heads)?;
        let lt = text_alignment_loss(g, p_txt, targets, inputs.normalize)?;
        if inputs.alpha == AlphaMode::Adaptive {
            let gc = g.grad_wrt(l_cls, z)?;
            let gt = g.grad_wrt(lt, z)?;
            alpha = adaptive_weight(&gc, &gt, ADAPTIVE_EPS);
        }
        l_txt = Some(lt);
    }
    let loss = total_loss(g, l_txt, l_cls, inputs.lambda, alpha)?;
    Ok(StepLosses {
        z,
        logits,
        l_cls,
        l_txt,
        alpha,
        loss,
    })
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of the class head.
pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    if dataset.num_classes() > model.classes() {
        return Err(Error::shape("evaluate classes", &[model.classes()], &[dataset.num_classes()]));
    }
    let mut correct = 0usize;
    for chunk in dataset.samples.chunks(EVAL_CHUNK) {
        let cast: Vec<Vec<T>> = chunk.iter().map(|s| s.image.iter().map(|&v| c(v as f64)).collect()).collect();
        let images: Vec<&[T]> = cast.iter().map(Vec::as_slice).collect();
        let logits = model.logits(&images)?;
        for (row, s) in logits.data().chunks_exact(model.classes()).zip(chunk) {
            if argmax(row) == s.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Embeddings `z` of every sample, `n x d`, in dataset order.
pub fn embed_dataset<T: Scalar>(model: &Model<T>, dataset: &Dataset) -> Result<Tensor<T>> {
    let d = model.config.width;
    let mut out = Vec::with_capacity(dataset.len() * d);
    for chunk in dataset.samples.chunks(EVAL_CHUNK) {
        let cast: Vec<Vec<T>> = chunk.iter().map(|s| s.image.iter().map(|&v| c(v as f64)).collect()).collect();
        let images: Vec<&[T]> = cast.iter().map(Vec::as_slice).collect();
        out.extend_from_slice(model.embed(&images)?.data());
    }
    Tensor::new(&[dataset.len(), d], out)
}
