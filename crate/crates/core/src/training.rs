//! Optimization loop: AdamW, cyclic cosine schedule, gradient accumulation,
//! early stopping, ablation switches and checkpoints.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{align, AlignMatrices, AlignmentResult};
use crate::error::{config_err, Error, Result};
use crate::losses::{
    global_loss, local_image_loss, local_report_loss, positiveness, LossBreakdown,
    LossHyperparams, LossVars, PositivenessMatrix,
};
use crate::model::{ForwardOutput, Mode, Model, ModelConfig, Pooling};
use crate::numerics::{grad_check, GradReport, Graph, ParamStore, Tensor};
use crate::synthdata::{
    augment_report, derive_seed, f64s_to_le, le_to_f64s, make_view, read_json, write_json,
    Dataset, PairedSample, Split,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Smallest validation decrease that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

const STREAM_SHUFFLE: u64 = 11;
const STREAM_VIEW: u64 = 12;
const STREAM_EVAL: u64 = 13;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub no_local: bool,
    pub no_global: bool,
    pub nonsmooth_kernel: bool,
    pub avgmax_pooling: bool,
    pub single_sentence: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 5] = [
        "no_local",
        "no_global",
        "nonsmooth_kernel",
        "avgmax_pooling",
        "single_sentence",
    ];

    pub fn enable(&mut self, name: &str) -> Result<()> {
        let flag = match name {
            "no_local" => &mut self.no_local,
            "no_global" => &mut self.no_global,
            "nonsmooth_kernel" => &mut self.nonsmooth_kernel,
            "avgmax_pooling" => &mut self.avgmax_pooling,
            "single_sentence" => &mut self.single_sentence,
            other => {
                return Err(config_err!(
                    "unknown ablation `{other}` (expected one of {})",
                    Self::NAMES.join(", ")
                ))
            }
        };
        *flag = true;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub weight_decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub sentence_swap_prob: f64,
    pub ablations: Ablations,
    pub loss: LossHyperparams,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            lr_min: 0.0,
            batch_size: 16,
            accumulation_steps: 1,
            weight_decay: 1e-6,
            patience: 10,
            max_epochs: 20,
            seed: 0,
            sentence_swap_prob: 0.6,
            ablations: Ablations::default(),
            loss: LossHyperparams::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small configuration sized for a single CPU core.
    pub fn desk() -> Self {
        Self {
            lr_max: 2e-3,
            model: ModelConfig {
                region_dim: 64,
                sentence_dim: 64,
                local_dim: 64,
                global_dim: 64,
                tile_hidden: 64,
                head_hidden: 128,
                token_dim: 32,
                pool_heads: 4,
                head_batch_norm: false,
                ..ModelConfig::default()
            },
            ..Self::default()
        }
    }

    /// Use `seed` for both initialization and the data order/view streams.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(config_err!("need 0 <= lr_min <= lr_max"));
        }
        if self.batch_size < 2 {
            return Err(config_err!("batch_size must be at least 2"));
        }
        if self.accumulation_steps == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(config_err!(
                "accumulation_steps, patience and max_epochs must be positive"
            ));
        }
        if self.weight_decay < 0.0 || !(0.0..=1.0).contains(&self.sentence_swap_prob) {
            return Err(config_err!(
                "weight_decay must be >= 0 and sentence_swap_prob in [0, 1]"
            ));
        }
        self.loss.validate()?;
        self.effective_model().validate()
    }

    /// Loss weights after applying the ablation flags.
    pub fn effective_loss(&self) -> LossHyperparams {
        let mut hp = self.loss.clone();
        if self.ablations.no_local {
            hp.mu = 0.0;
            hp.nu = 0.0;
        }
        if self.ablations.no_global {
            hp.gamma = 0.0;
        }
        if self.ablations.nonsmooth_kernel {
            hp.smooth_kernel = false;
        }
        hp
    }

    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if self.ablations.avgmax_pooling {
            m.pooling = Pooling::AvgImageMaxReport;
        }
        m
    }

    pub fn positives(&self) -> PositivenessMatrix {
        let hp = self.effective_loss();
        positiveness(
            self.model.grid_h,
            self.model.grid_w,
            hp.beta,
            hp.cutoff,
            hp.smooth_kernel,
        )
    }
}

/// `lr_min + (lr_max - lr_min)·½(1 + cos(π·step/steps_per_epoch))`; the
/// cosine's rising half forms the restart, so the period is two epochs.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let t = step as f64 / steps_per_epoch.max(1) as f64;
    cfg.lr_min + (cfg.lr_max - cfg.lr_min) * 0.5 * (1.0 + (PI * t).cos())
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub step: u64,
    /// First and second moments, aligned with the store's ids; `None` for buffers.
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |id| {
            store
                .is_trainable(id)
                .then(|| Tensor::zeros(store.get(id).shape()))
        };
        Self {
            step: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }

    /// One update with gradients aligned to the store's ids.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, weight_decay: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let (Some(m), Some(v)) = (self.m[id.0].as_mut(), self.v[id.0].as_mut()) else {
                continue;
            };
            let theta = store.get_mut(id);
            let g = grads[id.0].as_ref();
            let it = theta
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .enumerate();
            for (i, ((p, m), v)) in it {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gi;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gi * gi;
                *p -= lr * weight_decay * *p;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// A prepared batch: one image view and one report per sample.
#[derive(Clone, Debug)]
pub struct Batch {
    pub sample_ids: Vec<usize>,
    pub images: Vec<Tensor>,
    pub reports: Vec<Vec<Vec<u32>>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Build a batch. Training batches get a noisy view and a sentence-order
/// augmentation drawn from a per-(epoch, sample) stream; evaluation batches
/// use the stored image and order.
pub fn prepare_batch(
    samples: &[&PairedSample],
    cfg: &TrainConfig,
    view_noise: f64,
    train_epoch: Option<usize>,
) -> Batch {
    let mut batch = Batch {
        sample_ids: Vec::with_capacity(samples.len()),
        images: Vec::with_capacity(samples.len()),
        reports: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        let tokens: Vec<Vec<u32>> = s.sentences.iter().map(|x| x.tokens.clone()).collect();
        let (image, mut report, mut rng) = match train_epoch {
            Some(epoch) => {
                let seed = derive_seed(derive_seed(cfg.seed, STREAM_VIEW, epoch as u64), 0, s.sample_id as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let image = make_view(&s.image, view_noise, &mut rng);
                let report = augment_report(&tokens, cfg.sentence_swap_prob, &mut rng);
                (image, report, rng)
            }
            None => {
                let rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_EVAL, s.sample_id as u64));
                (s.image.clone(), tokens, rng)
            }
        };
        if cfg.ablations.single_sentence {
            let pick = rng.gen_range(0..report.len());
            report = vec![report.swap_remove(pick)];
        }
        batch.sample_ids.push(s.sample_id);
        batch.images.push(image);
        batch.reports.push(report);
    }
    batch
}

/// Losses and per-sample alignments computed from a forward pass.
pub struct PipelineLosses {
    pub vars: LossVars,
    pub alignments: Vec<AlignmentResult>,
}

/// Global loss on the batch plus per-sample alignment and local losses,
/// summed in sample order.
pub fn pipeline_losses(
    g: &mut Graph,
    model: &Model,
    out: &ForwardOutput,
    hp: &LossHyperparams,
    positives: &PositivenessMatrix,
) -> Result<PipelineLosses> {
    let n = out.batch_size();
    let k = model.config.regions();
    let global = global_loss(g, out.zg_image, out.zg_report, hp.tau, hp.lambda)?;
    let a = &model.params.align;
    let q = g.param(&model.store, a.q);
    let v = g.param(&model.store, a.v);
    let o = g.param(&model.store, a.o);
    let m = AlignMatrices::bind(g, q, v, o);
    let mut alignments = Vec::with_capacity(n);
    let mut image_terms = Vec::with_capacity(n);
    let mut report_terms = Vec::with_capacity(n);
    for (i, range) in out.sentence_ranges.iter().enumerate() {
        let zi = g.slice_rows(out.z_image, i * k..(i + 1) * k);
        let zr = g.slice_rows(out.z_report, range.clone());
        let res = align(g, zi, zr, &m)?;
        image_terms.push(local_image_loss(
            g,
            zi,
            res.report_to_image,
            positives,
            out.image_weights[i],
            hp.tau_local,
            n,
        )?);
        report_terms.push(local_report_loss(
            g,
            zr,
            res.image_to_report,
            out.report_weights[i],
            hp.tau_local,
            n,
        )?);
        alignments.push(res);
    }
    let sum = |g: &mut Graph, terms: &[_]| {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t);
        }
        acc
    };
    let local_image = sum(g, &image_terms);
    let local_report = sum(g, &report_terms);
    let vars = LossVars::combine(g, global, local_image, local_report, hp.gamma, hp.mu, hp.nu);
    Ok(PipelineLosses { vars, alignments })
}

fn check_finite(b: &LossBreakdown) -> Result<()> {
    match b.first_non_finite() {
        Some(c) => Err(Error::NonFinite {
            component: c.to_string(),
        }),
        None => Ok(()),
    }
}

/// Forward, losses and backward on one micro-batch. Returns the loss values,
/// gradients aligned with the store ids, and batch-norm statistics.
pub fn batch_gradients(
    model: &Model,
    batch: &Batch,
    cfg: &TrainConfig,
    positives: &PositivenessMatrix,
) -> Result<(LossBreakdown, Vec<Option<Tensor>>, Vec<crate::model::HeadStats>)> {
    let mut g = Graph::new();
    let images: Vec<&Tensor> = batch.images.iter().collect();
    let reports: Vec<&[Vec<u32>]> = batch.reports.iter().map(Vec::as_slice).collect();
    let out = model.forward(&mut g, &images, &reports, Mode::Train)?;
    let losses = pipeline_losses(&mut g, model, &out, &cfg.effective_loss(), positives)?;
    let values = losses.vars.values(&g);
    check_finite(&values)?;
    let grads = g.backward(losses.vars.total);
    let per_param = model.store.ids().map(|id| grads.param(id)).collect();
    Ok((values, per_param, out.head_stats))
}

/// One optimizer update over `micro_batches` (gradients are averaged).
/// Returns the mean loss over the micro-batches.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    micro_batches: &[Batch],
    cfg: &TrainConfig,
    positives: &PositivenessMatrix,
    lr: f64,
) -> Result<LossBreakdown> {
    if micro_batches.is_empty() || micro_batches.iter().any(Batch::is_empty) {
        return Err(config_err!("train_step needs non-empty micro-batches"));
    }
    let scale = 1.0 / micro_batches.len() as f64;
    let mut total: Vec<Option<Tensor>> = vec![None; model.store.len()];
    let mut losses = Vec::with_capacity(micro_batches.len());
    for batch in micro_batches {
        let (values, grads, stats) = batch_gradients(model, batch, cfg, positives)?;
        losses.push(values);
        for (acc, g) in total.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match acc {
                None => *acc = Some(g.map(|x| x * scale)),
                Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b * scale),
            }
        }
        model.apply_head_stats(&stats);
    }
    opt.update(&mut model.store, &total, lr, cfg.weight_decay);
    Ok(LossBreakdown::mean(&losses))
}

/// Evaluation batches in split order; a trailing singleton joins the
/// previous batch so every batch has in-batch negatives.
fn eval_chunks<T: Copy>(items: &[T], batch_size: usize) -> Vec<Vec<T>> {
    let mut chunks: Vec<Vec<T>> = items.chunks(batch_size).map(<[T]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
        let last = chunks.pop().expect("non-empty");
        chunks.last_mut().expect("non-empty").extend(last);
    }
    chunks
}

/// Sample-weighted mean loss over `samples` in evaluation mode.
pub fn evaluate(model: &Model, samples: &[&PairedSample], cfg: &TrainConfig) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Err(Error::Eval("cannot evaluate an empty split".into()));
    }
    let positives = cfg.positives();
    let hp = cfg.effective_loss();
    let mut acc = LossBreakdown::default();
    for chunk in eval_chunks(samples, cfg.batch_size) {
        let batch = prepare_batch(&chunk, cfg, 0.0, None);
        let mut g = Graph::new();
        let images: Vec<&Tensor> = batch.images.iter().collect();
        let reports: Vec<&[Vec<u32>]> = batch.reports.iter().map(Vec::as_slice).collect();
        let out = model.forward(&mut g, &images, &reports, Mode::Eval)?;
        let v = pipeline_losses(&mut g, model, &out, &hp, &positives)?.vars.values(&g);
        check_finite(&v)?;
        let w = chunk.len() as f64 / samples.len() as f64;
        acc.global += w * v.global;
        acc.local_image += w * v.local_image;
        acc.local_report += w * v.local_report;
        acc.total += w * v.total;
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    pub train: LossBreakdown,
    pub validation: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epochs: Vec<EpochMetrics>,
    /// Learning rate of every optimizer update, in order.
    pub lr_trace: Vec<f64>,
    pub wall_time_secs: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

pub const METRICS_HEADER: &str =
    "epoch,lr,loss_global,loss_local_image,loss_local_report,loss_total,split";

impl EpochMetrics {
    /// The train and validation CSV rows of this epoch.
    pub fn csv_rows(&self) -> String {
        let row = |b: &LossBreakdown, split: &str| {
            format!(
                "{},{},{},{},{},{},{}\n",
                self.epoch, self.lr, b.global, b.local_image, b.local_report, b.total, split
            )
        };
        row(&self.train, "train") + &row(&self.validation, "validation")
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    /// Epoch (1-based) at which these parameters were recorded.
    pub epoch: usize,
    pub validation: LossBreakdown,
    pub validation_history: Vec<f64>,
}

/// Optimizer batches of one epoch: shuffled, chunked, singletons dropped and
/// grouped into accumulation steps.
fn epoch_plan(train: &[&PairedSample], cfg: &TrainConfig, epoch: usize) -> Vec<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE, epoch as u64));
    order.shuffle(&mut rng);
    let micro: Vec<Vec<usize>> = order
        .chunks(cfg.batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect();
    micro
        .chunks(cfg.accumulation_steps)
        .map(<[Vec<usize>]>::to_vec)
        .collect()
}

pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, TrainMetrics)> {
    train_with(dataset, cfg, |_| Ok(()))
}

/// Train with a callback invoked after every epoch (used to append metrics).
pub fn train_with(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<(Checkpoint, TrainMetrics)> {
    cfg.validate()?;
    let train_split = dataset.split(Split::Train);
    let val_split = dataset.split(Split::Validation);
    if train_split.len() < 2 || val_split.is_empty() {
        return Err(Error::Data(
            "training needs at least two train samples and one validation sample".into(),
        ));
    }
    let model_cfg = cfg.effective_model();
    if (model_cfg.grid_h, model_cfg.grid_w, model_cfg.input_h, model_cfg.input_w, model_cfg.channels)
        != (
            dataset.config.grid_h,
            dataset.config.grid_w,
            dataset.config.input_h,
            dataset.config.input_w,
            dataset.config.channels,
        )
    {
        return Err(config_err!("model grid/input shape does not match the dataset"));
    }
    if model_cfg.vocab_size < dataset.vocab().size() {
        return Err(config_err!(
            "model vocab_size {} is smaller than the dataset vocabulary {}",
            model_cfg.vocab_size,
            dataset.vocab().size()
        ));
    }
    let start = std::time::Instant::now();
    let mut model = Model::new(model_cfg)?;
    let mut opt = AdamW::new(&model.store);
    let positives = cfg.positives();
    let view_noise = dataset.config.view_noise;

    let steps_per_epoch = epoch_plan(&train_split, cfg, 0).len();
    let mut metrics = TrainMetrics::default();
    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut step = 0;
    for epoch in 0..cfg.max_epochs {
        let mut losses = Vec::new();
        let mut lr = lr_at(step, steps_per_epoch, cfg);
        for group in epoch_plan(&train_split, cfg, epoch) {
            let micro: Vec<Batch> = group
                .iter()
                .map(|idx| {
                    let samples: Vec<&PairedSample> = idx.iter().map(|&i| train_split[i]).collect();
                    prepare_batch(&samples, cfg, view_noise, Some(epoch))
                })
                .collect();
            lr = lr_at(step, steps_per_epoch, cfg);
            losses.push(train_step(&mut model, &mut opt, &micro, cfg, &positives, lr)?);
            metrics.lr_trace.push(lr);
            step += 1;
        }
        let validation = evaluate(&model, &val_split, cfg)?;
        history.push(validation.total);
        let em = EpochMetrics {
            epoch: epoch + 1,
            lr,
            train: LossBreakdown::mean(&losses),
            validation,
        };
        on_epoch(&em)?;
        metrics.epochs.push(em);
        let improved = best
            .as_ref()
            .map_or(true, |b| validation.total < b.validation.total - MIN_IMPROVEMENT);
        if improved {
            since_best = 0;
            best = Some(Checkpoint {
                config: cfg.clone(),
                model: model.clone(),
                optimizer: opt.clone(),
                epoch: epoch + 1,
                validation,
                validation_history: Vec::new(),
            });
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                metrics.stopped_early = true;
                break;
            }
        }
    }
    let mut best = best.expect("at least one epoch ran");
    best.validation_history = history;
    metrics.best_epoch = best.epoch;
    metrics.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((best, metrics))
}

pub const CHECKPOINT_FORMAT: &str = "localign-checkpoint";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    schema_version: u32,
    epoch: usize,
    validation: LossBreakdown,
    validation_history: Vec<f64>,
    optimizer_step: u64,
    config: TrainConfig,
    model_config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    /// Offset into `params.bin`, in f64 values.
    offset: usize,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Write `checkpoint.json`, `params.bin` and `optimizer.bin` into `dir`.
pub fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let store = &ck.model.store;
    let mut values = Vec::with_capacity(store.total_values());
    let mut moments = Vec::new();
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        params.push(ParamEntry {
            name: store.name(id).to_string(),
            shape: store.get(id).shape().to_vec(),
            trainable: store.is_trainable(id),
            offset: values.len(),
        });
        values.extend_from_slice(store.get(id).data());
    }
    for moment in [&ck.optimizer.m, &ck.optimizer.v] {
        for t in moment.iter().flatten() {
            moments.extend_from_slice(t.data());
        }
    }
    write_atomic(&dir.join("params.bin"), &f64s_to_le(&values))?;
    write_atomic(&dir.join("optimizer.bin"), &f64s_to_le(&moments))?;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        epoch: ck.epoch,
        validation: ck.validation,
        validation_history: ck.validation_history.clone(),
        optimizer_step: ck.optimizer.step,
        config: ck.config.clone(),
        model_config: ck.model.config.clone(),
        params,
    };
    let tmp = dir.join("checkpoint.json.tmp");
    write_json(&tmp, &manifest)?;
    let path = dir.join("checkpoint.json");
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest = read_json(&dir.join("checkpoint.json"))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint format {} v{}",
            manifest.format, manifest.schema_version
        )));
    }
    let read = |name: &str| -> Result<Vec<f64>> {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        le_to_f64s(&bytes).ok_or_else(|| Error::Data(format!("{} is not a f64 array", path.display())))
    };
    let values = read("params.bin")?;
    let mut store = ParamStore::new();
    for p in &manifest.params {
        let n: usize = p.shape.iter().product();
        let data = values
            .get(p.offset..p.offset + n)
            .ok_or_else(|| Error::Data(format!("params.bin too short for {}", p.name)))?
            .to_vec();
        let t = Tensor::new(p.shape.clone(), data)?;
        if p.trainable {
            store.add(p.name.clone(), t);
        } else {
            store.add_buffer(p.name.clone(), t);
        }
    }
    let model = Model::with_store(manifest.model_config, store)?;
    let mut optimizer = AdamW::new(&model.store);
    optimizer.step = manifest.optimizer_step;
    let moments = read("optimizer.bin")?;
    let mut pos = 0;
    for moment in [&mut optimizer.m, &mut optimizer.v] {
        for t in moment.iter_mut().flatten() {
            let n = t.len();
            let src = moments
                .get(pos..pos + n)
                .ok_or_else(|| Error::Data("optimizer.bin too short".into()))?;
            t.data_mut().copy_from_slice(src);
            pos += n;
        }
    }
    if pos != moments.len() {
        return Err(Error::Data("optimizer.bin has trailing values".into()));
    }
    Ok(Checkpoint {
        config: manifest.config,
        model,
        optimizer,
        epoch: manifest.epoch,
        validation: manifest.validation,
        validation_history: manifest.validation_history,
    })
}


/// Small model, config and batch for whole-pipeline gradient checks:
/// 2x2 regions, two samples with two sentences each, all widths 8.
pub fn gradient_fixture(seed: u64, head_batch_norm: bool) -> Result<(Model, TrainConfig, Batch)> {
    let model_cfg = ModelConfig {
        grid_h: 2,
        grid_w: 2,
        input_h: 4,
        input_w: 4,
        channels: 2,
        vocab_size: 12,
        tile_hidden: 8,
        region_dim: 8,
        token_dim: 8,
        sentence_dim: 8,
        local_dim: 8,
        global_dim: 8,
        head_hidden: 8,
        pool_heads: 2,
        head_batch_norm,
        seed,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        batch_size: 2,
        model: model_cfg.clone(),
        ..TrainConfig::default()
    };
    let model = Model::new(model_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 40, 0));
    let mut batch = Batch {
        sample_ids: vec![0, 1],
        images: Vec::new(),
        reports: Vec::new(),
    };
    for _ in 0..2 {
        let data = (0..2 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        batch.images.push(Tensor::new(vec![2, 4, 4], data)?);
        let sentence = |rng: &mut ChaCha8Rng| (0..3).map(|_| rng.gen_range(0..12)).collect::<Vec<u32>>();
        batch.reports.push(vec![sentence(&mut rng), sentence(&mut rng)]);
    }
    Ok((model, cfg, batch))
}

/// Finite-difference check of the total training loss against every
/// trainable parameter of `model`.
pub fn pipeline_grad_check(model: &Model, batch: &Batch, cfg: &TrainConfig, eps: f64) -> Result<GradReport> {
    let hp = cfg.effective_loss();
    let positives = cfg.positives();
    let images: Vec<&Tensor> = batch.images.iter().collect();
    let reports: Vec<&[Vec<u32>]> = batch.reports.iter().map(Vec::as_slice).collect();
    // The local losses see the pooling weights only as constants, so the
    // finite differences hold them at their base-point values too.
    let mut base = Graph::new();
    let out = model.forward(&mut base, &images, &reports, Mode::Train)?;
    let weights: Vec<Tensor> = out.image_weights.iter().chain(&out.report_weights).map(|&w| base.value(w).clone()).collect();
    grad_check(&model.store, eps, |g, store| {
        let m = Model {
            store: store.clone(),
            ..model.clone()
        };
        let mut out = m.forward(g, &images, &reports, Mode::Train)?;
        let mut fixed = weights.iter();
        for w in out.image_weights.iter_mut().chain(out.report_weights.iter_mut()) {
            *w = g.constant(fixed.next().expect("one weight row per unit set").clone());
        }
        Ok(pipeline_losses(g, &m, &out, &hp, &positives)?.vars.total)
    })
}
