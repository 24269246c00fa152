//! Linear probe on frozen region features with a soft-Dice objective.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::Model;
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::synthdata::{Dataset, PairedSample, Split};
use crate::training::AdamW;

const DICE_SMOOTH: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Entity classes plus background; 0 means "derive from the dataset".
    pub classes: usize,
    pub epochs: usize,
    pub lr: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            classes: 0,
            epochs: 300,
            lr: 0.05,
            threshold: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Dice per foreground class (index 0 is the first entity class).
    pub per_class_dice: Vec<f64>,
    pub micro_dice: f64,
    /// Training soft-Dice loss per epoch.
    pub curve: Vec<f64>,
    pub encoder_fingerprint: u64,
}

/// `2|A∩B| / (|A| + |B|)`; two empty masks agree perfectly.
pub fn dice(pred: &[bool], target: &[bool]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Eval(format!(
            "mask sizes differ: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    let (inter, total) = dice_counts(pred, target);
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

fn dice_counts(pred: &[bool], target: &[bool]) -> (usize, usize) {
    let inter = pred.iter().zip(target).filter(|(a, b)| **a && **b).count();
    let total = pred.iter().filter(|a| **a).count() + target.iter().filter(|b| **b).count();
    (inter, total)
}

/// Nearest-neighbour upsampling of a row-major `h x w` grid by integer factors.
pub fn upsample_nearest<T: Copy>(grid: &[T], h: usize, w: usize, fy: usize, fx: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(grid.len() * fy * fx);
    for y in 0..h * fy {
        for x in 0..w * fx {
            out.push(grid[(y / fy) * w + x / fx]);
        }
    }
    out
}

/// Region features and class labels (0 = background) for a set of samples.
pub struct ProbeData {
    /// `(n*K) x d`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl ProbeData {
    pub fn samples(&self) -> usize {
        self.labels.len() / (self.grid_h * self.grid_w)
    }
}

pub fn region_labels(sample: &PairedSample) -> Vec<usize> {
    sample
        .entity_map
        .region_classes()
        .into_iter()
        .map(|c| c.map_or(0, |c| c as usize + 1))
        .collect()
}

/// Frozen encoder features (evaluation mode) of `samples`.
pub fn encoder_features(model: &Model, samples: &[&PairedSample]) -> Result<ProbeData> {
    let (h, w) = (model.config.grid_h, model.config.grid_w);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut cols = 0;
    for chunk in samples.chunks(32) {
        let mut g = Graph::new();
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let y = model.encode_images(&mut g, &images)?;
        cols = g.value(y).cols();
        data.extend_from_slice(g.value(y).data());
        for s in chunk {
            labels.extend(region_labels(s));
        }
    }
    Ok(ProbeData {
        features: Tensor::matrix(labels.len(), cols, data),
        labels,
        grid_h: h,
        grid_w: w,
    })
}

/// Per-dimension standardization fitted on `train`.
fn standardize(train: &Tensor, others: &[&Tensor]) -> (Tensor, Vec<Tensor>) {
    let (n, d) = (train.rows(), train.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        mean.iter_mut().zip(train.row_slice(r)).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut sd = vec![0.0; d];
    for r in 0..n {
        sd.iter_mut()
            .zip(train.row_slice(r).iter().zip(&mean))
            .for_each(|(s, (x, m))| *s += (x - m).powi(2));
    }
    sd.iter_mut().for_each(|s| *s = (*s / n as f64).sqrt().max(1e-8));
    let apply = |t: &Tensor| {
        let mut out = t.clone();
        let cols = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % cols;
            *v = (*v - mean[j]) / sd[j];
        }
        out
    };
    (apply(train), others.iter().map(|t| apply(t)).collect())
}

/// Mean over foreground classes of `1 - soft Dice`.
fn soft_dice_loss(g: &mut Graph, probs: Var, targets: Var, classes: usize) -> Var {
    let inter = g.mul(probs, targets);
    let ones = g.constant(Tensor::filled(&[1, g.value(probs).rows()], 1.0));
    let inter = g.matmul(ones, inter);
    let p_sum = g.matmul(ones, probs);
    let t_sum = g.matmul(ones, targets);
    let fg = 1..classes;
    let inter = g.slice_cols(inter, fg.clone());
    let p_sum = g.slice_cols(p_sum, fg.clone());
    let t_sum = g.slice_cols(t_sum, fg);
    let smooth = g.constant(Tensor::filled(&[1, classes - 1], DICE_SMOOTH));
    let num = g.scale(inter, 2.0);
    let num = g.add(num, smooth);
    let den = g.add(p_sum, t_sum);
    let den = g.add(den, smooth);
    let ratio = g.div(num, den);
    let mean = g.sum(ratio);
    let mean = g.scale(mean, -1.0 / (classes - 1) as f64);
    let one = g.constant(Tensor::scalar(1.0));
    g.add(one, mean)
}

/// Thresholded per-class predictions, upsampled to the input lattice and
/// scored against upsampled targets.
fn score(probs: &Tensor, data: &ProbeData, classes: usize, threshold: f64, up: (usize, usize)) -> (Vec<f64>, f64) {
    let k = data.grid_h * data.grid_w;
    let mut inter = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for s in 0..data.samples() {
        for c in 1..classes {
            let pred: Vec<bool> = (0..k).map(|r| probs.at(s * k + r, c) >= threshold).collect();
            let target: Vec<bool> = (0..k).map(|r| data.labels[s * k + r] == c).collect();
            let pred = upsample_nearest(&pred, data.grid_h, data.grid_w, up.0, up.1);
            let target = upsample_nearest(&target, data.grid_h, data.grid_w, up.0, up.1);
            let (i, t) = dice_counts(&pred, &target);
            inter[c] += i;
            total[c] += t;
        }
    }
    let per_class = (1..classes)
        .map(|c| if total[c] == 0 { 1.0 } else { 2.0 * inter[c] as f64 / total[c] as f64 })
        .collect();
    let (i, t): (usize, usize) = (inter[1..].iter().sum(), total[1..].iter().sum());
    let micro = if t == 0 { 1.0 } else { 2.0 * i as f64 / t as f64 };
    (per_class, micro)
}

/// Train the element-wise linear classifier on `train` features and report
/// Dice on `test`. `upsample` gives the pixel size of one region.
pub fn train_linear_probe_on_features(
    train: &ProbeData,
    test: &ProbeData,
    cfg: &ProbeConfig,
    upsample: (usize, usize),
) -> Result<ProbeResult> {
    let classes = cfg.classes;
    if classes < 2 {
        return Err(config_err!("probe needs at least two classes"));
    }
    if let Some(&bad) = train.labels.iter().chain(&test.labels).find(|&&l| l >= classes) {
        return Err(config_err!("label {bad} outside {classes} probe classes"));
    }
    let d = train.features.cols();
    let (x_train, rest) = standardize(&train.features, &[&test.features]);
    let x_test = &rest[0];
    let mut targets = Tensor::zeros(&[train.labels.len(), classes]);
    for (r, &l) in train.labels.iter().enumerate() {
        targets.data_mut()[r * classes + l] = 1.0;
    }

    let mut store = ParamStore::new();
    let w = store.add("probe.weight", Tensor::zeros(&[d, classes]));
    let b = store.add("probe.bias", Tensor::zeros(&[1, classes]));
    let mut opt = AdamW::new(&store);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let x = g.constant(x_train.clone());
        let t = g.constant(targets.clone());
        let wv = g.param(&store, w);
        let bv = g.param(&store, b);
        let logits = g.matmul(x, wv);
        let logits = g.add_row(logits, bv);
        let probs = g.softmax(logits, 1)?;
        let loss = soft_dice_loss(&mut g, probs, t, classes);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                component: "probe_dice".into(),
            });
        }
        curve.push(value);
        let grads = g.backward(loss);
        let per: Vec<Option<Tensor>> = store.ids().map(|id| grads.param(id)).collect();
        opt.update(&mut store, &per, cfg.lr, 0.0);
    }

    let mut g = Graph::new();
    let x = g.constant(x_test.clone());
    let wv = g.param(&store, w);
    let bv = g.param(&store, b);
    let logits = g.matmul(x, wv);
    let logits = g.add_row(logits, bv);
    let probs = g.softmax(logits, 1)?;
    let (per_class_dice, micro_dice) = score(g.value(probs), test, classes, cfg.threshold, upsample);
    Ok(ProbeResult {
        per_class_dice,
        micro_dice,
        curve,
        encoder_fingerprint: 0,
    })
}

/// Probe a frozen model: train on the train split, score on the test split.
pub fn train_linear_probe(model: &Model, dataset: &Dataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let before = model.store.fingerprint();
    let mut cfg = cfg.clone();
    if cfg.classes == 0 {
        cfg.classes = dataset.config.classes + 1;
    }
    let train = encoder_features(model, &dataset.split(Split::Train))?;
    let test = encoder_features(model, &dataset.split(Split::Test))?;
    if test.labels.is_empty() {
        return Err(Error::Data("probe needs a non-empty test split".into()));
    }
    let up = (model.config.patch_h(), model.config.patch_w());
    let mut result = train_linear_probe_on_features(&train, &test, &cfg, up)?;
    let after = model.store.fingerprint();
    if before != after {
        return Err(Error::Eval("encoder parameters changed during probing".into()));
    }
    result.encoder_fingerprint = after;
    Ok(result)
}

pub fn probe_curve_csv(result: &ProbeResult) -> String {
    let mut s = String::from("epoch,soft_dice_loss\n");
    for (i, v) in result.curve.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i + 1, v));
    }
    s
}
