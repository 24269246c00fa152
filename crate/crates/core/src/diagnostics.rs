//! Representation analyses: spatial smoothness, std decomposition, alignment
//! distances, region weight maps and retrieval accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::normalized_distance;
use crate::model::{Mode, Model};
use crate::numerics::{cosine_sim, Graph, Tensor};
use crate::synthdata::PairedSample;
use crate::training::{pipeline_losses, prepare_batch, TrainConfig};

/// Evaluation-mode outputs of one sample.
#[derive(Clone, Debug)]
pub struct SampleOutputs {
    pub sample_id: usize,
    /// `K x d^I` region representations before projection.
    pub regions: Tensor,
    pub global_image: Vec<f64>,
    pub image_weights: Vec<f64>,
    pub report_weights: Vec<f64>,
    pub z_image: Tensor,
    pub z_report: Tensor,
    pub report_to_image: Tensor,
    pub image_to_report: Tensor,
    pub zg_image: Vec<f64>,
    pub zg_report: Vec<f64>,
}

/// Run the model in evaluation mode over `samples` (no augmentation).
pub fn collect_outputs(model: &Model, samples: &[&PairedSample], cfg: &TrainConfig) -> Result<Vec<SampleOutputs>> {
    let k = model.config.regions();
    let hp = cfg.effective_loss();
    let positives = cfg.positives();
    let mut outs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let batch = prepare_batch(chunk, cfg, 0.0, None);
        let mut g = Graph::new();
        let images: Vec<&Tensor> = batch.images.iter().collect();
        let reports: Vec<&[Vec<u32>]> = batch.reports.iter().map(Vec::as_slice).collect();
        let out = model.forward(&mut g, &images, &reports, Mode::Eval)?;
        let losses = pipeline_losses(&mut g, model, &out, &hp, &positives)?;
        let regions = g.value(out.regions).clone();
        let z_image = g.value(out.z_image).clone();
        let z_report = g.value(out.z_report).clone();
        let gi = g.value(out.global_image).clone();
        let zgi = g.value(out.zg_image).clone();
        let zgr = g.value(out.zg_report).clone();
        let rows = |t: &Tensor, r: std::ops::Range<usize>| {
            let cols = t.cols();
            Tensor::matrix(r.len(), cols, t.data()[r.start * cols..r.end * cols].to_vec())
        };
        for (i, range) in out.sentence_ranges.iter().enumerate() {
            let a = &losses.alignments[i];
            outs.push(SampleOutputs {
                sample_id: batch.sample_ids[i],
                regions: rows(&regions, i * k..(i + 1) * k),
                global_image: gi.row_slice(i).to_vec(),
                image_weights: g.value(out.image_weights[i]).data().to_vec(),
                report_weights: g.value(out.report_weights[i]).data().to_vec(),
                z_image: rows(&z_image, i * k..(i + 1) * k),
                z_report: rows(&z_report, range.clone()),
                report_to_image: g.value(a.report_to_image).clone(),
                image_to_report: g.value(a.image_to_report).clone(),
                zg_image: zgi.row_slice(i).to_vec(),
                zg_report: zgr.row_slice(i).to_vec(),
            });
        }
    }
    Ok(outs)
}

/// Five-number summary plus mean and count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            count: v.len(),
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessBin {
    /// Normalized distance rounded to one decimal.
    pub distance: f64,
    pub similarity: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessProfile {
    pub bins: Vec<SmoothnessBin>,
}

impl SmoothnessProfile {
    pub fn total_pairs(&self) -> usize {
        self.bins.iter().map(|b| b.similarity.count).sum()
    }

    pub fn median(&self, distance: f64) -> Option<f64> {
        self.bins
            .iter()
            .find(|b| (b.distance - distance).abs() < 1e-9)
            .map(|b| b.similarity.median)
    }

    /// Whether bin medians never increase over bins `from..=to` (in tenths).
    pub fn medians_non_increasing(&self, from: usize, to: usize) -> bool {
        let medians: Vec<f64> = (from..=to)
            .filter_map(|t| self.median(t as f64 / 10.0))
            .collect();
        medians.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Cosine similarity of every unordered region pair within each sample,
/// binned by rounded normalized grid distance.
pub fn smoothness_profile(regions: &[&Tensor], grid_h: usize, grid_w: usize) -> SmoothnessProfile {
    let mut bins: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for reps in regions {
        let k_total = reps.rows();
        for k in 0..k_total {
            for l in k + 1..k_total {
                let d = normalized_distance(grid_h, grid_w, k, l);
                let key = (d * 10.0).round() as u32;
                let (c, _) = cosine_sim(reps.row_slice(k), reps.row_slice(l));
                bins.entry(key).or_default().push(c);
            }
        }
    }
    SmoothnessProfile {
        bins: bins
            .into_iter()
            .map(|(key, v)| SmoothnessBin {
                distance: key as f64 / 10.0,
                similarity: Summary::of(&v),
            })
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StdDecomposition {
    pub total: f64,
    pub mean_per_sample: f64,
    pub centroid: f64,
    pub global: f64,
}

/// Mean over dimensions of the per-dimension population std of `rows`.
fn mean_std<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone) -> f64 {
    let n = rows.clone().count();
    let Some(dim) = rows.clone().next().map(<[f64]>::len) else {
        return 0.0;
    };
    let mut mean = vec![0.0; dim];
    for r in rows.clone() {
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; dim];
    for r in rows {
        var.iter_mut()
            .zip(r.iter().zip(&mean))
            .for_each(|(v, (x, m))| *v += (x - m).powi(2));
    }
    var.iter().map(|v| (v / n as f64).sqrt()).sum::<f64>() / dim as f64
}

pub fn std_decomposition(regions: &[&Tensor], globals: &[&[f64]]) -> Result<StdDecomposition> {
    if regions.len() < 2 || globals.len() < 2 {
        return Err(Error::Eval("std decomposition needs at least two samples".into()));
    }
    let all = regions.iter().flat_map(|t| (0..t.rows()).map(move |r| t.row_slice(r)));
    let total = mean_std(all);
    let per_sample = regions
        .iter()
        .map(|t| mean_std((0..t.rows()).map(|r| t.row_slice(r))))
        .sum::<f64>()
        / regions.len() as f64;
    let centroids: Vec<Vec<f64>> = regions
        .iter()
        .map(|t| {
            let mut c = vec![0.0; t.cols()];
            for r in 0..t.rows() {
                c.iter_mut().zip(t.row_slice(r)).for_each(|(a, x)| *a += x / t.rows() as f64);
            }
            c
        })
        .collect();
    Ok(StdDecomposition {
        total,
        mean_per_sample: per_sample,
        centroid: mean_std(centroids.iter().map(Vec::as_slice)),
        global: mean_std(globals.iter().copied()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentDistances {
    /// Distances between `z^{R→I}` and `z^I`, one per region.
    pub report_to_image: Summary,
    /// Distances between `z^{I→R}` and `z^R`, one per sentence.
    pub image_to_report: Summary,
}

/// `‖a/‖a‖ − b/‖b‖‖₂`.
pub fn normalized_distance_between(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::numerics::NORM_CLAMP);
    let (na, nb) = (norm(a), norm(b));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x / na - y / nb).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn row_distances<'a>(uni: &'a Tensor, cross: &'a Tensor) -> impl Iterator<Item = f64> + 'a {
    (0..uni.rows()).map(move |r| normalized_distance_between(cross.row_slice(r), uni.row_slice(r)))
}

pub fn alignment_distances(outputs: &[SampleOutputs]) -> AlignmentDistances {
    let r2i: Vec<f64> = outputs
        .iter()
        .flat_map(|o| row_distances(&o.z_image, &o.report_to_image))
        .collect();
    let i2r: Vec<f64> = outputs
        .iter()
        .flat_map(|o| row_distances(&o.z_report, &o.image_to_report))
        .collect();
    AlignmentDistances {
        report_to_image: Summary::of(&r2i),
        image_to_report: Summary::of(&i2r),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightMap {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Row-major mean region weights.
    pub values: Vec<f64>,
}

pub fn weight_map(weights: &[&[f64]], grid_h: usize, grid_w: usize) -> Result<WeightMap> {
    let k = grid_h * grid_w;
    if weights.is_empty() || weights.iter().any(|w| w.len() != k) {
        return Err(Error::Eval(format!("weight map needs non-empty {k}-entry weight vectors")));
    }
    let mut values = vec![0.0; k];
    for w in weights {
        values.iter_mut().zip(*w).for_each(|(a, x)| *a += x / weights.len() as f64);
    }
    Ok(WeightMap { grid_h, grid_w, values })
}

/// Top-1 image→report retrieval accuracy within consecutive batches; ties go
/// to the lower index. A trailing batch of one joins the previous batch.
pub fn retrieval_accuracy(images: &[&[f64]], reports: &[&[f64]], batch_size: usize) -> Result<f64> {
    if batch_size < 2 {
        return Err(Error::Eval("retrieval needs batch size >= 2".into()));
    }
    if images.len() != reports.len() || images.len() < 2 {
        return Err(Error::Eval("retrieval needs at least two matched pairs".into()));
    }
    let mut starts: Vec<usize> = (0..images.len()).step_by(batch_size).collect();
    if images.len() - starts[starts.len() - 1] < 2 {
        starts.pop();
    }
    let mut correct = 0;
    for (b, &start) in starts.iter().enumerate() {
        let end = starts.get(b + 1).copied().unwrap_or(images.len());
        for i in start..end {
            let mut best = (f64::NEG_INFINITY, start);
            for j in start..end {
                let (c, _) = cosine_sim(images[i], reports[j]);
                if c > best.0 {
                    best = (c, j);
                }
            }
            correct += usize::from(best.1 == i);
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

/// All analyses of one model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub split: String,
    pub samples: usize,
    pub smoothness: SmoothnessProfile,
    pub std: StdDecomposition,
    pub alignment: AlignmentDistances,
    pub weights: WeightMap,
    pub retrieval_batch_size: usize,
    pub retrieval_top1: f64,
}

pub fn run_diagnostics(
    model: &Model,
    samples: &[&PairedSample],
    cfg: &TrainConfig,
    split: &str,
) -> Result<DiagnosticsReport> {
    if samples.is_empty() {
        return Err(Error::Eval("diagnostics need a non-empty split".into()));
    }
    let outs = collect_outputs(model, samples, cfg)?;
    let (h, w) = (model.config.grid_h, model.config.grid_w);
    let regions: Vec<&Tensor> = outs.iter().map(|o| &o.regions).collect();
    let globals: Vec<&[f64]> = outs.iter().map(|o| o.global_image.as_slice()).collect();
    let weights: Vec<&[f64]> = outs.iter().map(|o| o.image_weights.as_slice()).collect();
    let zi: Vec<&[f64]> = outs.iter().map(|o| o.zg_image.as_slice()).collect();
    let zr: Vec<&[f64]> = outs.iter().map(|o| o.zg_report.as_slice()).collect();
    Ok(DiagnosticsReport {
        split: split.to_string(),
        samples: outs.len(),
        smoothness: smoothness_profile(&regions, h, w),
        std: std_decomposition(&regions, &globals)?,
        alignment: alignment_distances(&outs),
        weights: weight_map(&weights, h, w)?,
        retrieval_batch_size: cfg.batch_size,
        retrieval_top1: retrieval_accuracy(&zi, &zr, cfg.batch_size)?,
    })
}

pub fn smoothness_csv(p: &SmoothnessProfile) -> String {
    let mut s = String::from("distance,count,min,q1,median,q3,max\n");
    for b in &p.bins {
        let x = &b.similarity;
        let _ = writeln!(s, "{:.1},{},{},{},{},{},{}", b.distance, x.count, x.min, x.q1, x.median, x.q3, x.max);
    }
    s
}

pub fn std_csv(d: &StdDecomposition) -> String {
    format!(
        "total,mean_per_sample,centroid,global\n{},{},{},{}\n",
        d.total, d.mean_per_sample, d.centroid, d.global
    )
}

pub fn alignment_csv(a: &AlignmentDistances) -> String {
    let mut s = String::from("direction,count,min,q1,median,q3,max,mean\n");
    for (name, x) in [("report_to_image", &a.report_to_image), ("image_to_report", &a.image_to_report)] {
        let _ = writeln!(s, "{name},{},{},{},{},{},{},{}", x.count, x.min, x.q1, x.median, x.q3, x.max, x.mean);
    }
    s
}

pub fn weight_map_csv(m: &WeightMap) -> String {
    let mut s = String::from("row,col,weight\n");
    for (k, v) in m.values.iter().enumerate() {
        let _ = writeln!(s, "{},{},{}", k / m.grid_w, k % m.grid_w, v);
    }
    s
}

pub fn retrieval_json(report: &DiagnosticsReport) -> serde_json::Value {
    serde_json::json!({
        "split": report.split,
        "samples": report.samples,
        "batch_size": report.retrieval_batch_size,
        "top1_accuracy": report.retrieval_top1,
        "chance": 1.0 / report.retrieval_batch_size as f64,
    })
}

/// Write the four CSVs, the retrieval JSON and the full JSON summary.
/// Returns the written file names.
pub fn write_report(report: &DiagnosticsReport, dir: &Path, run_id: &str) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tag = format!("{run_id}_{}", report.split);
    let mut written = Vec::new();
    let files = [
        (format!("smoothness_{tag}.csv"), smoothness_csv(&report.smoothness)),
        (format!("std_{tag}.csv"), std_csv(&report.std)),
        (format!("alignment_{tag}.csv"), alignment_csv(&report.alignment)),
        (format!("weights_{tag}.csv"), weight_map_csv(&report.weights)),
    ];
    for (name, text) in files {
        let path = dir.join(&name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(name);
    }
    let name = format!("retrieval_{tag}.json");
    crate::synthdata::write_json(&dir.join(&name), &retrieval_json(report))?;
    written.push(name);
    let name = format!("diagnostics_{tag}.json");
    crate::synthdata::write_json(&dir.join(&name), report)?;
    written.push(name);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn smoothness_constant_and_orthogonal() {
        let constant = Tensor::from_rows(&vec![vec![0.3, -1.0, 2.0]; 9]);
        let p = smoothness_profile(&[&constant, &constant], 3, 3);
        assert_eq!(p.total_pairs(), 2 * 9 * 8 / 2);
        for b in &p.bins {
            assert!((b.similarity.min - 1.0).abs() < 1e-12 && (b.similarity.max - 1.0).abs() < 1e-12);
        }
        let onehot = Tensor::identity(4);
        let p = smoothness_profile(&[&onehot], 2, 2);
        assert!(p.bins.iter().all(|b| b.similarity.max == 0.0 && b.similarity.min == 0.0));
    }

    #[test]
    fn seven_by_seven_bins_are_the_reachable_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reps = Tensor::matrix(49, 3, (0..147).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let p = smoothness_profile(&[&reps], 7, 7);
        let mut expected = std::collections::BTreeSet::new();
        for k in 0..49 {
            for l in k + 1..49 {
                expected.insert((normalized_distance(7, 7, k, l) * 10.0).round() as u32);
            }
        }
        let got: Vec<u32> = p.bins.iter().map(|b| (b.distance * 10.0).round() as u32).collect();
        assert_eq!(got, expected.into_iter().collect::<Vec<_>>());
        assert_eq!(*got.last().unwrap(), 9);
        assert_eq!(got[0], 1);
        assert_eq!(p.total_pairs(), 49 * 48 / 2);
    }

    #[test]
    fn std_decomposition_examples() {
        let a = Tensor::from_rows(&[vec![0.0], vec![2.0]]);
        let b = Tensor::from_rows(&[vec![4.0], vec![6.0]]);
        let g = [1.0, 5.0];
        let d = std_decomposition(&[&a, &b], &[&g[..1], &g[1..]]).unwrap();
        assert!((d.total - 5f64.sqrt()).abs() < 1e-12);
        assert!((d.mean_per_sample - 1.0).abs() < 1e-12);
        assert!((d.centroid - 2.0).abs() < 1e-12);
        assert!((d.global - 2.0).abs() < 1e-12);

        let same = Tensor::from_rows(&vec![vec![1.5, -2.0]; 3]);
        let gg = [1.0, 1.0];
        let d = std_decomposition(&[&same, &same], &[&gg, &gg]).unwrap();
        assert_eq!(d, StdDecomposition::default());

        let c1 = Tensor::from_rows(&vec![vec![1.0]; 3]);
        let c2 = Tensor::from_rows(&vec![vec![3.0]; 3]);
        let d = std_decomposition(&[&c1, &c2], &[&g[..1], &g[1..]]).unwrap();
        assert_eq!(d.mean_per_sample, 0.0);
        assert!(d.centroid > 0.0);

        assert!(std_decomposition(&[&a], &[&g[..1]]).is_err());
    }

    #[test]
    fn distance_examples() {
        assert_eq!(normalized_distance_between(&[1.0, 2.0], &[2.0, 4.0]), 0.0);
        assert!((normalized_distance_between(&[1.0, 0.0], &[-3.0, 0.0]) - 2.0).abs() < 1e-15);
        assert!((normalized_distance_between(&[1.0, 0.0], &[0.0, 5.0]) - 2f64.sqrt()).abs() < 1e-5);
    }

    #[test]
    fn weight_map_examples() {
        let one = [1.0];
        assert_eq!(weight_map(&[&one], 1, 1).unwrap().values, vec![1.0]);
        let u = [0.25; 4];
        let m = weight_map(&[&u, &u], 2, 2).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.25));
        let a = [0.7, 0.1, 0.1, 0.1];
        let b = [0.0, 0.0, 0.5, 0.5];
        let m = weight_map(&[&a, &b], 2, 2).unwrap();
        assert!((m.values.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn retrieval_examples() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| (0..8).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let r: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        assert_eq!(retrieval_accuracy(&r, &r, 4).unwrap(), 1.0);
        // shift by one inside each batch of 4
        let shifted: Vec<&[f64]> = (0..8).map(|i| r[(i / 4) * 4 + (i + 1) % 4]).collect();
        assert_eq!(retrieval_accuracy(&r, &shifted, 4).unwrap(), 0.0);
        assert!(retrieval_accuracy(&r, &r, 1).is_err());
    }

    #[test]
    fn retrieval_of_random_vectors_is_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 16 * 400;
        let mut draw = || -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..8).map(|_| rng.sample(StandardNormal)).collect()).collect()
        };
        let a = draw();
        let b = draw();
        let ra: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
        let rb: Vec<&[f64]> = b.iter().map(Vec::as_slice).collect();
        let acc = retrieval_accuracy(&ra, &rb, 16).unwrap();
        let p = 1.0 / 16.0;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((acc - p).abs() < 3.0 * se, "{acc}");
    }

    #[test]
    fn summary_quartiles() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max, s.mean), (1.0, 2.0, 3.0, 4.0, 5.0, 3.0));
    }
}
