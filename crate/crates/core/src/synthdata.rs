//! Seeded synthetic image–report pairs.
//!
//! Each image is a lattice of `H x W` region tiles. Entities occupy
//! rectangular blocks of tiles and carry a class; every tile of an entity
//! shows that class's pattern at an entity-specific phase, so the class is
//! carried by the pattern's energy in a class subspace rather than by its
//! sign. Reports hold one sentence per entity (class + coarse position +
//! filler tokens) plus optional distractor sentences naming absent classes.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numerics::Tensor;

pub const DATASET_FORMAT: &str = "localign-dataset";
pub const DATASET_SCHEMA_VERSION: u32 = 1;

const PLACEMENT_RETRIES: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub samples: usize,
    /// Train / validation / test percentages; must sum to 100.
    pub split_percent: [u32; 3],
    pub grid_h: usize,
    pub grid_w: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub channels: usize,
    pub entities_min: usize,
    pub entities_max: usize,
    /// Largest entity block side, in region tiles.
    pub entity_extent_max: usize,
    /// Entity class vocabulary size.
    pub classes: usize,
    pub filler_tokens: usize,
    pub filler_max: usize,
    /// Chance of adding a distractor sentence after each entity sentence.
    pub distractor_prob: f64,
    /// Amplitude of entity patterns.
    pub signal: f64,
    /// Per-pixel Gaussian noise baked into the stored image.
    pub pixel_noise: f64,
    /// Noise scale of training views (see [`make_view`]).
    pub view_noise: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            samples: 640,
            split_percent: [80, 10, 10],
            grid_h: 7,
            grid_w: 7,
            input_h: 14,
            input_w: 14,
            channels: 4,
            entities_min: 1,
            entities_max: 3,
            entity_extent_max: 3,
            classes: 6,
            filler_tokens: 8,
            filler_max: 2,
            distractor_prob: 0.2,
            signal: 3.0,
            pixel_noise: 0.3,
            view_noise: 0.1,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("samples", self.samples),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("input_h", self.input_h),
            ("input_w", self.input_w),
            ("channels", self.channels),
            ("entities_min", self.entities_min),
            ("entity_extent_max", self.entity_extent_max),
            ("classes", self.classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config_err!("{name} must be positive"));
            }
        }
        if self.input_h % self.grid_h != 0 || self.input_w % self.grid_w != 0 {
            return Err(config_err!(
                "input {}x{} is not tiled by grid {}x{}",
                self.input_h,
                self.input_w,
                self.grid_h,
                self.grid_w
            ));
        }
        if self.entities_max < self.entities_min {
            return Err(config_err!("entities_max < entities_min"));
        }
        if self.entities_max > self.classes {
            return Err(config_err!("entities_max exceeds the class vocabulary"));
        }
        if self.split_percent.iter().sum::<u32>() != 100 {
            return Err(config_err!("split percentages must sum to 100"));
        }
        if self.filler_max > 0 && self.filler_tokens == 0 {
            return Err(config_err!("filler_max > 0 needs filler_tokens > 0"));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(config_err!("distractor_prob must lie in [0, 1]"));
        }
        if self.signal < 0.0 || self.pixel_noise < 0.0 || self.view_noise < 0.0 {
            return Err(config_err!("signal and noise scales must be non-negative"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            classes: self.classes,
            fillers: self.filler_tokens,
        }
    }

    pub fn patch_h(&self) -> usize {
        self.input_h / self.grid_h
    }

    pub fn patch_w(&self) -> usize {
        self.input_w / self.grid_w
    }
}

/// Closed report vocabulary: class tokens, three row and three column
/// position tokens, a negation token, then filler tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub classes: usize,
    pub fillers: usize,
}

impl Vocab {
    pub fn class(&self, c: usize) -> u32 {
        c as u32
    }

    pub fn row(&self, bin: usize) -> u32 {
        (self.classes + bin) as u32
    }

    pub fn col(&self, bin: usize) -> u32 {
        (self.classes + 3 + bin) as u32
    }

    pub fn negation(&self) -> u32 {
        (self.classes + 6) as u32
    }

    pub fn filler(&self, f: usize) -> u32 {
        (self.classes + 7 + f) as u32
    }

    pub fn size(&self) -> usize {
        self.classes + 7 + self.fillers
    }
}

/// Entity placement on the region lattice. Cell value 0 is background;
/// entity `e` (1-based) has class `classes[e - 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityMap {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<u32>,
    pub classes: Vec<u32>,
}

impl EntityMap {
    pub fn entity_at(&self, row: usize, col: usize) -> u32 {
        self.cells[row * self.width + col]
    }

    pub fn class_of(&self, entity: u32) -> Option<u32> {
        entity
            .checked_sub(1)
            .and_then(|i| self.classes.get(i as usize).copied())
    }

    /// Class label per region; `None` for background.
    pub fn region_classes(&self) -> Vec<Option<u32>> {
        self.cells.iter().map(|&e| self.class_of(e)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<u32>,
    /// Described entity, or `None` for a distractor.
    pub entity: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub sample_id: usize,
    /// `channels x input_h x input_w`.
    pub image: Tensor,
    pub sentences: Vec<Sentence>,
    pub entity_map: EntityMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(config_err!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub samples: Vec<PairedSample>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&PairedSample> {
        let ids = match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        };
        ids.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }
}

/// SplitMix64 finalizer used to derive independent stream seeds.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_PATTERNS: u64 = 1;
const STREAM_SAMPLE: u64 = 2;
const STREAM_SPLIT: u64 = 3;

/// Two unit vectors per class spanning the class's pattern plane.
fn class_patterns(cfg: &DatasetConfig) -> Vec<[Vec<f64>; 2]> {
    let dim = cfg.channels * cfg.patch_h() * cfg.patch_w();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_PATTERNS, 0));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    (0..cfg.classes)
        .map(|_| {
            let u = unit((0..dim).map(|_| normal.sample(&mut rng)).collect());
            // Gram-Schmidt so the plane is spanned by an orthonormal pair.
            let raw: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let d: f64 = raw.iter().zip(&u).map(|(a, b)| a * b).sum();
            let v = unit(raw.iter().zip(&u).map(|(a, b)| a - d * b).collect());
            [u, v]
        })
        .collect()
}

fn position_bin(center: f64, extent: usize) -> usize {
    ((3.0 * center / extent as f64).floor() as usize).min(2)
}

fn generate_sample(
    cfg: &DatasetConfig,
    patterns: &[[Vec<f64>; 2]],
    sample_id: usize,
) -> Result<PairedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SAMPLE, sample_id as u64));
    let vocab = cfg.vocab();
    let (gh, gw) = (cfg.grid_h, cfg.grid_w);
    let count = rng.gen_range(cfg.entities_min..=cfg.entities_max);

    let mut class_pool: Vec<u32> = (0..cfg.classes as u32).collect();
    class_pool.shuffle(&mut rng);
    let classes: Vec<u32> = class_pool[..count].to_vec();

    let mut cells = vec![0u32; gh * gw];
    let mut blocks = Vec::with_capacity(count);
    for e in 0..count {
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let bh = rng.gen_range(1..=cfg.entity_extent_max.min(gh));
            let bw = rng.gen_range(1..=cfg.entity_extent_max.min(gw));
            let r0 = rng.gen_range(0..=gh - bh);
            let c0 = rng.gen_range(0..=gw - bw);
            let free = (r0..r0 + bh).all(|r| (c0..c0 + bw).all(|c| cells[r * gw + c] == 0));
            if free {
                placed = Some((r0, c0, bh, bw));
                break;
            }
        }
        let (r0, c0, bh, bw) = placed.ok_or_else(|| {
            Error::Generation(format!(
                "sample {sample_id}: could not place entity {} after {PLACEMENT_RETRIES} attempts",
                e + 1
            ))
        })?;
        for r in r0..r0 + bh {
            for c in c0..c0 + bw {
                cells[r * gw + c] = e as u32 + 1;
            }
        }
        blocks.push((r0, c0, bh, bw));
    }
    let entity_map = EntityMap {
        height: gh,
        width: gw,
        cells,
        classes: classes.clone(),
    };

    // Image: class pattern at a per-entity phase on entity tiles, plus noise.
    let (ph, pw, ch) = (cfg.patch_h(), cfg.patch_w(), cfg.channels);
    let phases: Vec<f64> = (0..count)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut image = vec![0.0; ch * cfg.input_h * cfg.input_w];
    for y in 0..cfg.input_h {
        for x in 0..cfg.input_w {
            let ent = entity_map.entity_at(y / ph, x / pw);
            for c in 0..ch {
                let mut v = cfg.pixel_noise * normal.sample(&mut rng);
                if ent > 0 {
                    let e = (ent - 1) as usize;
                    let [u, w] = &patterns[classes[e] as usize];
                    let k = (c * ph + y % ph) * pw + x % pw;
                    v += cfg.signal * (phases[e].cos() * u[k] + phases[e].sin() * w[k]);
                }
                image[(c * cfg.input_h + y) * cfg.input_w + x] = v;
            }
        }
    }
    let image = Tensor::new(vec![ch, cfg.input_h, cfg.input_w], image)?;

    let fillers = |rng: &mut ChaCha8Rng| -> Vec<u32> {
        let n = if cfg.filler_max == 0 {
            0
        } else {
            rng.gen_range(0..=cfg.filler_max)
        };
        (0..n)
            .map(|_| vocab.filler(rng.gen_range(0..cfg.filler_tokens)))
            .collect()
    };
    let mut sentences = Vec::new();
    for (e, &(r0, c0, bh, bw)) in blocks.iter().enumerate() {
        let row = position_bin(r0 as f64 + bh as f64 / 2.0, gh);
        let col = position_bin(c0 as f64 + bw as f64 / 2.0, gw);
        let mut tokens = vec![vocab.class(classes[e] as usize), vocab.row(row), vocab.col(col)];
        tokens.extend(fillers(&mut rng));
        sentences.push(Sentence {
            tokens,
            entity: Some(e as u32 + 1),
        });
        if rng.gen_bool(cfg.distractor_prob) && count < cfg.classes {
            let absent = class_pool[rng.gen_range(count..cfg.classes)];
            let mut tokens = vec![vocab.negation(), vocab.class(absent as usize)];
            tokens.extend(fillers(&mut rng));
            sentences.push(Sentence {
                tokens,
                entity: None,
            });
        }
    }
    sentences.shuffle(&mut rng);

    Ok(PairedSample {
        sample_id,
        image,
        sentences,
        entity_map,
    })
}

/// Generate every sample and a disjoint train/validation/test split.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let patterns = class_patterns(cfg);
    let samples = (0..cfg.samples)
        .map(|i| generate_sample(cfg, &patterns, i))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..cfg.samples).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SPLIT, 0)));
    let n_train = cfg.samples * cfg.split_percent[0] as usize / 100;
    let n_val = cfg.samples * cfg.split_percent[1] as usize / 100;
    let mut train = order[..n_train].to_vec();
    let mut validation = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();

    Ok(Dataset {
        config: cfg.clone(),
        samples,
        train,
        validation,
        test,
    })
}

/// Reorder a report by `len` candidate transpositions of two distinct,
/// uniformly chosen positions, each applied with probability `swap_prob`.
pub fn augment_report<T: Clone>(sentences: &[T], swap_prob: f64, rng: &mut impl Rng) -> Vec<T> {
    let mut out = sentences.to_vec();
    let m = out.len();
    if m < 2 {
        return out;
    }
    for _ in 0..m {
        let i = rng.gen_range(0..m);
        let j = (i + rng.gen_range(1..m)) % m;
        if rng.gen::<f64>() < swap_prob {
            out.swap(i, j);
        }
    }
    out
}

/// Training view: element-wise Gaussian noise of scale `sigma`.
pub fn make_view(image: &Tensor, sigma: f64, rng: &mut impl Rng) -> Tensor {
    if sigma == 0.0 {
        return image.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let mut out = image.clone();
    for v in out.data_mut() {
        *v += normal.sample(rng);
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    schema_version: u32,
    config: DatasetConfig,
    splits: ManifestSplits,
    samples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSplits {
    train: Vec<usize>,
    validation: Vec<usize>,
    test: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    sample_id: usize,
    array: String,
    sidecar: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    sample_id: usize,
    shape: Vec<usize>,
    sentences: Vec<Sentence>,
    entity_map: EntityMap,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub(crate) fn f64s_to_le(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn le_to_f64s(bytes: &[u8]) -> Option<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    )
}

/// Persist as `manifest.json` plus `sample_NNNNN.bin` / `.json` per sample.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let stem = format!("sample_{:05}", s.sample_id);
        let array = format!("{stem}.bin");
        let sidecar = format!("{stem}.json");
        let path = dir.join(&array);
        fs::write(&path, f64s_to_le(s.image.data())).map_err(|e| Error::io(&path, e))?;
        write_json(
            &dir.join(&sidecar),
            &Sidecar {
                sample_id: s.sample_id,
                shape: s.image.shape().to_vec(),
                sentences: s.sentences.clone(),
                entity_map: s.entity_map.clone(),
            },
        )?;
        entries.push(ManifestEntry {
            sample_id: s.sample_id,
            array,
            sidecar,
        });
    }
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            format: DATASET_FORMAT.into(),
            schema_version: DATASET_SCHEMA_VERSION,
            config: ds.config.clone(),
            splits: ManifestSplits {
                train: ds.train.clone(),
                validation: ds.validation.clone(),
                test: ds.test.clone(),
            },
            samples: entries,
        },
    )
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format != DATASET_FORMAT || manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "unsupported dataset format {} v{}",
            manifest.format, manifest.schema_version
        )));
    }
    manifest.config.validate()?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (i, entry) in manifest.samples.iter().enumerate() {
        if entry.sample_id != i {
            return Err(Error::Data(format!(
                "manifest entry {i} carries sample id {}",
                entry.sample_id
            )));
        }
        let side: Sidecar = read_json(&dir.join(&entry.sidecar))?;
        let path = dir.join(&entry.array);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let values = le_to_f64s(&bytes)
            .ok_or_else(|| Error::Data(format!("{} is not a whole f64 array", path.display())))?;
        samples.push(PairedSample {
            sample_id: side.sample_id,
            image: Tensor::new(side.shape, values)?,
            sentences: side.sentences,
            entity_map: side.entity_map,
        });
    }
    let n = samples.len();
    let all = manifest
        .splits
        .train
        .iter()
        .chain(&manifest.splits.validation)
        .chain(&manifest.splits.test);
    if all.clone().any(|&i| i >= n) {
        return Err(Error::Data("split references a missing sample".into()));
    }
    Ok(Dataset {
        config: manifest.config,
        samples,
        train: manifest.splits.train,
        validation: manifest.splits.validation,
        test: manifest.splits.test,
    })
}
