//! Toy image and report encoders, attention pooling and projection heads.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numerics::{BatchStats, Graph, ParamId, ParamStore, Tensor, Var};
use crate::synthdata::derive_seed;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Multi-head attention pooling with a mean-of-locals query.
    Attention,
    /// Mean over regions for images, element-wise max over sentences for
    /// reports, uniform weights.
    AvgImageMaxReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub channels: usize,
    pub vocab_size: usize,
    /// Hidden width of the per-tile image MLP.
    pub tile_hidden: usize,
    /// Adds the 3x3 cross-region mixing layer after the tile MLP.
    pub region_mixing: bool,
    /// Adds a learned per-region embedding to the tile features.
    pub position_embedding: bool,
    pub region_dim: usize,
    pub token_dim: usize,
    pub contextualizer: bool,
    pub sentence_dim: usize,
    pub local_dim: usize,
    pub global_dim: usize,
    pub head_hidden: usize,
    pub head_batch_norm: bool,
    pub pooling: Pooling,
    pub pool_heads: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid_h: 7,
            grid_w: 7,
            input_h: 14,
            input_w: 14,
            channels: 4,
            vocab_size: 21,
            tile_hidden: 64,
            region_mixing: true,
            position_embedding: true,
            region_dim: 64,
            token_dim: 32,
            contextualizer: true,
            sentence_dim: 64,
            local_dim: 512,
            global_dim: 512,
            head_hidden: 2048,
            head_batch_norm: true,
            pooling: Pooling::Attention,
            pool_heads: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn regions(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_h(&self) -> usize {
        self.input_h / self.grid_h
    }

    pub fn patch_w(&self) -> usize {
        self.input_w / self.grid_w
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_h() * self.patch_w()
    }

    /// Grid coordinates of region `k`.
    pub fn coords(&self, k: usize) -> (usize, usize) {
        (k / self.grid_w, k % self.grid_w)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("input_h", self.input_h),
            ("input_w", self.input_w),
            ("channels", self.channels),
            ("vocab_size", self.vocab_size),
            ("tile_hidden", self.tile_hidden),
            ("region_dim", self.region_dim),
            ("token_dim", self.token_dim),
            ("sentence_dim", self.sentence_dim),
            ("local_dim", self.local_dim),
            ("global_dim", self.global_dim),
            ("head_hidden", self.head_hidden),
            ("pool_heads", self.pool_heads),
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
        if self.pooling == Pooling::Attention {
            for (name, d) in [("region_dim", self.region_dim), ("sentence_dim", self.sentence_dim)] {
                if d % self.pool_heads != 0 {
                    return Err(config_err!(
                        "{name} {d} is not divisible by {} pooling heads",
                        self.pool_heads
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PoolParams {
    /// Shared by the mean-of-locals query and the keys.
    pub query_key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub first: Linear,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub second: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct ContextParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AlignParams {
    pub q: ParamId,
    pub v: ParamId,
    pub o: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelParams {
    pub tile_first: Linear,
    pub tile_second: Linear,
    pub mixing: Option<Linear>,
    pub position: Option<ParamId>,
    pub embedding: ParamId,
    pub context: Option<ContextParams>,
    pub token_out: Linear,
    pub pool_image: Option<PoolParams>,
    pub pool_report: Option<PoolParams>,
    pub head_local_image: HeadParams,
    pub head_local_report: HeadParams,
    pub head_global_image: HeadParams,
    pub head_global_report: HeadParams,
    pub align: AlignParams,
}

/// Encoders, pooling, heads and the alignment matrices with their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: ModelParams,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl Init<'_> {
    fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> ParamId {
        let index = self.store.len() as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 100, index));
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        self.store.add(name, Tensor::matrix(rows, cols, data))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = self.uniform(&format!("{name}.weight"), fan_in, fan_out, bound);
        let bias = bias.then(|| self.uniform(&format!("{name}.bias"), 1, fan_out, bound));
        Linear { weight, bias }
    }

    /// The pooled vector only reaches a projection head, so with batch
    /// normalization there its biases would be cancelled and are left out.
    fn pool(&mut self, name: &str, d: usize, bias: bool) -> PoolParams {
        PoolParams {
            query_key: self.linear(&format!("{name}.query_key"), d, d, true),
            value: self.linear(&format!("{name}.value"), d, d, bias),
            output: self.linear(&format!("{name}.output"), d, d, bias),
        }
    }

    fn head(&mut self, name: &str, d_in: usize, hidden: usize, d_out: usize) -> HeadParams {
        // No bias before batch normalization: the mean subtraction cancels it.
        let first = self.linear(&format!("{name}.first"), d_in, hidden, false);
        let gamma = self
            .store
            .add(format!("{name}.bn.gamma"), Tensor::filled(&[1, hidden], 1.0));
        let beta = self.store.add(format!("{name}.bn.beta"), Tensor::zeros(&[1, hidden]));
        let running_mean = self
            .store
            .add_buffer(format!("{name}.bn.running_mean"), Tensor::zeros(&[1, hidden]));
        let running_var = self
            .store
            .add_buffer(format!("{name}.bn.running_var"), Tensor::filled(&[1, hidden], 1.0));
        let second = self.linear(&format!("{name}.second"), hidden, d_out, true);
        HeadParams {
            first,
            gamma,
            beta,
            running_mean,
            running_var,
            second,
        }
    }
}

/// Batch statistics produced by one head in training mode.
#[derive(Clone, Debug)]
pub struct HeadStats {
    pub head: HeadParams,
    pub stats: BatchStats,
}

/// Output of attention pooling over one sample's local representations.
#[derive(Clone, Copy, Debug)]
pub struct PooledOutput {
    /// `1 x d` global representation.
    pub global_rep: Var,
    /// `1 x n` head-averaged attention probabilities.
    pub weights: Var,
}

/// Multi-head attention pooling of `locals` (n x d) with a query derived
/// from their mean.
pub fn attention_pool(
    g: &mut Graph,
    store: &ParamStore,
    params: &PoolParams,
    locals: Var,
    heads: usize,
) -> Result<PooledOutput> {
    let d = g.value(locals).cols();
    if heads == 0 || d % heads != 0 {
        return Err(config_err!("dimension {d} is not divisible by {heads} heads"));
    }
    let head_dim = d / heads;
    let mean = g.mean_rows(locals);
    let query = params.query_key.apply(g, store, mean);
    let keys = params.query_key.apply(g, store, locals);
    let values = params.value.apply(g, store, locals);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * head_dim..(h + 1) * head_dim;
        let q = g.slice_cols(query, cols.clone());
        let k = g.slice_cols(keys, cols.clone());
        let v = g.slice_cols(values, cols);
        let kt = g.transpose(k);
        let scores = g.matmul(q, kt);
        let scores = g.scale(scores, scale);
        let a = g.softmax(scores, 1)?;
        outs.push(g.matmul(a, v));
        probs.push(a);
    }
    let joined = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    let global_rep = params.output.apply(g, store, joined);
    let stacked = if heads == 1 { probs[0] } else { g.concat_rows(&probs) };
    let weights = g.mean_rows(stacked);
    Ok(PooledOutput {
        global_rep,
        weights,
    })
}

/// Linear → batch norm → ReLU → linear, applied row-wise.
///
/// In training mode a batch of one row falls back to the running statistics.
pub fn project(
    g: &mut Graph,
    store: &ParamStore,
    head: &HeadParams,
    x: Var,
    mode: Mode,
    batch_norm: bool,
) -> (Var, Option<HeadStats>) {
    let h = head.first.apply(g, store, x);
    let (h, stats) = if !batch_norm {
        (h, None)
    } else {
        let rows = g.value(h).rows();
        let (normed, stats) = if mode == Mode::Train && rows > 1 {
            let (n, s) = g.batch_norm(h, BN_EPS);
            (n, Some(HeadStats { head: *head, stats: s }))
        } else {
            let mean = store.get(head.running_mean).map(|m| -m);
            let inv = store
                .get(head.running_var)
                .map(|v| 1.0 / (v + BN_EPS).sqrt());
            let mean = g.constant(mean);
            let inv = g.constant(inv);
            let centered = g.add_row(h, mean);
            (g.mul_row(centered, inv), None)
        };
        let gamma = g.param(store, head.gamma);
        let beta = g.param(store, head.beta);
        let scaled = g.mul_row(normed, gamma);
        (g.add_row(scaled, beta), stats)
    };
    let h = g.relu(h);
    (head.second.apply(g, store, h), stats)
}

/// One report as token ids per sentence.
pub type Report<'a> = &'a [Vec<u32>];

/// Everything the losses and diagnostics need from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `(N*K) x d^I`, sample-major.
    pub regions: Var,
    /// `(sum M_i) x d^R`.
    pub sentences: Var,
    pub sentence_ranges: Vec<Range<usize>>,
    /// `N x d^I` and `N x d^R`.
    pub global_image: Var,
    pub global_report: Var,
    /// Per sample, `1 x K` and `1 x M_i`.
    pub image_weights: Vec<Var>,
    pub report_weights: Vec<Var>,
    pub z_image: Var,
    pub z_report: Var,
    pub zg_image: Var,
    pub zg_report: Var,
    pub head_stats: Vec<HeadStats>,
}

impl ForwardOutput {
    pub fn batch_size(&self) -> usize {
        self.sentence_ranges.len()
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            seed: config.seed,
        };
        let c = &config;
        let tile_first = init.linear("image.tile.first", c.patch_dim(), c.tile_hidden, true);
        let tile_second = init.linear("image.tile.second", c.tile_hidden, c.region_dim, true);
        let mixing = c
            .region_mixing
            .then(|| init.linear("image.mix", 9 * c.region_dim, c.region_dim, true));
        let position = c.position_embedding.then(|| {
            let b = 1.0 / (c.region_dim as f64).sqrt();
            init.uniform("image.position", c.regions(), c.region_dim, b)
        });
        let embedding = init.uniform("report.embedding", c.vocab_size, c.token_dim, 1.0);
        let context = c.contextualizer.then(|| {
            let b = 1.0 / (c.token_dim as f64).sqrt();
            ContextParams {
                query: init.uniform("report.context.query", c.token_dim, c.token_dim, b),
                key: init.uniform("report.context.key", c.token_dim, c.token_dim, b),
                value: init.uniform("report.context.value", c.token_dim, c.token_dim, b),
                output: init.uniform("report.context.output", c.token_dim, c.token_dim, b),
            }
        });
        let token_out = init.linear("report.token_out", c.token_dim, c.sentence_dim, true);
        let attention = c.pooling == Pooling::Attention;
        let pool_image = attention.then(|| init.pool("pool.image", c.region_dim, !c.head_batch_norm));
        let pool_report = attention.then(|| init.pool("pool.report", c.sentence_dim, !c.head_batch_norm));
        let head_local_image = init.head("head.local_image", c.region_dim, c.head_hidden, c.local_dim);
        let head_local_report =
            init.head("head.local_report", c.sentence_dim, c.head_hidden, c.local_dim);
        let head_global_image =
            init.head("head.global_image", c.region_dim, c.head_hidden, c.global_dim);
        let head_global_report =
            init.head("head.global_report", c.sentence_dim, c.head_hidden, c.global_dim);
        let b = (1.0 / c.local_dim as f64).sqrt();
        let align = AlignParams {
            q: init.uniform("align.q", c.local_dim, c.local_dim, b),
            v: init.uniform("align.v", c.local_dim, c.local_dim, b),
            o: init.uniform("align.o", c.local_dim, c.local_dim, b),
        };
        let params = ModelParams {
            tile_first,
            tile_second,
            mixing,
            position,
            embedding,
            context,
            token_out,
            pool_image,
            pool_report,
            head_local_image,
            head_local_report,
            head_global_image,
            head_global_report,
            align,
        };
        Ok(Self {
            config,
            store,
            params,
        })
    }

    /// Rebuild a model around a stored parameter set.
    pub fn with_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let fresh = Self::new(config)?;
        if fresh.store.len() != store.len()
            || fresh
                .store
                .ids()
                .any(|id| fresh.store.name(id) != store.name(id) || fresh.store.get(id).shape() != store.get(id).shape())
        {
            return Err(Error::Data(
                "parameter set does not match the model configuration".into(),
            ));
        }
        Ok(Self {
            store,
            ..fresh
        })
    }

    /// Tile the images of a batch into a `(N*K) x patch_dim` matrix.
    fn patches(&self, images: &[&Tensor]) -> Result<Tensor> {
        let c = &self.config;
        let expected = [c.channels, c.input_h, c.input_w];
        let (ph, pw) = (c.patch_h(), c.patch_w());
        let dim = c.patch_dim();
        let k_total = c.regions();
        let mut data = Vec::with_capacity(images.len() * k_total * dim);
        for img in images {
            if img.shape() != expected {
                return Err(config_err!(
                    "image shape {:?} does not match model input {expected:?}",
                    img.shape()
                ));
            }
            let x = img.data();
            for k in 0..k_total {
                let (r, col) = c.coords(k);
                for ch in 0..c.channels {
                    for dy in 0..ph {
                        let y = r * ph + dy;
                        let start = (ch * c.input_h + y) * c.input_w + col * pw;
                        data.extend_from_slice(&x[start..start + pw]);
                    }
                }
            }
        }
        Ok(Tensor::matrix(images.len() * k_total, dim, data))
    }

    /// Region representations for a batch: `(N*K) x d^I`.
    pub fn encode_images(&self, g: &mut Graph, images: &[&Tensor]) -> Result<Var> {
        let p = self.patches(images)?;
        let x = g.constant(p);
        let h = self.params.tile_first.apply(g, &self.store, x);
        let h = g.relu(h);
        let mut tiles = self.params.tile_second.apply(g, &self.store, h);
        if let Some(pos) = self.params.position {
            let k_total = self.config.regions();
            let table = g.param(&self.store, pos);
            let index = (0..images.len() * k_total).map(|i| Some(i % k_total)).collect();
            let per_region = g.gather_rows(table, index);
            tiles = g.add(tiles, per_region);
        }
        let Some(mix) = self.params.mixing else {
            return Ok(tiles);
        };
        let c = &self.config;
        let k_total = c.regions();
        let mut index = Vec::with_capacity(images.len() * k_total * 9);
        for n in 0..images.len() {
            for k in 0..k_total {
                let (r, col) = c.coords(k);
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (rr, cc) = (r as i64 + dr, col as i64 + dc);
                        let inside = rr >= 0 && cc >= 0 && rr < c.grid_h as i64 && cc < c.grid_w as i64;
                        index.push(
                            inside.then(|| n * k_total + rr as usize * c.grid_w + cc as usize),
                        );
                    }
                }
            }
        }
        let gathered = g.gather_rows(tiles, index);
        let windows = g.reshape(gathered, images.len() * k_total, 9 * c.region_dim);
        let mixed = mix.apply(g, &self.store, windows);
        Ok(g.add(tiles, mixed))
    }

    /// Sentence representations for a batch of reports: `(sum M_i) x d^R`,
    /// with the row range of each report.
    pub fn encode_reports(
        &self,
        g: &mut Graph,
        reports: &[Report<'_>],
    ) -> Result<(Var, Vec<Range<usize>>)> {
        let vocab = self.config.vocab_size;
        let mut token_index = Vec::new();
        let mut token_spans = Vec::with_capacity(reports.len());
        let mut sentence_segments = Vec::new();
        let mut sentence_ranges = Vec::with_capacity(reports.len());
        for report in reports {
            if report.is_empty() {
                return Err(Error::Data("report without sentences".into()));
            }
            let token_start = token_index.len();
            let sentence_start = sentence_segments.len();
            for sentence in report.iter() {
                if sentence.is_empty() {
                    return Err(Error::Data("empty sentence".into()));
                }
                let s = token_index.len();
                for &t in sentence {
                    if t as usize >= vocab {
                        return Err(Error::Data(format!(
                            "token id {t} outside vocabulary of {vocab}"
                        )));
                    }
                    token_index.push(Some(t as usize));
                }
                sentence_segments.push(s..token_index.len());
            }
            token_spans.push(token_start..token_index.len());
            sentence_ranges.push(sentence_start..sentence_segments.len());
        }
        let table = g.param(&self.store, self.params.embedding);
        let mut tokens = g.gather_rows(table, token_index);
        if let Some(ctx) = self.params.context {
            let wq = g.param(&self.store, ctx.query);
            let wk = g.param(&self.store, ctx.key);
            let wv = g.param(&self.store, ctx.value);
            let wo = g.param(&self.store, ctx.output);
            let scale = 1.0 / (self.config.token_dim as f64).sqrt();
            let mut parts = Vec::with_capacity(token_spans.len());
            for span in &token_spans {
                let e = g.slice_rows(tokens, span.clone());
                let q = g.matmul(e, wq);
                let k = g.matmul(e, wk);
                let v = g.matmul(e, wv);
                let kt = g.transpose(k);
                let s = g.matmul(q, kt);
                let s = g.scale(s, scale);
                let a = g.softmax(s, 1)?;
                let av = g.matmul(a, v);
                let o = g.matmul(av, wo);
                parts.push(g.add(e, o));
            }
            tokens = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
        }
        let token_reps = self.params.token_out.apply(g, &self.store, tokens);
        Ok((g.segment_max(token_reps, &sentence_segments), sentence_ranges))
    }

    fn pool(
        &self,
        g: &mut Graph,
        params: Option<PoolParams>,
        locals: Var,
        max_pool: bool,
    ) -> Result<PooledOutput> {
        match params {
            Some(p) => attention_pool(g, &self.store, &p, locals, self.config.pool_heads),
            None => {
                let n = g.value(locals).rows();
                let global_rep = if max_pool {
                    g.segment_max(locals, &[0..n])
                } else {
                    g.mean_rows(locals)
                };
                let weights = g.constant(Tensor::filled(&[1, n], 1.0 / n as f64));
                Ok(PooledOutput {
                    global_rep,
                    weights,
                })
            }
        }
    }

    /// Full forward pass over a batch of (image view, report) pairs.
    pub fn forward(
        &self,
        g: &mut Graph,
        images: &[&Tensor],
        reports: &[Report<'_>],
        mode: Mode,
    ) -> Result<ForwardOutput> {
        if images.is_empty() || images.len() != reports.len() {
            return Err(config_err!(
                "batch needs matching non-empty image and report lists ({} vs {})",
                images.len(),
                reports.len()
            ));
        }
        let k = self.config.regions();
        let regions = self.encode_images(g, images)?;
        let (sentences, sentence_ranges) = self.encode_reports(g, reports)?;

        let mut global_image = Vec::with_capacity(images.len());
        let mut global_report = Vec::with_capacity(images.len());
        let mut image_weights = Vec::with_capacity(images.len());
        let mut report_weights = Vec::with_capacity(images.len());
        for (n, range) in sentence_ranges.iter().enumerate() {
            let locals = g.slice_rows(regions, n * k..(n + 1) * k);
            let pooled = self.pool(g, self.params.pool_image, locals, false)?;
            global_image.push(pooled.global_rep);
            image_weights.push(pooled.weights);
            let locals = g.slice_rows(sentences, range.clone());
            let pooled = self.pool(g, self.params.pool_report, locals, true)?;
            global_report.push(pooled.global_rep);
            report_weights.push(pooled.weights);
        }
        let stack = |g: &mut Graph, v: &[Var]| if v.len() == 1 { v[0] } else { g.concat_rows(v) };
        let global_image = stack(g, &global_image);
        let global_report = stack(g, &global_report);

        let bn = self.config.head_batch_norm;
        let p = &self.params;
        let mut head_stats = Vec::new();
        let mut run = |g: &mut Graph, head: &HeadParams, x: Var| {
            let (z, s) = project(g, &self.store, head, x, mode, bn);
            head_stats.extend(s);
            z
        };
        let z_image = run(g, &p.head_local_image, regions);
        let z_report = run(g, &p.head_local_report, sentences);
        let zg_image = run(g, &p.head_global_image, global_image);
        let zg_report = run(g, &p.head_global_report, global_report);

        Ok(ForwardOutput {
            regions,
            sentences,
            sentence_ranges,
            global_image,
            global_report,
            image_weights,
            report_weights,
            z_image,
            z_report,
            zg_image,
            zg_report,
            head_stats,
        })
    }

    /// Fold batch statistics into the running averages.
    pub fn apply_head_stats(&mut self, stats: &[HeadStats]) {
        for s in stats {
            let n_mean = self.store.get_mut(s.head.running_mean);
            for (r, m) in n_mean.data_mut().iter_mut().zip(&s.stats.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            let n_var = self.store.get_mut(s.head.running_var);
            for (r, v) in n_var.data_mut().iter_mut().zip(&s.stats.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn tiny() -> ModelConfig {
        ModelConfig {
            grid_h: 2,
            grid_w: 2,
            input_h: 4,
            input_w: 4,
            channels: 1,
            vocab_size: 10,
            tile_hidden: 6,
            region_dim: 8,
            token_dim: 4,
            sentence_dim: 8,
            local_dim: 8,
            global_dim: 8,
            head_hidden: 6,
            pool_heads: 2,
            ..ModelConfig::default()
        }
    }

    fn image(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.channels * cfg.input_h * cfg.input_w;
        Tensor::new(
            vec![cfg.channels, cfg.input_h, cfg.input_w],
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn image_encoder_shape_contract() {
        let cfg = ModelConfig {
            channels: 1,
            input_h: 56,
            input_w: 56,
            region_dim: 32,
            local_dim: 16,
            global_dim: 16,
            head_hidden: 16,
            ..ModelConfig::default()
        };
        let m = Model::new(cfg.clone()).unwrap();
        let img = image(&cfg, 1);
        let mut g = Graph::new();
        let y = m.encode_images(&mut g, &[&img]).unwrap();
        assert_eq!(g.value(y).shape(), &[49, 32]);
        let mut g2 = Graph::new();
        let y2 = m.encode_images(&mut g2, &[&img]).unwrap();
        assert_eq!(g.value(y), g2.value(y2));

        let bad = Tensor::zeros(&[1, 28, 28]);
        assert!(matches!(m.encode_images(&mut g, &[&bad]), Err(Error::Config(_))));
    }

    #[test]
    fn zeroed_image_encoder_gives_zero_grid() {
        let cfg = tiny();
        let mut m = Model::new(cfg.clone()).unwrap();
        for id in m.store.ids().collect::<Vec<_>>() {
            if m.store.name(id).starts_with("image.") {
                m.store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let mut g = Graph::new();
        let y = m.encode_images(&mut g, &[&image(&cfg, 2)]).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tile_encoder_is_locally_supported() {
        // Without mixing each region sees only its own tile; with mixing it
        // sees its 3x3 neighbourhood.
        for mixing in [false, true] {
            let cfg = ModelConfig {
                grid_h: 4,
                grid_w: 4,
                input_h: 8,
                input_w: 8,
                region_mixing: mixing,
                ..tiny()
            };
            let m = Model::new(cfg.clone()).unwrap();
            let img = image(&cfg, 3);
            let k = 0; // corner region (0, 0)
            let support = |r: usize, c: usize| if mixing { r <= 1 && c <= 1 } else { r == 0 && c == 0 };
            let mut masked = img.clone();
            for y in 0..8 {
                for x in 0..8 {
                    if !support(y / 2, x / 2) {
                        masked.data_mut()[y * 8 + x] = 0.0;
                    }
                }
            }
            let mut g = Graph::new();
            let a = m.encode_images(&mut g, &[&img]).unwrap();
            let b = m.encode_images(&mut g, &[&masked]).unwrap();
            assert_eq!(g.value(a).row_slice(k), g.value(b).row_slice(k));
            // a region far away does change
            assert_ne!(g.value(a).row_slice(15), g.value(b).row_slice(15));
        }
    }

    #[test]
    fn report_encoder_contracts() {
        let cfg = tiny();
        let m = Model::new(cfg.clone()).unwrap();
        let report = vec![vec![1, 2, 3], vec![4], vec![5, 6]];
        let mut g = Graph::new();
        let (s, ranges) = m.encode_reports(&mut g, &[&report]).unwrap();
        assert_eq!(g.value(s).rows(), 3);
        assert_eq!(ranges, vec![0..3]);

        let bad = vec![vec![1, 99]];
        assert!(matches!(m.encode_reports(&mut g, &[&bad]), Err(Error::Data(_))));
    }

    #[test]
    fn singleton_sentence_is_its_token_rep() {
        let cfg = ModelConfig {
            contextualizer: false,
            ..tiny()
        };
        let m = Model::new(cfg).unwrap();
        let mut g = Graph::new();
        let (s, _) = m.encode_reports(&mut g, &[&[vec![7]][..]]).unwrap();
        // direct evaluation: embedding row 7 times the output projection
        let emb = m.store.get(m.params.embedding);
        let w = m.store.get(m.params.token_out.weight);
        let b = m.store.get(m.params.token_out.bias.unwrap());
        let row = Tensor::row(emb.row_slice(7).to_vec());
        let expected = row.matmul(w);
        for j in 0..expected.len() {
            assert!((g.value(s).data()[j] - expected.data()[j] - b.data()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn bag_of_sentences_without_contextualizer() {
        let m = Model::new(ModelConfig {
            contextualizer: false,
            ..tiny()
        })
        .unwrap();
        let report = vec![vec![1, 2], vec![3, 4, 5], vec![6]];
        let permuted = vec![report[2].clone(), report[0].clone(), report[1].clone()];
        let mut g = Graph::new();
        let (a, _) = m.encode_reports(&mut g, &[&report]).unwrap();
        let (b, _) = m.encode_reports(&mut g, &[&permuted]).unwrap();
        let (a, b) = (g.value(a).clone(), g.value(b).clone());
        assert_eq!(a.row_slice(2), b.row_slice(0));
        assert_eq!(a.row_slice(0), b.row_slice(1));
        assert_eq!(a.row_slice(1), b.row_slice(2));
    }

    #[test]
    fn attention_pool_singleton_and_identical_locals() {
        let m = Model::new(tiny()).unwrap();
        let pool = m.params.pool_image.unwrap();
        let mut g = Graph::new();
        let one = g.constant(Tensor::row(vec![0.3, -0.2, 0.5, 0.1, 0.0, 0.7, -0.4, 0.2]));
        let out = attention_pool(&mut g, &m.store, &pool, one, 2).unwrap();
        assert_eq!(g.value(out.weights).data(), &[1.0]);
        let v = pool.value.apply(&mut g, &m.store, one);
        let expected = pool.output.apply(&mut g, &m.store, v);
        assert!(g.value(out.global_rep).max_abs_diff(g.value(expected)) < 1e-12);

        let same = g.constant(Tensor::from_rows(&vec![vec![0.1; 8]; 5]));
        let out = attention_pool(&mut g, &m.store, &pool, same, 4).unwrap();
        for &w in g.value(out.weights).data() {
            assert!((w - 0.2).abs() < 1e-12);
        }
        assert!(matches!(
            attention_pool(&mut g, &m.store, &pool, same, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attention_pool_matches_closed_form() {
        // d = 2, one head, identity query/key projection without bias:
        // query = mean = (0.5, 0.5); scores = (x_k . q) / sqrt(2)
        let mut store = ParamStore::new();
        let eye = store.add("qk", Tensor::identity(2));
        let zero = store.add("b", Tensor::zeros(&[1, 2]));
        let lin = Linear {
            weight: eye,
            bias: Some(zero),
        };
        let pool = PoolParams {
            query_key: lin,
            value: lin,
            output: lin,
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]));
        let out = attention_pool(&mut g, &store, &pool, x, 1).unwrap();
        let q = [0.5, 1.0];
        let s1: f64 = q[0] / 2f64.sqrt();
        let s2: f64 = 2.0 * q[1] / 2f64.sqrt();
        let w1 = s1.exp() / (s1.exp() + s2.exp());
        let w = g.value(out.weights).data();
        assert!((w[0] - w1).abs() < 1e-9);
        assert!((w[1] - (1.0 - w1)).abs() < 1e-9);
    }

    #[test]
    fn projection_head_contracts() {
        let cfg = ModelConfig::default();
        let m = Model::new(ModelConfig {
            head_hidden: 32,
            ..cfg
        })
        .unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.1; 64], vec![0.3; 64], vec![-0.2; 64]]));
        let (z, stats) = project(&mut g, &m.store, &m.params.head_global_image, x, Mode::Train, true);
        assert_eq!(g.value(z).cols(), 512);
        assert!(stats.is_some());
        let (a, none) = project(&mut g, &m.store, &m.params.head_global_image, x, Mode::Eval, true);
        let (b, _) = project(&mut g, &m.store, &m.params.head_global_image, x, Mode::Eval, true);
        assert!(none.is_none());
        assert_eq!(g.value(a), g.value(b));
        // a single-row batch in training mode uses running statistics
        let one = g.constant(Tensor::row(vec![0.1; 64]));
        let (_, s) = project(&mut g, &m.store, &m.params.head_global_image, one, Mode::Train, true);
        assert!(s.is_none());

        let mut zeroed = m.clone();
        let w2 = m.params.head_global_image.second;
        zeroed.store.get_mut(w2.weight).data_mut().fill(0.0);
        zeroed.store.get_mut(w2.bias.unwrap()).data_mut().fill(0.0);
        let (z, _) = project(&mut g, &zeroed.store, &zeroed.params.head_global_image, x, Mode::Train, true);
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooling_weights_are_a_distribution() {
        let cfg = tiny();
        let m = Model::new(cfg.clone()).unwrap();
        let imgs = [image(&cfg, 4), image(&cfg, 5)];
        let reports = [vec![vec![1, 2], vec![3]], vec![vec![4, 5, 6]]];
        let mut g = Graph::new();
        let out = m
            .forward(
                &mut g,
                &[&imgs[0], &imgs[1]],
                &[&reports[0], &reports[1]],
                Mode::Train,
            )
            .unwrap();
        for w in out.image_weights.iter().chain(&out.report_weights) {
            let w = g.value(*w);
            assert!(w.data().iter().all(|&v| v >= 0.0));
            assert!((w.sum() - 1.0).abs() < 1e-9);
        }
        assert_eq!(out.head_stats.len(), 4);
    }

    #[test]
    fn encoder_and_pooling_gradients_match_finite_differences() {
        let cfg = tiny();
        let m = Model::new(cfg.clone()).unwrap();
        let imgs = [image(&cfg, 6), image(&cfg, 7)];
        let reports = [vec![vec![1, 2], vec![3, 8]], vec![vec![4, 5, 6]]];
        let report = grad_check(&m.store, 1e-5, |g, store| {
            let model = Model {
                store: store.clone(),
                ..m.clone()
            };
            let out = model.forward(
                g,
                &[&imgs[0], &imgs[1]],
                &[&reports[0], &reports[1]],
                Mode::Train,
            )?;
            let mut total = Vec::new();
            for v in [out.z_image, out.z_report, out.zg_image, out.zg_report] {
                let t = g.value(v);
                let mut rng = ChaCha8Rng::seed_from_u64(t.len() as u64);
                let w = Tensor::matrix(
                    t.rows(),
                    t.cols(),
                    (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                );
                let w = g.constant(w);
                let p = g.mul(v, w);
                total.push(g.sum(p));
            }
            let all = g.concat_cols(&total);
            Ok(g.sum(all))
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
