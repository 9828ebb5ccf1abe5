//! Next-token transformer over token corpora.
//!
//! Inputs are `[B, C, L]` token windows. Token, channel, position and subject
//! embeddings are summed, then every channel runs through the same stack
//! independently:
//!
//! * layer 1: latent queries (the newest `L_latent` slots) attend to the
//!   patched inputs followed by the newest `L_u` unpatched slots;
//! * layers 2..: causal self-attention among the latents;
//! * a dense head maps each latent to `K*` logits for the token after it.

mod mask;
mod train;

use rand::Rng;

use crate::error::{bail, Result};
use crate::numerics::{
    dropout, uniform_tensor, Bound, DenseIds, Graph, NormIds, ParamId, ParamStore, Real, Tensor, Var,
};

pub use mask::{build_mask, causal_mask, key_times, query_time, AttentionMask};
pub use train::{
    evaluate_corpus, extract_features, fine_tune, sequence_loss, train_gpt, EpochMetrics, FineTuneConfig, History, TrainWindow,
    training_windows,
};

/// Architecture and training settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GptConfig {
    pub k_star: usize,
    pub channels: usize,
    /// Rows of the subject table; 0 disables the subject term.
    pub subjects: usize,
    pub d: usize,
    pub d_token: usize,
    pub d_channel: usize,
    pub d_position: usize,
    pub d_subject: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_units: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
    /// Receptive field `L`.
    pub l: usize,
    pub patch_len: usize,
    pub unpatched: usize,
    pub latent: usize,
    pub loss_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Batches per epoch; `None` visits every training window once.
    pub batches_per_epoch: Option<usize>,
}

impl GptConfig {
    /// The published foundation-model settings.
    pub fn published(k_star: usize, channels: usize, subjects: usize) -> Self {
        GptConfig {
            k_star,
            channels,
            subjects,
            d: 400,
            d_token: 400,
            d_channel: 400,
            d_position: 400,
            d_subject: 400,
            layers: 4,
            heads: 4,
            ff_units: 400,
            leaky_slope: 0.2,
            dropout: 0.2,
            l: 80,
            patch_len: 4,
            unpatched: 16,
            latent: 40,
            loss_len: 8,
            batch_size: 8,
            epochs: 60,
            lr: 1e-5,
            batches_per_epoch: None,
        }
    }

    /// Small settings for one-core runs.
    pub fn desk(k_star: usize, channels: usize, subjects: usize) -> Self {
        GptConfig {
            d: 32,
            d_token: 32,
            d_channel: 32,
            d_position: 32,
            d_subject: 32,
            layers: 2,
            heads: 2,
            ff_units: 64,
            dropout: 0.1,
            l: 40,
            unpatched: 8,
            latent: 20,
            epochs: 30,
            lr: 1e-3,
            batches_per_epoch: Some(200),
            ..Self::published(k_star, channels, subjects)
        }
    }

    pub fn patches(&self) -> usize {
        self.l / self.patch_len.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_star < 1 || self.channels < 1 {
            bail!(Config, "k_star and channels must be positive");
        }
        if self.patch_len == 0 || self.l % self.patch_len != 0 {
            bail!(Config, "L = {} is not a multiple of the patch length {}", self.l, self.patch_len);
        }
        if self.latent == 0 || self.latent > self.l || self.unpatched > self.l {
            bail!(Config, "need 0 < L_latent <= L and L_u <= L");
        }
        if self.loss_len == 0 || self.loss_len > self.latent {
            bail!(Config, "need 0 < L_loss <= L_latent");
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            bail!(Config, "{} heads do not divide model width {}", self.heads, self.d);
        }
        if self.layers == 0 || self.ff_units == 0 {
            bail!(Config, "need at least one layer and one feed-forward unit");
        }
        if [self.d_token, self.d_channel, self.d_position].contains(&0) || (self.subjects > 0 && self.d_subject == 0) {
            bail!(Config, "embedding widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout must be in [0, 1)");
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            bail!(Config, "batch size and learning rate must be positive");
        }
        Ok(())
    }
}

/// One embedding table and its optional map to the model width.
#[derive(Clone, Copy, Debug)]
pub struct TableIds {
    pub table: ParamId,
    pub map: Option<DenseIds>,
}

impl TableIds {
    fn init<T: Real, R: Rng>(s: &mut ParamStore<T>, name: &str, rows: usize, width: usize, d: usize, rng: &mut R) -> Self {
        let table = s.add(format!("{name}.table"), uniform_tensor(&[rows, width], 0.05, rng));
        let map = (width != d).then(|| DenseIds::init(s, &format!("{name}.map"), width, d, rng));
        TableIds { table, map }
    }

    fn lookup<T: Real>(s: &ParamStore<T>, name: &str) -> Result<Option<Self>> {
        let Some(table) = s.find(&format!("{name}.table")) else { return Ok(None) };
        let map = if s.find(&format!("{name}.map.weight")).is_some() { Some(DenseIds::lookup(s, &format!("{name}.map"))?) } else { None };
        Ok(Some(TableIds { table, map }))
    }

    /// Table rows `idx` at model width: `[idx.len(), d]`.
    fn rows<T: Real>(&self, g: &Graph<T>, p: &Bound, idx: &[usize]) -> Result<Var> {
        let mut t = p.var(self.table);
        if let Some(m) = &self.map {
            t = m.apply(g, p, t)?;
        }
        g.gather(t, idx)
    }
}

/// Parameters of one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerIds {
    pub query: DenseIds,
    pub key: DenseIds,
    pub value: DenseIds,
    pub output: DenseIds,
    pub norm1: NormIds,
    pub ff1: DenseIds,
    pub ff2: DenseIds,
    pub norm2: NormIds,
}

/// Parameter ids of a [`GptModel`].
#[derive(Clone, Debug)]
pub struct GptIds {
    pub token: TableIds,
    pub channel: TableIds,
    pub position: TableIds,
    pub subject: Option<TableIds>,
    pub patch: DenseIds,
    pub layers: Vec<LayerIds>,
    pub head: DenseIds,
}

impl GptIds {
    fn init<T: Real, R: Rng>(s: &mut ParamStore<T>, c: &GptConfig, rng: &mut R) -> Self {
        let d = c.d;
        let token = TableIds::init(s, "embed.token", c.k_star, c.d_token, d, rng);
        let channel = TableIds::init(s, "embed.channel", c.channels, c.d_channel, d, rng);
        let position = TableIds::init(s, "embed.position", c.l, c.d_position, d, rng);
        let subject = (c.subjects > 0).then(|| TableIds::init(s, "embed.subject", c.subjects, c.d_subject, d, rng));
        let patch = DenseIds::init(s, "patch", c.patch_len * d, d, rng);
        let layers = (0..c.layers)
            .map(|i| {
                let n = |x: &str| format!("layer{i}.{x}");
                LayerIds {
                    query: DenseIds::init(s, &n("query"), d, d, rng),
                    key: DenseIds::init(s, &n("key"), d, d, rng),
                    value: DenseIds::init(s, &n("value"), d, d, rng),
                    output: DenseIds::init(s, &n("output"), d, d, rng),
                    norm1: NormIds::init(s, &n("norm1"), d),
                    ff1: DenseIds::init(s, &n("ff1"), d, c.ff_units, rng),
                    ff2: DenseIds::init(s, &n("ff2"), c.ff_units, d, rng),
                    norm2: NormIds::init(s, &n("norm2"), d),
                }
            })
            .collect();
        let head = DenseIds::init(s, "head", d, c.k_star, rng);
        GptIds { token, channel, position, subject, patch, layers, head }
    }

    pub fn lookup<T: Real>(s: &ParamStore<T>, layers: usize) -> Result<Self> {
        let need = |name: &str| -> Result<TableIds> {
            match TableIds::lookup(s, name)? {
                Some(t) => Ok(t),
                None => bail!(Config, "missing parameter block '{}.table'", name),
            }
        };
        let layers = (0..layers)
            .map(|i| {
                let n = |x: &str| format!("layer{i}.{x}");
                Ok(LayerIds {
                    query: DenseIds::lookup(s, &n("query"))?,
                    key: DenseIds::lookup(s, &n("key"))?,
                    value: DenseIds::lookup(s, &n("value"))?,
                    output: DenseIds::lookup(s, &n("output"))?,
                    norm1: NormIds::lookup(s, &n("norm1"))?,
                    ff1: DenseIds::lookup(s, &n("ff1"))?,
                    ff2: DenseIds::lookup(s, &n("ff2"))?,
                    norm2: NormIds::lookup(s, &n("norm2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GptIds {
            token: need("embed.token")?,
            channel: need("embed.channel")?,
            position: need("embed.position")?,
            subject: TableIds::lookup(s, "embed.subject")?,
            patch: DenseIds::lookup(s, "patch")?,
            layers,
            head: DenseIds::lookup(s, "head")?,
        })
    }

    /// Ids of the token, channel and position tables.
    pub fn shared_tables(&self) -> [ParamId; 3] {
        [self.token.table, self.channel.table, self.position.table]
    }
}

/// A batch of token windows `[B, C, L]` with one optional subject per window.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub windows: usize,
    pub channels: usize,
    pub len: usize,
    pub tokens: Vec<u16>,
    pub subjects: Vec<Option<usize>>,
}

impl TokenBatch {
    pub fn new(channels: usize, len: usize, tokens: Vec<u16>, subjects: Vec<Option<usize>>) -> Result<Self> {
        let windows = subjects.len();
        if tokens.len() != windows * channels * len {
            bail!(Dimension, "{} tokens for {} windows of {} x {}", tokens.len(), windows, channels, len);
        }
        Ok(TokenBatch { windows, channels, len, tokens, subjects })
    }

    /// A single window from channel-major `C x L` tokens.
    pub fn single(channels: usize, tokens: Vec<u16>, subject: Option<usize>) -> Result<Self> {
        let len = if channels == 0 { 0 } else { tokens.len() / channels };
        Self::new(channels, len, tokens, vec![subject])
    }
}

/// Forward pass outputs in `[B, C, L_latent, *]` layout.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub decoder_out: Var,
    pub logits: Var,
}

/// Model state: configuration, parameters and the subject-table status.
#[derive(Clone, Debug)]
pub struct GptModel {
    pub config: GptConfig,
    pub params: ParamStore<f32>,
    pub ids: GptIds,
    /// Set once fine-tuning has discarded the pre-training subject table.
    pub subjects_discarded: bool,
}

impl GptModel {
    pub fn new<R: Rng>(config: GptConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let ids = GptIds::init(&mut params, &config, rng);
        Ok(GptModel { config, params, ids, subjects_discarded: false })
    }

    pub fn from_params(config: GptConfig, params: ParamStore<f32>, subjects_discarded: bool) -> Result<Self> {
        config.validate()?;
        let ids = GptIds::lookup(&params, config.layers)?;
        let shape = params.get(ids.token.table).shape();
        if shape[0] != config.k_star || params.get(ids.position.table).shape()[0] != config.l {
            bail!(Config, "stored parameters do not match the configuration");
        }
        let rows = ids.subject.map_or(0, |t| params.get(t.table).shape()[0]);
        if rows != config.subjects {
            bail!(Config, "subject table has {} rows, configuration says {}", rows, config.subjects);
        }
        Ok(GptModel { config, params, ids, subjects_discarded })
    }

    /// Checks labels and ids of a batch against the model.
    pub fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        let c = &self.config;
        if batch.channels != c.channels || batch.len != c.l {
            bail!(Input, "batch windows are {} x {}, model expects {} x {}", batch.channels, batch.len, c.channels, c.l);
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t as usize >= c.k_star) {
            bail!(Index, "token {} outside vocabulary of {}", t, c.k_star);
        }
        for s in batch.subjects.iter().flatten() {
            if self.ids.subject.is_none() {
                if self.subjects_discarded {
                    bail!(Config, "subject id {} refers to the discarded pre-training subject table", s);
                }
                bail!(Config, "model has no subject table, got subject id {}", s);
            }
            if *s >= c.subjects {
                bail!(Index, "subject {} outside table of {}", s, c.subjects);
            }
        }
        let with = batch.subjects.iter().filter(|s| s.is_some()).count();
        if with != 0 && with != batch.windows {
            bail!(Input, "a batch must give a subject for every window or for none");
        }
        Ok(())
    }

    /// Inference forward pass of one batch; returns `(decoder_out, logits)`.
    pub fn forward(&self, batch: &TokenBatch) -> Result<(Tensor<f32>, Tensor<f32>)> {
        self.check_batch(batch)?;
        let g = Graph::<f32>::new();
        let p = self.params.bind(&g, |_| false);
        let out = forward_graph::<f32, rand_chacha::ChaCha8Rng>(&g, &p, &self.ids, &self.config, batch, None)?;
        Ok((g.value(out.decoder_out), g.value(out.logits)))
    }

    /// Next-token probabilities of the newest latent, `[B, C, K*]`.
    pub fn next_token_probs(&self, batch: &TokenBatch) -> Result<Tensor<f32>> {
        let (_, logits) = self.forward(batch)?;
        let (b, c, k, lat) = (batch.windows, self.config.channels, self.config.k_star, self.config.latent);
        let mut out = Tensor::zeros(&[b, c, k]);
        let src = logits.data();
        for n in 0..b * c {
            let row = &src[(n * lat + lat - 1) * k..(n * lat + lat) * k];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let dst = &mut out.data_mut()[n * k..(n + 1) * k];
            let mut z = 0.0f64;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - m).exp();
                z += *d as f64;
            }
            dst.iter_mut().for_each(|d| *d = (*d as f64 / z) as f32);
        }
        Ok(out)
    }
}

/// Embedding sum `v: [B*C, L, d]`.
pub fn embed_graph<T: Real>(g: &Graph<T>, p: &Bound, ids: &GptIds, cfg: &GptConfig, batch: &TokenBatch) -> Result<Var> {
    let (b, c, l, d) = (batch.windows, batch.channels, batch.len, cfg.d);
    let n = b * c * l;
    let tok: Vec<usize> = batch.tokens.iter().map(|&t| t as usize).collect();
    let chan: Vec<usize> = (0..n).map(|i| (i / l) % c).collect();
    let pos: Vec<usize> = (0..n).map(|i| i % l).collect();
    let mut v = g.add(ids.token.rows(g, p, &tok)?, ids.channel.rows(g, p, &chan)?)?;
    v = g.add(v, ids.position.rows(g, p, &pos)?)?;
    if let (Some(table), Some(_)) = (&ids.subject, batch.subjects.first().copied().flatten()) {
        let subj: Vec<usize> = (0..n).map(|i| batch.subjects[i / (c * l)].expect("checked")).collect();
        v = g.add(v, table.rows(g, p, &subj)?)?;
    }
    g.reshape(v, &[b * c, l, d])
}

/// Collapses `[N, L, d]` into `[N, P, d]` with one dense map over each patch.
pub fn patch_graph<T: Real>(g: &Graph<T>, p: &Bound, patch: &DenseIds, v: Var, patch_len: usize) -> Result<Var> {
    let shape = g.shape(v);
    let [n, l, d] = shape[..] else { bail!(Dimension, "patch input must be [N, L, d], got {:?}", shape) };
    if patch_len == 0 || l % patch_len != 0 {
        bail!(Dimension, "L = {} is not a multiple of the patch length {}", l, patch_len);
    }
    let flat = g.reshape(v, &[n, l / patch_len, patch_len * d])?;
    patch.apply(g, p, flat)
}

/// Multi-head attention with input and output projections.
fn attention_block<T: Real>(
    g: &Graph<T>,
    p: &Bound,
    ids: &LayerIds,
    queries: Var,
    keys: Var,
    heads: usize,
    mask: &AttentionMask,
) -> Result<Var> {
    let q = ids.query.apply(g, p, queries)?;
    let k = ids.key.apply(g, p, keys)?;
    let v = ids.value.apply(g, p, keys)?;
    let a = g.attention(q, k, v, heads, Some(&mask.allowed))?;
    ids.output.apply(g, p, a)
}

/// One decoder layer: attention, residual, norm, feed-forward, residual, norm.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer<T: Real, R: Rng>(
    g: &Graph<T>,
    p: &Bound,
    ids: &LayerIds,
    cfg: &GptConfig,
    queries: Var,
    keys: Var,
    mask: &AttentionMask,
    rng: Option<&mut R>,
) -> Result<Var> {
    let a = attention_block(g, p, ids, queries, keys, cfg.heads, mask)?;
    let h = ids.norm1.apply(g, p, g.add(queries, a)?)?;
    let f = ids.ff2.apply(g, p, g.leaky_relu(ids.ff1.apply(g, p, h)?, T::lit(cfg.leaky_slope)))?;
    let f = match rng {
        Some(r) => dropout(g, f, cfg.dropout, r)?,
        None => f,
    };
    ids.norm2.apply(g, p, g.add(h, f)?)
}

/// Full forward pass; dropout is active only when `rng` is given.
pub fn forward_graph<T: Real, R: Rng>(
    g: &Graph<T>,
    p: &Bound,
    ids: &GptIds,
    cfg: &GptConfig,
    batch: &TokenBatch,
    mut rng: Option<&mut R>,
) -> Result<ForwardVars> {
    let (b, c, lat) = (batch.windows, batch.channels, cfg.latent);
    let v = embed_graph(g, p, ids, cfg, batch)?;
    let patched = patch_graph(g, p, &ids.patch, v, cfg.patch_len)?;
    let keys = if cfg.unpatched > 0 {
        let tail = g.slice(v, 1, cfg.l - cfg.unpatched, cfg.unpatched)?;
        g.concat(&[patched, tail], 1)?
    } else {
        patched
    };
    let queries = g.slice(v, 1, cfg.l - lat, lat)?;
    let first = build_mask(cfg.patches(), cfg.patch_len, cfg.unpatched, lat)?;
    let causal = causal_mask(lat);
    let mut h = queries;
    for (i, layer) in ids.layers.iter().enumerate() {
        h = if i == 0 {
            decoder_layer(g, p, layer, cfg, h, keys, &first, rng.as_deref_mut())?
        } else {
            decoder_layer(g, p, layer, cfg, h, h, &causal, rng.as_deref_mut())?
        };
    }
    let logits = ids.head.apply(g, p, h)?;
    Ok(ForwardVars {
        decoder_out: g.reshape(h, &[b, c, lat, cfg.d])?,
        logits: g.reshape(logits, &[b, c, lat, cfg.k_star])?,
    })
}
