use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{forward_graph, GptConfig, GptIds, GptModel, TableIds, TokenBatch};
use crate::data::{TokenCorpus, TokenRecording};
use crate::error::{bail, Result};
use crate::numerics::{adam_step, AdamState, Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Mean cross-entropy over the last `loss_len` latents of `logits: [B, C, L_latent, K*]`.
///
/// `targets` is laid out `[B, C, loss_len]`.
pub fn sequence_loss<T: Real>(g: &Graph<T>, logits: Var, targets: &[usize], loss_len: usize) -> Result<Var> {
    let s = g.shape(logits);
    let [b, c, lat, k] = s[..] else { bail!(Dimension, "logits must be [B, C, L_latent, K*], got {:?}", s) };
    if loss_len == 0 || loss_len > lat {
        bail!(Parameter, "loss length {} outside 1..={}", loss_len, lat);
    }
    let tail = g.slice(logits, 2, lat - loss_len, loss_len)?;
    let flat = g.reshape(tail, &[b * c * loss_len, k])?;
    g.cross_entropy(flat, targets)
}

/// Start of one `L + 1` token window inside a recording.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainWindow {
    pub recording: usize,
    pub start: usize,
}

/// Windows of `l + 1` tokens advancing by `stride` through every recording.
pub fn training_windows(corpus: &TokenCorpus, l: usize, stride: usize) -> Vec<TrainWindow> {
    let mut out = Vec::new();
    for (r, rec) in corpus.recordings.iter().enumerate() {
        let mut start = 0;
        while start + l < rec.samples {
            out.push(TrainWindow { recording: r, start });
            start += stride.max(1);
        }
    }
    out
}

/// Inputs and scored targets for a set of windows.
fn assemble(
    corpus: &TokenCorpus,
    windows: &[TrainWindow],
    cfg: &GptConfig,
    with_subjects: bool,
) -> Result<(TokenBatch, Vec<usize>)> {
    let (c, l, lat, ll) = (cfg.channels, cfg.l, cfg.latent, cfg.loss_len);
    let mut tokens = Vec::with_capacity(windows.len() * c * l);
    let mut targets = Vec::with_capacity(windows.len() * c * ll);
    let mut subjects = Vec::with_capacity(windows.len());
    for w in windows {
        let rec = &corpus.recordings[w.recording];
        for ch in 0..c {
            let series = &rec.channel(ch)[w.start..w.start + l + 1];
            tokens.extend_from_slice(&series[..l]);
            for i in lat - ll..lat {
                targets.push(series[super::query_time(l, lat, i) + 1] as usize);
            }
        }
        subjects.push(with_subjects.then_some(rec.subject));
    }
    Ok((TokenBatch::new(c, l, tokens, subjects)?, targets))
}

/// Metrics of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

/// Per-epoch training and validation curves.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochMetrics>,
}

impl History {
    /// One whitespace-separated line per epoch with a header.
    pub fn log_text(&self) -> String {
        let mut s = String::from("epoch train_loss train_acc val_loss val_acc\n");
        let opt = |x: Option<f64>| x.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        for e in &self.epochs {
            let _ = writeln!(s, "{} {:.6} {:.6} {} {}", e.epoch, e.train_loss, e.train_acc, opt(e.val_loss), opt(e.val_acc));
        }
        s
    }
}

/// Fraction of scored rows whose argmax equals the target.
fn accuracy(logits: &Tensor<f32>, targets: &[usize], loss_len: usize) -> usize {
    let s = logits.shape();
    let (lat, k) = (s[2], s[3]);
    let rows = s[0] * s[1];
    let mut hits = 0;
    for n in 0..rows {
        for (j, i) in (lat - loss_len..lat).enumerate() {
            let row = &logits.data()[(n * lat + i) * k..(n * lat + i + 1) * k];
            let arg = (0..k).fold(0, |a, x| if row[x] > row[a] { x } else { a });
            hits += usize::from(arg == targets[n * loss_len + j]);
        }
    }
    hits
}

struct Schedule {
    batch_size: usize,
    epochs: usize,
    lr: f64,
    batches_per_epoch: Option<usize>,
}

fn check_corpus(corpus: &TokenCorpus, cfg: &GptConfig) -> Result<()> {
    corpus.validate()?;
    if corpus.k_star != cfg.k_star {
        bail!(Config, "corpus has K* = {}, model expects {}", corpus.k_star, cfg.k_star);
    }
    if !corpus.recordings.is_empty() && corpus.channels() != cfg.channels {
        bail!(Config, "corpus has {} channels, model expects {}", corpus.channels(), cfg.channels);
    }
    Ok(())
}

/// Loss and accuracy over every window of `corpus`, dropout off.
pub fn evaluate_corpus(model: &GptModel, corpus: &TokenCorpus) -> Result<Option<(f64, f64)>> {
    let cfg = &model.config;
    let windows = training_windows(corpus, cfg.l, cfg.loss_len);
    if windows.is_empty() {
        return Ok(None);
    }
    let with_subjects = model.ids.subject.is_some();
    let (mut loss, mut hits, mut rows) = (0.0, 0, 0);
    for chunk in windows.chunks(cfg.batch_size.max(8)) {
        let (batch, targets) = assemble(corpus, chunk, cfg, with_subjects)?;
        model.check_batch(&batch)?;
        let g = Graph::<f32>::new();
        let p = model.params.bind(&g, |_| false);
        let out = forward_graph::<f32, rand_chacha::ChaCha8Rng>(&g, &p, &model.ids, cfg, &batch, None)?;
        let l = sequence_loss(&g, out.logits, &targets, cfg.loss_len)?;
        loss += g.item(l)? as f64 * targets.len() as f64;
        hits += accuracy(&g.value(out.logits), &targets, cfg.loss_len);
        rows += targets.len();
    }
    Ok(Some((loss / rows as f64, hits as f64 / rows as f64)))
}

fn run<R: Rng>(
    model: &mut GptModel,
    train: &TokenCorpus,
    valid: Option<&TokenCorpus>,
    sched: &Schedule,
    frozen: &[ParamId],
    rng: &mut R,
) -> Result<History> {
    let cfg = model.config.clone();
    let mut windows = training_windows(train, cfg.l, cfg.loss_len);
    if windows.is_empty() && sched.epochs > 0 {
        bail!(Input, "no recording holds a window of {} tokens", cfg.l + 1);
    }
    let with_subjects = model.ids.subject.is_some();
    let is_frozen = |id: ParamId| frozen.contains(&id);
    let mut adam = AdamState::new(&model.params);
    let mut history = History::default();
    let bs = sched.batch_size;
    for epoch in 0..sched.epochs {
        windows.shuffle(rng);
        let n_batches = sched.batches_per_epoch.unwrap_or_else(|| windows.len().div_ceil(bs));
        let (mut loss_sum, mut hits, mut rows) = (0.0, 0, 0);
        let mut cursor = 0;
        for _ in 0..n_batches {
            if cursor >= windows.len() {
                windows.shuffle(rng);
                cursor = 0;
            }
            let end = (cursor + bs).min(windows.len());
            let (batch, targets) = assemble(train, &windows[cursor..end], &cfg, with_subjects)?;
            cursor = end;
            model.check_batch(&batch)?;
            let g = Graph::<f32>::new();
            let p = model.params.bind(&g, |id| !is_frozen(id));
            let out = forward_graph(&g, &p, &model.ids, &cfg, &batch, Some(&mut *rng))?;
            let loss = sequence_loss(&g, out.logits, &targets, cfg.loss_len)?;
            let lv = g.item(loss)? as f64;
            if !lv.is_finite() {
                bail!(Numeric, "training loss became non-finite at epoch {}", epoch);
            }
            g.backward(loss)?;
            let grads = model.params.grads(&g, &p);
            adam_step(&mut model.params, &grads, &mut adam, sched.lr, is_frozen)?;
            loss_sum += lv * targets.len() as f64;
            hits += accuracy(&g.value(out.logits), &targets, cfg.loss_len);
            rows += targets.len();
        }
        let val = match valid {
            Some(v) => evaluate_corpus(model, v)?,
            None => None,
        };
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / rows.max(1) as f64,
            train_acc: hits as f64 / rows.max(1) as f64,
            val_loss: val.map(|v| v.0),
            val_acc: val.map(|v| v.1),
        };
        log::info!("gpt epoch {} loss {:.4} acc {:.4} val {:?}", epoch, m.train_loss, m.train_acc, val);
        history.epochs.push(m);
    }
    Ok(history)
}

/// Trains a fresh model with Adam over shuffled windows of `L + 1` tokens.
///
/// Windows advance by `L_loss`. When the configuration has a subject table,
/// each window uses its recording's `subject` as the row index.
pub fn train_gpt<R: Rng>(
    train: &TokenCorpus,
    valid: Option<&TokenCorpus>,
    config: &GptConfig,
    rng: &mut R,
) -> Result<(GptModel, History)> {
    config.validate()?;
    check_corpus(train, config)?;
    if let Some(v) = valid {
        check_corpus(v, config)?;
    }
    let mut model = GptModel::new(config.clone(), rng)?;
    let sched = Schedule {
        batch_size: config.batch_size,
        epochs: config.epochs,
        lr: config.lr,
        batches_per_epoch: config.batches_per_epoch,
    };
    let history = run(&mut model, train, valid, &sched, &[], rng)?;
    Ok((model, history))
}

/// Fine-tuning settings.
#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batches_per_epoch: Option<usize>,
    /// Rows of a fresh subject table; 0 omits the subject term.
    pub new_subjects: usize,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig { batch_size: 16, epochs: 10, lr: 5e-7, batches_per_epoch: None, new_subjects: 0 }
    }
}

/// Copy of `model` without its subject table, plus an optional fresh one.
fn rebuild_without_subjects<R: Rng>(model: &GptModel, new_subjects: usize, rng: &mut R) -> Result<GptModel> {
    let mut store = ParamStore::<f32>::new();
    for (_, name, t) in model.params.iter() {
        if !name.starts_with("embed.subject.") {
            store.add(name, t.clone());
        }
    }
    let mut config = model.config.clone();
    config.subjects = new_subjects;
    if new_subjects > 0 {
        TableIds::init(&mut store, "embed.subject", new_subjects, config.d_subject, config.d, rng);
    }
    let ids = GptIds::lookup(&store, config.layers)?;
    Ok(GptModel { config, params: store, ids, subjects_discarded: true })
}

/// Parameters held fixed during fine-tuning: the token, channel and position
/// tables and their width maps.
pub(crate) fn frozen_embeddings(model: &GptModel) -> Vec<ParamId> {
    let ids = &model.ids;
    let mut out = ids.shared_tables().to_vec();
    for t in [&ids.token, &ids.channel, &ids.position] {
        if let Some(m) = &t.map {
            out.extend([m.weight, m.bias]);
        }
    }
    out
}

/// Continues training on a new corpus with the shared embedding tables frozen.
///
/// The pre-training subject table is dropped. With `new_subjects > 0` a fresh
/// table indexed by each recording's `subject` is trained in its place.
pub fn fine_tune<R: Rng>(
    model: &GptModel,
    train: &TokenCorpus,
    valid: Option<&TokenCorpus>,
    config: &FineTuneConfig,
    rng: &mut R,
) -> Result<(GptModel, History)> {
    if config.batch_size == 0 || !(config.lr > 0.0) {
        bail!(Config, "fine-tune batch size and learning rate must be positive");
    }
    check_corpus(train, &model.config)?;
    if let Some(v) = valid {
        check_corpus(v, &model.config)?;
    }
    let mut tuned = rebuild_without_subjects(model, config.new_subjects, rng)?;
    let frozen = frozen_embeddings(&tuned);
    let sched = Schedule {
        batch_size: config.batch_size,
        epochs: config.epochs,
        lr: config.lr,
        batches_per_epoch: config.batches_per_epoch,
    };
    let history = run(&mut tuned, train, valid, &sched, &frozen, rng)?;
    Ok((tuned, history))
}

/// Decoder outputs averaged over the latent axis, one `C * d` row per trial.
///
/// Each trial is a channel-major token recording; trials longer than `L` use
/// their first `L` tokens.
pub fn extract_features(model: &GptModel, trials: &[TokenRecording]) -> Result<Tensor<f32>> {
    let cfg = &model.config;
    let (c, l, d, lat) = (cfg.channels, cfg.l, cfg.d, cfg.latent);
    let mut out = Vec::with_capacity(trials.len() * c * d);
    for chunk in trials.chunks(16) {
        let mut tokens = Vec::with_capacity(chunk.len() * c * l);
        for t in chunk {
            if t.channels != c {
                bail!(Input, "trial has {} channels, model expects {}", t.channels, c);
            }
            if t.samples < l {
                bail!(Input, "trial of {} tokens is shorter than the receptive field {}", t.samples, l);
            }
            for ch in 0..c {
                tokens.extend_from_slice(&t.channel(ch)[..l]);
            }
        }
        let batch = TokenBatch::new(c, l, tokens, vec![None; chunk.len()])?;
        let (dec, _) = model.forward(&batch)?;
        for n in 0..chunk.len() * c {
            let block = &dec.data()[n * lat * d..(n + 1) * lat * d];
            for j in 0..d {
                let s: f64 = (0..lat).map(|i| block[i * d + j] as f64).sum();
                out.push((s / lat as f64) as f32);
            }
        }
    }
    Tensor::new(vec![trials.len(), c * d], out)
}
