//! Annealed-argmax autoencoder mapping single-channel signals to token labels
//! and back.
//!
//! The encoder is a forward GRU, a dense map to `K` logits and a layer norm.
//! The decoder sums learnt kernels: with taps `j = 0..d_token` at offsets
//! `j - d_token/2`,
//!
//! ```text
//! x~[t] = sum_j w[j] * e[z[t + j - d_token/2]][j]
//! ```
//!
//! with zero padding outside the sequence.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::SignalSet;
use crate::error::{bail, Result};
use crate::numerics::{
    adam_step, gru_sequence, require, uniform_tensor, AdamState, Bound, DenseIds, Graph, GruIds, NormIds, ParamId,
    ParamStore, Real, Tensor, Var,
};

/// Training and architecture settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TokeniserConfig {
    /// Configured vocabulary size `K`.
    pub vocab: usize,
    pub d_token: usize,
    pub units: usize,
    pub seq_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub temperature: f64,
    /// Batches per epoch; `None` covers the corpus once per epoch.
    pub batches_per_epoch: Option<usize>,
}

impl Default for TokeniserConfig {
    fn default() -> Self {
        TokeniserConfig {
            vocab: 128,
            d_token: 10,
            units: 128,
            seq_len: 200,
            batch_size: 32,
            epochs: 10,
            lr: 1e-5,
            temperature: 0.1,
            batches_per_epoch: None,
        }
    }
}

impl TokeniserConfig {
    /// Settings that train in minutes on one core.
    pub fn desk() -> Self {
        TokeniserConfig { units: 64, lr: 3e-3, batches_per_epoch: Some(150), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.vocab > u16::MAX as usize {
            bail!(Config, "vocabulary size must be in 2..=65535, got {}", self.vocab);
        }
        if self.d_token == 0 || self.d_token % 2 != 0 {
            bail!(Config, "d_token must be even and positive, got {}", self.d_token);
        }
        if self.units == 0 || self.seq_len == 0 || self.batch_size == 0 {
            bail!(Config, "units, seq_len and batch_size must be positive");
        }
        if !(self.lr > 0.0) || !(self.temperature > 0.0) {
            bail!(Config, "learning rate and temperature must be positive");
        }
        Ok(())
    }
}

/// Linear annealing of the soft-assignment weight from 1 to 0 across epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub epochs: usize,
}

impl AnnealSchedule {
    pub fn kappa(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return 1.0;
        }
        (1.0 - epoch as f64 / (self.epochs - 1) as f64).clamp(0.0, 1.0)
    }
}

/// Relabelling by descending occurrence; unused tokens collapse onto 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Refactor {
    /// New label of every original label.
    pub map: Vec<u16>,
    pub k_star: usize,
}

impl Refactor {
    pub fn apply(&self, labels: &[u16]) -> Result<Vec<u16>> {
        labels
            .iter()
            .map(|&l| match self.map.get(l as usize) {
                Some(&m) => Ok(m),
                None => bail!(Index, "label {} outside vocabulary of {}", l, self.map.len()),
            })
            .collect()
    }

    /// Original label behind each new label; label 0 has none.
    pub fn originals(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.k_star];
        for (orig, &new) in self.map.iter().enumerate() {
            if new != 0 {
                out[new as usize] = Some(orig);
            }
        }
        out
    }
}

/// Relabels from per-label counts. Ties go to the lower original label.
pub fn refactorise_counts(counts: &[u64]) -> Refactor {
    let mut order: Vec<usize> = (0..counts.len()).filter(|&k| counts[k] > 0).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut map = vec![0u16; counts.len()];
    for (rank, &k) in order.iter().enumerate() {
        map[k] = (rank + 1) as u16;
    }
    Refactor { map, k_star: order.len() + 1 }
}

/// Relabels a token corpus of original labels `0..k`.
pub fn refactorise(corpus: &[&[u16]], k: usize) -> Result<Refactor> {
    let mut counts = vec![0u64; k];
    for seq in corpus {
        for &l in seq.iter() {
            match counts.get_mut(l as usize) {
                Some(c) => *c += 1,
                None => bail!(Index, "label {} outside vocabulary of {}", l, k),
            }
        }
    }
    Ok(refactorise_counts(&counts))
}

/// Percentage of variance explained; `None` when the original is all zero.
pub fn pve(original: &[f32], reconstruction: &[f32]) -> Result<Option<f64>> {
    pve_many(std::iter::once((original, reconstruction)))
}

/// PVE pooled over several series pairs.
pub fn pve_many<'a>(pairs: impl IntoIterator<Item = (&'a [f32], &'a [f32])>) -> Result<Option<f64>> {
    let (mut err, mut power) = (0.0f64, 0.0f64);
    for (x, y) in pairs {
        if x.len() != y.len() {
            bail!(Dimension, "pve over series of length {} and {}", x.len(), y.len());
        }
        for (&a, &b) in x.iter().zip(y) {
            let (a, b) = (a as f64, b as f64);
            err += (a - b) * (a - b);
            power += a * a;
        }
    }
    Ok(if power > 0.0 { Some(100.0 * (1.0 - err / power)) } else { None })
}

/// PVE over every channel of matching signal sets.
pub fn pve_signals(original: &SignalSet, reconstruction: &SignalSet) -> Result<Option<f64>> {
    if original.recordings.len() != reconstruction.recordings.len() {
        bail!(Dimension, "pve over {} and {} recordings", original.recordings.len(), reconstruction.recordings.len());
    }
    pve_many(original.recordings.iter().zip(&reconstruction.recordings).map(|(a, b)| (a.data.as_slice(), b.data.as_slice())))
}

/// `(1 - kappa) * onehot(argmax) + kappa * softmax(logits / temperature)` per row.
pub fn anneal_assign<T: Real>(logits: &Tensor<T>, kappa: f64, temperature: f64) -> Result<Tensor<T>> {
    check_kappa(kappa)?;
    let g = Graph::<T>::new();
    let x = g.constant(logits.clone());
    let y = anneal_graph(&g, x, kappa, temperature)?;
    Ok(g.value(y))
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&kappa) {
        bail!(Parameter, "kappa must be in [0, 1], got {}", kappa);
    }
    Ok(())
}

/// Index of the largest entry of each row; the first one wins ties.
pub fn argmax_rows<T: Real>(values: &[T], width: usize) -> Vec<usize> {
    values
        .chunks(width)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Annealed assignment on the tape; only the softmax part carries gradient.
pub fn anneal_graph<T: Real>(g: &Graph<T>, logits: Var, kappa: f64, temperature: f64) -> Result<Var> {
    check_kappa(kappa)?;
    let shape = g.shape(logits);
    let k = *shape.last().unwrap_or(&0);
    if k == 0 {
        bail!(Dimension, "anneal over an empty vocabulary");
    }
    let data = g.data(logits);
    let soft = g.softmax(logits, T::lit(temperature))?;
    if kappa == 1.0 {
        return Ok(soft);
    }
    let mut hard = Tensor::zeros(&shape);
    let w = T::lit(1.0 - kappa);
    for (r, j) in argmax_rows(&data, k).into_iter().enumerate() {
        hard.data_mut()[r * k + j] = w;
    }
    let hard = g.constant(hard);
    if kappa == 0.0 {
        return Ok(hard);
    }
    g.add(hard, g.scale(soft, T::lit(kappa)))
}

/// Kernel-sum reconstruction of a `[T, K]` assignment.
pub fn decode<T: Real>(assignment: &Tensor<T>, kernels: &Tensor<T>, weights: &Tensor<T>) -> Result<Vec<T>> {
    check_decoder(assignment.shape().last().copied().unwrap_or(0), kernels, weights)?;
    let g = Graph::<T>::new();
    let a = g.constant(assignment.clone());
    let y = decode_graph(&g, a, g.constant(kernels.clone()), g.constant(weights.clone()))?;
    Ok(g.value(y).into_data())
}

/// Reconstruction from hard labels (rows of `kernels` indexed directly).
pub fn decode_labels<T: Real>(labels: &[u16], kernels: &Tensor<T>, weights: &Tensor<T>) -> Result<Vec<T>> {
    let k = kernels.shape().first().copied().unwrap_or(0);
    check_decoder(k, kernels, weights)?;
    let d = weights.numel();
    let half = (d / 2) as isize;
    let (e, w) = (kernels.data(), weights.data());
    let n = labels.len() as isize;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        bail!(Index, "label {} outside vocabulary of {}", bad, k);
    }
    let mut out = vec![T::zero(); labels.len()];
    for (t, o) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for j in 0..d {
            let s = t as isize + j as isize - half;
            if s >= 0 && s < n {
                acc += w[j] * e[labels[s as usize] as usize * d + j];
            }
        }
        *o = acc;
    }
    Ok(out)
}

fn check_decoder<T: Real>(k: usize, kernels: &Tensor<T>, weights: &Tensor<T>) -> Result<()> {
    let d = weights.numel();
    if weights.ndim() != 1 || kernels.shape() != [k, d] {
        bail!(Dimension, "kernels {:?} and weights {:?} do not match a vocabulary of {}", kernels.shape(), weights.shape(), k);
    }
    if d % 2 != 0 {
        bail!(Dimension, "decoder tap count must be even, got {}", d);
    }
    Ok(())
}

/// `tap_sum(assignment x kernels, weights)` on the tape.
pub fn decode_graph<T: Real>(g: &Graph<T>, assignment: Var, kernels: Var, weights: Var) -> Result<Var> {
    let m = g.matmul(assignment, kernels)?;
    g.tap_sum(m, weights)
}

/// Parameter ids of a tokeniser.
#[derive(Clone, Copy, Debug)]
pub struct TokeniserIds {
    pub gru: GruIds,
    pub dense: DenseIds,
    pub norm: NormIds,
    pub kernels: ParamId,
    pub weights: ParamId,
}

impl TokeniserIds {
    fn lookup<T: Real>(store: &ParamStore<T>) -> Result<Self> {
        Ok(TokeniserIds {
            gru: GruIds::lookup(store, "encoder.gru")?,
            dense: DenseIds::lookup(store, "encoder.dense")?,
            norm: NormIds::lookup(store, "encoder.norm")?,
            kernels: require(store, "decoder.kernels")?,
            weights: require(store, "decoder.weights")?,
        })
    }
}

/// Encoder logits `[B, S, K]` for signal windows `x: [B, S]`.
pub fn encoder_logits<T: Real>(g: &Graph<T>, p: &Bound, ids: &TokeniserIds, x: Var) -> Result<Var> {
    let shape = g.shape(x);
    let [b, s] = shape[..] else { bail!(Dimension, "encoder input must be [batch, steps], got {:?}", shape) };
    let x = g.reshape(x, &[b, s, 1])?;
    let h0 = g.constant(Tensor::zeros(&[b, ids.gru.units]));
    let h = gru_sequence(g, x, p, &ids.gru, h0)?;
    let a = ids.dense.apply(g, p, h)?;
    ids.norm.apply(g, p, a)
}

/// Mean squared reconstruction error of windows `x: [B, S]` at annealing weight `kappa`.
pub fn reconstruction_loss<T: Real>(
    g: &Graph<T>,
    p: &Bound,
    ids: &TokeniserIds,
    x: &Tensor<T>,
    kappa: f64,
    temperature: f64,
) -> Result<Var> {
    Ok(loss_and_logits(g, p, ids, x, kappa, temperature)?.0)
}

fn loss_and_logits<T: Real>(
    g: &Graph<T>,
    p: &Bound,
    ids: &TokeniserIds,
    x: &Tensor<T>,
    kappa: f64,
    temperature: f64,
) -> Result<(Var, Var)> {
    let xv = g.constant(x.clone());
    let logits = encoder_logits(g, p, ids, xv)?;
    let assign = anneal_graph(g, logits, kappa, temperature)?;
    let recon = decode_graph(g, assign, p.var(ids.kernels), p.var(ids.weights))?;
    Ok((g.mean(g.square(g.sub(recon, xv)?)), logits))
}

/// A trained or freshly initialised tokeniser.
#[derive(Clone, Debug)]
pub struct TokeniserModel {
    pub config: TokeniserConfig,
    pub params: ParamStore<f32>,
    pub ids: TokeniserIds,
    pub refactor: Option<Refactor>,
}

/// Per-epoch training record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean annealed loss (the optimised objective).
    pub epoch_loss: Vec<f64>,
    /// Mean loss of the same batches with hard labels, as used at inference.
    pub hard_loss: Vec<f64>,
    pub kappa: Vec<f64>,
}

impl TokeniserModel {
    pub fn new<R: Rng>(config: TokeniserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (k, d) = (config.vocab, config.d_token);
        let gru = GruIds::init(&mut store, "encoder.gru", 1, config.units, rng);
        let dense = DenseIds::init(&mut store, "encoder.dense", config.units, k, rng);
        let norm = NormIds::init(&mut store, "encoder.norm", k);
        let kernels = store.add("decoder.kernels", uniform_tensor(&[k, d], 1.0, rng));
        let weights = store.add("decoder.weights", Tensor::full(&[d], 1.0 / d as f32));
        Ok(TokeniserModel { config, params: store, ids: TokeniserIds { gru, dense, norm, kernels, weights }, refactor: None })
    }

    /// Rebuilds a model from stored parameters.
    pub fn from_params(config: TokeniserConfig, params: ParamStore<f32>, refactor: Option<Refactor>) -> Result<Self> {
        config.validate()?;
        let ids = TokeniserIds::lookup(&params)?;
        if params.get(ids.kernels).shape() != [config.vocab, config.d_token] || ids.gru.units != config.units {
            bail!(Config, "stored tokeniser parameters do not match the configuration");
        }
        if let Some(r) = &refactor {
            if r.map.len() != config.vocab {
                bail!(Config, "refactor map covers {} labels, vocabulary is {}", r.map.len(), config.vocab);
            }
        }
        Ok(TokeniserModel { config, params, ids, refactor })
    }

    pub fn kernels(&self) -> &Tensor<f32> {
        self.params.get(self.ids.kernels)
    }

    pub fn weights(&self) -> &Tensor<f32> {
        self.params.get(self.ids.weights)
    }

    /// Vocabulary after refactorisation (`K` when none has been applied).
    pub fn k_star(&self) -> usize {
        self.refactor.as_ref().map_or(self.config.vocab, |r| r.k_star)
    }

    /// Logits `[T, K]` and original labels for one series.
    ///
    /// The series is cut into `seq_len` windows, each encoded from a zero
    /// state exactly as during training.
    pub fn encode(&self, signal: &[f32]) -> Result<(Tensor<f32>, Vec<u16>)> {
        if signal.is_empty() {
            bail!(Input, "cannot encode an empty signal");
        }
        if !signal.iter().all(|x| x.is_finite()) {
            bail!(Input, "signal contains non-finite samples");
        }
        let (s, k) = (self.config.seq_len, self.config.vocab);
        let windows = signal.len().div_ceil(s);
        let mut x = Tensor::zeros(&[windows, s]);
        x.data_mut()[..signal.len()].copy_from_slice(signal);
        let g = Graph::<f32>::new();
        let p = self.params.bind(&g, |_| false);
        let logits = encoder_logits(&g, &p, &self.ids, g.constant(x))?;
        let mut data = g.value(logits).into_data();
        data.truncate(signal.len() * k);
        let labels = argmax_rows(&data, k).into_iter().map(|l| l as u16).collect();
        Ok((Tensor::new(vec![signal.len(), k], data)?, labels))
    }

    /// Labels after refactorisation (original labels if none is set).
    pub fn tokenise(&self, signal: &[f32]) -> Result<Vec<u16>> {
        let (_, labels) = self.encode(signal)?;
        match &self.refactor {
            Some(r) => r.apply(&labels),
            None => Ok(labels),
        }
    }

    /// Kernel table indexed by refactored labels; label 0 decodes to zero.
    pub fn refactored_kernels(&self) -> Tensor<f32> {
        let Some(r) = &self.refactor else { return self.kernels().clone() };
        let d = self.config.d_token;
        let e = self.kernels();
        let mut out = Tensor::zeros(&[r.k_star, d]);
        for (new, orig) in r.originals().into_iter().enumerate() {
            if let Some(o) = orig {
                out.data_mut()[new * d..(new + 1) * d].copy_from_slice(e.row(o));
            }
        }
        out
    }

    /// Continuous signal from labels produced by [`tokenise`](Self::tokenise).
    pub fn detokenise(&self, labels: &[u16]) -> Result<Vec<f32>> {
        decode_labels(labels, &self.refactored_kernels(), self.weights())
    }

    /// `decode(encode(signal))` with hard labels.
    pub fn reconstruct(&self, signal: &[f32]) -> Result<Vec<f32>> {
        let (_, labels) = self.encode(signal)?;
        decode_labels(&labels, self.kernels(), self.weights())
    }

    /// Fits the refactor map on the labels this model assigns to `corpus`.
    pub fn fit_refactor(&mut self, corpus: &SignalSet) -> Result<&Refactor> {
        let mut counts = vec![0u64; self.config.vocab];
        for series in corpus.series() {
            for l in self.encode(series)?.1 {
                counts[l as usize] += 1;
            }
        }
        self.refactor = Some(refactorise_counts(&counts));
        Ok(self.refactor.as_ref().expect("just set"))
    }
}

/// Trains a tokeniser on every channel of `corpus` with the MSE objective.
pub fn train_tokeniser<R: Rng>(corpus: &SignalSet, config: &TokeniserConfig, rng: &mut R) -> Result<(TokeniserModel, TrainLog)> {
    config.validate()?;
    let s = config.seq_len;
    let series: Vec<&[f32]> = corpus.series().into_iter().filter(|x| x.len() >= s).collect();
    if series.is_empty() {
        bail!(Input, "training corpus has no series of at least {} samples", s);
    }
    if series.iter().any(|x| !x.iter().all(|v| v.is_finite())) {
        bail!(Input, "training corpus contains non-finite samples");
    }
    let mut model = TokeniserModel::new(config.clone(), rng)?;
    let total: usize = series.iter().map(|x| x.len()).sum();
    let per_epoch = config.batches_per_epoch.unwrap_or_else(|| (total / (s * config.batch_size)).max(1));
    let schedule = AnnealSchedule { epochs: config.epochs };
    let mut adam = AdamState::new(&model.params);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..series.len()).collect();
    for epoch in 0..config.epochs {
        let kappa = schedule.kappa(epoch);
        let (mut sum, mut hard_sum) = (0.0, 0.0);
        for _ in 0..per_epoch {
            order.shuffle(rng);
            let mut x = Tensor::<f32>::zeros(&[config.batch_size, s]);
            for b in 0..config.batch_size {
                let src = series[order[b % order.len()]];
                let start = rng.random_range(0..=src.len() - s);
                x.data_mut()[b * s..(b + 1) * s].copy_from_slice(&src[start..start + s]);
            }
            let g = Graph::<f32>::new();
            let p = model.params.bind(&g, |_| true);
            let (loss, logits) = loss_and_logits(&g, &p, &model.ids, &x, kappa, config.temperature)?;
            let value = g.item(loss)? as f64;
            hard_sum += hard_mse(&g.data(logits), &x, &model)?;
            if !value.is_finite() {
                bail!(Numeric, "tokeniser loss diverged at epoch {}", epoch);
            }
            g.backward(loss)?;
            let grads = model.params.grads(&g, &p);
            adam_step(&mut model.params, &grads, &mut adam, config.lr, |_| false)?;
            sum += value;
        }
        let (loss, hard) = (sum / per_epoch as f64, hard_sum / per_epoch as f64);
        log.epoch_loss.push(loss);
        log.hard_loss.push(hard);
        log.kappa.push(kappa);
        log::info!("tokeniser epoch {epoch} kappa {kappa:.3} loss {loss:.5} hard {hard:.5}");
    }
    Ok((model, log))
}

/// Hard-label MSE of windows `x` given their logits, before the update.
fn hard_mse(logits: &[f32], x: &Tensor<f32>, model: &TokeniserModel) -> Result<f64> {
    let k = model.config.vocab;
    let s = x.last_dim();
    let labels: Vec<u16> = argmax_rows(logits, k).into_iter().map(|l| l as u16).collect();
    let mut err = 0.0;
    for (lab, row) in labels.chunks(s).zip(x.data().chunks(s)) {
        let y = decode_labels(lab, model.kernels(), model.weights())?;
        err += y.iter().zip(row).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>();
    }
    Ok(err / x.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refactorise_example_counts() {
        let r = refactorise_counts(&[5, 0, 9, 2]);
        assert_eq!(r.map, vec![2, 0, 1, 3]);
        assert_eq!(r.k_star, 4);
        assert_eq!(r.originals(), vec![None, Some(2), Some(0), Some(3)]);
    }

    #[test]
    fn refactorise_equal_counts_keeps_order() {
        let r = refactorise_counts(&[3, 3, 3]);
        assert_eq!(r.map, vec![1, 2, 3]);
        assert_eq!(r.k_star, 4);
    }

    #[test]
    fn pve_examples() {
        assert_eq!(pve(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), Some(100.0));
        assert_eq!(pve(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), Some(0.0));
        assert_eq!(pve(&[1.0, 1.0], &[1.0, 0.0]).unwrap(), Some(50.0));
        assert_eq!(pve(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), None);
        assert!(pve(&[0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn kappa_schedule_endpoints() {
        let s = AnnealSchedule { epochs: 5 };
        assert_eq!(s.kappa(0), 1.0);
        assert_eq!(s.kappa(4), 0.0);
        assert!((0..4).all(|e| s.kappa(e) >= s.kappa(e + 1)));
    }

    #[test]
    fn anneal_endpoints() {
        let logits = Tensor::<f64>::matrix(2, 3, vec![0.3, 1.0, -0.2, 2.0, 0.0, 0.1]).unwrap();
        let hard = anneal_assign(&logits, 0.0, 0.1).unwrap();
        assert_eq!(hard.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let soft = anneal_assign(&logits, 1.0, 0.1).unwrap();
        let g = Graph::<f64>::new();
        let want = g.data(g.softmax(g.constant(logits.clone()), 0.1).unwrap());
        assert_eq!(soft.data(), want.as_slice());
        assert!(anneal_assign(&logits, 1.5, 0.1).is_err());
    }

    #[test]
    fn anneal_half_saturated() {
        let logits = Tensor::<f64>::matrix(1, 2, vec![2.0, 0.0]).unwrap();
        let z = anneal_assign(&logits, 0.5, 0.1).unwrap();
        // softmax([20, 0]) = [1/(1+e^-20), e^-20/(1+e^-20)]
        let p0 = 1.0 / (1.0 + (-20.0f64).exp());
        assert!((z.data()[0] - (0.5 + 0.5 * p0)).abs() < 1e-15);
        assert!((z.data()[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn decode_impulse_kernel() {
        // one token, kernel = impulse at the centre tap
        let d = 4;
        let mut e = Tensor::<f64>::zeros(&[2, d]);
        e.data_mut()[d + d / 2] = 1.0;
        let w = Tensor::full(&[d], 1.0);
        let labels = [0u16, 1, 0, 0, 1];
        let y = decode_labels(&labels, &e, &w).unwrap();
        assert_eq!(y, vec![0.0, 1.0, 0.0, 0.0, 1.0]);
        let zero = decode_labels(&labels, &Tensor::<f64>::zeros(&[2, d]), &w).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_rejects_shape_mismatch() {
        let e = Tensor::<f64>::zeros(&[3, 4]);
        let w = Tensor::<f64>::zeros(&[5]);
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(decode(&a, &e, &w), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn config_defaults_are_the_published_values() {
        let c = TokeniserConfig::default();
        assert_eq!((c.vocab, c.d_token, c.units, c.seq_len, c.batch_size, c.epochs), (128, 10, 128, 200, 32, 10));
        assert_eq!(c.lr, 1e-5);
        assert_eq!(c.temperature, 0.1);
    }
}
