//! Transient burst analysis with a time-delay-embedded Gaussian HMM.

use nalgebra::DMatrix;
use rand::Rng;

use crate::analysis::{welch_lengths, welch_pieces, Psd};
use crate::error::{bail, Result};

/// Lag-embedded copy of one channel, row-major `rows x lags.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct TdeData {
    pub rows: usize,
    pub lags: Vec<isize>,
    pub values: Vec<f64>,
    /// Source sample of row 0 (row `r` is centred on sample `offset + r`).
    pub offset: usize,
    pub channel: usize,
}

impl TdeData {
    pub fn cols(&self) -> usize {
        self.lags.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let e = self.cols();
        &self.values[r * e..(r + 1) * e]
    }
}

/// Column `j` holds the series shifted by `lags[j]`, cut to the common support.
pub fn tde_embed(series: &[f32], lags: &[isize], channel: usize) -> Result<TdeData> {
    if lags.is_empty() {
        bail!(Parameter, "no lags given");
    }
    let lo = *lags.iter().min().unwrap();
    let hi = *lags.iter().max().unwrap();
    let span = (hi - lo) as usize;
    if span >= series.len() {
        bail!(Input, "lag span {} needs more than {} samples", span, series.len());
    }
    let rows = series.len() - span;
    let offset = (-lo) as usize;
    let mut values = Vec::with_capacity(rows * lags.len());
    for r in 0..rows {
        let centre = (r + offset) as isize;
        values.extend(lags.iter().map(|&l| series[(centre + l) as usize] as f64));
    }
    Ok(TdeData { rows, lags: lags.to_vec(), values, offset, channel })
}

/// Default symmetric lag set `-7..=7`.
pub fn default_lags() -> Vec<isize> {
    (-7..=7).collect()
}

/// Gaussian HMM with zero-mean full-covariance emissions.
#[derive(Clone, Debug, PartialEq)]
pub struct HmmModel {
    pub initial: Vec<f64>,
    /// Row-stochastic `S x S`.
    pub transition: Vec<Vec<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl HmmModel {
    pub fn states(&self) -> usize {
        self.initial.len()
    }

    pub fn dim(&self) -> usize {
        self.covariances.first().map_or(0, |c| c.nrows())
    }

    fn log_emissions(&self, data: &TdeData) -> Result<Vec<f64>> {
        let (s, e) = (self.states(), self.dim());
        if data.cols() != e {
            bail!(Dimension, "model has {} embedding dimensions, data has {}", e, data.cols());
        }
        let mut out = vec![0.0; data.rows * s];
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        for (k, cov) in self.covariances.iter().enumerate() {
            let Some(ch) = cov.clone().cholesky() else {
                bail!(Numeric, "covariance of state {} is not positive definite", k);
            };
            let l = ch.l();
            let logdet = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let mut y = vec![0.0; e];
            for t in 0..data.rows {
                let x = data.row(t);
                // forward substitution L y = x
                let mut q = 0.0;
                for i in 0..e {
                    let mut v = x[i];
                    for j in 0..i {
                        v -= l[(i, j)] * y[j];
                    }
                    y[i] = v / l[(i, i)];
                    q += y[i] * y[i];
                }
                out[t * s + k] = -0.5 * (e as f64 * ln2pi + logdet + q);
            }
        }
        Ok(out)
    }
}

/// Forward-backward results.
struct Posterior {
    gamma: Vec<f64>,
    xi: Vec<f64>,
    log_likelihood: f64,
}

fn forward_backward(model: &HmmModel, logb: &[f64], rows: usize) -> Posterior {
    let s = model.states();
    let mut b = vec![0.0; rows * s];
    let mut shift = vec![0.0; rows];
    for t in 0..rows {
        let m = logb[t * s..(t + 1) * s].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        shift[t] = m;
        for k in 0..s {
            b[t * s + k] = (logb[t * s + k] - m).exp();
        }
    }
    let a = &model.transition;
    let mut alpha = vec![0.0; rows * s];
    let mut c = vec![0.0; rows];
    for t in 0..rows {
        for j in 0..s {
            let prior = if t == 0 { model.initial[j] } else { (0..s).map(|i| alpha[(t - 1) * s + i] * a[i][j]).sum() };
            alpha[t * s + j] = prior * b[t * s + j];
        }
        let z: f64 = alpha[t * s..(t + 1) * s].iter().sum();
        c[t] = z;
        alpha[t * s..(t + 1) * s].iter_mut().for_each(|v| *v /= z);
    }
    let mut beta = vec![1.0; rows * s];
    for t in (0..rows.saturating_sub(1)).rev() {
        for i in 0..s {
            beta[t * s + i] = (0..s).map(|j| a[i][j] * b[(t + 1) * s + j] * beta[(t + 1) * s + j]).sum::<f64>() / c[t + 1];
        }
    }
    let mut gamma = vec![0.0; rows * s];
    for t in 0..rows {
        let z: f64 = (0..s).map(|k| alpha[t * s + k] * beta[t * s + k]).sum();
        for k in 0..s {
            gamma[t * s + k] = alpha[t * s + k] * beta[t * s + k] / z;
        }
    }
    let mut xi = vec![0.0; s * s];
    for t in 0..rows.saturating_sub(1) {
        for i in 0..s {
            for j in 0..s {
                xi[i * s + j] += alpha[t * s + i] * a[i][j] * b[(t + 1) * s + j] * beta[(t + 1) * s + j] / c[t + 1];
            }
        }
    }
    let log_likelihood = c.iter().map(|v| v.ln()).sum::<f64>() + shift.iter().sum::<f64>();
    Posterior { gamma, xi, log_likelihood }
}

/// A fitted HMM and its log-likelihood after each update.
#[derive(Clone, Debug)]
pub struct HmmFit {
    pub model: HmmModel,
    /// Log-likelihood of the initial model followed by one value per iteration.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

/// Posterior-weighted second moments of state `k`.
fn covariance_update(data: &TdeData, gamma: &[f64], s: usize, k: usize) -> DMatrix<f64> {
    let e = data.cols();
    let mut m = DMatrix::<f64>::zeros(e, e);
    let mut w = 0.0;
    for t in 0..data.rows {
        let g = gamma[t * s + k];
        if g == 0.0 {
            continue;
        }
        w += g;
        let x = data.row(t);
        for i in 0..e {
            let gi = g * x[i];
            for j in 0..=i {
                m[(i, j)] += gi * x[j];
            }
        }
    }
    for i in 0..e {
        for j in 0..i {
            m[(j, i)] = m[(i, j)];
        }
    }
    if w > 0.0 {
        m /= w;
    }
    m
}

/// Adds diagonal jitter until the Cholesky factorisation succeeds.
fn regularise(mut m: DMatrix<f64>, state: usize) -> DMatrix<f64> {
    if m.clone().cholesky().is_some() {
        return m;
    }
    let e = m.nrows();
    let mut jitter = (m.trace() / e as f64).abs().max(1.0) * 1e-6;
    loop {
        log::warn!("covariance of state {} collapsed; adding {:.2e} to the diagonal", state, jitter);
        for i in 0..e {
            m[(i, i)] += jitter;
        }
        if m.clone().cholesky().is_some() {
            return m;
        }
        jitter *= 10.0;
    }
}

fn m_step(data: &TdeData, post: &Posterior, s: usize) -> HmmModel {
    let initial = post.gamma[..s].to_vec();
    let transition = (0..s)
        .map(|i| {
            let row: Vec<f64> = post.xi[i * s..(i + 1) * s].to_vec();
            let z: f64 = row.iter().sum();
            if z > 0.0 { row.iter().map(|v| v / z).collect() } else { (0..s).map(|j| if i == j { 1.0 } else { 0.0 }).collect() }
        })
        .collect();
    let covariances = (0..s).map(|k| regularise(covariance_update(data, &post.gamma, s, k), k)).collect();
    HmmModel { initial, transition, covariances }
}

/// Baum-Welch fit of an `s`-state zero-mean Gaussian HMM.
///
/// The initial model comes from a hard assignment of random contiguous blocks
/// to states. Iteration stops when the log-likelihood gain falls below
/// `tol * |log-likelihood|` or after `n_iter` updates.
pub fn hmm_fit<R: Rng>(data: &TdeData, s: usize, n_iter: usize, tol: f64, rng: &mut R) -> Result<HmmFit> {
    if s == 0 {
        bail!(Parameter, "need at least one state");
    }
    if data.rows < 2 * s {
        bail!(Input, "{} frames are too few for {} states", data.rows, s);
    }
    if data.values.iter().any(|v| !v.is_finite()) {
        bail!(Input, "embedded data contains non-finite values");
    }
    let block = (data.rows / (20 * s)).clamp(1, 200);
    let mut gamma = vec![0.0; data.rows * s];
    let mut start = 0;
    let mut k = 0usize;
    while start < data.rows {
        k = if s == 1 { 0 } else { (k + rng.random_range(1..s)) % s };
        for t in start..(start + block).min(data.rows) {
            gamma[t * s + k] = 1.0;
        }
        start += block;
    }
    let stay = if s == 1 { 1.0 } else { 0.95 };
    let transition = (0..s).map(|i| (0..s).map(|j| if i == j { stay } else { (1.0 - stay) / (s - 1) as f64 }).collect()).collect();
    let covariances = (0..s).map(|k| regularise(covariance_update(data, &gamma, s, k), k)).collect();
    let mut model = HmmModel { initial: vec![1.0 / s as f64; s], transition, covariances };
    let mut history = Vec::new();
    let mut post = forward_backward(&model, &model.log_emissions(data)?, data.rows);
    history.push(post.log_likelihood);
    let mut converged = false;
    for _ in 0..n_iter {
        let next = m_step(data, &post, s);
        let next_post = forward_backward(&next, &next.log_emissions(data)?, data.rows);
        let gain = next_post.log_likelihood - post.log_likelihood;
        model = next;
        post = next_post;
        history.push(post.log_likelihood);
        if gain.abs() < tol * post.log_likelihood.abs() {
            converged = true;
            break;
        }
    }
    Ok(HmmFit { model, log_likelihood: history, converged })
}

/// Per-frame posteriors and their argmax path.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTimecourse {
    pub states: usize,
    /// Row-major `frames x states`.
    pub probs: Vec<f64>,
    pub path: Vec<usize>,
    pub log_likelihood: f64,
}

pub fn infer_states(model: &HmmModel, data: &TdeData) -> Result<StateTimecourse> {
    let s = model.states();
    let post = forward_backward(model, &model.log_emissions(data)?, data.rows);
    let path = post.gamma.chunks(s).map(|r| (0..s).fold(0, |a, k| if r[k] > r[a] { k } else { a })).collect();
    Ok(StateTimecourse { states: s, probs: post.gamma, path, log_likelihood: post.log_likelihood })
}

/// Most probable joint state path.
pub fn viterbi(model: &HmmModel, data: &TdeData) -> Result<Vec<usize>> {
    let s = model.states();
    let logb = model.log_emissions(data)?;
    let la: Vec<Vec<f64>> = model.transition.iter().map(|r| r.iter().map(|v| v.ln()).collect()).collect();
    let mut score: Vec<f64> = (0..s).map(|k| model.initial[k].ln() + logb[k]).collect();
    let mut back = vec![0usize; data.rows * s];
    for t in 1..data.rows {
        let mut next = vec![f64::NEG_INFINITY; s];
        for j in 0..s {
            for i in 0..s {
                let v = score[i] + la[i][j];
                if v > next[j] {
                    next[j] = v;
                    back[t * s + j] = i;
                }
            }
            next[j] += logb[t * s + j];
        }
        score = next;
    }
    let mut k = (0..s).fold(0, |a, k| if score[k] > score[a] { k } else { a });
    let mut path = vec![0; data.rows];
    for t in (0..data.rows).rev() {
        path[t] = k;
        k = back[t * s + k];
    }
    Ok(path)
}

/// Minimum-cost assignment of rows to columns of a square matrix; returns
/// `assign[row] = column`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // potentials and matching use 1-based indices, column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    assign
}

fn upper_triangle(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    (0..n).flat_map(|i| (i..n).map(move |j| m[(i, j)])).collect()
}

/// `1 - corr` of flattened upper triangles, `cost[i][j]` for reference `i`, new `j`.
pub fn covariance_dissimilarity(reference: &[DMatrix<f64>], new: &[DMatrix<f64>]) -> Vec<Vec<f64>> {
    reference
        .iter()
        .map(|a| {
            let ua = upper_triangle(a);
            new.iter().map(|b| 1.0 - crate::analysis::pearson(&ua, &upper_triangle(b)).unwrap_or(-1.0)).collect()
        })
        .collect()
}

/// `perm[i]` is the new state matched to reference state `i`.
pub fn match_states(reference: &[DMatrix<f64>], new: &[DMatrix<f64>]) -> Result<Vec<usize>> {
    if reference.len() != new.len() {
        bail!(Dimension, "{} reference states, {} new states", reference.len(), new.len());
    }
    if reference.iter().chain(new).any(|m| m.nrows() != reference[0].nrows() || !m.is_square()) {
        bail!(Dimension, "covariances differ in size");
    }
    Ok(hungarian(&covariance_dissimilarity(reference, new)))
}

/// Summary statistics of one state's activations.
#[derive(Clone, Debug, PartialEq)]
pub struct BurstStats {
    pub activations: usize,
    pub rate_per_s: f64,
    /// Mean time from leaving the state to re-entering it.
    pub mean_interval_s: Option<f64>,
    /// Mean time from entering to leaving.
    pub mean_lifetime_s: Option<f64>,
}

/// Activation count per second, mean interval and mean lifetime per state on
/// an argmax path.
pub fn burst_stats(path: &[usize], states: usize, fs: f64) -> Result<Vec<BurstStats>> {
    if !(fs > 0.0) {
        bail!(Parameter, "sampling rate must be positive");
    }
    if let Some(&k) = path.iter().find(|&&k| k >= states) {
        bail!(Index, "state {} outside 0..{}", k, states);
    }
    let duration = path.len() as f64 / fs;
    let mut visits: Vec<Vec<(usize, usize)>> = vec![Vec::new(); states];
    let mut start = 0;
    for t in 1..=path.len() {
        if t == path.len() || path[t] != path[start] {
            visits[path[start]].push((start, t));
            start = t;
        }
    }
    Ok(visits
        .iter()
        .map(|v| {
            let n = v.len();
            let mean = |xs: Vec<usize>| (!xs.is_empty()).then(|| xs.iter().sum::<usize>() as f64 / xs.len() as f64 / fs);
            BurstStats {
                activations: n,
                rate_per_s: if duration > 0.0 { n as f64 / duration } else { 0.0 },
                mean_interval_s: mean(v.windows(2).map(|w| w[1].0 - w[0].1).collect()),
                mean_lifetime_s: mean(v.iter().map(|&(a, b)| b - a).collect()),
            }
        })
        .collect())
}

/// Welch PSD per state over its maximal segments at least one window long;
/// windows stay inside segments. `None` for states without such a segment.
pub fn state_psd(signal: &[f32], path: &[usize], states: usize, fs: f64, window_s: f64, overlap: f64) -> Result<Vec<Option<Psd>>> {
    if signal.len() != path.len() {
        bail!(Dimension, "signal has {} samples, path {}", signal.len(), path.len());
    }
    let (nper, nover) = welch_lengths(fs, window_s, overlap)?;
    let x: Vec<f64> = signal.iter().map(|&v| v as f64).collect();
    let mut pieces: Vec<Vec<&[f64]>> = vec![Vec::new(); states];
    let mut start = 0;
    for t in 1..=path.len() {
        if t == path.len() || path[t] != path[start] {
            if path[start] >= states {
                bail!(Index, "state {} outside 0..{}", path[start], states);
            }
            if t - start >= nper {
                pieces[path[start]].push(&x[start..t]);
            }
            start = t;
        }
    }
    let freqs: Vec<f64> = (0..nper / 2 + 1).map(|k| k as f64 * fs / nper as f64).collect();
    Ok(pieces
        .iter()
        .map(|p| {
            if p.is_empty() {
                return None;
            }
            let (power, segments) = welch_pieces(p, fs, nper, nover);
            Some(Psd { freqs: freqs.clone(), power: vec![power], fs, window_len: nper, overlap_len: nover, window: "hann", segments })
        })
        .collect())
}

/// Per-frame agreement between two paths.
pub fn frame_accuracy(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n as f64
}

/// Zero-mean, unit-variance copy.
pub fn standardise(x: &[f32]) -> Vec<f32> {
    let n = x.len().max(1) as f64;
    let m = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let sd = (x.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    x.iter().map(|&v| ((v as f64 - m) / sd) as f32).collect()
}

/// Sample covariance per state of `data` under a known path.
pub fn path_covariances(data: &TdeData, path: &[usize], states: usize) -> Vec<DMatrix<f64>> {
    let mut gamma = vec![0.0; data.rows * states];
    for (t, &k) in path.iter().enumerate().take(data.rows) {
        gamma[t * states + k] = 1.0;
    }
    (0..states).map(|k| covariance_update(data, &gamma, states, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_burst_stats() {
        let path = [0, 0, 1, 1, 1, 0, 0];
        let st = burst_stats(&path, 2, 1.0).unwrap();
        assert_eq!(st[0].activations, 2);
        assert_eq!(st[0].mean_lifetime_s, Some(2.0));
        assert_eq!(st[0].mean_interval_s, Some(3.0));
        assert_eq!(st[1].activations, 1);
        assert_eq!(st[1].mean_lifetime_s, Some(3.0));
        assert_eq!(st[1].mean_interval_s, None);
        let constant = burst_stats(&[1; 10], 3, 2.0).unwrap();
        assert_eq!(constant[1].activations, 1);
        assert_eq!(constant[1].rate_per_s, 0.2);
        assert_eq!(constant[0].mean_lifetime_s, None);
    }

    #[test]
    fn embedding_by_hand() {
        let d = tde_embed(&[1.0, 2.0, 3.0, 4.0, 5.0], &[-1, 0, 1], 0).unwrap();
        assert_eq!(d.rows, 3);
        assert_eq!(d.values, vec![1.0, 2.0, 3.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0]);
        assert_eq!(d.offset, 1);
        let id = tde_embed(&[1.0, 2.0], &[0], 0).unwrap();
        assert_eq!(id.values, vec![1.0, 2.0]);
        assert!(matches!(tde_embed(&[1.0, 2.0], &[-1, 1], 0), Err(crate::Error::Input(_))));
    }
}
