//! Per-channel linear autoregressive baseline.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Recording, SignalSet};
use crate::error::{bail, Result};

/// Order matching the published receptive field.
pub const DEFAULT_ORDER: usize = 80;

const RIDGE: f64 = 1e-8;

/// Coefficients `a_1..a_p` and residual standard deviation of one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ArChannel {
    pub coeffs: Vec<f64>,
    pub noise_std: f64,
}

impl ArChannel {
    /// Moduli of the characteristic roots (companion-matrix eigenvalues);
    /// `None` when the eigenvalue iteration does not converge.
    pub fn root_moduli(&self) -> Option<Vec<f64>> {
        let p = self.coeffs.len();
        if self.coeffs.iter().all(|&a| a == 0.0) {
            return Some(vec![0.0; p]);
        }
        let mut m = DMatrix::<f64>::zeros(p, p);
        for (j, &a) in self.coeffs.iter().enumerate() {
            m[(0, j)] = a;
        }
        for i in 1..p {
            m[(i, i - 1)] = 1.0;
        }
        let schur = m.try_schur(1e-12, 10_000)?;
        Some(schur.complex_eigenvalues().iter().map(|z| z.norm()).collect())
    }

    /// All roots inside the unit circle. Falls back to the sufficient
    /// condition `sum |a_i| < 1` when the roots are unavailable.
    pub fn is_stable(&self) -> bool {
        match self.root_moduli() {
            Some(r) => r.iter().all(|&x| x < 1.0),
            None => self.coeffs.iter().map(|a| a.abs()).sum::<f64>() < 1.0,
        }
    }
}

/// One independent AR model per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ArModel {
    pub order: usize,
    pub channels: Vec<ArChannel>,
}

impl ArModel {
    /// Plain-text table: one row per channel, `noise_std` then `a_1..a_p`.
    pub fn to_table(&self) -> String {
        let mut s = String::from("channel noise_std");
        for i in 1..=self.order {
            let _ = write!(s, " a{i}");
        }
        s.push('\n');
        for (c, ch) in self.channels.iter().enumerate() {
            let _ = write!(s, "{c} {:.9e}", ch.noise_std);
            for a in &ch.coeffs {
                let _ = write!(s, " {a:.9e}");
            }
            s.push('\n');
        }
        s
    }
}

/// Least-squares AR fit of one series.
pub fn fit_ar(series: &[f32], order: usize) -> Result<ArChannel> {
    fit_ar_segments(&[series], order)
}

/// Least-squares AR fit pooling the prediction rows of several segments;
/// no row spans two segments.
pub fn fit_ar_segments(segments: &[&[f32]], order: usize) -> Result<ArChannel> {
    if order == 0 {
        bail!(Parameter, "AR order must be at least 1");
    }
    let rows: usize = segments.iter().map(|s| s.len().saturating_sub(order)).sum();
    if rows <= order {
        bail!(Input, "{} prediction rows cannot determine an order-{} model", rows, order);
    }
    if segments.iter().any(|s| s.iter().any(|x| !x.is_finite())) {
        bail!(Input, "series contains non-finite samples");
    }
    let p = order;
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    let mut lags = vec![0.0f64; p];
    for s in segments {
        for t in p..s.len() {
            for (i, l) in lags.iter_mut().enumerate() {
                *l = s[t - 1 - i] as f64;
            }
            let y = s[t] as f64;
            for i in 0..p {
                rhs[i] += lags[i] * y;
                for j in 0..=i {
                    gram[(i, j)] += lags[i] * lags[j];
                }
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            gram[(j, i)] = gram[(i, j)];
        }
    }
    let eig = gram.clone().symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &e| (a.min(e), b.max(e.abs())));
    if !(hi > 0.0) || lo <= hi * 1e-12 {
        bail!(
            IllConditioned,
            "AR design of order {} is rank deficient: Gram eigenvalues span [{:.3e}, {:.3e}]",
            p,
            lo,
            hi
        );
    }
    for i in 0..p {
        gram[(i, i)] += RIDGE;
    }
    let coeffs = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => match gram.lu().solve(&rhs) {
            Some(x) => x,
            None => bail!(IllConditioned, "AR normal equations of order {} are singular", p),
        },
    };
    let mut rss = 0.0;
    for s in segments {
        for t in p..s.len() {
            let pred: f64 = (0..p).map(|i| coeffs[i] * s[t - 1 - i] as f64).sum();
            let e = s[t] as f64 - pred;
            rss += e * e;
        }
    }
    Ok(ArChannel { coeffs: coeffs.iter().copied().collect(), noise_std: (rss / (rows - p) as f64).sqrt() })
}

/// Fits every channel of `set` independently, pooling its recordings.
pub fn fit_ar_set(set: &SignalSet, order: usize) -> Result<ArModel> {
    let c = set.channels();
    if set.recordings.is_empty() || c == 0 {
        bail!(Input, "cannot fit an AR model to an empty signal set");
    }
    let channels = (0..c)
        .map(|ch| {
            let segs: Vec<&[f32]> = set.recordings.iter().map(|r| r.channel(ch)).collect();
            fit_ar_segments(&segs, order)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ArModel { order, channels })
}

/// Simulates one channel for `steps` samples after a standard-normal prompt of
/// `order` samples; the prompt is not returned.
pub fn simulate_ar<R: Rng>(ch: &ArChannel, steps: usize, rng: &mut R) -> Result<Vec<f64>> {
    if steps == 0 {
        bail!(Parameter, "steps must be at least 1");
    }
    if !(ch.noise_std >= 0.0) {
        bail!(Parameter, "noise std must be non-negative");
    }
    if !ch.is_stable() {
        log::warn!("AR model has a characteristic root on or outside the unit circle; output may diverge");
    }
    let p = ch.coeffs.len();
    let mut x: Vec<f64> = (0..p).map(|_| StandardNormal.sample(rng)).collect();
    x.reserve(steps);
    for t in p..p + steps {
        let pred: f64 = ch.coeffs.iter().enumerate().map(|(i, a)| a * x[t - 1 - i]).sum();
        let e: f64 = StandardNormal.sample(rng);
        x.push(pred + ch.noise_std * e);
    }
    Ok(x.split_off(p))
}

/// Simulates every channel of `model`.
pub fn generate_ar<R: Rng>(model: &ArModel, steps: usize, subject: usize, rng: &mut R) -> Result<Recording> {
    let mut data = Vec::with_capacity(model.channels.len() * steps);
    for ch in &model.channels {
        data.extend(simulate_ar(ch, steps, rng)?.into_iter().map(|v| v as f32));
    }
    Recording::new(subject, 0, model.channels.len(), steps, data)
}
