//! Spectral estimates and population-level comparisons of real and generated data.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::SignalSet;
use crate::error::{bail, Result};

/// Canonical bands in Hz: delta, theta, alpha, beta, gamma.
pub const CANONICAL_BANDS: [(f64, f64); 5] = [(1.0, 4.0), (4.0, 8.0), (8.0, 12.0), (13.0, 30.0), (30.0, 45.0)];

/// One-sided Welch power spectral density per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Psd {
    pub freqs: Vec<f64>,
    /// `power[c][f]`.
    pub power: Vec<Vec<f64>>,
    pub fs: f64,
    pub window_len: usize,
    pub overlap_len: usize,
    /// Name of the taper.
    pub window: &'static str,
    /// Number of averaged segments per channel.
    pub segments: usize,
}

impl Psd {
    pub fn resolution(&self) -> f64 {
        self.fs / self.window_len as f64
    }

    /// Frequency of the largest value of channel `c`.
    pub fn peak_frequency(&self, c: usize) -> f64 {
        let p = &self.power[c];
        let i = (0..p.len()).fold(0, |a, i| if p[i] > p[a] { i } else { a });
        self.freqs[i]
    }

    /// Channel-averaged spectrum.
    pub fn mean_over_channels(&self) -> Vec<f64> {
        let c = self.power.len() as f64;
        (0..self.freqs.len()).map(|f| self.power.iter().map(|p| p[f]).sum::<f64>() / c).collect()
    }

    /// Tab-separated table with one row per frequency.
    pub fn to_table(&self) -> String {
        let mut s = String::from("freq");
        for c in 0..self.power.len() {
            s.push_str(&format!("\tch{c}"));
        }
        s.push('\n');
        for (i, f) in self.freqs.iter().enumerate() {
            s.push_str(&format!("{f:.6}"));
            for p in &self.power {
                s.push_str(&format!("\t{:.9e}", p[i]));
            }
            s.push('\n');
        }
        s
    }
}

/// Periodic Hann taper.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
}

/// Segment lengths in samples for a window in seconds and an overlap fraction.
pub fn welch_lengths(fs: f64, window_s: f64, overlap: f64) -> Result<(usize, usize)> {
    if !(fs > 0.0) || !(window_s > 0.0) {
        bail!(Parameter, "sampling rate and window must be positive");
    }
    if !(0.0..1.0).contains(&overlap) {
        bail!(Parameter, "overlap must be in [0, 1), got {}", overlap);
    }
    let n = (window_s * fs).round() as usize;
    if n < 2 {
        bail!(Parameter, "window of {} samples is too short", n);
    }
    Ok((n, ((n as f64) * overlap).round() as usize))
}

/// Accumulates Hann-windowed periodograms over every full window inside
/// `pieces`; windows never straddle two pieces. Returns the averaged density
/// and the segment count.
pub fn welch_pieces(pieces: &[&[f64]], fs: f64, nper: usize, nover: usize) -> (Vec<f64>, usize) {
    let w = hann(nper);
    let scale = 1.0 / (fs * w.iter().map(|x| x * x).sum::<f64>());
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nper);
    let nf = nper / 2 + 1;
    let step = (nper - nover).max(1);
    let mut acc = vec![0.0; nf];
    let mut count = 0;
    let mut buf = vec![Complex::new(0.0, 0.0); nper];
    for x in pieces {
        let mut start = 0;
        while start + nper <= x.len() {
            for (b, (&v, &wi)) in buf.iter_mut().zip(x[start..start + nper].iter().zip(&w)) {
                *b = Complex::new(v * wi, 0.0);
            }
            fft.process(&mut buf);
            for (k, a) in acc.iter_mut().enumerate() {
                let mut p = buf[k].norm_sqr() * scale;
                if k != 0 && !(nper % 2 == 0 && k == nper / 2) {
                    p *= 2.0;
                }
                *a += p;
            }
            count += 1;
            start += step;
        }
    }
    if count > 0 {
        acc.iter_mut().for_each(|a| *a /= count as f64);
    }
    (acc, count)
}

/// Welch PSD of each channel: Hann window of `window_s` seconds, `overlap`
/// fraction, one-sided density whose integral approximates the mean square.
pub fn welch_psd(channels: &[&[f32]], fs: f64, window_s: f64, overlap: f64) -> Result<Psd> {
    let (nper, nover) = welch_lengths(fs, window_s, overlap)?;
    if channels.is_empty() {
        bail!(Input, "no channels to analyse");
    }
    let mut power = Vec::with_capacity(channels.len());
    let mut segments = 0;
    for x in channels {
        if x.len() < nper {
            bail!(Input, "window of {} samples is longer than the series ({})", nper, x.len());
        }
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let (p, n) = welch_pieces(&[&xf], fs, nper, nover);
        segments = n;
        power.push(p);
    }
    let freqs = (0..nper / 2 + 1).map(|k| k as f64 * fs / nper as f64).collect();
    Ok(Psd { freqs, power, fs, window_len: nper, overlap_len: nover, window: "hann", segments })
}

/// Welch PSD averaged over the recordings of a set, per channel.
pub fn welch_set(set: &SignalSet, window_s: f64, overlap: f64) -> Result<Psd> {
    let (nper, nover) = welch_lengths(set.fs, window_s, overlap)?;
    let c = set.channels();
    if set.recordings.is_empty() || c == 0 {
        bail!(Input, "no recordings to analyse");
    }
    let mut power = Vec::with_capacity(c);
    let mut segments = 0;
    for ch in 0..c {
        let pieces: Vec<Vec<f64>> = set.recordings.iter().map(|r| r.channel(ch).iter().map(|&v| v as f64).collect()).collect();
        let refs: Vec<&[f64]> = pieces.iter().map(|p| p.as_slice()).collect();
        let (p, n) = welch_pieces(&refs, set.fs, nper, nover);
        if n == 0 {
            bail!(Input, "window of {} samples is longer than every recording", nper);
        }
        segments = n;
        power.push(p);
    }
    let freqs = (0..nper / 2 + 1).map(|k| k as f64 * set.fs / nper as f64).collect();
    Ok(Psd { freqs, power, fs: set.fs, window_len: nper, overlap_len: nover, window: "hann", segments })
}

/// Band-averaged power per channel and its ratio to the channel's mean over bands.
#[derive(Clone, Debug, PartialEq)]
pub struct BandMaps {
    pub bands: Vec<(f64, f64)>,
    /// `absolute[b][c]`: mean density over bins with `lo <= f < hi`.
    pub absolute: Vec<Vec<f64>>,
    /// `relative[b][c] = absolute[b][c] / mean_b absolute[b][c]`.
    pub relative: Vec<Vec<f64>>,
}

pub fn band_power_maps(psd: &Psd, bands: &[(f64, f64)]) -> Result<BandMaps> {
    if bands.is_empty() {
        bail!(Parameter, "no bands given");
    }
    let nyq = psd.freqs.last().copied().unwrap_or(0.0);
    let mut absolute = Vec::with_capacity(bands.len());
    for &(lo, hi) in bands {
        if !(lo < hi) || lo < 0.0 || hi > nyq + 1e-9 {
            bail!(Parameter, "band {}-{} Hz is empty or outside 0-{} Hz", lo, hi, nyq);
        }
        let bins: Vec<usize> = (0..psd.freqs.len()).filter(|&i| psd.freqs[i] >= lo && psd.freqs[i] < hi).collect();
        if bins.is_empty() {
            bail!(Parameter, "band {}-{} Hz contains no frequency bin", lo, hi);
        }
        absolute.push(psd.power.iter().map(|p| bins.iter().map(|&i| p[i]).sum::<f64>() / bins.len() as f64).collect::<Vec<_>>());
    }
    let channels = psd.power.len();
    let mut relative = absolute.clone();
    for c in 0..channels {
        let mean = absolute.iter().map(|b| b[c]).sum::<f64>() / bands.len() as f64;
        for b in relative.iter_mut() {
            b[c] = if mean > 0.0 { b[c] / mean } else { 0.0 };
        }
    }
    Ok(BandMaps { bands: bands.to_vec(), absolute, relative })
}

/// Subject fingerprint definitions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FingerprintKind {
    /// PSD averaged over frequencies, one value per channel.
    Spatial,
    /// PSD averaged over channels, one value per frequency.
    Spectral,
    /// Flattened channel x frequency PSD.
    SpatialSpectral,
    /// Upper triangle of the covariance of the lag-embedded channels.
    Tde { lags: Vec<isize> },
}

impl FromStr for FingerprintKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "spatial" => FingerprintKind::Spatial,
            "spectral" => FingerprintKind::Spectral,
            "spatial+spectral" | "spatial_spectral" => FingerprintKind::SpatialSpectral,
            "tde" => FingerprintKind::Tde { lags: (-7..=7).collect() },
            _ => bail!(Parameter, "unknown fingerprint kind '{}'", s),
        })
    }
}

impl FingerprintKind {
    pub fn name(&self) -> &'static str {
        match self {
            FingerprintKind::Spatial => "spatial",
            FingerprintKind::Spectral => "spectral",
            FingerprintKind::SpatialSpectral => "spatial+spectral",
            FingerprintKind::Tde { .. } => "tde",
        }
    }
}

/// Feature vector of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Fingerprint {
    pub kind: FingerprintKind,
    pub subject: usize,
    pub values: Vec<f64>,
}

/// Spectral settings used for PSD-based fingerprints.
#[derive(Clone, Debug, PartialEq)]
pub struct FingerprintConfig {
    pub window_s: f64,
    pub overlap: f64,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for FingerprintConfig {
    fn default() -> Self {
        FingerprintConfig { window_s: 2.0, overlap: 0.5, fmin: 1.0, fmax: 45.0 }
    }
}

/// PSD-based fingerprint over the bins in `fmin..=fmax`.
pub fn fingerprint_from_psd(psd: &Psd, kind: &FingerprintKind, fmin: f64, fmax: f64) -> Result<Vec<f64>> {
    let bins: Vec<usize> = (0..psd.freqs.len()).filter(|&i| psd.freqs[i] >= fmin && psd.freqs[i] <= fmax).collect();
    if bins.is_empty() {
        bail!(Parameter, "no frequency bin in {}-{} Hz", fmin, fmax);
    }
    let c = psd.power.len();
    Ok(match kind {
        FingerprintKind::Spatial => psd.power.iter().map(|p| bins.iter().map(|&i| p[i]).sum::<f64>() / bins.len() as f64).collect(),
        FingerprintKind::Spectral => bins.iter().map(|&i| psd.power.iter().map(|p| p[i]).sum::<f64>() / c as f64).collect(),
        FingerprintKind::SpatialSpectral => psd.power.iter().flat_map(|p| bins.iter().map(move |&i| p[i])).collect(),
        FingerprintKind::Tde { .. } => bail!(Parameter, "the tde fingerprint is computed from time series, not a PSD"),
    })
}

/// Covariance of lag-embedded channels flattened to its upper triangle
/// (diagonal included), pooled over segments.
pub fn tde_covariance(segments: &[Vec<&[f32]>], lags: &[isize]) -> Result<Vec<f64>> {
    if lags.is_empty() {
        bail!(Parameter, "no lags given");
    }
    let lo = *lags.iter().min().unwrap();
    let hi = *lags.iter().max().unwrap();
    let span = (hi - lo) as usize;
    let c = segments.first().map_or(0, |s| s.len());
    let e = c * lags.len();
    if e == 0 {
        bail!(Input, "no channels to embed");
    }
    let mut sum = vec![0.0f64; e];
    let mut cross = vec![0.0f64; e * e];
    let mut n = 0usize;
    let mut row = vec![0.0f64; e];
    for seg in segments {
        if seg.len() != c {
            bail!(Dimension, "segments have different channel counts");
        }
        let t = seg[0].len();
        if t <= span {
            continue;
        }
        for r in 0..t - span {
            let base = r as isize - lo;
            for (ch, x) in seg.iter().enumerate() {
                for (j, &l) in lags.iter().enumerate() {
                    row[ch * lags.len() + j] = x[(base + l) as usize] as f64;
                }
            }
            for i in 0..e {
                sum[i] += row[i];
                for j in i..e {
                    cross[i * e + j] += row[i] * row[j];
                }
            }
            n += 1;
        }
    }
    if n < 2 {
        bail!(Input, "series too short for a lag span of {}", span);
    }
    let mut out = Vec::with_capacity(e * (e + 1) / 2);
    for i in 0..e {
        for j in i..e {
            out.push((cross[i * e + j] - sum[i] * sum[j] / n as f64) / (n - 1) as f64);
        }
    }
    Ok(out)
}

/// Fingerprint of one subject's recordings.
pub fn fingerprint(set: &SignalSet, subject: usize, kind: &FingerprintKind, config: &FingerprintConfig) -> Result<Fingerprint> {
    let own = set.filter(|r| r.subject == subject);
    if own.recordings.is_empty() {
        bail!(Input, "no recordings for subject {}", subject);
    }
    let values = match kind {
        FingerprintKind::Tde { lags } => {
            let segs: Vec<Vec<&[f32]>> = own.recordings.iter().map(|r| r.channels_iter().collect()).collect();
            tde_covariance(&segs, lags)?
        }
        _ => fingerprint_from_psd(&welch_set(&own, config.window_s, config.overlap)?, kind, config.fmin, config.fmax)?,
    };
    Ok(Fingerprint { kind: kind.clone(), subject, values })
}

/// Fingerprints of every subject in ascending subject order.
pub fn fingerprints(set: &SignalSet, kind: &FingerprintKind, config: &FingerprintConfig) -> Result<Vec<Fingerprint>> {
    set.subjects().into_iter().map(|s| fingerprint(set, s, kind, config)).collect()
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// `d[i][j] = 1 - corr(real_i, gen_j)`; undefined correlations give distance 2.
pub fn correlation_distance(real: &[Vec<f64>], gen: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut warned = false;
    real.iter()
        .map(|r| {
            gen.iter()
                .map(|g| match pearson(r, g) {
                    Some(c) => 1.0 - c,
                    None => {
                        if !warned {
                            log::warn!("zero-variance fingerprint; using maximal correlation distance");
                            warned = true;
                        }
                        2.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Fraction of generated subjects whose own real subject is among the `k`
/// nearest real subjects by correlation distance.
pub fn topk_identify(real: &[Vec<f64>], gen: &[Vec<f64>], k: usize) -> Result<f64> {
    if real.len() != gen.len() || real.is_empty() {
        bail!(Input, "need matching non-empty subject sets ({} real, {} generated)", real.len(), gen.len());
    }
    if k == 0 {
        bail!(Parameter, "k must be at least 1");
    }
    let d = correlation_distance(real, gen);
    let n = real.len();
    let hits = (0..n).filter(|&j| (0..n).filter(|&i| d[i][j] < d[j][j]).count() < k).count();
    Ok(hits as f64 / n as f64)
}

/// Pairwise Pearson correlations between subjects' features.
pub fn correlation_matrix(feats: &[Vec<f64>]) -> Vec<Vec<Option<f64>>> {
    feats.iter().map(|a| feats.iter().map(|b| pearson(a, b)).collect()).collect()
}

fn upper(m: &[Vec<Option<f64>>], perm: &[usize]) -> Vec<f64> {
    let n = m.len();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(m[perm[i]][perm[j]].unwrap_or(0.0));
        }
    }
    out
}

/// Correlation between the off-diagonal upper triangles of the real-real and
/// generated-generated subject correlation matrices; `None` when either is constant.
pub fn consistency_score(real: &[Vec<f64>], gen: &[Vec<f64>]) -> Result<Option<f64>> {
    if real.len() != gen.len() || real.len() < 3 {
        bail!(Input, "consistency needs at least 3 matching subjects");
    }
    let id: Vec<usize> = (0..real.len()).collect();
    Ok(pearson(&upper(&correlation_matrix(real), &id), &upper(&correlation_matrix(gen), &id)))
}

/// Permutation p-value of the consistency score.
///
/// The null permutes rows and columns of the generated-generated matrix
/// together; `p = (1 + #{null >= observed}) / (1 + n_perm)`.
pub fn permutation_pvalue<R: Rng>(real: &[Vec<f64>], gen: &[Vec<f64>], n_perm: usize, rng: &mut R) -> Result<f64> {
    if n_perm < 100 {
        bail!(Parameter, "need at least 100 permutations, got {}", n_perm);
    }
    if real.len() != gen.len() || real.len() < 3 {
        bail!(Input, "consistency needs at least 3 matching subjects");
    }
    let n = real.len();
    let id: Vec<usize> = (0..n).collect();
    let rr = upper(&correlation_matrix(real), &id);
    let gm = correlation_matrix(gen);
    let Some(observed) = pearson(&rr, &upper(&gm, &id)) else {
        log::warn!("consistency score is undefined; reporting p = 1");
        return Ok(1.0);
    };
    let mut perm = id;
    let mut exceed = 0usize;
    for _ in 0..n_perm {
        perm.shuffle(rng);
        if pearson(&rr, &upper(&gm, &perm)).is_some_and(|v| v >= observed) {
            exceed += 1;
        }
    }
    Ok((1 + exceed) as f64 / (1 + n_perm) as f64)
}

/// One-sample Kolmogorov-Smirnov test against U(0, 1): `(D, asymptotic p)`.
pub fn ks_uniform(samples: &[f64]) -> (f64, f64) {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let d = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let v = v.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - v).max(v - i as f64 / n)
        })
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k as f64 * lambda).powi(2)).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    (d, p.clamp(0.0, 1.0))
}

/// `P(X >= k)` for `X ~ Binomial(n, p)`.
pub fn binomial_upper_tail(k: usize, n: usize, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let lnp = p.ln();
    let lnq = (1.0 - p).ln();
    let mut ln_choose = 0.0f64;
    let mut total = 0.0;
    for i in 0..=n {
        if i > 0 {
            ln_choose += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        if i >= k {
            total += (ln_choose + i as f64 * lnp + (n - i) as f64 * lnq).exp();
        }
    }
    total.min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hann_is_periodic() {
        let w = hann(4);
        for (a, b) in w.iter().zip([0.0, 0.5, 1.0, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn binomial_tail_small_case() {
        // P(X >= 2), n = 3, p = 0.5 -> 4/8
        assert!((binomial_upper_tail(2, 3, 0.5) - 0.5).abs() < 1e-12);
        assert_eq!(binomial_upper_tail(0, 3, 0.2), 1.0);
    }

    #[test]
    fn kind_names_round_trip() {
        for s in ["spatial", "spectral", "spatial+spectral", "tde"] {
            assert_eq!(s.parse::<FingerprintKind>().unwrap().name(), s);
        }
        assert!(matches!("bogus".parse::<FingerprintKind>(), Err(crate::Error::Parameter(_))));
    }
}
