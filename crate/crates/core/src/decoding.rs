//! Task decoding: epoching, features, multinomial logistic regression and
//! evaluation splits.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::data::{EventTable, SignalSet, TokenCorpus, TokenRecording};
use crate::error::{bail, Result};

/// Number of task classes.
pub const CLASSES: usize = 4;

/// Trials cut from continuous recordings, `trials x channels x window`.
#[derive(Clone, Debug, PartialEq)]
pub struct Epochs {
    pub channels: usize,
    pub window: usize,
    pub data: Vec<f32>,
    pub labels: Vec<u8>,
    pub subjects: Vec<usize>,
    pub sessions: Vec<usize>,
    /// Events skipped because their window left the recording.
    pub dropped: usize,
}

impl Epochs {
    pub fn trials(&self) -> usize {
        self.labels.len()
    }

    pub fn trial(&self, i: usize) -> &[f32] {
        let n = self.channels * self.window;
        &self.data[i * n..(i + 1) * n]
    }

    /// `(subject, session)` of every trial.
    pub fn groups(&self) -> Vec<(usize, usize)> {
        self.subjects.iter().copied().zip(self.sessions.iter().copied()).collect()
    }
}

/// Cuts `window` samples from every channel at each event onset.
pub fn epoch(set: &SignalSet, events: &EventTable, window: usize) -> Result<Epochs> {
    if window == 0 {
        bail!(Parameter, "epoch window must be at least one sample");
    }
    let index: BTreeMap<(usize, usize), usize> = set.recordings.iter().enumerate().map(|(i, r)| ((r.subject, r.session), i)).collect();
    let channels = set.channels();
    let mut out = Epochs { channels, window, data: Vec::new(), labels: Vec::new(), subjects: Vec::new(), sessions: Vec::new(), dropped: 0 };
    for ev in &events.events {
        if ev.label as usize >= CLASSES {
            bail!(Input, "label {} outside the {} task classes", ev.label, CLASSES);
        }
        let Some(&r) = index.get(&(ev.subject, ev.session)) else {
            out.dropped += 1;
            continue;
        };
        let rec = &set.recordings[r];
        if ev.onset + window > rec.samples {
            out.dropped += 1;
            continue;
        }
        for ch in rec.channels_iter() {
            out.data.extend_from_slice(&ch[ev.onset..ev.onset + window]);
        }
        out.labels.push(ev.label);
        out.subjects.push(ev.subject);
        out.sessions.push(ev.session);
    }
    if out.dropped > 0 {
        log::warn!("dropped {} of {} trials outside their recording", out.dropped, events.events.len());
    }
    if out.labels.is_empty() {
        bail!(Input, "no trial fits inside its recording");
    }
    Ok(out)
}

/// Token windows at each event onset, in the same order and with the same
/// drops as [`epoch`].
pub fn epoch_tokens(corpus: &TokenCorpus, events: &EventTable, window: usize) -> Result<Vec<TokenRecording>> {
    let index: BTreeMap<(usize, usize), &TokenRecording> = corpus.recordings.iter().map(|r| ((r.subject, r.session), r)).collect();
    let mut out = Vec::new();
    for ev in &events.events {
        let Some(rec) = index.get(&(ev.subject, ev.session)) else { continue };
        if ev.onset + window > rec.samples {
            continue;
        }
        let labels = (0..rec.channels).flat_map(|c| rec.channel(c)[ev.onset..ev.onset + window].iter().copied()).collect();
        out.push(TokenRecording::new(ev.subject, ev.session, rec.channels, window, labels)?);
    }
    if out.is_empty() {
        bail!(Input, "no trial fits inside its recording");
    }
    Ok(out)
}

/// Row-major feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Features {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            bail!(Dimension, "{} x {} features need {} values, got {}", rows, cols, rows * cols, values.len());
        }
        Ok(Features { rows, cols, values })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select(&self, idx: &[usize]) -> Features {
        let values = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Features { rows: idx.len(), cols: self.cols, values }
    }
}

/// Each trial flattened channel-major.
pub fn baseline_features(epochs: &Epochs) -> Features {
    Features { rows: epochs.trials(), cols: epochs.channels * epochs.window, values: epochs.data.iter().map(|&v| v as f64).collect() }
}

/// Per-feature mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardiser {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardiser {
    /// Population statistics; constant features get unit scale.
    pub fn fit(x: &Features) -> Self {
        let n = x.rows.max(1) as f64;
        let mut mean = vec![0.0; x.cols];
        for i in 0..x.rows {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; x.cols];
        for i in 0..x.rows {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var.iter().map(|&v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Standardiser { mean, std }
    }

    pub fn apply(&self, x: &Features) -> Result<Features> {
        if x.cols != self.mean.len() {
            bail!(Dimension, "expected {} features, got {}", self.mean.len(), x.cols);
        }
        let values = x.values.chunks(x.cols.max(1)).flat_map(|r| r.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s)).collect();
        Ok(Features { rows: x.rows, cols: x.cols, values })
    }
}

/// Softmax regression over standardised features.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub classes: usize,
    /// Row-major `features x classes`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub lambda: f64,
    pub scaler: Standardiser,
    /// Objective after each accepted step, starting from zero weights.
    pub objective: Vec<f64>,
    pub converged: bool,
}

/// Solver settings for [`train_classifier`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub lambda: f64,
    pub max_iter: usize,
    /// Stop when the gradient's largest entry falls below this.
    pub tol: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { lambda: 1.0, max_iter: 500, tol: 1e-6 }
    }
}

/// Summed cross-entropy plus `lambda / 2 * |W|^2` (bias unpenalised) and its
/// gradient; `theta` holds `W` row-major then the bias.
pub fn objective(theta: &[f64], x: &Features, y: &[u8], classes: usize, lambda: f64) -> (f64, Vec<f64>) {
    let (f, k) = (x.cols, classes);
    let (w, b) = theta.split_at(f * k);
    let mut grad = vec![0.0; theta.len()];
    let mut loss = 0.0;
    let mut z = vec![0.0; k];
    for i in 0..x.rows {
        let row = x.row(i);
        z.copy_from_slice(b);
        for (j, &v) in row.iter().enumerate() {
            if v != 0.0 {
                for (c, zc) in z.iter_mut().enumerate() {
                    *zc += v * w[j * k + c];
                }
            }
        }
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - z[y[i] as usize];
        for c in 0..k {
            let r = (z[c] - lse).exp() - if c == y[i] as usize { 1.0 } else { 0.0 };
            grad[f * k + c] += r;
            for (j, &v) in row.iter().enumerate() {
                grad[j * k + c] += r * v;
            }
        }
    }
    for (gj, wj) in grad.iter_mut().zip(w) {
        *gj += lambda * wj;
    }
    loss += 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
    (loss, grad)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fits the classifier with L-BFGS and a backtracking Armijo line search.
/// Standardisation statistics come from `x` alone.
pub fn train_classifier(x: &Features, y: &[u8], config: &ClassifierConfig) -> Result<Classifier> {
    if x.rows != y.len() {
        bail!(Dimension, "{} feature rows for {} labels", x.rows, y.len());
    }
    if x.values.iter().any(|v| !v.is_finite()) {
        bail!(Input, "features contain non-finite values");
    }
    if !(config.lambda >= 0.0) {
        bail!(Parameter, "regularisation strength must be non-negative");
    }
    let classes = y.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    if y.iter().collect::<BTreeSet<_>>().len() < 2 {
        bail!(Input, "training labels contain fewer than two classes");
    }
    let scaler = Standardiser::fit(x);
    let xs = scaler.apply(x)?;
    let n = xs.cols * classes + classes;
    let mut theta = vec![0.0; n];
    let (mut fval, mut grad) = objective(&theta, &xs, y, classes, config.lambda);
    let mut history = vec![fval];
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    for _ in 0..config.max_iter {
        if grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) < config.tol {
            converged = true;
            break;
        }
        // two-loop recursion
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(memory.len());
        for (s, t, rho) in memory.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(t).for_each(|(qi, ti)| *qi -= a * ti);
            alphas.push(a);
        }
        if let Some((s, t, _)) = memory.back() {
            let gamma = dot(s, t) / dot(t, t);
            q.iter_mut().for_each(|v| *v *= gamma);
        } else {
            let scale = 1.0 / grad.iter().map(|g| g * g).sum::<f64>().sqrt().max(1.0);
            q.iter_mut().for_each(|v| *v *= scale);
        }
        for ((s, t, rho), a) in memory.iter().zip(alphas.iter().rev()) {
            let bcoef = rho * dot(t, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - bcoef) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&grad, &dir);
        if !(slope < 0.0) {
            memory.clear();
            dir = grad.iter().map(|g| -g).collect();
            slope = dot(&grad, &dir);
        }
        let mut step = 1.0;
        let accepted = loop {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
            let (fc, gc) = objective(&cand, &xs, y, classes, config.lambda);
            if fc <= fval + 1e-4 * step * slope {
                break Some((cand, fc, gc));
            }
            step *= 0.5;
            if step < 1e-20 {
                break None;
            }
        };
        let Some((cand, fc, gc)) = accepted else {
            converged = true;
            break;
        };
        let s: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let t: Vec<f64> = gc.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let st = dot(&s, &t);
        if st > 1e-12 {
            memory.push_back((s, t, 1.0 / st));
            if memory.len() > 10 {
                memory.pop_front();
            }
        }
        let drop = fval - fc;
        theta = cand;
        fval = fc;
        grad = gc;
        history.push(fval);
        if drop <= 1e-15 * fval.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    let bias = theta.split_off(xs.cols * classes);
    Ok(Classifier { classes, weights: theta, bias, lambda: config.lambda, scaler, objective: history, converged })
}

impl Classifier {
    pub fn features(&self) -> usize {
        self.scaler.mean.len()
    }

    /// Class probabilities, row-major `rows x classes`.
    pub fn predict_proba(&self, x: &Features) -> Result<Vec<f64>> {
        let xs = self.scaler.apply(x)?;
        let k = self.classes;
        let mut out = Vec::with_capacity(x.rows * k);
        for i in 0..xs.rows {
            let mut z = self.bias.clone();
            for (j, &v) in xs.row(i).iter().enumerate() {
                for (c, zc) in z.iter_mut().enumerate() {
                    *zc += v * self.weights[j * k + c];
                }
            }
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| v / s));
        }
        Ok(out)
    }

    pub fn predict(&self, x: &Features) -> Result<Vec<u8>> {
        let k = self.classes;
        let p = self.predict_proba(x)?;
        Ok(p.chunks(k).map(|r| (0..k).fold(0, |a, c| if r[c] > r[a] { c } else { a }) as u8).collect())
    }
}

/// Accuracy of one recording session.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionScore {
    pub subject: usize,
    pub session: usize,
    pub trials: usize,
    pub accuracy: f64,
}

/// Held-out performance.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]` counts, at least `CLASSES` square.
    pub confusion: Vec<Vec<usize>>,
    pub sessions: Vec<SessionScore>,
}

impl Evaluation {
    /// Mean of per-session accuracies and its 95% normal interval half-width.
    pub fn session_interval(&self) -> (f64, f64) {
        let n = self.sessions.len() as f64;
        if n == 0.0 {
            return (f64::NAN, f64::NAN);
        }
        let m = self.sessions.iter().map(|s| s.accuracy).sum::<f64>() / n;
        if n < 2.0 {
            return (m, f64::NAN);
        }
        let var = self.sessions.iter().map(|s| (s.accuracy - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, 1.96 * (var / n).sqrt())
    }
}

/// Scores `clf` on `x`; `groups` holds `(subject, session)` per trial.
pub fn evaluate(clf: &Classifier, x: &Features, y: &[u8], groups: &[(usize, usize)]) -> Result<Evaluation> {
    if x.rows != y.len() || groups.len() != y.len() {
        bail!(Dimension, "{} rows, {} labels and {} session ids", x.rows, y.len(), groups.len());
    }
    if x.rows == 0 {
        bail!(Input, "nothing to evaluate");
    }
    let pred = clf.predict(x)?;
    let k = clf.classes.max(CLASSES);
    let mut confusion = vec![vec![0usize; k]; k];
    let mut per: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for ((&t, &p), &g) in y.iter().zip(&pred).zip(groups) {
        if t as usize >= k {
            bail!(Index, "label {} outside {} classes", t, k);
        }
        confusion[t as usize][p as usize] += 1;
        let e = per.entry(g).or_default();
        e.0 += usize::from(t == p);
        e.1 += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let sessions = per
        .into_iter()
        .map(|((subject, session), (hit, n))| SessionScore { subject, session, trials: n, accuracy: hit as f64 / n as f64 })
        .collect();
    Ok(Evaluation { accuracy: correct as f64 / y.len() as f64, confusion, sessions })
}

/// Evaluation protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// Test on the last session of every training subject.
    WithinSubject,
    /// Test on every session of the held-out subject.
    NewSubject,
}

impl std::str::FromStr for SplitMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "within-subject" => Ok(SplitMode::WithinSubject),
            "new-subject" => Ok(SplitMode::NewSubject),
            _ => Err(crate::Error::Config(format!("unknown split mode '{s}'"))),
        }
    }
}

/// Trial indices of one split. `unused` holds trials outside both sets so the
/// three lists partition every trial.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub unused: Vec<usize>,
}

/// Training uses every session but the last of every subject except
/// `held_out`; the test set depends on `mode`.
pub fn split_protocol(groups: &[(usize, usize)], mode: SplitMode, held_out: usize) -> Result<Split> {
    let mut sessions: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &(subj, sess) in groups {
        sessions.entry(subj).or_default().insert(sess);
    }
    if !sessions.contains_key(&held_out) {
        bail!(Config, "held-out subject {} has no trials", held_out);
    }
    if sessions.len() < 2 {
        bail!(Config, "need at least two subjects, found {}", sessions.len());
    }
    let mut last = BTreeMap::new();
    for (&subj, s) in &sessions {
        if subj != held_out {
            if s.len() < 2 {
                bail!(Config, "subject {} has {} session; need at least two", subj, s.len());
            }
            last.insert(subj, *s.iter().next_back().unwrap());
        }
    }
    let mut split = Split { train: Vec::new(), test: Vec::new(), unused: Vec::new() };
    for (i, &(subj, sess)) in groups.iter().enumerate() {
        let bucket = if subj == held_out {
            if mode == SplitMode::NewSubject { &mut split.test } else { &mut split.unused }
        } else if last[&subj] == sess {
            if mode == SplitMode::WithinSubject { &mut split.test } else { &mut split.unused }
        } else {
            &mut split.train
        };
        bucket.push(i);
    }
    Ok(split)
}

/// New-subject splits holding out each subject in turn.
pub fn rotate_new_subject(groups: &[(usize, usize)]) -> Result<Vec<Split>> {
    let subjects: BTreeSet<usize> = groups.iter().map(|g| g.0).collect();
    subjects.into_iter().map(|s| split_protocol(groups, SplitMode::NewSubject, s)).collect()
}

/// Trains on the split's training trials and scores its test trials.
pub fn run_split(x: &Features, y: &[u8], groups: &[(usize, usize)], split: &Split, config: &ClassifierConfig) -> Result<(Classifier, Evaluation)> {
    let pick = |idx: &[usize]| -> (Features, Vec<u8>, Vec<(usize, usize)>) {
        (x.select(idx), idx.iter().map(|&i| y[i]).collect(), idx.iter().map(|&i| groups[i]).collect())
    };
    let (xtr, ytr, _) = pick(&split.train);
    let (xte, yte, gte) = pick(&split.test);
    let clf = train_classifier(&xtr, &ytr, config)?;
    let ev = evaluate(&clf, &xte, &yte, &gte)?;
    Ok((clf, ev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Event, Recording};

    fn ramp_set() -> SignalSet {
        let ch: Vec<Vec<f32>> = (0..2).map(|c| (0..50).map(|t| (c * 100 + t) as f32).collect()).collect();
        SignalSet::new(250.0, vec![Recording::from_channels(0, 0, &ch).unwrap()])
    }

    #[test]
    fn first_window_and_overlap() {
        let ev = |onset, label| Event { session: 0, subject: 0, onset, label };
        let events = EventTable { events: vec![ev(0, 1), ev(5, 2), ev(45, 0)] };
        let e = epoch(&ramp_set(), &events, 10).unwrap();
        assert_eq!(e.trials(), 2);
        assert_eq!(e.dropped, 1);
        let first: Vec<f32> = (0..10).map(|t| t as f32).chain((100..110).map(|t| t as f32)).collect();
        assert_eq!(e.trial(0), &first[..]);
        assert_eq!(e.trial(1)[0], 5.0);
        let f = baseline_features(&e);
        assert_eq!((f.rows, f.cols), (2, 20));
        assert!(epoch(&ramp_set(), &EventTable { events: vec![ev(45, 0)] }, 10).is_err());
    }

    #[test]
    fn split_mode_names() {
        assert_eq!("new-subject".parse::<SplitMode>().unwrap(), SplitMode::NewSubject);
        assert!("other".parse::<SplitMode>().is_err());
    }
}
