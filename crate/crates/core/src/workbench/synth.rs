//! Synthetic recordings with known ground truth.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::{Event, EventTable, Recording, SignalSet};
use crate::error::{bail, Result};

/// Bursty narrowband oscillation of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct OscillationProfile {
    pub centre_hz: f64,
    /// Mean burst duration in seconds.
    pub on_dwell_s: f64,
    /// Mean gap between bursts in seconds.
    pub off_dwell_s: f64,
    /// Burst amplitude relative to a unit-variance background.
    pub amplitude: f64,
}

/// Class-specific evoked responses at event onsets.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskProfile {
    pub classes: usize,
    pub trials_per_session: usize,
    pub evoked_amplitude: f64,
    /// Length in seconds reserved after each onset.
    pub trial_s: f64,
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub subjects: usize,
    pub sessions: usize,
    pub channels: usize,
    pub duration_s: f64,
    pub fs: f64,
    /// One profile per subject; empty means evenly spread 8-12 Hz defaults.
    pub profiles: Vec<OscillationProfile>,
    /// Exponent of the 1/f background.
    pub exponent: f64,
    pub task: Option<TaskProfile>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            subjects: 10,
            sessions: 1,
            channels: 8,
            duration_s: 120.0,
            fs: 250.0,
            profiles: Vec::new(),
            exponent: 1.0,
            task: None,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn samples(&self) -> usize {
        (self.duration_s * self.fs).round() as usize
    }

    /// Profile used for `subject`.
    pub fn profile(&self, subject: usize) -> OscillationProfile {
        if let Some(p) = self.profiles.get(subject) {
            return p.clone();
        }
        let spread = if self.subjects > 1 { subject as f64 / (self.subjects - 1) as f64 } else { 0.5 };
        OscillationProfile { centre_hz: 8.0 + 4.0 * spread, on_dwell_s: 0.5, off_dwell_s: 0.5, amplitude: 3.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.sessions == 0 || self.channels == 0 {
            bail!(Config, "subjects, sessions and channels must be positive");
        }
        if !(self.fs > 0.0) || self.samples() < 2 {
            bail!(Config, "sampling rate and duration must give at least two samples");
        }
        if !self.profiles.is_empty() && self.profiles.len() != self.subjects {
            bail!(Config, "{} oscillation profiles for {} subjects", self.profiles.len(), self.subjects);
        }
        for s in 0..self.subjects {
            let p = self.profile(s);
            if !(self.fs > 2.0 * p.centre_hz) || p.centre_hz <= 0.0 {
                bail!(Config, "sampling rate {} Hz cannot carry a {} Hz oscillation", self.fs, p.centre_hz);
            }
            if !(p.on_dwell_s > 0.0 && p.off_dwell_s > 0.0) || p.amplitude < 0.0 {
                bail!(Config, "dwell times must be positive and amplitude non-negative");
            }
        }
        if let Some(t) = &self.task {
            let need = t.trials_per_session as f64 * t.trial_s;
            if t.classes < 2 || t.trials_per_session == 0 || need > self.duration_s {
                bail!(Config, "task needs at least 2 classes and {} s of recording per session", need);
            }
        }
        Ok(())
    }
}

/// Generated data and its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub signals: SignalSet,
    pub events: EventTable,
    /// Burst on/off path per recording, per channel.
    pub burst_paths: Vec<Vec<Vec<bool>>>,
}

/// Unit-variance noise with power falling as `1/f^exponent`.
pub fn pink_noise<R: Rng>(n: usize, exponent: f64, rng: &mut R) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(StandardNormal.sample(rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex::new(0.0, 0.0);
    for (k, v) in buf.iter_mut().enumerate().skip(1) {
        let f = k.min(n - k) as f64;
        *v *= f.powf(-exponent / 2.0);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    standardise(&mut out);
    out
}

/// Two-state Markov path with the given mean dwell (in samples) per state.
pub fn markov_path<R: Rng>(n: usize, on_dwell: f64, off_dwell: f64, rng: &mut R) -> Vec<bool> {
    let (p_leave_on, p_leave_off) = (1.0 / on_dwell.max(1.0), 1.0 / off_dwell.max(1.0));
    let mut on = rng.random::<f64>() < on_dwell / (on_dwell + off_dwell);
    (0..n)
        .map(|_| {
            let here = on;
            let p = if on { p_leave_on } else { p_leave_off };
            if rng.random::<f64>() < p {
                on = !on;
            }
            here
        })
        .collect()
}

pub fn standardise(x: &mut [f64]) {
    let n = x.len().max(1) as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    x.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

/// Evoked template of `class` on `channel`, `len` samples long.
fn evoked_template(class: usize, channel: usize, len: usize, fs: f64, pattern: &[f64]) -> Vec<f64> {
    let latency = (0.08 + 0.04 * class as f64) * fs;
    let width = 0.03 * fs;
    let gain = pattern[class * 1000 + channel];
    (0..len)
        .map(|t| {
            let u = (t as f64 - latency) / width;
            gain * (-0.5 * u * u).exp()
        })
        .collect()
}

/// Draws a dataset from `spec`; identical specs give bit-identical output.
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let n = spec.samples();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // class-by-channel evoked gains shared by all subjects
    let pattern: Vec<f64> = {
        let mut prng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7a5c);
        (0..spec.task.as_ref().map_or(0, |t| t.classes) * 1000)
            .map(|_| if prng.random::<bool>() { 1.0 } else { -1.0 } * prng.random_range(0.5..1.0))
            .collect()
    };
    let mut recordings = Vec::new();
    let mut events = EventTable::default();
    let mut paths = Vec::new();
    for subject in 0..spec.subjects {
        let profile = spec.profile(subject);
        let gains: Vec<f64> = {
            let mut srng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1000 + subject as u64));
            (0..spec.channels).map(|_| srng.random_range(0.4..1.0)).collect()
        };
        for session in 0..spec.sessions {
            let mut channels = Vec::with_capacity(spec.channels);
            let mut rec_paths = Vec::with_capacity(spec.channels);
            let onsets = spec.task.as_ref().map(|t| trial_onsets(t, n, spec.fs, &mut rng));
            for (c, &gain) in gains.iter().enumerate() {
                let mut x = pink_noise(n, spec.exponent, &mut rng);
                let path = markov_path(n, profile.on_dwell_s * spec.fs, profile.off_dwell_s * spec.fs, &mut rng);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let w = std::f64::consts::TAU * profile.centre_hz / spec.fs;
                let amp = profile.amplitude * gain;
                for (t, v) in x.iter_mut().enumerate() {
                    if path[t] {
                        *v += amp * (w * t as f64 + phase).sin();
                    }
                }
                if let (Some(task), Some(onsets)) = (&spec.task, &onsets) {
                    let len = (task.trial_s * spec.fs) as usize;
                    for &(onset, label) in onsets {
                        let tpl = evoked_template(label as usize, c, len, spec.fs, &pattern);
                        for (j, &e) in tpl.iter().enumerate() {
                            if onset + j < n {
                                x[onset + j] += task.evoked_amplitude * e;
                            }
                        }
                    }
                }
                standardise(&mut x);
                channels.push(x.into_iter().map(|v| v as f32).collect::<Vec<f32>>());
                rec_paths.push(path);
            }
            if let Some(onsets) = onsets {
                events.events.extend(onsets.into_iter().map(|(onset, label)| Event { session, subject, onset, label }));
            }
            recordings.push(Recording::from_channels(subject, session, &channels)?);
            paths.push(rec_paths);
        }
    }
    Ok(SynthOutput { signals: SignalSet::new(spec.fs, recordings), events, burst_paths: paths })
}

/// Evenly spaced onsets with balanced, shuffled labels.
fn trial_onsets<R: Rng>(task: &TaskProfile, n: usize, fs: f64, rng: &mut R) -> Vec<(usize, u8)> {
    let len = (task.trial_s * fs) as usize;
    let spacing = n / task.trials_per_session;
    let slack = spacing.saturating_sub(len);
    let mut labels: Vec<u8> = (0..task.trials_per_session).map(|i| (i % task.classes) as u8).collect();
    labels.shuffle(rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| (i * spacing + if slack > 0 { rng.random_range(0..=slack) } else { 0 }, l))
        .collect()
}
