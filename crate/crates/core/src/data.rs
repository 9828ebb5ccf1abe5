//! Containers shared across the pipeline.

use crate::error::{bail, Result};

/// One continuous multi-channel recording, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub subject: usize,
    pub session: usize,
    pub channels: usize,
    pub samples: usize,
    pub data: Vec<f32>,
}

impl Recording {
    pub fn new(subject: usize, session: usize, channels: usize, samples: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * samples {
            bail!(Dimension, "{} channels x {} samples needs {} values, got {}", channels, samples, channels * samples, data.len());
        }
        Ok(Recording { subject, session, channels, samples, data })
    }

    pub fn from_channels(subject: usize, session: usize, channels: &[Vec<f32>]) -> Result<Self> {
        let samples = channels.first().map_or(0, |c| c.len());
        if channels.iter().any(|c| c.len() != samples) {
            bail!(Dimension, "channels of unequal length");
        }
        Ok(Recording { subject, session, channels: channels.len(), samples, data: channels.concat() })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        &mut self.data[c * self.samples..(c + 1) * self.samples]
    }

    pub fn channels_iter(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.samples.max(1)).take(self.channels)
    }
}

/// Continuous recordings sharing a sampling rate.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalSet {
    pub fs: f64,
    pub recordings: Vec<Recording>,
}

impl SignalSet {
    pub fn new(fs: f64, recordings: Vec<Recording>) -> Self {
        SignalSet { fs, recordings }
    }

    pub fn channels(&self) -> usize {
        self.recordings.first().map_or(0, |r| r.channels)
    }

    pub fn total_samples(&self) -> usize {
        self.recordings.iter().map(|r| r.data.len()).sum()
    }

    /// Every channel of every recording as a single-channel series.
    pub fn series(&self) -> Vec<&[f32]> {
        self.recordings.iter().flat_map(|r| r.channels_iter()).collect()
    }

    pub fn subjects(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.recordings.iter().map(|r| r.subject).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Recordings whose subject satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(&Recording) -> bool) -> SignalSet {
        SignalSet { fs: self.fs, recordings: self.recordings.iter().filter(|r| keep(r)).cloned().collect() }
    }
}

/// Token labels of one recording, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenRecording {
    pub subject: usize,
    pub session: usize,
    pub channels: usize,
    pub samples: usize,
    pub labels: Vec<u16>,
}

impl TokenRecording {
    pub fn new(subject: usize, session: usize, channels: usize, samples: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != channels * samples {
            bail!(Dimension, "{} channels x {} samples needs {} labels, got {}", channels, samples, channels * samples, labels.len());
        }
        Ok(TokenRecording { subject, session, channels, samples, labels })
    }

    pub fn channel(&self, c: usize) -> &[u16] {
        &self.labels[c * self.samples..(c + 1) * self.samples]
    }

    /// Label at time `t` on channel `c`.
    pub fn at(&self, t: usize, c: usize) -> u16 {
        self.labels[c * self.samples + t]
    }
}

/// Tokenised recordings over a vocabulary of `k_star` labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenCorpus {
    pub k_star: usize,
    pub recordings: Vec<TokenRecording>,
}

impl TokenCorpus {
    pub fn channels(&self) -> usize {
        self.recordings.first().map_or(0, |r| r.channels)
    }

    /// Occurrence rate of every label over the whole corpus.
    pub fn frequencies(&self) -> Vec<f64> {
        let mut counts = vec![0u64; self.k_star];
        for r in &self.recordings {
            for &l in &r.labels {
                if (l as usize) < self.k_star {
                    counts[l as usize] += 1;
                }
            }
        }
        let total: u64 = counts.iter().sum();
        counts.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.recordings {
            if let Some(&l) = r.labels.iter().find(|&&l| l as usize >= self.k_star) {
                bail!(Index, "label {} outside vocabulary of {}", l, self.k_star);
            }
        }
        Ok(())
    }
}

/// One task trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub session: usize,
    pub subject: usize,
    pub onset: usize,
    pub label: u8,
}

/// Trials of a task dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventTable {
    pub events: Vec<Event>,
}
