//! Prompted autoregressive generation with nucleus sampling.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Recording, TokenRecording};
use crate::error::{bail, Result};
use crate::gpt::{GptModel, TokenBatch};
use crate::tokeniser::TokeniserModel;

/// Settings of one generation run.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationConfig {
    pub top_p: f64,
    /// Generated steps per channel, prompt excluded.
    pub steps: usize,
    pub subject: Option<usize>,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { top_p: 0.99, steps: 2500, subject: None, seed: 0 }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            bail!(Parameter, "top_p must be in (0, 1], got {}", self.top_p);
        }
        if self.steps == 0 {
            bail!(Parameter, "steps must be at least 1");
        }
        Ok(())
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<f64> {
    if p.is_empty() {
        bail!(Input, "{} is empty", what);
    }
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        bail!(Input, "{} has negative or non-finite entries", what);
    }
    Ok(p.iter().sum())
}

/// `C x L` prompt (channel-major) of i.i.d. draws from `frequencies`.
pub fn init_prompt<R: Rng>(frequencies: &[f64], l: usize, channels: usize, rng: &mut R) -> Result<Vec<u16>> {
    let total = check_distribution(frequencies, "token frequencies")?;
    if total <= 0.0 {
        bail!(Input, "token frequencies are all zero");
    }
    let dist = WeightedIndex::new(frequencies).map_err(|e| crate::Error::Input(e.to_string()))?;
    Ok((0..l * channels).map(|_| dist.sample(rng) as u16).collect())
}

/// Labels of the nucleus for `top_p`, most probable first.
///
/// The nucleus is the shortest descending prefix whose mass exceeds `top_p`,
/// extended by every label tied with its last member. When no prefix exceeds
/// `top_p` all labels with positive probability are kept.
pub fn nucleus_set(probs: &[f64], top_p: f64) -> Result<Vec<usize>> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        bail!(Parameter, "top_p must be in (0, 1], got {}", top_p);
    }
    let total = check_distribution(probs, "probabilities")?;
    if (total - 1.0).abs() > 1e-6 {
        bail!(Input, "probabilities sum to {}, expected 1", total);
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut cum = 0.0;
    for (n, &k) in order.iter().enumerate() {
        cum += probs[k];
        if cum > top_p {
            let edge = probs[k];
            let end = n + 1 + order[n + 1..].iter().take_while(|&&j| probs[j] == edge).count();
            order.truncate(end);
            return Ok(order);
        }
    }
    order.retain(|&k| probs[k] > 0.0);
    Ok(order)
}

/// Draws one label from the renormalised nucleus.
pub fn nucleus_sample<R: Rng>(probs: &[f64], top_p: f64, rng: &mut R) -> Result<usize> {
    let set = nucleus_set(probs, top_p)?;
    let mass: f64 = set.iter().map(|&k| probs[k]).sum();
    let u = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    for &k in &set {
        acc += probs[k];
        if u < acc {
            return Ok(k);
        }
    }
    Ok(*set.last().expect("nucleus is never empty"))
}

/// Tokens and decoded signal of one generation run (prompt discarded).
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub tokens: TokenRecording,
    pub signal: Option<Recording>,
}

/// Autoregressive token generation from a frequency-drawn prompt.
///
/// Each step runs the model on the newest `L` tokens, takes the newest latent's
/// distribution on every channel and samples each channel independently.
pub fn generate_tokens(model: &GptModel, frequencies: &[f64], config: &GenerationConfig) -> Result<TokenRecording> {
    Ok(run_generation(model, frequencies, config)?.1)
}

/// Prompt (`C x L`) and generated tokens.
fn run_generation(model: &GptModel, frequencies: &[f64], config: &GenerationConfig) -> Result<(Vec<u16>, TokenRecording)> {
    config.validate()?;
    let cfg = &model.config;
    let (c, l, k) = (cfg.channels, cfg.l, cfg.k_star);
    if frequencies.len() != k {
        bail!(Config, "{} token frequencies for a vocabulary of {}", frequencies.len(), k);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let prompt = init_prompt(frequencies, l, c, &mut rng)?;
    let total = l + config.steps;
    let mut series: Vec<Vec<u16>> = (0..c).map(|ch| {
        let mut v = Vec::with_capacity(total);
        v.extend_from_slice(&prompt[ch * l..(ch + 1) * l]);
        v
    }).collect();
    let mut probs = vec![0.0f64; k];
    for t in l..total {
        let window: Vec<u16> = series.iter().flat_map(|s| s[t - l..t].iter().copied()).collect();
        let p = model.next_token_probs(&TokenBatch::single(c, window, config.subject)?)?;
        for (ch, s) in series.iter_mut().enumerate() {
            let row = &p.data()[ch * k..(ch + 1) * k];
            let z: f64 = row.iter().map(|&x| x as f64).sum();
            probs.iter_mut().zip(row).for_each(|(d, &x)| *d = x as f64 / z);
            s.push(nucleus_sample(&probs, config.top_p, &mut rng)? as u16);
        }
    }
    let labels = series.iter().flat_map(|s| s[l..].iter().copied()).collect();
    Ok((prompt, TokenRecording::new(config.subject.unwrap_or(0), 0, c, config.steps, labels)?))
}

/// Generates tokens and decodes them with the tokeniser.
///
/// Decoding runs over prompt and generated tokens together so the first
/// generated samples see their left context; only the generated part is kept.
pub fn generate(
    model: &GptModel,
    tokeniser: &TokeniserModel,
    frequencies: &[f64],
    config: &GenerationConfig,
) -> Result<Generated> {
    if tokeniser.k_star() != model.config.k_star {
        bail!(Config, "tokeniser has K* = {}, model expects {}", tokeniser.k_star(), model.config.k_star);
    }
    let l = model.config.l;
    let (prompt, tokens) = run_generation(model, frequencies, config)?;
    let mut data = Vec::with_capacity(tokens.channels * tokens.samples);
    for ch in 0..tokens.channels {
        let mut full = prompt[ch * l..(ch + 1) * l].to_vec();
        full.extend_from_slice(tokens.channel(ch));
        data.extend_from_slice(&tokeniser.detokenise(&full)?[l..]);
    }
    let signal = Recording::new(tokens.subject, 0, tokens.channels, tokens.samples, data)?;
    Ok(Generated { tokens, signal: Some(signal) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_nucleus_example() {
        let p = [0.5, 0.3, 0.15, 0.05];
        assert_eq!(nucleus_set(&p, 0.9).unwrap(), vec![0, 1, 2]);
        assert_eq!(nucleus_set(&p, 1.0).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(nucleus_set(&p, 0.4).unwrap(), vec![0]);
    }

    #[test]
    fn boundary_ties_are_all_kept() {
        let p = [0.2, 0.4, 0.2, 0.2];
        assert_eq!(nucleus_set(&p, 0.5).unwrap(), vec![1, 0, 2, 3]);
    }

    #[test]
    fn bad_arguments() {
        let p = [0.5, 0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(nucleus_sample(&p, 0.0, &mut rng), Err(crate::Error::Parameter(_))));
        assert!(matches!(nucleus_sample(&[0.5, 0.2], 0.9, &mut rng), Err(crate::Error::Input(_))));
        assert!(matches!(init_prompt(&[0.0, 0.0], 4, 1, &mut rng), Err(crate::Error::Input(_))));
        assert!(GenerationConfig { steps: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn degenerate_prompt() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(init_prompt(&[0.0, 1.0, 0.0], 10, 3, &mut rng).unwrap().iter().all(|&t| t == 1));
    }
}
