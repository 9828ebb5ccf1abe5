//! The `meg` command line: one subcommand per pipeline stage.
//!
//! Each subcommand reads a `key = value` config, writes its outputs under
//! `--out` and records its metrics in `report-<subcommand>.txt` there.
//! Exit status is 0 on success, 1 for usage and configuration errors and 2
//! for data, format and numeric errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use super::formats::*;
use super::models::{load_gpt, load_tokeniser, save_gpt, save_tokeniser};
use super::report::{fmt_f64, table, EvalReport};
use super::synth::{synth_dataset, OscillationProfile, SynthSpec, TaskProfile};
use crate::analysis::{self, band_power_maps, welch_set, FingerprintConfig, FingerprintKind, Psd, CANONICAL_BANDS};
use crate::baselines::{fit_ar_set, generate_ar, DEFAULT_ORDER};
use crate::bursts;
use crate::data::{Recording, SignalSet, TokenCorpus, TokenRecording};
use crate::decoding::{self, ClassifierConfig, Features, SplitMode};
use crate::error::{bail, Error, Result};
use crate::gpt::{extract_features, fine_tune, train_gpt, FineTuneConfig, GptConfig};
use crate::sampler::{generate, generate_tokens, GenerationConfig};
use crate::tokeniser::{pve_signals, train_tokeniser, TokeniserConfig};

#[derive(Parser, Debug)]
#[command(name = "meg", about = "Tokenised MEG modelling pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (computation is single-threaded; accepted for interface stability).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Write a synthetic dataset with ground truth.
    SynthData,
    /// Train a tokeniser and report held-out PVE.
    TrainTokeniser,
    /// Convert signal files to token files.
    Tokenise,
    /// Convert token files back to signals.
    Detokenise,
    /// Train the transformer on token files.
    TrainGpt,
    /// Sample new recordings from a trained model or the AR baseline.
    Generate,
    /// Fine-tune with frozen shared embeddings.
    FineTune,
    /// Zero-shot features of task trials.
    ExtractFeatures,
    /// Train and score the task classifier.
    Decode,
    /// Spectral, burst and fingerprint evaluation of signal files.
    Evaluate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::TrainTokeniser => "train-tokeniser",
            Command::Tokenise => "tokenise",
            Command::Detokenise => "detokenise",
            Command::TrainGpt => "train-gpt",
            Command::Generate => "generate",
            Command::FineTune => "fine-tune",
            Command::ExtractFeatures => "extract-features",
            Command::Decode => "decode",
            Command::Evaluate => "evaluate",
        }
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("meg {}: {e}", cli.command.name());
            if e.is_usage() { 1 } else { 2 }
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        bail!(Parameter, "--threads must be at least 1");
    }
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let config_seed: u64 = cfg.take_or("seed", 0)?;
    let seed = cli.seed.unwrap_or(config_seed);
    let mut report = EvalReport::default();
    report.section("run").put("command", cli.command.name()).put("seed", seed);
    let out = cli.out.as_path();
    std::fs::create_dir_all(out)?;
    match cli.command {
        Command::SynthData => synth_data(&mut cfg, seed, out, &mut report)?,
        Command::TrainTokeniser => cmd_train_tokeniser(&mut cfg, seed, out, &mut report)?,
        Command::Tokenise => cmd_tokenise(&mut cfg, out, &mut report)?,
        Command::Detokenise => cmd_detokenise(&mut cfg, out, &mut report)?,
        Command::TrainGpt => cmd_train_gpt(&mut cfg, seed, out, &mut report)?,
        Command::Generate => cmd_generate(&mut cfg, seed, out, &mut report)?,
        Command::FineTune => cmd_fine_tune(&mut cfg, seed, out, &mut report)?,
        Command::ExtractFeatures => cmd_extract_features(&mut cfg, out, &mut report)?,
        Command::Decode => cmd_decode(&mut cfg, out, &mut report)?,
        Command::Evaluate => cmd_evaluate(&mut cfg, seed, out, &mut report)?,
    }
    write_text(&out.join(format!("report-{}.txt", cli.command.name())), &report.render())
}

fn path_key(cfg: &mut Config, key: &str) -> Result<PathBuf> {
    cfg.require_str(key).map(PathBuf::from)
}

fn parse_bool(cfg: &mut Config, key: &str, default: bool) -> Result<bool> {
    cfg.take_or(key, default)
}

fn synth_data(cfg: &mut Config, seed: u64, out: &Path, report: &mut EvalReport) -> Result<()> {
    let d = SynthSpec::default();
    let subjects = cfg.take_or("subjects", d.subjects)?;
    let lo: f64 = cfg.take_or("centre_hz_min", 8.0)?;
    let hi: f64 = cfg.take_or("centre_hz_max", 12.0)?;
    let amplitude = cfg.take_or("amplitude", 3.0)?;
    let on_dwell_s = cfg.take_or("on_dwell_s", 0.5)?;
    let off_dwell_s = cfg.take_or("off_dwell_s", 0.5)?;
    let profiles = (0..subjects)
        .map(|s| {
            let spread = if subjects > 1 { s as f64 / (subjects - 1) as f64 } else { 0.5 };
            OscillationProfile { centre_hz: lo + (hi - lo) * spread, on_dwell_s, off_dwell_s, amplitude }
        })
        .collect();
    let task = if parse_bool(cfg, "task", false)? {
        Some(TaskProfile {
            classes: cfg.take_or("task_classes", 4)?,
            trials_per_session: cfg.take_or("task_trials", 40)?,
            evoked_amplitude: cfg.take_or("evoked_amplitude", 1.0)?,
            trial_s: cfg.take_or("trial_s", 0.5)?,
        })
    } else {
        None
    };
    let spec = SynthSpec {
        subjects,
        sessions: cfg.take_or("sessions", d.sessions)?,
        channels: cfg.take_or("channels", d.channels)?,
        duration_s: cfg.take_or("duration_s", d.duration_s)?,
        fs: cfg.take_or("fs", d.fs)?,
        profiles,
        exponent: cfg.take_or("exponent", d.exponent)?,
        task,
        seed,
    };
    std::mem::take(cfg).finish()?;
    let data = synth_dataset(&spec)?;
    write_signal_set(&out.join("signals"), &data.signals)?;
    let paths = TokenCorpus {
        k_star: 2,
        recordings: data
            .signals
            .recordings
            .iter()
            .zip(&data.burst_paths)
            .map(|(r, p)| TokenRecording::new(r.subject, r.session, r.channels, r.samples, p.iter().flatten().map(|&b| u16::from(b)).collect()))
            .collect::<Result<_>>()?,
    };
    write_token_corpus(&out.join("bursts"), &paths)?;
    if spec.task.is_some() {
        write_events(&out.join("events.csv"), &data.events)?;
    }
    let s = report.section("synth");
    s.put("subjects", spec.subjects).put("sessions", spec.sessions).put("channels", spec.channels);
    s.put("samples", spec.samples()).put_f64("fs", spec.fs).put("trials", data.events.events.len());
    for subj in 0..spec.subjects {
        s.put_f64(format!("subject{subj}.centre_hz"), spec.profile(subj).centre_hz);
    }
    Ok(())
}

/// Recordings of the last `holdout` subjects go to the second set.
fn split_by_subject(set: &SignalSet, holdout: usize) -> (SignalSet, SignalSet) {
    let subjects = set.subjects();
    let cut = subjects.len().saturating_sub(holdout);
    let held: Vec<usize> = subjects[cut..].to_vec();
    (set.filter(|r| !held.contains(&r.subject)), set.filter(|r| held.contains(&r.subject)))
}

fn reconstruct_set(model: &crate::tokeniser::TokeniserModel, set: &SignalSet) -> Result<SignalSet> {
    let recs = set
        .recordings
        .iter()
        .map(|r| {
            let chans = r.channels_iter().map(|c| model.reconstruct(c)).collect::<Result<Vec<_>>>()?;
            Recording::from_channels(r.subject, r.session, &chans)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SignalSet::new(set.fs, recs))
}

fn cmd_train_tokeniser(cfg: &mut Config, seed: u64, out: &Path, report: &mut EvalReport) -> Result<()> {
    let signals = read_signal_set(&path_key(cfg, "signals")?)?;
    let holdout = cfg.take_or("holdout_subjects", 1usize)?;
    let d = TokeniserConfig::desk();
    let config = TokeniserConfig {
        vocab: cfg.take_or("vocab", d.vocab)?,
        d_token: cfg.take_or("d_token", d.d_token)?,
        units: cfg.take_or("units", d.units)?,
        seq_len: cfg.take_or("seq_len", d.seq_len)?,
        batch_size: cfg.take_or("batch_size", d.batch_size)?,
        epochs: cfg.take_or("epochs", d.epochs)?,
        lr: cfg.take_or("lr", d.lr)?,
        temperature: cfg.take_or("temperature", d.temperature)?,
        batches_per_epoch: take_opt_usize(cfg, "batches_per_epoch", d.batches_per_epoch)?,
    };
    std::mem::take(cfg).finish()?;
    let (train, held) = split_by_subject(&signals, holdout);
    if train.recordings.is_empty() {
        bail!(Config, "holdout_subjects = {} leaves no training data", holdout);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut model, log) = train_tokeniser(&train, &config, &mut rng)?;
    model.fit_refactor(&train)?;
    save_tokeniser(&out.join("tokeniser.megck"), &model)?;
    let rows = (0..log.epoch_loss.len()).map(|e| vec![e.to_string(), fmt_f64(log.kappa[e]), fmt_f64(log.epoch_loss[e]), fmt_f64(log.hard_loss[e])]);
    write_text(&out.join("tokeniser_log.tsv"), &table(&["epoch", "kappa", "loss", "hard_loss"], rows))?;
    let s = report.section("tokeniser");
    s.put("vocab", config.vocab).put("k_star", model.k_star());
    s.put_opt("train_pve", pve_signals(&train, &reconstruct_set(&model, &train)?)?);
    if !held.recordings.is_empty() {
        s.put_opt("heldout_pve", pve_signals(&held, &reconstruct_set(&model, &held)?)?);
    }
    Ok(())
}

fn take_opt_usize(cfg: &mut Config, key: &str, default: Option<usize>) -> Result<Option<usize>> {
    match cfg.take_str(key).as_deref() {
        None => Ok(default),
        Some("none") => Ok(None),
        Some(v) => match v.parse() {
            Ok(n) => Ok(Some(n)),
            Err(_) => bail!(Config, "key '{}': expected a count or 'none', got '{}'", key, v),
        },
    }
}

fn cmd_tokenise(cfg: &mut Config, out: &Path, report: &mut EvalReport) -> Result<()> {
    let model = load_tokeniser(&path_key(cfg, "tokeniser")?)?;
    let signals = read_signal_set(&path_key(cfg, "signals")?)?;
    std::mem::take(cfg).finish()?;
    let corpus = tokenise_set(&model, &signals)?;
    write_token_corpus(&out.join("tokens"), &corpus)?;
    report.section("tokenise").put("k_star", corpus.k_star).put("recordings", corpus.recordings.len());
    Ok(())
}

pub fn tokenise_set(model: &crate::tokeniser::TokeniserModel, set: &SignalSet) -> Result<TokenCorpus> {
    let recordings = set
        .recordings
        .iter()
        .map(|r| {
            let mut labels = Vec::with_capacity(r.data.len());
            for c in r.channels_iter() {
                labels.extend(model.tokenise(c)?);
            }
            TokenRecording::new(r.subject, r.session, r.channels, r.samples, labels)
        })
        .collect::<Result<_>>()?;
    Ok(TokenCorpus { k_star: model.k_star(), recordings })
}

fn cmd_detokenise(cfg: &mut Config, out: &Path, report: &mut EvalReport) -> Result<()> {
    let model = load_tokeniser(&path_key(cfg, "tokeniser")?)?;
    let tokens = read_token_corpus(&path_key(cfg, "tokens")?)?;
    let fs: f64 = cfg.take_or("fs", 250.0)?;
    std::mem::take(cfg).finish()?;
    if tokens.k_star != model.k_star() {
        bail!(Config, "token files use K* = {}, tokeniser has {}", tokens.k_star, model.k_star());
    }
    let recs = tokens
        .recordings
        .iter()
        .map(|t| {
            let chans = (0..t.channels).map(|c| model.detokenise(t.channel(c))).collect::<Result<Vec<_>>>()?;
            Recording::from_channels(t.subject, t.session, &chans)
        })
        .collect::<Result<Vec<_>>>()?;
    write_signal_set(&out.join("signals"), &SignalSet::new(fs, recs))?;
    report.section("detokenise").put("recordings", tokens.recordings.len());
    Ok(())
}

fn gpt_config(cfg: &mut Config, k_star: usize, channels: usize, subjects: usize) -> Result<GptConfig> {
    let preset = cfg.take_str("preset").unwrap_or_else(|| "desk".into());
    let d = match preset.as_str() {
        "desk" => GptConfig::desk(k_star, channels, subjects),
        "published" => GptConfig::published(k_star, channels, subjects),
        other => bail!(Config, "unknown preset '{}'", other),
    };
    let width = cfg.take_or("d", d.d)?;
    let keep = |v: usize| if v == d.d { width } else { v };
    Ok(GptConfig {
        d: width,
        d_token: cfg.take_or("d_token", keep(d.d_token))?,
        d_channel: cfg.take_or("d_channel", keep(d.d_channel))?,
        d_position: cfg.take_or("d_position", keep(d.d_position))?,
        d_subject: cfg.take_or("d_subject", keep(d.d_subject))?,
        layers: cfg.take_or("layers", d.layers)?,
        heads: cfg.take_or("heads", d.heads)?,
        ff_units: cfg.take_or("ff_units", d.ff_units)?,
        leaky_slope: cfg.take_or("leaky_slope", d.leaky_slope)?,
        dropout: cfg.take_or("dropout", d.dropout)?,
        l: cfg.take_or("l", d.l)?,
        patch_len: cfg.take_or("patch_len", d.patch_len)?,
        unpatched: cfg.take_or("unpatched", d.unpatched)?,
        latent: cfg.take_or("latent", d.latent)?,
        loss_len: cfg.take_or("loss_len", d.loss_len)?,
        batch_size: cfg.take_or("batch_size", d.batch_size)?,
        epochs: cfg.take_or("epochs", d.epochs)?,
        lr: cfg.take_or("lr", d.lr)?,
        batches_per_epoch: take_opt_usize(cfg, "batches_per_epoch", d.batches_per_epoch)?,
        ..d
    })
}

/// The last `n` recordings become the validation corpus.
fn split_tail(corpus: &TokenCorpus, n: usize) -> (TokenCorpus, Option<TokenCorpus>) {
    let cut = corpus.recordings.len().saturating_sub(n);
    let train = TokenCorpus { k_star: corpus.k_star, recordings: corpus.recordings[..cut].to_vec() };
    let valid = (cut < corpus.recordings.len()).then(|| TokenCorpus { k_star: corpus.k_star, recordings: corpus.recordings[cut..].to_vec() });
    (train, valid)
}

fn put_history(report: &mut EvalReport, section: &str, h: &crate::gpt::History) {
    let s = report.section(section);
    s.put("epochs", h.epochs.len());
    if let Some(last) = h.epochs.last() {
        s.put_f64("train_loss", last.train_loss).put_f64("train_acc", last.train_acc);
        s.put_opt("val_loss", last.val_loss).put_opt("val_acc", last.val_acc);
    }
}

fn cmd_train_gpt(cfg: &mut Config, seed: u64, out: &Path, report: &mut EvalReport) -> Result<()> {
    let tokens = read_token_corpus(&path_key(cfg, "tokens")?)?;
    let subject_table = parse_bool(cfg, "subject_table", true)?;
    let valid_n = cfg.take_or("valid_recordings", usize::from(tokens.recordings.len() > 1))?;
    let subjects = if subject_table { tokens.recordings.iter().map(|r| r.subject + 1).max().unwrap_or(0) } else { 0 };
    let config = gpt_config(cfg, tokens.k_star, tokens.channels(), subjects)?;
    std::mem::take(cfg).finish()?;
    let (train, valid) = split_tail(&tokens, valid_n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, history) = train_gpt(&train, valid.as_ref(), &config, &mut rng)?;
    save_gpt(&out.join("gpt.megck"), &model)?;
    write_text(&out.join("metrics.log"), &history.log_text())?;
    put_history(report, "gpt", &history);
    report.section("gpt").put("parameters", model.params.numel());
    Ok(())
}

fn psd_table(psd: &Psd) -> String {
    let c = psd.power.len();
    let mut header = vec!["freq_hz".to_string()];
    header.extend((0..c).map(|i| format!("ch{i}")));
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = psd.freqs.iter().enumerate().map(|(k, f)| {
        let mut r = vec![fmt_f64(*f)];
        r.extend(psd.power.iter().map(|p| fmt_f64(p[k])));
        r
    });
    table(&h, rows)
}

fn cmd_generate(cfg: &mut Config, seed: u64, out: &Path, report: &mut EvalReport) -> Result<()> {
    let kind = cfg.take_str("model").unwrap_or_else(|| "gpt".into());
    let steps = cfg.take_or("steps", 2500usize)?;
    let recordings = cfg.take_or("recordings", 1usize)?;
    let fs: f64 = cfg.take_or("fs", 250.0)?;
    let mut set = Vec::new();
    match kind.as_str() {
        "gpt" => {
            let model = load_gpt(&path_key(cfg, "gpt")?)?;
            let tokens = read_token_corpus(&path_key(cfg, "tokens")?)?;
            let tokeniser = match cfg.take_str("tokeniser") {
                Some(p) => Some(load_tokeniser(Path::new(&p))?),
                None => None,
            };
            let top_p = cfg.take_or("top_p", 0.99)?;
            let subject: Option<usize> = cfg.take("subject")?;
            std::mem::take(cfg).finish()?;
            let freqs = tokens.frequencies();
            let mut generated_tokens = Vec::new();
            for i in 0..recordings {
                let gc = GenerationConfig { top_p, steps, subject, seed: seed.wrapping_add(i as u64) };
                let (toks, sig) = match &tokeniser {
                    Some(t) => {
                        let g = generate(&model, t, &freqs, &gc)?;
                        (g.tokens, g.signal)
                    }
                    None => (generate_tokens(&model, &freqs, &gc)?, None),
                };
                let mut toks = toks;
                toks.session = i;
                generated_tokens.push(toks);
                if let Some(mut s) = sig {
                    s.session = i;
                    set.push(s);
                }
            }
            write_token_corpus(&out.join("generated_tokens"), &TokenCorpus { k_star: model.config.k_star, recordings: generated_tokens })?;
        }
        "ar" => {
            let signals = read_signal_set(&path_key(cfg, "signals")?)?;
            let order = cfg.take_or("order", DEFAULT_ORDER)?;
            let subject = cfg.take_or("subject", 0usize)?;
            std::mem::take(cfg).finish()?;
            let model = fit_ar_set(&signals, order)?;
            write_text(&out.join("ar_model.tsv"), &model.to_table())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..recordings {
                let mut r = generate_ar(&model, steps, subject, &mut rng)?;
                r.session = i;
                set.push(r);
            }
        }
        other => bail!(Config, "unknown model '{}' (expected gpt or ar)", other),
    }
    let s = report.section("generate");
    s.put("model", &kind).put("recordings", recordings).put("steps", steps);
    if !set.is_empty() {
        let signals = SignalSet::new(fs, set);
        write_signal_set(&out.join("generated"), &signals)?;
        let window = (2.0f64).min(steps as f64 / fs);
        let psd = welch_set(&signals, window, 0.5)?;
        write_text(&out.join("generated_psd.tsv"), &psd_table(&psd))?;
        report.section("generate").put_f64("mean_psd_peak_hz", peak(&psd.freqs, &psd.mean_over_channels()));
    }
    Ok(())
}

fn peak(freqs: &[f64], power: &[f64]) -> f64 {
    let k = (0..power.len()).fold(0, |a, k| if power[k] > power[a] { k } else { a });
    freqs[k]
}

fn cmd_fine_tune(cfg: &mut Config, seed: u64, out: &Path, report: &mut EvalReport) -> Result<()> {
    let model = load_gpt(&path_key(cfg, "gpt")?)?;
    let tokens = read_token_corpus(&path_key(cfg, "tokens")?)?;
    let d = FineTuneConfig::default();
    let ft = FineTuneConfig {
        batch_size: cfg.take_or("batch_size", d.batch_size)?,
        epochs: cfg.take_or("epochs", d.epochs)?,
        lr: cfg.take_or("lr", d.lr)?,
        batches_per_epoch: take_opt_usize(cfg, "batches_per_epoch", d.batches_per_epoch)?,
        new_subjects: cfg.take_or("new_subjects", d.new_subjects)?,
    };
    let valid_n = cfg.take_or("valid_recordings", 0usize)?;
    std::mem::take(cfg).finish()?;
    let (train, valid) = split_tail(&tokens, valid_n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tuned, history) = fine_tune(&model, &train, valid.as_ref(), &ft, &mut rng)?;
    save_gpt(&out.join("gpt.megck"), &tuned)?;
    write_text(&out.join("metrics.log"), &history.log_text())?;
    put_history(report, "fine_tune", &history);
    Ok(())
}

fn features_table(x: &Features, ids: &[(usize, usize, u8)]) -> String {
    let mut header = vec!["subject".to_string(), "session".into(), "label".into()];
    header.extend((0..x.cols).map(|j| format!("f{j}")));
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    table(
        &h,
        (0..x.rows).map(|i| {
            let (s, e, l) = ids[i];
            let mut r = vec![s.to_string(), e.to_string(), l.to_string()];
            r.extend(x.row(i).iter().map(|v| fmt_f64(*v)));
            r
        }),
    )
}

fn parse_features_table(text: &str) -> Result<(Features, Vec<u8>, Vec<(usize, usize)>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Input("empty feature table".into()))?;
    let cols = header.split('\t').count().saturating_sub(3);
    let (mut values, mut y, mut groups) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != cols + 3 {
            bail!(Input, "feature row {} has {} fields, expected {}", i + 1, f.len(), cols + 3);
        }
        let bad = || Error::Input(format!("feature row {} is malformed", i + 1));
        groups.push((f[0].parse().map_err(|_| bad())?, f[1].parse().map_err(|_| bad())?));
        y.push(f[2].parse().map_err(|_| bad())?);
        for v in &f[3..] {
            values.push(v.parse::<f64>().map_err(|_| bad())?);
        }
    }
    Ok((Features::new(y.len(), cols, values)?, y, groups))
}

fn cmd_extract_features(cfg: &mut Config, out: &Path, report: &mut EvalReport) -> Result<()> {
    let model = load_gpt(&path_key(cfg, "gpt")?)?;
    let tokens = read_token_corpus(&path_key(cfg, "tokens")?)?;
    let events = read_events(&path_key(cfg, "events")?)?;
    let window = cfg.take_or("window", model.config.l)?;
    std::mem::take(cfg).finish()?;
    let trials = decoding::epoch_tokens(&tokens, &events, window)?;
    let feats = extract_features(&model, &trials)?;
    let (rows, cols) = (feats.shape()[0], feats.shape()[1]);
    let x = Features::new(rows, cols, feats.data().iter().map(|&v| v as f64).collect())?;
    // epoch_tokens keeps events in order, skipping those that do not fit
    let index: std::collections::BTreeMap<(usize, usize), usize> = tokens.recordings.iter().map(|r| ((r.subject, r.session), r.samples)).collect();
    let ids: Vec<(usize, usize, u8)> = events
        .events
        .iter()
        .filter(|e| index.get(&(e.subject, e.session)).is_some_and(|&n| e.onset + window <= n))
        .map(|e| (e.subject, e.session, e.label))
        .collect();
    write_text(&out.join("features.tsv"), &features_table(&x, &ids))?;
    report.section("features").put("trials", rows).put("features", cols);
    Ok(())
}

fn cmd_decode(cfg: &mut Config, out: &Path, report: &mut EvalReport) -> Result<()> {
    let (x, y, groups) = match cfg.take_str("features") {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::Input(format!("cannot read {p}: {e}")))?;
            parse_features_table(&text)?
        }
        None => {
            let signals = read_signal_set(&path_key(cfg, "signals")?)?;
            let events = read_events(&path_key(cfg, "events")?)?;
            let window = cfg.take_or("window", 40usize)?;
            let ep = decoding::epoch(&signals, &events, window)?;
            report.section("decode").put("dropped_trials", ep.dropped);
            (decoding::baseline_features(&ep), ep.labels.clone(), ep.groups())
        }
    };
    let mode: SplitMode = cfg.take_str("mode").unwrap_or_else(|| "within-subject".into()).parse()?;
    let last_subject = groups.iter().map(|g| g.0).max().unwrap_or(0);
    let held_out = cfg.take_or("held_out", last_subject)?;
    let d = ClassifierConfig::default();
    let cc = ClassifierConfig { lambda: cfg.take_or("lambda", d.lambda)?, max_iter: cfg.take_or("max_iter", d.max_iter)?, tol: cfg.take_or("tol", d.tol)? };
    std::mem::take(cfg).finish()?;
    let split = decoding::split_protocol(&groups, mode, held_out)?;
    let (clf, ev) = decoding::run_split(&x, &y, &groups, &split, &cc)?;
    let n = split.test.len();
    let hits: usize = (0..ev.confusion.len()).map(|c| ev.confusion[c][c]).sum();
    let (mean, half) = ev.session_interval();
    let s = report.section("decode");
    s.put("mode", if mode == SplitMode::WithinSubject { "within-subject" } else { "new-subject" });
    s.put("train_trials", split.train.len()).put("test_trials", n).put("features", x.cols);
    s.put_f64("accuracy", ev.accuracy).put_f64("chance", 1.0 / decoding::CLASSES as f64);
    s.put_f64("p_binomial", analysis::binomial_upper_tail(hits, n, 1.0 / decoding::CLASSES as f64));
    s.put_f64("session_mean", mean).put_f64("session_ci95", half);
    s.put("converged", clf.converged);
    for (t, row) in ev.confusion.iter().enumerate() {
        s.put(format!("confusion.true{t}"), row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "));
    }
    for ss in &ev.sessions {
        s.put_f64(format!("session.sub{}.ses{}", ss.subject, ss.session), ss.accuracy);
    }
    let rows = ev.confusion.iter().enumerate().map(|(t, r)| std::iter::once(t.to_string()).chain(r.iter().map(|v| v.to_string())).collect());
    write_text(&out.join("confusion.tsv"), &table(&["true", "pred0", "pred1", "pred2", "pred3"], rows))?;
    Ok(())
}

fn cmd_evaluate(cfg: &mut Config, seed: u64, out: &Path, report: &mut EvalReport) -> Result<()> {
    let signals = read_signal_set(&path_key(cfg, "signals")?)?;
    let compare = match cfg.take_str("compare") {
        Some(p) => Some(read_signal_set(Path::new(&p))?),
        None => None,
    };
    let window_s = cfg.take_or("window_s", 2.0)?;
    let overlap = cfg.take_or("overlap", 0.5)?;
    let states = cfg.take_or("burst_states", 0usize)?;
    let burst_channel = cfg.take_or("burst_channel", 0usize)?;
    let half_lags = cfg.take_or("burst_lags", 7isize)?;
    let burst_iter = cfg.take_or("burst_iter", 100usize)?;
    let kind: FingerprintKind = cfg.take_str("fingerprint").unwrap_or_else(|| "spectral".into()).parse()?;
    std::mem::take(cfg).finish()?;

    let psd = welch_set(&signals, window_s, overlap)?;
    write_text(&out.join("psd_signals.tsv"), &psd_table(&psd))?;
    let bands = band_power_maps(&psd, &CANONICAL_BANDS)?;
    let s = report.section("psd");
    s.put_f64("resolution_hz", psd.resolution()).put("segments", psd.segments);
    s.put_f64("signals.peak_hz", peak(&psd.freqs, &psd.mean_over_channels()));
    for (b, &(lo, hi)) in bands.bands.iter().enumerate() {
        let m = bands.relative[b].iter().sum::<f64>() / bands.relative[b].len() as f64;
        s.put_f64(format!("signals.relative_{lo}_{hi}hz"), m);
    }
    if let Some(cmp) = &compare {
        let cpsd = welch_set(cmp, window_s, overlap)?;
        write_text(&out.join("psd_compare.tsv"), &psd_table(&cpsd))?;
        report.section("psd").put_f64("compare.peak_hz", peak(&cpsd.freqs, &cpsd.mean_over_channels()));
        let same_shape = cmp.recordings.len() == signals.recordings.len()
            && cmp.recordings.iter().zip(&signals.recordings).all(|(a, b)| a.channels == b.channels && a.samples == b.samples);
        if same_shape {
            report.section("pve").put_opt("value", pve_signals(&signals, cmp)?);
        }
        let fc = FingerprintConfig { window_s, overlap, ..FingerprintConfig::default() };
        let real = analysis::fingerprints(&signals, &kind, &fc)?;
        let gen = analysis::fingerprints(cmp, &kind, &fc)?;
        let ids: Vec<usize> = real.iter().map(|f| f.subject).collect();
        if ids.len() >= 2 && ids == gen.iter().map(|f| f.subject).collect::<Vec<_>>() {
            let r: Vec<Vec<f64>> = real.into_iter().map(|f| f.values).collect();
            let g: Vec<Vec<f64>> = gen.into_iter().map(|f| f.values).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = report.section("fingerprint");
            s.put("kind", kind.name()).put("subjects", ids.len());
            s.put_f64("top1", analysis::topk_identify(&r, &g, 1)?);
            if ids.len() >= 3 {
                s.put_opt("consistency", analysis::consistency_score(&r, &g)?);
                s.put_f64("p_permutation", analysis::permutation_pvalue(&r, &g, 1000, &mut rng)?);
            }
        }
    }
    if states > 0 {
        let lags: Vec<isize> = (-half_lags..=half_lags).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rec = signals.recordings.first().ok_or_else(|| Error::Input("no recordings".into()))?;
        if burst_channel >= rec.channels {
            bail!(Config, "burst_channel {} outside {} channels", burst_channel, rec.channels);
        }
        let x = bursts::standardise(rec.channel(burst_channel));
        let data = bursts::tde_embed(&x, &lags, burst_channel)?;
        let fit = bursts::hmm_fit(&data, states, burst_iter, 1e-7, &mut rng)?;
        let tc = bursts::infer_states(&fit.model, &data)?;
        let stats = bursts::burst_stats(&tc.path, states, signals.fs)?;
        let s = report.section("bursts");
        s.put("states", states).put("channel", burst_channel).put("iterations", fit.log_likelihood.len() - 1);
        s.put_f64("log_likelihood", *fit.log_likelihood.last().unwrap());
        for (k, st) in stats.iter().enumerate() {
            s.put_f64(format!("state{k}.rate_per_s"), st.rate_per_s);
            s.put_opt(format!("state{k}.mean_interval_s"), st.mean_interval_s);
            s.put_opt(format!("state{k}.mean_lifetime_s"), st.mean_lifetime_s);
        }
        let path = TokenRecording::new(rec.subject, rec.session, 1, tc.path.len(), tc.path.iter().map(|&k| k as u16).collect())?;
        write_token_corpus(&out.join("states"), &TokenCorpus { k_star: states, recordings: vec![path] })?;
    }
    Ok(())
}
