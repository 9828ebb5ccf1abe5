//! Python bindings for `meg_core`.
//!
//! Signals cross the boundary as nested lists: a recording is a list of
//! channels, each a list of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use meg_core::analysis::welch_psd;
use meg_core::bursts;
use meg_core::data::{Recording, SignalSet, TokenCorpus, TokenRecording};
use meg_core::decoding::{self, ClassifierConfig, Features};
use meg_core::gpt::{GptConfig, GptModel};
use meg_core::sampler::{generate_tokens, GenerationConfig};
use meg_core::tokeniser::{pve_signals, train_tokeniser, TokeniserConfig, TokeniserModel};
use meg_core::workbench::{cli, formats, models, synth_dataset, SynthSpec};
use meg_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) | Error::IllConditioned(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for meg_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn recording_from(subject: usize, session: usize, channels: Vec<Vec<f32>>) -> PyResult<Recording> {
    Recording::from_channels(subject, session, &channels).py()
}

/// Multi-subject recordings at one sampling rate.
#[pyclass(name = "SignalSet", module = "meg")]
pub struct PySignalSet {
    inner: SignalSet,
}

#[pymethods]
impl PySignalSet {
    /// `recordings` is a list of `(subject, session, channels)` tuples.
    #[new]
    fn new(fs: f64, recordings: Vec<(usize, usize, Vec<Vec<f32>>)>) -> PyResult<Self> {
        let recs = recordings.into_iter().map(|(s, e, c)| recording_from(s, e, c)).collect::<PyResult<Vec<_>>>()?;
        Ok(PySignalSet { inner: SignalSet::new(fs, recs) })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PySignalSet { inner: formats::read_signal_set(&path).py()? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        formats::write_signal_set(&path, &self.inner).py()
    }

    #[getter]
    fn fs(&self) -> f64 {
        self.inner.fs
    }

    fn __len__(&self) -> usize {
        self.inner.recordings.len()
    }

    fn subjects(&self) -> Vec<usize> {
        self.inner.subjects()
    }

    /// `(subject, session, channels)` of recording `i`.
    fn recording(&self, i: usize) -> PyResult<(usize, usize, Vec<Vec<f32>>)> {
        let r = self.inner.recordings.get(i).ok_or_else(|| PyValueError::new_err(format!("no recording {i}")))?;
        Ok((r.subject, r.session, r.channels_iter().map(<[f32]>::to_vec).collect()))
    }

    fn __repr__(&self) -> String {
        format!("SignalSet(fs={}, recordings={})", self.inner.fs, self.inner.recordings.len())
    }
}

/// Token labels of several recordings sharing one vocabulary.
#[pyclass(name = "TokenCorpus", module = "meg")]
pub struct PyTokenCorpus {
    inner: TokenCorpus,
}

#[pymethods]
impl PyTokenCorpus {
    #[new]
    fn new(k_star: usize, recordings: Vec<(usize, usize, Vec<Vec<u16>>)>) -> PyResult<Self> {
        let recs = recordings
            .into_iter()
            .map(|(s, e, chans)| {
                let samples = chans.first().map_or(0, Vec::len);
                TokenRecording::new(s, e, chans.len(), samples, chans.concat()).py()
            })
            .collect::<PyResult<Vec<_>>>()?;
        let inner = TokenCorpus { k_star, recordings: recs };
        inner.validate().py()?;
        Ok(PyTokenCorpus { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PyTokenCorpus { inner: formats::read_token_corpus(&path).py()? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        formats::write_token_corpus(&path, &self.inner).py()
    }

    #[getter]
    fn k_star(&self) -> usize {
        self.inner.k_star
    }

    fn __len__(&self) -> usize {
        self.inner.recordings.len()
    }

    fn frequencies(&self) -> Vec<f64> {
        self.inner.frequencies()
    }

    fn recording(&self, i: usize) -> PyResult<(usize, usize, Vec<Vec<u16>>)> {
        let r = self.inner.recordings.get(i).ok_or_else(|| PyValueError::new_err(format!("no recording {i}")))?;
        Ok((r.subject, r.session, (0..r.channels).map(|c| r.channel(c).to_vec()).collect()))
    }
}

/// Trained signal tokeniser.
#[pyclass(name = "Tokeniser", module = "meg")]
pub struct PyTokeniser {
    inner: TokeniserModel,
}

#[pymethods]
impl PyTokeniser {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyTokeniser { inner: models::load_tokeniser(&path).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        models::save_tokeniser(&path, &self.inner).py()
    }

    #[getter]
    fn k_star(&self) -> usize {
        self.inner.k_star()
    }

    fn tokenise(&self, signal: Vec<f32>) -> PyResult<Vec<u16>> {
        self.inner.tokenise(&signal).py()
    }

    fn detokenise(&self, labels: Vec<u16>) -> PyResult<Vec<f32>> {
        self.inner.detokenise(&labels).py()
    }

    fn reconstruct(&self, signal: Vec<f32>) -> PyResult<Vec<f32>> {
        self.inner.reconstruct(&signal).py()
    }

    fn tokenise_set(&self, signals: &PySignalSet) -> PyResult<PyTokenCorpus> {
        Ok(PyTokenCorpus { inner: cli::tokenise_set(&self.inner, &signals.inner).py()? })
    }

    /// Percentage of variance explained on `signals`; `None` for constant data.
    fn pve(&self, signals: &PySignalSet) -> PyResult<Option<f64>> {
        let recs = signals
            .inner
            .recordings
            .iter()
            .map(|r| {
                let chans = r.channels_iter().map(|c| self.inner.reconstruct(c)).collect::<meg_core::Result<Vec<_>>>()?;
                Recording::from_channels(r.subject, r.session, &chans)
            })
            .collect::<meg_core::Result<Vec<_>>>()
            .py()?;
        pve_signals(&signals.inner, &SignalSet::new(signals.inner.fs, recs)).py()
    }
}

/// Trains a tokeniser and fits its label refactoring on the same data.
#[pyfunction]
#[pyo3(signature = (signals, vocab=None, epochs=None, batches_per_epoch=None, seed=0))]
fn train_tokeniser_py(signals: &PySignalSet, vocab: Option<usize>, epochs: Option<usize>, batches_per_epoch: Option<usize>, seed: u64) -> PyResult<PyTokeniser> {
    let d = TokeniserConfig::desk();
    let config = TokeniserConfig {
        vocab: vocab.unwrap_or(d.vocab),
        epochs: epochs.unwrap_or(d.epochs),
        batches_per_epoch: batches_per_epoch.or(d.batches_per_epoch),
        ..d
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut model, _) = train_tokeniser(&signals.inner, &config, &mut rng).py()?;
    model.fit_refactor(&signals.inner).py()?;
    Ok(PyTokeniser { inner: model })
}

/// Trained token transformer.
#[pyclass(name = "Gpt", module = "meg")]
pub struct PyGpt {
    inner: GptModel,
}

#[pymethods]
impl PyGpt {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyGpt { inner: models::load_gpt(&path).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        models::save_gpt(&path, &self.inner).py()
    }

    #[getter]
    fn context(&self) -> usize {
        self.inner.config.l
    }

    fn parameter_count(&self) -> usize {
        self.inner.params.numel()
    }

    /// Samples `steps` new tokens per channel.
    #[pyo3(signature = (frequencies, steps, top_p=0.99, subject=None, seed=0))]
    fn generate(&self, frequencies: Vec<f64>, steps: usize, top_p: f64, subject: Option<usize>, seed: u64) -> PyResult<Vec<Vec<u16>>> {
        let cfg = GenerationConfig { top_p, steps, subject, seed };
        let rec = generate_tokens(&self.inner, &frequencies, &cfg).py()?;
        Ok((0..rec.channels).map(|c| rec.channel(c).to_vec()).collect())
    }
}

/// Trains the desk-sized transformer on `tokens`.
#[pyfunction]
#[pyo3(signature = (tokens, epochs=None, batches_per_epoch=None, seed=0))]
fn train_gpt_py(tokens: &PyTokenCorpus, epochs: Option<usize>, batches_per_epoch: Option<usize>, seed: u64) -> PyResult<PyGpt> {
    let c = &tokens.inner;
    let subjects = c.recordings.iter().map(|r| r.subject + 1).max().unwrap_or(0);
    let d = GptConfig::desk(c.k_star, c.channels(), subjects);
    let config = GptConfig { epochs: epochs.unwrap_or(d.epochs), batches_per_epoch: batches_per_epoch.or(d.batches_per_epoch), ..d };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, _) = meg_core::gpt::train_gpt(c, None, &config, &mut rng).py()?;
    Ok(PyGpt { inner: model })
}

/// Synthetic bursty 1/f recordings.
#[pyfunction]
#[pyo3(signature = (subjects=2, sessions=1, channels=4, duration_s=30.0, fs=250.0, seed=0))]
fn synth_data(subjects: usize, sessions: usize, channels: usize, duration_s: f64, fs: f64, seed: u64) -> PyResult<PySignalSet> {
    let spec = SynthSpec { subjects, sessions, channels, duration_s, fs, seed, ..SynthSpec::default() };
    Ok(PySignalSet { inner: synth_dataset(&spec).py()?.signals })
}

/// Welch PSD: `(freqs, power[channel][freq])`.
#[pyfunction]
#[pyo3(signature = (channels, fs, window_s=2.0, overlap=0.5))]
fn welch(channels: Vec<Vec<f32>>, fs: f64, window_s: f64, overlap: f64) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let refs: Vec<&[f32]> = channels.iter().map(Vec::as_slice).collect();
    let psd = welch_psd(&refs, fs, window_s, overlap).py()?;
    Ok((psd.freqs, psd.power))
}

/// Fits a time-delay-embedded HMM to one series. Returns the posterior argmax
/// path and per-state `(rate_per_s, mean_lifetime_s)`.
#[pyfunction]
#[pyo3(signature = (series, fs, states=2, n_iter=100, seed=0))]
fn burst_states(series: Vec<f32>, fs: f64, states: usize, n_iter: usize, seed: u64) -> PyResult<(Vec<usize>, Vec<(f64, Option<f64>)>)> {
    let x = bursts::standardise(&series);
    let data = bursts::tde_embed(&x, &bursts::default_lags(), 0).py()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fit = bursts::hmm_fit(&data, states, n_iter, 1e-7, &mut rng).py()?;
    let tc = bursts::infer_states(&fit.model, &data).py()?;
    let stats = bursts::burst_stats(&tc.path, states, fs).py()?;
    Ok((tc.path, stats.into_iter().map(|s| (s.rate_per_s, s.mean_lifetime_s)).collect()))
}

/// Regularised multinomial logistic regression.
#[pyclass(name = "Classifier", module = "meg")]
pub struct PyClassifier {
    inner: decoding::Classifier,
}

fn features(rows: Vec<Vec<f64>>) -> PyResult<Features> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("feature rows differ in length"));
    }
    Features::new(rows.len(), cols, rows.concat()).py()
}

#[pymethods]
impl PyClassifier {
    #[new]
    #[pyo3(signature = (x, y, lam=1.0, max_iter=500))]
    fn new(x: Vec<Vec<f64>>, y: Vec<u8>, lam: f64, max_iter: usize) -> PyResult<Self> {
        let config = ClassifierConfig { lambda: lam, max_iter, ..ClassifierConfig::default() };
        Ok(PyClassifier { inner: decoding::train_classifier(&features(x)?, &y, &config).py()? })
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        Ok(self.inner.predict(&features(x)?).py()?.into_iter().map(usize::from).collect())
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }
}

/// Runs the `meg` command line with `args` (without the program name).
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    cli::run(std::iter::once("meg".to_string()).chain(args))
}

#[pymodule]
fn meg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySignalSet>()?;
    m.add_class::<PyTokenCorpus>()?;
    m.add_class::<PyTokeniser>()?;
    m.add_class::<PyGpt>()?;
    m.add_class::<PyClassifier>()?;
    m.add_function(wrap_pyfunction!(synth_data, m)?)?;
    m.add_function(wrap_pyfunction!(welch, m)?)?;
    m.add_function(wrap_pyfunction!(burst_states, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    let train_tok = wrap_pyfunction!(train_tokeniser_py, m)?;
    m.add("train_tokeniser", train_tok)?;
    let train_gpt = wrap_pyfunction!(train_gpt_py, m)?;
    m.add("train_gpt", train_gpt)?;
    Ok(())
}
