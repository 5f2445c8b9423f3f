//! Python bindings: grammars, run configs, training, evaluation, sweeps and
//! reports. Structured results cross the boundary as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use compvae::experiments::{self, Profile};
use compvae::metrics::{accuracy, evaluate};
use compvae::model::{hard_decode, hard_encode, Message, Vae};
use compvae::{ConceptString, Error, GrammarSpec};

fn err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyArithmeticError::new_err(e.to_string()),
        3 => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn strings(g: &GrammarSpec, tokens: Vec<Vec<u32>>) -> PyResult<Vec<ConceptString>> {
    tokens
        .into_iter()
        .map(|t| ConceptString::new(g, t).map_err(err))
        .collect()
}

fn profile(name: &str) -> PyResult<Profile> {
    match name {
        "desk" => Ok(Profile::Desk),
        "paper" => Ok(Profile::Paper),
        _ => Err(PyValueError::new_err(format!("unknown profile {name:?}"))),
    }
}

/// Compositional language of `num_concepts` positions with
/// `values_per_concept` values each.
#[pyclass(name = "Grammar", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGrammar(GrammarSpec);

#[pymethods]
impl PyGrammar {
    #[new]
    fn new(num_concepts: usize, values_per_concept: usize) -> PyResult<Self> {
        GrammarSpec::new(num_concepts, values_per_concept)
            .map(PyGrammar)
            .map_err(err)
    }

    #[getter]
    fn num_concepts(&self) -> usize {
        self.0.num_concepts
    }

    #[getter]
    fn values_per_concept(&self) -> usize {
        self.0.values_per_concept
    }

    #[getter]
    fn alphabet_size(&self) -> usize {
        self.0.alphabet_size()
    }

    fn language_size(&self) -> PyResult<u64> {
        self.0.language_size().map_err(err)
    }

    fn min_channel_bits(&self) -> PyResult<u32> {
        self.0.min_channel_bits().map_err(err)
    }

    fn description_length(&self) -> usize {
        self.0.description_length()
    }

    fn is_member(&self, tokens: Vec<u32>) -> bool {
        self.0.is_member(&tokens)
    }

    fn concepts_of(&self, tokens: Vec<u32>) -> PyResult<Vec<u32>> {
        self.0.concepts_of_tokens(&tokens).map_err(err)
    }

    fn tokens_of(&self, values: Vec<u32>) -> PyResult<Vec<u32>> {
        self.0
            .tokens_of(&values)
            .map(|s| s.tokens().to_vec())
            .map_err(err)
    }

    #[pyo3(signature = (n, seed = 0))]
    fn sample(&self, n: usize, seed: u64) -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| self.0.sample_string(&mut rng).tokens().to_vec())
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Grammar({}, {})",
            self.0.num_concepts, self.0.values_per_concept
        )
    }
}

/// Configuration of one training run.
#[pyclass(name = "RunConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig(experiments::RunConfig);

#[pymethods]
impl PyRunConfig {
    #[staticmethod]
    #[pyo3(signature = (grammar, latent_bits, seed = 0, steps = 1000))]
    fn desk(grammar: &PyGrammar, latent_bits: usize, seed: u64, steps: u64) -> Self {
        PyRunConfig(experiments::RunConfig::desk(
            grammar.0,
            latent_bits,
            seed,
            steps,
        ))
    }

    #[staticmethod]
    #[pyo3(signature = (name, seed = 0))]
    fn profile(name: &str, seed: u64) -> PyResult<Self> {
        Ok(PyRunConfig(profile(name)?.run_config(seed)))
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        experiments::RunConfig::from_toml(text)
            .map(PyRunConfig)
            .map_err(err)
    }

    fn to_toml(&self) -> String {
        self.0.to_toml()
    }

    fn digest(&self) -> String {
        self.0.digest()
    }

    fn validate(&self) -> PyResult<()> {
        self.0.validate().map_err(err)
    }

    #[getter]
    fn grammar(&self) -> PyGrammar {
        PyGrammar(self.0.grammar)
    }

    #[getter]
    fn get_seed(&self) -> u64 {
        self.0.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.0.seed = v;
    }

    #[getter]
    fn get_steps(&self) -> u64 {
        self.0.steps
    }

    #[setter]
    fn set_steps(&mut self, v: u64) {
        self.0.steps = v;
    }

    #[getter]
    fn get_eval_every(&self) -> u64 {
        self.0.eval_every
    }

    #[setter]
    fn set_eval_every(&mut self, v: u64) {
        self.0.eval_every = v;
    }

    #[getter]
    fn get_latent_bits(&self) -> usize {
        self.0.model.latent_bits
    }

    #[setter]
    fn set_latent_bits(&mut self, v: usize) {
        self.0.model.latent_bits = v;
    }

    #[getter]
    fn get_alpha(&self) -> f64 {
        self.0.model.alpha
    }

    #[setter]
    fn set_alpha(&mut self, v: f64) {
        self.0.model.alpha = v;
    }

    /// Parameter counts by component.
    fn param_count<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.model.param_count(&self.0.grammar))
    }

    /// The train, val and test splits as token lists.
    fn splits<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let d = self.0.split.build(&self.0.grammar).map_err(err)?;
        let tok = |v: &[ConceptString]| v.iter().map(|s| s.tokens().to_vec()).collect::<Vec<_>>();
        let out = serde_json::json!({
            "train": tok(&d.train),
            "val": tok(&d.val),
            "test": tok(&d.test),
        });
        to_py(py, &out)
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(grammar={:?}, latent_bits={}, alpha={}, seed={}, steps={})",
            (
                self.0.grammar.num_concepts,
                self.0.grammar.values_per_concept
            ),
            self.0.model.latent_bits,
            self.0.model.alpha,
            self.0.seed,
            self.0.steps
        )
    }
}

/// A trained speaker, listener and prior.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    cfg: experiments::RunConfig,
    vae: Vae,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(run_dir: PathBuf) -> PyResult<Self> {
        let (cfg, vae) = experiments::load_model(&run_dir).map_err(err)?;
        Ok(PyModel { cfg, vae })
    }

    #[staticmethod]
    #[pyo3(signature = (config, seed = 0))]
    fn init(config: &PyRunConfig, seed: u64) -> PyResult<Self> {
        let vae = Vae::init(
            &config.0.grammar,
            &config.0.model,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .map_err(err)?;
        Ok(PyModel {
            cfg: config.0.clone(),
            vae,
        })
    }

    #[getter]
    fn config(&self) -> PyRunConfig {
        PyRunConfig(self.cfg.clone())
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.vae.tau()
    }

    fn prior_logits(&self) -> Vec<f64> {
        self.vae.prior_logits()
    }

    /// Greedy messages for token strings.
    fn encode(&self, tokens: Vec<Vec<u32>>) -> PyResult<Vec<Vec<u8>>> {
        let s = strings(&self.cfg.grammar, tokens)?;
        Ok(hard_encode(&self.vae, &s)
            .map_err(err)?
            .into_iter()
            .map(|m| m.bits().to_vec())
            .collect())
    }

    /// Greedy token strings for messages.
    fn decode(&self, messages: Vec<Vec<u8>>) -> PyResult<Vec<Vec<u32>>> {
        let m = messages
            .into_iter()
            .map(|b| Message::new(b).map_err(err))
            .collect::<PyResult<Vec<_>>>()?;
        hard_decode(&self.vae, &m).map_err(err)
    }

    fn accuracy(&self, tokens: Vec<Vec<u32>>) -> PyResult<f64> {
        let s = strings(&self.cfg.grammar, tokens)?;
        accuracy(&self.vae, &self.vae, &s).map_err(err)
    }

    /// Every metric on the run's own splits.
    #[pyo3(signature = (seed = 0))]
    fn evaluate<'py>(&self, py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let d = self.cfg.split.build(&self.cfg.grammar).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = evaluate(
            &self.vae,
            &self.cfg.grammar,
            &d.train,
            &d.val,
            &d.test,
            &self.cfg.eval,
            &mut rng,
        )
        .map_err(err)?;
        to_py(py, &r)
    }
}

/// Trains `config` into `out` and returns the run summary.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyRunConfig, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.0.clone();
    let result = py
        .detach(move || experiments::train_to_dir(&cfg, &out))
        .map_err(err)?;
    to_py(py, &result.summary)
}

/// Records written so far in a run directory.
#[pyfunction]
fn read_records<'py>(py: Python<'py>, run_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &experiments::read_records(&run_dir).map_err(err)?)
}

/// Runs a sweep from TOML text into `out`; returns (cells, new, failed).
#[pyfunction]
#[pyo3(signature = (toml, out, jobs = 1))]
fn sweep(py: Python<'_>, toml: &str, out: PathBuf, jobs: usize) -> PyResult<(usize, usize, usize)> {
    let cfg = experiments::SweepConfig::from_toml(toml).map_err(err)?;
    let o = py
        .detach(move || experiments::sweep(&cfg, &out, jobs))
        .map_err(err)?;
    Ok((o.cells.len(), o.new_runs(), o.failed()))
}

/// TOML of a built-in sweep.
#[pyfunction]
fn profile_sweep(name: &str) -> PyResult<String> {
    Ok(profile(name)?.sweep_config().to_toml())
}

/// Writes CSV and SVG reports for the runs under `records`.
#[pyfunction]
fn report(records: PathBuf, out: PathBuf) -> PyResult<Vec<String>> {
    let r = experiments::report(&records, &out).map_err(err)?;
    Ok(r.grids
        .iter()
        .map(|g| g.metric.name().to_string())
        .collect())
}

/// Scales whose parameter totals track `k` log-spaced targets.
#[pyfunction]
fn calibrate_alphas(
    config: &PyRunConfig,
    k: usize,
    min_count: usize,
    max_count: usize,
) -> PyResult<Vec<(f64, usize)>> {
    let pts =
        experiments::calibrate_alphas(&config.0.grammar, &config.0.model, k, min_count, max_count)
            .map_err(err)?;
    Ok(pts.into_iter().map(|p| (p.alpha, p.param_count)).collect())
}

#[pymodule]
fn pycompvae(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrammar>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(read_records, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(profile_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_alphas, m)?)?;
    Ok(())
}
