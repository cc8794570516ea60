//! Python bindings. Images cross the boundary as nested `[H][W][3]` lists of
//! floats in `[0, 1]`; embeddings and scan inputs as plain lists.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ssmstyle_core::autodiff::GradCheckOptions;
use ssmstyle_core::gradcheck::{self, Module, Selection};
use ssmstyle_core::losses::{self, PromptContext};
use ssmstyle_core::metrics::{self, EvalReport};
use ssmstyle_core::models::{Embedders, DEFAULT_MODEL_SEED};
use ssmstyle_core::train::{self, RunConfig, TraceRow};
use ssmstyle_core::{bench, fixtures, imageio, ssm, Error, Tensor};

create_exception!(ssmstyle, SsmstyleError, PyException, "Numeric, contract or state failure.");
create_exception!(ssmstyle, DegeneratePromptError, SsmstyleError, "Prompt whose text direction vanishes.");

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::DegeneratePrompt(_) => DegeneratePromptError::new_err(msg),
        Error::Io { .. } => PyOSError::new_err(msg),
        Error::Numeric(_) | Error::Contract(_) | Error::State(_) => SsmstyleError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for ssmstyle_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

type Image = Vec<Vec<Vec<f64>>>;

fn image_in(img: Image) -> PyResult<Tensor> {
    let h = img.len();
    let w = img.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(h * w * 3);
    for row in &img {
        if row.len() != w {
            return Err(PyValueError::new_err("image rows differ in length"));
        }
        for px in row {
            if px.len() != 3 {
                return Err(PyValueError::new_err("pixels must have 3 channels"));
            }
            data.extend_from_slice(px);
        }
    }
    let t = Tensor::new(&[h, w, 3], data).py()?;
    ssmstyle_core::models::check_image(&t).py()?;
    Ok(t)
}

fn image_out(t: &Tensor) -> Image {
    let w = t.shape()[1];
    t.data().chunks(w * 3).map(|row| row.chunks(3).map(<[f64]>::to_vec).collect()).collect()
}

fn vector(v: Vec<f64>) -> Tensor {
    Tensor::from_vec(v)
}

fn lanes_in(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let lanes = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != lanes) {
        return Err(PyValueError::new_err("scan rows differ in length"));
    }
    Tensor::new(&[rows.len(), lanes], rows.concat()).py()
}

fn lanes_out(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1].max(1)).map(<[f64]>::to_vec).collect()
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("clip_score_analog", r.clip_score_analog)?;
    d.set_item("ssim", r.ssim)?;
    d.set_item("feature_loss", r.feature_loss)?;
    let t = PyDict::new(py);
    t.set_item("pretrain_ms", r.wall_time_ms.pretrain_ms)?;
    t.set_item("train_ms", r.wall_time_ms.train_ms)?;
    t.set_item("eval_ms", r.wall_time_ms.eval_ms)?;
    d.set_item("wall_time_ms", t)?;
    Ok(d)
}

fn row_dict<'py>(py: Python<'py>, r: &TraceRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", r.epoch)?;
    d.set_item("l_dir", r.l_dir)?;
    d.set_item("l_md", r.l_md)?;
    d.set_item("l_so", r.l_so)?;
    d.set_item("content", r.content)?;
    d.set_item("total", r.total)?;
    d.set_item("lr", r.lr)?;
    d.set_item("content_weight", r.content_weight)?;
    d.set_item("patches_dropped", r.patches_dropped)?;
    d.set_item("patches_total", r.patches_total)?;
    d.set_item("grad_norm", r.grad_norm)?;
    Ok(d)
}

/// Run configuration; build from JSON or take the defaults.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(j) => RunConfig::from_json(j).py()?,
            None => RunConfig::default(),
        };
        Ok(PyRunConfig { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().py()
    }

    #[getter]
    fn prompts(&self) -> Vec<String> {
        self.inner.prompts.clone()
    }

    #[setter]
    fn set_prompts(&mut self, prompts: Vec<String>) {
        self.inner.prompts = prompts;
    }

    #[getter]
    fn max_epochs(&self) -> usize {
        self.inner.schedule.max_epochs
    }

    #[setter]
    fn set_max_epochs(&mut self, n: usize) {
        self.inner.schedule.max_epochs = n;
    }

    #[getter]
    fn content(&self) -> Option<String> {
        self.inner.content.as_ref().map(|p| p.display().to_string())
    }

    #[setter]
    fn set_content(&mut self, path: Option<String>) {
        self.inner.content = path.map(Into::into);
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(prompts={:?}, max_epochs={})", self.inner.prompts, self.inner.schedule.max_epochs)
    }
}

/// One stylization run. Construction pretrains the autoencoder unless the
/// config names saved weights.
#[pyclass(name = "Session")]
struct PySession {
    inner: train::Session,
}

#[pymethods]
impl PySession {
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(py: Python<'_>, config: Option<PyRunConfig>) -> PyResult<Self> {
        let cfg = config.map_or_else(RunConfig::default, |c| c.inner);
        let inner = py.detach(|| train::Session::new(cfg)).py()?;
        Ok(PySession { inner })
    }

    /// One epoch; returns its trace row.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let row = self.inner.step().py()?.clone();
        row_dict(py, &row)
    }

    fn run(&mut self, py: Python<'_>) -> PyResult<()> {
        let inner = &mut self.inner;
        py.detach(|| inner.run()).py()
    }

    #[getter]
    fn finished(&self) -> bool {
        self.inner.finished()
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.state().epoch
    }

    #[getter]
    fn trace<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner.state().trace.iter().map(|r| row_dict(py, r)).collect()
    }

    fn trace_csv(&self) -> String {
        train::trace_csv(&self.inner.state().trace)
    }

    fn stylized(&self) -> PyResult<Image> {
        Ok(image_out(&self.inner.stylized().py()?))
    }

    fn save_image(&self, path: &str) -> PyResult<()> {
        imageio::write_image(path.as_ref(), &self.inner.stylized().py()?).py()
    }

    fn evaluate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        report_dict(py, &self.inner.evaluate().py()?)
    }
}

/// The frozen text and image embedders.
#[pyclass(name = "Embedders")]
struct PyEmbedders {
    inner: Embedders,
}

#[pymethods]
impl PyEmbedders {
    #[new]
    #[pyo3(signature = (seed=DEFAULT_MODEL_SEED))]
    fn new(seed: u64) -> Self {
        PyEmbedders { inner: Embedders::new(seed) }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn embed_text(&self, prompt: &str) -> PyResult<Vec<f64>> {
        Ok(self.inner.text.embed(prompt).py()?.into_data())
    }

    fn embed_image(&self, image: Image) -> PyResult<Vec<f64>> {
        Ok(self.inner.image.embed(&image_in(image)?).py()?.into_data())
    }

    fn feature_loss(&self, x: Image, y: Image) -> PyResult<f64> {
        metrics::feature_loss_metric(&self.inner.image, &image_in(x)?, &image_in(y)?).py()
    }
}

#[pyfunction]
fn read_image(path: &str) -> PyResult<Image> {
    Ok(image_out(&imageio::read_image(path.as_ref()).py()?))
}

#[pyfunction]
fn write_image(path: &str, image: Image) -> PyResult<()> {
    imageio::write_image(path.as_ref(), &image_in(image)?).py()
}

/// The bundled 64x64 content image.
#[pyfunction]
fn fixture_image() -> Image {
    image_out(&fixtures::content_image())
}

#[pyfunction]
fn ssim(x: Image, y: Image) -> PyResult<f64> {
    metrics::ssim(&image_in(x)?, &image_in(y)?).py()
}

#[pyfunction]
fn similarity_score(t_emb: Vec<f64>, y_emb: Vec<f64>) -> PyResult<f64> {
    metrics::similarity_score(&vector(t_emb), &vector(y_emb)).py()
}

#[pyfunction]
fn directional_loss(t_emb: Vec<f64>, t_src_emb: Vec<f64>, x_emb: Vec<f64>, y_emb: Vec<f64>) -> PyResult<f64> {
    let ctx = PromptContext::new(vector(t_emb), vector(t_src_emb), vector(x_emb)).py()?;
    losses::directional_loss(&ctx, &vector(y_emb)).py()
}

#[pyfunction]
#[pyo3(signature = (emb, x_emb, alpha=1.0, beta=1.0))]
fn alpha_shift(emb: Vec<f64>, x_emb: Vec<f64>, alpha: f64, beta: f64) -> PyResult<f64> {
    losses::alpha_shift(&vector(emb), &vector(x_emb), alpha, beta).py()
}

/// `h_t = a_t * h_{t-1} + b_t` over `[L][lanes]` lists, left to right.
#[pyfunction]
fn scan_sequential(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(lanes_out(&ssm::scan_sequential(&lanes_in(a)?, &lanes_in(b)?).py()?))
}

#[pyfunction]
fn scan_parallel(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(lanes_out(&ssm::scan_parallel(&lanes_in(a)?, &lanes_in(b)?).py()?))
}

/// Finite-difference check of the registered ops; one dict per op.
#[pyfunction]
#[pyo3(signature = (module="all", seed=0, instances=gradcheck::DEFAULT_INSTANCES))]
fn run_gradcheck<'py>(py: Python<'py>, module: &str, seed: u64, instances: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let sel: Selection = module.parse().py()?;
    let cases = gradcheck::select(sel);
    let report = py.detach(|| gradcheck::run_suite(&cases, seed, instances, &GradCheckOptions::default()));
    report
        .cases
        .iter()
        .map(|c| {
            let d = PyDict::new(py);
            d.set_item("name", c.name)?;
            d.set_item("module", c.module.name())?;
            d.set_item("max_rel_error", c.max_rel_error)?;
            d.set_item("instances", c.instances)?;
            d.set_item("passed", c.passed)?;
            d.set_item("error", c.error.clone())?;
            Ok(d)
        })
        .collect()
}

/// Wall-time CSV of the scans and cross-attention.
#[pyfunction]
#[pyo3(signature = (max_len=1024, channels=16, reps=3, seed=0))]
fn bench_scan(py: Python<'_>, max_len: usize, channels: usize, reps: usize, seed: u64) -> PyResult<String> {
    let rows = py.detach(|| bench::bench_scan(max_len, channels, reps, seed)).py()?;
    Ok(bench::bench_csv(&rows))
}

#[pymodule]
fn ssmstyle(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("SsmstyleError", py.get_type::<SsmstyleError>())?;
    m.add("DegeneratePromptError", py.get_type::<DegeneratePromptError>())?;
    m.add("SOURCE_PROMPT", ssmstyle_core::models::SOURCE_PROMPT)?;
    m.add("STYLE_PROMPT", fixtures::STYLE_PROMPT)?;
    m.add("MODULES", Module::ALL.iter().map(|m| m.name()).collect::<Vec<_>>())?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PySession>()?;
    m.add_class::<PyEmbedders>()?;
    m.add_function(wrap_pyfunction!(read_image, m)?)?;
    m.add_function(wrap_pyfunction!(write_image, m)?)?;
    m.add_function(wrap_pyfunction!(fixture_image, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_score, m)?)?;
    m.add_function(wrap_pyfunction!(directional_loss, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_shift, m)?)?;
    m.add_function(wrap_pyfunction!(scan_sequential, m)?)?;
    m.add_function(wrap_pyfunction!(scan_parallel, m)?)?;
    m.add_function(wrap_pyfunction!(run_gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(bench_scan, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip() {
        let t = fixtures::content_image();
        let back = image_in(image_out(&t)).unwrap();
        assert!(back.bitwise_eq(&t));
    }

    #[test]
    fn ragged_or_out_of_range_images_rejected() {
        assert!(image_in(vec![vec![vec![0.0; 3]; 2], vec![vec![0.0; 3]; 1]]).is_err());
        assert!(image_in(vec![vec![vec![0.0; 2]]]).is_err());
        assert!(image_in(vec![vec![vec![1.5, 0.0, 0.0]]]).is_err());
    }

    #[test]
    fn lanes_round_trip() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let t = lanes_in(rows.clone()).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(lanes_out(&t), rows);
        assert!(lanes_in(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
