//! Python bindings: the main types and operations of the diffusion lab,
//! exposed as plain-data classes and functions over `list[float]` buffers.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use dtl::dataset;
use dtl::denoiser;
use dtl::diffusion;
use dtl::embedding;
use dtl::imageops;
use dtl::schedule;
use dtl::trajectory;

fn err(e: dtl::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Flat tensor with an explicit shape.
#[pyclass(name = "Sample")]
#[derive(Clone)]
struct PySample {
    inner: dtl::Sample,
}

#[pymethods]
impl PySample {
    #[new]
    fn new(shape: Vec<usize>, values: Vec<f64>) -> PyResult<Self> {
        Ok(PySample {
            inner: dtl::Sample::new(shape, values).map_err(err)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PySample {
            inner: dtl::Sample::zeros(&shape),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn mse(&self, other: &PySample) -> PyResult<f64> {
        self.inner.mse(&other.inner).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Sample(shape={:?})", self.inner.shape())
    }
}

/// Seeded, platform-stable random stream.
#[pyclass(name = "RngStream")]
struct PyRngStream {
    inner: dtl::RngStream,
}

#[pymethods]
impl PyRngStream {
    #[new]
    fn new(seed: u64) -> Self {
        PyRngStream {
            inner: dtl::RngStream::new(seed),
        }
    }

    fn normal(&mut self) -> f64 {
        self.inner.next_normal()
    }

    fn normal_sample(&mut self, shape: Vec<usize>) -> PySample {
        PySample {
            inner: self.inner.normal_sample(&shape),
        }
    }

    #[getter]
    fn counter(&self) -> u64 {
        self.inner.counter()
    }
}

/// Noise schedule over `t = 1..=T` with `alpha_bar(0) = 1`.
#[pyclass(name = "NoiseSchedule")]
#[derive(Clone)]
struct PySchedule {
    inner: schedule::NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (kind, timesteps, beta_start=1e-4, beta_end=0.02, cosine_offset=0.008))]
    fn new(
        kind: &str,
        timesteps: usize,
        beta_start: f64,
        beta_end: f64,
        cosine_offset: f64,
    ) -> PyResult<Self> {
        let kind = match kind {
            "linear" => schedule::ScheduleKind::Linear,
            "quadratic" => schedule::ScheduleKind::Quadratic,
            "cosine" => schedule::ScheduleKind::Cosine,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown schedule kind '{other}'"
                )))
            }
        };
        let spec = schedule::ScheduleSpec {
            kind,
            timesteps,
            beta_start,
            beta_end,
            cosine_offset,
        };
        Ok(PySchedule {
            inner: schedule::build_schedule(&spec).map_err(err)?,
        })
    }

    #[getter]
    fn timesteps(&self) -> usize {
        self.inner.timesteps()
    }

    fn alpha(&self, t: usize) -> PyResult<f64> {
        self.inner.check_t_py(t)?;
        Ok(self.inner.alpha(t))
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        if t > self.inner.timesteps() {
            return Err(PyValueError::new_err(format!("t {t} out of range")));
        }
        Ok(self.inner.alpha_bar(t))
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.inner.check_t_py(t)?;
        Ok(self.inner.beta(t))
    }

    fn beta_tilde(&self, t: usize) -> PyResult<f64> {
        self.inner.check_t_py(t)?;
        Ok(self.inner.beta_tilde(t))
    }

    fn sigma(&self, t: usize, eta: f64) -> PyResult<f64> {
        self.inner.sigma(t, eta).map_err(err)
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }
}

trait CheckTPy {
    fn check_t_py(&self, t: usize) -> PyResult<()>;
}

impl CheckTPy for schedule::NoiseSchedule {
    fn check_t_py(&self, t: usize) -> PyResult<()> {
        if t == 0 || t > self.timesteps() {
            Err(PyValueError::new_err(format!(
                "timestep {t} out of range 1..={}",
                self.timesteps()
            )))
        } else {
            Ok(())
        }
    }
}

/// Noise predictor backed by an analytic Gaussian mixture.
#[pyclass(name = "Denoiser")]
#[derive(Clone)]
struct PyDenoiser {
    inner: denoiser::DenoiserModel,
}

#[pymethods]
impl PyDenoiser {
    #[staticmethod]
    fn mixture(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> PyResult<Self> {
        let mix = denoiser::GaussianMixture::new(weights, means, variances).map_err(err)?;
        Ok(PyDenoiser {
            inner: denoiser::DenoiserModel::AnalyticMixture(mix),
        })
    }

    #[staticmethod]
    fn from_dir(path: &str) -> PyResult<Self> {
        let params = denoiser::MlpParams::load_dir(path).map_err(err)?;
        Ok(PyDenoiser {
            inner: denoiser::DenoiserModel::Mlp(params),
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn predict_eps(&self, xt: &PySample, alpha_bar: f64) -> PyResult<PySample> {
        Ok(PySample {
            inner: self.inner.predict_eps(&xt.inner, alpha_bar).map_err(err)?,
        })
    }
}

#[pyfunction]
fn forward_diffuse(
    x0: &PySample,
    sched: &PySchedule,
    t: usize,
    eps: &PySample,
) -> PyResult<PySample> {
    Ok(PySample {
        inner: diffusion::forward_diffuse(&x0.inner, &sched.inner, t, &eps.inner).map_err(err)?,
    })
}

#[pyfunction]
fn posterior_mean(
    x0: &PySample,
    xt: &PySample,
    sched: &PySchedule,
    t: usize,
) -> PyResult<PySample> {
    Ok(PySample {
        inner: diffusion::posterior_mean(&x0.inner, &xt.inner, &sched.inner, t).map_err(err)?,
    })
}

#[pyfunction]
fn ddpm_sample(
    model: &PyDenoiser,
    sched: &PySchedule,
    shape: Vec<usize>,
    rng: &mut PyRngStream,
) -> PyResult<PySample> {
    Ok(PySample {
        inner: diffusion::ddpm_sample(&model.inner, &sched.inner, &shape, &mut rng.inner)
            .map_err(err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (model, sched, latent, eta=0.0, seed=0))]
fn ddim_sample(
    model: &PyDenoiser,
    sched: &PySchedule,
    latent: &PySample,
    eta: f64,
    seed: u64,
) -> PyResult<PySample> {
    let mut rng = dtl::RngStream::new(seed);
    Ok(PySample {
        inner: diffusion::ddim_sample(&model.inner, &sched.inner, &latent.inner, eta, &mut rng)
            .map_err(err)?,
    })
}

#[pyfunction]
fn invert_ode(model: &PyDenoiser, sched: &PySchedule, x0: &PySample) -> PyResult<PySample> {
    Ok(PySample {
        inner: embedding::invert_ode(&model.inner, &sched.inner, &x0.inner).map_err(err)?,
    })
}

/// Least-squares line through `(theta, centroid)` pairs. Returns a dict with
/// base, unit direction, per-degree speed and residual RMS.
#[pyfunction]
fn fit_line(
    py: Python<'_>,
    thetas: Vec<f64>,
    centroids: Vec<Vec<f64>>,
) -> PyResult<Py<pyo3::types::PyDict>> {
    if thetas.len() != centroids.len() {
        return Err(PyValueError::new_err("thetas and centroids differ in length"));
    }
    let pairs: Vec<(f64, dtl::Sample)> = thetas
        .into_iter()
        .zip(centroids)
        .map(|(t, c)| Ok((t, dtl::Sample::from_vec(c).map_err(err)?)))
        .collect::<PyResult<_>>()?;
    let fit = trajectory::fit_line(&pairs).map_err(err)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("base", fit.base.values().to_vec())?;
    out.set_item("direction", fit.direction.values().to_vec())?;
    out.set_item("speed", fit.speed)?;
    out.set_item("reference_theta", fit.reference_theta)?;
    out.set_item("residual_rms", fit.residual_rms)?;
    Ok(out.into())
}

/// Pairwise cosine similarities between unit direction vectors.
#[pyfunction]
fn cosine_matrix(directions: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let n = directions.len();
    if n < 2 {
        return Err(PyValueError::new_err("need at least two directions"));
    }
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if directions[i].len() != directions[j].len() {
                return Err(PyValueError::new_err("direction dimensions differ"));
            }
            let dot: f64 = directions[i].iter().zip(&directions[j]).map(|(a, b)| a * b).sum();
            let na: f64 = directions[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = directions[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(PyValueError::new_err("zero direction"));
            }
            out[i][j] = (dot / (na * nb)).clamp(-1.0, 1.0);
        }
    }
    Ok(out)
}

/// Horizontal flip with consistent label inversion; returns
/// `(values, yaw, roll, light)`.
#[pyfunction]
fn flip_sample(
    shape: Vec<usize>,
    values: Vec<f64>,
    yaw: f64,
    roll: f64,
    light: &str,
) -> PyResult<(Vec<f64>, f64, f64, String)> {
    let light = dataset::Light::parse(light)
        .ok_or_else(|| PyValueError::new_err("light must be LEFT, CENTER or RIGHT"))?;
    let record = dataset::DatasetRecord {
        id: String::new(),
        sample: dtl::Sample::new(shape, values).map_err(err)?,
        yaw,
        pitch: 0.0,
        roll,
        light,
        attrs: Default::default(),
    };
    let flipped = dataset::flip_record(&record).map_err(err)?;
    Ok((
        flipped.sample.values().to_vec(),
        flipped.yaw,
        flipped.roll,
        flipped.light.as_str().to_string(),
    ))
}

/// Lab color transfer on interleaved RGB buffers in [0, 1]. Returns the
/// corrected buffer and the clipped-value count.
#[pyfunction]
fn color_correct(
    height: usize,
    width: usize,
    target: Vec<f64>,
    source: Vec<f64>,
) -> PyResult<(Vec<f64>, usize)> {
    let t = imageops::RgbImage::new(height, width, target).map_err(err)?;
    let s = imageops::RgbImage::new(height, width, source).map_err(err)?;
    let (out, clipped) = imageops::color_correct(&t, &s, None).map_err(err)?;
    Ok((out.data().to_vec(), clipped))
}

/// RGB -> Lab for a single pixel.
#[pyfunction]
fn rgb_to_lab(r: f64, g: f64, b: f64) -> PyResult<(f64, f64, f64)> {
    let img = imageops::RgbImage::new(1, 1, vec![r, g, b]).map_err(err)?;
    let px = imageops::rgb_to_lab(&img).pixel(0, 0);
    Ok((px[0], px[1], px[2]))
}

#[pymodule]
fn dtl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySample>()?;
    m.add_class::<PyRngStream>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyDenoiser>()?;
    m.add_function(wrap_pyfunction!(forward_diffuse, m)?)?;
    m.add_function(wrap_pyfunction!(posterior_mean, m)?)?;
    m.add_function(wrap_pyfunction!(ddpm_sample, m)?)?;
    m.add_function(wrap_pyfunction!(ddim_sample, m)?)?;
    m.add_function(wrap_pyfunction!(invert_ode, m)?)?;
    m.add_function(wrap_pyfunction!(fit_line, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(flip_sample, m)?)?;
    m.add_function(wrap_pyfunction!(color_correct, m)?)?;
    m.add_function(wrap_pyfunction!(rgb_to_lab, m)?)?;
    Ok(())
}
