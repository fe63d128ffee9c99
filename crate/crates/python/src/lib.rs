//! Python bindings over `phydiff`.
//!
//! Arrays cross the boundary as flat lists plus explicit dims so the module has
//! no numpy dependency; `numpy.asarray(v.data).reshape(v.dims)` recovers an array.

use phydiff::config::RunConfig;
use phydiff::engine::{self, Stage};
use phydiff::metrics;
use phydiff::physics::{self, AdcForm, ScheduleMap};
use phydiff::volume_io::{self, Image};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(phydiff_py, PhydiffError, PyException);

fn err(e: phydiff::Error) -> PyErr {
    PhydiffError::new_err(e.to_string())
}

fn image(h: usize, w: usize, data: Vec<f64>) -> PyResult<Image> {
    Image::new(h, w, data).map_err(err)
}

/// A `(C, Z, H, W)` volume.
#[pyclass(name = "Volume", module = "phydiff_py", from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: volume_io::Volume,
}

#[pymethods]
impl PyVolume {
    #[new]
    fn new(dims: [usize; 4], data: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: volume_io::Volume::new(dims, data).map_err(err)? })
    }

    #[getter]
    fn dims(&self) -> [usize; 4] {
        self.inner.dims()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    /// One `(H, W)` image as a flat list.
    fn image(&self, c: usize, z: usize) -> PyResult<Vec<f64>> {
        let [nc, nz, _, _] = self.inner.dims();
        if c >= nc || z >= nz {
            return Err(err(phydiff::Error::Index(format!("({c}, {z}) outside ({nc}, {nz})"))));
        }
        Ok(self.inner.image(c, z).data)
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?})", self.inner.dims())
    }
}

#[pyfunction]
fn read_dvol(path: &str) -> PyResult<PyVolume> {
    Ok(PyVolume { inner: volume_io::read_dvol(path).map_err(err)? })
}

#[pyfunction]
fn write_dvol(path: &str, volume: &PyVolume) -> PyResult<()> {
    volume_io::write_dvol(path, &volume.inner).map_err(err)
}

/// Returns `(bvals, bvecs)` from FSL-style text files.
#[pyfunction]
fn read_gradients(bvals_path: &str, bvecs_path: &str) -> PyResult<(Vec<f64>, Vec<[f64; 3]>)> {
    let t = volume_io::read_gradients(bvals_path, bvecs_path).map_err(err)?;
    Ok((t.bvals(), t.entries.iter().map(|g| g.bvec).collect()))
}

/// Per-voxel ADC atlas for one shell; returns `(dims (Z, H, W), values)`.
#[pyfunction]
#[pyo3(signature = (dwi, bvals, bvecs, shell, mean_form = false))]
fn adc_atlas(
    dwi: &PyVolume,
    bvals: Vec<f64>,
    bvecs: Vec<[f64; 3]>,
    shell: f64,
    mean_form: bool,
) -> PyResult<([usize; 3], Vec<f64>)> {
    let table = volume_io::GradientTable::from_pairs(&bvals, &bvecs).map_err(err)?;
    let stack = volume_io::DwiStack::new(dwi.inner.clone(), table).map_err(err)?;
    let form = if mean_form { AdcForm::Mean } else { AdcForm::Sum };
    let atlas = physics::estimate_adc_atlas(&stack, shell, form).map_err(err)?;
    Ok((atlas.dims, atlas.values))
}

/// Cumulative products `ᾱ_1..ᾱ_T` of the linear schedule.
#[pyfunction]
#[pyo3(signature = (steps = 1000, beta_start = physics::DEFAULT_BETA_START, beta_end = physics::DEFAULT_BETA_END))]
fn alpha_bars(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Vec<f64>> {
    Ok(physics::build_base_schedule(steps, beta_start, beta_end).map_err(err)?.alpha_bars)
}

/// Per-voxel schedule built from an ADC atlas.
#[pyclass(name = "ScheduleMap", module = "phydiff_py")]
struct PyScheduleMap {
    inner: ScheduleMap,
}

#[pymethods]
impl PyScheduleMap {
    #[new]
    #[pyo3(signature = (dims, adc, steps = 1000, beta_start = physics::DEFAULT_BETA_START,
        beta_end = physics::DEFAULT_BETA_END, kappa = physics::DEFAULT_KAPPA, delta = physics::DEFAULT_DELTA))]
    fn new(
        dims: [usize; 3],
        adc: Vec<f64>,
        steps: usize,
        beta_start: f64,
        beta_end: f64,
        kappa: f64,
        delta: f64,
    ) -> PyResult<Self> {
        if adc.len() != dims.iter().product::<usize>() {
            return Err(err(phydiff::Error::Shape(format!("dims {dims:?} vs {} values", adc.len()))));
        }
        let atlas = physics::AdcAtlas { values: adc, dims, shell_bval: 0.0, n_directions: 0 };
        let base = physics::build_base_schedule(steps, beta_start, beta_end).map_err(err)?;
        Ok(Self { inner: physics::build_schedule_map(&atlas, &base, kappa, delta).map_err(err)? })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims
    }

    fn phi(&self, t: usize, voxel: usize) -> PyResult<f64> {
        self.check(t)?;
        if voxel >= self.inner.exponents.len() {
            return Err(err(phydiff::Error::Index(format!("voxel {voxel}"))));
        }
        Ok(self.inner.phi(t, voxel))
    }

    fn phi_slice(&self, t: usize, slice: usize) -> PyResult<Vec<f64>> {
        self.check(t)?;
        if slice >= self.inner.dims[0] {
            return Err(err(phydiff::Error::Index(format!("slice {slice}"))));
        }
        Ok(self.inner.phi_slice(t, slice))
    }

    /// `x_t = sqrt(phi) x0 + sqrt(1 - phi) noise` over one slice.
    fn forward_noise(&self, x0: Vec<f64>, t: usize, slice: usize, noise: Vec<f64>) -> PyResult<Vec<f64>> {
        let phi = self.phi_slice(t, slice)?;
        physics::forward_noise(&x0, &phi, &noise).map_err(err)
    }

    /// One ancestral step from `t` to `t - 1`; `z` is omitted at the last step.
    #[pyo3(signature = (x_t, eps_hat, t, slice, z = None))]
    fn reverse_step(&self, x_t: Vec<f64>, eps_hat: Vec<f64>, t: usize, slice: usize, z: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
        let [_, h, w] = self.inner.dims;
        let z = z.map(|z| image(h, w, z)).transpose()?;
        let out = engine::reverse_step(&image(h, w, x_t)?, &image(h, w, eps_hat)?, t, &self.inner, slice, z.as_ref())
            .map_err(err)?;
        Ok(out.data)
    }
}

impl PyScheduleMap {
    fn check(&self, t: usize) -> PyResult<()> {
        if t > self.inner.steps() {
            return Err(err(phydiff::Error::Index(format!("t = {t} > T = {}", self.inner.steps()))));
        }
        Ok(())
    }
}

#[pyfunction]
fn ssim(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize) -> PyResult<f64> {
    metrics::ssim(&image(height, width, a)?, &image(height, width, b)?).map_err(err)
}

#[pyfunction]
fn psnr(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize) -> PyResult<f64> {
    metrics::psnr(&image(height, width, a)?, &image(height, width, b)?).map_err(err)
}

/// `(SSIM %, PSNR dB)` after rescaling both images by the reference range.
#[pyfunction]
fn evaluate_pair(pred: Vec<f64>, reference: Vec<f64>, height: usize, width: usize) -> PyResult<(f64, f64)> {
    metrics::evaluate_pair(&image(height, width, pred)?, &image(height, width, reference)?).map_err(err)
}

/// Layered run configuration (defaults, then file, then overrides).
#[pyclass(name = "RunConfig", module = "phydiff_py")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => RunConfig::parse(t).map_err(err)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    fn get(&self, key: &str) -> PyResult<String> {
        if !RunConfig::is_known(key) {
            return Err(err(phydiff::Error::Config(format!("unknown key {key}"))));
        }
        Ok(self.inner.get(key).to_string())
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn entries(&self) -> Vec<(String, String)> {
        self.inner.entries()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }
}

/// Summary of a checkpoint file: `(stage, step, [(name, rows, cols)])`.
#[pyfunction]
fn inspect_checkpoint(path: &str) -> PyResult<(String, usize, Vec<(String, usize, usize)>)> {
    let ck = engine::load_checkpoint(path).map_err(err)?;
    let params = ck.params.iter().map(|(n, t)| (n.to_string(), t.rows, t.cols)).collect();
    Ok((Stage::tag(ck.stage).to_string(), ck.step as usize, params))
}

/// Runs the command-line interface in-process and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| phydiff::cli::cli_main(&args))
}

#[pymodule]
fn phydiff_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PhydiffError", m.py().get_type::<PhydiffError>())?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PyScheduleMap>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(read_dvol, m)?)?;
    m.add_function(wrap_pyfunction!(write_dvol, m)?)?;
    m.add_function(wrap_pyfunction!(read_gradients, m)?)?;
    m.add_function(wrap_pyfunction!(adc_atlas, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_bars, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_pair, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
