//! Python bindings. Volume data crosses the boundary as flat lists in x-fastest
//! order (`numpy.ravel(order="F")` of an `(X, Y, Z)` array).

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wdm3d::conditioning::{self, InpaintRequest, InpaintVariant, SynthRequest};
use wdm3d::denoiser::{
    AffineDenoiser, Denoiser, GaussianDataSpec, GaussianOracleDenoiser, GlobalPipeline,
};
use wdm3d::diffusion::{self, SamplerConfig, SamplerKind, Shape};
use wdm3d::maskgen::{self, BlobParams, MaskLibrary, MaskSource, PlacementPolicy};
use wdm3d::nifti::{self, Datatype, NiftiHeader};
use wdm3d::objectives::{self, LossWeights, Objective};
use wdm3d::schedule::{Schedule, ScheduleConfig, ScheduleKind};
use wdm3d::volume::{Dims, MaskVolume, Volume, IDENTITY_AFFINE};
use wdm3d::wavelet::SubbandStack;

create_exception!(
    wdm3d_py,
    Wdm3dError,
    PyException,
    "Raised for any library error; the message starts with its code."
);

fn err(e: wdm3d::Error) -> PyErr {
    Wdm3dError::new_err(format!("{}: {e}", e.code()))
}

fn bad(msg: impl Into<String>) -> PyErr {
    Wdm3dError::new_err(format!("InvalidArgument: {}", msg.into()))
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> PyResult<T> {
    s.parse().map_err(bad)
}

#[pyclass(name = "Volume", module = "wdm3d_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: Volume,
}

#[pymethods]
impl PyVolume {
    #[new]
    fn new(dims: Dims, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: Volume::new(dims, data).map_err(err)?,
        })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = nifti::read_volume(&path).map_err(err)?;
        Ok(Self { inner })
    }

    /// Writes float32, gzip-compressed unless `compress` is false.
    #[pyo3(signature = (path, compress = true))]
    fn write(&self, path: PathBuf, compress: bool) -> PyResult<()> {
        let h = NiftiHeader::new_3d(
            Datatype::F32,
            self.inner.dims(),
            self.inner.spacing,
            &self.inner.affine,
        );
        nifti::write_nifti(&self.inner, &h, &path, compress).map_err(err)
    }

    #[getter]
    fn dims(&self) -> Dims {
        self.inner.dims()
    }

    #[getter]
    fn spacing(&self) -> [f64; 3] {
        self.inner.spacing
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn dwt(&self) -> PyResult<PySubbands> {
        Ok(PySubbands {
            inner: wdm3d::dwt3(&self.inner).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?})", self.inner.dims())
    }
}

#[pyclass(name = "Mask", module = "wdm3d_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyMask {
    inner: MaskVolume,
}

#[pymethods]
impl PyMask {
    /// Any nonzero value is inside the mask.
    #[new]
    fn new(dims: Dims, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: MaskVolume::from_nonzero(dims, &data).map_err(err)?,
        })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = nifti::read_mask(&path).map_err(err)?;
        Ok(Self { inner })
    }

    #[pyo3(signature = (path, compress = true))]
    fn write(&self, path: PathBuf, compress: bool) -> PyResult<()> {
        let h = NiftiHeader::new_3d(Datatype::U8, self.inner.dims(), [1.0; 3], &IDENTITY_AFFINE);
        nifti::write_mask(&self.inner, &h, &path, compress).map_err(err)
    }

    #[getter]
    fn dims(&self) -> Dims {
        self.inner.dims()
    }

    #[getter]
    fn data(&self) -> Vec<u8> {
        self.inner.data().to_vec()
    }

    fn count(&self) -> usize {
        self.inner.count()
    }

    fn __repr__(&self) -> String {
        format!(
            "Mask(dims={:?}, count={})",
            self.inner.dims(),
            self.inner.count()
        )
    }
}

/// Channel-major coefficient grid: `data[c * voxels + v]`.
#[pyclass(name = "Subbands", module = "wdm3d_py", frozen, from_py_object)]
#[derive(Clone)]
struct PySubbands {
    inner: SubbandStack,
}

#[pymethods]
impl PySubbands {
    #[new]
    fn new(channels: usize, dims: Dims, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: SubbandStack::new(channels, dims, data).map_err(err)?,
        })
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn dims(&self) -> Dims {
        self.inner.dims()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn channel(&self, c: usize) -> PyResult<Vec<f64>> {
        if c >= self.inner.channels() {
            return Err(bad(format!("channel {c} of {}", self.inner.channels())));
        }
        Ok(self.inner.channel(c).to_vec())
    }

    /// One volume per group of eight channels.
    fn idwt(&self) -> PyResult<Vec<PyVolume>> {
        Ok(wdm3d::idwt3(&self.inner)
            .map_err(err)?
            .into_iter()
            .map(|inner| PyVolume { inner })
            .collect())
    }

    fn sum_of_squares(&self) -> f64 {
        self.inner.sum_of_squares()
    }

    fn __repr__(&self) -> String {
        format!(
            "Subbands(channels={}, dims={:?})",
            self.inner.channels(),
            self.inner.dims()
        )
    }
}

#[pyclass(name = "Schedule", module = "wdm3d_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySchedule {
    inner: Schedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (kind = "linear", steps = 1000, beta_start = None, beta_end = None))]
    fn new(
        kind: &str,
        steps: usize,
        beta_start: Option<f64>,
        beta_end: Option<f64>,
    ) -> PyResult<Self> {
        let kind: ScheduleKind = parse(kind)?;
        let mut cfg = ScheduleConfig::new(kind, steps);
        cfg.beta_start = beta_start.unwrap_or(cfg.beta_start);
        cfg.beta_end = beta_end.unwrap_or(cfg.beta_end);
        Ok(Self {
            inner: Schedule::from_config(cfg).map_err(err)?,
        })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.inner.beta(t).map_err(err)
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.inner.alpha_bar(t).map_err(err)
    }

    fn sigma(&self, t: usize) -> PyResult<f64> {
        self.inner.sigma(t).map_err(err)
    }

    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars().to_vec()
    }

    /// Decreasing Karras noise levels, ending in 0.
    #[pyo3(signature = (levels, rho = 7.0))]
    fn karras(&self, levels: usize, rho: f64) -> PyResult<Vec<f64>> {
        Ok(self.inner.karras_grid(levels, rho).map_err(err)?.sigmas)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn __repr__(&self) -> String {
        format!(
            "Schedule({:?}, steps={})",
            self.inner.kind(),
            self.inner.steps()
        )
    }
}

fn sampler(kind: &str, levels: usize, sched: &Schedule) -> PyResult<SamplerConfig> {
    Ok(match parse::<SamplerKind>(kind)? {
        SamplerKind::Ddpm => SamplerConfig::Ddpm,
        SamplerKind::Dpmpp2m => {
            SamplerConfig::Dpmpp2m(sched.karras_grid(levels, 7.0).map_err(err)?)
        }
    })
}

/// `"oracle"` (Gaussian posterior mean with `mu`, `sigma0`) or a checkpoint path.
fn denoiser(
    spec: &str,
    shape: Shape,
    sched: &Schedule,
    mu: f64,
    sigma0: f64,
) -> PyResult<Box<dyn Denoiser>> {
    if spec == "oracle" {
        let g = GaussianDataSpec::constant(shape, mu, sigma0).map_err(err)?;
        return Ok(Box::new(GaussianOracleDenoiser::new(g, sched.clone())));
    }
    let (mut d, _) = AffineDenoiser::load(&PathBuf::from(spec)).map_err(err)?;
    d.params.steps = sched.steps();
    Ok(Box::new(d))
}

fn half(d: Dims) -> Dims {
    [d[0] / 2, d[1] / 2, d[2] / 2]
}

#[pyfunction]
fn dwt3(volume: &PyVolume) -> PyResult<PySubbands> {
    volume.dwt()
}

#[pyfunction]
fn idwt3(subbands: &PySubbands) -> PyResult<Vec<PyVolume>> {
    subbands.idwt()
}

/// Loss for `D`, `DC`, `AK`, `AKH` or `Dg`; masks are one-channel subband grids of 0/1.
#[pyfunction]
#[pyo3(signature = (objective, pred, target, m_h = None, m_uh = None, lambda1 = 10.0))]
fn objective_loss(
    objective: &str,
    pred: &PySubbands,
    target: &PySubbands,
    m_h: Option<PySubbands>,
    m_uh: Option<PySubbands>,
    lambda1: f64,
) -> PyResult<f64> {
    let objective: Objective = parse(objective)?;
    let w = LossWeights::new(lambda1).map_err(err)?;
    objectives::objective_loss(
        objective,
        &pred.inner,
        &target.inner,
        m_h.as_ref().map(|m| &m.inner),
        m_uh.as_ref().map(|m| &m.inner),
        w,
    )
    .map_err(err)
}

/// Max-pools a full-resolution mask to one subband channel.
#[pyfunction]
fn pool_mask(mask: &PyMask) -> PyResult<PySubbands> {
    Ok(PySubbands {
        inner: conditioning::pool_mask(&mask.inner).map_err(err)?,
    })
}

/// Unconditional sampling when the data are `N(mu, sigma0^2)` per coefficient.
#[pyfunction]
#[pyo3(signature = (schedule, mu, sigma0, seed = 0, sampler = "ddpm", levels = 50))]
fn sample_gaussian(
    schedule: &PySchedule,
    mu: &PySubbands,
    sigma0: f64,
    seed: u64,
    sampler: &str,
    levels: usize,
) -> PyResult<PySubbands> {
    let sched = &schedule.inner;
    let shape = Shape::of(&mu.inner);
    let d = GaussianOracleDenoiser::new(
        GaussianDataSpec::new(mu.inner.clone(), sigma0).map_err(err)?,
        sched.clone(),
    );
    let out = match self::sampler(sampler, levels, sched)? {
        SamplerConfig::Ddpm => diffusion::ddpm_sample(&d, shape, sched, None, seed),
        SamplerConfig::Dpmpp2m(g) => diffusion::dpmpp2m_sample(&d, shape, sched, &g, None, seed),
    };
    Ok(PySubbands {
        inner: out.map_err(err)?,
    })
}

/// Inpaints inside `m_h`. `scan` is normalized to [-1, 1]; for `ak`/`akh` it is the voided scan.
#[pyfunction]
#[pyo3(signature = (
    scan, m_h, variant, schedule, seed = 0, m_uh = None, sampler = "ddpm", levels = 50,
    denoiser = "oracle", mu = 0.0, sigma0 = 1.0, void_fill = 0.0
))]
#[allow(clippy::too_many_arguments)]
fn inpaint(
    scan: &PyVolume,
    m_h: &PyMask,
    variant: &str,
    schedule: &PySchedule,
    seed: u64,
    m_uh: Option<PyMask>,
    sampler: &str,
    levels: usize,
    denoiser: &str,
    mu: f64,
    sigma0: f64,
    void_fill: f64,
) -> PyResult<PyVolume> {
    let variant: InpaintVariant = parse(variant)?;
    let sched = &schedule.inner;
    let mut req = InpaintRequest::new(
        scan.inner.clone(),
        m_h.inner.clone(),
        variant,
        sched.clone(),
        seed,
    );
    req.m_uh = m_uh.map(|m| m.inner);
    req.sampler = self::sampler(sampler, levels, sched)?;
    req.void_fill = void_fill;
    let d = self::denoiser(
        denoiser,
        Shape::new(8, half(scan.inner.dims())),
        sched,
        mu,
        sigma0,
    )?;
    req.mask_conditioning =
        variant == InpaintVariant::Replace && d.channel_contract().is_some_and(|(_, c)| c == 2);
    req.validate().map_err(err)?;
    Ok(PyVolume {
        inner: conditioning::inpaint(d.as_ref(), &req).map_err(err)?.volume,
    })
}

/// Generates the one `None` entry of `[t1n, t1c, t2w, flair]` from the other three.
#[pyfunction]
#[pyo3(signature = (
    modalities, pipeline, schedule, seed = 0, sampler = "ddpm", levels = 50, denoiser = "oracle", mu = 0.0,
    sigma0 = 1.0
))]
#[allow(clippy::too_many_arguments)]
fn synth(
    modalities: [Option<PyVolume>; 4],
    pipeline: &str,
    schedule: &PySchedule,
    seed: u64,
    sampler: &str,
    levels: usize,
    denoiser: &str,
    mu: f64,
    sigma0: f64,
) -> PyResult<PyVolume> {
    let pipeline: GlobalPipeline = parse(pipeline)?;
    let sched = &schedule.inner;
    let dims = modalities
        .iter()
        .flatten()
        .next()
        .map(|v| v.inner.dims())
        .ok_or_else(|| bad("no modality given"))?;
    let channels = if pipeline == GlobalPipeline::K3t1 {
        8
    } else {
        32
    };
    let d = self::denoiser(
        denoiser,
        Shape::new(channels, half(dims)),
        sched,
        mu,
        sigma0,
    )?;
    let req = SynthRequest {
        modalities: modalities.map(|m| m.map(|v| v.inner)),
        pipeline,
        sampler: self::sampler(sampler, levels, sched)?,
        schedule: sched.clone(),
        seed,
        output_norm: None,
    };
    Ok(PyVolume {
        inner: conditioning::synth_missing(d.as_ref(), &req)
            .map_err(err)?
            .volume,
    })
}

/// Draws a healthy-tissue mask inside `brain` and away from `m_uh`.
#[pyfunction]
#[pyo3(signature = (brain, m_uh, seed = 0, blob_size = (4.0, 10.0), library = None, real_prob = 0.5))]
fn place_masks(
    brain: &PyMask,
    m_uh: &PyMask,
    seed: u64,
    blob_size: (f64, f64),
    library: Option<Vec<PyMask>>,
    real_prob: f64,
) -> PyResult<PyMask> {
    let lib = match library {
        Some(ms) if !ms.is_empty() => {
            MaskLibrary::from_masks(ms.into_iter().map(|m| m.inner), MaskSource::Real)
        }
        _ => MaskLibrary::empty(MaskSource::Real),
    };
    let policy = PlacementPolicy {
        source_prob_real: if lib.is_empty() { 0.0 } else { real_prob },
        blob: BlobParams {
            size_range_mm: blob_size,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(PyMask {
        inner: maskgen::place_masks(&mut rng, &brain.inner, &m_uh.inner, &lib, &policy)
            .map_err(err)?,
    })
}

/// MSE, PSNR and SSIM over `roi`, returned as a dict.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    pred: &PyVolume,
    reference: &PyVolume,
    roi: &PyMask,
) -> PyResult<Bound<'py, PyDict>> {
    let r = wdm3d::metrics::evaluate(&pred.inner, &reference.inner, &roi.inner).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("mse", r.mse)?;
    d.set_item("psnr", r.psnr)?;
    d.set_item("ssim", r.ssim)?;
    d.set_item("roi_voxels", r.roi_voxels)?;
    Ok(d)
}

/// Runs the bundled invariant checks; one dict per check.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn selftest<'py>(py: Python<'py>, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    wdm3d::selftest::run_selftest(seed)
        .into_iter()
        .map(|c| {
            let d = PyDict::new(py);
            d.set_item("name", c.name)?;
            d.set_item("passed", c.passed)?;
            d.set_item("detail", c.detail)?;
            d.set_item("secs", c.secs)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
pub fn wdm3d_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("Wdm3dError", m.py().get_type::<Wdm3dError>())?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PySubbands>()?;
    m.add_class::<PySchedule>()?;
    m.add_function(wrap_pyfunction!(dwt3, m)?)?;
    m.add_function(wrap_pyfunction!(idwt3, m)?)?;
    m.add_function(wrap_pyfunction!(objective_loss, m)?)?;
    m.add_function(wrap_pyfunction!(pool_mask, m)?)?;
    m.add_function(wrap_pyfunction!(sample_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(inpaint, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(place_masks, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
