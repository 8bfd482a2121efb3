//! Python bindings: volumes, projections, the scanner model, MLEM, phantoms,
//! metrics and trained-network inference.

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tipnet::datamodel::{self, Dims3, LabeledMasks, ProjectionSet, VolumeGrid};
use tipnet::geometry::{back_project, forward_project, GeometryConfig, GridSpec};
use tipnet::metrics::{self, SsimParams};
use tipnet::mlem::{mlem_reconstruct, MlemConfig};
use tipnet::model::{ModelConfig, ModelShapes, TipNet};
use tipnet::phantom::{self, AcquisitionSpec, PhantomSpec};
use tipnet::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) | Error::Reconstruction(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn scale_of(name: &str) -> PyResult<(GridSpec, GeometryConfig)> {
    match name {
        "desk" => Ok((GridSpec::desk(), GeometryConfig::desk())),
        "paper" => Ok((GridSpec::paper(), GeometryConfig::paper())),
        other => Err(PyValueError::new_err(format!("unknown scale {other:?}, expected 'desk' or 'paper'"))),
    }
}

/// A 3D image stored x-fastest, with shape `(nz, ny, nx)`.
#[pyclass(name = "Volume", module = "pytipnet", frozen)]
pub struct PyVolume {
    inner: VolumeGrid,
}

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (shape, values, voxel_size = [1.0, 1.0, 1.0]))]
    fn new(shape: (usize, usize, usize), values: Vec<f32>, voxel_size: [f64; 3]) -> PyResult<Self> {
        let (nz, ny, nx) = shape;
        let inner = VolumeGrid::new(Dims3::new(nx, ny, nz), voxel_size, values).map_err(py_err)?;
        Ok(PyVolume { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyVolume { inner: datamodel::read_volume(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        datamodel::write_volume(path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let d = self.inner.dims();
        (d.nz, d.ny, d.nx)
    }

    #[getter]
    fn voxel_size(&self) -> [f64; 3] {
        self.inner.voxel_size()
    }

    fn values(&self) -> Vec<f32> {
        self.inner.values().to_vec()
    }

    fn max(&self) -> f32 {
        self.inner.max()
    }

    fn sum(&self) -> f64 {
        self.inner.sum()
    }

    fn __len__(&self) -> usize {
        self.inner.dims().len()
    }

    fn __repr__(&self) -> String {
        format!("Volume(shape={:?}, max={})", self.shape(), self.inner.max())
    }
}

/// Detector readings with shape `(n_angles, n_modules, nv, nu)`.
#[pyclass(name = "Projections", module = "pytipnet", frozen)]
pub struct PyProjections {
    inner: ProjectionSet,
}

#[pymethods]
impl PyProjections {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyProjections { inner: datamodel::read_projections(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        datamodel::write_projections(path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let d = self.inner.dims();
        (d.n_angles, d.n_modules, d.nv, d.nu)
    }

    #[getter]
    fn angle_ids(&self) -> Vec<String> {
        self.inner.angle_ids().to_vec()
    }

    fn values(&self) -> Vec<f32> {
        self.inner.values().to_vec()
    }

    fn total(&self) -> f64 {
        self.inner.total()
    }

    /// The readings of one angular position.
    fn angle(&self, index: usize) -> PyResult<Self> {
        Ok(PyProjections { inner: self.inner.angle(index).map_err(py_err)? })
    }

    fn __repr__(&self) -> String {
        format!("Projections(shape={:?}, angles={:?})", self.shape(), self.inner.angle_ids())
    }
}

/// Myocardium, blood-pool and defect masks as flat boolean lists.
#[pyclass(name = "Masks", module = "pytipnet", frozen, get_all)]
pub struct PyMasks {
    myocardium: Vec<bool>,
    blood_pool: Vec<bool>,
    defect: Vec<bool>,
}

impl From<LabeledMasks> for PyMasks {
    fn from(m: LabeledMasks) -> Self {
        PyMasks {
            myocardium: m.myocardium,
            blood_pool: m.blood_pool,
            defect: m.defect,
        }
    }
}

/// System matrices for the one-angle and four-angle acquisitions.
#[pyclass(name = "Scanner", module = "pytipnet", frozen)]
pub struct PyScanner {
    inner: phantom::Scanner,
}

impl PyScanner {
    fn matrix(&self, n_angles: usize) -> PyResult<(&tipnet::geometry::SystemMatrix, &[String])> {
        match n_angles {
            1 => Ok((&self.inner.s_one, &self.inner.one_ids)),
            4 => Ok((&self.inner.s_four, &self.inner.four_ids)),
            n => Err(PyValueError::new_err(format!("no system matrix for {n} angles"))),
        }
    }
}

#[pymethods]
impl PyScanner {
    #[new]
    #[pyo3(signature = (scale = "desk"))]
    fn new(py: Python<'_>, scale: &str) -> PyResult<Self> {
        let (grid, geom) = scale_of(scale)?;
        let inner = py.detach(|| phantom::Scanner::new(&geom, &grid)).map_err(py_err)?;
        Ok(PyScanner { inner })
    }

    /// Grid shape `(nz, ny, nx)`.
    #[getter]
    fn grid_shape(&self) -> (usize, usize, usize) {
        let d = self.inner.grid.dims;
        (d.nz, d.ny, d.nx)
    }

    /// Non-zero count of the system matrix for `n_angles` (1 or 4).
    #[pyo3(signature = (n_angles = 1))]
    fn nnz(&self, n_angles: usize) -> PyResult<usize> {
        Ok(self.matrix(n_angles)?.0.nnz())
    }

    #[pyo3(signature = (volume, n_angles = 1))]
    fn project(&self, volume: &PyVolume, n_angles: usize) -> PyResult<PyProjections> {
        let (s, ids) = self.matrix(n_angles)?;
        Ok(PyProjections { inner: forward_project(s, &volume.inner, ids.to_vec()).map_err(py_err)? })
    }

    fn back_project(&self, projections: &PyProjections) -> PyResult<PyVolume> {
        let (s, _) = self.matrix(projections.inner.dims().n_angles)?;
        Ok(PyVolume { inner: back_project(s, &projections.inner, self.inner.grid.voxel_size).map_err(py_err)? })
    }

    #[pyo3(signature = (projections, n_iters = 50))]
    fn mlem(&self, py: Python<'_>, projections: &PyProjections, n_iters: usize) -> PyResult<PyVolume> {
        let (s, _) = self.matrix(projections.inner.dims().n_angles)?;
        let cfg = MlemConfig { n_iters, ..MlemConfig::default() };
        let vs = self.inner.grid.voxel_size;
        let inner = py.detach(|| mlem_reconstruct(s, &projections.inner, &cfg, vs)).map_err(py_err)?;
        Ok(PyVolume { inner })
    }

    /// Poisson acquisition at `counts_per_angle` expected counts per position.
    #[pyo3(signature = (volume, n_angles = 4, counts_per_angle = 5e5, seed = 0))]
    fn acquire(&self, volume: &PyVolume, n_angles: usize, counts_per_angle: f64, seed: u64) -> PyResult<PyProjections> {
        let (s, ids) = self.matrix(n_angles)?;
        let acq = AcquisitionSpec { counts_per_angle, seed };
        Ok(PyProjections { inner: phantom::simulate_acquisition(&volume.inner, s, ids.to_vec(), &acq).map_err(py_err)? })
    }
}

/// Random cardiac phantom on the grid of `scale`, with its masks.
#[pyfunction]
#[pyo3(signature = (seed = 0, scale = "desk", defect = true))]
fn make_phantom(seed: u64, scale: &str, defect: bool) -> PyResult<(PyVolume, PyMasks)> {
    let (grid, _) = scale_of(scale)?;
    let spec = PhantomSpec::random(&mut ChaCha8Rng::seed_from_u64(seed), defect);
    let (v, m) = phantom::generate_phantom(&spec, &grid).map_err(py_err)?;
    Ok((PyVolume { inner: v }, m.into()))
}

/// Windowed 3D SSIM; `peak` defaults to the maximum of `reference`.
#[pyfunction]
#[pyo3(signature = (x, reference, peak = None))]
fn ssim(x: &PyVolume, reference: &PyVolume, peak: Option<f64>) -> PyResult<f64> {
    let peak = peak.unwrap_or(reference.inner.max() as f64);
    metrics::ssim(&x.inner, &reference.inner, SsimParams::default(), peak).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (x, reference, peak = None))]
fn psnr(x: &PyVolume, reference: &PyVolume, peak: Option<f64>) -> PyResult<f64> {
    let peak = peak.unwrap_or(reference.inner.max() as f64);
    metrics::psnr(&x.inner, &reference.inner, peak).map_err(py_err)
}

#[pyfunction]
fn rmse(x: &PyVolume, reference: &PyVolume) -> PyResult<f64> {
    metrics::rmse(&x.inner, &reference.inner).map_err(py_err)
}

/// A saved network; `infer` maps one-angle inputs to a refined volume.
#[pyclass(name = "Model", module = "pytipnet")]
pub struct PyModel {
    inner: TipNet,
}

#[pymethods]
impl PyModel {
    /// A freshly initialised network for the one-angle data of `scanner`.
    #[staticmethod]
    #[pyo3(signature = (scanner, seed = 0))]
    fn init(scanner: &PyScanner, seed: u64) -> PyResult<Self> {
        let shapes = ModelShapes::new(scanner.inner.grid.dims, scanner.inner.s_one.proj_dims());
        Ok(PyModel { inner: TipNet::new(&ModelConfig::default(), &shapes, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel { inner: TipNet::load(path).map_err(py_err)? })
    }

    fn save(&self, stem: &str) -> PyResult<String> {
        Ok(self.inner.save(stem).map_err(py_err)?.display().to_string())
    }

    /// Returns `(img_p, output)`: the transformer image and the refined image.
    fn infer(&self, py: Python<'_>, projections: &PyProjections, bp: &PyVolume, mlem: &PyVolume) -> PyResult<(PyVolume, PyVolume)> {
        let out = py.detach(|| self.inner.infer(&projections.inner, &bp.inner, &mlem.inner)).map_err(py_err)?;
        Ok((PyVolume { inner: out.img_p }, PyVolume { inner: out.output }))
    }

    fn n_parameters(&self) -> usize {
        self.inner.store.numel()
    }
}

#[pymodule]
fn pytipnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyProjections>()?;
    m.add_class::<PyMasks>()?;
    m.add_class::<PyScanner>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(make_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    Ok(())
}
