//! Python bindings: the main pose/geometry types plus the PnP solver, the
//! differentiable layer, the training losses, the evaluation metrics, and
//! the synthetic dataset generator.
//!
//! Points cross the boundary as plain lists of tuples; gradients and
//! Jacobian-like matrices come back as nested lists.
#![allow(clippy::type_complexity)]

use nalgebra::{Vector2, Vector3};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use perspnp_core::bench;
use perspnp_core::diff_pnp;
use perspnp_core::geometry::{self, CameraIntrinsics, EulerAngles, PointSet2, PointSet3};
use perspnp_core::losses::{self, LandmarkSet, WpdcWeights};
use perspnp_core::metrics;
use perspnp_core::pca::{self, CanonicalMesh, PcaCoeffs};
use perspnp_core::pnp::PnPProblem;
use perspnp_core::synth::{self, dataset};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn to_points3(points: Vec<(f64, f64, f64)>) -> PyResult<PointSet3> {
    PointSet3::new(
        points
            .into_iter()
            .map(|(x, y, z)| Vector3::new(x, y, z))
            .collect(),
    )
    .map_err(value_err)
}

fn to_points2(points: Vec<(f64, f64)>) -> PyResult<PointSet2> {
    PointSet2::new(
        points
            .into_iter()
            .map(|(x, y)| Vector2::new(x, y))
            .collect(),
    )
    .map_err(value_err)
}

fn to_mesh(points: Vec<(f64, f64, f64)>) -> PyResult<CanonicalMesh> {
    Ok(CanonicalMesh::from_points(to_points3(points)?))
}

fn mesh_out(mesh: &CanonicalMesh) -> Vec<(f64, f64, f64)> {
    mesh.vertices().iter().map(|v| (v.x, v.y, v.z)).collect()
}

/// 6DoF rigid pose: unit quaternion rotation plus translation (mm).
#[pyclass(name = "RigidPose", skip_from_py_object)]
#[derive(Clone)]
struct PyRigidPose {
    inner: geometry::RigidPose,
}

#[pymethods]
impl PyRigidPose {
    #[staticmethod]
    fn identity() -> Self {
        Self {
            inner: geometry::RigidPose::identity(),
        }
    }

    /// Build from quaternion components (w, x, y, z) and a translation.
    #[staticmethod]
    fn from_quaternion(w: f64, x: f64, y: f64, z: f64, translation: (f64, f64, f64)) -> PyResult<Self> {
        geometry::RigidPose::from_parts(
            w,
            x,
            y,
            z,
            Vector3::new(translation.0, translation.1, translation.2),
        )
        .map(|inner| Self { inner })
        .map_err(value_err)
    }

    /// Build from intrinsic yaw-Y/pitch-X/roll-Z Euler angles (degrees).
    #[staticmethod]
    fn from_euler(yaw: f64, pitch: f64, roll: f64, translation: (f64, f64, f64)) -> Self {
        let rot = geometry::euler_to_pose(&EulerAngles::new(yaw, pitch, roll)).rotation();
        Self {
            inner: geometry::RigidPose::new(
                rot,
                Vector3::new(translation.0, translation.1, translation.2),
            ),
        }
    }

    /// Quaternion components (w, x, y, z), scalar part non-negative.
    fn quaternion(&self) -> (f64, f64, f64, f64) {
        let q = self.inner.rotation();
        (q.w, q.i, q.j, q.k)
    }

    fn translation(&self) -> (f64, f64, f64) {
        let t = self.inner.translation();
        (t.x, t.y, t.z)
    }

    /// Euler angles (yaw, pitch, roll) in degrees.
    fn euler(&self) -> (f64, f64, f64) {
        let e = geometry::pose_to_euler(&self.inner);
        (e.yaw, e.pitch, e.roll)
    }

    fn compose(&self, other: &PyRigidPose) -> Self {
        Self {
            inner: self.inner.compose(&other.inner),
        }
    }

    fn inverse(&self) -> Self {
        Self {
            inner: self.inner.inverse(),
        }
    }

    fn transform(&self, points: Vec<(f64, f64, f64)>) -> Vec<(f64, f64, f64)> {
        points
            .into_iter()
            .map(|(x, y, z)| {
                let p = self.inner.transform_point(&Vector3::new(x, y, z));
                (p.x, p.y, p.z)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        let (w, x, y, z) = self.quaternion();
        let (tx, ty, tz) = self.translation();
        format!("RigidPose(q=({w:.6}, {x:.6}, {y:.6}, {z:.6}), t=({tx:.3}, {ty:.3}, {tz:.3}))")
    }
}

/// Pinhole camera intrinsics.
#[pyclass(name = "CameraIntrinsics", skip_from_py_object)]
#[derive(Clone)]
struct PyCameraIntrinsics {
    inner: CameraIntrinsics,
}

#[pymethods]
impl PyCameraIntrinsics {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64) -> PyResult<Self> {
        CameraIntrinsics::new(fx, fy, cx, cy, width, height)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "CameraIntrinsics(fx={}, fy={}, cx={}, cy={}, {}x{})",
            self.inner.fx,
            self.inner.fy,
            self.inner.cx,
            self.inner.cy,
            self.inner.width,
            self.inner.height
        )
    }
}

/// PCA shape space over canonical meshes.
#[pyclass(name = "PcaModel")]
struct PyPcaModel {
    inner: pca::PcaModel,
}

#[pymethods]
impl PyPcaModel {
    /// Build from a mesh collection (each mesh a list of (x, y, z), all
    /// with the same vertex order).
    #[staticmethod]
    fn build(meshes: Vec<Vec<(f64, f64, f64)>>, k: usize) -> PyResult<Self> {
        let collection: Vec<CanonicalMesh> = meshes
            .into_iter()
            .map(to_mesh)
            .collect::<PyResult<_>>()?;
        pca::build_pca(&collection, k)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        pca::read_model(&path)
            .map(|inner| Self { inner })
            .map_err(io_err)
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        pca::write_model(&self.inner, &path).map_err(io_err)
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn n_vertices(&self) -> usize {
        self.inner.n_vertices()
    }

    fn component_scales(&self) -> Vec<f64> {
        self.inner.component_scales().iter().copied().collect()
    }

    fn mean_mesh(&self) -> Vec<(f64, f64, f64)> {
        mesh_out(&self.inner.mean_mesh())
    }

    /// Least-squares coefficients of a mesh in this basis.
    fn fit(&self, mesh: Vec<(f64, f64, f64)>) -> PyResult<Vec<f64>> {
        let coeffs = pca::fit_coeffs(&self.inner, &to_mesh(mesh)?).map_err(value_err)?;
        Ok(coeffs.as_slice().to_vec())
    }

    fn reconstruct(&self, coeffs: Vec<f64>) -> PyResult<Vec<(f64, f64, f64)>> {
        let coeffs = PcaCoeffs::new(coeffs).map_err(value_err)?;
        Ok(mesh_out(
            &pca::reconstruct(&self.inner, &coeffs).map_err(value_err)?,
        ))
    }
}

/// Perspective projection of posed 3D points into pixel coordinates.
#[pyfunction]
fn project(
    points: Vec<(f64, f64, f64)>,
    pose: &PyRigidPose,
    cam: &PyCameraIntrinsics,
) -> PyResult<Vec<(f64, f64)>> {
    let projected = geometry::project(&to_points3(points)?, &pose.inner, &cam.inner)
        .map_err(value_err)?;
    Ok(projected.iter().map(|p| (p.x, p.y)).collect())
}

fn build_problem(
    points3: Vec<(f64, f64, f64)>,
    points2: Vec<(f64, f64)>,
    sigmas: Option<Vec<f64>>,
    cam: &PyCameraIntrinsics,
) -> PyResult<PnPProblem> {
    PnPProblem::new(to_points3(points3)?, to_points2(points2)?, sigmas, cam.inner)
        .map_err(value_err)
}

/// Solve PnP (DLT init + LM refinement). Returns
/// `(pose, final_cost, iterations, converged)`.
#[pyfunction]
#[pyo3(signature = (points3, points2, cam, sigmas=None))]
fn solve_pnp(
    points3: Vec<(f64, f64, f64)>,
    points2: Vec<(f64, f64)>,
    cam: &PyCameraIntrinsics,
    sigmas: Option<Vec<f64>>,
) -> PyResult<(PyRigidPose, f64, usize, bool)> {
    let problem = build_problem(points3, points2, sigmas, cam)?;
    let sol = diff_pnp::pnp_forward(&problem).map_err(value_err)?;
    Ok((
        PyRigidPose { inner: sol.pose },
        sol.final_cost,
        sol.iterations,
        sol.converged,
    ))
}

/// Implicit-differentiation gradients of the solved pose. Returns a dict
/// with `d_points2` (6×2N), `d_points3` (6×3N) and optionally `d_sigmas`.
#[pyfunction]
#[pyo3(signature = (points3, points2, cam, sigmas=None))]
fn pnp_gradients<'py>(
    py: Python<'py>,
    points3: Vec<(f64, f64, f64)>,
    points2: Vec<(f64, f64)>,
    cam: &PyCameraIntrinsics,
    sigmas: Option<Vec<f64>>,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let problem = build_problem(points3, points2, sigmas, cam)?;
    let sol = diff_pnp::pnp_forward(&problem).map_err(value_err)?;
    let grads = diff_pnp::pnp_backward_ift(&problem, &sol).map_err(value_err)?;
    let rows = |m: &nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..m.nrows())
            .map(|r| m.row(r).iter().copied().collect())
            .collect()
    };
    let dict = pyo3::types::PyDict::new(py);
    dict.set_item("d_points2", rows(&grads.d_points2))?;
    dict.set_item("d_points3", rows(&grads.d_points3))?;
    if let Some(ds) = &grads.d_sigmas {
        dict.set_item("d_sigmas", rows(ds))?;
    }
    Ok(dict)
}

/// Gaussian negative log-likelihood over landmarks. Returns
/// `(value, d_mu, d_log_sigma)`.
#[pyfunction]
fn gnll(
    mu: Vec<(f64, f64)>,
    sigma: Vec<f64>,
    gt: Vec<(f64, f64)>,
) -> PyResult<(f64, Vec<(f64, f64)>, Vec<f64>)> {
    let pred = LandmarkSet::from_mu_sigma(
        mu.into_iter().map(|(x, y)| Vector2::new(x, y)).collect(),
        sigma,
    )
    .map_err(value_err)?;
    let result = losses::gnll(&pred, &to_points2(gt)?).map_err(value_err)?;
    Ok((
        result.value,
        result.d_mu.iter().map(|g| (g.x, g.y)).collect(),
        result.d_log_sigma,
    ))
}

/// Vertex distance cost (mean squared vertex distance, mm²). Returns
/// `(value, d_pred)`.
#[pyfunction]
fn vdc(
    pred: Vec<(f64, f64, f64)>,
    gt: Vec<(f64, f64, f64)>,
) -> PyResult<(f64, Vec<(f64, f64, f64)>)> {
    let result = losses::vdc(&to_mesh(pred)?, &to_mesh(gt)?).map_err(value_err)?;
    Ok((
        result.value,
        result.d_pred.iter().map(|g| (g.x, g.y, g.z)).collect(),
    ))
}

/// Weighted parameter distance cost. Weights normalize to sum K. Returns
/// `(value, d_pred)`.
#[pyfunction]
fn wpdc(pred: Vec<f64>, gt: Vec<f64>, weights: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
    let result = losses::wpdc(
        &PcaCoeffs::new(pred).map_err(value_err)?,
        &PcaCoeffs::new(gt).map_err(value_err)?,
        &WpdcWeights::new(weights).map_err(value_err)?,
    )
    .map_err(value_err)?;
    Ok((result.value, result.d_pred))
}

/// Pose-supervision loss through the PnP layer. Returns
/// `(value, d_landmarks, d_mesh, pose)`.
#[pyfunction]
#[pyo3(signature = (mu, sigma, mesh_pred, mesh_gt, pose_gt, cam))]
fn pnp_loss(
    mu: Vec<(f64, f64)>,
    sigma: Vec<f64>,
    mesh_pred: Vec<(f64, f64, f64)>,
    mesh_gt: Vec<(f64, f64, f64)>,
    pose_gt: &PyRigidPose,
    cam: &PyCameraIntrinsics,
) -> PyResult<(f64, Vec<(f64, f64)>, Vec<(f64, f64, f64)>, PyRigidPose)> {
    let landmarks = LandmarkSet::from_mu_sigma(
        mu.into_iter().map(|(x, y)| Vector2::new(x, y)).collect(),
        sigma,
    )
    .map_err(value_err)?;
    let result = diff_pnp::pnp_loss(
        &landmarks,
        &to_mesh(mesh_pred)?,
        &to_mesh(mesh_gt)?,
        &pose_gt.inner,
        &cam.inner,
    )
    .map_err(value_err)?;
    Ok((
        result.value,
        result.d_landmarks.iter().map(|g| (g.x, g.y)).collect(),
        result.d_mesh.iter().map(|g| (g.x, g.y, g.z)).collect(),
        PyRigidPose {
            inner: result.pose_pred,
        },
    ))
}

/// Mean absolute Euler-angle error (degrees).
#[pyfunction]
fn mae_r(pred: &PyRigidPose, gt: &PyRigidPose) -> f64 {
    metrics::mae_r(&pred.inner, &gt.inner)
}

/// Mean absolute translation error (mm).
#[pyfunction]
fn mae_t(pred: &PyRigidPose, gt: &PyRigidPose) -> f64 {
    metrics::mae_t(&pred.inner, &gt.inner)
}

/// Average per-vertex distance between the posed copies of a mesh (mm).
#[pyfunction]
fn add(pred: &PyRigidPose, gt: &PyRigidPose, mesh: Vec<(f64, f64, f64)>) -> PyResult<f64> {
    Ok(metrics::add(&pred.inner, &gt.inner, &to_mesh(mesh)?))
}

/// Geodesic rotation distance (radians).
#[pyfunction]
fn geodesic_distance(pred: &PyRigidPose, gt: &PyRigidPose) -> f64 {
    metrics::geodesic_distance(&pred.inner, &gt.inner)
}

/// Median and mean per-vertex error (mm).
#[pyfunction]
fn vertex_error_stats(
    pred: Vec<(f64, f64, f64)>,
    gt: Vec<(f64, f64, f64)>,
) -> PyResult<(f64, f64)> {
    metrics::vertex_error_stats(&to_mesh(pred)?, &to_mesh(gt)?).map_err(value_err)
}

/// Generate a synthetic dataset directory from a SceneConfig JSON string.
#[pyfunction]
fn generate_dataset(config_json: &str, out_dir: std::path::PathBuf) -> PyResult<usize> {
    let cfg: synth::SceneConfig = serde_json::from_str(config_json).map_err(value_err)?;
    let (model, shapes, samples) = synth::gen_dataset(&cfg).map_err(value_err)?;
    dataset::write_dataset(&out_dir, &cfg, &model, &shapes, &samples).map_err(io_err)?;
    Ok(samples.len())
}

/// Run the finite-difference gradient audit; returns the report as JSON.
#[pyfunction]
fn grad_audit(seed: u64, n_instances: usize) -> PyResult<String> {
    serde_json::to_string_pretty(&bench::run_grad_audit(seed, n_instances)).map_err(value_err)
}

#[pymodule]
fn perspnp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRigidPose>()?;
    m.add_class::<PyCameraIntrinsics>()?;
    m.add_class::<PyPcaModel>()?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(solve_pnp, m)?)?;
    m.add_function(wrap_pyfunction!(pnp_gradients, m)?)?;
    m.add_function(wrap_pyfunction!(gnll, m)?)?;
    m.add_function(wrap_pyfunction!(vdc, m)?)?;
    m.add_function(wrap_pyfunction!(wpdc, m)?)?;
    m.add_function(wrap_pyfunction!(pnp_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mae_r, m)?)?;
    m.add_function(wrap_pyfunction!(mae_t, m)?)?;
    m.add_function(wrap_pyfunction!(add, m)?)?;
    m.add_function(wrap_pyfunction!(geodesic_distance, m)?)?;
    m.add_function(wrap_pyfunction!(vertex_error_stats, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(grad_audit, m)?)?;
    Ok(())
}
