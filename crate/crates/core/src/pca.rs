//! PCA shape space over canonical face meshes: build from a mesh
//! collection, fit coefficients for a target mesh, reconstruct meshes from
//! coefficients.
//!
//! A mesh is flattened vertex-major (`x0 y0 z0 x1 y1 z1 ...`) into a
//! 3N-vector. The model holds the arithmetic mean, an orthonormal basis of
//! the top-k principal directions, and the per-component scales (singular
//! values over `sqrt(count - 1)`, i.e. standard deviations along each
//! component, in mm).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{GeometryError, PointSet3};

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("inconsistent vertex count: expected {expected}, got {actual}")]
    InconsistentVertexCount { expected: usize, actual: usize },
    /// The requested component count exceeds the numeric rank of the data.
    #[error("rank-deficient data: requested {requested} components, rank is {rank}")]
    RankDeficient { requested: usize, rank: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("model file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file header: {0}")]
    BadHeader(String),
    #[error("model file checksum mismatch")]
    ChecksumMismatch,
}

/// A canonical face mesh: N ordered vertices in the pose-free reference
/// frame (mm). Vertex order is the correspondence contract with the 2D
/// landmark set and is never permuted.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalMesh(PointSet3);

impl CanonicalMesh {
    pub fn new(vertices: Vec<Vector3<f64>>) -> Result<Self, PcaError> {
        Ok(Self(PointSet3::new(vertices)?))
    }

    pub fn from_points(points: PointSet3) -> Self {
        Self(points)
    }

    /// Rebuilds a mesh from a vertex-major flat slice of length `3N`.
    pub fn from_flat(flat: &[f64]) -> Result<Self, PcaError> {
        if !flat.len().is_multiple_of(3) {
            return Err(PcaError::DimensionMismatch {
                expected: 3 * (flat.len() / 3 + 1),
                actual: flat.len(),
            });
        }
        Self::new(
            flat.chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> &PointSet3 {
        &self.0
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        self.0.as_slice()
    }

    pub fn flatten(&self) -> DVector<f64> {
        let mut out = DVector::zeros(3 * self.len());
        for (i, v) in self.0.iter().enumerate() {
            out[3 * i] = v.x;
            out[3 * i + 1] = v.y;
            out[3 * i + 2] = v.z;
        }
        out
    }
}

impl std::ops::Index<usize> for CanonicalMesh {
    type Output = Vector3<f64>;
    fn index(&self, i: usize) -> &Vector3<f64> {
        &self.0[i]
    }
}

/// Coefficient vector of a mesh in a [`PcaModel`] basis (mm, since the
/// basis columns are unit-norm).
#[derive(Debug, Clone, PartialEq)]
pub struct PcaCoeffs(DVector<f64>);

impl PcaCoeffs {
    pub fn new(values: Vec<f64>) -> Result<Self, PcaError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PcaError::InvalidArgument(
                "coefficients must be finite".into(),
            ));
        }
        Ok(Self(DVector::from_vec(values)))
    }

    pub fn zeros(k: usize) -> Self {
        Self(DVector::zeros(k))
    }

    pub fn from_vector(v: DVector<f64>) -> Self {
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

impl std::ops::Index<usize> for PcaCoeffs {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Mean + orthonormal basis of a mesh collection.
#[derive(Debug, Clone)]
pub struct PcaModel {
    mean: DVector<f64>,
    basis: DMatrix<f64>,
    component_scales: DVector<f64>,
    n_vertices: usize,
}

impl PcaModel {
    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn k(&self) -> usize {
        self.basis.ncols()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn mean_mesh(&self) -> CanonicalMesh {
        CanonicalMesh::from_flat(self.mean.as_slice()).expect("mean has 3N entries")
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn component_scales(&self) -> &DVector<f64> {
        &self.component_scales
    }

    /// Pulls a mesh-space gradient back through the reconstruction map
    /// `mesh = mean + basis · c`, yielding the coefficient-space gradient
    /// `basisᵀ · g`.
    pub fn pullback_mesh_grad(&self, grad: &[Vector3<f64>]) -> Result<DVector<f64>, PcaError> {
        if grad.len() != self.n_vertices {
            return Err(PcaError::InconsistentVertexCount {
                expected: self.n_vertices,
                actual: grad.len(),
            });
        }
        let mut flat = DVector::zeros(3 * grad.len());
        for (i, g) in grad.iter().enumerate() {
            flat[3 * i] = g.x;
            flat[3 * i + 1] = g.y;
            flat[3 * i + 2] = g.z;
        }
        Ok(self.basis.transpose() * flat)
    }
}

/// Builds a PCA model from a mesh collection.
///
/// The mean is the arithmetic mean, the basis the top-`k` left singular
/// vectors of the centered data matrix, and the component scales the
/// corresponding singular values divided by `sqrt(count − 1)`. Each basis
/// column is sign-fixed so its largest-magnitude entry is positive, making
/// the build deterministic.
pub fn build_pca(meshes: &[CanonicalMesh], k: usize) -> Result<PcaModel, PcaError> {
    let count = meshes.len();
    if count < 2 {
        return Err(PcaError::InvalidArgument(format!(
            "need at least 2 meshes, got {count}"
        )));
    }
    if k == 0 {
        return Err(PcaError::InvalidArgument("k must be at least 1".into()));
    }
    let n = meshes[0].len();
    for m in meshes {
        if m.len() != n {
            return Err(PcaError::InconsistentVertexCount {
                expected: n,
                actual: m.len(),
            });
        }
    }
    if k > count - 1 {
        return Err(PcaError::RankDeficient {
            requested: k,
            rank: count - 1,
        });
    }

    let dim = 3 * n;
    let mut data = DMatrix::zeros(dim, count);
    for (c, mesh) in meshes.iter().enumerate() {
        data.set_column(c, &mesh.flatten());
    }
    let mean = data.column_mean();
    for mut col in data.column_iter_mut() {
        col -= &mean;
    }

    let svd = data.svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| PcaError::InvalidArgument("SVD failed to produce U".into()))?;
    let sv = &svd.singular_values;
    let rank = sv.iter().filter(|&&s| s > sv[0] * 1e-10 && s > 1e-12).count();
    if rank < k {
        return Err(PcaError::RankDeficient { requested: k, rank });
    }

    let mut basis = u.columns(0, k).into_owned();
    for mut col in basis.column_iter_mut() {
        let mut best = 0;
        let mut best_abs = 0.0;
        for (i, &v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }

    let denom = ((count - 1) as f64).sqrt();
    let component_scales = DVector::from_iterator(k, sv.iter().take(k).map(|s| s / denom));

    Ok(PcaModel {
        mean,
        basis,
        component_scales,
        n_vertices: n,
    })
}

/// Least-squares projection of a mesh onto the model:
/// `c = basisᵀ (mesh − mean)`. The residual is orthogonal to the basis.
pub fn fit_coeffs(model: &PcaModel, mesh: &CanonicalMesh) -> Result<PcaCoeffs, PcaError> {
    if mesh.len() != model.n_vertices {
        return Err(PcaError::InconsistentVertexCount {
            expected: model.n_vertices,
            actual: mesh.len(),
        });
    }
    let centered = mesh.flatten() - &model.mean;
    Ok(PcaCoeffs(model.basis.transpose() * centered))
}

/// `mean + basis · c`, reshaped to N×3.
pub fn reconstruct(model: &PcaModel, coeffs: &PcaCoeffs) -> Result<CanonicalMesh, PcaError> {
    if coeffs.len() != model.k() {
        return Err(PcaError::DimensionMismatch {
            expected: model.k(),
            actual: coeffs.len(),
        });
    }
    let flat = &model.mean + &model.basis * coeffs.as_vector();
    CanonicalMesh::from_flat(flat.as_slice())
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    n_vertices: usize,
    k: usize,
    endianness: String,
    payload_sha256: String,
}

/// Writes a model as a one-line JSON header followed by a packed
/// little-endian f64 payload: mean (3N), basis column-major (3N·K),
/// component scales (K). The header carries a SHA-256 of the payload.
pub fn write_model(model: &PcaModel, path: &Path) -> Result<(), PcaError> {
    let mut payload =
        Vec::with_capacity(8 * (model.mean.len() + model.basis.len() + model.k()));
    for v in model.mean.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    for col in model.basis.column_iter() {
        for v in col.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in model.component_scales.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let header = ModelHeader {
        n_vertices: model.n_vertices,
        k: model.k(),
        endianness: "little".into(),
        payload_sha256: hex_digest(&payload),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header).map_err(|e| PcaError::BadHeader(e.to_string()))?;
    w.write_all(b"\n")?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<PcaModel, PcaError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| PcaError::BadHeader("missing header line".into()))?;
    let header: ModelHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| PcaError::BadHeader(e.to_string()))?;
    if header.endianness != "little" {
        return Err(PcaError::BadHeader(format!(
            "unsupported endianness tag {:?}",
            header.endianness
        )));
    }
    let payload = &bytes[newline + 1..];
    if hex_digest(payload) != header.payload_sha256 {
        return Err(PcaError::ChecksumMismatch);
    }
    let dim = 3 * header.n_vertices;
    let expected = 8 * (dim + dim * header.k + header.k);
    if payload.len() != expected {
        return Err(PcaError::BadHeader(format!(
            "payload length {} does not match header ({} expected)",
            payload.len(),
            expected
        )));
    }
    let mut floats = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let mean = DVector::from_iterator(dim, floats.by_ref().take(dim));
    let basis = DMatrix::from_iterator(dim, header.k, floats.by_ref().take(dim * header.k));
    let component_scales = DVector::from_iterator(header.k, floats.by_ref().take(header.k));
    Ok(PcaModel {
        mean,
        basis,
        component_scales,
        n_vertices: header.n_vertices,
    })
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
