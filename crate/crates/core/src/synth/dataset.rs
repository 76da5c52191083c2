//! Dataset serialization: a directory with `manifest.json` (version,
//! config echo, counts, checksums), `samples.jsonl` (per-sample blob
//! offsets), `blobs.bin` (packed little-endian f64 payload), the PCA model
//! file, and a `shapes/` subdirectory holding the generating mesh
//! collection for `pca-build`.
//!
//! All floating-point state lives in the binary blobs, so
//! `read ∘ write` is bit-exact and same-seed runs compare byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, PointSet2, RigidPose, Similarity2D};
use crate::pca::{self, hex_digest, CanonicalMesh, PcaCoeffs, PcaError, PcaModel};
use crate::synth::{SceneConfig, SyntheticSample};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported dataset format version {found} (expected {expected})")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch for {file}")]
    ChecksumMismatch { file: String },
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Pca(#[from] PcaError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: SceneConfig,
    n_samples: usize,
    n_vertices: usize,
    k: usize,
    blobs_sha256: String,
    samples_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    id: usize,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ShapesManifest {
    format_version: u32,
    n_meshes: usize,
    n_vertices: usize,
    blobs_sha256: String,
}

/// A dataset read back from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: SceneConfig,
    pub model: PcaModel,
    pub samples: Vec<SyntheticSample>,
}

fn push_f64s(buf: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn sample_block(sample: &SyntheticSample) -> Vec<u8> {
    let n = sample.mesh.len();
    let k = sample.coeffs.len();
    let mut buf = Vec::with_capacity(8 * (17 + k + 8 * n));
    let q = sample.pose.rotation();
    push_f64s(&mut buf, [q.w, q.i, q.j, q.k]);
    let t = sample.pose.translation();
    push_f64s(&mut buf, [t.x, t.y, t.z]);
    let cam = &sample.cam;
    push_f64s(&mut buf, [cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height]);
    push_f64s(
        &mut buf,
        [
            sample.warp.scale(),
            sample.warp.angle(),
            sample.warp.translation().x,
            sample.warp.translation().y,
        ],
    );
    push_f64s(&mut buf, sample.coeffs.as_slice().iter().copied());
    push_f64s(
        &mut buf,
        sample.mesh.vertices().iter().flat_map(|v| [v.x, v.y, v.z]),
    );
    push_f64s(&mut buf, sample.clean.iter().flat_map(|p| [p.x, p.y]));
    push_f64s(&mut buf, sample.noisy.iter().flat_map(|p| [p.x, p.y]));
    push_f64s(&mut buf, sample.sigmas.iter().copied());
    buf
}

struct FloatReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> FloatReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn next(&mut self) -> Result<f64, DatasetError> {
        let end = self.pos + 8;
        if end > self.bytes.len() {
            return Err(DatasetError::Corrupt("blob block truncated".into()));
        }
        let v = f64::from_le_bytes(self.bytes[self.pos..end].try_into().expect("8 bytes"));
        self.pos = end;
        Ok(v)
    }

    fn take(&mut self, count: usize) -> Result<Vec<f64>, DatasetError> {
        (0..count).map(|_| self.next()).collect()
    }
}

fn parse_sample(id: usize, block: &[u8], n: usize, k: usize) -> Result<SyntheticSample, DatasetError> {
    let expected = 8 * (17 + k + 8 * n);
    if block.len() != expected {
        return Err(DatasetError::Corrupt(format!(
            "sample {id}: block length {} (expected {expected})",
            block.len()
        )));
    }
    let mut r = FloatReader::new(block);
    let (qw, qx, qy, qz) = (r.next()?, r.next()?, r.next()?, r.next()?);
    let t = Vector3::new(r.next()?, r.next()?, r.next()?);
    let pose = RigidPose::from_parts(qw, qx, qy, qz, t)
        .map_err(|e| DatasetError::Corrupt(format!("sample {id}: {e}")))?;
    let cam = CameraIntrinsics::new(r.next()?, r.next()?, r.next()?, r.next()?, r.next()?, r.next()?)
        .map_err(|e| DatasetError::Corrupt(format!("sample {id}: {e}")))?;
    let warp = Similarity2D::new(r.next()?, r.next()?, Vector2::new(r.next()?, r.next()?))
        .map_err(|e| DatasetError::Corrupt(format!("sample {id}: {e}")))?;
    let coeffs = PcaCoeffs::new(r.take(k)?)
        .map_err(|e| DatasetError::Corrupt(format!("sample {id}: {e}")))?;
    let mesh = CanonicalMesh::from_flat(&r.take(3 * n)?)
        .map_err(|e| DatasetError::Corrupt(format!("sample {id}: {e}")))?;
    let to_points = |values: Vec<f64>| -> Result<PointSet2, DatasetError> {
        PointSet2::new(
            values
                .chunks_exact(2)
                .map(|c| Vector2::new(c[0], c[1]))
                .collect(),
        )
        .map_err(|e| DatasetError::Corrupt(format!("sample {id}: {e}")))
    };
    let clean = to_points(r.take(2 * n)?)?;
    let noisy = to_points(r.take(2 * n)?)?;
    let sigmas = r.take(n)?;
    Ok(SyntheticSample {
        id,
        pose,
        coeffs,
        mesh,
        clean,
        noisy,
        sigmas,
        warp,
        cam,
    })
}

/// Writes a dataset directory. Layout:
///
/// ```text
/// out/
///   manifest.json    version, config echo, counts, SHA-256 checksums
///   samples.jsonl    {"id", "offset", "len"} per sample
///   blobs.bin        packed little-endian f64 blocks
///   model.pca        PCA model (own header + checksum)
///   shapes/          generating mesh collection for pca-build
/// ```
pub fn write_dataset(
    dir: &Path,
    cfg: &SceneConfig,
    model: &PcaModel,
    shapes: &[CanonicalMesh],
    samples: &[SyntheticSample],
) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;

    let mut blobs = Vec::new();
    let mut records = String::new();
    for sample in samples {
        let block = sample_block(sample);
        let record = SampleRecord {
            id: sample.id,
            offset: blobs.len(),
            len: block.len(),
        };
        records.push_str(
            &serde_json::to_string(&record)
                .map_err(|e| DatasetError::Corrupt(e.to_string()))?,
        );
        records.push('\n');
        blobs.extend_from_slice(&block);
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        n_samples: samples.len(),
        n_vertices: cfg.n_vertices,
        k: cfg.k,
        blobs_sha256: hex_digest(&blobs),
        samples_sha256: hex_digest(records.as_bytes()),
    };

    fs::write(dir.join("blobs.bin"), &blobs)?;
    fs::write(dir.join("samples.jsonl"), records.as_bytes())?;
    let mut manifest_file = fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut manifest_file, &manifest)
        .map_err(|e| DatasetError::Corrupt(e.to_string()))?;
    manifest_file.write_all(b"\n")?;

    pca::write_model(model, &dir.join("model.pca"))?;
    write_shapes(&dir.join("shapes"), shapes)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest: Manifest =
        serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)
            .map_err(|e| DatasetError::Corrupt(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DatasetError::FormatVersionMismatch {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }

    let blobs = fs::read(dir.join("blobs.bin"))?;
    if hex_digest(&blobs) != manifest.blobs_sha256 {
        return Err(DatasetError::ChecksumMismatch {
            file: "blobs.bin".into(),
        });
    }
    let records_bytes = fs::read(dir.join("samples.jsonl"))?;
    if hex_digest(&records_bytes) != manifest.samples_sha256 {
        return Err(DatasetError::ChecksumMismatch {
            file: "samples.jsonl".into(),
        });
    }

    let mut samples = Vec::with_capacity(manifest.n_samples);
    for line in String::from_utf8_lossy(&records_bytes).lines() {
        let record: SampleRecord = serde_json::from_str(line)
            .map_err(|e| DatasetError::Corrupt(format!("samples.jsonl: {e}")))?;
        let end = record.offset + record.len;
        if end > blobs.len() {
            return Err(DatasetError::Corrupt(format!(
                "sample {} extends past blob end",
                record.id
            )));
        }
        samples.push(parse_sample(
            record.id,
            &blobs[record.offset..end],
            manifest.n_vertices,
            manifest.k,
        )?);
    }
    if samples.len() != manifest.n_samples {
        return Err(DatasetError::Corrupt(format!(
            "manifest says {} samples, found {}",
            manifest.n_samples,
            samples.len()
        )));
    }

    let model = pca::read_model(&dir.join("model.pca"))?;
    Ok(Dataset {
        config: manifest.config,
        model,
        samples,
    })
}

/// Writes a bare mesh collection (manifest + packed blobs), the input
/// format of `pca-build --meshes`.
pub fn write_shapes(dir: &Path, shapes: &[CanonicalMesh]) -> Result<(), DatasetError> {
    if shapes.is_empty() {
        return Err(DatasetError::Corrupt("no shapes to write".into()));
    }
    fs::create_dir_all(dir)?;
    let n = shapes[0].len();
    let mut blobs = Vec::with_capacity(8 * 3 * n * shapes.len());
    for mesh in shapes {
        if mesh.len() != n {
            return Err(DatasetError::Corrupt(
                "shape collection has inconsistent vertex counts".into(),
            ));
        }
        push_f64s(&mut blobs, mesh.vertices().iter().flat_map(|v| [v.x, v.y, v.z]));
    }
    let manifest = ShapesManifest {
        format_version: FORMAT_VERSION,
        n_meshes: shapes.len(),
        n_vertices: n,
        blobs_sha256: hex_digest(&blobs),
    };
    fs::write(dir.join("blobs.bin"), &blobs)?;
    let mut manifest_file = fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut manifest_file, &manifest)
        .map_err(|e| DatasetError::Corrupt(e.to_string()))?;
    manifest_file.write_all(b"\n")?;
    Ok(())
}

pub fn read_shapes(dir: &Path) -> Result<Vec<CanonicalMesh>, DatasetError> {
    let manifest: ShapesManifest =
        serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)
            .map_err(|e| DatasetError::Corrupt(format!("shapes manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DatasetError::FormatVersionMismatch {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let blobs = fs::read(dir.join("blobs.bin"))?;
    if hex_digest(&blobs) != manifest.blobs_sha256 {
        return Err(DatasetError::ChecksumMismatch {
            file: "shapes/blobs.bin".into(),
        });
    }
    let block = 8 * 3 * manifest.n_vertices;
    if blobs.len() != block * manifest.n_meshes {
        return Err(DatasetError::Corrupt(format!(
            "shape blob length {} does not match manifest",
            blobs.len()
        )));
    }
    let mut shapes = Vec::with_capacity(manifest.n_meshes);
    for i in 0..manifest.n_meshes {
        let mut r = FloatReader::new(&blobs[i * block..(i + 1) * block]);
        let flat = r.take(3 * manifest.n_vertices)?;
        shapes.push(
            CanonicalMesh::from_flat(&flat)
                .map_err(|e| DatasetError::Corrupt(format!("shape {i}: {e}")))?,
        );
    }
    Ok(shapes)
}
