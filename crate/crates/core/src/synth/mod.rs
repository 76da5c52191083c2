//! Synthetic benchmark scenes: fabricated PCA shape spaces, sampled poses
//! and intrinsics, projected landmarks with heteroscedastic noise, and the
//! dataset serialization used by the CLI.
//!
//! Everything is a pure function of `(config, seed)`. Per-sample
//! randomness comes from a dedicated ChaCha stream derived from the sample
//! index, so generation parallelizes without any ordering dependence.
//!
//! Default ranges put faces close to the camera (z down to 300 mm at up to
//! 1600 px focal length), where the orthographic approximation is
//! measurably wrong and perspective PnP is actually exercised.

pub mod dataset;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    estimate_frontalize_warp, euler_to_pose, project, CameraIntrinsics, EulerAngles,
    FrontalizeConfig, GeometryError, PointSet2, RigidPose, Similarity2D,
};
use crate::pca::{build_pca, reconstruct, CanonicalMesh, PcaCoeffs, PcaError, PcaModel};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    /// The deformation fields failed to span the requested rank even after
    /// the retry budget.
    #[error("shape collection rank deficient after {attempts} attempts")]
    RankDeficient { attempts: usize },
    /// No pose inside the configured ranges kept all landmarks in frame.
    #[error("sample {index}: no projectable pose found in 100 draws")]
    UnprojectableScene { index: usize },
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Everything that determines a synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub n_vertices: usize,
    pub n_shapes: usize,
    pub k: usize,
    pub n_samples: usize,
    pub yaw_range_deg: (f64, f64),
    pub pitch_range_deg: (f64, f64),
    pub roll_range_deg: (f64, f64),
    pub tx_range_mm: (f64, f64),
    pub ty_range_mm: (f64, f64),
    pub tz_range_mm: (f64, f64),
    pub focal_range_px: (f64, f64),
    pub frame_size_px: f64,
    /// Baseline landmark noise (px). Zero gives exact landmarks.
    pub base_sigma_px: f64,
    /// Fraction of landmarks treated as occluded per sample.
    pub occlusion_fraction: f64,
    /// Noise multiplier applied to occluded landmarks.
    pub occlusion_sigma_multiplier: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_vertices: 1220,
            n_shapes: 251,
            k: 250,
            n_samples: 100,
            yaw_range_deg: (-60.0, 60.0),
            pitch_range_deg: (-40.0, 40.0),
            roll_range_deg: (-40.0, 40.0),
            tx_range_mm: (-50.0, 50.0),
            ty_range_mm: (-50.0, 50.0),
            tz_range_mm: (300.0, 1200.0),
            focal_range_px: (600.0, 1600.0),
            frame_size_px: 800.0,
            base_sigma_px: 1.0,
            occlusion_fraction: 0.2,
            occlusion_sigma_multiplier: 5.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_vertices < 6 {
            return Err(SynthError::InvalidConfig(
                "n_vertices must be at least 6".into(),
            ));
        }
        if self.n_shapes < 2 {
            return Err(SynthError::InvalidConfig(
                "n_shapes must be at least 2".into(),
            ));
        }
        if self.k == 0 || self.k > self.n_shapes - 1 {
            return Err(SynthError::InvalidConfig(format!(
                "k must be in 1..={}, got {}",
                self.n_shapes - 1,
                self.k
            )));
        }
        for (name, (lo, hi)) in [
            ("yaw_range_deg", self.yaw_range_deg),
            ("pitch_range_deg", self.pitch_range_deg),
            ("roll_range_deg", self.roll_range_deg),
            ("tx_range_mm", self.tx_range_mm),
            ("ty_range_mm", self.ty_range_mm),
            ("tz_range_mm", self.tz_range_mm),
            ("focal_range_px", self.focal_range_px),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(SynthError::InvalidConfig(format!(
                    "{name} is not a valid range: ({lo}, {hi})"
                )));
            }
        }
        if self.tz_range_mm.0 <= 0.0 {
            return Err(SynthError::InvalidConfig(
                "tz range must be strictly positive".into(),
            ));
        }
        if self.focal_range_px.0 <= 0.0 {
            return Err(SynthError::InvalidConfig(
                "focal range must be strictly positive".into(),
            ));
        }
        if self.frame_size_px <= 0.0 {
            return Err(SynthError::InvalidConfig("frame size must be positive".into()));
        }
        if self.base_sigma_px < 0.0 {
            return Err(SynthError::InvalidConfig("base sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_fraction) {
            return Err(SynthError::InvalidConfig(
                "occlusion fraction must be in [0, 1]".into(),
            ));
        }
        if self.occlusion_sigma_multiplier < 1.0 {
            return Err(SynthError::InvalidConfig(
                "occlusion sigma multiplier must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One fully supervised synthetic frame.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub id: usize,
    pub pose: RigidPose,
    pub coeffs: PcaCoeffs,
    pub mesh: CanonicalMesh,
    /// Landmarks exactly as projected into the full frame.
    pub clean: PointSet2,
    /// Landmarks after heteroscedastic noise.
    pub noisy: PointSet2,
    /// Per-point noise σ actually used (px).
    pub sigmas: Vec<f64>,
    /// Frontalization warp from the full frame into the 256×256 crop.
    pub warp: Similarity2D,
    pub cam: CameraIntrinsics,
}

/// Crop size the frontalization warp targets.
pub const CROP_SIZE: f64 = 256.0;

// ellipsoid half-axes of the base head shape (mm)
const RADII: Vector3<f64> = Vector3::new(75.0, 95.0, 65.0);
// deformation modes beyond k, amplitude of the largest, spectral decay
const EXTRA_MODES: usize = 50;
const MODE_AMPLITUDE_MM: f64 = 3.0;
const MODE_DECAY: f64 = 0.8;

const SHAPE_STREAM: u64 = 1 << 40;
const SAMPLE_STREAM: u64 = 1 << 41;

fn uniform(rng: &mut ChaCha12Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

/// Evenly spread base vertices: a Fibonacci sphere stretched to the head
/// ellipsoid.
fn base_mesh(n: usize) -> CanonicalMesh {
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    let vertices = (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = 2.0 * std::f64::consts::PI * (i as f64) / golden;
            Vector3::new(
                RADII.x * r * phi.cos(),
                RADII.y * y,
                RADII.z * r * phi.sin(),
            )
        })
        .collect();
    CanonicalMesh::new(vertices).expect("finite by construction")
}

struct DeformationMode {
    direction: Vector3<f64>,
    frequency: Vector3<f64>,
    phase: f64,
    amplitude: f64,
}

fn random_unit(rng: &mut ChaCha12Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Fabricates a mesh collection with a controlled spectrum and builds its
/// PCA model.
///
/// Each shape is the base ellipsoid plus a random combination of smooth
/// sinusoidal deformation fields with decaying amplitudes; `k + 50` modes
/// keep the centered collection at full rank `n_shapes − 1` with margin.
/// Deterministic under the config seed; a rank-deficient draw retries on a
/// fresh stream up to 5 times.
pub fn gen_shape_space(cfg: &SceneConfig) -> Result<(PcaModel, Vec<CanonicalMesh>), SynthError> {
    cfg.validate()?;
    let base = base_mesh(cfg.n_vertices);
    let n_modes = cfg.k + EXTRA_MODES;

    for attempt in 0..5 {
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SHAPE_STREAM + attempt);

        let modes: Vec<DeformationMode> = (0..n_modes)
            .map(|b| DeformationMode {
                direction: random_unit(&mut rng),
                frequency: random_unit(&mut rng) * rng.random_range(0.01..0.06),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                amplitude: MODE_AMPLITUDE_MM / (1.0 + b as f64).powf(MODE_DECAY),
            })
            .collect();

        let meshes: Vec<CanonicalMesh> = (0..cfg.n_shapes)
            .map(|_| {
                let coeffs: Vec<f64> = modes
                    .iter()
                    .map(|m| m.amplitude * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let vertices = base
                    .vertices()
                    .iter()
                    .map(|v| {
                        let mut out = *v;
                        for (m, &c) in modes.iter().zip(&coeffs) {
                            out += c * m.direction * (m.frequency.dot(v) + m.phase).sin();
                        }
                        out
                    })
                    .collect();
                CanonicalMesh::new(vertices).expect("finite by construction")
            })
            .collect();

        match build_pca(&meshes, cfg.k) {
            Ok(model) => return Ok((model, meshes)),
            Err(PcaError::RankDeficient { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(SynthError::RankDeficient { attempts: 5 })
}

/// Generates sample `index` against a shape model. Deterministic in
/// `(cfg.seed, index)` regardless of call order.
pub fn gen_sample(
    model: &PcaModel,
    cfg: &SceneConfig,
    index: usize,
) -> Result<SyntheticSample, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SAMPLE_STREAM + index as u64);

    let coeffs = PcaCoeffs::from_vector(nalgebra::DVector::from_iterator(
        model.k(),
        model
            .component_scales()
            .iter()
            .map(|s| s * rng.sample::<f64, _>(StandardNormal)),
    ));
    let mesh = reconstruct(model, &coeffs)?;

    let half = cfg.frame_size_px / 2.0;
    let mut found = None;
    for _ in 0..100 {
        let yaw = uniform(&mut rng, cfg.yaw_range_deg);
        let pitch = uniform(&mut rng, cfg.pitch_range_deg);
        let roll = uniform(&mut rng, cfg.roll_range_deg);
        let t = Vector3::new(
            uniform(&mut rng, cfg.tx_range_mm),
            uniform(&mut rng, cfg.ty_range_mm),
            uniform(&mut rng, cfg.tz_range_mm),
        );
        let focal = uniform(&mut rng, cfg.focal_range_px);
        let cam = CameraIntrinsics::new(
            focal,
            focal,
            half,
            half,
            cfg.frame_size_px,
            cfg.frame_size_px,
        )
        .map_err(SynthError::Geometry)?;
        let pose = RigidPose::new(
            euler_to_pose(&EulerAngles::new(yaw, pitch, roll)).rotation(),
            t,
        );
        match project(mesh.points(), &pose, &cam) {
            Ok(clean) => {
                let in_frame = clean.iter().all(|p| {
                    (0.0..cfg.frame_size_px).contains(&p.x)
                        && (0.0..cfg.frame_size_px).contains(&p.y)
                });
                if in_frame {
                    found = Some((pose, cam, clean));
                    break;
                }
            }
            Err(GeometryError::NonPositiveDepth { .. }) => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (pose, cam, clean) = found.ok_or(SynthError::UnprojectableScene { index })?;

    let n = cfg.n_vertices;
    let mut sigmas = vec![cfg.base_sigma_px; n];
    let n_occluded = ((cfg.occlusion_fraction * n as f64).round() as usize).min(n);
    // partial Fisher-Yates over the index set picks the occluded subset
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..n_occluded {
        let j = rng.random_range(i..n);
        indices.swap(i, j);
        sigmas[indices[i]] = cfg.base_sigma_px * cfg.occlusion_sigma_multiplier;
    }

    let noisy = PointSet2::new(
        clean
            .iter()
            .zip(&sigmas)
            .map(|(p, &s)| {
                p + Vector2::new(
                    s * rng.sample::<f64, _>(StandardNormal),
                    s * rng.sample::<f64, _>(StandardNormal),
                )
            })
            .collect(),
    )
    .map_err(SynthError::Geometry)?;

    let warp = estimate_frontalize_warp(&clean, CROP_SIZE, &FrontalizeConfig::default())?;

    Ok(SyntheticSample {
        id: index,
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

/// Shape space plus all samples for a config.
pub fn gen_dataset(
    cfg: &SceneConfig,
) -> Result<(PcaModel, Vec<CanonicalMesh>, Vec<SyntheticSample>), SynthError> {
    use rayon::prelude::*;
    let (model, shapes) = gen_shape_space(cfg)?;
    let samples: Result<Vec<_>, _> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| gen_sample(&model, cfg, i))
        .collect();
    Ok((model, shapes, samples?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::unwarp;
    use crate::pca::fit_coeffs;
    use crate::pnp::{solve_pnp_dlt, solve_pnp_lm, PnPProblem};

    fn small_cfg() -> SceneConfig {
        SceneConfig {
            n_vertices: 60,
            n_shapes: 20,
            k: 12,
            n_samples: 4,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn shape_space_deterministic_under_seed() {
        let cfg = small_cfg();
        let (_, a) = gen_shape_space(&cfg).unwrap();
        let (_, b) = gen_shape_space(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (ma, mb) in a.iter().zip(&b) {
            assert_eq!(ma.vertices(), mb.vertices());
        }
    }

    #[test]
    fn shape_space_spans_requested_rank() {
        let cfg = small_cfg();
        let (model, meshes) = gen_shape_space(&cfg).unwrap();
        assert_eq!(model.k(), cfg.k);
        assert_eq!(meshes.len(), cfg.n_shapes);
        // singular values all well above the rank tolerance
        assert!(model.component_scales().iter().all(|&s| s > 1e-8));
    }

    #[test]
    fn full_scale_shape_space_builds_250_components() {
        let cfg = SceneConfig {
            n_vertices: 200,
            ..SceneConfig::default()
        };
        let (model, meshes) = gen_shape_space(&cfg).unwrap();
        assert_eq!(meshes.len(), 251);
        assert_eq!(model.k(), 250);
    }

    #[test]
    fn zero_noise_sample_has_exact_landmarks() {
        let cfg = SceneConfig {
            base_sigma_px: 0.0,
            ..small_cfg()
        };
        let (model, _) = gen_shape_space(&cfg).unwrap();
        let s = gen_sample(&model, &cfg, 0).unwrap();
        for (a, b) in s.noisy.iter().zip(s.clean.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn clean_landmarks_inside_frame() {
        let cfg = small_cfg();
        let (model, _) = gen_shape_space(&cfg).unwrap();
        for i in 0..cfg.n_samples {
            let s = gen_sample(&model, &cfg, i).unwrap();
            for p in s.clean.iter() {
                assert!((0.0..cfg.frame_size_px).contains(&p.x));
                assert!((0.0..cfg.frame_size_px).contains(&p.y));
            }
        }
    }

    #[test]
    fn noise_matches_configured_sigma() {
        let cfg = SceneConfig {
            n_vertices: 2500,
            n_shapes: 8,
            k: 4,
            n_samples: 5,
            base_sigma_px: 1.5,
            occlusion_fraction: 0.0,
            ..SceneConfig::default()
        };
        let (model, _) = gen_shape_space(&cfg).unwrap();
        let mut devs = Vec::new();
        for i in 0..cfg.n_samples {
            let s = gen_sample(&model, &cfg, i).unwrap();
            for (n, c) in s.noisy.iter().zip(s.clean.iter()) {
                devs.push(n.x - c.x);
                devs.push(n.y - c.y);
            }
        }
        let var = devs.iter().map(|d| d * d).sum::<f64>() / devs.len() as f64;
        let std = var.sqrt();
        assert!(
            (std - 1.5).abs() / 1.5 < 0.05,
            "empirical std {std} vs configured 1.5"
        );
    }

    #[test]
    fn occluded_subset_gets_inflated_sigma() {
        let cfg = small_cfg();
        let (model, _) = gen_shape_space(&cfg).unwrap();
        let s = gen_sample(&model, &cfg, 1).unwrap();
        let inflated = s
            .sigmas
            .iter()
            .filter(|&&x| x > cfg.base_sigma_px * 1.5)
            .count();
        let expected = (cfg.occlusion_fraction * cfg.n_vertices as f64).round() as usize;
        assert_eq!(inflated, expected);
    }

    #[test]
    fn solver_recovers_ground_truth_from_clean_landmarks() {
        let cfg = small_cfg();
        let (model, _) = gen_shape_space(&cfg).unwrap();
        for i in 0..cfg.n_samples {
            let s = gen_sample(&model, &cfg, i).unwrap();
            let p = PnPProblem::new(s.mesh.points().clone(), s.clean.clone(), None, s.cam)
                .unwrap();
            let sol = solve_pnp_lm(&p, &solve_pnp_dlt(&p).unwrap()).unwrap();
            let rot_err = (sol.pose.rotation().inverse() * s.pose.rotation()).angle();
            let t_err = (sol.pose.translation() - s.pose.translation()).norm();
            assert!(rot_err < 1e-6, "rotation error {rot_err}");
            assert!(t_err < 1e-3, "translation error {t_err}");
        }
    }

    #[test]
    fn gt_coeffs_recoverable_from_gt_mesh() {
        let cfg = small_cfg();
        let (model, _) = gen_shape_space(&cfg).unwrap();
        let s = gen_sample(&model, &cfg, 2).unwrap();
        let fitted = fit_coeffs(&model, &s.mesh).unwrap();
        assert!((fitted.as_vector() - s.coeffs.as_vector()).amax() < 1e-9);
    }

    #[test]
    fn crop_predictions_unwarp_into_frame_bounds() {
        let cfg = small_cfg();
        let (model, _) = gen_shape_space(&cfg).unwrap();
        let s = gen_sample(&model, &cfg, 3).unwrap();
        let cropped = crate::geometry::apply_warp(&s.warp, &s.clean);
        let back = unwarp(&s.warp, &cropped);
        for (a, b) in back.iter().zip(s.clean.iter()) {
            assert!((a - b).norm() < 1e-9);
        }
        for p in back.iter() {
            assert!((0.0..cfg.frame_size_px).contains(&p.x));
            assert!((0.0..cfg.frame_size_px).contains(&p.y));
        }
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        let mut cfg = small_cfg();
        cfg.tz_range_mm = (-10.0, 100.0);
        assert!(matches!(cfg.validate(), Err(SynthError::InvalidConfig(_))));
        let mut cfg = small_cfg();
        cfg.occlusion_fraction = 1.5;
        assert!(matches!(cfg.validate(), Err(SynthError::InvalidConfig(_))));
        let mut cfg = small_cfg();
        cfg.k = cfg.n_shapes;
        assert!(matches!(cfg.validate(), Err(SynthError::InvalidConfig(_))));
    }
}
