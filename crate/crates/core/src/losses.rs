//! Training losses with analytic gradients: Gaussian negative
//! log-likelihood over landmarks, vertex distance cost, weighted parameter
//! distance cost, and their weighted total. The PnP loss lives in
//! [`crate::diff_pnp`] since it needs the solver; its result plugs into
//! [`total_loss`] as a [`LossBundle`] like the others.

use nalgebra::{DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PointSet2;
use crate::pca::{CanonicalMesh, PcaCoeffs, PcaModel};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Predicted 2D landmarks with per-point uncertainty.
///
/// σ is stored through its log, `σ_i = exp(s_i)`, so it stays positive
/// under unconstrained gradient updates and the likelihood never needs
/// clamping. One scalar σ per landmark covers both coordinates.
#[derive(Debug, Clone)]
pub struct LandmarkSet {
    mu: Vec<Vector2<f64>>,
    log_sigma: Vec<f64>,
}

impl LandmarkSet {
    pub fn from_mu_sigma(mu: Vec<Vector2<f64>>, sigma: Vec<f64>) -> Result<Self, LossError> {
        if mu.len() != sigma.len() {
            return Err(LossError::DimensionMismatch {
                expected: mu.len(),
                actual: sigma.len(),
            });
        }
        let mut log_sigma = Vec::with_capacity(sigma.len());
        for &s in &sigma {
            if !(s.is_finite() && s > 0.0) {
                return Err(LossError::InvalidArgument(format!(
                    "sigma must be positive and finite, got {s}"
                )));
            }
            log_sigma.push(s.ln());
        }
        Ok(Self { mu, log_sigma })
    }

    pub fn from_mu_log_sigma(mu: Vec<Vector2<f64>>, log_sigma: Vec<f64>) -> Result<Self, LossError> {
        if mu.len() != log_sigma.len() {
            return Err(LossError::DimensionMismatch {
                expected: mu.len(),
                actual: log_sigma.len(),
            });
        }
        Ok(Self { mu, log_sigma })
    }

    /// All σ frozen at 1 (`s = 0`); with these weights the GNLL reduces to
    /// half the squared landmark error, the plain-MSE baseline.
    pub fn with_unit_sigma(mu: Vec<Vector2<f64>>) -> Self {
        let log_sigma = vec![0.0; mu.len()];
        Self { mu, log_sigma }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn mu(&self) -> &[Vector2<f64>] {
        &self.mu
    }

    pub fn log_sigmas(&self) -> &[f64] {
        &self.log_sigma
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.log_sigma[i].exp()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|s| s.exp()).collect()
    }
}

/// Value and gradients of the Gaussian negative log-likelihood.
#[derive(Debug, Clone)]
pub struct GnllResult {
    pub value: f64,
    pub d_mu: Vec<Vector2<f64>>,
    /// Gradient with respect to the log-σ parameters.
    pub d_log_sigma: Vec<f64>,
}

/// `Σ_i [ log σ_i² + ‖μ̂_i − μ_i‖² / (2 σ_i²) ]` over the landmark set,
/// summed (not averaged) over points.
///
/// Expressed in `s = log σ`: `Σ_i [ 2 s_i + e_i² exp(−2 s_i) / 2 ]`, with
/// `∂/∂μ̂_i = (μ̂_i − μ_i)/σ_i²` and `∂/∂s_i = 2 − e_i²/σ_i²`; the latter
/// vanishes exactly at the per-point optimum `σ_i² = e_i²/2`.
pub fn gnll(pred: &LandmarkSet, gt_mu: &PointSet2) -> Result<GnllResult, LossError> {
    if pred.len() != gt_mu.len() {
        return Err(LossError::DimensionMismatch {
            expected: pred.len(),
            actual: gt_mu.len(),
        });
    }
    let mut value = 0.0;
    let mut d_mu = Vec::with_capacity(pred.len());
    let mut d_log_sigma = Vec::with_capacity(pred.len());
    for i in 0..pred.len() {
        let s = pred.log_sigma[i];
        let inv_var = (-2.0 * s).exp();
        let err = pred.mu[i] - gt_mu[i];
        let e2 = err.norm_squared();
        value += 2.0 * s + 0.5 * e2 * inv_var;
        d_mu.push(err * inv_var);
        d_log_sigma.push(2.0 - e2 * inv_var);
    }
    Ok(GnllResult {
        value,
        d_mu,
        d_log_sigma,
    })
}

/// Value and gradient of the vertex distance cost.
#[derive(Debug, Clone)]
pub struct VdcResult {
    pub value: f64,
    pub d_pred: Vec<Vector3<f64>>,
}

/// Mean over vertices of the squared Euclidean distance (mm²); the mean
/// reduction keeps the loss weight meaningful across mesh resolutions.
/// Gradient: `2 (pred − gt) / N`.
pub fn vdc(pred: &CanonicalMesh, gt: &CanonicalMesh) -> Result<VdcResult, LossError> {
    if pred.len() != gt.len() {
        return Err(LossError::DimensionMismatch {
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut d_pred = Vec::with_capacity(pred.len());
    for (p, g) in pred.vertices().iter().zip(gt.vertices()) {
        let d = p - g;
        value += d.norm_squared();
        d_pred.push(2.0 * d / n);
    }
    Ok(VdcResult {
        value: value / n,
        d_pred,
    })
}

/// Per-coefficient weights for the weighted parameter distance cost:
/// non-negative, normalized to sum to K.
#[derive(Debug, Clone)]
pub struct WpdcWeights(DVector<f64>);

impl WpdcWeights {
    /// Normalizes raw non-negative weights so they sum to K.
    pub fn new(raw: Vec<f64>) -> Result<Self, LossError> {
        if raw.is_empty() {
            return Err(LossError::InvalidArgument("weights must be non-empty".into()));
        }
        let mut sum = 0.0;
        for &w in &raw {
            if !(w.is_finite() && w >= 0.0) {
                return Err(LossError::InvalidArgument(format!(
                    "weights must be non-negative and finite, got {w}"
                )));
            }
            sum += w;
        }
        if sum <= 0.0 {
            return Err(LossError::InvalidArgument(
                "weights must not all be zero".into(),
            ));
        }
        let k = raw.len() as f64;
        Ok(Self(DVector::from_iterator(
            raw.len(),
            raw.iter().map(|w| w * k / sum),
        )))
    }

    pub fn ones(k: usize) -> Self {
        Self(DVector::from_element(k, 1.0))
    }

    /// Weights proportional to the model's component scales: coefficients
    /// that move more surface get more weight. This is the default policy;
    /// any non-negative weighting can be swapped in through [`Self::new`].
    pub fn from_model(model: &PcaModel) -> Result<Self, LossError> {
        Self::new(model.component_scales().iter().copied().collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Value and gradient of the weighted parameter distance cost.
#[derive(Debug, Clone)]
pub struct WpdcResult {
    pub value: f64,
    pub d_pred: Vec<f64>,
}

/// `‖W ⊙ (c − ĉ)‖² = Σ_i (W_i (c_i − ĉ_i))²` with gradient
/// `2 W_i² (c_i − ĉ_i)` in the prediction.
pub fn wpdc(pred: &PcaCoeffs, gt: &PcaCoeffs, w: &WpdcWeights) -> Result<WpdcResult, LossError> {
    if pred.len() != gt.len() {
        return Err(LossError::DimensionMismatch {
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    if w.len() != pred.len() {
        return Err(LossError::DimensionMismatch {
            expected: pred.len(),
            actual: w.len(),
        });
    }
    let mut value = 0.0;
    let mut d_pred = Vec::with_capacity(pred.len());
    for i in 0..pred.len() {
        let wi = w.0[i];
        let d = pred[i] - gt[i];
        value += (wi * d) * (wi * d);
        d_pred.push(2.0 * wi * wi * d);
    }
    Ok(WpdcResult { value, d_pred })
}

/// Loss weights `λ1..λ4` for GNLL, VDC, WPDC and the PnP loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TotalLossConfig {
    pub lambda_gnll: f64,
    pub lambda_vdc: f64,
    pub lambda_wpdc: f64,
    pub lambda_pnp: f64,
}

impl Default for TotalLossConfig {
    fn default() -> Self {
        Self {
            lambda_gnll: 0.01,
            lambda_vdc: 20.0,
            lambda_wpdc: 10.0,
            lambda_pnp: 2.0,
        }
    }
}

impl TotalLossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("lambda_gnll", self.lambda_gnll),
            ("lambda_vdc", self.lambda_vdc),
            ("lambda_wpdc", self.lambda_wpdc),
            ("lambda_pnp", self.lambda_pnp),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::InvalidArgument(format!(
                    "{name} must be non-negative and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// A loss value with its gradients expressed over the shared free
/// variables of the pipeline: landmark means μ, landmark log-σ, and PCA
/// coefficients. Empty gradient vectors mean "no dependence".
///
/// Mesh-space gradients must be pulled back to coefficients (see
/// [`PcaModel::pullback_mesh_grad`]) before aggregation, which is what
/// makes the weighted sum chain-consistent across parts sharing inputs.
#[derive(Debug, Clone, Default)]
pub struct LossBundle {
    pub value: f64,
    pub d_mu: Vec<Vector2<f64>>,
    pub d_log_sigma: Vec<f64>,
    pub d_coeffs: Vec<f64>,
}

impl LossBundle {
    pub fn from_gnll(r: &GnllResult) -> Self {
        Self {
            value: r.value,
            d_mu: r.d_mu.clone(),
            d_log_sigma: r.d_log_sigma.clone(),
            d_coeffs: Vec::new(),
        }
    }

    pub fn from_vdc(r: &VdcResult, model: &PcaModel) -> Result<Self, LossError> {
        let d = model
            .pullback_mesh_grad(&r.d_pred)
            .map_err(|e| LossError::InvalidArgument(e.to_string()))?;
        Ok(Self {
            value: r.value,
            d_mu: Vec::new(),
            d_log_sigma: Vec::new(),
            d_coeffs: d.as_slice().to_vec(),
        })
    }

    pub fn from_wpdc(r: &WpdcResult) -> Self {
        Self {
            value: r.value,
            d_mu: Vec::new(),
            d_log_sigma: Vec::new(),
            d_coeffs: r.d_pred.clone(),
        }
    }
}

/// Weighted sum of the four loss parts: value `Σ λ_i L_i` and, per shared
/// variable, the weighted sum of part gradients.
pub fn total_loss(
    gnll_part: &LossBundle,
    vdc_part: &LossBundle,
    wpdc_part: &LossBundle,
    pnp_part: &LossBundle,
    cfg: &TotalLossConfig,
) -> Result<LossBundle, LossError> {
    cfg.validate()?;
    let parts = [
        (cfg.lambda_gnll, gnll_part),
        (cfg.lambda_vdc, vdc_part),
        (cfg.lambda_wpdc, wpdc_part),
        (cfg.lambda_pnp, pnp_part),
    ];
    let mut out = LossBundle::default();
    for (lambda, part) in parts {
        out.value += lambda * part.value;
        accumulate_vec2(&mut out.d_mu, &part.d_mu, lambda)?;
        accumulate_scalar(&mut out.d_log_sigma, &part.d_log_sigma, lambda)?;
        accumulate_scalar(&mut out.d_coeffs, &part.d_coeffs, lambda)?;
    }
    Ok(out)
}

fn accumulate_vec2(
    acc: &mut Vec<Vector2<f64>>,
    part: &[Vector2<f64>],
    lambda: f64,
) -> Result<(), LossError> {
    if part.is_empty() {
        return Ok(());
    }
    if acc.is_empty() {
        acc.resize(part.len(), Vector2::zeros());
    }
    if acc.len() != part.len() {
        return Err(LossError::DimensionMismatch {
            expected: acc.len(),
            actual: part.len(),
        });
    }
    for (a, p) in acc.iter_mut().zip(part) {
        *a += lambda * p;
    }
    Ok(())
}

fn accumulate_scalar(acc: &mut Vec<f64>, part: &[f64], lambda: f64) -> Result<(), LossError> {
    if part.is_empty() {
        return Ok(());
    }
    if acc.is_empty() {
        acc.resize(part.len(), 0.0);
    }
    if acc.len() != part.len() {
        return Err(LossError::DimensionMismatch {
            expected: acc.len(),
            actual: part.len(),
        });
    }
    for (a, p) in acc.iter_mut().zip(part) {
        *a += lambda * p;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pca::{build_pca, fit_coeffs, reconstruct, tests::random_meshes};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_points2(rng: &mut ChaCha12Rng, n: usize) -> Vec<Vector2<f64>> {
        (0..n)
            .map(|_| {
                Vector2::new(
                    rng.random::<f64>() * 800.0,
                    rng.random::<f64>() * 800.0,
                )
            })
            .collect()
    }

    #[test]
    fn gnll_with_unit_sigma_is_half_squared_error() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let gt = random_points2(&mut rng, 50);
        let pred: Vec<Vector2<f64>> = gt
            .iter()
            .map(|p| p + Vector2::new(rng.random::<f64>() * 4.0, rng.random::<f64>() * 4.0))
            .collect();
        let lmk = LandmarkSet::with_unit_sigma(pred.clone());
        let gt_set = PointSet2::new(gt.clone()).unwrap();
        let result = gnll(&lmk, &gt_set).unwrap();
        let expected: f64 = pred
            .iter()
            .zip(&gt)
            .map(|(p, g)| 0.5 * (p - g).norm_squared())
            .sum();
        assert_eq!(result.value, expected);
    }

    #[test]
    fn gnll_stationary_sigma_is_half_error_squared() {
        // closed form: d/ds vanishes at σ² = e²/2
        let gt = PointSet2::new(vec![Vector2::new(0.0, 0.0)]).unwrap();
        let e = 3.0;
        let sigma = (e * e / 2.0f64).sqrt();
        let lmk =
            LandmarkSet::from_mu_sigma(vec![Vector2::new(e, 0.0)], vec![sigma]).unwrap();
        let result = gnll(&lmk, &gt).unwrap();
        assert!(result.d_log_sigma[0].abs() < 1e-12);
    }

    #[test]
    fn gnll_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let gt_raw = random_points2(&mut rng, 12);
        let gt = PointSet2::new(gt_raw.clone()).unwrap();
        let mu: Vec<Vector2<f64>> = gt_raw
            .iter()
            .map(|p| p + Vector2::new(rng.random::<f64>() * 3.0, rng.random::<f64>() * 3.0))
            .collect();
        let log_sigma: Vec<f64> = (0..12).map(|_| rng.random::<f64>() - 0.5).collect();
        let lmk = LandmarkSet::from_mu_log_sigma(mu.clone(), log_sigma.clone()).unwrap();
        let base = gnll(&lmk, &gt).unwrap();

        let h = 1e-6;
        let mut max_rel = 0.0f64;
        for i in 0..mu.len() {
            for axis in 0..2 {
                let mut mu_p = mu.clone();
                let mut mu_m = mu.clone();
                mu_p[i][axis] += h;
                mu_m[i][axis] -= h;
                let fp = gnll(
                    &LandmarkSet::from_mu_log_sigma(mu_p, log_sigma.clone()).unwrap(),
                    &gt,
                )
                .unwrap()
                .value;
                let fm = gnll(
                    &LandmarkSet::from_mu_log_sigma(mu_m, log_sigma.clone()).unwrap(),
                    &gt,
                )
                .unwrap()
                .value;
                let fd = (fp - fm) / (2.0 * h);
                let a = base.d_mu[i][axis];
                max_rel = max_rel.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-9));
            }
            let mut s_p = log_sigma.clone();
            let mut s_m = log_sigma.clone();
            s_p[i] += h;
            s_m[i] -= h;
            let fp = gnll(&LandmarkSet::from_mu_log_sigma(mu.clone(), s_p).unwrap(), &gt)
                .unwrap()
                .value;
            let fm = gnll(&LandmarkSet::from_mu_log_sigma(mu.clone(), s_m).unwrap(), &gt)
                .unwrap()
                .value;
            let fd = (fp - fm) / (2.0 * h);
            let a = base.d_log_sigma[i];
            max_rel = max_rel.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-9));
        }
        assert!(max_rel < 1e-6, "GNLL FD mismatch: {max_rel}");
    }

    #[test]
    fn gnll_bounded_below_by_per_point_optimum() {
        // per point, min over sigma of [log sigma^2 + e^2/(2 sigma^2)] is
        // 1 + log(e^2/2), attained at sigma^2 = e^2/2
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        for _ in 0..200 {
            let n = 8;
            let gt_raw = random_points2(&mut rng, n);
            let mu: Vec<Vector2<f64>> = gt_raw
                .iter()
                .map(|p| {
                    p + Vector2::new(
                        0.1 + rng.random::<f64>() * 5.0,
                        0.1 + rng.random::<f64>() * 5.0,
                    )
                })
                .collect();
            let log_sigma: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() - 0.5) * 4.0).collect();
            let bound: f64 = mu
                .iter()
                .zip(&gt_raw)
                .map(|(m, g)| 1.0 + ((m - g).norm_squared() / 2.0).ln())
                .sum();
            let value = gnll(
                &LandmarkSet::from_mu_log_sigma(mu.clone(), log_sigma).unwrap(),
                &PointSet2::new(gt_raw.clone()).unwrap(),
            )
            .unwrap()
            .value;
            assert!(value >= bound - 1e-9, "gnll {value} below bound {bound}");
        }
    }

    #[test]
    fn vdc_zero_for_identical_meshes() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mesh = random_meshes(&mut rng, 1, 30).pop().unwrap();
        let r = vdc(&mesh, &mesh).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn vdc_constant_offset_equals_offset_norm_squared() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mesh = random_meshes(&mut rng, 1, 30).pop().unwrap();
        let d = Vector3::new(1.0, -2.0, 2.0);
        let shifted =
            CanonicalMesh::new(mesh.vertices().iter().map(|v| v + d).collect()).unwrap();
        let r = vdc(&shifted, &mesh).unwrap();
        assert!((r.value - d.norm_squared()).abs() < 1e-9);
    }

    #[test]
    fn vdc_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let gt = random_meshes(&mut rng, 1, 10).pop().unwrap();
        let pred = random_meshes(&mut rng, 1, 10).pop().unwrap();
        let base = vdc(&pred, &gt).unwrap();
        let h = 1e-4;
        let mut max_rel = 0.0f64;
        for i in 0..pred.len() {
            for axis in 0..3 {
                let mut vp: Vec<Vector3<f64>> = pred.vertices().to_vec();
                let mut vm = vp.clone();
                vp[i][axis] += h;
                vm[i][axis] -= h;
                let fp = vdc(&CanonicalMesh::new(vp).unwrap(), &gt).unwrap().value;
                let fm = vdc(&CanonicalMesh::new(vm).unwrap(), &gt).unwrap().value;
                let fd = (fp - fm) / (2.0 * h);
                let a = base.d_pred[i][axis];
                max_rel = max_rel.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-9));
            }
        }
        assert!(max_rel < 1e-8, "VDC FD mismatch: {max_rel}");
    }

    #[test]
    fn wpdc_zero_for_equal_coeffs() {
        let c = PcaCoeffs::new(vec![1.0, -2.0, 3.0]).unwrap();
        let w = WpdcWeights::ones(3);
        assert_eq!(wpdc(&c, &c, &w).unwrap().value, 0.0);
    }

    #[test]
    fn wpdc_with_unit_weights_is_plain_squared_l2() {
        let a = PcaCoeffs::new(vec![1.0, 2.0, 3.0]).unwrap();
        let b = PcaCoeffs::new(vec![0.0, 4.0, 1.0]).unwrap();
        let w = WpdcWeights::ones(3);
        let r = wpdc(&a, &b, &w).unwrap();
        assert!((r.value - (1.0 + 4.0 + 4.0)).abs() < 1e-12);
    }

    #[test]
    fn wpdc_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let pred: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let gt: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let w = WpdcWeights::new((0..8).map(|_| rng.random::<f64>() + 0.1).collect()).unwrap();
        let base = wpdc(
            &PcaCoeffs::new(pred.clone()).unwrap(),
            &PcaCoeffs::new(gt.clone()).unwrap(),
            &w,
        )
        .unwrap();
        let h = 1e-4;
        let mut max_rel = 0.0f64;
        for i in 0..8 {
            let mut cp = pred.clone();
            let mut cm = pred.clone();
            cp[i] += h;
            cm[i] -= h;
            let fp = wpdc(
                &PcaCoeffs::new(cp).unwrap(),
                &PcaCoeffs::new(gt.clone()).unwrap(),
                &w,
            )
            .unwrap()
            .value;
            let fm = wpdc(
                &PcaCoeffs::new(cm).unwrap(),
                &PcaCoeffs::new(gt.clone()).unwrap(),
                &w,
            )
            .unwrap()
            .value;
            let fd = (fp - fm) / (2.0 * h);
            let a = base.d_pred[i];
            max_rel = max_rel.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-9));
        }
        assert!(max_rel < 1e-8, "WPDC FD mismatch: {max_rel}");
    }

    #[test]
    fn wpdc_weights_normalized_to_sum_k() {
        let w = WpdcWeights::new(vec![1.0, 3.0, 4.0, 2.0]).unwrap();
        let sum: f64 = w.as_slice().iter().sum();
        assert!((sum - 4.0).abs() < 1e-12);
    }

    #[test]
    fn default_lambdas_match_training_configuration() {
        let cfg = TotalLossConfig::default();
        assert_eq!(
            (cfg.lambda_gnll, cfg.lambda_vdc, cfg.lambda_wpdc, cfg.lambda_pnp),
            (0.01, 20.0, 10.0, 2.0)
        );
    }

    #[test]
    fn total_loss_of_zero_parts_is_zero() {
        let zero = LossBundle::default();
        let total =
            total_loss(&zero, &zero, &zero, &zero, &TotalLossConfig::default()).unwrap();
        assert_eq!(total.value, 0.0);
        assert!(total.d_mu.is_empty());
    }

    #[test]
    fn total_loss_aggregates_shared_gradients() {
        // vdc and wpdc both act on coefficients; their weighted gradients add
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let meshes = random_meshes(&mut rng, 10, 20);
        let model = build_pca(&meshes, 4).unwrap();
        let gt_c = fit_coeffs(&model, &meshes[0]).unwrap();
        let pred_c = PcaCoeffs::new(gt_c.as_slice().iter().map(|c| c + 0.5).collect()).unwrap();
        let pred_mesh = reconstruct(&model, &pred_c).unwrap();
        let gt_mesh = reconstruct(&model, &gt_c).unwrap();

        let vdc_part =
            LossBundle::from_vdc(&vdc(&pred_mesh, &gt_mesh).unwrap(), &model).unwrap();
        let w = WpdcWeights::from_model(&model).unwrap();
        let wpdc_part = LossBundle::from_wpdc(&wpdc(&pred_c, &gt_c, &w).unwrap());
        let zero = LossBundle::default();
        let cfg = TotalLossConfig::default();
        let total = total_loss(&zero, &vdc_part, &wpdc_part, &zero, &cfg).unwrap();

        assert!(
            (total.value - (cfg.lambda_vdc * vdc_part.value + cfg.lambda_wpdc * wpdc_part.value))
                .abs()
                < 1e-12
        );
        for i in 0..4 {
            let expected =
                cfg.lambda_vdc * vdc_part.d_coeffs[i] + cfg.lambda_wpdc * wpdc_part.d_coeffs[i];
            assert!((total.d_coeffs[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences_through_coeffs() {
        // FD through the composite c ↦ λ2·vdc(mesh(c)) + λ3·wpdc(c)
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let meshes = random_meshes(&mut rng, 10, 20);
        let model = build_pca(&meshes, 4).unwrap();
        let gt_c = fit_coeffs(&model, &meshes[1]).unwrap();
        let gt_mesh = reconstruct(&model, &gt_c).unwrap();
        let w = WpdcWeights::from_model(&model).unwrap();
        let cfg = TotalLossConfig::default();
        let zero = LossBundle::default();

        let eval = |c: &[f64]| -> (f64, Vec<f64>) {
            let coeffs = PcaCoeffs::new(c.to_vec()).unwrap();
            let mesh = reconstruct(&model, &coeffs).unwrap();
            let vdc_part = LossBundle::from_vdc(&vdc(&mesh, &gt_mesh).unwrap(), &model).unwrap();
            let wpdc_part = LossBundle::from_wpdc(&wpdc(&coeffs, &gt_c, &w).unwrap());
            let total = total_loss(&zero, &vdc_part, &wpdc_part, &zero, &cfg).unwrap();
            (total.value, total.d_coeffs)
        };

        let c0: Vec<f64> = gt_c.as_slice().iter().map(|c| c + 1.0).collect();
        let (_, grad) = eval(&c0);
        let h = 1e-5;
        for i in 0..c0.len() {
            let mut cp = c0.clone();
            let mut cm = c0.clone();
            cp[i] += h;
            cm[i] -= h;
            let fd = (eval(&cp).0 - eval(&cm).0) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-9);
            assert!(rel < 1e-6, "total-loss FD mismatch at {i}: {rel}");
        }
    }
}
