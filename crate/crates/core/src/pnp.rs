//! Pose from 2D–3D correspondences: DLT initialization followed by damped
//! Gauss-Newton (Levenberg–Marquardt) refinement of uncertainty-weighted
//! reprojection error.
//!
//! The weighted cost is `Σ_i (1/σ_i²) ‖π(R X_i + t) − x_i‖²`. Per-point
//! weights come from predicted landmark uncertainties; omitting them gives
//! the plain least-squares solve.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, PointSet2, PointSet3, RigidPose};

#[derive(Debug, Error)]
pub enum PnpError {
    /// The correspondence set cannot determine a pose: too few points,
    /// coplanar/collinear geometry, or a rank-deficient design matrix.
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    /// A point fell at or behind the camera plane.
    #[error("point {index} has non-positive depth under the current pose")]
    NonPositiveDepth { index: usize },
    #[error("point sets have mismatched lengths: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("sigma {index} must be positive and finite, got {value}")]
    InvalidSigma { index: usize, value: f64 },
    /// Gauss-Newton Hessian not invertible at the solution.
    #[error("singular Gauss-Newton Hessian at the solution")]
    SingularHessian,
    /// The backward pass requires a converged solution.
    #[error("solver did not converge")]
    NotConverged,
    /// All softargmin sample weights underflowed.
    #[error("degenerate softargmin weights: no sample has finite weight")]
    DegenerateWeights,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// A PnP instance: 3D points, observed 2D points, optional per-point
/// uncertainties (px) used as inverse weights, and intrinsics.
#[derive(Debug, Clone)]
pub struct PnPProblem {
    points3: PointSet3,
    points2: PointSet2,
    sigmas: Option<Vec<f64>>,
    cam: CameraIntrinsics,
}

impl PnPProblem {
    pub fn new(
        points3: PointSet3,
        points2: PointSet2,
        sigmas: Option<Vec<f64>>,
        cam: CameraIntrinsics,
    ) -> Result<Self, PnpError> {
        if points3.len() != points2.len() {
            return Err(PnpError::DimensionMismatch {
                left: points3.len(),
                right: points2.len(),
            });
        }
        if points3.len() < 6 {
            return Err(PnpError::DegenerateConfiguration(format!(
                "need at least 6 correspondences, got {}",
                points3.len()
            )));
        }
        if let Some(s) = &sigmas {
            if s.len() != points3.len() {
                return Err(PnpError::DimensionMismatch {
                    left: points3.len(),
                    right: s.len(),
                });
            }
            for (index, &value) in s.iter().enumerate() {
                if !(value.is_finite() && value > 0.0) {
                    return Err(PnpError::InvalidSigma { index, value });
                }
            }
        }
        Ok(Self {
            points3,
            points2,
            sigmas,
            cam,
        })
    }

    pub fn len(&self) -> usize {
        self.points3.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points3.is_empty()
    }

    pub fn points3(&self) -> &PointSet3 {
        &self.points3
    }

    pub fn points2(&self) -> &PointSet2 {
        &self.points2
    }

    pub fn sigmas(&self) -> Option<&[f64]> {
        self.sigmas.as_deref()
    }

    pub fn camera(&self) -> &CameraIntrinsics {
        &self.cam
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigmas.as_ref().map_or(1.0, |s| s[i])
    }

    /// The same problem with uncertainties dropped (unit weights).
    pub fn unweighted(&self) -> Self {
        Self {
            points3: self.points3.clone(),
            points2: self.points2.clone(),
            sigmas: None,
            cam: self.cam,
        }
    }

    /// Weighted squared reprojection error of a pose on this problem.
    pub fn cost(&self, pose: &RigidPose) -> Result<f64, PnpError> {
        let mut total = 0.0;
        for i in 0..self.len() {
            let y = pose.transform_point(&self.points3[i]);
            if y.z <= 0.0 {
                return Err(PnpError::NonPositiveDepth { index: i });
            }
            let u = self.cam.fx * y.x / y.z + self.cam.cx;
            let v = self.cam.fy * y.y / y.z + self.cam.cy;
            let d = Vector2::new(u, v) - self.points2[i];
            total += d.norm_squared() / (self.sigma(i) * self.sigma(i));
        }
        Ok(total)
    }
}

/// Outcome of the LM refinement.
#[derive(Debug, Clone)]
pub struct PnPSolution {
    pub pose: RigidPose,
    /// Weighted squared reprojection error (px²) at `pose`.
    pub final_cost: f64,
    /// Accepted LM iterations.
    pub iterations: usize,
    /// True iff a stationarity criterion of [`LmOptions`] was met.
    pub converged: bool,
}

/// Weighted reprojection residuals `(π(R X_i + t) − x_i)/σ_i` stacked as a
/// 2N vector, plus the Jacobian with respect to the 6-DoF local chart
/// `[ω, δt]` at `pose` (rotation increment applied on the left).
pub fn reprojection_residuals(
    p: &PnPProblem,
    pose: &RigidPose,
) -> Result<(DVector<f64>, DMatrix<f64>), PnpError> {
    let n = p.len();
    let mut r = DVector::zeros(2 * n);
    let mut j = DMatrix::zeros(2 * n, 6);
    let rot = pose.rotation();
    for i in 0..n {
        let rx = rot * p.points3[i];
        let y = rx + pose.translation();
        if y.z <= 0.0 {
            return Err(PnpError::NonPositiveDepth { index: i });
        }
        let w = 1.0 / p.sigma(i);
        let cam = p.camera();
        let u = cam.fx * y.x / y.z + cam.cx;
        let v = cam.fy * y.y / y.z + cam.cy;
        r[2 * i] = w * (u - p.points2[i].x);
        r[2 * i + 1] = w * (v - p.points2[i].y);

        let proj = projection_jacobian(cam, &y);
        // d(exp(ω̂) R X + t + δt)/dω = -[R X]ₓ, d/dδt = I
        let dy_domega = -skew(&rx);
        let block2 = proj * dy_domega;
        for c in 0..3 {
            j[(2 * i, c)] = w * block2[(0, c)];
            j[(2 * i + 1, c)] = w * block2[(1, c)];
            j[(2 * i, 3 + c)] = w * proj[(0, c)];
            j[(2 * i + 1, 3 + c)] = w * proj[(1, c)];
        }
    }
    Ok((r, j))
}

/// `dπ/dy` for a camera-frame point `y` with positive depth.
pub(crate) fn projection_jacobian(cam: &CameraIntrinsics, y: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / y.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * y.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * y.y * iz * iz,
    )
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Tuning knobs for [`lm_minimize`].
#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Absolute stationarity: stop when the gradient ∞-norm `‖Jᵀr‖∞`
    /// drops below this.
    pub grad_tol: f64,
    /// Scale-relative stationarity: stop when
    /// `‖Jᵀr‖∞ < grad_rtol · max_j ‖J_j‖ · ‖r‖`, i.e. when the residual is
    /// orthogonal to the Jacobian columns to within `grad_rtol`. This is
    /// what nonzero-residual problems can actually reach in f64: their
    /// absolute gradient stalls at the rounding noise of the cost, which
    /// scales with the residual.
    pub grad_rtol: f64,
    /// Stop when the proposed step norm drops below this.
    pub step_tol: f64,
    /// Initial multiplicative damping; ×10 on rejection, ÷10 on acceptance.
    pub initial_damping: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        // grad_tol sits well below any meaningful signal (a 1-pixel residual
        // produces gradients of order 1e2 here) but above the f64 rounding
        // floor of Jᵀr at pixel scales, which is ~1e-10 for hundreds of
        // points and would make a tighter threshold unreachable.
        Self {
            max_iterations: 100,
            grad_tol: 1e-8,
            grad_rtol: 1e-5,
            step_tol: 1e-12,
            initial_damping: 1e-3,
        }
    }
}

/// Result of a generic LM run over a state type `S`.
#[derive(Debug, Clone)]
pub struct LmOutcome<S> {
    pub state: S,
    pub cost: f64,
    pub iterations: usize,
    /// True iff a stationarity criterion (absolute or scale-relative) was
    /// met; a small final step alone does not count as convergence.
    pub converged: bool,
    /// Costs of the initial state and every accepted step, in order.
    pub cost_history: Vec<f64>,
}

/// Levenberg–Marquardt over an arbitrary manifold-valued state.
///
/// `eval` returns the residual vector and its Jacobian with respect to the
/// local chart at the current state; `retract` applies a chart increment.
/// Damping is multiplicative on the Hessian diagonal. Steps that raise the
/// cost, or that make `eval` report [`PnpError::NonPositiveDepth`], are
/// rejected and damping is increased; accepted costs never increase. An
/// error from `eval` at the *initial* state is propagated.
pub fn lm_minimize<S, E, R>(
    init: S,
    mut eval: E,
    retract: R,
    opts: &LmOptions,
) -> Result<LmOutcome<S>, PnpError>
where
    S: Clone,
    E: FnMut(&S) -> Result<(DVector<f64>, DMatrix<f64>), PnpError>,
    R: Fn(&S, &DVector<f64>) -> S,
{
    let (mut r, mut j) = eval(&init)?;
    let dim = j.ncols();
    let mut state = init;
    let mut cost = r.norm_squared();
    let mut cost_history = vec![cost];
    let mut damping = opts.initial_damping;
    let mut converged = false;
    let mut iterations = 0;

    'outer: while iterations < opts.max_iterations {
        let grad = j.transpose() * &r;
        if stationary(&grad, &j, &r, opts) {
            converged = true;
            break;
        }
        let h = j.transpose() * &j;
        loop {
            let mut damped = h.clone();
            for d in 0..dim {
                damped[(d, d)] += damping * h[(d, d)].max(1e-12);
            }
            let step = match damped.cholesky() {
                Some(chol) => -(chol.solve(&grad)),
                None => {
                    damping *= 10.0;
                    if damping > 1e16 {
                        break 'outer;
                    }
                    continue;
                }
            };
            if step.norm() < opts.step_tol {
                break 'outer;
            }
            let trial = retract(&state, &step);
            match eval(&trial) {
                Ok((r_new, j_new)) => {
                    let cost_new = r_new.norm_squared();
                    if cost_new < cost {
                        state = trial;
                        r = r_new;
                        j = j_new;
                        cost = cost_new;
                        cost_history.push(cost);
                        damping = (damping / 10.0).max(1e-12);
                        iterations += 1;
                        break;
                    }
                }
                Err(PnpError::NonPositiveDepth { .. }) => {}
                Err(e) => return Err(e),
            }
            damping *= 10.0;
            if damping > 1e16 {
                break 'outer;
            }
        }
    }

    Ok(LmOutcome {
        state,
        cost,
        iterations,
        converged,
        cost_history,
    })
}

/// Fixed-count undamped Gauss-Newton refinement from `init`.
///
/// Unlike [`solve_pnp_lm`] there is no accept/reject branching, so the
/// result is a smooth function of the problem data. Finite-difference
/// probes of the solved pose use this: warm-started near a solution, a few
/// iterations reach the fixed point to machine precision without the
/// micro-discontinuities that damping decisions introduce.
pub(crate) fn gn_refine(
    p: &PnPProblem,
    init: &RigidPose,
    iterations: usize,
) -> Result<RigidPose, PnpError> {
    let mut pose = *init;
    for _ in 0..iterations {
        let (r, j) = reprojection_residuals(p, &pose)?;
        let mut h = j.transpose() * &j;
        for d in 0..6 {
            h[(d, d)] += 1e-12;
        }
        let grad = j.transpose() * &r;
        let step = h
            .cholesky()
            .ok_or(PnpError::SingularHessian)?
            .solve(&grad);
        pose = pose.local_retract(&Vector6::new(
            -step[0], -step[1], -step[2], -step[3], -step[4], -step[5],
        ));
    }
    Ok(pose)
}

fn stationary(
    grad: &DVector<f64>,
    j: &DMatrix<f64>,
    r: &DVector<f64>,
    opts: &LmOptions,
) -> bool {
    let g_inf = grad.amax();
    if g_inf < opts.grad_tol {
        return true;
    }
    let max_col = (0..j.ncols())
        .map(|c| j.column(c).norm())
        .fold(0.0, f64::max);
    g_inf < opts.grad_rtol * max_col * r.norm()
}

/// Closed-form pose initialization by direct linear transform on
/// Hartley-normalized correspondences, with the rotation projected onto
/// SO(3).
///
/// Requires at least 6 correspondences in general (non-coplanar) position.
pub fn solve_pnp_dlt(p: &PnPProblem) -> Result<RigidPose, PnpError> {
    let n = p.len();

    // coplanar or collinear 3D sets leave the 3×4 camera matrix ambiguous
    let centroid3 = p.points3.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    for x in p.points3.iter() {
        let d = x - centroid3;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigenvalues();
    let max_eig = eig.max();
    if eig.min() <= 1e-10 * max_eig.max(1e-300) {
        return Err(PnpError::DegenerateConfiguration(
            "3D points are coplanar or collinear".into(),
        ));
    }

    // K⁻¹-normalized image coordinates
    let cam = p.camera();
    let img: Vec<Vector2<f64>> = p
        .points2
        .iter()
        .map(|x| Vector2::new((x.x - cam.cx) / cam.fx, (x.y - cam.cy) / cam.fy))
        .collect();

    // Hartley normalization of both sets
    let centroid2 = img.iter().sum::<Vector2<f64>>() / n as f64;
    let mean_norm2 = img.iter().map(|x| (x - centroid2).norm()).sum::<f64>() / n as f64;
    let s2 = if mean_norm2 > 1e-300 {
        std::f64::consts::SQRT_2 / mean_norm2
    } else {
        1.0
    };
    let mean_norm3 = p
        .points3
        .iter()
        .map(|x| (x - centroid3).norm())
        .sum::<f64>()
        / n as f64;
    let s3 = if mean_norm3 > 1e-300 {
        3f64.sqrt() / mean_norm3
    } else {
        1.0
    };

    let mut a = DMatrix::zeros(2 * n, 12);
    for (i, img_point) in img.iter().enumerate() {
        let xn = s3 * (p.points3[i] - centroid3);
        let un = s2 * (img_point - centroid2);
        let row = 2 * i;
        a[(row, 0)] = xn.x;
        a[(row, 1)] = xn.y;
        a[(row, 2)] = xn.z;
        a[(row, 3)] = 1.0;
        a[(row, 8)] = -un.x * xn.x;
        a[(row, 9)] = -un.x * xn.y;
        a[(row, 10)] = -un.x * xn.z;
        a[(row, 11)] = -un.x;
        let row = 2 * i + 1;
        a[(row, 4)] = xn.x;
        a[(row, 5)] = xn.y;
        a[(row, 6)] = xn.z;
        a[(row, 7)] = 1.0;
        a[(row, 8)] = -un.y * xn.x;
        a[(row, 9)] = -un.y * xn.y;
        a[(row, 10)] = -un.y * xn.z;
        a[(row, 11)] = -un.y;
    }

    let svd = a.svd(false, true);
    let sv = &svd.singular_values;
    if sv[10] <= 1e-10 * sv[0].max(1e-300) {
        return Err(PnpError::DegenerateConfiguration(
            "rank-deficient DLT design matrix".into(),
        ));
    }
    let v_t = svd.v_t.ok_or_else(|| {
        PnpError::DegenerateConfiguration("SVD failed on DLT design matrix".into())
    })?;
    let sol = v_t.row(v_t.nrows() - 1);

    // P maps normalized 3D to normalized 2D; undo both normalizations:
    //   x_img ≃ T2⁻¹ P_n T3 X
    let p_n = nalgebra::Matrix3x4::from_fn(|r, c| sol[4 * r + c]);
    let t2_inv = Matrix3::new(
        1.0 / s2,
        0.0,
        centroid2.x,
        0.0,
        1.0 / s2,
        centroid2.y,
        0.0,
        0.0,
        1.0,
    );
    let t3 = nalgebra::Matrix4::new(
        s3,
        0.0,
        0.0,
        -s3 * centroid3.x,
        0.0,
        s3,
        0.0,
        -s3 * centroid3.y,
        0.0,
        0.0,
        s3,
        -s3 * centroid3.z,
        0.0,
        0.0,
        0.0,
        1.0,
    );
    let mut proj = t2_inv * p_n * t3;

    let m = proj.fixed_view::<3, 3>(0, 0).into_owned();
    if m.determinant() < 0.0 {
        proj = -proj;
    }
    let m = proj.fixed_view::<3, 3>(0, 0).into_owned();
    let m4 = Vector3::new(proj[(0, 3)], proj[(1, 3)], proj[(2, 3)]);

    let svd_m = m.svd(true, true);
    let (u, v_t) = match (svd_m.u, svd_m.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => {
            return Err(PnpError::DegenerateConfiguration(
                "SVD failed on rotation block".into(),
            ))
        }
    };
    let scale = svd_m.singular_values.sum() / 3.0;
    if scale <= 1e-300 {
        return Err(PnpError::DegenerateConfiguration(
            "zero-scale rotation block".into(),
        ));
    }
    let det = (u * v_t).determinant();
    let rot = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det)) * v_t;
    let t = m4 / scale;

    Ok(RigidPose::new(
        nalgebra::UnitQuaternion::from_matrix(&rot),
        t,
    ))
}

/// Refines a pose by Levenberg–Marquardt on the weighted reprojection
/// error, starting from `init`. All points must have positive depth at
/// `init`. Hitting the iteration cap returns the best pose found with
/// `converged = false`.
pub fn solve_pnp_lm(p: &PnPProblem, init: &RigidPose) -> Result<PnPSolution, PnpError> {
    solve_pnp_lm_with(p, init, &LmOptions::default())
}

pub fn solve_pnp_lm_with(
    p: &PnPProblem,
    init: &RigidPose,
    opts: &LmOptions,
) -> Result<PnPSolution, PnpError> {
    let outcome = lm_minimize(
        *init,
        |pose| reprojection_residuals(p, pose),
        |pose, step| {
            pose.local_retract(&Vector6::new(
                step[0], step[1], step[2], step[3], step[4], step[5],
            ))
        },
        opts,
    )?;
    Ok(PnPSolution {
        pose: outcome.state,
        final_cost: outcome.cost,
        iterations: outcome.iterations,
        converged: outcome.converged,
    })
}
