//! Residuals and their Jacobians with respect to right perturbations
//! `X <- X * exp(delta)`.

use nalgebra::{Matrix6, Vector6};

use crate::se3::{right_jacobian_inv, Pose, Twist};

/// Step used by central-difference Jacobians.
pub const FD_STEP: f64 = 1e-6;

/// `log(inverse(z) * between(a, b))`, rotation part first.
pub fn relative_residual(a: &Pose, b: &Pose, z: &Pose) -> Vector6<f64> {
    z.inverse().compose(&a.between(b)).log().to_vector()
}

/// Residual of a marker detection `z` (camera-from-marker) taken from
/// keyframe `keyframe` of marker `marker`.
pub fn marker_residual(keyframe: &Pose, marker: &Pose, z: &Pose) -> Vector6<f64> {
    relative_residual(keyframe, marker, z)
}

/// Residual of a relative motion `u` measured from keyframe `a` to `b`.
pub fn odometry_residual(a: &Pose, b: &Pose, u: &Pose) -> Vector6<f64> {
    relative_residual(a, b, u)
}

/// `log(inverse(prior) * x)`.
pub fn prior_residual(x: &Pose, prior: &Pose) -> Vector6<f64> {
    prior.between(x).log().to_vector()
}

/// Analytic Jacobians of [`relative_residual`] with respect to `a` and `b`.
pub fn relative_jacobians(
    a: &Pose,
    b: &Pose,
    z: &Pose,
) -> (Vector6<f64>, Matrix6<f64>, Matrix6<f64>) {
    let err = z.inverse().compose(&a.between(b)).log();
    let jr_inv = right_jacobian_inv(&err);
    let jb = jr_inv;
    let ja = -(jr_inv * b.between(a).adjoint());
    (err.to_vector(), ja, jb)
}

pub fn prior_jacobian(x: &Pose, prior: &Pose) -> (Vector6<f64>, Matrix6<f64>) {
    let err = prior.between(x).log();
    (err.to_vector(), right_jacobian_inv(&err))
}

/// Central-difference Jacobian of `f` at `x` along right perturbations.
pub fn numeric_jacobian<F>(x: &Pose, f: F) -> Matrix6<f64>
where
    F: Fn(&Pose) -> Vector6<f64>,
{
    let mut jac = Matrix6::zeros();
    for i in 0..6 {
        let mut d = Vector6::zeros();
        d[i] = FD_STEP;
        let plus = f(&x.retract(&Twist::from_vector(&d)));
        let minus = f(&x.retract(&Twist::from_vector(&-d)));
        jac.set_column(i, &((plus - minus) / (2.0 * FD_STEP)));
    }
    jac
}
