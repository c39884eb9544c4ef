//! Rigid poses, pinhole intrinsics and the projection / unprojection pair.
//!
//! Conventions:
//! - depths are z-depths (distance along the optical axis), never ray lengths;
//! - a frame's pose maps points from that camera into the reference camera,
//!   so `X_ref = P * X_cam` and the reference pose is the identity.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use thiserror::Error;

/// Points closer to the image plane than this are treated as behind the camera.
pub const DEFAULT_Z_MIN: f64 = 1e-6;

/// Tolerance used when validating that a matrix is an exact rotation.
pub const RIGID_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("point at z = {z} is behind the camera")]
    BehindCamera { z: f64 },
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
}

/// A 3D point. The homogeneous coordinate is implicit and always 1.
pub type Point3H = Point3<f64>;

/// Continuous pixel coordinate: `u` is the column, `v` the row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fx.is_finite() && fy > 0.0 && fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite (fx={fx}, fy={fy})"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point must be finite (cx={cx}, cy={cy})"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Intrinsics of the same optics sampled on a grid scaled by `(sx, sy)`.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Elementwise comparison used for the depth/RGB intrinsics contract.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        (self.fx - other.fx).abs() <= tol
            && (self.fy - other.fy).abs() <= tol
            && (self.cx - other.cx).abs() <= tol
            && (self.cy - other.cy).abs() <= tol
    }
}

/// The 3x4 transform `[R | t]`.
///
/// Poses built with [`Pose::small_angle`] carry `approximate = true`; their
/// rotation block is only orthonormal to second order in the angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    approximate: bool,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            approximate: false,
        }
    }

    /// Exact rigid pose. Fails unless `RᵀR = I` and `det R = 1` within
    /// [`RIGID_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !rotation.iter().chain(translation.iter()).all(|x| x.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite entries".into()));
        }
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        let ortho_err = gram.amax();
        let det_err = (rotation.determinant() - 1.0).abs();
        if ortho_err > RIGID_TOLERANCE || det_err > RIGID_TOLERANCE {
            return Err(GeometryError::InvalidPose(format!(
                "rotation is not orthonormal (|RᵀR - I| = {ortho_err:e}, |det - 1| = {det_err:e})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
            approximate: false,
        })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
            approximate: false,
        }
    }

    /// Exact pose from an axis-angle vector `r` (radians) via Rodrigues' formula.
    pub fn from_axis_angle(r: Vector3<f64>, t: Vector3<f64>) -> Self {
        Self {
            rotation: rodrigues(&r),
            translation: t,
            approximate: false,
        }
    }

    /// First-order rotation `I + [r]ₓ`, valid for `‖r‖ ≪ 1`.
    ///
    /// ```text
    /// [  1   -rz   ry | tx ]
    /// [  rz   1   -rx | ty ]
    /// [ -ry   rx   1  | tz ]
    /// ```
    pub fn small_angle(r: Vector3<f64>, t: Vector3<f64>) -> Self {
        let rotation = Matrix3::new(1.0, -r.z, r.y, r.z, 1.0, -r.x, -r.y, r.x, 1.0);
        Self {
            rotation,
            translation: t,
            approximate: true,
        }
    }

    /// Build from a row-major 4x4 matrix. The bottom row must be `[0 0 0 1]`
    /// and the rotation block must be exactly rigid.
    pub fn from_matrix4(m: &Matrix4<f64>) -> Result<Self, GeometryError> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::InvalidPose(format!(
                "bottom row must be [0, 0, 0, 1], got {bottom:?}"
            )));
        }
        let rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::new(rotation, translation)
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn is_approximate(&self) -> bool {
        self.approximate
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }

    /// `self * other`, i.e. apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
            approximate: self.approximate || other.approximate,
        }
    }

    /// Inverse transform. Exact poses use `[Rᵀ | -Rᵀt]`; approximate poses are
    /// inverted numerically as 4x4 matrices.
    pub fn inverse(&self) -> Result<Pose, GeometryError> {
        if !self.approximate {
            let rt = self.rotation.transpose();
            return Ok(Pose {
                rotation: rt,
                translation: -(rt * self.translation),
                approximate: false,
            });
        }
        let inv = self
            .to_matrix4()
            .try_inverse()
            .ok_or_else(|| GeometryError::InvalidPose("singular pose matrix".into()))?;
        Ok(Pose {
            rotation: inv.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: inv.fixed_view::<3, 1>(0, 3).into_owned(),
            approximate: true,
        })
    }

    pub fn transform_point(&self, x: &Point3H) -> Point3H {
        Point3::from(self.rotation * x.coords + self.translation)
    }

    /// Rotate a direction (no translation).
    pub fn transform_vector(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d
    }
}

/// Exact rotation matrix for an axis-angle vector.
pub fn rodrigues(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta = r.norm();
    if theta == 0.0 {
        return Matrix3::identity();
    }
    let k = r / theta;
    let kx = k.cross_matrix();
    Matrix3::identity() + kx * theta.sin() + kx * kx * (1.0 - theta.cos())
}

/// Perspective projection with the default `z_min`.
pub fn project(x: &Point3H, k: &Intrinsics) -> Result<PixelCoord, GeometryError> {
    project_with_min(x, k, DEFAULT_Z_MIN)
}

pub fn project_with_min(x: &Point3H, k: &Intrinsics, z_min: f64) -> Result<PixelCoord, GeometryError> {
    if !(x.z > z_min) {
        return Err(GeometryError::BehindCamera { z: x.z });
    }
    Ok(PixelCoord {
        u: k.fx * x.x / x.z + k.cx,
        v: k.fy * x.y / x.z + k.cy,
    })
}

/// Jacobian of [`project`] with respect to the camera-space point, as the two
/// rows `∂u/∂X` and `∂v/∂X`.
pub fn project_jacobian(x: &Point3H, k: &Intrinsics) -> [Vector3<f64>; 2] {
    let iz = 1.0 / x.z;
    [
        Vector3::new(k.fx * iz, 0.0, -k.fx * x.x * iz * iz),
        Vector3::new(0.0, k.fy * iz, -k.fy * x.y * iz * iz),
    ]
}

/// Back-project pixel `x` to the 3D point at z-depth `z`.
pub fn unproject(x: PixelCoord, z: f64, k: &Intrinsics) -> Result<Point3H, GeometryError> {
    if !(z > 0.0 && z.is_finite()) {
        return Err(GeometryError::InvalidDepth(z));
    }
    Ok(Point3::new(z * (x.u - k.cx) / k.fx, z * (x.v - k.cy) / k.fy, z))
}

/// Direction `∂X/∂z` of the ray through pixel `x` (its z component is 1).
pub fn ray_direction(x: PixelCoord, k: &Intrinsics) -> Vector3<f64> {
    Vector3::new((x.u - k.cx) / k.fx, (x.v - k.cy) / k.fy, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k_test() -> Intrinsics {
        Intrinsics::new(1000.0, 1000.0, 720.0, 540.0).unwrap()
    }

    #[test]
    fn small_angle_zero_is_identity() {
        let p = Pose::small_angle(Vector3::zeros(), Vector3::zeros());
        assert!(p.is_identity());
        assert!(p.is_approximate());
    }

    #[test]
    fn small_angle_layout() {
        let p = Pose::small_angle(Vector3::new(0.0, 0.0, 0.001), Vector3::zeros());
        let expected = Matrix3::new(1.0, -0.001, 0.0, 0.001, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert_eq!(*p.rotation(), expected);
    }

    #[test]
    fn small_angle_close_to_rodrigues() {
        let r = Vector3::new(0.001, 0.0, 0.0);
        let approx = Pose::small_angle(r, Vector3::zeros());
        let exact = rodrigues(&r);
        let err = (approx.rotation() - exact).amax();
        assert!(err < 5e-7, "err = {err:e}");
    }

    #[test]
    fn rodrigues_is_rigid() {
        let r = Vector3::new(0.3, -0.2, 0.9);
        assert!(Pose::new(rodrigues(&r), Vector3::zeros()).is_ok());
    }

    #[test]
    fn rejects_non_rigid() {
        let m = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(Pose::new(m, Vector3::zeros()), Err(GeometryError::InvalidPose(_))));
    }

    #[test]
    fn inverse_of_identity_and_translation() {
        assert!(Pose::identity().inverse().unwrap().is_identity());
        let p = Pose::from_translation(Vector3::new(0.001, 0.0, 0.0));
        let inv = p.inverse().unwrap();
        assert_eq!(*inv.translation(), Vector3::new(-0.001, 0.0, 0.0));
        assert_eq!(*inv.rotation(), Matrix3::identity());
    }

    #[test]
    fn inverse_of_approximate_pose() {
        let p = Pose::small_angle(Vector3::new(0.01, -0.02, 0.005), Vector3::new(0.003, 0.0, -0.001));
        let roundtrip = p.compose(&p.inverse().unwrap()).to_matrix4();
        assert!((roundtrip - Matrix4::identity()).amax() < 1e-9);
    }

    #[test]
    fn singular_approximate_pose_is_rejected() {
        // I + [r]x is singular only for imaginary angles, so build one by hand.
        let p = Pose {
            rotation: Matrix3::zeros(),
            translation: Vector3::zeros(),
            approximate: true,
        };
        assert!(matches!(p.inverse(), Err(GeometryError::InvalidPose(_))));
    }

    #[test]
    fn transform_examples() {
        let x = Point3::new(0.2, -0.1, 0.4);
        assert_eq!(Pose::identity().transform_point(&x), x);

        let p = Pose::from_translation(Vector3::new(0.001, 0.0, 0.0));
        assert_eq!(p.transform_point(&Point3::new(0.0, 0.0, 0.3)), Point3::new(0.001, 0.0, 0.3));

        let p = Pose::small_angle(Vector3::new(0.0, 0.0, 0.001), Vector3::zeros());
        let y = p.transform_point(&Point3::new(0.1, 0.0, 0.3));
        assert!((y - Point3::new(0.1, 0.0001, 0.3)).amax() < 1e-15);
    }

    #[test]
    fn projection_examples() {
        let k = k_test();
        let c = project(&Point3::new(0.0, 0.0, 0.5), &k).unwrap();
        assert_eq!(c, PixelCoord::new(720.0, 540.0));
        let x = project(&Point3::new(0.1, 0.0, 0.5), &k).unwrap();
        assert!((x.u - 920.0).abs() < 1e-12);
        assert!(matches!(
            project(&Point3::new(0.0, 0.0, 0.0), &k),
            Err(GeometryError::BehindCamera { .. })
        ));
        assert!(project(&Point3::new(0.0, 0.0, -1.0), &k).is_err());
    }

    #[test]
    fn unprojection_examples() {
        let k = k_test();
        let p = unproject(PixelCoord::new(720.0, 540.0), 0.4, &k).unwrap();
        assert_eq!(p, Point3::new(0.0, 0.0, 0.4));
        let p = unproject(PixelCoord::new(1720.0, 540.0), 2.0, &k).unwrap();
        assert_eq!(p, Point3::new(2.0, 0.0, 2.0));
        assert!(matches!(
            unproject(PixelCoord::new(0.0, 0.0), 0.0, &k),
            Err(GeometryError::InvalidDepth(_))
        ));
    }

    #[test]
    fn jacobian_matches_differences() {
        let k = k_test();
        let x = Point3::new(0.05, -0.03, 0.35);
        let jac = project_jacobian(&x, &k);
        let h = 1e-7;
        for axis in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[axis] += h;
            xm[axis] -= h;
            let up = project(&xp, &k).unwrap();
            let um = project(&xm, &k).unwrap();
            let du = (up.u - um.u) / (2.0 * h);
            let dv = (up.v - um.v) / (2.0 * h);
            assert!((du - jac[0][axis]).abs() < 1e-3);
            assert!((dv - jac[1][axis]).abs() < 1e-3);
        }
    }

    proptest! {
        #[test]
        fn roundtrip_project_unproject(u in 0.0f64..1440.0, v in 0.0f64..1080.0, z in 0.1f64..1.0) {
            let k = k_test();
            let x = PixelCoord::new(u, v);
            let y = project(&unproject(x, z, &k).unwrap(), &k).unwrap();
            prop_assert!((y.u - u).abs() < 1e-9 && (y.v - v).abs() < 1e-9);
        }

        #[test]
        fn small_angle_error_bound(rx in -6e-3f64..6e-3, ry in -6e-3f64..6e-3, rz in -6e-3f64..6e-3) {
            let r = Vector3::new(rx, ry, rz);
            prop_assume!(r.norm() <= 1e-2 && r.norm() > 0.0);
            let err = (Pose::small_angle(r, Vector3::zeros()).rotation() - rodrigues(&r)).amax();
            prop_assert!(err < 5.0 * r.norm_squared());
        }

        #[test]
        fn rigid_transform_preserves_distances(
            r in prop::array::uniform3(-3.0f64..3.0),
            t in prop::array::uniform3(-1.0f64..1.0),
            a in prop::array::uniform3(-1.0f64..1.0),
            b in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let p = Pose::from_axis_angle(Vector3::from(r), Vector3::from(t));
            let (a, b) = (Point3::from(a), Point3::from(b));
            let d0 = (a - b).norm();
            let d1 = (p.transform_point(&a) - p.transform_point(&b)).norm();
            prop_assert!((d0 - d1).abs() < 1e-9);
        }

        #[test]
        fn transform_matches_matrix_product(
            r in prop::array::uniform3(-3.0f64..3.0),
            t in prop::array::uniform3(-1.0f64..1.0),
            a in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let p = Pose::from_axis_angle(Vector3::from(r), Vector3::from(t));
            let a = Point3::from(a);
            let direct = p.transform_point(&a);
            let via_matrix = p.to_matrix4() * a.to_homogeneous();
            prop_assert_eq!(via_matrix[3], 1.0);
            for i in 0..3 {
                prop_assert!((direct[i] - via_matrix[i]).abs() <= 1e-15);
            }
        }

        #[test]
        fn exact_inverse_roundtrip(r in prop::array::uniform3(-3.0f64..3.0), t in prop::array::uniform3(-1.0f64..1.0)) {
            let p = Pose::from_axis_angle(Vector3::from(r), Vector3::from(t));
            let m = p.compose(&p.inverse().unwrap()).to_matrix4();
            prop_assert!((m - Matrix4::identity()).amax() < 1e-9);
        }
    }
}
