//! Rigid poses, pinhole cameras and the reprojection operations the rest of
//! the pipeline is built on.
//!
//! Conventions, fixed here and assumed everywhere else:
//! - right-handed frames, `+z` forward in the camera frame, image origin at
//!   the top-left pixel, pixel centers on integer coordinates;
//! - a [`Pose`] maps local coordinates into its parent frame
//!   (`x_parent = R x_local + t`), so camera poses are camera-to-world;
//! - depths are camera-frame `z`, in meters.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal (deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("point projects behind the camera (z = {0:.6})")]
    BehindCamera(f64),
    #[error("pixel sample has non-positive depth ({0:.6})")]
    NonPositiveDepth(f64),
    #[error("rotation offset magnitude {0:.6} must stay below pi")]
    OffsetTooLarge(f64),
    #[error("invalid intrinsics: {0}")]
    BadIntrinsics(String),
}

/// Rigid transform: `x_parent = rotation * x_local + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub const ORTHONORMALITY_TOL: f64 = 1e-9;

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let dev = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if dev > Self::ORTHONORMALITY_TOL || rotation.determinant() <= 0.0 {
            return Err(GeometryError::NotOrthonormal(dev));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_axis_angle(
        axis: Vector3<f64>,
        angle: f64,
        translation: Vector3<f64>,
    ) -> Self {
        let delta = if axis.norm() > 0.0 {
            axis.normalize() * angle
        } else {
            Vector3::zeros()
        };
        Self {
            rotation: rotation_from_axis_angle(delta),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Row-major 3x4 flattening used by the scene/manifest text formats.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Result<Self, GeometryError> {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let translation = Vector3::new(v[3], v[7], v[11]);
        Self::new(rotation, translation)
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::BadIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if cx < 0.0 || cx >= width as f64 || cy < 0.0 || cy >= height as f64 {
            return Err(GeometryError::BadIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }
}

/// Small learnable pose correction: axis-angle rotation plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseOffset {
    pub delta_rotation: Vector3<f64>,
    pub delta_translation: Vector3<f64>,
}

impl PoseOffset {
    pub fn zero() -> Self {
        Self {
            delta_rotation: Vector3::zeros(),
            delta_translation: Vector3::zeros(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.delta_rotation == Vector3::zeros() && self.delta_translation == Vector3::zeros()
    }
}

/// Continuous pixel location with camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelSample {
    pub u: f64,
    pub v: f64,
    pub d: f64,
}

/// Projection result; landing outside the image is data, not an error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: PixelSample,
    pub in_frame: bool,
}

pub fn pose_inverse(p: &Pose) -> Pose {
    let rt = p.rotation.transpose();
    Pose {
        rotation: rt,
        translation: -(rt * p.translation),
    }
}

/// Homogeneous-matrix product semantics: `compose(a, b)` applies `b` first.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

/// Relative pose of a camera with respect to a (possibly moving) object.
///
/// Both arguments are the transforms of the camera and the object with
/// respect to the shared ego/world frame, in the frame-from-world direction.
/// The result maps camera coordinates into the object-centered frame, i.e.
/// it is the camera-to-world pose of the object-centric scene; rendering the
/// object through these poses makes it appear static. Either algebraic
/// route, `(camera * object^-1)^-1` or `object * camera^-1`, gives the same
/// transform.
pub fn virtual_camera_pose(camera: &Pose, object: &Pose) -> Pose {
    compose(object, &pose_inverse(camera))
}

/// Rodrigues rotation from an axis-angle vector; Taylor fallback near zero.
pub fn rotation_from_axis_angle(delta: Vector3<f64>) -> Matrix3<f64> {
    let (a, b) = rodrigues_coeffs(delta.norm_squared());
    let k = skew(&delta);
    Matrix3::identity() + k * a + k * k * b
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `(sin t / t, (1 - cos t) / t^2)` as functions of `s = t^2`.
fn rodrigues_coeffs(s: f64) -> (f64, f64) {
    if s < 1e-6 {
        (
            1.0 - s / 6.0 + s * s / 120.0,
            0.5 - s / 24.0 + s * s / 720.0,
        )
    } else {
        let t = s.sqrt();
        ((t.sin()) / t, (1.0 - t.cos()) / s)
    }
}

/// Derivatives of the Rodrigues coefficients with respect to `s = t^2`.
fn rodrigues_coeff_derivs(s: f64) -> (f64, f64) {
    if s < 1e-6 {
        (
            -1.0 / 6.0 + s / 60.0 - s * s / 1680.0,
            -1.0 / 24.0 + s / 360.0 - s * s / 13440.0,
        )
    } else {
        let t = s.sqrt();
        let da = (t * t.cos() - t.sin()) / (2.0 * t * t * t);
        let db = (t * t.sin() / 2.0 - (1.0 - t.cos())) / (s * s);
        (da, db)
    }
}

/// `R(delta) * v` written so it can be differentiated in closed form.
pub fn rotate_vec(delta: &Vector3<f64>, v: &Vector3<f64>) -> Vector3<f64> {
    let (a, b) = rodrigues_coeffs(delta.norm_squared());
    let c1 = delta.cross(v);
    let c2 = delta.cross(&c1);
    v + c1 * a + c2 * b
}

/// Reverse-mode derivative of [`rotate_vec`]: given `u = dL/d(R v)` returns
/// `(dL/d delta, dL/d v)`.
pub fn rotate_vec_backward(
    delta: &Vector3<f64>,
    v: &Vector3<f64>,
    upstream: &Vector3<f64>,
) -> (Vector3<f64>, Vector3<f64>) {
    let s = delta.norm_squared();
    let (a, b) = rodrigues_coeffs(s);
    let (da, db) = rodrigues_coeff_derivs(s);
    let c1 = delta.cross(v);
    let c2 = delta.cross(&c1);

    // scalar coefficients depend on delta through s = |delta|^2
    let mut d_delta = delta * (2.0 * (upstream.dot(&c1) * da + upstream.dot(&c2) * db));

    // c2 = delta x c1
    let g2 = upstream * b;
    d_delta += c1.cross(&g2);
    let g1 = upstream * a + g2.cross(delta);
    // c1 = delta x v
    d_delta += v.cross(&g1);
    let d_v = upstream + g1.cross(delta);

    (d_delta, d_v)
}

/// Nearest rotation matrix in the Frobenius sense (polar factor via SVD).
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Perturb a pose by a refinement offset: the rotation is left-multiplied by
/// the exponential map of `delta_rotation` (then re-orthonormalized), the
/// translation shifts additively. A zero offset returns the pose bit-for-bit.
pub fn apply_offset(p: &Pose, dp: &PoseOffset) -> Result<Pose, GeometryError> {
    let angle = dp.delta_rotation.norm();
    if angle >= std::f64::consts::PI {
        return Err(GeometryError::OffsetTooLarge(angle));
    }
    if dp.is_zero() {
        return Ok(*p);
    }
    let rotation = orthonormalize(&(rotation_from_axis_angle(dp.delta_rotation) * p.rotation));
    Ok(Pose {
        rotation,
        translation: p.translation + dp.delta_translation,
    })
}

/// Pinhole projection of a world point into a camera given its
/// camera-to-world pose; the returned depth is camera-frame `z`.
pub fn project(
    point: &Vector3<f64>,
    intr: &Intrinsics,
    cam: &Pose,
) -> Result<Projection, GeometryError> {
    let pc = cam.inverse_transform_point(point);
    if pc.z <= 0.0 {
        return Err(GeometryError::BehindCamera(pc.z));
    }
    let u = intr.fx * pc.x / pc.z + intr.cx;
    let v = intr.fy * pc.y / pc.z + intr.cy;
    let in_frame = u >= -0.5
        && u < intr.width as f64 - 0.5
        && v >= -0.5
        && v < intr.height as f64 - 0.5;
    Ok(Projection {
        pixel: PixelSample { u, v, d: pc.z },
        in_frame,
    })
}

/// Inverse of [`project`]: lift a pixel with depth back to a world point.
pub fn unproject(
    px: &PixelSample,
    intr: &Intrinsics,
    cam: &Pose,
) -> Result<Vector3<f64>, GeometryError> {
    if px.d <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(px.d));
    }
    let pc = Vector3::new(
        (px.u - intr.cx) / intr.fx * px.d,
        (px.v - intr.cy) / intr.fy * px.d,
        px.d,
    );
    Ok(cam.transform_point(&pc))
}

/// Map a pixel-with-depth from one view into another (unproject, project).
pub fn reproject(
    px: &PixelSample,
    from_cam: &Pose,
    to_cam: &Pose,
    intr: &Intrinsics,
) -> Result<Projection, GeometryError> {
    let world = unproject(px, intr, from_cam)?;
    project(&world, intr, to_cam)
}
