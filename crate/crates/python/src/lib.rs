//! Python bindings over the core pipeline types and operations.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use streetfield::confidence::{self, ConfidenceWeights};
use streetfield::field::{FieldConfig, RadianceField};
use streetfield::geometry::{self, PixelSample};
use streetfield::parameterization::{self, ContractionConfig};
use streetfield::render;
use streetfield::scenegen;
use streetfield::train;

fn vec3(v: (f64, f64, f64)) -> nalgebra::Vector3<f64> {
    nalgebra::Vector3::new(v.0, v.1, v.2)
}

fn tuple3(v: nalgebra::Vector3<f64>) -> (f64, f64, f64) {
    (v.x, v.y, v.z)
}

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Rigid transform mapping local coordinates into a parent frame.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Pose {
    inner: geometry::Pose,
}

#[pymethods]
impl Pose {
    /// Build from 12 row-major floats (3x4).
    #[new]
    fn new(rows: [f64; 12]) -> PyResult<Self> {
        Ok(Self {
            inner: geometry::Pose::from_row_major(&rows).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn identity() -> Self {
        Self {
            inner: geometry::Pose::identity(),
        }
    }

    #[staticmethod]
    fn from_axis_angle(axis: (f64, f64, f64), angle: f64, translation: (f64, f64, f64)) -> Self {
        Self {
            inner: geometry::Pose::from_axis_angle(vec3(axis), angle, vec3(translation)),
        }
    }

    fn inverse(&self) -> Self {
        Self {
            inner: geometry::pose_inverse(&self.inner),
        }
    }

    fn compose(&self, other: &Pose) -> Self {
        Self {
            inner: geometry::compose(&self.inner, &other.inner),
        }
    }

    fn apply_offset(
        &self,
        delta_rotation: (f64, f64, f64),
        delta_translation: (f64, f64, f64),
    ) -> PyResult<Self> {
        let dp = geometry::PoseOffset {
            delta_rotation: vec3(delta_rotation),
            delta_translation: vec3(delta_translation),
        };
        Ok(Self {
            inner: geometry::apply_offset(&self.inner, &dp).map_err(value_err)?,
        })
    }

    fn transform_point(&self, p: (f64, f64, f64)) -> (f64, f64, f64) {
        tuple3(self.inner.transform_point(&vec3(p)))
    }

    fn to_rows(&self) -> [f64; 12] {
        self.inner.to_row_major()
    }

    fn __repr__(&self) -> String {
        format!("Pose(translation={:?})", tuple3(*self.inner.translation()))
    }
}

/// Pinhole camera intrinsics in pixels.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Intrinsics {
    inner: geometry::Intrinsics,
}

#[pymethods]
impl Intrinsics {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> PyResult<Self> {
        Ok(Self {
            inner: geometry::Intrinsics::new(fx, fy, cx, cy, width, height).map_err(value_err)?,
        })
    }
}

/// Relative camera pose with respect to an object, per the virtual-camera
/// transform; both arguments are frame-from-world transforms.
#[pyfunction]
fn virtual_camera_pose(camera: &Pose, object: &Pose) -> Pose {
    Pose {
        inner: geometry::virtual_camera_pose(&camera.inner, &object.inner),
    }
}

/// Project a world point; returns (u, v, depth, in_frame).
#[pyfunction]
fn project(
    point: (f64, f64, f64),
    intr: &Intrinsics,
    cam: &Pose,
) -> PyResult<(f64, f64, f64, bool)> {
    let p = geometry::project(&vec3(point), &intr.inner, &cam.inner).map_err(value_err)?;
    Ok((p.pixel.u, p.pixel.v, p.pixel.d, p.in_frame))
}

/// Lift a pixel with depth back to a world point.
#[pyfunction]
fn unproject(
    u: f64,
    v: f64,
    depth: f64,
    intr: &Intrinsics,
    cam: &Pose,
) -> PyResult<(f64, f64, f64)> {
    let px = PixelSample { u, v, d: depth };
    Ok(tuple3(
        geometry::unproject(&px, &intr.inner, &cam.inner).map_err(value_err)?,
    ))
}

/// Map a pixel between views; returns (u, v, depth, in_frame).
#[pyfunction]
fn reproject(
    u: f64,
    v: f64,
    depth: f64,
    from_cam: &Pose,
    to_cam: &Pose,
    intr: &Intrinsics,
) -> PyResult<(f64, f64, f64, bool)> {
    let px = PixelSample { u, v, d: depth };
    let p = geometry::reproject(&px, &from_cam.inner, &to_cam.inner, &intr.inner)
        .map_err(value_err)?;
    Ok((p.pixel.u, p.pixel.v, p.pixel.d, p.in_frame))
}

/// Contract an unbounded point into the radius-2 ball.
#[pyfunction]
fn contract(point: (f64, f64, f64), radius: f64) -> (f64, f64, f64) {
    tuple3(parameterization::contract(
        &vec3(point),
        &ContractionConfig::new(radius),
    ))
}

/// Geometrically spaced sample distances over [near, far].
#[pyfunction]
fn sample_log_spaced(near: f64, far: f64, n: usize) -> PyResult<Vec<f64>> {
    let ray = parameterization::Ray {
        origin: nalgebra::Vector3::zeros(),
        direction: nalgebra::Vector3::z(),
        near,
        far,
    };
    parameterization::sample_log_spaced(&ray, n).map_err(value_err)
}

/// Camera ray through a pixel; returns (origin, direction).
#[pyfunction]
fn generate_ray(
    u: f64,
    v: f64,
    intr: &Intrinsics,
    cam: &Pose,
) -> ((f64, f64, f64), (f64, f64, f64)) {
    let ray = parameterization::generate_ray(u, v, &intr.inner, &cam.inner, 0.1, 100.0);
    (tuple3(ray.origin), tuple3(ray.direction))
}

/// Confidence threshold ramp.
#[pyfunction]
fn gamma(x: f64, tau: f64) -> f64 {
    confidence::gamma(x, tau)
}

/// Accumulated transmittance before each sample.
#[pyfunction]
fn transmittance(sigmas: Vec<f64>, deltas: Vec<f64>) -> PyResult<Vec<f64>> {
    render::transmittance(&sigmas, &deltas).map_err(value_err)
}

/// NeRF-style frequency encoding of a 3-vector.
#[pyfunction]
fn positional_encode(v: (f64, f64, f64), levels: usize) -> Vec<f64> {
    streetfield::field::positional_encode(&vec3(v), levels)
}

/// Softmax weights for a set of confidence logits.
#[pyfunction]
fn confidence_weights(logits: Vec<f64>) -> Vec<f64> {
    ConfidenceWeights::from_logits(logits).weights()
}

/// Combine per-component confidences under softmax logits.
#[pyfunction]
fn combine_confidence(components: Vec<f64>, logits: Vec<f64>) -> PyResult<f64> {
    if components.len() != logits.len() {
        return Err(PyValueError::new_err("one logit per component required"));
    }
    Ok(ConfidenceWeights::from_logits(logits).combine_values(&components))
}

#[pyfunction]
fn psnr_from_mse(mse: f64) -> f64 {
    train::psnr_from_mse(mse)
}

/// A randomly initialized radiance field for quick experiments.
#[pyclass]
struct Field {
    inner: RadianceField,
}

#[pymethods]
impl Field {
    #[new]
    #[pyo3(signature = (density_layers=2, density_width=32, color_layers=1, color_width=16, feature_dim=16, levels_position=4, levels_direction=2, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        density_layers: usize,
        density_width: usize,
        color_layers: usize,
        color_width: usize,
        feature_dim: usize,
        levels_position: usize,
        levels_direction: usize,
        seed: u64,
    ) -> Self {
        Self {
            inner: RadianceField::new(FieldConfig {
                density_layers,
                density_width,
                color_layers,
                color_width,
                feature_dim,
                levels_position,
                levels_direction,
                seed,
            }),
        }
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Evaluate at a position and unit view direction; returns
    /// ((r, g, b), sigma).
    fn eval(&self, x: (f64, f64, f64), direction: (f64, f64, f64)) -> ((f64, f64, f64), f64) {
        let d = vec3(direction).normalize();
        let out = self.inner.eval(&vec3(x), &d);
        ((out.color[0], out.color[1], out.color[2]), out.density)
    }
}

/// Ray-trace one view of the built-in street-toy scene; returns
/// (width, height, rgb rows, depth rows) with invalid depth as 0.
#[pyfunction]
fn render_street_toy(
    width: usize,
    height: usize,
    frame: usize,
    camera: usize,
    seed: u64,
) -> PyResult<(usize, usize, Vec<f64>, Vec<f64>)> {
    let scene = scenegen::street_toy(width, height, frame.max(1) + 1, seed);
    let view = scenegen::render_oracle(&scene, frame, camera).map_err(value_err)?;
    let mut rgb = Vec::with_capacity(width * height * 3);
    let mut depth = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            rgb.extend_from_slice(&view.image.get(x, y));
            depth.push(view.depth.get(x, y).unwrap_or(0.0));
        }
    }
    Ok((width, height, rgb, depth))
}

#[pymodule]
fn streetfield_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Pose>()?;
    m.add_class::<Intrinsics>()?;
    m.add_class::<Field>()?;
    m.add_function(wrap_pyfunction!(virtual_camera_pose, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(unproject, m)?)?;
    m.add_function(wrap_pyfunction!(reproject, m)?)?;
    m.add_function(wrap_pyfunction!(contract, m)?)?;
    m.add_function(wrap_pyfunction!(sample_log_spaced, m)?)?;
    m.add_function(wrap_pyfunction!(generate_ray, m)?)?;
    m.add_function(wrap_pyfunction!(gamma, m)?)?;
    m.add_function(wrap_pyfunction!(transmittance, m)?)?;
    m.add_function(wrap_pyfunction!(positional_encode, m)?)?;
    m.add_function(wrap_pyfunction!(confidence_weights, m)?)?;
    m.add_function(wrap_pyfunction!(combine_confidence, m)?)?;
    m.add_function(wrap_pyfunction!(psnr_from_mse, m)?)?;
    m.add_function(wrap_pyfunction!(render_street_toy, m)?)?;
    Ok(())
}
