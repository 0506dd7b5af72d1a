//! Scene contraction and ray sampling.
//!
//! Unbounded backgrounds are squashed into the open ball of radius 2 before
//! positional encoding: points inside the contraction radius map linearly,
//! points outside are pulled in along their own direction. Foreground
//! objects are bounded and skip the contraction.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{Intrinsics, Pose};
use crate::rng::CounterRng;

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("ray bounds invalid: near {near} must satisfy 0 < near < far = {far}")]
    InvalidBounds { near: f64, far: f64 },
    #[error("at least two samples required, got {0}")]
    TooFewSamples(usize),
}

/// Camera ray with unit direction and sampling bounds in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

/// Radius of the linear region of the scene contraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionConfig {
    pub radius: f64,
}

impl ContractionConfig {
    pub fn new(radius: f64) -> Self {
        assert!(radius > 0.0, "contraction radius must be positive");
        Self { radius }
    }
}

/// Coordinate mapping applied to ray samples before encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpaceMapping {
    /// Bounded scenes: samples pass through unchanged.
    Identity,
    /// Unbounded scenes: samples are contracted into the radius-2 ball.
    Contracted(ContractionConfig),
}

impl SpaceMapping {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        match self {
            SpaceMapping::Identity => *x,
            SpaceMapping::Contracted(cfg) => contract(x, cfg),
        }
    }

    /// Pull an upstream gradient back through the mapping.
    pub fn backward(&self, x: &Vector3<f64>, upstream: &Vector3<f64>) -> Vector3<f64> {
        match self {
            SpaceMapping::Identity => *upstream,
            SpaceMapping::Contracted(cfg) => contract_backward(x, cfg, upstream),
        }
    }
}

/// Contract a world point into the radius-2 ball: linear scaling `x / r`
/// inside the radius, `(2 - r/|x|) x/|x|` outside. Continuous at the
/// boundary and direction-preserving; the origin maps to itself.
pub fn contract(x: &Vector3<f64>, cfg: &ContractionConfig) -> Vector3<f64> {
    let r = cfg.radius;
    let n = x.norm();
    if n <= r {
        x / r
    } else {
        x * ((2.0 - r / n) / n)
    }
}

/// Reverse-mode derivative of [`contract`].
pub fn contract_backward(
    x: &Vector3<f64>,
    cfg: &ContractionConfig,
    upstream: &Vector3<f64>,
) -> Vector3<f64> {
    let r = cfg.radius;
    let n = x.norm();
    if n <= r {
        upstream / r
    } else {
        // f = g(n) x with g = 2/n - r/n^2; dg/dn = -2/n^2 + 2r/n^3
        let g = 2.0 / n - r / (n * n);
        let dg = -2.0 / (n * n) + 2.0 * r / (n * n * n);
        upstream * g + x * (dg * x.dot(upstream) / n)
    }
}

/// Geometrically spaced sample distances with `t_0 = near`, `t_{n-1} = far`.
pub fn sample_log_spaced(ray: &Ray, n: usize) -> Result<Vec<f64>, SamplingError> {
    if n < 2 {
        return Err(SamplingError::TooFewSamples(n));
    }
    if ray.near <= 0.0 || ray.near >= ray.far {
        return Err(SamplingError::InvalidBounds {
            near: ray.near,
            far: ray.far,
        });
    }
    let log_near = ray.near.ln();
    let log_far = ray.far.ln();
    let mut ts = Vec::with_capacity(n);
    for i in 0..n {
        let s = i as f64 / (n - 1) as f64;
        ts.push((log_near + (log_far - log_near) * s).exp());
    }
    // pin endpoints exactly against exp/ln round-off
    ts[0] = ray.near;
    ts[n - 1] = ray.far;
    Ok(ts)
}

/// Log-spaced samples jittered uniformly inside their geometric bins; used
/// during training. Deterministic given the counter RNG.
pub fn sample_log_jittered(
    ray: &Ray,
    n: usize,
    rng: &CounterRng,
) -> Result<Vec<f64>, SamplingError> {
    if n < 2 {
        return Err(SamplingError::TooFewSamples(n));
    }
    if ray.near <= 0.0 || ray.near >= ray.far {
        return Err(SamplingError::InvalidBounds {
            near: ray.near,
            far: ray.far,
        });
    }
    let log_near = ray.near.ln();
    let log_far = ray.far.ln();
    let step = (log_far - log_near) / n as f64;
    let mut ts = Vec::with_capacity(n);
    for i in 0..n {
        let jitter = rng.uniform(i as u64);
        ts.push((log_near + step * (i as f64 + jitter)).exp());
    }
    Ok(ts)
}

/// Uniform stratified samples over `[near, far]`; the bounded foreground
/// path. With a `None` RNG the bin midpoints are used (evaluation mode).
pub fn sample_uniform(
    ray: &Ray,
    n: usize,
    rng: Option<&CounterRng>,
) -> Result<Vec<f64>, SamplingError> {
    if n < 2 {
        return Err(SamplingError::TooFewSamples(n));
    }
    if ray.near >= ray.far {
        return Err(SamplingError::InvalidBounds {
            near: ray.near,
            far: ray.far,
        });
    }
    let step = (ray.far - ray.near) / n as f64;
    let mut ts = Vec::with_capacity(n);
    for i in 0..n {
        let frac = match rng {
            Some(r) => r.uniform(i as u64),
            None => 0.5,
        };
        ts.push(ray.near + step * (i as f64 + frac));
    }
    Ok(ts)
}

/// Build the camera ray through pixel `(u, v)`; origin is the camera center
/// and the direction is the normalized back-projection.
pub fn generate_ray(
    u: f64,
    v: f64,
    intr: &Intrinsics,
    cam: &Pose,
    near: f64,
    far: f64,
) -> Ray {
    assert!(near < far, "ray bounds must satisfy near < far");
    let dir_cam = Vector3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
    let dir_world = cam.transform_vector(&dir_cam);
    Ray {
        origin: *cam.translation(),
        direction: dir_world.normalize(),
        near,
        far,
    }
}

/// Rendered ray distances are converted to camera-frame depth by this
/// factor: `z = t * depth_cosine(u, v)`. Constant per pixel.
pub fn depth_cosine(u: f64, v: f64, intr: &Intrinsics) -> f64 {
    let dx = (u - intr.cx) / intr.fx;
    let dy = (v - intr.cy) / intr.fy;
    1.0 / (dx * dx + dy * dy + 1.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101).unwrap()
    }

    #[test]
    fn contract_zero_maps_to_zero() {
        let cfg = ContractionConfig::new(3.0);
        assert_eq!(contract(&Vector3::zeros(), &cfg), Vector3::zeros());
    }

    #[test]
    fn contract_linear_branch() {
        let cfg = ContractionConfig::new(3.0);
        let f = contract(&Vector3::new(1.5, 0.0, 0.0), &cfg);
        assert!((f - Vector3::new(0.5, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn contract_outer_branch_hand_evaluated() {
        // |x| = 6, r = 3: (2 - 3/6) * (1,0,0) = (1.5, 0, 0)
        let cfg = ContractionConfig::new(3.0);
        let f = contract(&Vector3::new(6.0, 0.0, 0.0), &cfg);
        assert!((f - Vector3::new(1.5, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn contract_norm_bounded_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for &r in &[1.0, 3.0, 5.0, 10.0] {
            let cfg = ContractionConfig::new(r);
            let mut norms: Vec<(f64, f64)> = (0..2000)
                .map(|_| {
                    let x = Vector3::new(
                        rng.random_range(-200.0..200.0),
                        rng.random_range(-200.0..200.0),
                        rng.random_range(-200.0..200.0),
                    );
                    (x.norm(), contract(&x, &cfg).norm())
                })
                .collect();
            assert!(norms.iter().all(|&(_, fn_)| fn_ < 2.0));
            // inside iff |x| <= r
            for &(n, fnorm) in &norms {
                assert_eq!(n <= r, fnorm <= 1.0 + 1e-12, "n={n} f={fnorm} r={r}");
            }
            // norm map is strictly increasing -> injective on norms
            norms.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for w in norms.windows(2) {
                assert!(w[0].1 < w[1].1 + 1e-15);
            }
        }
    }

    #[test]
    fn contract_continuous_at_boundary() {
        let cfg = ContractionConfig::new(3.0);
        let u = Vector3::new(1.0, 2.0, -0.5).normalize();
        let eps = 1e-6;
        let inside = contract(&(u * cfg.radius * (1.0 - eps)), &cfg).norm();
        let outside = contract(&(u * cfg.radius * (1.0 + eps)), &cfg).norm();
        assert!((inside - outside).abs() < 1e-5);
    }

    #[test]
    fn contract_preserves_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let cfg = ContractionConfig::new(3.0);
        for _ in 0..1000 {
            let x = Vector3::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
            );
            if x.norm() < 1e-9 {
                continue;
            }
            let f = contract(&x, &cfg);
            assert!(f.cross(&x).norm() < 1e-9, "direction changed");
            assert!(f.dot(&x) >= 0.0);
        }
    }

    #[test]
    fn contract_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let cfg = ContractionConfig::new(3.0);
        let h = 1e-6;
        for _ in 0..200 {
            let x: Vector3<f64> = Vector3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            );
            if (x.norm() - cfg.radius).abs() < 1e-3 {
                continue; // kink at the boundary
            }
            let u = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let g = contract_backward(&x, &cfg, &u);
            for i in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fd = (contract(&xp, &cfg).dot(&u) - contract(&xm, &cfg).dot(&u)) / (2.0 * h);
                assert!(
                    (fd - g[i]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "i={i} fd={fd} analytic={}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn log_spacing_three_samples() {
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::z(),
            near: 1.0,
            far: 100.0,
        };
        let ts = sample_log_spaced(&ray, 3).unwrap();
        assert_abs_diff_eq!(ts[0], 1.0, epsilon = 0.0);
        assert_abs_diff_eq!(ts[1], 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(ts[2], 100.0, epsilon = 0.0);
    }

    #[test]
    fn log_spacing_two_samples_gives_endpoints() {
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::z(),
            near: 0.5,
            far: 7.0,
        };
        assert_eq!(sample_log_spaced(&ray, 2).unwrap(), vec![0.5, 7.0]);
    }

    #[test]
    fn log_spacing_collapsed_interval() {
        let near = 2.0;
        let far = 2.0 + 1e-9;
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::z(),
            near,
            far,
        };
        let ts = sample_log_spaced(&ray, 8).unwrap();
        for w in ts.windows(2) {
            assert!(w[1] > w[0]);
        }
        assert!(ts.iter().all(|&t| (near..=far).contains(&t)));
    }

    #[test]
    fn log_spacing_constant_ratio() {
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::z(),
            near: 0.2,
            far: 120.0,
        };
        let ts = sample_log_spaced(&ray, 64).unwrap();
        let r0 = ts[1] / ts[0];
        for w in ts.windows(2) {
            assert!(((w[1] / w[0]) - r0).abs() < 1e-9);
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn log_spacing_rejects_bad_bounds() {
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::z(),
            near: 0.0,
            far: 10.0,
        };
        assert!(matches!(
            sample_log_spaced(&ray, 4),
            Err(SamplingError::InvalidBounds { .. })
        ));
    }

    #[test]
    fn jittered_samples_stay_sorted_inside_bounds() {
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::z(),
            near: 0.2,
            far: 120.0,
        };
        let rng = CounterRng::new(5, 77);
        let ts = sample_log_jittered(&ray, 128, &rng).unwrap();
        for w in ts.windows(2) {
            assert!(w[1] > w[0]);
        }
        assert!(ts[0] >= ray.near && *ts.last().unwrap() <= ray.far);
    }

    #[test]
    fn principal_ray_points_forward() {
        let ray = generate_ray(50.0, 50.0, &intr(), &Pose::identity(), 0.1, 10.0);
        assert!((ray.direction - Vector3::z()).norm() < 1e-12);
        assert_eq!(ray.origin, Vector3::zeros());
    }

    #[test]
    fn ray_points_reproject_to_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let intr = intr();
        for _ in 0..200 {
            let cam = Pose::from_axis_angle(
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
                rng.random_range(-1.0..1.0),
                Vector3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                ),
            );
            let u = rng.random_range(0.0..100.0);
            let v = rng.random_range(0.0..100.0);
            let ray = generate_ray(u, v, &intr, &cam, 0.1, 50.0);
            for &t in &[0.3, 2.0, 17.0] {
                let p = ray.origin + ray.direction * t;
                let proj = project(&p, &intr, &cam).unwrap();
                assert!((proj.pixel.u - u).abs() < 1e-9);
                assert!((proj.pixel.v - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn offcenter_ray_tangent() {
        let intr = intr();
        let u = 80.0;
        let ray = generate_ray(u, 50.0, &intr, &Pose::identity(), 0.1, 10.0);
        let tangent = ray.direction.x / ray.direction.z;
        assert_abs_diff_eq!(tangent, (u - intr.cx) / intr.fx, epsilon = 1e-12);
    }

    #[test]
    fn depth_cosine_converts_distance_to_z() {
        let intr = intr();
        let ray = generate_ray(73.0, 21.0, &intr, &Pose::identity(), 0.1, 10.0);
        let t = 8.0;
        let p = ray.origin + ray.direction * t;
        // camera at identity: z is the third coordinate
        assert_abs_diff_eq!(p.z, t * depth_cosine(73.0, 21.0, &intr), epsilon = 1e-12);
    }
}
