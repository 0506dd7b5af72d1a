//! Analytic synthetic-scene oracle: textured primitives, a moving camera
//! rig and a spinning LiDAR, all with exact ground truth for images, depth,
//! optical flow and point clouds. The desk-scale stand-in for real captures.
//!
//! World frame: x right, y down, z forward along the initial ego heading.
//! All randomness is counter-based so parallel and serial generation agree
//! bitwise.

use nalgebra::Vector3;
use thiserror::Error;

use crate::depthfusion::{DepthMap, FlowField, PointCloud};
use crate::geometry::{compose, project, Intrinsics, Pose};
use crate::parameterization::{depth_cosine, generate_ray};
use crate::raster::{Grid, Image, Mask};
use crate::rng::CounterRng;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("frame {frame} or camera {camera} out of range")]
    IndexOutOfRange { frame: usize, camera: usize },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

const RAY_T_MIN: f64 = 1e-6;
/// Occlusion tolerance for flow correspondence, in meters.
const OCCLUSION_TOL: f64 = 1e-4;
/// Texture coefficients are independent of the scene seed.
const TEXTURE_SEED: u64 = 0x7ab1_e5;

/// Band-limited sinusoid mixture over surface coordinates; smooth under
/// bilinear resampling and deterministic per texture id.
pub fn texture_color(texture: u32, su: f64, sv: f64) -> [f64; 3] {
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let rng = CounterRng::new(TEXTURE_SEED, (texture as u64) << 2 | c as u64);
        let mut acc = 0.0;
        let mut amp_sum = 0.0;
        for j in 0..3u64 {
            let wu = 0.35 + 1.0 * rng.uniform(4 * j);
            let wv = 0.35 + 1.0 * rng.uniform(4 * j + 1);
            let phase = std::f64::consts::TAU * rng.uniform(4 * j + 2);
            let amp = 0.25 + 0.75 * rng.uniform(4 * j + 3);
            acc += amp * (wu * su + wv * sv + phase).sin();
            amp_sum += amp;
        }
        *out = 0.5 + 0.35 * acc / amp_sum;
    }
    rgb
}

/// Smooth sky color for rays escaping the scene.
fn sky_color(dir: &Vector3<f64>) -> [f64; 3] {
    let up = (-dir.y).clamp(-1.0, 1.0);
    let swirl = 0.04 * (3.0 * dir.x + 1.0).sin();
    [
        0.45 + 0.18 * up + swirl,
        0.5 + 0.2 * up + swirl,
        0.62 + 0.22 * up,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Rectangle in the local z=0 plane, normal +z, extents in x/y.
    Rect { half_u: f64, half_v: f64 },
    Sphere { radius: f64 },
    /// Axis-aligned box in its local frame.
    Box { half_extents: Vector3<f64> },
}

#[derive(Debug, Clone, Copy)]
struct LocalHit {
    t: f64,
    local: Vector3<f64>,
    su: f64,
    sv: f64,
}

impl Shape {
    /// Nearest intersection with a ray given in the shape's local frame.
    fn intersect_local(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<LocalHit> {
        match *self {
            Shape::Rect { half_u, half_v } => {
                if d.z.abs() < 1e-12 {
                    return None;
                }
                let t = -o.z / d.z;
                if t <= RAY_T_MIN {
                    return None;
                }
                let p = o + d * t;
                if p.x.abs() > half_u || p.y.abs() > half_v {
                    return None;
                }
                Some(LocalHit {
                    t,
                    local: p,
                    su: p.x,
                    sv: p.y,
                })
            }
            Shape::Sphere { radius } => {
                let b = o.dot(d);
                let c = o.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > RAY_T_MIN {
                    -b - sq
                } else if -b + sq > RAY_T_MIN {
                    -b + sq
                } else {
                    return None;
                };
                let p = o + d * t;
                Some(LocalHit {
                    t,
                    local: p,
                    su: radius * p.y.atan2(p.x),
                    sv: radius * (p.z / radius).clamp(-1.0, 1.0).acos(),
                })
            }
            Shape::Box { half_extents } => {
                let mut t_enter = f64::NEG_INFINITY;
                let mut t_exit = f64::INFINITY;
                let mut axis = 0;
                for i in 0..3 {
                    if d[i].abs() < 1e-12 {
                        if o[i].abs() > half_extents[i] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / d[i];
                    let mut t0 = (-half_extents[i] - o[i]) * inv;
                    let mut t1 = (half_extents[i] - o[i]) * inv;
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_enter {
                        t_enter = t0;
                        axis = i;
                    }
                    t_exit = t_exit.min(t1);
                }
                if t_enter > t_exit || t_enter <= RAY_T_MIN {
                    return None;
                }
                let p = o + d * t_enter;
                // unfold per-face so adjacent faces carry distinct texture
                let (a, b) = match axis {
                    0 => (p.y, p.z),
                    1 => (p.x, p.z),
                    _ => (p.x, p.y),
                };
                let face = axis as f64 * 2.0 + if p[axis] > 0.0 { 0.0 } else { 1.0 };
                Some(LocalHit {
                    t: t_enter,
                    local: p,
                    su: a + 7.3 * face,
                    sv: b - 3.1 * face,
                })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Primitive {
    pub shape: Shape,
    pub pose: Pose,
    pub texture: u32,
}

/// A primitive with one pose per frame.
#[derive(Debug, Clone)]
pub struct DynamicObject {
    pub shape: Shape,
    pub texture: u32,
    pub poses: Vec<Pose>,
}

#[derive(Debug, Clone)]
pub struct CameraMount {
    pub intrinsics: Intrinsics,
    /// Camera-to-ego.
    pub pose: Pose,
}

/// Spinning-beam sensor model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarSpec {
    pub channels: usize,
    pub azimuth_step: f64,
    pub noise_sigma: f64,
    pub dropout: f64,
    /// Beam elevation range in radians; up is positive.
    pub elevation_min: f64,
    pub elevation_max: f64,
}

#[derive(Debug, Clone)]
pub struct SceneOracle {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub dynamic_objects: Vec<DynamicObject>,
    /// Ego-to-world pose per frame.
    pub ego: Vec<Pose>,
    pub cameras: Vec<CameraMount>,
    pub lidar_spec: LidarSpec,
    /// Sensor-to-ego.
    pub lidar_pose: Pose,
    pub frames: usize,
    pub near: f64,
    pub far: f64,
    pub seed: u64,
}

/// A surface hit with enough provenance to track correspondence over time.
#[derive(Debug, Clone, Copy)]
pub struct Hit {
    /// Distance along the unit ray direction.
    pub t: f64,
    pub world: Vector3<f64>,
    /// Point in the owning primitive's local frame.
    pub local: Vector3<f64>,
    pub color: [f64; 3],
    pub dynamic_index: Option<usize>,
}

impl SceneOracle {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.ego.len() != self.frames {
            return Err(SceneError::InvalidScene(format!(
                "{} ego poses for {} frames",
                self.ego.len(),
                self.frames
            )));
        }
        for obj in &self.dynamic_objects {
            if obj.poses.len() != self.frames {
                return Err(SceneError::InvalidScene(
                    "dynamic object pose count != frames".into(),
                ));
            }
        }
        if self.cameras.is_empty() || self.frames == 0 {
            return Err(SceneError::InvalidScene(
                "scene needs at least one camera and one frame".into(),
            ));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(SceneError::InvalidScene(format!(
                "bad bounds near={} far={}",
                self.near, self.far
            )));
        }
        // every camera must see at least one primitive
        for frame in 0..self.frames {
            for cam in 0..self.cameras.len() {
                let intr = self.cameras[cam].intrinsics;
                let pose = self.camera_pose(frame, cam)?;
                let mut seen = false;
                'probe: for py in 0..5 {
                    for px in 0..5 {
                        let u = (intr.width - 1) as f64 * px as f64 / 4.0;
                        let v = (intr.height - 1) as f64 * py as f64 / 4.0;
                        let ray = generate_ray(u, v, &intr, &pose, self.near, self.far);
                        if self.intersect(frame, &ray.origin, &ray.direction).is_some() {
                            seen = true;
                            break 'probe;
                        }
                    }
                }
                if !seen {
                    return Err(SceneError::InvalidScene(format!(
                        "camera {cam} sees nothing at frame {frame}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn camera_pose(&self, frame: usize, camera: usize) -> Result<Pose, SceneError> {
        if frame >= self.frames || camera >= self.cameras.len() {
            return Err(SceneError::IndexOutOfRange { frame, camera });
        }
        Ok(compose(&self.ego[frame], &self.cameras[camera].pose))
    }

    pub fn lidar_pose(&self, frame: usize) -> Result<Pose, SceneError> {
        if frame >= self.frames {
            return Err(SceneError::IndexOutOfRange { frame, camera: 0 });
        }
        Ok(compose(&self.ego[frame], &self.lidar_pose))
    }

    /// Nearest surface hit for a world-space ray at the given frame.
    pub fn intersect(
        &self,
        frame: usize,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
    ) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |pose: &Pose, shape: &Shape, texture: u32, dyn_idx: Option<usize>| {
            let o = pose.inverse_transform_point(origin);
            let d = pose.rotation().transpose() * dir;
            if let Some(hit) = shape.intersect_local(&o, &d) {
                if best.as_ref().map_or(true, |b| hit.t < b.t) {
                    best = Some(Hit {
                        t: hit.t,
                        world: origin + dir * hit.t,
                        local: hit.local,
                        color: texture_color(texture, hit.su, hit.sv),
                        dynamic_index: dyn_idx,
                    });
                }
            }
        };
        for p in &self.primitives {
            consider(&p.pose, &p.shape, p.texture, None);
        }
        for (i, obj) in self.dynamic_objects.iter().enumerate() {
            consider(&obj.poses[frame], &obj.shape, obj.texture, Some(i));
        }
        best
    }
}

/// Rendered ground truth for one view, including which pixels belong to
/// dynamic objects (`None` for static surfaces and sky).
pub struct OracleView {
    pub image: Image,
    pub depth: DepthMap,
    pub dynamic: Grid<Option<usize>>,
}

/// Exact ray-traced view: nearest hit wins, background pixels keep an
/// invalid depth.
pub fn render_oracle(
    scene: &SceneOracle,
    frame: usize,
    camera: usize,
) -> Result<OracleView, SceneError> {
    let cam_pose = scene.camera_pose(frame, camera)?;
    let intr = scene.cameras[camera].intrinsics;
    let mut image = Image::filled(intr.width, intr.height, [0.0; 3]);
    let mut values = Grid::filled(intr.width, intr.height, 0.0);
    let mut valid = Mask::filled(intr.width, intr.height, false);
    let mut dynamic = Grid::filled(intr.width, intr.height, None);
    for y in 0..intr.height {
        for x in 0..intr.width {
            let ray = generate_ray(x as f64, y as f64, &intr, &cam_pose, scene.near, scene.far);
            match scene.intersect(frame, &ray.origin, &ray.direction) {
                Some(hit) => {
                    image.set(x, y, hit.color);
                    values.set(x, y, hit.t * depth_cosine(x as f64, y as f64, &intr));
                    valid.set(x, y, true);
                    dynamic.set(x, y, hit.dynamic_index);
                }
                None => {
                    image.set(x, y, sky_color(&ray.direction));
                }
            }
        }
    }
    Ok(OracleView {
        image,
        depth: DepthMap::new(values, valid),
        dynamic,
    })
}

/// Exact optical flow from surface correspondence between two views,
/// following dynamic objects through their per-frame poses. Pixels whose
/// correspondence is occluded or leaves the target view are invalid.
pub fn oracle_flow(
    scene: &SceneOracle,
    frame_s: usize,
    camera_s: usize,
    frame_t: usize,
    camera_t: usize,
) -> Result<FlowField, SceneError> {
    let pose_s = scene.camera_pose(frame_s, camera_s)?;
    let pose_t = scene.camera_pose(frame_t, camera_t)?;
    let intr_s = scene.cameras[camera_s].intrinsics;
    let intr_t = scene.cameras[camera_t].intrinsics;
    let mut flow = FlowField::invalid(intr_s.width, intr_s.height);
    for y in 0..intr_s.height {
        for x in 0..intr_s.width {
            let ray = generate_ray(x as f64, y as f64, &intr_s, &pose_s, scene.near, scene.far);
            let Some(hit) = scene.intersect(frame_s, &ray.origin, &ray.direction) else {
                continue;
            };
            // carry the surface point to the target frame
            let world_t = match hit.dynamic_index {
                Some(i) => scene.dynamic_objects[i].poses[frame_t].transform_point(&hit.local),
                None => hit.world,
            };
            let Ok(proj) = project(&world_t, &intr_t, &pose_t) else {
                continue;
            };
            if !proj.in_frame {
                continue;
            }
            // occlusion: is the carried point the first surface along the
            // target ray?
            let origin_t = *pose_t.translation();
            let to_point = world_t - origin_t;
            let dist = to_point.norm();
            let dir_t = to_point / dist;
            if let Some(front) = scene.intersect(frame_t, &origin_t, &dir_t) {
                if front.t < dist - OCCLUSION_TOL {
                    continue;
                }
            }
            flow.set(x, y, proj.pixel.u - x as f64, proj.pixel.v - y as f64);
        }
    }
    Ok(flow)
}

/// One simulated sweep; dynamic labels ride along for test oracles only.
pub struct LidarSweep {
    pub cloud: PointCloud,
    pub dynamic: Vec<bool>,
}

/// Cast the beam grid from the sensor pose; hits get radial Gaussian noise
/// and seeded dropout. Points are expressed in the sensor frame, tagged
/// with the sensor pose.
pub fn simulate_lidar(
    scene: &SceneOracle,
    frame: usize,
    spec: &LidarSpec,
) -> Result<LidarSweep, SceneError> {
    let sensor = scene.lidar_pose(frame)?;
    let origin = *sensor.translation();
    let azimuth_count = (std::f64::consts::TAU / spec.azimuth_step).floor() as usize;
    let rng = CounterRng::new(scene.seed, 0x11d4 ^ frame as u64);
    let noise_rng = rng.substream(1);
    let drop_rng = rng.substream(2);
    let mut points = Vec::new();
    let mut dynamic = Vec::new();
    for ch in 0..spec.channels {
        let s = if spec.channels > 1 {
            ch as f64 / (spec.channels - 1) as f64
        } else {
            0.5
        };
        let elevation = spec.elevation_min + (spec.elevation_max - spec.elevation_min) * s;
        for az in 0..azimuth_count {
            let beam = (ch * azimuth_count + az) as u64;
            if drop_rng.uniform(beam) < spec.dropout {
                continue;
            }
            let a = az as f64 * spec.azimuth_step;
            let dir_local = Vector3::new(
                elevation.cos() * a.sin(),
                -elevation.sin(),
                elevation.cos() * a.cos(),
            );
            let dir_world = sensor.transform_vector(&dir_local);
            let Some(hit) = scene.intersect(frame, &origin, &dir_world) else {
                continue;
            };
            if hit.t > scene.far {
                continue;
            }
            let range = hit.t + spec.noise_sigma * noise_rng.gaussian(beam);
            if range <= 0.0 {
                continue;
            }
            points.push(dir_local * range);
            dynamic.push(hit.dynamic_index.is_some());
        }
    }
    Ok(LidarSweep {
        cloud: PointCloud {
            points,
            frame: sensor,
        },
        dynamic,
    })
}

/// Depth map degraded the way the robustness ablations expect: Gaussian
/// noise everywhere plus a seeded fraction of pixels scaled into outliers.
pub struct CorruptedDepth {
    pub depth: DepthMap,
    /// Pixels that received the outlier scaling.
    pub outliers: Mask,
}

pub fn corrupt_depth(
    depth: &DepthMap,
    noise_sigma: f64,
    outlier_rate: f64,
    outlier_scale: f64,
    rng: &CounterRng,
) -> CorruptedDepth {
    assert!((0.0..1.0).contains(&outlier_rate));
    let noise_rng = rng.substream(1);
    let pick_rng = rng.substream(2);
    let mut out = depth.clone();
    let mut outliers = Mask::filled(depth.width(), depth.height(), false);
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let Some(d) = depth.get(x, y) else { continue };
            let counter = (y * depth.width() + x) as u64;
            let mut v = d + noise_sigma * noise_rng.gaussian(counter);
            if pick_rng.uniform(counter) < outlier_rate {
                v *= outlier_scale;
                outliers.set(x, y, true);
            }
            out.set(x, y, v.max(1e-3));
        }
    }
    CorruptedDepth {
        depth: out,
        outliers,
    }
}

fn yaw_about_vertical(angle: f64) -> Pose {
    // y is down, so yaw spins about the y axis
    Pose::from_axis_angle(Vector3::y(), angle, Vector3::zeros())
}

/// The standard test scene: a ground plane, two walls with small camera
/// overlap, a sphere, and one box crossing the view over the sequence.
/// Three cameras (front, front-left, front-right) ride a forward-moving ego
/// with a 32-beam lidar.
pub fn street_toy(width: usize, height: usize, frames: usize, seed: u64) -> SceneOracle {
    let focal = 0.9 * width as f64;
    let intr = Intrinsics::new(
        focal,
        focal,
        (width as f64 - 1.0) / 2.0,
        (height as f64 - 1.0) / 2.0,
        width,
        height,
    )
    .expect("valid intrinsics");

    let ground = Primitive {
        // normal +z rotated to point up (-y)
        shape: Shape::Rect {
            half_u: 40.0,
            half_v: 60.0,
        },
        pose: Pose::from_axis_angle(
            Vector3::x(),
            -std::f64::consts::FRAC_PI_2,
            Vector3::new(0.0, 1.5, 30.0),
        ),
        texture: 1,
    };
    let left_wall = Primitive {
        shape: Shape::Rect {
            half_u: 60.0,
            half_v: 4.0,
        },
        pose: Pose::from_axis_angle(
            Vector3::y(),
            std::f64::consts::FRAC_PI_2,
            Vector3::new(-6.0, -2.5 + 1.5, 30.0),
        ),
        texture: 2,
    };
    let right_wall = Primitive {
        shape: Shape::Rect {
            half_u: 60.0,
            half_v: 4.0,
        },
        pose: Pose::from_axis_angle(
            Vector3::y(),
            -std::f64::consts::FRAC_PI_2,
            Vector3::new(7.0, -2.5 + 1.5, 30.0),
        ),
        texture: 3,
    };
    let sphere = Primitive {
        shape: Shape::Sphere { radius: 1.2 },
        pose: Pose::from_translation(Vector3::new(2.8, 0.3, 17.0)),
        texture: 4,
    };
    let far_sphere = Primitive {
        shape: Shape::Sphere { radius: 1.5 },
        pose: Pose::from_translation(Vector3::new(-3.6, 0.0, 25.0)),
        texture: 7,
    };
    let parked_box = Primitive {
        shape: Shape::Box {
            half_extents: Vector3::new(1.2, 0.9, 1.0),
        },
        pose: Pose::from_axis_angle(
            Vector3::y(),
            0.35,
            Vector3::new(4.3, 0.6, 33.0),
        ),
        texture: 8,
    };
    // tall wall closing the corridor so every forward ray hits a surface
    let back_wall = Primitive {
        shape: Shape::Rect {
            half_u: 45.0,
            half_v: 15.0,
        },
        pose: Pose::from_axis_angle(
            Vector3::y(),
            std::f64::consts::PI,
            Vector3::new(0.5, -8.0, 60.0),
        ),
        texture: 6,
    };

    // box crossing diagonally toward the rig, well above the road: stale
    // accumulated returns land on pixels whose true surface is much deeper,
    // and the crossing stays inside the front camera so its flow
    // correspondences remain checkable in every frame
    let box_half = Vector3::new(1.2, 0.7, 0.6);
    let poses = (0..frames)
        .map(|f| {
            let s = f as f64;
            Pose::from_translation(Vector3::new(-4.0 + 1.1 * s, -0.9, 16.5 - 0.5 * s))
        })
        .collect();
    let crossing_box = DynamicObject {
        shape: Shape::Box {
            half_extents: box_half,
        },
        texture: 5,
        poses,
    };

    let ego = (0..frames)
        .map(|f| Pose::from_translation(Vector3::new(0.0, 0.0, 2.0 * f as f64)))
        .collect();

    let yaw = 0.85; // ~49 degrees; neighbouring views barely overlap
    let cameras = vec![
        CameraMount {
            intrinsics: intr,
            pose: Pose::from_translation(Vector3::new(0.0, -0.2, 0.2)),
        },
        CameraMount {
            intrinsics: intr,
            pose: compose(
                &Pose::from_translation(Vector3::new(-0.35, -0.2, 0.0)),
                &yaw_about_vertical(-yaw),
            ),
        },
        CameraMount {
            intrinsics: intr,
            pose: compose(
                &Pose::from_translation(Vector3::new(0.35, -0.2, 0.0)),
                &yaw_about_vertical(yaw),
            ),
        },
    ];

    SceneOracle {
        name: "street-toy".into(),
        primitives: vec![ground, left_wall, right_wall, sphere, far_sphere, parked_box, back_wall],
        dynamic_objects: vec![crossing_box],
        ego,
        cameras,
        lidar_spec: LidarSpec {
            channels: 32,
            azimuth_step: std::f64::consts::TAU / 180.0,
            noise_sigma: 0.0,
            dropout: 0.0,
            elevation_min: -0.42,
            elevation_max: 0.22,
        },
        lidar_pose: Pose::from_translation(Vector3::new(0.0, -0.4, 0.0)),
        frames,
        near: 0.2,
        far: 120.0,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depthfusion::splat_to_depth;
    use crate::geometry::{reproject, PixelSample};
    use approx::assert_abs_diff_eq;

    fn single_plane_scene(width: usize, height: usize) -> SceneOracle {
        let focal = 0.9 * width as f64;
        let intr = Intrinsics::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
        .unwrap();
        SceneOracle {
            name: "plane".into(),
            primitives: vec![Primitive {
                shape: Shape::Rect {
                    half_u: 50.0,
                    half_v: 50.0,
                },
                pose: Pose::from_translation(Vector3::new(0.0, 0.0, 10.0)),
                texture: 1,
            }],
            dynamic_objects: vec![],
            ego: vec![Pose::identity(), Pose::from_translation(Vector3::new(0.5, 0.0, 0.0))],
            cameras: vec![CameraMount {
                intrinsics: intr,
                pose: Pose::identity(),
            }],
            lidar_spec: LidarSpec {
                channels: 8,
                azimuth_step: std::f64::consts::TAU / 90.0,
                noise_sigma: 0.0,
                dropout: 0.0,
                elevation_min: -0.2,
                elevation_max: 0.2,
            },
            lidar_pose: Pose::identity(),
            frames: 2,
            near: 0.2,
            far: 60.0,
            seed: 9,
        }
    }

    #[test]
    fn plane_renders_constant_depth() {
        let scene = single_plane_scene(32, 24);
        let view = render_oracle(&scene, 0, 0).unwrap();
        for y in 0..24 {
            for x in 0..32 {
                assert_abs_diff_eq!(view.depth.get(x, y).unwrap(), 10.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn sphere_center_depth() {
        let mut scene = single_plane_scene(33, 25);
        scene.primitives = vec![Primitive {
            shape: Shape::Sphere { radius: 1.0 },
            pose: Pose::from_translation(Vector3::new(0.0, 0.0, 10.0)),
            texture: 2,
        }];
        let view = render_oracle(&scene, 0, 0).unwrap();
        // principal pixel: ray-sphere quadratic gives 10 - 1
        assert_abs_diff_eq!(view.depth.get(16, 12).unwrap(), 9.0, epsilon = 1e-9);
    }

    #[test]
    fn camera_behind_everything_sees_nothing() {
        let mut scene = single_plane_scene(16, 12);
        scene.ego[0] = Pose::from_translation(Vector3::new(0.0, 0.0, 20.0));
        let view = render_oracle(&scene, 0, 0).unwrap();
        assert_eq!(view.depth.valid_count(), 0);
        assert!(scene.validate().is_err());
    }

    #[test]
    fn index_out_of_range_is_reported() {
        let scene = single_plane_scene(16, 12);
        assert!(matches!(
            render_oracle(&scene, 7, 0),
            Err(SceneError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn flow_same_view_is_zero() {
        let scene = single_plane_scene(24, 18);
        let flow = oracle_flow(&scene, 0, 0, 0, 0).unwrap();
        let mut seen = 0;
        for y in 0..18 {
            for x in 0..24 {
                if let Some((du, dv)) = flow.get(x, y) {
                    assert!(du.abs() < 1e-9 && dv.abs() < 1e-9);
                    seen += 1;
                }
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn flow_translation_matches_stereo_algebra() {
        let scene = single_plane_scene(24, 18);
        // ego moves +0.5 in x between frames; plane at constant z = 10
        let flow = oracle_flow(&scene, 0, 0, 1, 0).unwrap();
        let expected = -scene.cameras[0].intrinsics.fx * 0.5 / 10.0;
        for y in 0..18 {
            for x in 0..24 {
                if let Some((du, dv)) = flow.get(x, y) {
                    assert_abs_diff_eq!(du, expected, epsilon = 1e-9);
                    assert_abs_diff_eq!(dv, 0.0, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn object_moving_with_camera_has_zero_flow() {
        let mut scene = single_plane_scene(32, 24);
        // box rides along with the ego between frames
        scene.dynamic_objects = vec![DynamicObject {
            shape: Shape::Box {
                half_extents: Vector3::new(1.0, 1.0, 0.5),
            },
            texture: 3,
            poses: vec![
                Pose::from_translation(Vector3::new(0.0, 0.0, 6.0)),
                Pose::from_translation(Vector3::new(0.5, 0.0, 6.0)),
            ],
        }];
        let flow = oracle_flow(&scene, 0, 0, 1, 0).unwrap();
        let view = render_oracle(&scene, 0, 0).unwrap();
        let mut on_object = 0;
        let mut off_object = 0;
        for y in 0..24 {
            for x in 0..32 {
                let Some((du, dv)) = flow.get(x, y) else { continue };
                if view.dynamic.get(x, y).is_some() {
                    assert!(du.abs() < 1e-9 && dv.abs() < 1e-9, "object flow {du},{dv}");
                    on_object += 1;
                } else if du.abs() > 1e-6 {
                    off_object += 1;
                }
            }
        }
        assert!(on_object > 0 && off_object > 0);
    }

    #[test]
    fn oracle_flow_agrees_with_depth_reprojection() {
        let scene = street_toy(48, 36, 5, 3);
        let view = render_oracle(&scene, 1, 0).unwrap();
        let flow = oracle_flow(&scene, 1, 0, 2, 0).unwrap();
        let cam_s = scene.camera_pose(1, 0).unwrap();
        let cam_t = scene.camera_pose(2, 0).unwrap();
        let intr = scene.cameras[0].intrinsics;
        let mut checked = 0;
        for y in 0..36 {
            for x in 0..48 {
                if view.dynamic.get(x, y).is_some() {
                    continue;
                }
                let (Some(d), Some((du, dv))) = (view.depth.get(x, y), flow.get(x, y)) else {
                    continue;
                };
                let px = PixelSample {
                    u: x as f64,
                    v: y as f64,
                    d,
                };
                let Ok(proj) = reproject(&px, &cam_s, &cam_t, &intr) else {
                    continue;
                };
                assert!(
                    (proj.pixel.u - (x as f64 + du)).abs() < 1e-6
                        && (proj.pixel.v - (y as f64 + dv)).abs() < 1e-6,
                    "flow/reprojection disagree at ({x},{y})"
                );
                checked += 1;
            }
        }
        assert!(checked > 200, "only {checked} pixels compared");
    }

    #[test]
    fn lidar_points_lie_on_surfaces() {
        let scene = street_toy(48, 36, 5, 3);
        let sweep = simulate_lidar(&scene, 2, &scene.lidar_spec).unwrap();
        assert!(sweep.cloud.len() > 500, "too few returns: {}", sweep.cloud.len());
        let sensor = scene.lidar_pose(2).unwrap();
        for p in sweep.cloud.points.iter().step_by(7) {
            let world = sensor.transform_point(p);
            let origin = *sensor.translation();
            let dir = (world - origin).normalize();
            let hit = scene.intersect(2, &origin, &dir).expect("beam hit");
            assert!(
                (hit.t - (world - origin).norm()).abs() < 1e-9,
                "returned point not on the first surface"
            );
        }
    }

    #[test]
    fn lidar_dropout_is_binomial() {
        let mut scene = street_toy(48, 36, 5, 3);
        scene.lidar_spec.dropout = 0.0;
        let full = simulate_lidar(&scene, 0, &scene.lidar_spec).unwrap().cloud.len();
        scene.lidar_spec.dropout = 0.5;
        let kept = simulate_lidar(&scene, 0, &scene.lidar_spec).unwrap().cloud.len();
        let n = full as f64;
        let sigma = (n * 0.25).sqrt();
        assert!(
            (kept as f64 - n * 0.5).abs() < 3.0 * sigma,
            "kept {kept} of {full}"
        );
    }

    #[test]
    fn lidar_labels_dynamic_hits() {
        let scene = street_toy(64, 48, 5, 3);
        let sweep = simulate_lidar(&scene, 2, &scene.lidar_spec).unwrap();
        let n_dyn = sweep.dynamic.iter().filter(|&&d| d).count();
        assert!(n_dyn > 0, "no dynamic returns");
        let sensor = scene.lidar_pose(2).unwrap();
        for (p, &is_dyn) in sweep.cloud.points.iter().zip(&sweep.dynamic) {
            let world = sensor.transform_point(p);
            let origin = *sensor.translation();
            let dir = (world - origin).normalize();
            let hit = scene.intersect(2, &origin, &dir).unwrap();
            assert_eq!(hit.dynamic_index.is_some(), is_dyn);
        }
    }

    #[test]
    fn lidar_splat_matches_oracle_depth_on_plane() {
        // fronto-parallel plane: depth is constant per surface, so pixel
        // rounding cannot shift it and conventions must agree exactly
        let scene = single_plane_scene(32, 24);
        let sweep = simulate_lidar(&scene, 0, &scene.lidar_spec).unwrap();
        let cam = scene.camera_pose(0, 0).unwrap();
        let depth = splat_to_depth(&sweep.cloud, &scene.cameras[0].intrinsics, &cam);
        let view = render_oracle(&scene, 0, 0).unwrap();
        let mut touched = 0;
        for y in 0..24 {
            for x in 0..32 {
                if let Some(d) = depth.get(x, y) {
                    assert_abs_diff_eq!(d, view.depth.get(x, y).unwrap(), epsilon = 1e-6);
                    touched += 1;
                }
            }
        }
        assert!(touched > 20);
    }

    #[test]
    fn corrupt_depth_identity_when_disabled() {
        let scene = single_plane_scene(24, 18);
        let view = render_oracle(&scene, 0, 0).unwrap();
        let rng = CounterRng::new(5, 0);
        let out = corrupt_depth(&view.depth, 0.0, 0.0, 2.0, &rng);
        assert_eq!(out.depth, view.depth);
        assert!(out.outliers.pixels().all(|(_, _, o)| !o));
    }

    #[test]
    fn corrupt_depth_outlier_count_in_bounds() {
        let scene = single_plane_scene(64, 48);
        let view = render_oracle(&scene, 0, 0).unwrap();
        let rng = CounterRng::new(11, 0);
        let out = corrupt_depth(&view.depth, 0.0, 0.2, 2.0, &rng);
        let n = view.depth.valid_count() as f64;
        let hits = out.outliers.pixels().filter(|&(_, _, o)| o).count() as f64;
        let sigma = (n * 0.2 * 0.8).sqrt();
        assert!((hits - 0.2 * n).abs() < 3.0 * sigma);
        for (x, y, is_outlier) in out.outliers.pixels() {
            if is_outlier {
                assert_abs_diff_eq!(out.depth.get(x, y).unwrap(), 20.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn corrupt_depth_noise_statistics() {
        let scene = single_plane_scene(64, 48);
        let view = render_oracle(&scene, 0, 0).unwrap();
        let rng = CounterRng::new(13, 0);
        let out = corrupt_depth(&view.depth, 0.01, 0.0, 1.0, &rng);
        let mut sq = 0.0;
        let mut n = 0.0;
        for y in 0..48 {
            for x in 0..64 {
                let d = out.depth.get(x, y).unwrap() - view.depth.get(x, y).unwrap();
                sq += d * d;
                n += 1.0;
            }
        }
        let std = (sq / n).sqrt();
        assert!((std - 0.01).abs() < 0.001, "std {std}");
    }

    #[test]
    fn generators_are_deterministic() {
        let scene = street_toy(32, 24, 5, 7);
        let a = render_oracle(&scene, 3, 1).unwrap();
        let b = render_oracle(&scene, 3, 1).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        let s1 = simulate_lidar(&scene, 3, &scene.lidar_spec).unwrap();
        let s2 = simulate_lidar(&scene, 3, &scene.lidar_spec).unwrap();
        assert_eq!(s1.cloud.points, s2.cloud.points);
    }

    #[test]
    fn street_toy_validates() {
        street_toy(48, 36, 5, 1).validate().unwrap();
    }
}
