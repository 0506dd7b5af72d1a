//! LiDAR sweep fusion: accumulate neighbour sweeps, splat them into sparse
//! depth maps, reject points whose implied motion disagrees with optical
//! flow, and densify what survives with a color-guided interpolator.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{compose, pose_inverse, project, reproject, Intrinsics, PixelSample, Pose};
use crate::raster::{Grid, Image, Mask};

/// Guard for the relative-discrepancy denominator at stationary pixels.
pub const FLOW_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("depth map has no valid pixel to densify from")]
    EmptyInput,
    #[error("maps have mismatched dimensions")]
    DimensionMismatch,
}

/// Points expressed in the coordinates of `frame`; world position of point
/// `p` is `frame * p`.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub frame: Pose,
}

impl PointCloud {
    pub fn world(points: Vec<Vector3<f64>>) -> Self {
        Self {
            points,
            frame: Pose::identity(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-pixel metric depth with validity mask. Valid pixels hold positive,
/// finite meters; consumers must ignore everything else.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    values: Grid<f64>,
    valid: Mask,
}

impl DepthMap {
    pub fn new(values: Grid<f64>, valid: Mask) -> Self {
        assert!(values.same_shape(&valid));
        Self { values, valid }
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            values: Grid::filled(width, height, 0.0),
            valid: Mask::filled(width, height, false),
        }
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        self.valid.get(x, y).then(|| self.values.get(x, y))
    }

    pub fn set(&mut self, x: usize, y: usize, depth: f64) {
        debug_assert!(depth > 0.0 && depth.is_finite());
        self.values.set(x, y, depth);
        self.valid.set(x, y, true);
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        self.valid.set(x, y, false);
    }

    pub fn values(&self) -> &Grid<f64> {
        &self.values
    }

    pub fn valid(&self) -> &Mask {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.data().iter().filter(|&&v| v).count()
    }
}

/// Pixel displacements from a source view to a target view.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub du: Grid<f64>,
    pub dv: Grid<f64>,
    pub valid: Mask,
}

impl FlowField {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            du: Grid::filled(width, height, 0.0),
            dv: Grid::filled(width, height, 0.0),
            valid: Mask::filled(width, height, false),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Option<(f64, f64)> {
        self.valid
            .get(x, y)
            .then(|| (self.du.get(x, y), self.dv.get(x, y)))
    }

    pub fn set(&mut self, x: usize, y: usize, du: f64, dv: f64) {
        self.du.set(x, y, du);
        self.dv.set(x, y, dv);
        self.valid.set(x, y, true);
    }
}

/// Transform every sweep into the target frame and concatenate.
pub fn accumulate_lidar(sweeps: &[PointCloud], target: &Pose) -> PointCloud {
    let total: usize = sweeps.iter().map(|c| c.len()).sum();
    let mut points = Vec::with_capacity(total);
    let target_inv = pose_inverse(target);
    for cloud in sweeps {
        let to_target = compose(&target_inv, &cloud.frame);
        points.extend(cloud.points.iter().map(|p| to_target.transform_point(p)));
    }
    PointCloud {
        points,
        frame: *target,
    }
}

fn round_pixel(u: f64, v: f64, intr: &Intrinsics) -> Option<(usize, usize)> {
    let x = u.round();
    let y = v.round();
    if x < 0.0 || y < 0.0 || x >= intr.width as f64 || y >= intr.height as f64 {
        return None;
    }
    Some((x as usize, y as usize))
}

/// Z-buffer splat keeping, per pixel, the index of the nearest point.
/// Deterministic: ties keep the earliest point.
pub fn splat_indexed(
    cloud: &PointCloud,
    intr: &Intrinsics,
    cam: &Pose,
) -> (DepthMap, Grid<Option<usize>>) {
    let mut depth = DepthMap::invalid(intr.width, intr.height);
    let mut index = Grid::filled(intr.width, intr.height, None);
    for (i, p) in cloud.points.iter().enumerate() {
        let world = cloud.frame.transform_point(p);
        let Ok(proj) = project(&world, intr, cam) else {
            continue;
        };
        let Some((x, y)) = round_pixel(proj.pixel.u, proj.pixel.v, intr) else {
            continue;
        };
        match depth.get(x, y) {
            Some(existing) if existing <= proj.pixel.d => {}
            _ => {
                depth.set(x, y, proj.pixel.d);
                index.set(x, y, Some(i));
            }
        }
    }
    (depth, index)
}

/// Project every point into the view; collisions keep the minimum depth.
pub fn splat_to_depth(cloud: &PointCloud, intr: &Intrinsics, cam: &Pose) -> DepthMap {
    splat_indexed(cloud, intr, cam).0
}

/// Flow implied by the (assumed static) cloud between two views: the pixel
/// where the nearest point lands in the source view carries the displacement
/// to its target-view projection. Points that fail to project into the
/// target leave their source pixel invalid.
pub fn lidar_flow(
    cloud: &PointCloud,
    cam_s: &Pose,
    cam_t: &Pose,
    intr: &Intrinsics,
) -> FlowField {
    let (depth, index) = splat_indexed(cloud, intr, cam_s);
    let mut flow = FlowField::invalid(intr.width, intr.height);
    for (x, y, idx) in index.pixels() {
        let Some(i) = idx else { continue };
        let _ = depth; // winners already filtered by the z-buffer
        let world = cloud.frame.transform_point(&cloud.points[i]);
        let Ok(src) = project(&world, intr, cam_s) else {
            continue;
        };
        if let Ok(tgt) = project(&world, intr, cam_t) {
            if tgt.in_frame {
                flow.set(x, y, tgt.pixel.u - src.pixel.u, tgt.pixel.v - src.pixel.v);
            }
        }
    }
    flow
}

/// Drop sparse-depth pixels whose LiDAR flow disagrees with optical flow by
/// more than `threshold`, relative to the optical-flow magnitude (guarded by
/// [`FLOW_EPS`]). Pixels missing either flow are left untouched; the
/// operation only ever invalidates.
pub fn remove_flow_outliers(
    sparse: &DepthMap,
    lflow: &FlowField,
    oflow: &FlowField,
    threshold: f64,
) -> DepthMap {
    assert!(threshold > 0.0 && threshold <= 1.0);
    let mut out = sparse.clone();
    for y in 0..sparse.height() {
        for x in 0..sparse.width() {
            if sparse.get(x, y).is_none() {
                continue;
            }
            let (Some((lu, lv)), Some((ou, ov))) = (lflow.get(x, y), oflow.get(x, y)) else {
                continue;
            };
            let diff = ((lu - ou).powi(2) + (lv - ov).powi(2)).sqrt();
            let denom = (ou * ou + ov * ov).sqrt().max(FLOW_EPS);
            if diff / denom > threshold {
                out.invalidate(x, y);
            }
        }
    }
    out
}

/// Settings of the color-guided inverse-distance densifier.
#[derive(Debug, Clone, Copy)]
pub struct DensifyParams {
    /// Number of nearest seeds blended per pixel.
    pub k: usize,
    /// Color-affinity bandwidth in [0,1] RGB units.
    pub sigma_c: f64,
}

impl Default for DensifyParams {
    fn default() -> Self {
        Self { k: 16, sigma_c: 0.1 }
    }
}

struct Seed {
    x: f64,
    y: f64,
    depth: f64,
    color: [f64; 3],
}

/// Fill every pixel from the k nearest valid seeds, weighted by inverse
/// distance and color affinity `exp(-|dI|/sigma_c)`. Valid input pixels are
/// passed through untouched, so the result interpolates the input and stays
/// inside the seed depth range.
pub fn densify_depth(
    sparse: &DepthMap,
    image: &Image,
    params: &DensifyParams,
) -> Result<DepthMap, FusionError> {
    if !sparse.values().same_shape(image) {
        return Err(FusionError::DimensionMismatch);
    }
    let width = sparse.width();
    let height = sparse.height();
    let mut seeds = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if let Some(d) = sparse.get(x, y) {
                seeds.push(Seed {
                    x: x as f64,
                    y: y as f64,
                    depth: d,
                    color: image.get(x, y),
                });
            }
        }
    }
    if seeds.is_empty() {
        return Err(FusionError::EmptyInput);
    }

    // coarse occupancy grid for ring-limited nearest-seed search
    let cell = ((width * height) as f64 / seeds.len() as f64)
        .sqrt()
        .ceil()
        .clamp(2.0, 32.0) as usize;
    let gw = width.div_ceil(cell);
    let gh = height.div_ceil(cell);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); gw * gh];
    for (i, s) in seeds.iter().enumerate() {
        buckets[(s.y as usize / cell) * gw + (s.x as usize / cell)].push(i);
    }

    let mut out = sparse.clone();
    let mut candidates: Vec<(f64, usize)> = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if sparse.get(x, y).is_some() {
                continue;
            }
            candidates.clear();
            let cgx = (x / cell) as isize;
            let cgy = (y / cell) as isize;
            let max_ring = gw.max(gh) as isize;
            let mut settled_at = None;
            for ring in 0..=max_ring {
                if let Some(at) = settled_at {
                    // one extra ring so nothing closer hides in a corner cell
                    if ring > at {
                        break;
                    }
                }
                for gy in (cgy - ring).max(0)..=(cgy + ring).min(gh as isize - 1) {
                    for gx in (cgx - ring).max(0)..=(cgx + ring).min(gw as isize - 1) {
                        let on_ring = (gy - cgy).abs() == ring || (gx - cgx).abs() == ring;
                        if !on_ring {
                            continue;
                        }
                        for &i in &buckets[gy as usize * gw + gx as usize] {
                            let s = &seeds[i];
                            let d2 = (s.x - x as f64).powi(2) + (s.y - y as f64).powi(2);
                            candidates.push((d2, i));
                        }
                    }
                }
                if settled_at.is_none() && candidates.len() >= params.k {
                    settled_at = Some(ring + 1);
                }
            }
            candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let take = candidates.len().min(params.k.max(1));
            let px_color = image.get(x, y);
            let mut num = 0.0;
            let mut den = 0.0;
            for &(d2, i) in &candidates[..take] {
                let s = &seeds[i];
                let dc = ((px_color[0] - s.color[0]).powi(2)
                    + (px_color[1] - s.color[1]).powi(2)
                    + (px_color[2] - s.color[2]).powi(2))
                .sqrt();
                let w = (-dc / params.sigma_c).exp() / d2.sqrt();
                num += w * s.depth;
                den += w;
            }
            out.set(x, y, num / den);
        }
    }
    Ok(out)
}

/// Reproject a source-view depth pixel into the target view.
pub fn reproject_depth_pixel(
    x: usize,
    y: usize,
    depth: f64,
    cam_s: &Pose,
    cam_t: &Pose,
    intr: &Intrinsics,
) -> Option<crate::geometry::Projection> {
    let px = PixelSample {
        u: x as f64,
        v: y as f64,
        d: depth,
    };
    reproject(&px, cam_s, cam_t, intr).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(1.0..20.0),
                )
            })
            .collect()
    }

    #[test]
    fn accumulate_identity_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let points = random_cloud(&mut rng, 50);
        let cloud = PointCloud {
            points: points.clone(),
            frame: Pose::identity(),
        };
        let acc = accumulate_lidar(std::slice::from_ref(&cloud), &Pose::identity());
        assert_eq!(acc.len(), 50);
        for (a, b) in acc.points.iter().zip(points.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn accumulate_offset_frame_shifts_points() {
        let points = vec![Vector3::new(0.0, 0.0, 5.0)];
        let cloud = PointCloud {
            points,
            frame: Pose::identity(),
        };
        let target = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let acc = accumulate_lidar(&[cloud.clone(), cloud], &target);
        assert_eq!(acc.len(), 2);
        for p in &acc.points {
            assert!((p - Vector3::new(-1.0, 0.0, 5.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn accumulate_empty_list() {
        let acc = accumulate_lidar(&[], &Pose::identity());
        assert!(acc.is_empty());
    }

    #[test]
    fn accumulate_is_frame_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let sweeps: Vec<PointCloud> = (0..3)
            .map(|i| PointCloud {
                points: random_cloud(&mut rng, 20),
                frame: Pose::from_axis_angle(
                    Vector3::new(0.1, 0.9, 0.2),
                    0.3 * i as f64,
                    Vector3::new(i as f64, 0.0, 0.0),
                ),
            })
            .collect();
        let a = Pose::from_axis_angle(Vector3::z(), 0.7, Vector3::new(0.0, 2.0, 0.0));
        let b = Pose::from_axis_angle(Vector3::x(), -0.4, Vector3::new(1.0, 0.0, 3.0));
        let in_a = accumulate_lidar(&sweeps, &a);
        let in_b = accumulate_lidar(&sweeps, &b);
        let a_to_b = compose(&pose_inverse(&b), &a);
        for (pa, pb) in in_a.points.iter().zip(in_b.points.iter()) {
            assert!((a_to_b.transform_point(pa) - pb).norm() < 1e-9);
        }
    }

    #[test]
    fn splat_single_point_on_axis() {
        let cloud = PointCloud::world(vec![Vector3::new(0.0, 0.0, 5.0)]);
        let depth = splat_to_depth(&cloud, &intr(), &Pose::identity());
        assert_eq!(depth.valid_count(), 1);
        assert_abs_diff_eq!(depth.get(50, 50).unwrap(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn splat_zbuffer_keeps_nearest() {
        let cloud = PointCloud::world(vec![
            Vector3::new(0.0, 0.0, 9.0),
            Vector3::new(0.0, 0.0, 4.0),
        ]);
        let depth = splat_to_depth(&cloud, &intr(), &Pose::identity());
        assert_abs_diff_eq!(depth.get(50, 50).unwrap(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn splat_ignores_points_behind_camera() {
        let cloud = PointCloud::world(vec![Vector3::new(0.0, 0.0, -2.0)]);
        let depth = splat_to_depth(&cloud, &intr(), &Pose::identity());
        assert_eq!(depth.valid_count(), 0);
    }

    #[test]
    fn splat_more_points_never_raise_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let base = random_cloud(&mut rng, 300);
        let extra = random_cloud(&mut rng, 300);
        let d1 = splat_to_depth(&PointCloud::world(base.clone()), &intr(), &Pose::identity());
        let mut all = base;
        all.extend(extra);
        let d2 = splat_to_depth(&PointCloud::world(all), &intr(), &Pose::identity());
        for y in 0..d1.height() {
            for x in 0..d1.width() {
                if let Some(v1) = d1.get(x, y) {
                    let v2 = d2.get(x, y).expect("pixel lost coverage");
                    assert!(v2 <= v1 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn lidar_flow_zero_for_same_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let cloud = PointCloud::world(random_cloud(&mut rng, 100));
        let cam = Pose::identity();
        let flow = lidar_flow(&cloud, &cam, &cam, &intr());
        let mut touched = 0;
        for (_, _, ok) in flow.valid.pixels() {
            if ok {
                touched += 1;
            }
        }
        assert!(touched > 0);
        for y in 0..flow.du.height() {
            for x in 0..flow.du.width() {
                if let Some((du, dv)) = flow.get(x, y) {
                    assert!(du.abs() < 1e-12 && dv.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn lidar_flow_stereo_baseline() {
        let d = 5.0;
        let t = 0.4;
        let cloud = PointCloud::world(vec![Vector3::new(0.0, 0.0, d)]);
        let cam_s = Pose::identity();
        let cam_t = Pose::from_translation(Vector3::new(t, 0.0, 0.0));
        let flow = lidar_flow(&cloud, &cam_s, &cam_t, &intr());
        let (du, dv) = flow.get(50, 50).unwrap();
        assert_abs_diff_eq!(du, -intr().fx * t / d, epsilon = 1e-9);
        assert_abs_diff_eq!(dv, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn lidar_flow_marks_frustum_leavers_invalid() {
        let cloud = PointCloud::world(vec![Vector3::new(0.0, 0.0, 1.0)]);
        let cam_s = Pose::identity();
        // big sideways jump pushes the projection far out of frame
        let cam_t = Pose::from_translation(Vector3::new(5.0, 0.0, 0.0));
        let flow = lidar_flow(&cloud, &cam_s, &cam_t, &intr());
        assert!(flow.get(50, 50).is_none());
    }

    fn uniform_flow(width: usize, height: usize, du: f64, dv: f64) -> FlowField {
        let mut f = FlowField::invalid(width, height);
        for y in 0..height {
            for x in 0..width {
                f.set(x, y, du, dv);
            }
        }
        f
    }

    #[test]
    fn outlier_removal_keeps_agreement() {
        let mut sparse = DepthMap::invalid(8, 8);
        sparse.set(3, 3, 5.0);
        sparse.set(5, 2, 7.0);
        let lf = uniform_flow(8, 8, 2.0, -1.0);
        let of = uniform_flow(8, 8, 2.0, -1.0);
        let out = remove_flow_outliers(&sparse, &lf, &of, 0.2);
        assert_eq!(out.valid_count(), 2);
    }

    #[test]
    fn outlier_removal_drops_half_discrepancy() {
        let mut sparse = DepthMap::invalid(4, 4);
        sparse.set(1, 1, 5.0);
        let lf = uniform_flow(4, 4, 3.0, 0.0);
        let of = uniform_flow(4, 4, 2.0, 0.0); // 50% relative error
        let out = remove_flow_outliers(&sparse, &lf, &of, 0.2);
        assert_eq!(out.valid_count(), 0);
    }

    #[test]
    fn outlier_removal_keeps_exact_threshold() {
        let mut sparse = DepthMap::invalid(4, 4);
        sparse.set(1, 1, 5.0);
        let lf = uniform_flow(4, 4, 1.2, 0.0);
        let of = uniform_flow(4, 4, 1.0, 0.0); // exactly 20%
        let out = remove_flow_outliers(&sparse, &lf, &of, 0.2);
        assert_eq!(out.valid_count(), 1, "strict inequality keeps the boundary");
    }

    #[test]
    fn outlier_removal_idempotent_and_shrinking() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let mut sparse = DepthMap::invalid(16, 16);
        let mut lf = FlowField::invalid(16, 16);
        let mut of = FlowField::invalid(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                if rng.random_range(0.0..1.0) < 0.6 {
                    sparse.set(x, y, rng.random_range(1.0..10.0));
                    lf.set(x, y, rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                    of.set(x, y, rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                }
            }
        }
        let once = remove_flow_outliers(&sparse, &lf, &of, 0.2);
        let twice = remove_flow_outliers(&once, &lf, &of, 0.2);
        assert_eq!(once, twice);
        for y in 0..16 {
            for x in 0..16 {
                if once.get(x, y).is_some() {
                    assert!(sparse.get(x, y).is_some(), "resurrected pixel");
                }
            }
        }
    }

    #[test]
    fn densify_dense_input_unchanged() {
        let img = Image::filled(6, 6, [0.5; 3]);
        let mut sparse = DepthMap::invalid(6, 6);
        for y in 0..6 {
            for x in 0..6 {
                sparse.set(x, y, 2.0 + (x + y) as f64);
            }
        }
        let out = densify_depth(&sparse, &img, &DensifyParams::default()).unwrap();
        assert_eq!(out, sparse);
    }

    #[test]
    fn densify_single_seed_floods() {
        let img = Image::filled(9, 7, [0.5; 3]);
        let mut sparse = DepthMap::invalid(9, 7);
        sparse.set(4, 3, 5.0);
        let out = densify_depth(&sparse, &img, &DensifyParams::default()).unwrap();
        for y in 0..7 {
            for x in 0..9 {
                assert_abs_diff_eq!(out.get(x, y).unwrap(), 5.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn densify_rejects_empty() {
        let img = Image::filled(4, 4, [0.5; 3]);
        let sparse = DepthMap::invalid(4, 4);
        assert_eq!(
            densify_depth(&sparse, &img, &DensifyParams::default()).unwrap_err(),
            FusionError::EmptyInput
        );
    }

    #[test]
    fn densify_interpolates_within_seed_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let img = Image::from_fn(24, 18, |x, y| {
            [
                0.5 + 0.3 * ((x as f64) * 0.3).sin(),
                0.5,
                0.5 + 0.2 * ((y as f64) * 0.4).cos(),
            ]
        });
        let mut sparse = DepthMap::invalid(24, 18);
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for _ in 0..40 {
            let x = rng.random_range(0..24);
            let y = rng.random_range(0..18);
            let d = rng.random_range(2.0..12.0);
            sparse.set(x, y, d);
        }
        for y in 0..18 {
            for x in 0..24 {
                if let Some(d) = sparse.get(x, y) {
                    lo = lo.min(d);
                    hi = hi.max(d);
                }
            }
        }
        let out = densify_depth(&sparse, &img, &DensifyParams::default()).unwrap();
        for y in 0..18 {
            for x in 0..24 {
                let d = out.get(x, y).unwrap();
                assert!(d >= lo - 1e-12 && d <= hi + 1e-12);
                if let Some(orig) = sparse.get(x, y) {
                    assert_eq!(d, orig);
                }
            }
        }
    }

    #[test]
    fn densify_recovers_smooth_plane() {
        // analytic tilted plane sampled at ~1% of pixels
        let width = 64;
        let height = 48;
        let plane = |x: usize, y: usize| 8.0 + 0.02 * x as f64 + 0.03 * y as f64;
        let img = Image::from_fn(width, height, |x, y| {
            let t = 0.5 + 0.25 * ((x as f64 * 0.2).sin() * (y as f64 * 0.15).cos());
            [t, t, t]
        });
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let mut sparse = DepthMap::invalid(width, height);
        for y in 0..height {
            for x in 0..width {
                if rng.random_range(0.0..1.0) < 0.01 {
                    sparse.set(x, y, plane(x, y));
                }
            }
        }
        assert!(sparse.valid_count() > 10);
        let out = densify_depth(&sparse, &img, &DensifyParams::default()).unwrap();
        let mut mae = 0.0;
        for y in 0..height {
            for x in 0..width {
                mae += (out.get(x, y).unwrap() - plane(x, y)).abs();
            }
        }
        mae /= (width * height) as f64;
        // regression bound measured against the analytic plane
        assert!(mae < 0.25, "densifier MAE {mae}");
    }
}
