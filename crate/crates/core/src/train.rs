//! Training: the photometric / confidence-weighted depth / edge-aware
//! smoothness objective, an Adam optimizer over field parameters,
//! confidence logits and per-view pose offsets, and evaluation metrics.
//!
//! Gradient accumulation is a deterministic ordered reduction over fixed
//! ray chunks, so loss traces are bit-identical for a given seed regardless
//! of thread count.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::confidence::ConfidenceWeights;
use crate::depthfusion::DepthMap;
use crate::field::{FieldConfig, RadianceField};
use crate::geometry::{
    apply_offset, rotate_vec_backward, Intrinsics, Pose, PoseOffset,
};
use crate::parameterization::{
    depth_cosine, generate_ray, sample_log_jittered, sample_log_spaced, sample_uniform,
    ContractionConfig, SpaceMapping,
};
use crate::raster::{Grid, Image, Mask};
use crate::render::{ray_backward, ray_forward, RayGrad, RayWorkspace};
use crate::rng::CounterRng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {term} loss at iteration {iter}")]
    NonFiniteLoss { term: &'static str, iter: usize },
    #[error("training set has no samplable pixels")]
    EmptySampleSet,
}

/// Background scenes contract space and supervise disparity; foreground
/// objects stay bounded and supervise raw depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneMode {
    Background,
    Foreground,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: SceneMode,
    pub lambda_depth: f64,
    pub lambda_smooth: f64,
    pub tau: f64,
    pub radius: f64,
    pub n_samples: usize,
    pub batch_rays: usize,
    pub iterations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub warmup_iters: usize,
    pub seed: u64,
    pub field: FieldConfig,
    /// Side length of the smoothness patches.
    pub smooth_patch: usize,
    pub patches_per_step: usize,
    pub pose_refine: bool,
}

impl TrainConfig {
    /// Paper-scale defaults for the given mode; desk-scale iteration and
    /// batch counts.
    pub fn for_mode(mode: SceneMode) -> Self {
        let (lambda_depth, lambda_smooth, n_samples) = match mode {
            SceneMode::Background => (0.2, 0.01, 128),
            SceneMode::Foreground => (1.0, 0.15, 64),
        };
        Self {
            mode,
            lambda_depth,
            lambda_smooth,
            tau: 0.2,
            radius: 3.0,
            n_samples,
            batch_rays: 512,
            iterations: 1000,
            lr_start: 5e-4,
            lr_end: 5e-6,
            warmup_iters: 50,
            seed: 0,
            field: FieldConfig::default(),
            smooth_patch: 8,
            patches_per_step: 1,
            pose_refine: true,
        }
    }

    pub fn space(&self) -> SpaceMapping {
        match self.mode {
            SceneMode::Background => {
                SpaceMapping::Contracted(ContractionConfig::new(self.radius))
            }
            SceneMode::Foreground => SpaceMapping::Identity,
        }
    }
}

/// One training view: image, camera, optional depth supervision with its
/// per-component confidence maps, and the pixels rays may be drawn from.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub image: Image,
    pub intr: Intrinsics,
    pub pose: Pose,
    pub depth: Option<DepthMap>,
    /// One map per enabled confidence component; empty means unit
    /// confidence wherever depth is valid.
    pub components: Vec<crate::confidence::ConfidenceMap>,
    pub sample_mask: Mask,
    pub near: f64,
    pub far: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSet {
    pub views: Vec<TrainView>,
    pub component_names: Vec<String>,
}

impl TrainSet {
    fn samplable(&self) -> Vec<Vec<(u32, u32)>> {
        self.views
            .iter()
            .map(|v| {
                let mut px = Vec::new();
                for y in 0..v.sample_mask.height() {
                    for x in 0..v.sample_mask.width() {
                        if v.sample_mask.get(x, y) {
                            px.push((x as u32, y as u32));
                        }
                    }
                }
                px
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchRay {
    pub view: usize,
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PatchSpec {
    pub view: usize,
    pub x0: usize,
    pub y0: usize,
}

#[derive(Debug, Clone)]
pub struct RayBatch {
    pub rays: Vec<BatchRay>,
    pub patches: Vec<PatchSpec>,
}

/// Draw the ray batch and smoothness patches for one iteration.
pub fn sample_batch(
    set: &TrainSet,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<RayBatch, TrainError> {
    let samplable = set.samplable();
    let nonempty: Vec<usize> = (0..set.views.len())
        .filter(|&i| !samplable[i].is_empty())
        .collect();
    if nonempty.is_empty() {
        return Err(TrainError::EmptySampleSet);
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(CounterRng::new(cfg.seed, 0xba7c).bits(iter as u64));
    let mut rays = Vec::with_capacity(cfg.batch_rays);
    for _ in 0..cfg.batch_rays {
        let view = nonempty[rng.random_range(0..nonempty.len())];
        let (x, y) = samplable[view][rng.random_range(0..samplable[view].len())];
        rays.push(BatchRay {
            view,
            x: x as usize,
            y: y as usize,
        });
    }
    let mut patches = Vec::with_capacity(cfg.patches_per_step);
    if cfg.lambda_smooth > 0.0 && cfg.smooth_patch >= 2 {
        for _ in 0..cfg.patches_per_step {
            let view = nonempty[rng.random_range(0..nonempty.len())];
            let intr = set.views[view].intr;
            if intr.width < cfg.smooth_patch || intr.height < cfg.smooth_patch {
                continue;
            }
            patches.push(PatchSpec {
                view,
                x0: rng.random_range(0..=intr.width - cfg.smooth_patch),
                y0: rng.random_range(0..=intr.height - cfg.smooth_patch),
            });
        }
    }
    Ok(RayBatch { rays, patches })
}

/// Mean squared error over the ray batch, all channels pooled.
pub fn loss_color(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> f64 {
    assert_eq!(rendered.len(), target.len());
    if rendered.is_empty() {
        return 0.0;
    }
    let mut sse = 0.0;
    for (r, t) in rendered.iter().zip(target.iter()) {
        for c in 0..3 {
            sse += (r[c] - t[c]) * (r[c] - t[c]);
        }
    }
    sse / (3.0 * rendered.len() as f64)
}

/// Confidence-weighted mean absolute depth error; background mode compares
/// disparities, foreground mode raw depth.
pub fn loss_depth(rendered: &[f64], supervised: &[f64], conf: &[f64], mode: SceneMode) -> f64 {
    assert_eq!(rendered.len(), supervised.len());
    assert_eq!(rendered.len(), conf.len());
    if rendered.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..rendered.len() {
        let (d, d_hat) = match mode {
            SceneMode::Background => (1.0 / supervised[i], 1.0 / rendered[i]),
            SceneMode::Foreground => (supervised[i], rendered[i]),
        };
        sum += conf[i] * (d - d_hat).abs();
    }
    sum / rendered.len() as f64
}

/// Edge-aware smoothness over one patch: forward-difference depth grads
/// damped by image gradients, averaged over all difference pairs.
pub fn loss_smooth(depth_patch: &Grid<f64>, image_patch: &Image) -> f64 {
    assert!(depth_patch.same_shape(image_patch));
    let w = depth_patch.width();
    let h = depth_patch.height();
    assert!(w >= 2 || h >= 2, "patch must be at least 2 pixels on a side");
    let img_grad = |a: [f64; 3], b: [f64; 3]| {
        ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0
    };
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            let dd = (depth_patch.get(x + 1, y) - depth_patch.get(x, y)).abs();
            let gi = img_grad(image_patch.get(x + 1, y), image_patch.get(x, y));
            sum += dd * (-gi).exp();
            pairs += 1;
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            let dd = (depth_patch.get(x, y + 1) - depth_patch.get(x, y)).abs();
            let gi = img_grad(image_patch.get(x, y + 1), image_patch.get(x, y));
            sum += dd * (-gi).exp();
            pairs += 1;
        }
    }
    sum / pairs as f64
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub color: f64,
    pub depth: f64,
    pub smooth: f64,
}

pub fn total_loss(parts: &LossParts, cfg: &TrainConfig) -> f64 {
    parts.color + cfg.lambda_depth * parts.depth + cfg.lambda_smooth * parts.smooth
}

/// Linear warm-up to `lr_start`, then log-linear decay to `lr_end`.
pub fn lr_schedule(iter: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_iters > 0 && iter < cfg.warmup_iters {
        return cfg.lr_start * iter as f64 / cfg.warmup_iters as f64;
    }
    let total = cfg.iterations.max(cfg.warmup_iters + 1);
    let s = (iter - cfg.warmup_iters) as f64 / (total - cfg.warmup_iters) as f64;
    cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(s.clamp(0.0, 1.0))
}

/// Peak signal-to-noise ratio in dB, capped at 100 for MSE below 1e-10.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        100.0
    } else {
        -10.0 * mse.log10()
    }
}

/// PSNR between two [0,1] images, optionally restricted to a mask.
pub fn psnr(a: &Image, b: &Image, mask: Option<&Mask>) -> f64 {
    assert!(a.same_shape(b));
    let mut sse = 0.0;
    let mut n = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if let Some(m) = mask {
                if !m.get(x, y) {
                    continue;
                }
            }
            let pa = a.get(x, y);
            let pb = b.get(x, y);
            for c in 0..3 {
                sse += (pa[c] - pb[c]) * (pa[c] - pb[c]);
            }
            n += 3.0;
        }
    }
    if n == 0.0 {
        return 100.0;
    }
    psnr_from_mse(sse / n)
}

pub use crate::confidence::ssim_metric;

/// First-order adaptive-moment optimizer state over one flat buffer.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

/// Everything the optimizer touches.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub field: RadianceField,
    pub conf_weights: ConfidenceWeights,
    pub offsets: Vec<PoseOffset>,
    pub adam: AdamState,
    pub iter: usize,
}

impl TrainState {
    pub fn new(set: &TrainSet, cfg: &TrainConfig) -> Self {
        let field = RadianceField::new(cfg.field);
        let n_components = set.component_names.len().max(1);
        let total = field.param_count() + n_components + 6 * set.views.len();
        Self {
            field,
            conf_weights: ConfidenceWeights::uniform(n_components),
            offsets: vec![PoseOffset::zero(); set.views.len()],
            adam: AdamState::new(total),
            iter: 0,
        }
    }

    fn flatten_grads(
        &self,
        field_grads: &[f64],
        logit_grads: &[f64],
        offset_grads: &[[f64; 6]],
    ) -> Vec<f64> {
        let mut flat =
            Vec::with_capacity(field_grads.len() + logit_grads.len() + 6 * offset_grads.len());
        flat.extend_from_slice(field_grads);
        flat.extend_from_slice(logit_grads);
        for g in offset_grads {
            flat.extend_from_slice(g);
        }
        flat
    }

    fn apply_update(&mut self, grads: &[f64], lr: f64) {
        let nf = self.field.param_count();
        let nl = self.conf_weights.len();
        let mut params = Vec::with_capacity(grads.len());
        params.extend_from_slice(self.field.params());
        params.extend_from_slice(self.conf_weights.logits());
        for o in &self.offsets {
            params.extend_from_slice(o.delta_rotation.as_slice());
            params.extend_from_slice(o.delta_translation.as_slice());
        }
        self.adam.step(&mut params, grads, lr);
        self.field.set_params(&params[..nf]);
        self.conf_weights
            .logits_mut()
            .copy_from_slice(&params[nf..nf + nl]);
        for (i, o) in self.offsets.iter_mut().enumerate() {
            let base = nf + nl + 6 * i;
            o.delta_rotation =
                Vector3::new(params[base], params[base + 1], params[base + 2]);
            o.delta_translation =
                Vector3::new(params[base + 3], params[base + 4], params[base + 5]);
        }
    }

    /// Camera pose of a view with its current refinement offset applied.
    pub fn effective_pose(&self, set: &TrainSet, view: usize, cfg: &TrainConfig) -> Pose {
        if cfg.pose_refine {
            apply_offset(&set.views[view].pose, &self.offsets[view])
                .expect("offset within bounds")
        } else {
            set.views[view].pose
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub iter: usize,
    pub lr: f64,
    pub parts: LossParts,
    pub total: f64,
    /// PSNR implied by the batch color MSE.
    pub batch_psnr: f64,
}

struct ChunkResult {
    field_grads: Vec<f64>,
    logit_grads: Vec<f64>,
    offset_grads: Vec<[f64; 6]>,
    color_sse: f64,
    depth_sum: f64,
    depth_count: usize,
}

/// Per-ray supervision fetched once up front.
struct RaySupervision {
    target: [f64; 3],
    depth: Option<(f64, Vec<f64>)>,
}

fn gather_supervision(set: &TrainSet, ray: &BatchRay) -> RaySupervision {
    let view = &set.views[ray.view];
    let target = view.image.get(ray.x, ray.y);
    let depth = view.depth.as_ref().and_then(|d| {
        let z = d.get(ray.x, ray.y)?;
        if view.components.is_empty() {
            return Some((z, Vec::new()));
        }
        let comps: Option<Vec<f64>> = view
            .components
            .iter()
            .map(|c| c.get(ray.x, ray.y))
            .collect();
        comps.map(|c| (z, c))
    });
    RaySupervision { target, depth }
}

/// Sampling stream for one ray of one iteration.
fn ray_stream(cfg: &TrainConfig, iter: usize, ordinal: u64) -> CounterRng {
    CounterRng::new(cfg.seed, 0x5eed)
        .substream(iter as u64)
        .substream(ordinal)
}

fn sample_ts(
    cfg: &TrainConfig,
    ray: &crate::parameterization::Ray,
    rng: Option<&CounterRng>,
    ws: &mut RayWorkspace,
) {
    let ts = match (cfg.mode, rng) {
        (SceneMode::Background, Some(r)) => sample_log_jittered(ray, cfg.n_samples, r),
        (SceneMode::Background, None) => sample_log_spaced(ray, cfg.n_samples),
        (SceneMode::Foreground, _) => sample_uniform(ray, cfg.n_samples, rng),
    }
    .expect("valid ray bounds");
    ws.ts.clear();
    ws.ts.extend_from_slice(&ts);
}

/// Backpropagate a ray's input gradient onto its view's pose offset.
fn chain_to_offset(
    offset: &PoseOffset,
    base_pose: &Pose,
    intr: &Intrinsics,
    x: usize,
    y: usize,
    input: &crate::render::RayInputGrad,
    out: &mut [f64; 6],
) {
    let v_cam = Vector3::new(
        (x as f64 - intr.cx) / intr.fx,
        (y as f64 - intr.cy) / intr.fy,
        1.0,
    );
    let w = base_pose.rotation() * v_cam;
    let rotated = crate::geometry::rotate_vec(&offset.delta_rotation, &w);
    let n = rotated.norm();
    let dir = rotated / n;
    // gradient through normalization
    let d_v_world = (input.d_direction - dir * dir.dot(&input.d_direction)) / n;
    let (d_rot, _) = rotate_vec_backward(&offset.delta_rotation, &w, &d_v_world);
    for i in 0..3 {
        out[i] += d_rot[i];
        out[i + 3] += input.d_origin[i];
    }
}

/// Forward and backward over one batch; returns the loss parts and the
/// flat gradient vector (field, logits, offsets).
pub fn compute_grads(
    state: &TrainState,
    set: &TrainSet,
    batch: &RayBatch,
    cfg: &TrainConfig,
) -> Result<(LossParts, Vec<f64>), TrainError> {
    let space = cfg.space();
    let poses: Vec<Pose> = (0..set.views.len())
        .map(|v| state.effective_pose(set, v, cfg))
        .collect();
    let n_rays = batch.rays.len();
    let depth_count_total: usize = batch
        .rays
        .iter()
        .filter(|r| gather_supervision(set, r).depth.is_some())
        .count();

    const CHUNK: usize = 64;
    let chunks: Vec<ChunkResult> = batch
        .rays
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(chunk_idx, rays)| {
            let mut res = ChunkResult {
                field_grads: vec![0.0; state.field.param_count()],
                logit_grads: vec![0.0; state.conf_weights.len()],
                offset_grads: vec![[0.0; 6]; set.views.len()],
                color_sse: 0.0,
                depth_sum: 0.0,
                depth_count: 0,
            };
            let mut ws = RayWorkspace::default();
            for (i, bray) in rays.iter().enumerate() {
                let ordinal = (chunk_idx * CHUNK + i) as u64;
                let view = &set.views[bray.view];
                let pose = &poses[bray.view];
                let ray = generate_ray(
                    bray.x as f64,
                    bray.y as f64,
                    &view.intr,
                    pose,
                    view.near,
                    view.far,
                );
                let rng = ray_stream(cfg, state.iter, ordinal);
                sample_ts(cfg, &ray, Some(&rng), &mut ws);
                let (color, t_dist, _) = ray_forward(&state.field, &ray, &space, &mut ws);

                let sup = gather_supervision(set, bray);
                let mut upstream = RayGrad::default();
                for c in 0..3 {
                    let diff = color[c] - sup.target[c];
                    res.color_sse += diff * diff;
                    upstream.d_color[c] = 2.0 * diff / (3.0 * n_rays as f64);
                }
                if let Some((z_sup, comps)) = &sup.depth {
                    let cosfac = depth_cosine(bray.x as f64, bray.y as f64, &view.intr);
                    let z = t_dist * cosfac;
                    let chat = if comps.is_empty() {
                        1.0
                    } else {
                        state.conf_weights.combine_values(comps)
                    };
                    let (d_sup, d_hat, dd_hat_dz) = match cfg.mode {
                        SceneMode::Background => (1.0 / z_sup, 1.0 / z, -1.0 / (z * z)),
                        SceneMode::Foreground => (*z_sup, z, 1.0),
                    };
                    let err = (d_sup - d_hat).abs();
                    res.depth_sum += chat * err;
                    res.depth_count += 1;
                    let sign = (d_hat - d_sup).signum();
                    let dl_dz =
                        cfg.lambda_depth * chat * sign / depth_count_total as f64 * dd_hat_dz;
                    upstream.d_depth += dl_dz * cosfac;
                    if !comps.is_empty() {
                        state.conf_weights.combine_backward(
                            comps,
                            cfg.lambda_depth * err / depth_count_total as f64,
                            &mut res.logit_grads,
                        );
                    }
                }

                let input =
                    ray_backward(&state.field, &space, &mut ws, &upstream, &mut res.field_grads);
                if cfg.pose_refine {
                    chain_to_offset(
                        &state.offsets[bray.view],
                        &view.pose,
                        &view.intr,
                        bray.x,
                        bray.y,
                        &input,
                        &mut res.offset_grads[bray.view],
                    );
                }
            }
            res
        })
        .collect();

    let mut field_grads = vec![0.0; state.field.param_count()];
    let mut logit_grads = vec![0.0; state.conf_weights.len()];
    let mut offset_grads = vec![[0.0; 6]; set.views.len()];
    let mut color_sse = 0.0;
    let mut depth_sum = 0.0;
    let mut depth_count = 0usize;
    for c in &chunks {
        for (a, b) in field_grads.iter_mut().zip(c.field_grads.iter()) {
            *a += b;
        }
        for (a, b) in logit_grads.iter_mut().zip(c.logit_grads.iter()) {
            *a += b;
        }
        for (a, b) in offset_grads.iter_mut().zip(c.offset_grads.iter()) {
            for i in 0..6 {
                a[i] += b[i];
            }
        }
        color_sse += c.color_sse;
        depth_sum += c.depth_sum;
        depth_count += c.depth_count;
    }
    debug_assert_eq!(depth_count, depth_count_total);

    // smoothness patches: forward once for the depth grid, then a second
    // pass backpropagating each pixel's share of the patch loss
    let mut smooth_sum = 0.0;
    for patch in &batch.patches {
        let view = &set.views[patch.view];
        let pose = &poses[patch.view];
        let p = cfg.smooth_patch;
        let mut disparity = Grid::filled(p, p, 0.0);
        let mut zs = Grid::filled(p, p, 0.0);
        let image_patch =
            Image::from_fn(p, p, |x, y| view.image.get(patch.x0 + x, patch.y0 + y));
        let mut ws = RayWorkspace::default();
        for py in 0..p {
            for px in 0..p {
                let (ix, iy) = (patch.x0 + px, patch.y0 + py);
                let ray =
                    generate_ray(ix as f64, iy as f64, &view.intr, pose, view.near, view.far);
                sample_ts(cfg, &ray, None, &mut ws);
                let (_, t_dist, _) = ray_forward(&state.field, &ray, &space, &mut ws);
                let z = t_dist * depth_cosine(ix as f64, iy as f64, &view.intr);
                zs.set(px, py, z);
                disparity.set(px, py, 1.0 / z);
            }
        }
        smooth_sum += loss_smooth(&disparity, &image_patch);

        // d(loss_smooth)/d(disparity) per pixel
        let pairs = (2 * p * (p - 1)) as f64;
        let mut d_disp = Grid::filled(p, p, 0.0);
        let img_grad = |a: [f64; 3], b: [f64; 3]| {
            ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0
        };
        let mut add_pair = |x0: usize, y0: usize, x1: usize, y1: usize| {
            let dd = disparity.get(x1, y1) - disparity.get(x0, y0);
            let damp = (-img_grad(image_patch.get(x1, y1), image_patch.get(x0, y0))).exp();
            let g = dd.signum() * damp / pairs;
            d_disp.set(x1, y1, d_disp.get(x1, y1) + g);
            d_disp.set(x0, y0, d_disp.get(x0, y0) - g);
        };
        for y in 0..p {
            for x in 0..p - 1 {
                add_pair(x, y, x + 1, y);
            }
        }
        for y in 0..p - 1 {
            for x in 0..p {
                add_pair(x, y, x, y + 1);
            }
        }

        let scale = cfg.lambda_smooth / batch.patches.len().max(1) as f64;
        for py in 0..p {
            for px in 0..p {
                let g = d_disp.get(px, py);
                if g == 0.0 {
                    continue;
                }
                let (ix, iy) = (patch.x0 + px, patch.y0 + py);
                let ray =
                    generate_ray(ix as f64, iy as f64, &view.intr, pose, view.near, view.far);
                sample_ts(cfg, &ray, None, &mut ws);
                ray_forward(&state.field, &ray, &space, &mut ws);
                let z = zs.get(px, py);
                let cosfac = depth_cosine(ix as f64, iy as f64, &view.intr);
                let upstream = RayGrad {
                    d_color: [0.0; 3],
                    // disparity = 1/z, z = t * cos
                    d_depth: scale * g * (-1.0 / (z * z)) * cosfac,
                };
                let input =
                    ray_backward(&state.field, &space, &mut ws, &upstream, &mut field_grads);
                if cfg.pose_refine {
                    chain_to_offset(
                        &state.offsets[patch.view],
                        &view.pose,
                        &view.intr,
                        ix,
                        iy,
                        &input,
                        &mut offset_grads[patch.view],
                    );
                }
            }
        }
    }

    let parts = LossParts {
        color: if n_rays == 0 {
            0.0
        } else {
            color_sse / (3.0 * n_rays as f64)
        },
        depth: if depth_count == 0 {
            0.0
        } else {
            depth_sum / depth_count as f64
        },
        smooth: if batch.patches.is_empty() {
            0.0
        } else {
            smooth_sum / batch.patches.len() as f64
        },
    };
    for (term, value) in [
        ("color", parts.color),
        ("depth", parts.depth),
        ("smooth", parts.smooth),
    ] {
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                term,
                iter: state.iter,
            });
        }
    }
    Ok((
        parts,
        state.flatten_grads(&field_grads, &logit_grads, &offset_grads),
    ))
}

/// Loss of a batch without touching any state; the finite-difference
/// reference path.
pub fn compute_loss(
    state: &TrainState,
    set: &TrainSet,
    batch: &RayBatch,
    cfg: &TrainConfig,
) -> Result<LossParts, TrainError> {
    let space = cfg.space();
    let poses: Vec<Pose> = (0..set.views.len())
        .map(|v| state.effective_pose(set, v, cfg))
        .collect();
    let mut ws = RayWorkspace::default();
    let mut color_sse = 0.0;
    let mut depth_sum = 0.0;
    let mut depth_count = 0usize;
    for (ordinal, bray) in batch.rays.iter().enumerate() {
        let view = &set.views[bray.view];
        let ray = generate_ray(
            bray.x as f64,
            bray.y as f64,
            &view.intr,
            &poses[bray.view],
            view.near,
            view.far,
        );
        let rng = ray_stream(cfg, state.iter, ordinal as u64);
        sample_ts(cfg, &ray, Some(&rng), &mut ws);
        let (color, t_dist, _) = ray_forward(&state.field, &ray, &space, &mut ws);
        let sup = gather_supervision(set, bray);
        for c in 0..3 {
            color_sse += (color[c] - sup.target[c]) * (color[c] - sup.target[c]);
        }
        if let Some((z_sup, comps)) = &sup.depth {
            let z = t_dist * depth_cosine(bray.x as f64, bray.y as f64, &view.intr);
            let chat = if comps.is_empty() {
                1.0
            } else {
                state.conf_weights.combine_values(comps)
            };
            let err = match cfg.mode {
                SceneMode::Background => (1.0 / z_sup - 1.0 / z).abs(),
                SceneMode::Foreground => (z_sup - z).abs(),
            };
            depth_sum += chat * err;
            depth_count += 1;
        }
    }
    let mut smooth_sum = 0.0;
    for patch in &batch.patches {
        let view = &set.views[patch.view];
        let p = cfg.smooth_patch;
        let image_patch =
            Image::from_fn(p, p, |x, y| view.image.get(patch.x0 + x, patch.y0 + y));
        let mut disparity = Grid::filled(p, p, 0.0);
        for py in 0..p {
            for px in 0..p {
                let (ix, iy) = (patch.x0 + px, patch.y0 + py);
                let ray = generate_ray(
                    ix as f64,
                    iy as f64,
                    &view.intr,
                    &poses[patch.view],
                    view.near,
                    view.far,
                );
                sample_ts(cfg, &ray, None, &mut ws);
                let (_, t_dist, _) = ray_forward(&state.field, &ray, &space, &mut ws);
                disparity.set(px, py, 1.0 / (t_dist * depth_cosine(ix as f64, iy as f64, &view.intr)));
            }
        }
        smooth_sum += loss_smooth(&disparity, &image_patch);
    }
    Ok(LossParts {
        color: if batch.rays.is_empty() {
            0.0
        } else {
            color_sse / (3.0 * batch.rays.len() as f64)
        },
        depth: if depth_count == 0 {
            0.0
        } else {
            depth_sum / depth_count as f64
        },
        smooth: if batch.patches.is_empty() {
            0.0
        } else {
            smooth_sum / batch.patches.len() as f64
        },
    })
}

/// One optimizer step: sample, differentiate, update, advance the counter.
pub fn train_step(
    state: &mut TrainState,
    set: &TrainSet,
    cfg: &TrainConfig,
) -> Result<StepStats, TrainError> {
    let batch = sample_batch(set, cfg, state.iter)?;
    let (parts, grads) = compute_grads(state, set, &batch, cfg)?;
    let lr = lr_schedule(state.iter, cfg);
    state.apply_update(&grads, lr);
    state.iter += 1;
    let total = total_loss(&parts, cfg);
    Ok(StepStats {
        iter: state.iter - 1,
        lr,
        parts,
        total,
        batch_psnr: psnr_from_mse(parts.color),
    })
}

/// Run the full schedule, reporting each step to the sink.
pub fn train(
    set: &TrainSet,
    cfg: &TrainConfig,
    mut sink: impl FnMut(&StepStats),
) -> Result<TrainState, TrainError> {
    let mut state = TrainState::new(set, cfg);
    for _ in 0..cfg.iterations {
        let stats = train_step(&mut state, set, cfg)?;
        sink(&stats);
    }
    Ok(state)
}
