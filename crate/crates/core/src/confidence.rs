//! Per-pixel confidence in the fused depth supervision.
//!
//! Reprojection components (RGB, SSIM, feature) grade photometric agreement
//! after warping the target view into the source through the fused depth;
//! geometry components (depth, flow) grade cross-view consistency through
//! the threshold ramp `gamma`. A softmax-weighted combination with learnable
//! logits yields the final map.

use thiserror::Error;

use crate::depthfusion::{DepthMap, FlowField};
use crate::geometry::{reproject, Intrinsics, PixelSample, Pose};
use crate::raster::{bilinear, bilinear_rgb, luma, Grid, Image, Mask};

/// Guard for the relative-flow denominator at stationary pixels.
pub const FLOW_RATIO_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ConfidenceError {
    #[error("maps have mismatched dimensions")]
    DimensionMismatch,
    #[error("one logit per confidence map required: {maps} maps, {logits} logits")]
    WeightCountMismatch { maps: usize, logits: usize },
}

/// Per-pixel value in [0,1] with validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    values: Grid<f64>,
    valid: Mask,
}

impl ConfidenceMap {
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

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self {
            values: Grid::filled(width, height, value),
            valid: Mask::filled(width, height, true),
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

    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        debug_assert!((0.0..=1.0).contains(&value));
        self.values.set(x, y, value);
        self.valid.set(x, y, true);
    }

    pub fn values(&self) -> &Grid<f64> {
        &self.values
    }

    pub fn valid(&self) -> &Mask {
        &self.valid
    }

    pub fn mean(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (_, _, ok) in self.valid.pixels() {
            if ok {
                n += 1;
            }
        }
        for y in 0..self.height() {
            for x in 0..self.width() {
                if let Some(v) = self.get(x, y) {
                    sum += v;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Pixelwise minimum; a pixel is valid when either side is, taking the
/// defined value where only one is. Used to aggregate over the adjacent
/// target frames conservatively.
pub fn merge_min(a: &ConfidenceMap, b: &ConfidenceMap) -> ConfidenceMap {
    assert!(a.values.same_shape(&b.values));
    let mut out = ConfidenceMap::invalid(a.width(), a.height());
    for y in 0..a.height() {
        for x in 0..a.width() {
            match (a.get(x, y), b.get(x, y)) {
                (Some(va), Some(vb)) => out.set(x, y, va.min(vb)),
                (Some(v), None) | (None, Some(v)) => out.set(x, y, v),
                (None, None) => {}
            }
        }
    }
    out
}

/// Softmax-parameterized convex combination weights, one logit per enabled
/// confidence component.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceWeights {
    logits: Vec<f64>,
}

impl ConfidenceWeights {
    /// Uniform initialization: all logits zero.
    pub fn uniform(n: usize) -> Self {
        assert!(n >= 1);
        Self {
            logits: vec![0.0; n],
        }
    }

    pub fn from_logits(logits: Vec<f64>) -> Self {
        assert!(!logits.is_empty());
        Self { logits }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Simplex weights: positive, summing to one.
    pub fn weights(&self) -> Vec<f64> {
        let max = self.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = self.logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = w.iter().sum();
        for v in &mut w {
            *v /= sum;
        }
        w
    }

    /// Combine per-component scalar confidences at one pixel.
    pub fn combine_values(&self, components: &[f64]) -> f64 {
        debug_assert_eq!(components.len(), self.logits.len());
        self.weights()
            .iter()
            .zip(components.iter())
            .map(|(w, c)| w * c)
            .sum()
    }

    /// Accumulate `d(upstream * combined)/d(logit_k)` into `grad_logits`;
    /// gradients flow through the softmax.
    pub fn combine_backward(&self, components: &[f64], upstream: f64, grad_logits: &mut [f64]) {
        debug_assert_eq!(components.len(), self.logits.len());
        debug_assert_eq!(grad_logits.len(), self.logits.len());
        let w = self.weights();
        let combined: f64 = w.iter().zip(components.iter()).map(|(w, c)| w * c).sum();
        for k in 0..w.len() {
            grad_logits[k] += upstream * w[k] * (components[k] - combined);
        }
    }
}

/// Warp the target image into the source view through the source depth:
/// every valid source pixel is reprojected and bilinearly sampled from the
/// target. Out-of-frame or behind-camera pixels come back invalid.
pub fn warp_image(
    target_img: &Image,
    source_depth: &DepthMap,
    cam_s: &Pose,
    cam_t: &Pose,
    intr: &Intrinsics,
) -> (Image, Mask) {
    let width = source_depth.width();
    let height = source_depth.height();
    let mut out = Image::filled(width, height, [0.0; 3]);
    let mut valid = Mask::filled(width, height, false);
    for y in 0..height {
        for x in 0..width {
            let Some(d) = source_depth.get(x, y) else { continue };
            let px = PixelSample {
                u: x as f64,
                v: y as f64,
                d,
            };
            let Ok(proj) = reproject(&px, cam_s, cam_t, intr) else {
                continue;
            };
            if let Some(rgb) = bilinear_rgb(target_img, None, proj.pixel.u, proj.pixel.v) {
                out.set(x, y, rgb);
                valid.set(x, y, true);
            }
        }
    }
    (out, valid)
}

/// Photometric confidence: one minus the mean absolute channel difference.
pub fn rgb_confidence(src: &Image, warped: &Image, valid: &Mask) -> ConfidenceMap {
    assert!(src.same_shape(warped));
    let mut out = ConfidenceMap::invalid(src.width(), src.height());
    for y in 0..src.height() {
        for x in 0..src.width() {
            if !valid.get(x, y) {
                continue;
            }
            let a = src.get(x, y);
            let b = warped.get(x, y);
            let diff = ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0;
            out.set(x, y, (1.0 - diff).clamp(0.0, 1.0));
        }
    }
    out
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_RADIUS: usize = 3; // 7x7 window

/// Raw SSIM index per pixel on luma, 7x7 window clipped at borders and to
/// jointly valid pixels. Values lie in [-1, 1].
pub fn ssim_map(src: &Image, other: &Image, valid: &Mask) -> (Grid<f64>, Mask) {
    assert!(src.same_shape(other));
    let width = src.width();
    let height = src.height();
    let la = Grid::from_fn(width, height, |x, y| luma(src.get(x, y)));
    let lb = Grid::from_fn(width, height, |x, y| luma(other.get(x, y)));
    let mut values = Grid::filled(width, height, 0.0);
    let mut out_valid = Mask::filled(width, height, false);
    let r = SSIM_RADIUS as isize;
    for y in 0..height as isize {
        for x in 0..width as isize {
            if !valid.get(x as usize, y as usize) {
                continue;
            }
            let (mut sa, mut sb, mut saa, mut sbb, mut sab, mut n) =
                (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for wy in (y - r).max(0)..=(y + r).min(height as isize - 1) {
                for wx in (x - r).max(0)..=(x + r).min(width as isize - 1) {
                    if !valid.get(wx as usize, wy as usize) {
                        continue;
                    }
                    let a = la.get(wx as usize, wy as usize);
                    let b = lb.get(wx as usize, wy as usize);
                    sa += a;
                    sb += b;
                    saa += a * a;
                    sbb += b * b;
                    sab += a * b;
                    n += 1.0;
                }
            }
            let mu_a = sa / n;
            let mu_b = sb / n;
            let var_a = (saa / n - mu_a * mu_a).max(0.0);
            let var_b = (sbb / n - mu_b * mu_b).max(0.0);
            let cov = sab / n - mu_a * mu_b;
            let ssim = ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
            values.set(x as usize, y as usize, ssim);
            out_valid.set(x as usize, y as usize, true);
        }
    }
    (values, out_valid)
}

/// Structural confidence: SSIM mapped from [-1,1] into [0,1].
pub fn ssim_confidence(src: &Image, warped: &Image, valid: &Mask) -> ConfidenceMap {
    let (raw, ok) = ssim_map(src, warped, valid);
    let mut out = ConfidenceMap::invalid(src.width(), src.height());
    for y in 0..src.height() {
        for x in 0..src.width() {
            if ok.get(x, y) {
                out.set(x, y, ((raw.get(x, y) + 1.0) / 2.0).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Mean raw SSIM over an image pair; the evaluation metric.
pub fn ssim_metric(a: &Image, b: &Image) -> f64 {
    let valid = Mask::filled(a.width(), a.height(), true);
    let (raw, _) = ssim_map(a, b, &valid);
    let mut sum = 0.0;
    for (_, _, v) in raw.pixels() {
        sum += v;
    }
    sum / (a.width() * a.height()) as f64
}

pub const FEATURE_DIM: usize = 11;

/// Unit-norm per-pixel descriptors; the hand-crafted stand-in for deep
/// perceptual features.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    data: Vec<f64>,
    valid: Mask,
    width: usize,
    height: usize,
}

impl FeatureMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn descriptor(&self, x: usize, y: usize) -> Option<&[f64]> {
        self.valid
            .get(x, y)
            .then(|| &self.data[(y * self.width + x) * FEATURE_DIM..][..FEATURE_DIM])
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f64>, valid: Mask) -> Self {
        assert_eq!(data.len(), width * height * FEATURE_DIM);
        Self {
            data,
            valid,
            width,
            height,
        }
    }
}

fn blur_decimate(src: &Grid<f64>) -> Grid<f64> {
    // 5-tap binomial blur, then 2x decimation
    let kernel = [1.0, 4.0, 6.0, 4.0, 1.0];
    let width = src.width();
    let height = src.height();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = Grid::filled(width, height, 0.0);
    for y in 0..height {
        for x in 0..width {
            let mut s = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                s += w * src.get(clamp(x as isize + k as isize - 2, width), y);
            }
            tmp.set(x, y, s / 16.0);
        }
    }
    let nw = width.div_ceil(2).max(1);
    let nh = height.div_ceil(2).max(1);
    Grid::from_fn(nw, nh, |x, y| {
        let mut s = 0.0;
        for (k, w) in kernel.iter().enumerate() {
            s += w * tmp.get(x * 2, clamp((y * 2) as isize + k as isize - 2, height));
        }
        s / 16.0
    })
}

fn sobel(src: &Grid<f64>) -> (Grid<f64>, Grid<f64>) {
    let width = src.width();
    let height = src.height();
    let at = |x: isize, y: isize| {
        src.get(
            x.clamp(0, width as isize - 1) as usize,
            y.clamp(0, height as isize - 1) as usize,
        )
    };
    let mut gx = Grid::filled(width, height, 0.0);
    let mut gy = Grid::filled(width, height, 0.0);
    for y in 0..height as isize {
        for x in 0..width as isize {
            let h = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let v = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            gx.set(x as usize, y as usize, h / 8.0);
            gy.set(x as usize, y as usize, v / 8.0);
        }
    }
    (gx, gy)
}

fn sample_clamped(g: &Grid<f64>, u: f64, v: f64) -> f64 {
    let u = u.clamp(0.0, (g.width() - 1) as f64);
    let v = v.clamp(0.0, (g.height() - 1) as f64);
    bilinear(g, None, u, v, |x| x).unwrap()
}

/// Multi-scale photometric descriptor: center luma, three pyramid-luma
/// levels, Sobel gradients over 3x3 patches at three scales, and local
/// contrast. L2-normalized; featureless pixels are flagged invalid.
pub fn compute_features(image: &Image) -> FeatureMap {
    let width = image.width();
    let height = image.height();
    let l0 = Grid::from_fn(width, height, |x, y| luma(image.get(x, y)));
    let l1 = blur_decimate(&l0);
    let l2 = blur_decimate(&l1);
    let l3 = blur_decimate(&l2);
    let (gx0, gy0) = sobel(&l0);
    let (gx1, gy1) = sobel(&l1);
    let (gx2, gy2) = sobel(&l2);

    let mut data = vec![0.0; width * height * FEATURE_DIM];
    let mut valid = Mask::filled(width, height, false);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (x as f64, y as f64);
            // 3x3 mean absolute deviation around the pixel
            let mut mean = 0.0;
            let mut n = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let sx = (x as i64 + dx).clamp(0, width as i64 - 1) as usize;
                    let sy = (y as i64 + dy).clamp(0, height as i64 - 1) as usize;
                    mean += l0.get(sx, sy);
                    n += 1.0;
                }
            }
            mean /= n;
            let mut mad = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let sx = (x as i64 + dx).clamp(0, width as i64 - 1) as usize;
                    let sy = (y as i64 + dy).clamp(0, height as i64 - 1) as usize;
                    mad += (l0.get(sx, sy) - mean).abs();
                }
            }
            mad /= n;

            let d = &mut data[(y * width + x) * FEATURE_DIM..][..FEATURE_DIM];
            d[0] = l0.get(x, y);
            d[1] = sample_clamped(&l1, u / 2.0, v / 2.0);
            d[2] = sample_clamped(&l2, u / 4.0, v / 4.0);
            d[3] = sample_clamped(&l3, u / 8.0, v / 8.0);
            d[4] = gx0.get(x, y);
            d[5] = gy0.get(x, y);
            d[6] = sample_clamped(&gx1, u / 2.0, v / 2.0);
            d[7] = sample_clamped(&gy1, u / 2.0, v / 2.0);
            d[8] = sample_clamped(&gx2, u / 4.0, v / 4.0);
            d[9] = sample_clamped(&gy2, u / 4.0, v / 4.0);
            d[10] = mad;

            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-9 {
                for v in d.iter_mut() {
                    *v /= norm;
                }
                valid.set(x, y, true);
            }
        }
    }
    FeatureMap {
        data,
        valid,
        width,
        height,
    }
}

/// Sample the target's descriptors at the warped positions implied by the
/// source depth; resampled descriptors are renormalized.
pub fn warp_features(
    target_feat: &FeatureMap,
    source_depth: &DepthMap,
    cam_s: &Pose,
    cam_t: &Pose,
    intr: &Intrinsics,
) -> FeatureMap {
    let width = source_depth.width();
    let height = source_depth.height();
    let mut data = vec![0.0; width * height * FEATURE_DIM];
    let mut valid = Mask::filled(width, height, false);
    for y in 0..height {
        for x in 0..width {
            let Some(d) = source_depth.get(x, y) else { continue };
            let px = PixelSample {
                u: x as f64,
                v: y as f64,
                d,
            };
            let Ok(proj) = reproject(&px, cam_s, cam_t, intr) else {
                continue;
            };
            let (u, v) = (proj.pixel.u, proj.pixel.v);
            if u < 0.0 || v < 0.0 || u > (width - 1) as f64 || v > (height - 1) as f64 {
                continue;
            }
            let (x0, y0) = (u.floor() as usize, v.floor() as usize);
            let (fx, fy) = (u - x0 as f64, v - y0 as f64);
            let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
            let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
            let corners = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x1, y0, fx * (1.0 - fy)),
                (x0, y1, (1.0 - fx) * fy),
                (x1, y1, fx * fy),
            ];
            let out = &mut data[(y * width + x) * FEATURE_DIM..][..FEATURE_DIM];
            let mut ok = true;
            for &(cx, cy, w) in &corners {
                if w == 0.0 {
                    continue;
                }
                match target_feat.descriptor(cx, cy) {
                    Some(f) => {
                        for (o, v) in out.iter_mut().zip(f.iter()) {
                            *o += w * v;
                        }
                    }
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                out.fill(0.0);
                continue;
            }
            let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-9 {
                for v in out.iter_mut() {
                    *v /= norm;
                }
                valid.set(x, y, true);
            }
        }
    }
    FeatureMap {
        data,
        valid,
        width,
        height,
    }
}

/// Feature-space confidence: `1 - |f_s - f_t| / 2`, which spans [0,1] for
/// unit descriptors.
pub fn feature_confidence(src: &FeatureMap, warped: &FeatureMap) -> ConfidenceMap {
    assert_eq!(src.width, warped.width);
    assert_eq!(src.height, warped.height);
    let mut out = ConfidenceMap::invalid(src.width, src.height);
    for y in 0..src.height {
        for x in 0..src.width {
            let (Some(a), Some(b)) = (src.descriptor(x, y), warped.descriptor(x, y)) else {
                continue;
            };
            let dist = a
                .iter()
                .zip(b.iter())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            out.set(x, y, (1.0 - 0.5 * dist).clamp(0.0, 1.0));
        }
    }
    out
}

/// Threshold ramp: full confidence at zero discrepancy, linear falloff,
/// zero at and beyond `tau`.
pub fn gamma(x: f64, tau: f64) -> f64 {
    debug_assert!(x >= 0.0 && tau > 0.0);
    if x >= tau {
        0.0
    } else {
        1.0 - x / tau
    }
}

/// Cross-view depth consistency: reproject each source pixel, compare its
/// projected depth with the target map at the landing pixel (nearest
/// neighbour), and ramp the relative discrepancy through `gamma`.
pub fn depth_confidence(
    src_depth: &DepthMap,
    tgt_depth: &DepthMap,
    cam_s: &Pose,
    cam_t: &Pose,
    intr: &Intrinsics,
    tau: f64,
) -> ConfidenceMap {
    let mut out = ConfidenceMap::invalid(src_depth.width(), src_depth.height());
    for y in 0..src_depth.height() {
        for x in 0..src_depth.width() {
            let Some(d_s) = src_depth.get(x, y) else { continue };
            let px = PixelSample {
                u: x as f64,
                v: y as f64,
                d: d_s,
            };
            let Ok(proj) = reproject(&px, cam_s, cam_t, intr) else {
                continue;
            };
            if !proj.in_frame {
                continue;
            }
            let (tx, ty) = (proj.pixel.u.round() as usize, proj.pixel.v.round() as usize);
            if tx >= tgt_depth.width() || ty >= tgt_depth.height() {
                continue;
            }
            let Some(d_hat) = tgt_depth.get(tx, ty) else { continue };
            out.set(x, y, gamma((proj.pixel.d - d_hat).abs() / d_s, tau));
        }
    }
    out
}

/// Cross-view flow consistency: the reprojected displacement is compared
/// with optical flow, relative to the displacement magnitude (guarded by
/// [`FLOW_RATIO_EPS`]).
pub fn flow_confidence(
    src_depth: &DepthMap,
    oflow: &FlowField,
    cam_s: &Pose,
    cam_t: &Pose,
    intr: &Intrinsics,
    tau: f64,
) -> ConfidenceMap {
    let mut out = ConfidenceMap::invalid(src_depth.width(), src_depth.height());
    for y in 0..src_depth.height() {
        for x in 0..src_depth.width() {
            let Some(d_s) = src_depth.get(x, y) else { continue };
            let Some((fu, fv)) = oflow.get(x, y) else { continue };
            let px = PixelSample {
                u: x as f64,
                v: y as f64,
                d: d_s,
            };
            let Ok(proj) = reproject(&px, cam_s, cam_t, intr) else {
                continue;
            };
            let du = proj.pixel.u - x as f64;
            let dv = proj.pixel.v - y as f64;
            let diff = ((du - fu).powi(2) + (dv - fv).powi(2)).sqrt();
            let denom = (du * du + dv * dv).sqrt().max(FLOW_RATIO_EPS);
            out.set(x, y, gamma((diff / denom).min(1e12), tau));
        }
    }
    out
}

/// Pixelwise convex combination of confidence maps under softmax weights.
/// A pixel is valid only where every component is.
pub fn combine(
    maps: &[ConfidenceMap],
    weights: &ConfidenceWeights,
) -> Result<ConfidenceMap, ConfidenceError> {
    if maps.is_empty() || maps.len() != weights.len() {
        return Err(ConfidenceError::WeightCountMismatch {
            maps: maps.len(),
            logits: weights.len(),
        });
    }
    let (width, height) = (maps[0].width(), maps[0].height());
    for m in maps {
        if m.width() != width || m.height() != height {
            return Err(ConfidenceError::DimensionMismatch);
        }
    }
    let w = weights.weights();
    let mut out = ConfidenceMap::invalid(width, height);
    let mut components = vec![0.0; maps.len()];
    'pixels: for y in 0..height {
        for x in 0..width {
            for (i, m) in maps.iter().enumerate() {
                match m.get(x, y) {
                    Some(v) => components[i] = v,
                    None => continue 'pixels,
                }
            }
            let value: f64 = w.iter().zip(components.iter()).map(|(w, c)| w * c).sum();
            out.set(x, y, value.clamp(0.0, 1.0));
        }
    }
    Ok(out)
}
