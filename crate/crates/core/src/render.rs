//! Differentiable volume rendering along rays.
//!
//! Compositing follows the classic quadrature: `w_i = T_i (1 - e^{-sigma_i
//! delta_i})` with `T_i = exp(-sum_{j<i} sigma_j delta_j)`. Rendered depth is
//! the opacity-normalized expected distance `sum w_i t_i / max(sum w_i, eps)`;
//! rays with essentially no mass take the far bound instead. The final bin
//! width runs to the far bound.

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::depthfusion::DepthMap;
use crate::field::{EvalTrace, FieldScratch, OutputGrad, RadianceField};
use crate::geometry::{Intrinsics, Pose};
use crate::parameterization::{
    depth_cosine, generate_ray, sample_log_spaced, sample_uniform, Ray, SpaceMapping,
};
use crate::raster::{Grid, Image};

/// Opacity below this renders as vacuum: depth pins to the far bound and
/// carries no gradient.
pub const VACUUM_OPACITY: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("sigma/delta lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// One evaluated sample along a ray.
#[derive(Debug, Clone, Copy)]
pub struct RaySample {
    pub t: f64,
    pub delta: f64,
    pub output: crate::field::FieldOutput,
}

/// Output of rendering a single ray.
#[derive(Debug, Clone)]
pub struct RenderResult {
    pub color: [f64; 3],
    /// Expected termination distance along the ray, in meters.
    pub depth: f64,
    pub weights: Vec<f64>,
    pub opacity: f64,
}

/// Accumulated transmittance before each sample: `T_1 = 1`,
/// `T_i = exp(-sum_{j<i} sigma_j delta_j)`.
pub fn transmittance(sigmas: &[f64], deltas: &[f64]) -> Result<Vec<f64>, RenderError> {
    if sigmas.len() != deltas.len() {
        return Err(RenderError::LengthMismatch(sigmas.len(), deltas.len()));
    }
    let mut out = Vec::with_capacity(sigmas.len());
    let mut acc = 0.0f64;
    for (sigma, delta) in sigmas.iter().zip(deltas.iter()) {
        out.push((-acc).exp());
        acc += sigma * delta;
    }
    Ok(out)
}

fn bin_widths(ts: &[f64], far: f64, out: &mut Vec<f64>) {
    out.clear();
    for i in 0..ts.len() {
        let next = if i + 1 < ts.len() { ts[i + 1] } else { far };
        out.push((next - ts[i]).max(0.0));
    }
}

/// State of one composited ray kept around for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Composite {
    pub color: [f64; 3],
    pub depth: f64,
    pub weight_sum: f64,
    pub weights: Vec<f64>,
    trans: Vec<f64>,
    alphas: Vec<f64>,
    deltas: Vec<f64>,
    vacuum: bool,
}

/// Evaluate the rendering quadrature for given densities and colors.
pub fn composite_samples(
    sigmas: &[f64],
    colors: &[[f64; 3]],
    ts: &[f64],
    far: f64,
    out: &mut Composite,
) {
    debug_assert_eq!(sigmas.len(), colors.len());
    debug_assert_eq!(sigmas.len(), ts.len());
    bin_widths(ts, far, &mut out.deltas);
    out.weights.clear();
    out.trans.clear();
    out.alphas.clear();
    out.color = [0.0; 3];
    let mut t_acc = 1.0;
    let mut expected = 0.0;
    let mut weight_sum = 0.0;
    for i in 0..sigmas.len() {
        out.trans.push(t_acc);
        let alpha = 1.0 - (-sigmas[i] * out.deltas[i]).exp();
        out.alphas.push(alpha);
        let w = t_acc * alpha;
        out.weights.push(w);
        weight_sum += w;
        expected += w * ts[i];
        for c in 0..3 {
            out.color[c] += w * colors[i][c];
        }
        t_acc *= 1.0 - alpha;
    }
    out.weight_sum = weight_sum;
    out.vacuum = weight_sum < VACUUM_OPACITY;
    out.depth = if out.vacuum {
        far
    } else {
        expected / weight_sum
    };
}

/// Upstream gradient for a rendered ray.
#[derive(Debug, Clone, Copy, Default)]
pub struct RayGrad {
    pub d_color: [f64; 3],
    /// Gradient with respect to the expected distance (not z-depth).
    pub d_depth: f64,
}

/// Reverse of [`composite_samples`]; fills per-sample gradients of the loss
/// with respect to densities and colors.
pub fn composite_backward(
    sigmas: &[f64],
    colors: &[[f64; 3]],
    ts: &[f64],
    comp: &Composite,
    upstream: &RayGrad,
    d_sigmas: &mut Vec<f64>,
    d_colors: &mut Vec<[f64; 3]>,
) {
    let n = sigmas.len();
    d_sigmas.clear();
    d_sigmas.resize(n, 0.0);
    d_colors.clear();
    d_colors.resize(n, [0.0; 3]);

    // dL/dw_i
    let mut g = vec![0.0; n];
    for i in 0..n {
        let mut gi = 0.0;
        for c in 0..3 {
            gi += upstream.d_color[c] * colors[i][c];
            d_colors[i][c] = upstream.d_color[c] * comp.weights[i];
        }
        if !comp.vacuum {
            gi += upstream.d_depth * (ts[i] - comp.depth) / comp.weight_sum;
        }
        g[i] = gi;
    }

    // dL/dsigma_j = delta_j * (g_j * T_{j+1} - sum_{i>j} g_i w_i)
    let mut suffix = 0.0;
    for j in (0..n).rev() {
        let t_next = comp.trans[j] * (1.0 - comp.alphas[j]);
        d_sigmas[j] = comp.deltas[j] * (g[j] * t_next - suffix);
        suffix += g[j] * comp.weights[j];
    }
}

/// Per-ray scratch reused across the training loop.
#[derive(Debug, Default)]
pub struct RayWorkspace {
    pub ts: Vec<f64>,
    sigmas: Vec<f64>,
    colors: Vec<[f64; 3]>,
    positions: Vec<Vector3<f64>>,
    traces: Vec<EvalTrace>,
    comp: Composite,
    d_sigmas: Vec<f64>,
    d_colors: Vec<[f64; 3]>,
    field_scratch: FieldScratch,
}

/// Gradient of a ray's loss contribution with respect to the ray itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct RayInputGrad {
    pub d_origin: Vector3<f64>,
    /// With respect to the unit direction fed to sampling and shading.
    pub d_direction: Vector3<f64>,
}

/// Forward pass storing everything needed for [`ray_backward`]. Sample
/// distances must already sit in `ws.ts`.
pub fn ray_forward(
    field: &RadianceField,
    ray: &Ray,
    space: &SpaceMapping,
    ws: &mut RayWorkspace,
) -> (/* color */ [f64; 3], /* distance */ f64, /* opacity */ f64) {
    let n = ws.ts.len();
    ws.sigmas.clear();
    ws.colors.clear();
    ws.positions.clear();
    ws.traces.resize(n, EvalTrace::default());
    for i in 0..n {
        let x = ray.origin + ray.direction * ws.ts[i];
        let mapped = space.apply(&x);
        let out = field.eval_traced(&mapped, &ray.direction, &mut ws.traces[i]);
        ws.positions.push(x);
        ws.sigmas.push(out.density);
        ws.colors.push(out.color);
    }
    composite_samples(&ws.sigmas, &ws.colors, &ws.ts, ray.far, &mut ws.comp);
    (ws.comp.color, ws.comp.depth, ws.comp.weight_sum)
}

/// Reverse pass matching the preceding [`ray_forward`] on the same
/// workspace. Parameter gradients accumulate into `param_grads`.
pub fn ray_backward(
    field: &RadianceField,
    space: &SpaceMapping,
    ws: &mut RayWorkspace,
    upstream: &RayGrad,
    param_grads: &mut [f64],
) -> RayInputGrad {
    composite_backward(
        &ws.sigmas,
        &ws.colors,
        &ws.ts,
        &ws.comp,
        upstream,
        &mut ws.d_sigmas,
        &mut ws.d_colors,
    );
    let mut d_origin = Vector3::zeros();
    let mut d_direction = Vector3::zeros();
    for i in 0..ws.ts.len() {
        let out_grad = OutputGrad {
            d_color: ws.d_colors[i],
            d_density: ws.d_sigmas[i],
        };
        let input_grad = field.backward(
            &ws.traces[i],
            &out_grad,
            param_grads,
            &mut ws.field_scratch,
        );
        let d_world = space.backward(&ws.positions[i], &input_grad.d_position);
        d_origin += d_world;
        d_direction += d_world * ws.ts[i] + input_grad.d_direction;
    }
    RayInputGrad {
        d_origin,
        d_direction,
    }
}

/// Render one ray at the given sample distances.
pub fn render_ray(
    field: &RadianceField,
    ray: &Ray,
    ts: &[f64],
    space: &SpaceMapping,
) -> RenderResult {
    let mut ws = RayWorkspace::default();
    ws.ts.extend_from_slice(ts);
    let (color, depth, opacity) = ray_forward(field, ray, space, &mut ws);
    RenderResult {
        color,
        depth,
        weights: ws.comp.weights.clone(),
        opacity,
    }
}

/// How sample distances are laid out along each ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingKind {
    /// Geometric spacing; the unbounded background path.
    LogSpaced,
    /// Uniform stratified spacing; the bounded foreground path.
    Uniform,
}

#[derive(Debug, Clone, Copy)]
pub struct ImageRenderParams {
    pub n_samples: usize,
    pub near: f64,
    pub far: f64,
    pub space: SpaceMapping,
    pub sampling: SamplingKind,
}

/// Render a full view with deterministic evaluation-mode sampling. The
/// depth map holds camera-frame z; rays with opacity below the vacuum
/// threshold are marked invalid.
pub fn render_image(
    field: &RadianceField,
    intr: &Intrinsics,
    cam: &Pose,
    params: &ImageRenderParams,
) -> (Image, DepthMap) {
    let width = intr.width;
    let height = intr.height;
    let rows: Vec<Vec<([f64; 3], f64, bool)>> = (0..height)
        .into_par_iter()
        .map(|y| {
            (0..width)
                .map(|x| {
                    let ray =
                        generate_ray(x as f64, y as f64, intr, cam, params.near, params.far);
                    let ts = match params.sampling {
                        SamplingKind::LogSpaced => {
                            sample_log_spaced(&ray, params.n_samples).expect("valid bounds")
                        }
                        SamplingKind::Uniform => {
                            sample_uniform(&ray, params.n_samples, None).expect("valid bounds")
                        }
                    };
                    let r = render_ray(field, &ray, &ts, &params.space);
                    let z = r.depth * depth_cosine(x as f64, y as f64, intr);
                    (r.color, z, r.opacity > VACUUM_OPACITY)
                })
                .collect()
        })
        .collect();

    let mut image = Image::filled(width, height, [0.0; 3]);
    let mut values = Grid::filled(width, height, 0.0f64);
    let mut valid = Grid::filled(width, height, false);
    for (y, row) in rows.iter().enumerate() {
        for (x, &(color, z, ok)) in row.iter().enumerate() {
            image.set(x, y, color);
            values.set(x, y, z);
            valid.set(x, y, ok);
        }
    }
    (image, DepthMap::new(values, valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_field() -> RadianceField {
        RadianceField::new(FieldConfig {
            density_layers: 2,
            density_width: 8,
            color_layers: 1,
            color_width: 8,
            feature_dim: 4,
            levels_position: 2,
            levels_direction: 1,
            seed: 5,
        })
    }

    #[test]
    fn transmittance_vacuum_is_unity() {
        let t = transmittance(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn transmittance_unit_example() {
        let t = transmittance(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(t[0], 1.0, epsilon = 0.0);
        assert_abs_diff_eq!(t[1], (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn transmittance_single_sample() {
        assert_eq!(transmittance(&[4.2], &[0.3]).unwrap(), vec![1.0]);
    }

    #[test]
    fn transmittance_rejects_length_mismatch() {
        assert!(matches!(
            transmittance(&[1.0], &[1.0, 2.0]),
            Err(RenderError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn transmittance_nonincreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..100 {
            let n = rng.random_range(1..20);
            let sigmas: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
            let deltas: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
            let t = transmittance(&sigmas, &deltas).unwrap();
            for w in t.windows(2) {
                assert!(w[1] <= w[0] + 1e-15);
            }
            assert!(t.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn composite_opaque_delta() {
        let mut comp = Composite::default();
        composite_samples(&[50.0], &[[0.2, 0.4, 0.8]], &[2.5], 3.5, &mut comp);
        for c in 0..3 {
            assert_abs_diff_eq!(comp.color[c], [0.2, 0.4, 0.8][c], epsilon = 1e-12);
        }
        assert!(comp.weight_sum > 1.0 - 1e-12);
        assert_abs_diff_eq!(comp.depth, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn composite_vacuum_rule() {
        let mut comp = Composite::default();
        composite_samples(
            &[0.0, 0.0],
            &[[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]],
            &[1.0, 2.0],
            9.0,
            &mut comp,
        );
        assert_eq!(comp.color, [0.0; 3]);
        assert_eq!(comp.weight_sum, 0.0);
        assert_eq!(comp.depth, 9.0);
    }

    #[test]
    fn composite_two_samples_matches_brute_force() {
        // direct summation of the quadrature as an independent oracle
        let sigmas = [0.5, 2.0];
        let colors = [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let ts = [1.0, 2.0];
        let far = 3.0;
        let t1 = 1.0;
        let t2 = (-0.5f64 * 1.0).exp();
        let w1 = t1 * (1.0 - (-0.5f64).exp());
        let w2 = t2 * (1.0 - (-2.0f64).exp());
        let expect_color = [w1, 0.0, w2];
        let expect_depth = (w1 * 1.0 + w2 * 2.0) / (w1 + w2);

        let mut comp = Composite::default();
        composite_samples(&sigmas, &colors, &ts, far, &mut comp);
        for c in 0..3 {
            assert_abs_diff_eq!(comp.color[c], expect_color[c], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(comp.depth, expect_depth, epsilon = 1e-12);
        assert_abs_diff_eq!(comp.weights[0], w1, epsilon = 1e-12);
        assert_abs_diff_eq!(comp.weights[1], w2, epsilon = 1e-12);
    }

    #[test]
    fn weight_sum_telescopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..200 {
            let n = rng.random_range(1..40);
            let mut ts: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..20.0)).collect();
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ts.dedup();
            let far = ts.last().unwrap() + rng.random_range(0.1..5.0);
            let sigmas: Vec<f64> = ts.iter().map(|_| rng.random_range(0.0..2.0)).collect();
            let colors: Vec<[f64; 3]> = ts.iter().map(|_| [0.5, 0.5, 0.5]).collect();
            let mut comp = Composite::default();
            composite_samples(&sigmas, &colors, &ts, far, &mut comp);
            let mut exponent = 0.0;
            for i in 0..ts.len() {
                let next = if i + 1 < ts.len() { ts[i + 1] } else { far };
                exponent += sigmas[i] * (next - ts[i]);
            }
            let expect = 1.0 - (-exponent).exp();
            assert!((comp.weight_sum - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_bin_split_preserves_weights() {
        let sigmas = [0.7, 1.3, 0.2];
        let colors = [[0.1, 0.2, 0.3]; 3];
        let ts = [1.0, 2.0, 3.0];
        let far = 4.0;
        let mut base = Composite::default();
        composite_samples(&sigmas, &colors, &ts, far, &mut base);

        // split the middle bin [2,3) at its midpoint with the same density
        let sigmas2 = [0.7, 1.3, 1.3, 0.2];
        let colors2 = [[0.1, 0.2, 0.3]; 4];
        let ts2 = [1.0, 2.0, 2.5, 3.0];
        let mut split = Composite::default();
        composite_samples(&sigmas2, &colors2, &ts2, far, &mut split);

        assert!((base.weights[0] - split.weights[0]).abs() < 1e-9);
        assert!((base.weights[1] - (split.weights[1] + split.weights[2])).abs() < 1e-9);
        assert!((base.weights[2] - split.weights[3]).abs() < 1e-9);
        for c in 0..3 {
            assert!((base.color[c] - split.color[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn occlusion_monotonicity() {
        let colors = [[0.5; 3]; 4];
        let ts = [1.0, 2.0, 3.0, 4.0];
        let far = 5.0;
        let mut lo = Composite::default();
        composite_samples(&[0.3, 0.4, 0.5, 0.6], &colors, &ts, far, &mut lo);
        let mut hi = Composite::default();
        composite_samples(&[2.1, 0.4, 0.5, 0.6], &colors, &ts, far, &mut hi);
        for i in 1..4 {
            assert!(hi.weights[i] <= lo.weights[i] + 1e-15);
        }
    }

    #[test]
    fn composite_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let h = 1e-6;
        for _ in 0..50 {
            let n = rng.random_range(2..8);
            let mut ts: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..10.0)).collect();
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let far = ts.last().unwrap() + 1.0;
            let sigmas: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..2.0)).collect();
            let colors: Vec<[f64; 3]> = (0..n)
                .map(|_| {
                    [
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                    ]
                })
                .collect();
            let upstream = RayGrad {
                d_color: [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ],
                d_depth: rng.random_range(-1.0..1.0),
            };
            let loss = |s: &[f64], c: &[[f64; 3]]| {
                let mut comp = Composite::default();
                composite_samples(s, c, &ts, far, &mut comp);
                upstream.d_depth * comp.depth
                    + (0..3).map(|k| upstream.d_color[k] * comp.color[k]).sum::<f64>()
            };
            let mut comp = Composite::default();
            composite_samples(&sigmas, &colors, &ts, far, &mut comp);
            let mut ds = Vec::new();
            let mut dc = Vec::new();
            composite_backward(&sigmas, &colors, &ts, &comp, &upstream, &mut ds, &mut dc);
            for i in 0..n {
                let mut sp = sigmas.clone();
                let mut sm = sigmas.clone();
                sp[i] += h;
                sm[i] -= h;
                let fd = (loss(&sp, &colors) - loss(&sm, &colors)) / (2.0 * h);
                let denom = fd.abs().max(ds[i].abs()).max(1e-6);
                assert!(
                    (fd - ds[i]).abs() / denom < 1e-4,
                    "sigma[{i}] fd {fd} analytic {}",
                    ds[i]
                );
                for k in 0..3 {
                    let mut cp = colors.clone();
                    let mut cm = colors.clone();
                    cp[i][k] += h;
                    cm[i][k] -= h;
                    let fd = (loss(&sigmas, &cp) - loss(&sigmas, &cm)) / (2.0 * h);
                    let denom = fd.abs().max(dc[i][k].abs()).max(1e-6);
                    assert!(
                        (fd - dc[i][k]).abs() / denom < 1e-4,
                        "color[{i}][{k}] fd {fd} analytic {}",
                        dc[i][k]
                    );
                }
            }
        }
    }

    #[test]
    fn ray_render_deterministic() {
        let field = tiny_field();
        let ray = Ray {
            origin: Vector3::new(0.1, 0.0, -2.0),
            direction: Vector3::z(),
            near: 0.5,
            far: 6.0,
        };
        let ts = sample_log_spaced(&ray, 16).unwrap();
        let space = SpaceMapping::Identity;
        let a = render_ray(&field, &ray, &ts, &space);
        let b = render_ray(&field, &ray, &ts, &space);
        assert_eq!(a.color, b.color);
        assert_eq!(a.depth.to_bits(), b.depth.to_bits());
    }

    #[test]
    fn ray_backward_matches_finite_differences_through_field() {
        let mut field = tiny_field();
        let ray = Ray {
            origin: Vector3::new(0.0, 0.1, -1.5),
            direction: Vector3::new(0.1, -0.05, 1.0).normalize(),
            near: 0.4,
            far: 5.0,
        };
        let space = SpaceMapping::Contracted(crate::parameterization::ContractionConfig::new(3.0));
        let ts = sample_log_spaced(&ray, 6).unwrap();
        let upstream = RayGrad {
            d_color: [0.3, -0.7, 0.5],
            d_depth: 0.9,
        };
        let loss = |f: &RadianceField| {
            let r = render_ray(f, &ray, &ts, &space);
            upstream.d_depth * r.depth
                + (0..3).map(|k| upstream.d_color[k] * r.color[k]).sum::<f64>()
        };
        let mut ws = RayWorkspace::default();
        ws.ts.extend_from_slice(&ts);
        ray_forward(&field, &ray, &space, &mut ws);
        let mut grads = vec![0.0; field.param_count()];
        ray_backward(&field, &space, &mut ws, &upstream, &mut grads);

        let h = 1e-5;
        for i in (0..field.param_count()).step_by(7) {
            let orig = field.params()[i];
            field.params_mut()[i] = orig + h;
            let lp = loss(&field);
            field.params_mut()[i] = orig - h;
            let lm = loss(&field);
            field.params_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(grads[i].abs()).max(1e-7);
            assert!(
                (fd - grads[i]).abs() / denom < 1e-4,
                "param {i}: fd {fd} analytic {}",
                grads[i]
            );
        }
    }

    #[test]
    fn ray_origin_gradient_matches_finite_differences() {
        let field = tiny_field();
        let direction = Vector3::new(0.2, 0.1, 1.0).normalize();
        let base_origin = Vector3::new(0.05, -0.1, -1.0);
        let space = SpaceMapping::Identity;
        let upstream = RayGrad {
            d_color: [1.0, 0.5, -0.25],
            d_depth: 0.4,
        };
        let loss = |origin: Vector3<f64>| {
            let ray = Ray {
                origin,
                direction,
                near: 0.4,
                far: 4.0,
            };
            let ts = sample_log_spaced(&ray, 5).unwrap();
            let r = render_ray(&field, &ray, &ts, &space);
            upstream.d_depth * r.depth
                + (0..3).map(|k| upstream.d_color[k] * r.color[k]).sum::<f64>()
        };
        let ray = Ray {
            origin: base_origin,
            direction,
            near: 0.4,
            far: 4.0,
        };
        let mut ws = RayWorkspace::default();
        ws.ts = sample_log_spaced(&ray, 5).unwrap();
        ray_forward(&field, &ray, &space, &mut ws);
        let mut grads = vec![0.0; field.param_count()];
        let ig = ray_backward(&field, &space, &mut ws, &upstream, &mut grads);
        let h = 1e-6;
        for i in 0..3 {
            let mut op = base_origin;
            let mut om = base_origin;
            op[i] += h;
            om[i] -= h;
            let fd = (loss(op) - loss(om)) / (2.0 * h);
            let denom = fd.abs().max(ig.d_origin[i].abs()).max(1e-7);
            assert!(
                (fd - ig.d_origin[i]).abs() / denom < 1e-4,
                "origin[{i}] fd {fd} analytic {}",
                ig.d_origin[i]
            );
        }
    }

    #[test]
    fn image_render_is_deterministic_and_black_on_vacuum() {
        let mut field = tiny_field();
        // zero the density head weights and drive the bias strongly negative:
        // softplus yields essentially zero density everywhere
        let spec = *field.density_layout().last().unwrap();
        for p in &mut field.params_mut()[spec.w_off..spec.w_off + spec.in_dim * spec.out_dim] {
            *p = 0.0;
        }
        field.params_mut()[spec.b_off] = -60.0;
        let intr = Intrinsics::new(20.0, 20.0, 8.0, 6.0, 16, 12).unwrap();
        let cam = Pose::identity();
        let params = ImageRenderParams {
            n_samples: 8,
            near: 0.2,
            far: 10.0,
            space: SpaceMapping::Identity,
            sampling: SamplingKind::LogSpaced,
        };
        let (img, depth) = render_image(&field, &intr, &cam, &params);
        for (_, _, px) in img.pixels() {
            for c in px {
                assert!(c.abs() < 1e-20);
            }
        }
        assert!(depth.valid().pixels().all(|(_, _, v)| !v));

        let (img2, _) = render_image(&field, &intr, &cam, &params);
        assert_eq!(img.data(), img2.data());
    }
}
