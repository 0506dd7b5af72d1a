//! The radiance field: two small MLPs mapping an encoded position to
//! density plus a geometry feature, and the feature plus encoded view
//! direction to color. Parameters live in one flat buffer so the optimizer,
//! checkpoints and gradient buffers all share a single layout.
//!
//! Density is produced through a softplus and never sees the view
//! direction; color goes through a logistic, so outputs always satisfy
//! `sigma >= 0` and `color in [0,1]^3`.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldConfig {
    /// Hidden (ReLU) layers in the density MLP.
    pub density_layers: usize,
    pub density_width: usize,
    /// Hidden (ReLU) layers in the color MLP.
    pub color_layers: usize,
    pub color_width: usize,
    /// Width of the geometry feature passed from the density to the color MLP.
    pub feature_dim: usize,
    pub levels_position: usize,
    pub levels_direction: usize,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            density_layers: 4,
            density_width: 128,
            color_layers: 2,
            color_width: 64,
            feature_dim: 64,
            levels_position: 8,
            levels_direction: 2,
            seed: 0,
        }
    }
}

impl FieldConfig {
    pub fn encoded_position_dim(&self) -> usize {
        3 + 6 * self.levels_position
    }

    pub fn encoded_direction_dim(&self) -> usize {
        3 + 6 * self.levels_direction
    }
}

/// One linear layer's slice of the flat parameter buffer.
#[derive(Debug, Clone, Copy)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w_off: usize,
    pub b_off: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOutput {
    pub color: [f64; 3],
    pub density: f64,
}

/// Upstream gradient of a scalar loss with respect to a [`FieldOutput`].
#[derive(Debug, Clone, Copy, Default)]
pub struct OutputGrad {
    pub d_color: [f64; 3],
    pub d_density: f64,
}

/// Gradients of the loss with respect to the evaluation inputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct InputGrad {
    pub d_position: Vector3<f64>,
    pub d_direction: Vector3<f64>,
}

/// NeRF-style frequency encoding: `[v, sin(2^0 pi v), cos(2^0 pi v), ...,
/// sin(2^{L-1} pi v), cos(2^{L-1} pi v)]`, length `3 + 6 L`.
pub fn positional_encode(v: &Vector3<f64>, levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * levels);
    encode_into(v, levels, &mut out);
    out
}

fn encode_into(v: &Vector3<f64>, levels: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(&[v.x, v.y, v.z]);
    let mut freq = std::f64::consts::PI;
    for _ in 0..levels {
        for i in 0..3 {
            out.push((freq * v[i]).sin());
        }
        for i in 0..3 {
            out.push((freq * v[i]).cos());
        }
        freq *= 2.0;
    }
}

/// Pull a gradient over the encoding back to the raw 3-vector.
fn encode_backward(v: &Vector3<f64>, levels: usize, d_enc: &[f64]) -> Vector3<f64> {
    let mut g = Vector3::new(d_enc[0], d_enc[1], d_enc[2]);
    let mut freq = std::f64::consts::PI;
    for l in 0..levels {
        let base = 3 + 6 * l;
        for i in 0..3 {
            let arg = freq * v[i];
            g[i] += freq * (arg.cos() * d_enc[base + i] - arg.sin() * d_enc[base + 3 + i]);
        }
        freq *= 2.0;
    }
    g
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Activations recorded by a traced evaluation; reused across samples to
/// keep the training loop allocation-free.
#[derive(Debug, Clone, Default)]
pub struct EvalTrace {
    position: Vector3<f64>,
    direction: Vector3<f64>,
    /// Input of each density linear, then the head output.
    density_acts: Vec<Vec<f64>>,
    color_acts: Vec<Vec<f64>>,
    enc_dir: Vec<f64>,
    sigma_raw: f64,
    logits: [f64; 3],
    color: [f64; 3],
}

/// Reusable buffers for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct FieldScratch {
    dy: Vec<f64>,
    dx: Vec<f64>,
    d_color_in: Vec<f64>,
    d_enc_pos: Vec<f64>,
    d_head: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RadianceField {
    cfg: FieldConfig,
    params: Vec<f64>,
    density_specs: Vec<LayerSpec>,
    color_specs: Vec<LayerSpec>,
}

fn build_specs(dims: &[(usize, usize)], offset: &mut usize) -> Vec<LayerSpec> {
    dims.iter()
        .map(|&(in_dim, out_dim)| {
            let w_off = *offset;
            let b_off = w_off + in_dim * out_dim;
            *offset = b_off + out_dim;
            LayerSpec {
                in_dim,
                out_dim,
                w_off,
                b_off,
            }
        })
        .collect()
}

impl RadianceField {
    pub fn new(cfg: FieldConfig) -> Self {
        assert!(cfg.density_layers >= 1 && cfg.color_layers >= 1);
        assert!(cfg.feature_dim >= 1);
        let mut density_dims = vec![(cfg.encoded_position_dim(), cfg.density_width)];
        for _ in 1..cfg.density_layers {
            density_dims.push((cfg.density_width, cfg.density_width));
        }
        density_dims.push((cfg.density_width, 1 + cfg.feature_dim));

        let color_in = cfg.feature_dim + cfg.encoded_direction_dim();
        let mut color_dims = vec![(color_in, cfg.color_width)];
        for _ in 1..cfg.color_layers {
            color_dims.push((cfg.color_width, cfg.color_width));
        }
        color_dims.push((cfg.color_width, 3));

        let mut offset = 0;
        let density_specs = build_specs(&density_dims, &mut offset);
        let color_specs = build_specs(&color_dims, &mut offset);

        let mut params = vec![0.0; offset];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for spec in density_specs.iter().chain(color_specs.iter()) {
            let bound = (6.0 / spec.in_dim as f64).sqrt();
            for w in &mut params[spec.w_off..spec.w_off + spec.in_dim * spec.out_dim] {
                *w = rng.random_range(-bound..bound);
            }
        }

        Self {
            cfg,
            params,
            density_specs,
            color_specs,
        }
    }

    pub fn config(&self) -> &FieldConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.params.len());
        self.params.copy_from_slice(values);
    }

    pub fn density_layout(&self) -> &[LayerSpec] {
        &self.density_specs
    }

    pub fn color_layout(&self) -> &[LayerSpec] {
        &self.color_specs
    }

    /// Parameter index range owned by the color MLP.
    pub fn color_param_range(&self) -> std::ops::Range<usize> {
        let first = self.color_specs[0].w_off;
        first..self.params.len()
    }

    fn linear(&self, spec: &LayerSpec, x: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), spec.in_dim);
        out.clear();
        out.extend_from_slice(&self.params[spec.b_off..spec.b_off + spec.out_dim]);
        for (o, acc) in out.iter_mut().enumerate() {
            let row = &self.params[spec.w_off + o * spec.in_dim..spec.w_off + (o + 1) * spec.in_dim];
            let mut s = 0.0;
            for (w, xi) in row.iter().zip(x.iter()) {
                s += w * xi;
            }
            *acc += s;
        }
    }

    /// Evaluate the field; `x` is the (already space-mapped) sample position
    /// and `dir` the unit view direction.
    pub fn eval(&self, x: &Vector3<f64>, dir: &Vector3<f64>) -> FieldOutput {
        let mut trace = EvalTrace::default();
        self.eval_traced(x, dir, &mut trace)
    }

    /// Evaluate while recording activations for a later [`Self::backward`].
    pub fn eval_traced(
        &self,
        x: &Vector3<f64>,
        dir: &Vector3<f64>,
        trace: &mut EvalTrace,
    ) -> FieldOutput {
        trace.position = *x;
        trace.direction = *dir;
        let n_density = self.density_specs.len() + 1;
        let n_color = self.color_specs.len() + 1;
        trace.density_acts.resize(n_density, Vec::new());
        trace.color_acts.resize(n_color, Vec::new());

        encode_into(x, self.cfg.levels_position, &mut trace.density_acts[0]);
        for (i, spec) in self.density_specs.iter().enumerate() {
            let (head, tail) = trace.density_acts.split_at_mut(i + 1);
            self.linear(spec, &head[i], &mut tail[0]);
            if i + 1 < self.density_specs.len() {
                for v in tail[0].iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        let head_out = trace.density_acts.last().unwrap();
        trace.sigma_raw = head_out[0];
        let density = softplus(trace.sigma_raw);

        // color input: geometry feature, then the encoded direction
        {
            encode_into(dir, self.cfg.levels_direction, &mut trace.enc_dir);
            let feature = &trace.density_acts[self.density_specs.len()][1..];
            let mut color_in = std::mem::take(&mut trace.color_acts[0]);
            color_in.clear();
            color_in.extend_from_slice(feature);
            color_in.extend_from_slice(&trace.enc_dir);
            trace.color_acts[0] = color_in;
        }
        for (i, spec) in self.color_specs.iter().enumerate() {
            let (head, tail) = trace.color_acts.split_at_mut(i + 1);
            self.linear(spec, &head[i], &mut tail[0]);
            if i + 1 < self.color_specs.len() {
                for v in tail[0].iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        let logits = trace.color_acts.last().unwrap();
        trace.logits = [logits[0], logits[1], logits[2]];
        trace.color = [
            sigmoid(logits[0]),
            sigmoid(logits[1]),
            sigmoid(logits[2]),
        ];

        FieldOutput {
            color: trace.color,
            density,
        }
    }

    fn linear_backward(
        &self,
        spec: &LayerSpec,
        x: &[f64],
        dy: &[f64],
        grads: &mut [f64],
        dx: &mut Vec<f64>,
    ) {
        dx.clear();
        dx.resize(spec.in_dim, 0.0);
        for (o, &d) in dy.iter().enumerate() {
            grads[spec.b_off + o] += d;
            if d == 0.0 {
                continue;
            }
            let w_row = &self.params[spec.w_off + o * spec.in_dim..spec.w_off + (o + 1) * spec.in_dim];
            let g_row =
                &mut grads[spec.w_off + o * spec.in_dim..spec.w_off + (o + 1) * spec.in_dim];
            for i in 0..spec.in_dim {
                g_row[i] += d * x[i];
                dx[i] += d * w_row[i];
            }
        }
    }

    /// Walk one MLP in reverse; leaves the gradient of the MLP input in
    /// `scratch.dy`.
    fn mlp_backward(
        &self,
        specs: &[LayerSpec],
        acts: &[Vec<f64>],
        dy_out: &[f64],
        grads: &mut [f64],
        scratch: &mut FieldScratch,
    ) {
        scratch.dy.clear();
        scratch.dy.extend_from_slice(dy_out);
        for (i, spec) in specs.iter().enumerate().rev() {
            self.linear_backward(spec, &acts[i], &scratch.dy, grads, &mut scratch.dx);
            if i > 0 {
                // ReLU: the stored input of this layer is the post-activation
                for (g, &a) in scratch.dx.iter_mut().zip(acts[i].iter()) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            std::mem::swap(&mut scratch.dy, &mut scratch.dx);
        }
    }

    /// Exact reverse-mode gradients of `upstream . output` with respect to
    /// every parameter, accumulated into `grads` (same layout and length as
    /// [`Self::params`]). Also returns the gradient with respect to the
    /// inputs for pose refinement and smoothness terms.
    pub fn backward(
        &self,
        trace: &EvalTrace,
        upstream: &OutputGrad,
        grads: &mut [f64],
        scratch: &mut FieldScratch,
    ) -> InputGrad {
        assert_eq!(grads.len(), self.params.len());

        // color head: logistic
        let mut d_logits = [0.0; 3];
        for c in 0..3 {
            let s = trace.color[c];
            d_logits[c] = upstream.d_color[c] * s * (1.0 - s);
        }
        self.mlp_backward(
            &self.color_specs,
            &trace.color_acts,
            &d_logits,
            grads,
            scratch,
        );
        std::mem::swap(&mut scratch.dy, &mut scratch.d_color_in);

        // density head: softplus on slot 0, feature gradient from the color input
        let d_sigma_raw = upstream.d_density * sigmoid(trace.sigma_raw);
        scratch.d_head.clear();
        scratch.d_head.push(d_sigma_raw);
        scratch
            .d_head
            .extend_from_slice(&scratch.d_color_in[..self.cfg.feature_dim]);
        let d_head = std::mem::take(&mut scratch.d_head);
        self.mlp_backward(
            &self.density_specs,
            &trace.density_acts,
            &d_head,
            grads,
            scratch,
        );
        scratch.d_head = d_head;
        std::mem::swap(&mut scratch.dy, &mut scratch.d_enc_pos);

        let d_position =
            encode_backward(&trace.position, self.cfg.levels_position, &scratch.d_enc_pos);
        let d_direction = encode_backward(
            &trace.direction,
            self.cfg.levels_direction,
            &scratch.d_color_in[self.cfg.feature_dim..],
        );
        InputGrad {
            d_position,
            d_direction,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn tiny_config() -> FieldConfig {
        FieldConfig {
            density_layers: 2,
            density_width: 8,
            color_layers: 1,
            color_width: 8,
            feature_dim: 4,
            levels_position: 2,
            levels_direction: 1,
            seed: 7,
        }
    }

    #[test]
    fn encode_zero_vector() {
        let e = positional_encode(&Vector3::zeros(), 2);
        let expected = [
            0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0,
        ];
        assert_eq!(e.len(), expected.len());
        for (a, b) in e.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn encode_no_levels_is_raw() {
        let v = Vector3::new(0.3, -0.7, 2.0);
        assert_eq!(positional_encode(&v, 0), vec![0.3, -0.7, 2.0]);
    }

    #[test]
    fn encode_half_hits_unit_sine() {
        let e = positional_encode(&Vector3::new(0.5, 0.0, 0.0), 1);
        assert_abs_diff_eq!(e[3], 1.0, epsilon = 1e-15); // sin(pi/2)
        assert_abs_diff_eq!(e[6], 0.0, epsilon = 1e-12); // cos(pi/2)
        assert_abs_diff_eq!(e[7], 1.0, epsilon = 1e-15); // cos(0)
    }

    #[test]
    fn zeroed_heads_give_activation_fixpoints() {
        let mut field = RadianceField::new(tiny_config());
        let d_head = *field.density_layout().last().unwrap();
        let c_head = *field.color_layout().last().unwrap();
        for spec in [d_head, c_head] {
            for p in &mut field.params_mut()[spec.w_off..spec.w_off + spec.in_dim * spec.out_dim] {
                *p = 0.0;
            }
            for p in &mut field.params_mut()[spec.b_off..spec.b_off + spec.out_dim] {
                *p = 0.0;
            }
        }
        let out = field.eval(&Vector3::new(0.2, -0.3, 0.9), &Vector3::z());
        assert_abs_diff_eq!(out.density, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(out.color, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn density_ignores_view_direction() {
        let field = RadianceField::new(tiny_config());
        let x = Vector3::new(0.4, 0.1, -0.2);
        let a = field.eval(&x, &Vector3::z());
        let b = field.eval(&x, &Vector3::new(0.6, -0.64, 0.48).normalize());
        assert_eq!(a.density, b.density); // exact: no dependency path
    }

    #[test]
    fn density_direction_invariance_fuzz() {
        let field = RadianceField::new(tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..1000 {
            let x = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let d1 = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let d2 = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            assert_eq!(field.eval(&x, &d1).density, field.eval(&x, &d2).density);
        }
    }

    #[test]
    fn outputs_respect_activation_ranges() {
        let cfg = tiny_config();
        let mut field = RadianceField::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        // scramble parameters well outside the init range
        for p in field.params_mut() {
            *p = rng.random_range(-20.0..20.0);
        }
        for _ in 0..200 {
            let x = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let out = field.eval(&x, &Vector3::z());
            assert!(out.density >= 0.0);
            for c in out.color {
                assert!((0.0..=1.0).contains(&c));
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = RadianceField::new(tiny_config());
        let b = RadianceField::new(tiny_config());
        assert_eq!(a.params(), b.params());
        let x = Vector3::new(0.3, 0.25, -0.5);
        let d = Vector3::new(0.0, 0.6, 0.8);
        let oa = a.eval(&x, &d);
        let ob = b.eval(&x, &d);
        assert_eq!(oa.density.to_bits(), ob.density.to_bits());
        for c in 0..3 {
            assert_eq!(oa.color[c].to_bits(), ob.color[c].to_bits());
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let field = RadianceField::new(tiny_config());
        let mut trace = EvalTrace::default();
        field.eval_traced(&Vector3::new(0.1, 0.2, 0.3), &Vector3::z(), &mut trace);
        let mut grads = vec![0.0; field.param_count()];
        let mut scratch = FieldScratch::default();
        let ig = field.backward(&trace, &OutputGrad::default(), &mut grads, &mut scratch);
        assert!(grads.iter().all(|&g| g == 0.0));
        assert_eq!(ig.d_position, Vector3::zeros());
        assert_eq!(ig.d_direction, Vector3::zeros());
    }

    #[test]
    fn density_gradient_avoids_color_parameters() {
        let field = RadianceField::new(tiny_config());
        let mut trace = EvalTrace::default();
        field.eval_traced(&Vector3::new(0.1, -0.2, 0.3), &Vector3::z(), &mut trace);
        let mut grads = vec![0.0; field.param_count()];
        let mut scratch = FieldScratch::default();
        field.backward(
            &trace,
            &OutputGrad {
                d_color: [0.0; 3],
                d_density: 1.0,
            },
            &mut grads,
            &mut scratch,
        );
        assert!(grads[field.color_param_range()].iter().all(|&g| g == 0.0));
        assert!(grads.iter().any(|&g| g != 0.0));
    }

    fn grad_check(upstream: OutputGrad) {
        let field = RadianceField::new(tiny_config());
        let x = Vector3::new(0.35, -0.15, 0.55);
        let dir = Vector3::new(0.2, 0.3, 0.933).normalize();
        let loss = |f: &RadianceField| {
            let o = f.eval(&x, &dir);
            upstream.d_density * o.density
                + upstream.d_color[0] * o.color[0]
                + upstream.d_color[1] * o.color[1]
                + upstream.d_color[2] * o.color[2]
        };
        let mut trace = EvalTrace::default();
        field.eval_traced(&x, &dir, &mut trace);
        let mut grads = vec![0.0; field.param_count()];
        let mut scratch = FieldScratch::default();
        let ig = field.backward(&trace, &upstream, &mut grads, &mut scratch);

        let h = 1e-5;
        let mut probe = field.clone();
        for i in 0..field.param_count() {
            let orig = field.params()[i];
            probe.params_mut()[i] = orig + h;
            let lp = loss(&probe);
            probe.params_mut()[i] = orig - h;
            let lm = loss(&probe);
            probe.params_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(grads[i].abs()).max(1e-8);
            assert!(
                (fd - grads[i]).abs() / denom < 1e-4,
                "param {i}: fd {fd} analytic {}",
                grads[i]
            );
        }

        // input gradients through encoding and activations
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = ((|| {
                let o = field.eval(&xp, &dir);
                upstream.d_density * o.density
                    + (0..3).map(|c| upstream.d_color[c] * o.color[c]).sum::<f64>()
            })() - (|| {
                let o = field.eval(&xm, &dir);
                upstream.d_density * o.density
                    + (0..3).map(|c| upstream.d_color[c] * o.color[c]).sum::<f64>()
            })()) / (2.0 * h);
            let denom = fd.abs().max(ig.d_position[i].abs()).max(1e-8);
            assert!(
                (fd - ig.d_position[i]).abs() / denom < 1e-4,
                "d_position[{i}]: fd {fd} analytic {}",
                ig.d_position[i]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        grad_check(OutputGrad {
            d_color: [0.7, -0.4, 1.3],
            d_density: 0.9,
        });
        grad_check(OutputGrad {
            d_color: [0.0; 3],
            d_density: 1.0,
        });
    }
}
