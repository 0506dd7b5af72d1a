//! Flat key-value run configuration: a diff-friendly text file plus
//! `--set key=value` overrides. Every key has a default; unknown keys are
//! rejected before any command touches its outputs.

use std::fmt::Write as _;
use std::path::Path;

use crate::field::FieldConfig;
use crate::train::{SceneMode, TrainConfig};

#[derive(Debug, thiserror::Error)]
#[error("config: {0}")]
pub struct ConfigError(pub String);

/// Which depth supervision the training stage consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthSource {
    /// Densified (and possibly corrupted) fusion output.
    Dense,
    /// Sparse splat after outlier removal, no densification.
    Sparse,
    /// Oracle ground-truth depth.
    Gt,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub mode: SceneMode,

    // built-in scene generation
    pub gen_width: usize,
    pub gen_height: usize,
    pub gen_frames: usize,
    pub gen_lidar_noise: f64,
    pub gen_lidar_dropout: f64,

    // fusion
    pub fuse_window: usize,
    pub fuse_flow_threshold: f64,
    pub fuse_densify_k: usize,
    pub fuse_densify_sigma_c: f64,
    pub fuse_corrupt_sigma: f64,
    pub fuse_corrupt_rate: f64,
    pub fuse_corrupt_scale: f64,

    // confidence
    pub conf_components: Vec<String>,
    pub conf_tau: f64,
    pub conf_use_gt_depth: bool,

    // training
    pub train_iterations: usize,
    pub train_batch_rays: usize,
    pub train_lr_start: f64,
    pub train_lr_end: f64,
    pub train_warmup: usize,
    pub train_lambda_depth: Option<f64>,
    pub train_lambda_smooth: Option<f64>,
    pub train_n_samples: Option<usize>,
    pub train_radius: f64,
    pub train_holdout_stride: usize,
    pub train_density_layers: usize,
    pub train_density_width: usize,
    pub train_color_layers: usize,
    pub train_color_width: usize,
    pub train_feature_dim: usize,
    pub train_l_pos: usize,
    pub train_l_dir: usize,
    pub train_smooth_patch: usize,
    pub train_patches_per_step: usize,
    pub train_pose_refine: bool,
    pub train_rgb_only: bool,
    pub train_depth_source: DepthSource,
    pub train_use_confidence: bool,
    pub train_log_every: usize,
    pub train_object: usize,

    // ablation
    pub ablate_seeds: usize,
    pub ablate_taus: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            threads: 0,
            mode: SceneMode::Background,
            gen_width: 96,
            gen_height: 64,
            gen_frames: 5,
            gen_lidar_noise: 0.0,
            gen_lidar_dropout: 0.0,
            fuse_window: 7,
            fuse_flow_threshold: 0.2,
            fuse_densify_k: 16,
            fuse_densify_sigma_c: 0.1,
            fuse_corrupt_sigma: 0.0,
            fuse_corrupt_rate: 0.0,
            fuse_corrupt_scale: 1.0,
            conf_components: ["rgb", "ssim", "feature", "depth", "flow"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            conf_tau: 0.2,
            conf_use_gt_depth: false,
            train_iterations: 1000,
            train_batch_rays: 512,
            train_lr_start: 5e-4,
            train_lr_end: 5e-6,
            train_warmup: 50,
            train_lambda_depth: None,
            train_lambda_smooth: None,
            train_n_samples: None,
            train_radius: 3.0,
            train_holdout_stride: 5,
            train_density_layers: 4,
            train_density_width: 128,
            train_color_layers: 2,
            train_color_width: 64,
            train_feature_dim: 64,
            train_l_pos: 8,
            train_l_dir: 2,
            train_smooth_patch: 8,
            train_patches_per_step: 1,
            train_pose_refine: true,
            train_rgb_only: false,
            train_depth_source: DepthSource::Dense,
            train_use_confidence: true,
            train_log_every: 10,
            train_object: 0,
            ablate_seeds: 3,
            ablate_taus: vec![],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| ConfigError(format!("invalid value `{value}` for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError(format!(
            "invalid boolean `{value}` for key `{key}`"
        ))),
    }
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "mode" => {
                self.mode = match value {
                    "background" => SceneMode::Background,
                    "foreground" => SceneMode::Foreground,
                    _ => {
                        return Err(ConfigError(format!(
                            "mode must be background|foreground, got `{value}`"
                        )))
                    }
                }
            }
            "gen.width" => self.gen_width = parse(key, value)?,
            "gen.height" => self.gen_height = parse(key, value)?,
            "gen.frames" => self.gen_frames = parse(key, value)?,
            "gen.lidar_noise" => self.gen_lidar_noise = parse(key, value)?,
            "gen.lidar_dropout" => self.gen_lidar_dropout = parse(key, value)?,
            "fuse.window" => self.fuse_window = parse(key, value)?,
            "fuse.flow_threshold" => self.fuse_flow_threshold = parse(key, value)?,
            "fuse.densify_k" => self.fuse_densify_k = parse(key, value)?,
            "fuse.densify_sigma_c" => self.fuse_densify_sigma_c = parse(key, value)?,
            "fuse.corrupt_sigma" => self.fuse_corrupt_sigma = parse(key, value)?,
            "fuse.corrupt_rate" => self.fuse_corrupt_rate = parse(key, value)?,
            "fuse.corrupt_scale" => self.fuse_corrupt_scale = parse(key, value)?,
            "conf.components" => {
                let comps: Vec<String> =
                    value.split(',').map(|s| s.trim().to_string()).collect();
                for c in &comps {
                    if !["rgb", "ssim", "feature", "depth", "flow"].contains(&c.as_str()) {
                        return Err(ConfigError(format!("unknown confidence component `{c}`")));
                    }
                }
                if comps.is_empty() {
                    return Err(ConfigError("conf.components must not be empty".into()));
                }
                self.conf_components = comps;
            }
            "conf.tau" => self.conf_tau = parse(key, value)?,
            "conf.use_gt_depth" => self.conf_use_gt_depth = parse_bool(key, value)?,
            "train.iterations" => self.train_iterations = parse(key, value)?,
            "train.batch_rays" => self.train_batch_rays = parse(key, value)?,
            "train.lr_start" => self.train_lr_start = parse(key, value)?,
            "train.lr_end" => self.train_lr_end = parse(key, value)?,
            "train.warmup" => self.train_warmup = parse(key, value)?,
            "train.lambda_depth" => self.train_lambda_depth = Some(parse(key, value)?),
            "train.lambda_smooth" => self.train_lambda_smooth = Some(parse(key, value)?),
            "train.n_samples" => self.train_n_samples = Some(parse(key, value)?),
            "train.radius" => self.train_radius = parse(key, value)?,
            "train.holdout_stride" => self.train_holdout_stride = parse(key, value)?,
            "train.density_layers" => self.train_density_layers = parse(key, value)?,
            "train.density_width" => self.train_density_width = parse(key, value)?,
            "train.color_layers" => self.train_color_layers = parse(key, value)?,
            "train.color_width" => self.train_color_width = parse(key, value)?,
            "train.feature_dim" => self.train_feature_dim = parse(key, value)?,
            "train.l_pos" => self.train_l_pos = parse(key, value)?,
            "train.l_dir" => self.train_l_dir = parse(key, value)?,
            "train.smooth_patch" => self.train_smooth_patch = parse(key, value)?,
            "train.patches_per_step" => self.train_patches_per_step = parse(key, value)?,
            "train.pose_refine" => self.train_pose_refine = parse_bool(key, value)?,
            "train.rgb_only" => self.train_rgb_only = parse_bool(key, value)?,
            "train.depth_source" => {
                self.train_depth_source = match value {
                    "dense" => DepthSource::Dense,
                    "sparse" => DepthSource::Sparse,
                    "gt" => DepthSource::Gt,
                    _ => {
                        return Err(ConfigError(format!(
                            "train.depth_source must be dense|sparse|gt, got `{value}`"
                        )))
                    }
                }
            }
            "train.use_confidence" => self.train_use_confidence = parse_bool(key, value)?,
            "train.log_every" => self.train_log_every = parse(key, value)?,
            "train.object" => self.train_object = parse(key, value)?,
            "ablate.seeds" => self.ablate_seeds = parse(key, value)?,
            "ablate.taus" => {
                self.ablate_taus = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse::<f64>(key, s.trim()))
                    .collect::<Result<_, _>>()?;
            }
            _ => return Err(ConfigError(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Load `key = value` lines; `#` starts a comment.
    pub fn load_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError(format!(
                    "{}:{}: expected `key = value`",
                    path.display(),
                    idx + 1
                ))
            })?;
            self.apply(key.trim(), value.trim())
                .map_err(|e| ConfigError(format!("{}:{}: {}", path.display(), idx + 1, e.0)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError(msg.to_string()))
            }
        };
        check(self.gen_width >= 8 && self.gen_height >= 8, "gen image too small")?;
        check(self.gen_frames >= 1, "gen.frames must be >= 1")?;
        check(
            self.fuse_flow_threshold > 0.0 && self.fuse_flow_threshold <= 1.0,
            "fuse.flow_threshold must lie in (0, 1]",
        )?;
        check(self.fuse_window >= 1, "fuse.window must be >= 1")?;
        check(
            (0.0..1.0).contains(&self.fuse_corrupt_rate),
            "fuse.corrupt_rate must lie in [0, 1)",
        )?;
        check(self.conf_tau > 0.0, "conf.tau must be positive")?;
        check(self.train_radius > 0.0, "train.radius must be positive")?;
        check(
            self.train_lr_start >= self.train_lr_end && self.train_lr_end > 0.0,
            "learning rates must satisfy lr_start >= lr_end > 0",
        )?;
        check(self.train_batch_rays >= 1, "train.batch_rays must be >= 1")?;
        check(
            self.train_smooth_patch >= 2,
            "train.smooth_patch must be >= 2",
        )?;
        check(
            self.train_holdout_stride >= 2,
            "train.holdout_stride must be >= 2",
        )?;
        check(
            self.ablate_seeds >= 1,
            "ablate.seeds must be >= 1",
        )?;
        Ok(())
    }

    /// Resolve the training configuration, applying mode-dependent defaults
    /// for the loss weights and sample counts.
    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::for_mode(self.mode);
        if let Some(l1) = self.train_lambda_depth {
            cfg.lambda_depth = l1;
        }
        if let Some(l2) = self.train_lambda_smooth {
            cfg.lambda_smooth = l2;
        }
        if let Some(n) = self.train_n_samples {
            cfg.n_samples = n;
        }
        if self.train_rgb_only {
            cfg.lambda_depth = 0.0;
            cfg.lambda_smooth = 0.0;
        }
        cfg.tau = self.conf_tau;
        cfg.radius = self.train_radius;
        cfg.batch_rays = self.train_batch_rays;
        cfg.iterations = self.train_iterations;
        cfg.lr_start = self.train_lr_start;
        cfg.lr_end = self.train_lr_end;
        cfg.warmup_iters = self.train_warmup;
        cfg.seed = self.seed;
        cfg.smooth_patch = self.train_smooth_patch;
        cfg.patches_per_step = self.train_patches_per_step;
        cfg.pose_refine = self.train_pose_refine;
        cfg.field = FieldConfig {
            density_layers: self.train_density_layers,
            density_width: self.train_density_width,
            color_layers: self.train_color_layers,
            color_width: self.train_color_width,
            feature_dim: self.train_feature_dim,
            levels_position: self.train_l_pos,
            levels_direction: self.train_l_dir,
            seed: self.seed,
        };
        cfg
    }

    /// Render the effective configuration back out as key = value lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "threads = {}", self.threads);
        let _ = writeln!(
            s,
            "mode = {}",
            match self.mode {
                SceneMode::Background => "background",
                SceneMode::Foreground => "foreground",
            }
        );
        let _ = writeln!(s, "gen.width = {}", self.gen_width);
        let _ = writeln!(s, "gen.height = {}", self.gen_height);
        let _ = writeln!(s, "gen.frames = {}", self.gen_frames);
        let _ = writeln!(s, "fuse.window = {}", self.fuse_window);
        let _ = writeln!(s, "fuse.flow_threshold = {}", self.fuse_flow_threshold);
        let _ = writeln!(s, "fuse.corrupt_sigma = {}", self.fuse_corrupt_sigma);
        let _ = writeln!(s, "fuse.corrupt_rate = {}", self.fuse_corrupt_rate);
        let _ = writeln!(s, "fuse.corrupt_scale = {}", self.fuse_corrupt_scale);
        let _ = writeln!(s, "conf.components = {}", self.conf_components.join(","));
        let _ = writeln!(s, "conf.tau = {}", self.conf_tau);
        let _ = writeln!(s, "train.iterations = {}", self.train_iterations);
        let _ = writeln!(s, "train.batch_rays = {}", self.train_batch_rays);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply("no.such.key", "1").is_err());
    }

    #[test]
    fn mode_defaults_resolve() {
        let mut cfg = RunConfig::default();
        cfg.apply("mode", "background").unwrap();
        let t = cfg.train_config();
        assert_eq!(t.lambda_depth, 0.2);
        assert_eq!(t.lambda_smooth, 0.01);
        assert_eq!(t.n_samples, 128);
        cfg.apply("mode", "foreground").unwrap();
        let t = cfg.train_config();
        assert_eq!(t.lambda_depth, 1.0);
        assert_eq!(t.lambda_smooth, 0.15);
        assert_eq!(t.n_samples, 64);
    }

    #[test]
    fn rgb_only_zeroes_loss_weights() {
        let mut cfg = RunConfig::default();
        cfg.apply("train.rgb_only", "true").unwrap();
        let t = cfg.train_config();
        assert_eq!(t.lambda_depth, 0.0);
        assert_eq!(t.lambda_smooth, 0.0);
    }

    #[test]
    fn override_and_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nseed = 7\ntrain.iterations = 120\n").unwrap();
        let mut cfg = RunConfig::default();
        cfg.load_file(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train_iterations, 120);
        cfg.apply("train.iterations", "55").unwrap();
        assert_eq!(cfg.train_iterations, 55);
    }

    #[test]
    fn component_list_validated() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply("conf.components", "rgb,bogus").is_err());
        cfg.apply("conf.components", "rgb,ssim").unwrap();
        assert_eq!(cfg.conf_components, vec!["rgb", "ssim"]);
    }
}
