//! Pipeline commands behind the CLI: dataset generation, LiDAR fusion,
//! confidence computation, training, rendering/evaluation and the ablation
//! grid. Each command validates its configuration before touching outputs
//! and is byte-deterministic given identical inputs, seed and flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::config::{ConfigError, DepthSource, RunConfig};
use crate::confidence::{
    combine, compute_features, depth_confidence, flow_confidence, merge_min, rgb_confidence,
    ssim_confidence, warp_features, warp_image, ConfidenceMap, ConfidenceWeights,
};
use crate::depthfusion::{
    accumulate_lidar, densify_depth, lidar_flow, remove_flow_outliers, splat_indexed,
    DensifyParams, DepthMap, PointCloud,
};
use crate::geometry::{compose, pose_inverse, virtual_camera_pose, Pose};
use crate::io::{self, CheckpointMeta, IoError, Manifest};
use crate::raster::{Grid, Image, Mask};
use crate::render::{render_image, ImageRenderParams, SamplingKind};
use crate::rng::CounterRng;
use crate::scenegen::{
    corrupt_depth, oracle_flow, render_oracle, simulate_lidar, street_toy, SceneOracle,
};
use crate::train::{
    psnr, ssim_metric, train, SceneMode, StepStats, TrainError, TrainSet, TrainState, TrainView,
};

/// Command failures sorted by exit code: config/usage (1), missing or
/// malformed inputs (2), numeric failures (3).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::EmptySampleSet => CliError::Input(e.to_string()),
        }
    }
}

fn view_stem(frame: usize, cam: usize) -> String {
    format!("f{frame:03}_c{cam}")
}

/// Resolve a scene source: `builtin:street-toy` or a scene file path.
pub fn load_scene(source: &str, cfg: &RunConfig) -> Result<SceneOracle, CliError> {
    if let Some(name) = source.strip_prefix("builtin:") {
        if name != "street-toy" {
            return Err(CliError::Config(format!("unknown builtin scene `{name}`")));
        }
        let mut scene = street_toy(cfg.gen_width, cfg.gen_height, cfg.gen_frames, cfg.seed);
        scene.lidar_spec.noise_sigma = cfg.gen_lidar_noise;
        scene.lidar_spec.dropout = cfg.gen_lidar_dropout;
        scene
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(scene)
    } else {
        let mut scene = io::read_scene(Path::new(source))?;
        scene.seed = cfg.seed;
        Ok(scene)
    }
}

/// Generate a dataset: images, ground-truth depth, dynamic masks, optical
/// flows to the adjacent frames, LiDAR sweeps with out-of-band labels, and
/// the manifest tying it together.
pub fn cmd_gen(scene_source: &str, out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let scene = load_scene(scene_source, cfg)?;
    for sub in ["images", "depth_gt", "dynmask", "flows", "lidar"] {
        io::create_dir_all(&out.join(sub))?;
    }
    io::write_scene(&out.join("scene.txt"), &scene)?;

    let n_cams = scene.cameras.len();
    let mut manifest = Manifest {
        frames: scene.frames,
        cameras: scene.cameras.iter().map(|c| c.intrinsics).collect(),
        poses: Vec::new(),
        lidar_poses: Vec::new(),
        images: BTreeMap::new(),
        depth_gt: BTreeMap::new(),
        dynmask: BTreeMap::new(),
        flows: BTreeMap::new(),
        lidar: BTreeMap::new(),
        lidar_labels: BTreeMap::new(),
        objects: scene
            .dynamic_objects
            .iter()
            .map(|o| {
                let he = match o.shape {
                    crate::scenegen::Shape::Box { half_extents } => half_extents,
                    crate::scenegen::Shape::Sphere { radius } => {
                        Vector3::new(radius, radius, radius)
                    }
                    crate::scenegen::Shape::Rect { half_u, half_v } => {
                        Vector3::new(half_u, half_v, 0.05)
                    }
                };
                (he, o.poses.clone())
            })
            .collect(),
        near: scene.near,
        far: scene.far,
        seed: scene.seed,
    };

    for frame in 0..scene.frames {
        let mut row = Vec::with_capacity(n_cams);
        for cam in 0..n_cams {
            let pose = scene
                .camera_pose(frame, cam)
                .map_err(|e| CliError::Input(e.to_string()))?;
            row.push(pose);
            let view = render_oracle(&scene, frame, cam)
                .map_err(|e| CliError::Input(e.to_string()))?;
            let stem = view_stem(frame, cam);
            let img_path = PathBuf::from(format!("images/{stem}.png"));
            io::write_image_png(&out.join(&img_path), &view.image)?;
            manifest.images.insert((frame, cam), img_path);
            io::write_depth(&out.join("depth_gt"), &stem, &view.depth)?;
            manifest
                .depth_gt
                .insert((frame, cam), PathBuf::from(format!("depth_gt/{stem}.pfm")));
            let mask_path = PathBuf::from(format!("dynmask/{stem}.png"));
            io::write_index_png(&out.join(&mask_path), &view.dynamic)?;
            manifest.dynmask.insert((frame, cam), mask_path);

            // flows to the two adjacent frames each side; the extra pair
            // gives the fusion stage a visible target wherever the moving
            // object occludes the nearest neighbour
            for target in [
                frame.wrapping_sub(2),
                frame.wrapping_sub(1),
                frame + 1,
                frame + 2,
            ] {
                if target >= scene.frames {
                    continue;
                }
                let flow = oracle_flow(&scene, frame, cam, target, cam)
                    .map_err(|e| CliError::Input(e.to_string()))?;
                let flow_path =
                    PathBuf::from(format!("flows/f{frame:03}_c{cam}_to_f{target:03}.pfm"));
                io::write_flow(&out.join(&flow_path), &flow)?;
                manifest.flows.insert((frame, cam, target), flow_path);
            }
        }
        manifest.poses.push(row);
        manifest.lidar_poses.push(
            scene
                .lidar_pose(frame)
                .map_err(|e| CliError::Input(e.to_string()))?,
        );

        let sweep = simulate_lidar(&scene, frame, &scene.lidar_spec)
            .map_err(|e| CliError::Input(e.to_string()))?;
        let ply_path = PathBuf::from(format!("lidar/f{frame:03}.ply"));
        io::write_ply(&out.join(&ply_path), &sweep.cloud)?;
        manifest.lidar.insert(frame, ply_path);
        let labels_path = PathBuf::from(format!("lidar/f{frame:03}.labels.txt"));
        io::write_labels(&out.join(&labels_path), &sweep.dynamic)?;
        manifest.lidar_labels.insert(frame, labels_path);
    }
    io::write_manifest(&out.join("manifest.txt"), &manifest)?;
    Ok(())
}

fn read_manifest_dir(dataset: &Path) -> Result<Manifest, CliError> {
    let path = dataset.join("manifest.txt");
    if !path.exists() {
        return Err(CliError::Input(format!(
            "missing manifest: {}",
            path.display()
        )));
    }
    Ok(io::read_manifest(&path)?)
}

/// Per-view and total removal statistics from the fusion stage.
#[derive(Debug, Clone, Default)]
pub struct FuseStats {
    pub splatted: usize,
    pub static_px: usize,
    pub dynamic_px: usize,
    pub removed_static: usize,
    pub removed_dynamic: usize,
}

#[derive(Debug, Clone, Default)]
pub struct FuseReport {
    pub per_view: Vec<((usize, usize), FuseStats)>,
    pub total: FuseStats,
}

/// Accumulate neighbour sweeps, splat, reject flow-inconsistent points and
/// densify. Writes sparse and dense maps plus the removal report.
pub fn cmd_fuse(dataset: &Path, out: Option<&Path>, cfg: &RunConfig) -> Result<FuseReport, CliError> {
    cfg.validate()?;
    let manifest = read_manifest_dir(dataset)?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dataset.join("fused"));
    io::create_dir_all(&out.join("sparse"))?;
    io::create_dir_all(&out.join("dense"))?;
    if crate::cli::corruption_enabled(cfg) {
        io::create_dir_all(&out.join("outliers"))?;
    }

    // load all sweeps once
    let mut sweeps = Vec::with_capacity(manifest.frames);
    let mut labels = Vec::with_capacity(manifest.frames);
    for f in 0..manifest.frames {
        let ply = manifest
            .lidar
            .get(&f)
            .ok_or_else(|| CliError::Input(format!("manifest lacks lidar for frame {f}")))?;
        sweeps.push(io::read_ply(&dataset.join(ply), manifest.lidar_poses[f])?);
        let lab = manifest
            .lidar_labels
            .get(&f)
            .ok_or_else(|| CliError::Input(format!("manifest lacks labels for frame {f}")))?;
        labels.push(io::read_labels(&dataset.join(lab))?);
    }

    let mut report = FuseReport::default();
    let densify_params = DensifyParams {
        k: cfg.fuse_densify_k,
        sigma_c: cfg.fuse_densify_sigma_c,
    };
    let half = cfg.fuse_window / 2;
    for f in 0..manifest.frames {
        let lo = f.saturating_sub(half);
        let hi = (f + half).min(manifest.frames - 1);
        let window: Vec<PointCloud> = (lo..=hi).map(|i| sweeps[i].clone()).collect();
        // labels aligned with the concatenated accumulation order
        let mut point_labels = Vec::new();
        for i in lo..=hi {
            point_labels.extend_from_slice(&labels[i]);
        }
        let cloud = accumulate_lidar(&window, &Pose::identity());

        for cam in 0..manifest.cameras.len() {
            let intr = manifest.cameras[cam];
            let cam_pose = manifest.poses[f][cam];
            let (sparse, index) = splat_indexed(&cloud, &intr, &cam_pose);

            // flow consistency against every target the manifest lists for
            // this view; any valid comparison may reject a pixel (the op
            // only invalidates, so sequential application composes)
            let mut filtered = sparse.clone();
            let mut targets: Vec<usize> = manifest
                .flows
                .keys()
                .filter(|&&(fs, fc, _)| fs == f && fc == cam)
                .map(|&(_, _, ft)| ft)
                .collect();
            targets.sort_unstable();
            if targets.is_empty() {
                return Err(CliError::Input(format!(
                    "manifest lists no optical flow for view {f}/{cam}"
                )));
            }
            for target in targets {
                let lflow =
                    lidar_flow(&cloud, &cam_pose, &manifest.poses[target][cam], &intr);
                let oflow = io::read_flow(&dataset.join(&manifest.flows[&(f, cam, target)]))?;
                filtered =
                    remove_flow_outliers(&filtered, &lflow, &oflow, cfg.fuse_flow_threshold);
            }

            let mut stats = FuseStats::default();
            for y in 0..sparse.height() {
                for x in 0..sparse.width() {
                    let Some(idx) = index.get(x, y) else { continue };
                    stats.splatted += 1;
                    let dynamic = point_labels[idx];
                    let removed = filtered.get(x, y).is_none();
                    if dynamic {
                        stats.dynamic_px += 1;
                        if removed {
                            stats.removed_dynamic += 1;
                        }
                    } else {
                        stats.static_px += 1;
                        if removed {
                            stats.removed_static += 1;
                        }
                    }
                }
            }

            let stem = view_stem(f, cam);
            io::write_depth(&out.join("sparse"), &stem, &filtered)?;

            let image = io::read_image_png(&dataset.join(&manifest.images[&(f, cam)]))?;
            let dense = densify_depth(&filtered, &image, &densify_params)
                .map_err(|e| CliError::Input(format!("view {f}/{cam}: {e}")))?;
            let dense = if corruption_enabled(cfg) {
                let rng = CounterRng::new(manifest.seed, 0xc0de + (f * 16 + cam) as u64);
                let corrupted = corrupt_depth(
                    &dense,
                    cfg.fuse_corrupt_sigma,
                    cfg.fuse_corrupt_rate,
                    cfg.fuse_corrupt_scale,
                    &rng,
                );
                io::write_mask_png(
                    &out.join("outliers").join(format!("{stem}.png")),
                    &corrupted.outliers,
                )?;
                corrupted.depth
            } else {
                dense
            };
            io::write_depth(&out.join("dense"), &stem, &dense)?;

            report.total.splatted += stats.splatted;
            report.total.static_px += stats.static_px;
            report.total.dynamic_px += stats.dynamic_px;
            report.total.removed_static += stats.removed_static;
            report.total.removed_dynamic += stats.removed_dynamic;
            report.per_view.push(((f, cam), stats));
        }
    }

    let mut text = String::from("fuse report v1\n");
    let _ = writeln!(text, "flow_threshold {}", cfg.fuse_flow_threshold);
    let _ = writeln!(text, "window {}", cfg.fuse_window);
    for ((f, c), s) in &report.per_view {
        let _ = writeln!(
            text,
            "view {f} {c} splatted {} static {} dynamic {} removed_static {} removed_dynamic {}",
            s.splatted, s.static_px, s.dynamic_px, s.removed_static, s.removed_dynamic
        );
    }
    let t = &report.total;
    let _ = writeln!(
        text,
        "total splatted {} static {} dynamic {} removed_static {} removed_dynamic {}",
        t.splatted, t.static_px, t.dynamic_px, t.removed_static, t.removed_dynamic
    );
    std::fs::write(out.join("report.txt"), text)
        .map_err(|e| CliError::Input(format!("cannot write report: {e}")))?;
    Ok(report)
}

pub fn corruption_enabled(cfg: &RunConfig) -> bool {
    cfg.fuse_corrupt_sigma > 0.0 || (cfg.fuse_corrupt_rate > 0.0 && cfg.fuse_corrupt_scale != 1.0)
}

fn load_view_depth(
    dataset: &Path,
    fused: &Path,
    manifest: &Manifest,
    source: DepthSource,
    frame: usize,
    cam: usize,
) -> Result<DepthMap, CliError> {
    let stem = view_stem(frame, cam);
    let map = match source {
        DepthSource::Dense => io::read_depth(&fused.join("dense"), &stem),
        DepthSource::Sparse => io::read_depth(&fused.join("sparse"), &stem),
        DepthSource::Gt => {
            let rel = manifest.depth_gt.get(&(frame, cam)).ok_or_else(|| {
                CliError::Input(format!("manifest lacks depth_gt for {frame}/{cam}"))
            })?;
            let dir = dataset.join(rel.parent().unwrap_or(Path::new("")));
            io::read_depth(&dir, rel.file_stem().unwrap().to_str().unwrap())
        }
    };
    map.map_err(|e| CliError::Input(format!("missing fused depth for view {frame}/{cam}: {e}")))
}

fn confidence_viz(map: &ConfidenceMap) -> Image {
    Image::from_fn(map.width(), map.height(), |x, y| {
        let v = map.get(x, y).unwrap_or(0.0);
        [v, v, v]
    })
}

/// Compute per-view confidence components against the adjacent frames and
/// their combination under the current (uniform) weights.
pub fn cmd_confidence(
    dataset: &Path,
    fused: Option<&Path>,
    out: Option<&Path>,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    cfg.validate()?;
    let manifest = read_manifest_dir(dataset)?;
    let fused_dir = fused
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dataset.join("fused"));
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dataset.join("conf"));
    let source = if cfg.conf_use_gt_depth {
        DepthSource::Gt
    } else {
        DepthSource::Dense
    };
    if source == DepthSource::Dense && !fused_dir.join("dense").exists() {
        return Err(CliError::Input(format!(
            "missing fused depths under {}; run the fuse command first",
            fused_dir.display()
        )));
    }
    for comp in &cfg.conf_components {
        io::create_dir_all(&out.join(comp))?;
    }
    io::create_dir_all(&out.join("combined"))?;

    // preload everything the cross-view checks need
    let mut images = BTreeMap::new();
    let mut depths = BTreeMap::new();
    for f in 0..manifest.frames {
        for c in 0..manifest.cameras.len() {
            images.insert(
                (f, c),
                io::read_image_png(&dataset.join(&manifest.images[&(f, c)]))?,
            );
            depths.insert(
                (f, c),
                load_view_depth(dataset, &fused_dir, &manifest, source, f, c)?,
            );
        }
    }

    let weights = ConfidenceWeights::uniform(cfg.conf_components.len());
    for f in 0..manifest.frames {
        for c in 0..manifest.cameras.len() {
            let intr = manifest.cameras[c];
            let cam_s = manifest.poses[f][c];
            let src_img = &images[&(f, c)];
            let src_depth = &depths[&(f, c)];
            let src_features = if cfg.conf_components.iter().any(|s| s == "feature") {
                Some(compute_features(src_img))
            } else {
                None
            };

            let mut merged: Vec<Option<ConfidenceMap>> =
                vec![None; cfg.conf_components.len()];
            for target in [f.checked_sub(1), Some(f + 1)].into_iter().flatten() {
                if target >= manifest.frames {
                    continue;
                }
                let cam_t = manifest.poses[target][c];
                let tgt_img = &images[&(target, c)];
                let tgt_depth = &depths[&(target, c)];
                let (warped, warp_valid) =
                    warp_image(tgt_img, src_depth, &cam_s, &cam_t, &intr);
                for (i, comp) in cfg.conf_components.iter().enumerate() {
                    let map = match comp.as_str() {
                        "rgb" => rgb_confidence(src_img, &warped, &warp_valid),
                        "ssim" => ssim_confidence(src_img, &warped, &warp_valid),
                        "feature" => {
                            let tgt_features = compute_features(tgt_img);
                            let warped_f = warp_features(
                                &tgt_features,
                                src_depth,
                                &cam_s,
                                &cam_t,
                                &intr,
                            );
                            crate::confidence::feature_confidence(
                                src_features.as_ref().expect("features computed"),
                                &warped_f,
                            )
                        }
                        "depth" => depth_confidence(
                            src_depth,
                            tgt_depth,
                            &cam_s,
                            &cam_t,
                            &intr,
                            cfg.conf_tau,
                        ),
                        "flow" => {
                            let flow_path =
                                manifest.flows.get(&(f, c, target)).ok_or_else(|| {
                                    CliError::Input(format!(
                                        "manifest lacks flow {f}->{target} cam {c}"
                                    ))
                                })?;
                            let oflow = io::read_flow(&dataset.join(flow_path))?;
                            flow_confidence(
                                src_depth,
                                &oflow,
                                &cam_s,
                                &cam_t,
                                &intr,
                                cfg.conf_tau,
                            )
                        }
                        other => {
                            return Err(CliError::Config(format!(
                                "unknown confidence component `{other}`"
                            )))
                        }
                    };
                    merged[i] = Some(match merged[i].take() {
                        Some(prev) => merge_min(&prev, &map),
                        None => map,
                    });
                }
            }

            let stem = view_stem(f, c);
            let maps: Vec<ConfidenceMap> = merged
                .into_iter()
                .map(|m| m.expect("at least one adjacent frame"))
                .collect();
            for (comp, map) in cfg.conf_components.iter().zip(maps.iter()) {
                write_confidence(&out.join(comp), &stem, map)?;
            }
            let combined =
                combine(&maps, &weights).map_err(|e| CliError::Input(e.to_string()))?;
            write_confidence(&out.join("combined"), &stem, &combined)?;
        }
    }
    let mut listing = String::new();
    for comp in &cfg.conf_components {
        let _ = writeln!(listing, "{comp}");
    }
    std::fs::write(out.join("components.txt"), listing)
        .map_err(|e| CliError::Input(format!("cannot write components list: {e}")))?;
    Ok(())
}

fn write_confidence(dir: &Path, stem: &str, map: &ConfidenceMap) -> Result<(), CliError> {
    io::write_pfm(&dir.join(format!("{stem}.pfm")), map.values())?;
    io::write_mask_png(&dir.join(format!("{stem}.mask.png")), map.valid())?;
    // brighter means higher confidence
    io::write_image_png(&dir.join(format!("{stem}.png")), &confidence_viz(map))?;
    Ok(())
}

fn read_confidence(dir: &Path, stem: &str) -> Result<ConfidenceMap, CliError> {
    let values = io::read_pfm(&dir.join(format!("{stem}.pfm")))?;
    let valid = io::read_mask_png(&dir.join(format!("{stem}.mask.png")))?;
    let mut map = ConfidenceMap::invalid(values.width(), values.height());
    for y in 0..values.height() {
        for x in 0..values.width() {
            if valid.get(x, y) {
                map.set(x, y, values.get(x, y).clamp(0.0, 1.0));
            }
        }
    }
    Ok(map)
}

/// View indices held out of training: every `stride`-th view in
/// frame-major order, starting at `stride - 1`.
pub fn holdout_views(
    frames: usize,
    cams: usize,
    stride: usize,
) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for f in 0..frames {
        for c in 0..cams {
            let idx = f * cams + c;
            if idx % stride == stride - 1 {
                holdout.push((f, c));
            } else {
                train.push((f, c));
            }
        }
    }
    (train, holdout)
}

struct LoadedDataset {
    manifest: Manifest,
    images: BTreeMap<(usize, usize), Image>,
    dynmasks: BTreeMap<(usize, usize), Grid<Option<usize>>>,
}

fn load_dataset(dataset: &Path) -> Result<LoadedDataset, CliError> {
    let manifest = read_manifest_dir(dataset)?;
    let mut images = BTreeMap::new();
    let mut dynmasks = BTreeMap::new();
    for f in 0..manifest.frames {
        for c in 0..manifest.cameras.len() {
            images.insert(
                (f, c),
                io::read_image_png(&dataset.join(&manifest.images[&(f, c)]))?,
            );
            dynmasks.insert(
                (f, c),
                io::read_index_png(&dataset.join(&manifest.dynmask[&(f, c)]))?,
            );
        }
    }
    Ok(LoadedDataset {
        manifest,
        images,
        dynmasks,
    })
}

fn background_train_set(
    dataset: &Path,
    fused: &Path,
    conf: &Path,
    cfg: &RunConfig,
    ds: &LoadedDataset,
    views: &[(usize, usize)],
) -> Result<TrainSet, CliError> {
    let want_depth = !cfg.train_rgb_only;
    let want_conf = want_depth
        && cfg.train_use_confidence
        && cfg.train_depth_source == DepthSource::Dense;
    let component_names: Vec<String> = if want_conf {
        let listing = conf.join("components.txt");
        if !listing.exists() {
            return Err(CliError::Input(format!(
                "missing confidence maps under {}; run the confidence command first",
                conf.display()
            )));
        }
        std::fs::read_to_string(&listing)
            .map_err(|e| CliError::Input(e.to_string()))?
            .lines()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    } else {
        Vec::new()
    };

    let mut out = Vec::new();
    for &(f, c) in views {
        let stem = view_stem(f, c);
        let image = ds.images[&(f, c)].clone();
        let intr = ds.manifest.cameras[c];
        // movers are masked out of background supervision
        let dynmask = &ds.dynmasks[&(f, c)];
        let sample_mask = Mask::from_fn(intr.width, intr.height, |x, y| {
            dynmask.get(x, y).is_none()
        });
        let depth = if want_depth {
            Some(load_view_depth(
                dataset,
                fused,
                &ds.manifest,
                cfg.train_depth_source,
                f,
                c,
            )?)
        } else {
            None
        };
        let components = if want_conf {
            component_names
                .iter()
                .map(|comp| read_confidence(&conf.join(comp), &stem))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        out.push(TrainView {
            image,
            intr,
            pose: ds.manifest.poses[f][c],
            depth,
            components,
            sample_mask,
            near: ds.manifest.near,
            far: ds.manifest.far,
        });
    }
    Ok(TrainSet {
        views: out,
        component_names,
    })
}

/// Views of one dynamic object re-expressed in its own frame via the
/// virtual-camera transform, with per-view bounds from the object size.
fn foreground_train_set(
    dataset: &Path,
    cfg: &RunConfig,
    ds: &LoadedDataset,
    views: &[(usize, usize)],
) -> Result<TrainSet, CliError> {
    let obj = cfg.train_object;
    let (half_extents, obj_poses) = ds
        .manifest
        .objects
        .get(obj)
        .ok_or_else(|| CliError::Input(format!("dataset has no object {obj}")))?;
    let radius = half_extents.norm();
    let mut out = Vec::new();
    for &(f, c) in views {
        let dynmask = &ds.dynmasks[&(f, c)];
        let intr = ds.manifest.cameras[c];
        let mut mask = Mask::filled(intr.width, intr.height, false);
        let mut count = 0usize;
        for y in 0..intr.height {
            for x in 0..intr.width {
                if dynmask.get(x, y) == Some(obj) {
                    mask.set(x, y, true);
                    count += 1;
                }
            }
        }
        if count < 32 {
            continue; // object barely visible in this view
        }
        // Eq-style relative pose: feed the frame-from-world transforms,
        // receive the camera pose in the object-centered frame
        let cam_pose = ds.manifest.poses[f][c];
        let virtual_pose =
            virtual_camera_pose(&pose_inverse(&cam_pose), &pose_inverse(&obj_poses[f]));
        let dist = virtual_pose.translation().norm();
        let near = (dist - 2.0 * radius).max(0.05);
        let far = dist + 2.0 * radius;
        let depth = if cfg.train_rgb_only {
            None
        } else {
            // oracle depth restricted to the object silhouette
            let rel = &ds.manifest.depth_gt[&(f, c)];
            let dir = dataset.join(rel.parent().unwrap_or(Path::new("")));
            let full = io::read_depth(&dir, rel.file_stem().unwrap().to_str().unwrap())
                .map_err(CliError::from)?;
            let mut masked = DepthMap::invalid(intr.width, intr.height);
            for y in 0..intr.height {
                for x in 0..intr.width {
                    if mask.get(x, y) {
                        if let Some(d) = full.get(x, y) {
                            masked.set(x, y, d);
                        }
                    }
                }
            }
            Some(masked)
        };
        out.push(TrainView {
            image: ds.images[&(f, c)].clone(),
            intr,
            pose: virtual_pose,
            depth,
            components: Vec::new(),
            sample_mask: mask,
            near,
            far,
        });
    }
    if out.is_empty() {
        return Err(CliError::Input(format!(
            "object {obj} is not visible in enough views"
        )));
    }
    Ok(TrainSet {
        views: out,
        component_names: Vec::new(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub holdout: Vec<(usize, usize, f64, f64)>,
    pub mean_holdout_psnr: f64,
    pub mean_holdout_ssim: f64,
    pub final_loss: f64,
}

fn render_params(cfg: &RunConfig, meta_near: f64, meta_far: f64) -> ImageRenderParams {
    let tc = cfg.train_config();
    ImageRenderParams {
        n_samples: tc.n_samples,
        near: meta_near,
        far: meta_far,
        space: tc.space(),
        sampling: match tc.mode {
            SceneMode::Background => SamplingKind::LogSpaced,
            SceneMode::Foreground => SamplingKind::Uniform,
        },
    }
}

/// Train a field on the dataset; writes the CSV loss log, the checkpoint
/// and a held-out metrics report.
pub fn cmd_train(
    dataset: &Path,
    fused: Option<&Path>,
    conf: Option<&Path>,
    out: Option<&Path>,
    cfg: &RunConfig,
) -> Result<TrainReport, CliError> {
    cfg.validate()?;
    let ds = load_dataset(dataset)?;
    let fused_dir = fused
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dataset.join("fused"));
    let conf_dir = conf
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dataset.join("conf"));
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dataset.join("run"));

    let (train_views, holdout) = holdout_views(
        ds.manifest.frames,
        ds.manifest.cameras.len(),
        cfg.train_holdout_stride,
    );
    let set = match cfg.mode {
        SceneMode::Background => {
            background_train_set(dataset, &fused_dir, &conf_dir, cfg, &ds, &train_views)?
        }
        SceneMode::Foreground => foreground_train_set(dataset, cfg, &ds, &train_views)?,
    };

    io::create_dir_all(&out)?;
    let tc = cfg.train_config();
    let mut log = String::from("iteration,lr,loss_color,loss_depth,loss_smooth,loss_total,psnr\n");
    let log_every = cfg.train_log_every.max(1);
    let mut final_loss = f64::NAN;
    let push_row = |log: &mut String, s: &StepStats| {
        let _ = writeln!(
            log,
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.4}",
            s.iter, s.lr, s.parts.color, s.parts.depth, s.parts.smooth, s.total, s.batch_psnr
        );
    };
    let state = train(&set, &tc, |s| {
        if s.iter % log_every == 0 || s.iter + 1 == tc.iterations {
            push_row(&mut log, s);
        }
        final_loss = s.total;
    })?;
    std::fs::write(out.join("log.csv"), log)
        .map_err(|e| CliError::Input(format!("cannot write log: {e}")))?;

    let meta = CheckpointMeta {
        mode: tc.mode,
        field: tc.field,
        radius: tc.radius,
        near: ds.manifest.near,
        far: ds.manifest.far,
        n_samples: tc.n_samples,
    };
    io::write_checkpoint(&out.join("checkpoint.bin"), &state.field, &meta)?;
    let mut weights_txt = String::new();
    for (name, logit) in set
        .component_names
        .iter()
        .zip(state.conf_weights.logits().iter())
    {
        let _ = writeln!(weights_txt, "{name} {logit:.9e}");
    }
    std::fs::write(out.join("weights.txt"), weights_txt)
        .map_err(|e| CliError::Input(format!("cannot write weights: {e}")))?;

    // held-out metrics against oracle images (background mode only; the
    // object-frame pipeline reports on its training silhouettes instead)
    let params = render_params(cfg, ds.manifest.near, ds.manifest.far);
    let mut rows = Vec::new();
    let metric_views: Vec<(usize, usize)> = match cfg.mode {
        SceneMode::Background => holdout,
        SceneMode::Foreground => Vec::new(),
    };
    for (f, c) in metric_views {
        let intr = ds.manifest.cameras[c];
        let (img, _) = render_image(&state.field, &intr, &ds.manifest.poses[f][c], &params);
        let gt = &ds.images[&(f, c)];
        let mask = Mask::from_fn(intr.width, intr.height, |x, y| {
            ds.dynmasks[&(f, c)].get(x, y).is_none()
        });
        rows.push((f, c, psnr(&img, gt, Some(&mask)), ssim_metric(&img, gt)));
    }
    let mean_psnr = if rows.is_empty() {
        f64::NAN
    } else {
        rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64
    };
    let mean_ssim = if rows.is_empty() {
        f64::NAN
    } else {
        rows.iter().map(|r| r.3).sum::<f64>() / rows.len() as f64
    };
    let mut metrics = String::from("metrics v1\n");
    for (f, c, p, s) in &rows {
        let _ = writeln!(metrics, "holdout {f} {c} psnr {p:.4} ssim {s:.6}");
    }
    let _ = writeln!(metrics, "mean_holdout_psnr {mean_psnr:.4}");
    let _ = writeln!(metrics, "mean_holdout_ssim {mean_ssim:.6}");
    let _ = writeln!(metrics, "final_loss {final_loss:.9e}");
    std::fs::write(out.join("metrics.txt"), metrics)
        .map_err(|e| CliError::Input(format!("cannot write metrics: {e}")))?;

    Ok(TrainReport {
        holdout: rows,
        mean_holdout_psnr: mean_psnr,
        mean_holdout_ssim: mean_ssim,
        final_loss,
    })
}

/// Which views an eval/render invocation covers.
#[derive(Debug, Clone, PartialEq)]
pub enum ViewSelection {
    Holdout,
    Train,
    All,
    /// Explicit `frame:camera` pairs.
    Explicit(Vec<(usize, usize)>),
    /// Interpolated novel pose between two frames of one camera.
    Novel {
        frame_a: usize,
        frame_b: usize,
        cam: usize,
        alpha: f64,
    },
}

impl ViewSelection {
    pub fn parse(spec: &str) -> Result<Self, CliError> {
        match spec {
            "holdout" => return Ok(ViewSelection::Holdout),
            "train" => return Ok(ViewSelection::Train),
            "all" => return Ok(ViewSelection::All),
            _ => {}
        }
        if let Some(rest) = spec.strip_prefix("novel:") {
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() != 4 {
                return Err(CliError::Config(format!(
                    "novel view spec must be novel:<fa>:<fb>:<cam>:<alpha>, got `{spec}`"
                )));
            }
            let parse_us = |s: &str| -> Result<usize, CliError> {
                s.parse()
                    .map_err(|_| CliError::Config(format!("bad novel spec field `{s}`")))
            };
            return Ok(ViewSelection::Novel {
                frame_a: parse_us(parts[0])?,
                frame_b: parse_us(parts[1])?,
                cam: parse_us(parts[2])?,
                alpha: parts[3]
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad alpha `{}`", parts[3])))?,
            });
        }
        let mut views = Vec::new();
        for part in spec.split(',') {
            let (f, c) = part.split_once(':').ok_or_else(|| {
                CliError::Config(format!("expected frame:camera pairs, got `{part}`"))
            })?;
            let f = f
                .parse()
                .map_err(|_| CliError::Config(format!("bad frame `{f}`")))?;
            let c = c
                .parse()
                .map_err(|_| CliError::Config(format!("bad camera `{c}`")))?;
            views.push((f, c));
        }
        Ok(ViewSelection::Explicit(views))
    }
}

/// Interpolate two camera poses: linear translation, axis-angle slerp.
fn interpolate_pose(a: &Pose, b: &Pose, alpha: f64) -> Pose {
    let rel = compose(&pose_inverse(a), b);
    let rot = nalgebra::Rotation3::from_matrix(rel.rotation());
    let scaled = nalgebra::Rotation3::identity().slerp(&rot, alpha);
    let t = a.translation() + (b.translation() - a.translation()) * alpha;
    compose(
        a,
        &Pose::new(*scaled.matrix(), Vector3::zeros()).expect("rotation stays orthonormal"),
    )
    .with_translation(t)
}

trait WithTranslation {
    fn with_translation(self, t: Vector3<f64>) -> Pose;
}

impl WithTranslation for Pose {
    fn with_translation(self, t: Vector3<f64>) -> Pose {
        Pose::new(*self.rotation(), t).expect("rotation unchanged")
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<(String, Option<(f64, f64)>)>,
    pub mean_psnr: f64,
}

/// Render checkpointed views and, where ground truth exists, score them.
pub fn cmd_eval(
    dataset: &Path,
    checkpoint: &Path,
    out: &Path,
    selection: &ViewSelection,
    cfg: &RunConfig,
    write_metrics: bool,
) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    let ds = load_dataset(dataset)?;
    let (field, meta) = io::read_checkpoint(checkpoint)?;
    // a config that pins architecture keys must agree with the checkpoint
    let tc = cfg.train_config();
    if tc.field.density_layers != meta.field.density_layers
        || tc.field.density_width != meta.field.density_width
        || tc.field.color_layers != meta.field.color_layers
        || tc.field.color_width != meta.field.color_width
        || tc.field.feature_dim != meta.field.feature_dim
        || tc.field.levels_position != meta.field.levels_position
        || tc.field.levels_direction != meta.field.levels_direction
    {
        return Err(CliError::Input(format!(
            "checkpoint architecture {:?} disagrees with configured {:?}",
            meta.field, tc.field
        )));
    }
    io::create_dir_all(out)?;
    let params = ImageRenderParams {
        n_samples: meta.n_samples,
        near: meta.near,
        far: meta.far,
        space: match meta.mode {
            SceneMode::Background => crate::parameterization::SpaceMapping::Contracted(
                crate::parameterization::ContractionConfig::new(meta.radius),
            ),
            SceneMode::Foreground => crate::parameterization::SpaceMapping::Identity,
        },
        sampling: match meta.mode {
            SceneMode::Background => SamplingKind::LogSpaced,
            SceneMode::Foreground => SamplingKind::Uniform,
        },
    };

    let (train_views, holdout) = holdout_views(
        ds.manifest.frames,
        ds.manifest.cameras.len(),
        cfg.train_holdout_stride,
    );
    let mut jobs: Vec<(String, Pose, usize, Option<(usize, usize)>)> = Vec::new();
    match selection {
        ViewSelection::Holdout | ViewSelection::Train | ViewSelection::All => {
            let list = match selection {
                ViewSelection::Holdout => holdout,
                ViewSelection::Train => train_views,
                _ => {
                    let mut all = train_views;
                    all.extend(holdout);
                    all.sort_unstable();
                    all
                }
            };
            for (f, c) in list {
                jobs.push((
                    view_stem(f, c),
                    ds.manifest.poses[f][c],
                    c,
                    Some((f, c)),
                ));
            }
        }
        ViewSelection::Explicit(list) => {
            for &(f, c) in list {
                if f >= ds.manifest.frames || c >= ds.manifest.cameras.len() {
                    return Err(CliError::Input(format!("view {f}:{c} out of range")));
                }
                jobs.push((
                    view_stem(f, c),
                    ds.manifest.poses[f][c],
                    c,
                    Some((f, c)),
                ));
            }
        }
        ViewSelection::Novel {
            frame_a,
            frame_b,
            cam,
            alpha,
        } => {
            if *frame_a >= ds.manifest.frames
                || *frame_b >= ds.manifest.frames
                || *cam >= ds.manifest.cameras.len()
            {
                return Err(CliError::Input("novel view indices out of range".into()));
            }
            let pose = interpolate_pose(
                &ds.manifest.poses[*frame_a][*cam],
                &ds.manifest.poses[*frame_b][*cam],
                *alpha,
            );
            jobs.push((
                format!("novel_f{frame_a:03}_f{frame_b:03}_c{cam}_a{alpha:.2}"),
                pose,
                *cam,
                None,
            ));
        }
    }

    let mut rows = Vec::new();
    let mut psnr_sum = 0.0;
    let mut psnr_n = 0usize;
    for (stem, pose, cam, gt) in jobs {
        let intr = ds.manifest.cameras[cam];
        let (img, depth) = render_image(&field, &intr, &pose, &params);
        io::write_image_png(&out.join(format!("{stem}.png")), &img)?;
        io::write_depth(out, &format!("{stem}.depth"), &depth)?;
        // disparity visualization: brighter is closer
        let viz = Image::from_fn(intr.width, intr.height, |x, y| {
            let v = depth
                .get(x, y)
                .map(|d| (1.0 / d / (1.0 / meta.near)).clamp(0.0, 1.0))
                .unwrap_or(0.0);
            [v, v, v]
        });
        io::write_image_png(&out.join(format!("{stem}.disparity.png")), &viz)?;
        let score = gt.map(|(f, c)| {
            let gt_img = &ds.images[&(f, c)];
            let p = psnr(&img, gt_img, None);
            let s = ssim_metric(&img, gt_img);
            (p, s)
        });
        if let Some((p, _)) = score {
            psnr_sum += p;
            psnr_n += 1;
        }
        rows.push((stem, score));
    }
    let mean_psnr = if psnr_n == 0 {
        f64::NAN
    } else {
        psnr_sum / psnr_n as f64
    };
    if write_metrics {
        let mut csv = String::from("view,psnr,ssim\n");
        for (stem, score) in &rows {
            match score {
                Some((p, s)) => {
                    let _ = writeln!(csv, "{stem},{p:.4},{s:.6}");
                }
                None => {
                    let _ = writeln!(csv, "{stem},,");
                }
            }
        }
        let _ = writeln!(csv, "mean,{mean_psnr:.4},");
        std::fs::write(out.join("metrics.csv"), csv)
            .map_err(|e| CliError::Input(format!("cannot write metrics: {e}")))?;
    }
    Ok(EvalReport { rows, mean_psnr })
}

/// One grid cell of the ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub psnrs: Vec<f64>,
    pub median: f64,
    pub mean: f64,
    pub spread: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn summarize(name: &str, psnrs: Vec<f64>, error: Option<String>) -> AblationCell {
    let mut sorted = psnrs.clone();
    let med = median(&mut sorted);
    let mean = if psnrs.is_empty() {
        f64::NAN
    } else {
        psnrs.iter().sum::<f64>() / psnrs.len() as f64
    };
    let spread = if psnrs.is_empty() {
        f64::NAN
    } else {
        sorted.last().unwrap() - sorted.first().unwrap()
    };
    AblationCell {
        name: name.to_string(),
        psnrs,
        median: med,
        mean,
        spread,
        error,
    }
}

/// Run the depth-supervision grid (or the tau grid when `ablate.taus` is
/// set) over several seeds; per-cell failures are recorded and the grid
/// continues.
pub fn cmd_ablate(dataset: &Path, out: &Path, cfg: &RunConfig) -> Result<AblationReport, CliError> {
    cfg.validate()?;
    io::create_dir_all(out)?;
    let fused = out.join("fused");
    let mut fuse_cfg = cfg.clone();
    if !corruption_enabled(&fuse_cfg) {
        // the robustness grid trains against corrupted dense depth
        fuse_cfg.fuse_corrupt_rate = 0.2;
        fuse_cfg.fuse_corrupt_scale = 2.0;
    }
    cmd_fuse(dataset, Some(&fused), &fuse_cfg)?;

    let seeds: Vec<u64> = (0..cfg.ablate_seeds as u64).map(|i| cfg.seed + i).collect();
    let mut cells = Vec::new();

    let run_cell = |name: &str,
                    tweak: &dyn Fn(&mut RunConfig),
                    conf_dir: Option<&Path>|
     -> AblationCell {
        let mut psnrs = Vec::new();
        let mut error = None;
        for (i, &seed) in seeds.iter().enumerate() {
            let mut c = cfg.clone();
            c.seed = seed;
            tweak(&mut c);
            let run_dir = out.join(format!("{name}_s{i}"));
            match cmd_train(dataset, Some(&fused), conf_dir, Some(&run_dir), &c) {
                Ok(report) => psnrs.push(report.mean_holdout_psnr),
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            }
        }
        summarize(name, psnrs, error)
    };

    if cfg.ablate_taus.is_empty() {
        let conf_dir = out.join("conf");
        let mut conf_cfg = fuse_cfg.clone();
        conf_cfg.conf_tau = cfg.conf_tau;
        cmd_confidence(dataset, Some(&fused), Some(&conf_dir), &conf_cfg)?;

        cells.push(run_cell(
            "rgb_only",
            &|c: &mut RunConfig| c.train_rgb_only = true,
            None,
        ));
        cells.push(run_cell(
            "sparse",
            &|c: &mut RunConfig| {
                c.train_depth_source = DepthSource::Sparse;
                c.train_use_confidence = false;
            },
            None,
        ));
        cells.push(run_cell(
            "dense_noconf",
            &|c: &mut RunConfig| {
                c.train_depth_source = DepthSource::Dense;
                c.train_use_confidence = false;
            },
            None,
        ));
        cells.push(run_cell(
            "dense_conf",
            &|c: &mut RunConfig| {
                c.train_depth_source = DepthSource::Dense;
                c.train_use_confidence = true;
            },
            Some(&conf_dir),
        ));
    } else {
        for &tau in &cfg.ablate_taus {
            let conf_dir = out.join(format!("conf_tau{tau}"));
            let mut conf_cfg = fuse_cfg.clone();
            conf_cfg.conf_tau = tau;
            cmd_confidence(dataset, Some(&fused), Some(&conf_dir), &conf_cfg)?;
            cells.push(run_cell(
                &format!("tau_{tau}"),
                &|c: &mut RunConfig| {
                    c.conf_tau = tau;
                    c.train_depth_source = DepthSource::Dense;
                    c.train_use_confidence = true;
                },
                Some(&conf_dir),
            ));
        }
    }

    let mut table = String::from("ablation v1\n");
    let _ = writeln!(
        table,
        "grid {}",
        if cfg.ablate_taus.is_empty() {
            "depth"
        } else {
            "tau"
        }
    );
    for cell in &cells {
        match &cell.error {
            Some(e) => {
                let _ = writeln!(table, "cell {} ERROR {e}", cell.name);
            }
            None => {
                let list = cell
                    .psnrs
                    .iter()
                    .map(|p| format!("{p:.4}"))
                    .collect::<Vec<_>>()
                    .join(" ");
                let _ = writeln!(
                    table,
                    "cell {} psnr {list} median {:.4} mean {:.4} spread {:.4}",
                    cell.name, cell.median, cell.mean, cell.spread
                );
            }
        }
    }
    std::fs::write(out.join("table.txt"), table)
        .map_err(|e| CliError::Input(format!("cannot write table: {e}")))?;
    Ok(AblationReport { cells })
}

/// Train-state re-export used by integration tests.
pub fn train_state_for_tests(set: &TrainSet, cfg: &RunConfig) -> TrainState {
    TrainState::new(set, &cfg.train_config())
}
