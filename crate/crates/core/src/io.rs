//! File formats: PFM depth/flow rasters, 8-bit PNG images and masks, ASCII
//! PLY point clouds, structured-text scene descriptions and dataset
//! manifests, and the flat little-endian f32 checkpoint blob.
//!
//! Invalid depth pixels are stored as 0 in PFM with a companion mask PNG.
//! Poses serialize as 12 row-major floats (3x4).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

use crate::depthfusion::{DepthMap, FlowField, PointCloud};
use crate::field::{FieldConfig, RadianceField};
use crate::geometry::{Intrinsics, Pose};
use crate::raster::{Grid, Image, Mask};
use crate::scenegen::{
    CameraMount, DynamicObject, LidarSpec, Primitive, SceneOracle, Shape,
};
use crate::train::SceneMode;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}:{col}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        col: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("checkpoint does not match the requested architecture: {0}")]
    ArchitectureMismatch(String),
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn format(path: &Path, msg: impl Into<String>) -> Self {
        IoError::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }
}

pub fn create_dir_all(path: &Path) -> Result<(), IoError> {
    fs::create_dir_all(path).map_err(|e| IoError::io(path, e))
}

// ---------------------------------------------------------------- rasters

/// Grayscale PFM, little-endian (negative scale), rows bottom-to-top.
pub fn write_pfm(path: &Path, grid: &Grid<f64>) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = format!("Pf\n{} {}\n-1.0\n", grid.width(), grid.height());
    w.write_all(header.as_bytes())
        .map_err(|e| IoError::io(path, e))?;
    for y in (0..grid.height()).rev() {
        for x in 0..grid.width() {
            w.write_all(&(grid.get(x, y) as f32).to_le_bytes())
                .map_err(|e| IoError::io(path, e))?;
        }
    }
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Grid<f64>, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    let mut lines = Vec::new();
    let mut start = 0;
    let mut offset = 0;
    for _ in 0..3 {
        let nl = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| IoError::format(path, "truncated PFM header"))?;
        lines.push(
            std::str::from_utf8(&bytes[start..start + nl])
                .map_err(|_| IoError::format(path, "non-utf8 PFM header"))?
                .to_string(),
        );
        start += nl + 1;
        offset = start;
    }
    if lines[0].trim() != "Pf" {
        return Err(IoError::format(path, "expected grayscale PFM (Pf)"));
    }
    let dims: Vec<usize> = lines[1]
        .split_whitespace()
        .map(|t| t.parse().unwrap_or(0))
        .collect();
    if dims.len() != 2 || dims[0] == 0 || dims[1] == 0 {
        return Err(IoError::format(path, "bad PFM dimensions"));
    }
    let scale: f64 = lines[2].trim().parse().unwrap_or(0.0);
    if scale >= 0.0 {
        return Err(IoError::format(path, "big-endian PFM unsupported"));
    }
    let (width, height) = (dims[0], dims[1]);
    if bytes.len() < offset + width * height * 4 {
        return Err(IoError::format(path, "truncated PFM payload"));
    }
    let mut grid = Grid::filled(width, height, 0.0);
    let mut cursor = offset;
    for y in (0..height).rev() {
        for x in 0..width {
            let v = f32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap());
            grid.set(x, y, v as f64);
            cursor += 4;
        }
    }
    Ok(grid)
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<(), IoError> {
    let mut img = image::GrayImage::new(mask.width() as u32, mask.height() as u32);
    for (x, y, v) in mask.pixels() {
        img.put_pixel(x as u32, y as u32, image::Luma([if v { 255 } else { 0 }]));
    }
    img.save(path)
        .map_err(|e| IoError::format(path, e.to_string()))
}

pub fn read_mask_png(path: &Path) -> Result<Mask, IoError> {
    let img = image::open(path)
        .map_err(|e| IoError::format(path, e.to_string()))?
        .to_luma8();
    Ok(Mask::from_fn(
        img.width() as usize,
        img.height() as usize,
        |x, y| img.get_pixel(x as u32, y as u32).0[0] >= 128,
    ))
}

/// Index map stored as grayscale: 0 = none, k+1 = object k.
pub fn write_index_png(path: &Path, grid: &Grid<Option<usize>>) -> Result<(), IoError> {
    let mut img = image::GrayImage::new(grid.width() as u32, grid.height() as u32);
    for (x, y, v) in grid.pixels() {
        let code = v.map_or(0u8, |i| (i + 1).min(255) as u8);
        img.put_pixel(x as u32, y as u32, image::Luma([code]));
    }
    img.save(path)
        .map_err(|e| IoError::format(path, e.to_string()))
}

pub fn read_index_png(path: &Path) -> Result<Grid<Option<usize>>, IoError> {
    let img = image::open(path)
        .map_err(|e| IoError::format(path, e.to_string()))?
        .to_luma8();
    Ok(Grid::from_fn(
        img.width() as usize,
        img.height() as usize,
        |x, y| {
            let v = img.get_pixel(x as u32, y as u32).0[0];
            (v > 0).then(|| v as usize - 1)
        },
    ))
}

pub fn write_image_png(path: &Path, img: &Image) -> Result<(), IoError> {
    let mut out = image::RgbImage::new(img.width() as u32, img.height() as u32);
    for (x, y, px) in img.pixels() {
        let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        out.put_pixel(
            x as u32,
            y as u32,
            image::Rgb([quant(px[0]), quant(px[1]), quant(px[2])]),
        );
    }
    out.save(path)
        .map_err(|e| IoError::format(path, e.to_string()))
}

pub fn read_image_png(path: &Path) -> Result<Image, IoError> {
    let img = image::open(path)
        .map_err(|e| IoError::format(path, e.to_string()))?
        .to_rgb8();
    Ok(Image::from_fn(
        img.width() as usize,
        img.height() as usize,
        |x, y| {
            let p = img.get_pixel(x as u32, y as u32);
            [
                p.0[0] as f64 / 255.0,
                p.0[1] as f64 / 255.0,
                p.0[2] as f64 / 255.0,
            ]
        },
    ))
}

pub fn write_depth(dir: &Path, stem: &str, depth: &DepthMap) -> Result<(), IoError> {
    let mut values = depth.values().clone();
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            if depth.get(x, y).is_none() {
                values.set(x, y, 0.0);
            }
        }
    }
    write_pfm(&dir.join(format!("{stem}.pfm")), &values)?;
    write_mask_png(&dir.join(format!("{stem}.mask.png")), depth.valid())
}

pub fn read_depth(dir: &Path, stem: &str) -> Result<DepthMap, IoError> {
    let values = read_pfm(&dir.join(format!("{stem}.pfm")))?;
    let valid = read_mask_png(&dir.join(format!("{stem}.mask.png")))?;
    let mut depth = DepthMap::invalid(values.width(), values.height());
    for y in 0..values.height() {
        for x in 0..values.width() {
            if valid.get(x, y) && values.get(x, y) > 0.0 {
                depth.set(x, y, values.get(x, y));
            }
        }
    }
    Ok(depth)
}

/// Flow as a 3-channel PFM: du, dv, validity (1.0 / 0.0).
pub fn write_flow(path: &Path, flow: &FlowField) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = format!("PF\n{} {}\n-1.0\n", flow.du.width(), flow.du.height());
    w.write_all(header.as_bytes())
        .map_err(|e| IoError::io(path, e))?;
    for y in (0..flow.du.height()).rev() {
        for x in 0..flow.du.width() {
            let ok = flow.valid.get(x, y);
            for v in [
                flow.du.get(x, y) as f32,
                flow.dv.get(x, y) as f32,
                if ok { 1.0f32 } else { 0.0 },
            ] {
                w.write_all(&v.to_le_bytes())
                    .map_err(|e| IoError::io(path, e))?;
            }
        }
    }
    Ok(())
}

pub fn read_flow(path: &Path) -> Result<FlowField, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    let mut start = 0;
    let mut header = Vec::new();
    for _ in 0..3 {
        let nl = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| IoError::format(path, "truncated PF header"))?;
        header.push(String::from_utf8_lossy(&bytes[start..start + nl]).to_string());
        start += nl + 1;
    }
    if header[0].trim() != "PF" {
        return Err(IoError::format(path, "expected color PFM (PF)"));
    }
    let dims: Vec<usize> = header[1]
        .split_whitespace()
        .map(|t| t.parse().unwrap_or(0))
        .collect();
    let (width, height) = (dims[0], dims[1]);
    let mut flow = FlowField::invalid(width, height);
    let mut cursor = start;
    for y in (0..height).rev() {
        for x in 0..width {
            let mut ch = [0.0f32; 3];
            for c in &mut ch {
                *c = f32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap());
                cursor += 4;
            }
            if ch[2] > 0.5 {
                flow.set(x, y, ch[0] as f64, ch[1] as f64);
            }
        }
    }
    Ok(flow)
}

// ------------------------------------------------------------------- PLY

/// ASCII PLY with x y z float vertices; points are written in the cloud's
/// own frame.
pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(
        w,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.points.len()
    )
    .map_err(|e| IoError::io(path, e))?;
    for p in &cloud.points {
        writeln!(w, "{} {} {}", p.x as f32, p.y as f32, p.z as f32)
            .map_err(|e| IoError::io(path, e))?;
    }
    Ok(())
}

pub fn read_ply(path: &Path, frame: Pose) -> Result<PointCloud, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let mut count = None;
    for (_, line) in lines.by_ref() {
        let t = line.trim();
        if let Some(rest) = t.strip_prefix("element vertex ") {
            count = rest.trim().parse::<usize>().ok();
        }
        if t == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| IoError::format(path, "missing vertex count"))?;
    let mut points = Vec::with_capacity(count);
    for (idx, line) in lines {
        if points.len() == count {
            break;
        }
        let mut it = line.split_whitespace();
        let mut next = |col: usize| -> Result<f64, IoError> {
            it.next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| IoError::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    col,
                    msg: "expected float vertex coordinate".into(),
                })
        };
        points.push(Vector3::new(next(1)?, next(2)?, next(3)?));
    }
    if points.len() != count {
        return Err(IoError::format(path, "vertex count mismatch"));
    }
    Ok(PointCloud { points, frame })
}

pub fn write_labels(path: &Path, labels: &[bool]) -> Result<(), IoError> {
    let mut out = String::with_capacity(labels.len() * 2);
    for &l in labels {
        out.push(if l { '1' } else { '0' });
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| IoError::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<bool>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    Ok(text.lines().map(|l| l.trim() == "1").collect())
}

// ------------------------------------------------------ structured text

/// Whitespace token with its 1-based column, for precise diagnostics.
struct Tokens<'a> {
    path: &'a Path,
    line_no: usize,
    toks: Vec<(usize, &'a str)>,
    cursor: usize,
}

impl<'a> Tokens<'a> {
    fn new(path: &'a Path, line_no: usize, line: &'a str) -> Self {
        let mut toks = Vec::new();
        let mut col = 0;
        for (i, ch) in line.char_indices() {
            if !ch.is_whitespace() {
                if col == 0 || line[..i].ends_with(char::is_whitespace) {
                    col = i + 1;
                    toks.push((col, &line[i..]));
                }
            }
        }
        // fix token ends
        let mut fixed = Vec::with_capacity(toks.len());
        for (col, rest) in toks {
            let end = rest
                .char_indices()
                .find(|(_, c)| c.is_whitespace())
                .map_or(rest.len(), |(i, _)| i);
            fixed.push((col, &rest[..end]));
        }
        Self {
            path,
            line_no,
            toks: fixed,
            cursor: 0,
        }
    }

    fn error(&self, col: usize, msg: impl Into<String>) -> IoError {
        IoError::Parse {
            path: self.path.to_path_buf(),
            line: self.line_no,
            col,
            msg: msg.into(),
        }
    }

    fn next_str(&mut self, what: &str) -> Result<(usize, &'a str), IoError> {
        if self.cursor >= self.toks.len() {
            return Err(self.error(
                self.toks.last().map_or(1, |(c, t)| c + t.len()),
                format!("missing {what}"),
            ));
        }
        let t = self.toks[self.cursor];
        self.cursor += 1;
        Ok(t)
    }

    fn next_f64(&mut self, what: &str) -> Result<f64, IoError> {
        let (col, tok) = self.next_str(what)?;
        tok.parse()
            .map_err(|_| self.error(col, format!("invalid {what}: `{tok}`")))
    }

    fn next_usize(&mut self, what: &str) -> Result<usize, IoError> {
        let (col, tok) = self.next_str(what)?;
        tok.parse()
            .map_err(|_| self.error(col, format!("invalid {what}: `{tok}`")))
    }

    fn next_u64(&mut self, what: &str) -> Result<u64, IoError> {
        let (col, tok) = self.next_str(what)?;
        tok.parse()
            .map_err(|_| self.error(col, format!("invalid {what}: `{tok}`")))
    }

    fn next_pose(&mut self) -> Result<Pose, IoError> {
        let mut v = [0.0; 12];
        let first_col = self.toks.get(self.cursor).map_or(1, |(c, _)| *c);
        for (i, slot) in v.iter_mut().enumerate() {
            *slot = self.next_f64(&format!("pose float {}", i + 1))?;
        }
        Pose::from_row_major(&v).map_err(|e| self.error(first_col, e.to_string()))
    }

    fn finish(&self) -> Result<(), IoError> {
        if self.cursor < self.toks.len() {
            let (col, tok) = self.toks[self.cursor];
            return Err(self.error(col, format!("unexpected trailing token `{tok}`")));
        }
        Ok(())
    }
}

fn pose_fields(p: &Pose) -> String {
    p.to_row_major()
        .iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Serialize a scene description; inverse of [`read_scene`].
pub fn write_scene(path: &Path, scene: &SceneOracle) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str("scene v1\n");
    out.push_str(&format!("name {}\n", scene.name));
    out.push_str(&format!("seed {}\n", scene.seed));
    out.push_str(&format!("frames {}\n", scene.frames));
    out.push_str(&format!("near {}\n", scene.near));
    out.push_str(&format!("far {}\n", scene.far));
    for ego in &scene.ego {
        out.push_str(&format!("ego {}\n", pose_fields(ego)));
    }
    for cam in &scene.cameras {
        let i = &cam.intrinsics;
        out.push_str(&format!(
            "camera {} {} {} {} {} {} {}\n",
            i.fx,
            i.fy,
            i.cx,
            i.cy,
            i.width,
            i.height,
            pose_fields(&cam.pose)
        ));
    }
    let l = &scene.lidar_spec;
    out.push_str(&format!(
        "lidar {} {} {} {} {} {} {}\n",
        l.channels,
        l.azimuth_step,
        l.noise_sigma,
        l.dropout,
        l.elevation_min,
        l.elevation_max,
        pose_fields(&scene.lidar_pose)
    ));
    for p in &scene.primitives {
        match p.shape {
            Shape::Rect { half_u, half_v } => out.push_str(&format!(
                "rect {} {} {} {}\n",
                p.texture,
                half_u,
                half_v,
                pose_fields(&p.pose)
            )),
            Shape::Sphere { radius } => {
                let c = p.pose.translation();
                out.push_str(&format!(
                    "sphere {} {} {} {} {}\n",
                    p.texture, radius, c.x, c.y, c.z
                ));
            }
            Shape::Box { half_extents } => out.push_str(&format!(
                "box {} {} {} {} {}\n",
                p.texture,
                half_extents.x,
                half_extents.y,
                half_extents.z,
                pose_fields(&p.pose)
            )),
        }
    }
    for (i, obj) in scene.dynamic_objects.iter().enumerate() {
        match obj.shape {
            Shape::Box { half_extents } => out.push_str(&format!(
                "dynbox {} {} {} {}\n",
                obj.texture, half_extents.x, half_extents.y, half_extents.z
            )),
            Shape::Sphere { radius } => {
                out.push_str(&format!("dynsphere {} {}\n", obj.texture, radius))
            }
            Shape::Rect { half_u, half_v } => out.push_str(&format!(
                "dynrect {} {} {}\n",
                obj.texture, half_u, half_v
            )),
        }
        for (f, pose) in obj.poses.iter().enumerate() {
            out.push_str(&format!("dynpose {i} {f} {}\n", pose_fields(pose)));
        }
    }
    fs::write(path, out).map_err(|e| IoError::io(path, e))
}

/// Parse a scene description, reporting malformed input with line/column.
pub fn read_scene(path: &Path) -> Result<SceneOracle, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let mut name = String::from("scene");
    let mut seed = 0u64;
    let mut frames = 0usize;
    let mut near = 0.2;
    let mut far = 120.0;
    let mut ego = Vec::new();
    let mut cameras = Vec::new();
    let mut lidar_spec = None;
    let mut lidar_pose = Pose::identity();
    let mut primitives = Vec::new();
    let mut dynamic: Vec<DynamicObject> = Vec::new();
    let mut dynposes: Vec<(usize, usize, Pose, usize, usize)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        if line.trim().is_empty() {
            continue;
        }
        let mut t = Tokens::new(path, idx + 1, line);
        let (kcol, key) = t.next_str("directive")?;
        match key {
            "scene" => {
                let (_, v) = t.next_str("version")?;
                if v != "v1" {
                    return Err(t.error(kcol, format!("unsupported scene version `{v}`")));
                }
            }
            "name" => name = t.next_str("name")?.1.to_string(),
            "seed" => seed = t.next_u64("seed")?,
            "frames" => frames = t.next_usize("frame count")?,
            "near" => near = t.next_f64("near bound")?,
            "far" => far = t.next_f64("far bound")?,
            "ego" => ego.push(t.next_pose()?),
            "camera" => {
                let fx = t.next_f64("fx")?;
                let fy = t.next_f64("fy")?;
                let cx = t.next_f64("cx")?;
                let cy = t.next_f64("cy")?;
                let width = t.next_usize("width")?;
                let height = t.next_usize("height")?;
                let pose = t.next_pose()?;
                let intrinsics = Intrinsics::new(fx, fy, cx, cy, width, height)
                    .map_err(|e| t.error(kcol, e.to_string()))?;
                cameras.push(CameraMount { intrinsics, pose });
            }
            "lidar" => {
                let channels = t.next_usize("channel count")?;
                let azimuth_step = t.next_f64("azimuth step")?;
                let noise_sigma = t.next_f64("noise sigma")?;
                let dropout = t.next_f64("dropout")?;
                let elevation_min = t.next_f64("elevation min")?;
                let elevation_max = t.next_f64("elevation max")?;
                lidar_pose = t.next_pose()?;
                lidar_spec = Some(LidarSpec {
                    channels,
                    azimuth_step,
                    noise_sigma,
                    dropout,
                    elevation_min,
                    elevation_max,
                });
            }
            "rect" => {
                let texture = t.next_usize("texture id")? as u32;
                let half_u = t.next_f64("half extent u")?;
                let half_v = t.next_f64("half extent v")?;
                let pose = t.next_pose()?;
                primitives.push(Primitive {
                    shape: Shape::Rect { half_u, half_v },
                    pose,
                    texture,
                });
            }
            "sphere" => {
                let texture = t.next_usize("texture id")? as u32;
                let radius = t.next_f64("radius")?;
                let cx = t.next_f64("center x")?;
                let cy = t.next_f64("center y")?;
                let cz = t.next_f64("center z")?;
                primitives.push(Primitive {
                    shape: Shape::Sphere { radius },
                    pose: Pose::from_translation(Vector3::new(cx, cy, cz)),
                    texture,
                });
            }
            "box" => {
                let texture = t.next_usize("texture id")? as u32;
                let hx = t.next_f64("half extent x")?;
                let hy = t.next_f64("half extent y")?;
                let hz = t.next_f64("half extent z")?;
                let pose = t.next_pose()?;
                primitives.push(Primitive {
                    shape: Shape::Box {
                        half_extents: Vector3::new(hx, hy, hz),
                    },
                    pose,
                    texture,
                });
            }
            "dynbox" => {
                let texture = t.next_usize("texture id")? as u32;
                let hx = t.next_f64("half extent x")?;
                let hy = t.next_f64("half extent y")?;
                let hz = t.next_f64("half extent z")?;
                dynamic.push(DynamicObject {
                    shape: Shape::Box {
                        half_extents: Vector3::new(hx, hy, hz),
                    },
                    texture,
                    poses: Vec::new(),
                });
            }
            "dynsphere" => {
                let texture = t.next_usize("texture id")? as u32;
                let radius = t.next_f64("radius")?;
                dynamic.push(DynamicObject {
                    shape: Shape::Sphere { radius },
                    texture,
                    poses: Vec::new(),
                });
            }
            "dynpose" => {
                let obj = t.next_usize("object index")?;
                let frame = t.next_usize("frame index")?;
                let pose = t.next_pose()?;
                dynposes.push((obj, frame, pose, idx + 1, kcol));
            }
            other => {
                return Err(t.error(kcol, format!("unknown directive `{other}`")));
            }
        }
        t.finish()?;
    }

    for obj in &mut dynamic {
        obj.poses = vec![Pose::identity(); frames];
    }
    for (obj, frame, pose, line, col) in dynposes {
        let slot = dynamic
            .get_mut(obj)
            .and_then(|o| o.poses.get_mut(frame))
            .ok_or_else(|| IoError::Parse {
                path: path.to_path_buf(),
                line,
                col,
                msg: format!("dynpose {obj}/{frame} out of range"),
            })?;
        *slot = pose;
    }

    let scene = SceneOracle {
        name,
        primitives,
        dynamic_objects: dynamic,
        ego,
        cameras,
        lidar_spec: lidar_spec.ok_or_else(|| IoError::format(path, "missing lidar line"))?,
        lidar_pose,
        frames,
        near,
        far,
        seed,
    };
    scene
        .validate()
        .map_err(|e| IoError::format(path, e.to_string()))?;
    Ok(scene)
}

// --------------------------------------------------------------- manifest

/// Index of a generated dataset: file locations plus the poses and
/// intrinsics everything downstream consumes.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub frames: usize,
    pub cameras: Vec<Intrinsics>,
    /// `[frame][camera]` camera-to-world poses.
    pub poses: Vec<Vec<Pose>>,
    pub lidar_poses: Vec<Pose>,
    pub images: BTreeMap<(usize, usize), PathBuf>,
    pub depth_gt: BTreeMap<(usize, usize), PathBuf>,
    pub dynmask: BTreeMap<(usize, usize), PathBuf>,
    /// `(frame_s, camera, frame_t) -> path`
    pub flows: BTreeMap<(usize, usize, usize), PathBuf>,
    pub lidar: BTreeMap<usize, PathBuf>,
    pub lidar_labels: BTreeMap<usize, PathBuf>,
    /// Per dynamic object: half extents and per-frame poses.
    pub objects: Vec<(Vector3<f64>, Vec<Pose>)>,
    pub near: f64,
    pub far: f64,
    pub seed: u64,
}

pub fn write_manifest(path: &Path, m: &Manifest) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str("manifest v1\n");
    out.push_str(&format!("frames {}\n", m.frames));
    out.push_str(&format!("seed {}\n", m.seed));
    out.push_str(&format!("near {}\n", m.near));
    out.push_str(&format!("far {}\n", m.far));
    for (c, i) in m.cameras.iter().enumerate() {
        out.push_str(&format!(
            "intrinsics {c} {} {} {} {} {} {}\n",
            i.fx, i.fy, i.cx, i.cy, i.width, i.height
        ));
    }
    for (f, row) in m.poses.iter().enumerate() {
        for (c, p) in row.iter().enumerate() {
            out.push_str(&format!("pose {f} {c} {}\n", pose_fields(p)));
        }
    }
    for (f, p) in m.lidar_poses.iter().enumerate() {
        out.push_str(&format!("lidar_pose {f} {}\n", pose_fields(p)));
    }
    let path_str = |p: &PathBuf| p.to_string_lossy().into_owned();
    for ((f, c), p) in &m.images {
        out.push_str(&format!("image {f} {c} {}\n", path_str(p)));
    }
    for ((f, c), p) in &m.depth_gt {
        out.push_str(&format!("depth_gt {f} {c} {}\n", path_str(p)));
    }
    for ((f, c), p) in &m.dynmask {
        out.push_str(&format!("dynmask {f} {c} {}\n", path_str(p)));
    }
    for ((fs, c, ft), p) in &m.flows {
        out.push_str(&format!("flow {fs} {c} {ft} {}\n", path_str(p)));
    }
    for (f, p) in &m.lidar {
        out.push_str(&format!("lidar {f} {}\n", path_str(p)));
    }
    for (f, p) in &m.lidar_labels {
        out.push_str(&format!("lidar_labels {f} {}\n", path_str(p)));
    }
    for (i, (he, poses)) in m.objects.iter().enumerate() {
        out.push_str(&format!("object {i} {} {} {}\n", he.x, he.y, he.z));
        for (f, p) in poses.iter().enumerate() {
            out.push_str(&format!("object_pose {i} {f} {}\n", pose_fields(p)));
        }
    }
    fs::write(path, out).map_err(|e| IoError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let mut m = Manifest {
        frames: 0,
        cameras: Vec::new(),
        poses: Vec::new(),
        lidar_poses: Vec::new(),
        images: BTreeMap::new(),
        depth_gt: BTreeMap::new(),
        dynmask: BTreeMap::new(),
        flows: BTreeMap::new(),
        lidar: BTreeMap::new(),
        lidar_labels: BTreeMap::new(),
        objects: Vec::new(),
        near: 0.2,
        far: 120.0,
        seed: 0,
    };
    let mut poses: BTreeMap<(usize, usize), Pose> = BTreeMap::new();
    let mut lidar_poses: BTreeMap<usize, Pose> = BTreeMap::new();
    let mut object_poses: BTreeMap<(usize, usize), Pose> = BTreeMap::new();
    let mut object_extents: BTreeMap<usize, Vector3<f64>> = BTreeMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        if line.trim().is_empty() {
            continue;
        }
        let mut t = Tokens::new(path, idx + 1, line);
        let (kcol, key) = t.next_str("directive")?;
        match key {
            "manifest" => {
                t.next_str("version")?;
            }
            "frames" => m.frames = t.next_usize("frame count")?,
            "seed" => m.seed = t.next_u64("seed")?,
            "near" => m.near = t.next_f64("near")?,
            "far" => m.far = t.next_f64("far")?,
            "intrinsics" => {
                let c = t.next_usize("camera index")?;
                let fx = t.next_f64("fx")?;
                let fy = t.next_f64("fy")?;
                let cx = t.next_f64("cx")?;
                let cy = t.next_f64("cy")?;
                let width = t.next_usize("width")?;
                let height = t.next_usize("height")?;
                if m.cameras.len() != c {
                    return Err(t.error(kcol, "intrinsics out of order"));
                }
                m.cameras.push(
                    Intrinsics::new(fx, fy, cx, cy, width, height)
                        .map_err(|e| t.error(kcol, e.to_string()))?,
                );
            }
            "pose" => {
                let f = t.next_usize("frame")?;
                let c = t.next_usize("camera")?;
                poses.insert((f, c), t.next_pose()?);
            }
            "lidar_pose" => {
                let f = t.next_usize("frame")?;
                lidar_poses.insert(f, t.next_pose()?);
            }
            "image" | "depth_gt" | "dynmask" => {
                let f = t.next_usize("frame")?;
                let c = t.next_usize("camera")?;
                let (_, p) = t.next_str("path")?;
                let map = match key {
                    "image" => &mut m.images,
                    "depth_gt" => &mut m.depth_gt,
                    _ => &mut m.dynmask,
                };
                map.insert((f, c), PathBuf::from(p));
            }
            "flow" => {
                let fs_ = t.next_usize("source frame")?;
                let c = t.next_usize("camera")?;
                let ft = t.next_usize("target frame")?;
                let (_, p) = t.next_str("path")?;
                m.flows.insert((fs_, c, ft), PathBuf::from(p));
            }
            "lidar" => {
                let f = t.next_usize("frame")?;
                let (_, p) = t.next_str("path")?;
                m.lidar.insert(f, PathBuf::from(p));
            }
            "lidar_labels" => {
                let f = t.next_usize("frame")?;
                let (_, p) = t.next_str("path")?;
                m.lidar_labels.insert(f, PathBuf::from(p));
            }
            "object" => {
                let i = t.next_usize("object index")?;
                let hx = t.next_f64("hx")?;
                let hy = t.next_f64("hy")?;
                let hz = t.next_f64("hz")?;
                object_extents.insert(i, Vector3::new(hx, hy, hz));
            }
            "object_pose" => {
                let i = t.next_usize("object index")?;
                let f = t.next_usize("frame")?;
                object_poses.insert((i, f), t.next_pose()?);
            }
            other => return Err(t.error(kcol, format!("unknown directive `{other}`"))),
        }
        t.finish()?;
    }

    let n_cams = m.cameras.len();
    for f in 0..m.frames {
        let mut row = Vec::with_capacity(n_cams);
        for c in 0..n_cams {
            row.push(*poses.get(&(f, c)).ok_or_else(|| {
                IoError::format(path, format!("missing pose for frame {f} camera {c}"))
            })?);
        }
        m.poses.push(row);
        m.lidar_poses.push(
            *lidar_poses
                .get(&f)
                .ok_or_else(|| IoError::format(path, format!("missing lidar pose {f}")))?,
        );
    }
    for (i, he) in object_extents {
        let mut obj_poses = Vec::with_capacity(m.frames);
        for f in 0..m.frames {
            obj_poses.push(*object_poses.get(&(i, f)).ok_or_else(|| {
                IoError::format(path, format!("missing object pose {i}/{f}"))
            })?);
        }
        m.objects.push((he, obj_poses));
    }
    Ok(m)
}

// -------------------------------------------------------------- checkpoint

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub mode: SceneMode,
    pub field: FieldConfig,
    pub radius: f64,
    pub near: f64,
    pub far: f64,
    pub n_samples: usize,
}

/// Structured-text header describing architecture and seed, then the flat
/// little-endian f32 parameter blob.
pub fn write_checkpoint(
    path: &Path,
    field: &RadianceField,
    meta: &CheckpointMeta,
) -> Result<(), IoError> {
    let cfg = field.config();
    let mut out: Vec<u8> = Vec::new();
    let mode = match meta.mode {
        SceneMode::Background => "background",
        SceneMode::Foreground => "foreground",
    };
    let header = format!(
        "fieldckpt v1\nmode {mode}\ndensity_layers {}\ndensity_width {}\ncolor_layers {}\ncolor_width {}\nfeature_dim {}\nlevels_position {}\nlevels_direction {}\nseed {}\nradius {}\nnear {}\nfar {}\nn_samples {}\nparams {}\nblob\n",
        cfg.density_layers,
        cfg.density_width,
        cfg.color_layers,
        cfg.color_width,
        cfg.feature_dim,
        cfg.levels_position,
        cfg.levels_direction,
        cfg.seed,
        meta.radius,
        meta.near,
        meta.far,
        meta.n_samples,
        field.param_count()
    );
    out.extend_from_slice(header.as_bytes());
    for &p in field.params() {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| IoError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(RadianceField, CheckpointMeta), IoError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| IoError::io(path, e))?;
    let mut header = BTreeMap::new();
    let mut offset = 0;
    let mut first = true;
    loop {
        let nl = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| IoError::format(path, "truncated checkpoint header"))?;
        let line = std::str::from_utf8(&bytes[offset..offset + nl])
            .map_err(|_| IoError::format(path, "non-utf8 checkpoint header"))?;
        offset += nl + 1;
        if first {
            if line.trim() != "fieldckpt v1" {
                return Err(IoError::format(path, "not a field checkpoint"));
            }
            first = false;
            continue;
        }
        if line.trim() == "blob" {
            break;
        }
        let mut it = line.split_whitespace();
        let k = it
            .next()
            .ok_or_else(|| IoError::format(path, "empty header line"))?;
        let v = it
            .next()
            .ok_or_else(|| IoError::format(path, format!("header key `{k}` missing value")))?;
        header.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String, IoError> {
        header
            .get(k)
            .ok_or_else(|| IoError::format(path, format!("checkpoint missing `{k}`")))
    };
    let num = |k: &str| -> Result<usize, IoError> {
        get(k)?
            .parse()
            .map_err(|_| IoError::format(path, format!("bad `{k}`")))
    };
    let fnum = |k: &str| -> Result<f64, IoError> {
        get(k)?
            .parse()
            .map_err(|_| IoError::format(path, format!("bad `{k}`")))
    };
    let mode = match get("mode")?.as_str() {
        "background" => SceneMode::Background,
        "foreground" => SceneMode::Foreground,
        other => {
            return Err(IoError::format(path, format!("unknown mode `{other}`")));
        }
    };
    let field_cfg = FieldConfig {
        density_layers: num("density_layers")?,
        density_width: num("density_width")?,
        color_layers: num("color_layers")?,
        color_width: num("color_width")?,
        feature_dim: num("feature_dim")?,
        levels_position: num("levels_position")?,
        levels_direction: num("levels_direction")?,
        seed: get("seed")?
            .parse()
            .map_err(|_| IoError::format(path, "bad `seed`"))?,
    };
    let n_params = num("params")?;
    let mut field = RadianceField::new(field_cfg);
    if field.param_count() != n_params {
        return Err(IoError::ArchitectureMismatch(format!(
            "header declares {n_params} parameters, architecture has {}",
            field.param_count()
        )));
    }
    if bytes.len() != offset + 4 * n_params {
        return Err(IoError::ArchitectureMismatch(format!(
            "blob holds {} bytes, expected {}",
            bytes.len() - offset,
            4 * n_params
        )));
    }
    let mut params = Vec::with_capacity(n_params);
    for i in 0..n_params {
        let b = &bytes[offset + 4 * i..offset + 4 * i + 4];
        params.push(f32::from_le_bytes(b.try_into().unwrap()) as f64);
    }
    field.set_params(&params);
    Ok((
        field,
        CheckpointMeta {
            mode,
            field: field_cfg,
            radius: fnum("radius")?,
            near: fnum("near")?,
            far: fnum("far")?,
            n_samples: num("n_samples")?,
        },
    ))
}
