//! Deterministic synthetic road scenes, ground-truth padding and CULane-style
//! dataset I/O.
//!
//! Lanes are quadratics in the height above the bottom edge that all pass
//! through a vanishing point above the lane region, so they never cross
//! inside the image. Every generated pixel value is a multiple of 1/255,
//! which makes PNG round-trips exact.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{ScaleConfig, Triple};
use crate::geometry::{self, GeometryError, LaneAnchor, LaneGrid, Polyline};

/// Hard floor for the bottom-row distance between two lanes.
pub const MIN_SEPARATION_FLOOR: f64 = 24.0;

const MAX_ATTEMPTS: usize = 200;
const LIST_FILE: &str = "list.txt";
const IMAGE_DIR: &str = "images";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("{} real lanes exceed n_train={n_train}", .real)]
    TooManyLanes { real: usize, n_train: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub img_w: usize,
    pub img_h: usize,
    pub lanes_min: usize,
    pub lanes_max: usize,
    /// Bound on |c| in `x(u) = a + b u + c u^2`, u = height above the bottom.
    pub curvature_max: f64,
    /// Std-dev of additive pixel noise.
    pub noise_std: f64,
    /// Set from the run seed, never read from a config file.
    #[serde(skip)]
    pub seed: u64,
    /// Top of the lane region as a fraction of image height.
    pub horizon_frac: f64,
    /// Minimum bottom-row distance between lanes (pixels).
    pub min_separation: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            img_w: 256,
            img_h: 256,
            lanes_min: 2,
            lanes_max: 4,
            curvature_max: 0.0015,
            noise_std: 0.03,
            seed: 0,
            horizon_frac: 0.3,
            min_separation: 40.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DataError::Config(m));
        if self.img_w < 64 || self.img_h < 64 {
            return fail(format!("image must be at least 64x64, got {}x{}", self.img_w, self.img_h));
        }
        if !(1 <= self.lanes_min && self.lanes_min <= self.lanes_max && self.lanes_max <= 6) {
            return fail(format!("need 1 <= lanes_min <= lanes_max <= 6, got {}..{}", self.lanes_min, self.lanes_max));
        }
        if !(0.0..=f64::MAX).contains(&self.curvature_max) || !(0.0..=f64::MAX).contains(&self.noise_std) {
            return fail("curvature_max and noise_std must be non-negative".into());
        }
        if !(0.05..0.9).contains(&self.horizon_frac) {
            return fail(format!("horizon_frac {} outside [0.05, 0.9)", self.horizon_frac));
        }
        if self.min_separation < MIN_SEPARATION_FLOOR {
            return fail(format!("min_separation {} below {MIN_SEPARATION_FLOOR}", self.min_separation));
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.horizon_frac * self.img_h as f64
    }

    /// Half-width of the painted lane band at height `y`; grows toward the
    /// bottom to mimic perspective.
    pub fn lane_half_width(&self, y: f64) -> f64 {
        let h = self.img_h as f64;
        let t = ((y - self.horizon()) / (h - self.horizon())).clamp(0.0, 1.0);
        1.0 + 2.0 * t
    }

    /// Grid matching the lane region of generated scenes.
    pub fn grid(&self, n_points: usize) -> std::result::Result<LaneGrid, GeometryError> {
        LaneGrid::with_bottom(self.img_w as f64, self.img_h as f64, self.horizon(), n_points)
    }
}

/// RGB image, row-major, channels interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-major copy (`3 x H x W`).
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = px[c];
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches dimensions");
        buf.save(path).map_err(|e| DataError::Image { path: path.to_path_buf(), msg: e.to_string() })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img =
            image::open(path).map_err(|e| DataError::Image { path: path.to_path_buf(), msg: e.to_string() })?.to_rgb8();
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneScene {
    pub image: Image,
    /// Ground-truth lanes sorted left to right at the bottom row.
    pub lanes: Vec<Polyline>,
    /// `img_h x img_w` labels: 0 background, `k` for lane `k` (1-based).
    pub seg_mask: Vec<u8>,
}

#[derive(Debug, Clone, Copy)]
struct LaneCurve {
    a: f64,
    b: f64,
    c: f64,
    y_top: f64,
}

impl LaneCurve {
    fn x(&self, y: f64, img_h: f64) -> f64 {
        let u = img_h - y;
        self.a + self.b * u + self.c * u * u
    }
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn sample_lanes(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<LaneCurve> {
    let (w, h) = (cfg.img_w as f64, cfg.img_h as f64);
    let horizon = cfg.horizon();
    let margin = 0.04 * w;
    let mut n = rng.random_range(cfg.lanes_min..=cfg.lanes_max);
    let mut sep = cfg.min_separation;
    loop {
        for _ in 0..MAX_ATTEMPTS {
            let vp_x = w / 2.0 + rng.random_range(-0.15..0.15) * w;
            let vp_u = (h - horizon) + rng.random_range(0.3..0.6) * h;
            let c =
                if cfg.curvature_max > 0.0 { rng.random_range(-cfg.curvature_max..=cfg.curvature_max) } else { 0.0 };
            let mut bottoms: Vec<f64> = (0..n).map(|_| rng.random_range(margin..w - margin)).collect();
            bottoms.sort_by(f64::total_cmp);
            if bottoms.windows(2).any(|p| p[1] - p[0] < sep) {
                continue;
            }
            let lanes: Vec<LaneCurve> = bottoms
                .iter()
                .map(|&a| {
                    let y_top = horizon + rng.random_range(0.0..0.25) * (h - horizon);
                    LaneCurve { a, b: (vp_x - a - c * vp_u * vp_u) / vp_u, c, y_top }
                })
                .collect();
            let inside = lanes.iter().all(|l| {
                let mut y = h;
                while y >= l.y_top {
                    let x = l.x(y, h);
                    if !(1.0..=w - 1.0).contains(&x) {
                        return false;
                    }
                    y -= 1.0;
                }
                true
            });
            if inside {
                return lanes;
            }
        }
        // relax: first down to the separation floor, then drop a lane
        if sep > MIN_SEPARATION_FLOOR {
            sep = MIN_SEPARATION_FLOOR;
        } else if n > 1 {
            n -= 1;
        } else {
            let a = w / 2.0;
            return vec![LaneCurve { a, b: 0.0, c: 0.0, y_top: horizon }];
        }
    }
}

fn lane_polyline(l: &LaneCurve, h: f64) -> Polyline {
    let mut pts = Vec::new();
    let mut y = h;
    while y > l.y_top {
        pts.push((l.x(y, h), y));
        y -= 2.0;
    }
    pts.push((l.x(l.y_top, h), l.y_top));
    Polyline::new(pts).expect("lane spans at least one 2px step")
}

/// Labels every pixel whose center lies within the lane band of some lane.
/// Lanes later in `lanes` win ties.
pub fn render_mask(lanes: &[Polyline], cfg: &SceneConfig) -> Vec<u8> {
    let (w, h) = (cfg.img_w, cfg.img_h);
    let mut mask = vec![0u8; w * h];
    for (k, lane) in lanes.iter().enumerate() {
        for row in 0..h {
            let yc = row as f64 + 0.5;
            let Some(xc) = lane.x_at(yc) else { continue };
            let hw = cfg.lane_half_width(yc);
            let lo = (xc - hw - 0.5).floor().max(0.0) as usize;
            let hi = ((xc + hw - 0.5).ceil().max(0.0) as usize).min(w - 1);
            for col in lo..=hi {
                if ((col as f64 + 0.5) - xc).abs() <= hw {
                    mask[row * w + col] = (k + 1) as u8;
                }
            }
        }
    }
    mask
}

/// Scene `index` of the stream defined by `cfg.seed`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> LaneScene {
    let mut rng = scene_rng(cfg.seed, index);
    let (w, h) = (cfg.img_w, cfg.img_h);
    let hf = h as f64;
    let curves = sample_lanes(cfg, &mut rng);

    let sky = [rng.random_range(0.35..0.55), rng.random_range(0.4..0.6), rng.random_range(0.5..0.7)];
    let road = rng.random_range(0.12..0.26);
    let (fx, fy, phase) =
        (rng.random_range(0.05..0.2), rng.random_range(0.05..0.2), rng.random_range(0.0..std::f64::consts::TAU));
    let colors: Vec<[f64; 3]> = curves
        .iter()
        .map(|_| {
            if rng.random_bool(0.3) {
                [0.92, 0.8, 0.3]
            } else {
                let v = rng.random_range(0.82..0.95);
                [v, v, v]
            }
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");
    let horizon = cfg.horizon();

    let mut img = vec![[0f64; 3]; w * h];
    for row in 0..h {
        let yc = row as f64 + 0.5;
        for col in 0..w {
            let xc = col as f64 + 0.5;
            img[row * w + col] = if yc < horizon - 4.0 {
                let g = 0.1 * yc / horizon;
                [sky[0] + g, sky[1] + g, sky[2] + g]
            } else {
                let v = road + 0.04 * (fx * xc + fy * yc + phase).sin() * (0.3 * yc).cos();
                [v, v, v]
            };
        }
    }
    for (curve, color) in curves.iter().zip(&colors) {
        for row in 0..h {
            let yc = row as f64 + 0.5;
            if yc < curve.y_top || yc > hf {
                continue;
            }
            let xc = curve.x(yc, hf);
            let hw = cfg.lane_half_width(yc);
            let lo = (xc - hw - 2.0).floor().max(0.0) as usize;
            let hi = ((xc + hw + 2.0).ceil() as usize).min(w - 1);
            for col in lo..=hi {
                let d = ((col as f64 + 0.5) - xc).abs();
                let alpha = (hw + 0.5 - d).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    let px = &mut img[row * w + col];
                    for c in 0..3 {
                        px[c] = (1.0 - alpha) * px[c] + alpha * color[c];
                    }
                }
            }
        }
    }
    let mut image = Image::new(w, h);
    for (p, px) in img.iter().enumerate() {
        let n: [f64; 3] =
            if cfg.noise_std > 0.0 { [rng.sample(noise), rng.sample(noise), rng.sample(noise)] } else { [0.0; 3] };
        image.set(p % w, p / w, [0, 1, 2].map(|c| quantize(px[c] + n[c])));
    }
    let lanes: Vec<Polyline> = curves.iter().map(|l| lane_polyline(l, hf)).collect();
    let seg_mask = render_mask(&lanes, cfg);
    LaneScene { image, lanes, seg_mask }
}

/// How the ground-truth set is filled up to `n_train` anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    /// Cycle through the real lanes (falls back to Gaussian with no lanes).
    Repeat,
    /// Standard-normal triples in signal space.
    #[default]
    Gaussian,
    /// Uniform triples in signal space, `[-scale, scale]`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaddedTargets {
    pub anchors: Vec<LaneAnchor>,
    pub is_real: Vec<bool>,
    /// Signal-space triple of every entry: the normalized real parameters,
    /// or the raw draw for padding (before clamping).
    pub signal: Vec<Triple>,
}

pub fn pad_ground_truth<R: Rng + ?Sized>(
    gts: &[LaneAnchor],
    n_train: usize,
    mode: PaddingMode,
    scale: &ScaleConfig,
    grid: &LaneGrid,
    rng: &mut R,
) -> Result<PaddedTargets> {
    if gts.len() > n_train {
        return Err(DataError::TooManyLanes { real: gts.len(), n_train });
    }
    let mut out = PaddedTargets {
        anchors: gts.to_vec(),
        is_real: vec![true; gts.len()],
        signal: gts.iter().map(|a| scale.normalize(a.params())).collect(),
    };
    let k = scale.noise_scale;
    for i in gts.len()..n_train {
        let (anchor, signal) = match mode {
            PaddingMode::Repeat if !gts.is_empty() => {
                let a = gts[i % gts.len()].clone();
                let s = scale.normalize(a.params());
                (a, s)
            }
            PaddingMode::Uniform => {
                let s: Triple = [0; 3].map(|_| rng.random_range(-k..=k));
                (LaneAnchor::from_params(scale.denormalize(s), grid), s)
            }
            _ => {
                let s: Triple = [0; 3].map(|_| rng.sample(StandardNormal));
                (LaneAnchor::from_params(scale.denormalize(s), grid), s)
            }
        };
        out.anchors.push(anchor);
        out.is_real.push(false);
        out.signal.push(signal);
    }
    Ok(out)
}

/// One dataset entry: image path relative to the dataset root plus lanes.
#[derive(Debug, Clone, PartialEq)]
pub struct CulaneEntry {
    pub image: PathBuf,
    pub lanes: Vec<Polyline>,
}

impl CulaneEntry {
    pub fn lanes_path(&self) -> PathBuf {
        lanes_path_for(&self.image)
    }
}

/// `images/00003.png` -> `images/00003.lines.txt`.
pub fn lanes_path_for(image: &Path) -> PathBuf {
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    image.with_file_name(format!("{stem}.lines.txt"))
}

/// Writes scenes in CULane layout: `images/NNNNN.png`, a sibling
/// `NNNNN.lines.txt` per image and `list.txt` with relative image paths.
pub struct CulaneWriter {
    root: PathBuf,
    entries: Vec<PathBuf>,
}

impl CulaneWriter {
    pub fn create(root: &Path) -> Result<Self> {
        let images = root.join(IMAGE_DIR);
        fs::create_dir_all(&images).map_err(io_err(&images))?;
        Ok(Self { root: root.to_path_buf(), entries: Vec::new() })
    }

    pub fn add(&mut self, scene: &LaneScene) -> Result<PathBuf> {
        let rel = Path::new(IMAGE_DIR).join(format!("{:05}.png", self.entries.len()));
        scene.image.save_png(&self.root.join(&rel))?;
        write_lanes(&self.root.join(lanes_path_for(&rel)), &scene.lanes)?;
        self.entries.push(rel.clone());
        Ok(rel)
    }

    pub fn finish(self) -> Result<Vec<PathBuf>> {
        write_list(&self.root, &self.entries)?;
        Ok(self.entries)
    }
}

pub fn write_lanes(path: &Path, lanes: &[Polyline]) -> Result<()> {
    fs::write(path, geometry::format_culane(lanes)).map_err(io_err(path))
}

pub fn read_lanes(path: &Path) -> Result<Vec<Polyline>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    geometry::parse_culane(&text).map_err(|e| match e {
        GeometryError::Parse { line, msg } => DataError::Parse { path: path.to_path_buf(), line, msg },
        other => DataError::Parse { path: path.to_path_buf(), line: 0, msg: other.to_string() },
    })
}

pub fn write_list(root: &Path, entries: &[PathBuf]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&e.to_string_lossy());
        text.push('\n');
    }
    let path = root.join(LIST_FILE);
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_list(root: &Path) -> Result<Vec<PathBuf>> {
    let path = root.join(LIST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| PathBuf::from(l.trim_start_matches('/')))
        .collect())
}

/// Reads `list.txt` and every referenced lane file.
pub fn read_culane(root: &Path) -> Result<Vec<CulaneEntry>> {
    read_list(root)?
        .into_iter()
        .map(|image| {
            let lanes = read_lanes(&root.join(lanes_path_for(&image)))?;
            Ok(CulaneEntry { image, lanes })
        })
        .collect()
}
