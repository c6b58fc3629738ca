//! Lane-anchor parameterization and lane-to-lane geometry.
//!
//! Rows of a [`LaneGrid`] are indexed top to bottom: row `0` sits at `y_min`
//! and row `n_points - 1` at `y_max`. Anchor offsets use the same indexing.
//! A lane grows upward from its start point, so the rows of a lane of length
//! `L` starting at row `s` are `s, s - 1, ..., s - L + 1`.

use std::f64::consts::PI;

use thiserror::Error;

/// Normalized angles are clamped to this range before taking a cotangent.
pub const ANGLE_CLAMP: (f64, f64) = (0.02, 0.98);

/// Number of lowest lane points used to fit the anchor angle.
pub const ANGLE_FIT_POINTS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid lane grid: {0}")]
    InvalidGrid(String),
    #[error("invalid polyline: {0}")]
    InvalidPolyline(String),
    #[error("invalid ground truth: {0}")]
    InvalidGroundTruth(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Image size plus the set of equally spaced rows lanes are sampled on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneGrid {
    img_w: f64,
    img_h: f64,
    y_min: f64,
    y_max: f64,
    n_points: usize,
}

impl LaneGrid {
    pub fn new(img_w: f64, img_h: f64, y_min: f64, y_max: f64, n_points: usize) -> Result<Self> {
        if !(img_w > 0.0 && img_h > 0.0) {
            return Err(GeometryError::InvalidGrid(format!("image size {img_w}x{img_h} must be positive")));
        }
        if !(0.0 <= y_min && y_min < y_max && y_max <= img_h) {
            return Err(GeometryError::InvalidGrid(format!(
                "need 0 <= y_min < y_max <= img_h, got y_min={y_min} y_max={y_max} img_h={img_h}"
            )));
        }
        if n_points < 2 {
            return Err(GeometryError::InvalidGrid(format!("n_points must be >= 2, got {n_points}")));
        }
        Ok(Self { img_w, img_h, y_min, y_max, n_points })
    }

    /// Grid spanning `[y_min, img_h]`.
    pub fn with_bottom(img_w: f64, img_h: f64, y_min: f64, n_points: usize) -> Result<Self> {
        Self::new(img_w, img_h, y_min, img_h, n_points)
    }

    pub fn img_w(&self) -> f64 {
        self.img_w
    }

    pub fn img_h(&self) -> f64 {
        self.img_h
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn spacing(&self) -> f64 {
        (self.y_max - self.y_min) / (self.n_points - 1) as f64
    }

    /// y coordinate of row `i` (row 0 is the top).
    pub fn row_y(&self, i: usize) -> f64 {
        if i + 1 == self.n_points {
            self.y_max
        } else {
            self.y_min + (self.y_max - self.y_min) * i as f64 / (self.n_points - 1) as f64
        }
    }

    /// All row coordinates, top to bottom.
    pub fn y_grid(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.row_y(i)).collect()
    }

    /// Row whose y is nearest to `y`, clamped into the grid.
    pub fn nearest_row(&self, y: f64) -> usize {
        let r = ((y - self.y_min) / self.spacing()).round();
        r.clamp(0.0, (self.n_points - 1) as f64) as usize
    }
}

/// Lane hypothesis: a straight ray from a start point plus per-row offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneAnchor {
    /// Start x divided by image width.
    pub start_x: f64,
    /// Start y divided by image height.
    pub start_y: f64,
    /// Ray direction; `angle * PI` radians from the image +x axis.
    pub angle: f64,
    /// Number of rows covered, counted upward from the start row.
    pub length: f64,
    /// Per-row horizontal displacement (pixels) from the ray.
    pub offsets: Vec<f64>,
}

impl LaneAnchor {
    /// Noisy anchor from a normalized `(start_x, start_y, angle)` triple:
    /// values are clamped into `[0, 1]`, offsets are zero and the anchor
    /// spans the whole grid.
    pub fn from_params(params: [f64; 3], grid: &LaneGrid) -> Self {
        let c = |v: f64| if v.is_nan() { 0.5 } else { v.clamp(0.0, 1.0) };
        Self {
            start_x: c(params[0]),
            start_y: c(params[1]),
            angle: c(params[2]),
            length: grid.n_points() as f64,
            offsets: vec![0.0; grid.n_points()],
        }
    }

    pub fn params(&self) -> [f64; 3] {
        [self.start_x, self.start_y, self.angle]
    }

    /// x of the straight ray (no offsets) at height `y`.
    pub fn ray_x(&self, y: f64, grid: &LaneGrid) -> f64 {
        let theta = self.angle.clamp(ANGLE_CLAMP.0, ANGLE_CLAMP.1) * PI;
        let sy = self.start_y * grid.img_h();
        let dy = sy - y;
        let sx = self.start_x * grid.img_w();
        if dy == 0.0 {
            sx
        } else {
            sx + dy * (theta.cos() / theta.sin())
        }
    }

    /// Row the lane starts from.
    pub fn start_row(&self, grid: &LaneGrid) -> usize {
        grid.nearest_row(self.start_y * grid.img_h())
    }

    /// x at grid row `i` (ray plus offset), regardless of the lane's extent.
    pub fn row_x(&self, i: usize, grid: &LaneGrid) -> f64 {
        self.ray_x(grid.row_y(i), grid) + self.offsets.get(i).copied().unwrap_or(0.0)
    }

    /// x at every grid row, ignoring length and image bounds.
    pub fn full_xs(&self, grid: &LaneGrid) -> Vec<f64> {
        (0..grid.n_points()).map(|i| self.row_x(i, grid)).collect()
    }

    /// Rows covered by the lane, bottom first.
    pub fn covered_rows(&self, grid: &LaneGrid) -> impl Iterator<Item = usize> {
        let start = self.start_row(grid);
        let len =
            if self.length.is_finite() { self.length.round().clamp(0.0, grid.n_points() as f64) as usize } else { 0 };
        let len = len.min(start + 1);
        (0..len).map(move |k| start - k)
    }

    /// Lane restricted to its covered rows, clipped to the image width.
    pub fn to_grid_lane(&self, grid: &LaneGrid) -> GridLane {
        let mut xs = vec![None; grid.n_points()];
        for i in self.covered_rows(grid) {
            let x = self.row_x(i, grid);
            if (0.0..=grid.img_w()).contains(&x) {
                xs[i] = Some(x);
            }
        }
        GridLane(xs)
    }

    /// Polyline through the covered rows, bottom to top. `None` when fewer
    /// than two rows survive clipping.
    pub fn to_polyline(&self, grid: &LaneGrid) -> Option<Polyline> {
        let points: Vec<(f64, f64)> = self
            .covered_rows(grid)
            .filter_map(|i| {
                let x = self.row_x(i, grid);
                (0.0..=grid.img_w()).contains(&x).then(|| (x, grid.row_y(i)))
            })
            .collect();
        Polyline::new(points).ok()
    }
}

/// Detection carrier for NMS and resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLane {
    pub anchor: LaneAnchor,
    pub fg_prob: f64,
}

/// Ordered lane points, bottom to top (strictly decreasing y).
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<(f64, f64)>,
}

impl Polyline {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(GeometryError::InvalidPolyline(format!("need at least 2 points, got {}", points.len())));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(GeometryError::InvalidPolyline("non-finite coordinate".into()));
        }
        if points.windows(2).any(|w| w[1].1 >= w[0].1) {
            return Err(GeometryError::InvalidPolyline("y must strictly decrease from bottom to top".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn bottom_y(&self) -> f64 {
        self.points[0].1
    }

    pub fn top_y(&self) -> f64 {
        self.points[self.points.len() - 1].1
    }

    /// Linear interpolation inside the lane's y-span.
    pub fn x_at(&self, y: f64) -> Option<f64> {
        if y > self.bottom_y() || y < self.top_y() {
            return None;
        }
        // points are sorted by decreasing y
        let idx = self.points.partition_point(|p| p.1 > y);
        if idx == 0 {
            return Some(self.points[0].0);
        }
        let (x1, y1) = self.points[idx - 1];
        let (x2, y2) = self.points[idx];
        if y == y2 {
            return Some(x2);
        }
        let t = (y1 - y) / (y1 - y2);
        Some(x1 + t * (x2 - x1))
    }

    /// Samples the lane on grid rows inside its span. No extrapolation.
    pub fn to_grid_lane(&self, grid: &LaneGrid) -> GridLane {
        GridLane(
            (0..grid.n_points())
                .map(|i| self.x_at(grid.row_y(i)).filter(|x| (0.0..=grid.img_w()).contains(x)))
                .collect(),
        )
    }
}

/// A lane sampled on the rows of a grid; `None` where the lane is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLane(pub Vec<Option<f64>>);

impl GridLane {
    pub fn valid_count(&self) -> usize {
        self.0.iter().filter(|x| x.is_some()).count()
    }

    pub fn translated(&self, dx: f64) -> Self {
        GridLane(self.0.iter().map(|x| x.map(|x| x + dx)).collect())
    }

    /// Bottom-to-top polyline through the valid rows.
    pub fn to_polyline(&self, grid: &LaneGrid) -> Option<Polyline> {
        let pts = self.0.iter().enumerate().rev().filter_map(|(i, x)| x.map(|x| (x, grid.row_y(i)))).collect();
        Polyline::new(pts).ok()
    }
}

/// Least-squares fit `x = slope * y + intercept`.
pub fn fit_x_of_y(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.1 - my) * (p.0 - mx)).sum();
    let slope = if syy > 0.0 { sxy / syy } else { 0.0 };
    (slope, mx - slope * my)
}

/// Normalized anchor angle of a lane with `dx/dy = slope`.
pub fn angle_from_slope(slope: f64) -> f64 {
    // x grows by cot(theta) per pixel climbed, so cot(theta) = -slope.
    (1.0f64).atan2(-slope) / PI
}

/// Target anchor for a ground-truth lane.
///
/// The lane is interpolated inside its span and linearly extended to cover
/// the grid: below its bottom with the least-squares line through its lowest
/// points (which also gives the angle), above its top with its last segment.
/// The start point is the extended lane at `y_max`. `length` counts rows from
/// the bottom row up to the highest row the original lane reaches.
pub fn gt_to_anchor(lane: &Polyline, grid: &LaneGrid) -> Result<LaneAnchor> {
    let pts = lane.points();
    if lane.bottom_y() < grid.y_min() || lane.top_y() > grid.y_max() {
        return Err(GeometryError::InvalidGroundTruth(format!(
            "lane y-span [{}, {}] misses grid [{}, {}]",
            lane.top_y(),
            lane.bottom_y(),
            grid.y_min(),
            grid.y_max()
        )));
    }
    if pts.iter().all(|p| p.0 < 0.0 || p.0 > grid.img_w()) {
        return Err(GeometryError::InvalidGroundTruth("lane lies outside image width".into()));
    }

    let low = &pts[..pts.len().min(ANGLE_FIT_POINTS)];
    let (slope, intercept) = fit_x_of_y(low);
    let n = pts.len();
    let (xa, ya) = pts[n - 2];
    let (xb, yb) = pts[n - 1];
    let top_slope = (xb - xa) / (yb - ya);

    let x_ext = |y: f64| -> f64 {
        if let Some(x) = lane.x_at(y) {
            x
        } else if y > lane.bottom_y() {
            slope * y + intercept
        } else {
            xb + top_slope * (y - yb)
        }
    };

    let y_top = lane.top_y();
    let first_covered = (0..grid.n_points()).find(|&i| grid.row_y(i) >= y_top - 1e-9).unwrap_or(grid.n_points());
    let length = (grid.n_points() - first_covered) as f64;
    if length == 0.0 {
        return Err(GeometryError::InvalidGroundTruth("lane covers no grid rows".into()));
    }

    let mut anchor = LaneAnchor {
        start_x: (x_ext(grid.y_max()) / grid.img_w()).clamp(0.0, 1.0),
        start_y: grid.y_max() / grid.img_h(),
        angle: angle_from_slope(slope).clamp(0.0, 1.0),
        length,
        offsets: Vec::new(),
    };
    anchor.offsets = (0..grid.n_points())
        .map(|i| {
            let y = grid.row_y(i);
            x_ext(y) - anchor.ray_x(y, grid)
        })
        .collect();
    Ok(anchor)
}

/// Row-wise Line-IoU between two lanes on the same grid.
///
/// Each valid row is widened to `[x - width, x + width]`. Rows valid in
/// both lanes add their (possibly negative) overlap to the intersection and
/// their hull to the union; rows valid in only one lane add `2 * width` to
/// the union. Returns -1 when neither lane has a valid row.
pub fn line_iou(a: &GridLane, b: &GridLane, width: f64) -> f64 {
    let mut inter = 0.0;
    let mut union = 0.0;
    for (xa, xb) in a.0.iter().zip(b.0.iter()) {
        match (xa, xb) {
            (Some(xa), Some(xb)) => {
                inter += xa.min(*xb) + width - (xa.max(*xb) - width);
                union += xa.max(*xb) + width - (xa.min(*xb) - width);
            }
            (Some(_), None) | (None, Some(_)) => union += 2.0 * width,
            (None, None) => {}
        }
    }
    if union <= 0.0 {
        -1.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression by Line-IoU. Ties in score keep input order.
pub fn nms(cands: &[ScoredLane], grid: &LaneGrid, iou_thresh: f64, width: f64, top_k: usize) -> Vec<ScoredLane> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&i, &j| cands[j].fg_prob.total_cmp(&cands[i].fg_prob));
    let lanes: Vec<GridLane> = cands.iter().map(|c| c.anchor.to_grid_lane(grid)).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= top_k {
            break;
        }
        if kept.iter().all(|&k| line_iou(&lanes[i], &lanes[k], width) < iou_thresh) {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| cands[i].clone()).collect()
}

/// Parses CULane lane text: one lane per line, `x1 y1 x2 y2 ...`.
pub fn parse_culane(text: &str) -> Result<Vec<Polyline>> {
    let mut lanes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| GeometryError::Parse { line: lineno + 1, msg: format!("not a number: {tok:?}") })
            })
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() % 2 != 0 {
            return Err(GeometryError::Parse {
                line: lineno + 1,
                msg: format!("odd number of coordinates ({})", vals.len()),
            });
        }
        let pts = vals.chunks(2).map(|c| (c[0], c[1])).collect();
        let lane = Polyline::new(pts).map_err(|e| GeometryError::Parse { line: lineno + 1, msg: e.to_string() })?;
        lanes.push(lane);
    }
    Ok(lanes)
}

/// Formats lanes as CULane text with five decimals.
pub fn format_culane(lanes: &[Polyline]) -> String {
    let mut out = String::new();
    for lane in lanes {
        let line: Vec<String> = lane.points().iter().map(|(x, y)| format!("{x:.5} {y:.5}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}
