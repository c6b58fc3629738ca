//! Bilinear feature sampling along lane anchors.
//!
//! Sample positions are computed on the host from detached anchors, so
//! gradients reach the feature map but not the anchor geometry.

use candle_core::{Device, Result, Tensor};
use difflane_core::geometry::{LaneAnchor, LaneGrid};

/// Gather plan for `n_points` bilinear samples: four corner indices into a
/// flattened `(batch * h * w, C)` map and their weights.
#[derive(Debug, Clone)]
pub struct SamplePlan {
    pub idx: Vec<u32>,
    pub weights: Vec<f64>,
    pub n_points: usize,
}

/// `points` are `(batch, fx, fy)` in feature-lattice coordinates: pixel
/// `(i, j)` of the map sits at `(fx, fy) = (j, i)`. Corners outside the map
/// read zero.
pub fn plan_bilinear(points: &[(usize, f64, f64)], h: usize, w: usize) -> SamplePlan {
    let mut idx = Vec::with_capacity(points.len() * 4);
    let mut weights = Vec::with_capacity(points.len() * 4);
    for &(b, fx, fy) in points {
        let base = b * h * w;
        let (x0, y0) = (fx.floor(), fy.floor());
        let (ax, ay) = (fx - x0, fy - y0);
        for (dy, wy) in [(0.0, 1.0 - ay), (1.0, ay)] {
            for (dx, wx) in [(0.0, 1.0 - ax), (1.0, ax)] {
                let (x, y) = (x0 + dx, y0 + dy);
                let inside = x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64 && fx.is_finite() && fy.is_finite();
                if inside {
                    idx.push((base + y as usize * w + x as usize) as u32);
                    weights.push(wx * wy);
                } else {
                    idx.push(base as u32);
                    weights.push(0.0);
                }
            }
        }
    }
    SamplePlan { idx, weights, n_points: points.len() }
}

/// Applies a plan to a flattened `(batch * h * w, C)` map; returns `(n_points, C)`.
pub fn apply_plan(flat: &Tensor, plan: &SamplePlan) -> Result<Tensor> {
    let c = flat.dim(1)?;
    let dev = flat.device();
    let idx = Tensor::from_slice(&plan.idx, plan.idx.len(), dev)?;
    let w = Tensor::from_slice(&plan.weights, (plan.weights.len(), 1), dev)?.to_dtype(flat.dtype())?;
    let corners = flat.index_select(&idx, 0)?.broadcast_mul(&w)?;
    corners.reshape((plan.n_points, 4, c))?.sum(1)
}

/// `(batch, fx, fy)` sample points along every anchor, `n_samples` per
/// anchor spread uniformly in y over the grid, for a map of the given stride.
/// Offsets are interpolated between grid rows; noisy anchors with zero
/// offsets sample their straight ray.
pub fn anchor_points(
    anchors: &[Vec<LaneAnchor>],
    grid: &LaneGrid,
    n_samples: usize,
    stride: f64,
) -> Vec<(usize, f64, f64)> {
    let n = grid.n_points();
    let mut pts = Vec::with_capacity(anchors.iter().map(Vec::len).sum::<usize>() * n_samples);
    for (b, img) in anchors.iter().enumerate() {
        for a in img {
            let xs = a.full_xs(grid);
            for s in 0..n_samples {
                let r = if n_samples > 1 { s as f64 * (n - 1) as f64 / (n_samples - 1) as f64 } else { 0.0 };
                let (i0, frac) = (r.floor() as usize, r.fract());
                let x = if i0 + 1 < n { xs[i0] * (1.0 - frac) + xs[i0 + 1] * frac } else { xs[n - 1] };
                let y = grid.y_min() + (grid.y_max() - grid.y_min()) * r / (n - 1) as f64;
                pts.push((b, x / stride - 0.5, y / stride - 0.5));
            }
        }
    }
    pts
}

/// Pooled features `(batch, n_anchors, n_samples * C)`, sample-major.
pub fn roi_pool(
    flat: &Tensor,
    hw: (usize, usize),
    stride: f64,
    anchors: &[Vec<LaneAnchor>],
    grid: &LaneGrid,
    n_samples: usize,
) -> Result<Tensor> {
    let b = anchors.len();
    let n = anchors.first().map_or(0, Vec::len);
    if anchors.iter().any(|a| a.len() != n) {
        candle_core::bail!("every image needs the same anchor count");
    }
    let plan = plan_bilinear(&anchor_points(anchors, grid, n_samples, stride), hw.0, hw.1);
    let c = flat.dim(1)?;
    apply_plan(flat, &plan)?.reshape((b, n, n_samples * c))
}

pub fn host_tensor(values: Vec<f64>, shape: &[usize], like: &Tensor) -> Result<Tensor> {
    Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(like.dtype())
}
