//! Minimal lane overlays on RGB images.

use difflane_core::geometry::{GridLane, LaneGrid};
use difflane_core::synthdata::Image;

pub const NOISE: [f32; 3] = [0.2, 0.9, 1.0];
pub const SURVIVOR: [f32; 3] = [1.0, 0.85, 0.1];
pub const DETECTION: [f32; 3] = [1.0, 0.1, 0.1];

fn disk(img: &mut Image, cx: f64, cy: f64, radius: f64, rgb: [f32; 3]) {
    let r = radius.ceil() as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (cx.round() as i64 + dx, cy.round() as i64 + dy);
            if x < 0 || y < 0 || x >= img.width as i64 || y >= img.height as i64 {
                continue;
            }
            if ((dx * dx + dy * dy) as f64) <= radius * radius + 0.25 {
                img.set(x as usize, y as usize, rgb);
            }
        }
    }
}

pub fn segment(img: &mut Image, a: (f64, f64), b: (f64, f64), radius: f64, rgb: [f32; 3]) {
    let len = (b.0 - a.0).hypot(b.1 - a.1);
    let n = (len * 2.0).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        disk(img, a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), radius, rgb);
    }
}

/// Connects consecutive present rows of `lane`.
pub fn grid_lane(img: &mut Image, lane: &GridLane, grid: &LaneGrid, radius: f64, rgb: [f32; 3]) {
    let pts: Vec<(f64, f64)> = lane.0.iter().enumerate().filter_map(|(i, x)| x.map(|x| (x, grid.row_y(i)))).collect();
    if let [only] = pts.as_slice() {
        disk(img, only.0, only.1, radius, rgb);
    }
    for w in pts.windows(2) {
        segment(img, w[0], w[1], radius, rgb);
    }
}
