//! CULane-style F1 and TuSimple-style accuracy/FP/FN over lanes sampled on
//! a common grid.

use std::fmt::Write as _;

use crate::geometry::{fit_x_of_y, line_iou, GridLane, LaneGrid};

pub const CULANE_REF_WIDTH: f64 = 1640.0;
pub const CULANE_LANE_WIDTH: f64 = 30.0;
pub const TUSIMPLE_PIXEL_THRESH: f64 = 20.0;
pub const TUSIMPLE_MATCH_RATIO: f64 = 0.85;

/// Line-IoU half-width equivalent of CULane's 30 px lanes at `img_w`.
pub fn culane_width(img_w: f64) -> f64 {
    CULANE_LANE_WIDTH * img_w / CULANE_REF_WIDTH
}

/// Per-image bookkeeping.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageMatch {
    /// `(pred, gt)` index pairs counted as matches.
    pub pairs: Vec<(usize, usize)>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Correct and total gt points (TuSimple mode only).
    pub correct_points: usize,
    pub total_points: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub images: Vec<ImageMatch>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Harmonic mean with `0/0 -> 0`.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * precision * recall, precision + recall)
}

/// Maximum-cardinality bipartite matching (augmenting paths).
/// `adj[p]` lists the gts prediction `p` may match. Returns `(pred, gt)`
/// pairs sorted by prediction index.
pub fn max_matching(adj: &[Vec<usize>], n_gt: usize) -> Vec<(usize, usize)> {
    fn augment(p: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &g in &adj[p] {
            if seen[g] {
                continue;
            }
            seen[g] = true;
            if owner[g].is_none_or(|q| augment(q, adj, seen, owner)) {
                owner[g] = Some(p);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; n_gt];
    for p in 0..adj.len() {
        let mut seen = vec![false; n_gt];
        augment(p, adj, &mut seen, &mut owner);
    }
    let mut pairs: Vec<(usize, usize)> = owner.iter().enumerate().filter_map(|(g, p)| p.map(|p| (p, g))).collect();
    pairs.sort_unstable();
    pairs
}

/// CULane-style evaluation: a prediction and a gt match when their Line-IoU
/// at `width` reaches `iou_thresh`; TP is the size of a maximum matching.
pub fn culane_f1(preds: &[Vec<GridLane>], gts: &[Vec<GridLane>], iou_thresh: f64, width: f64) -> EvalReport {
    assert_eq!(preds.len(), gts.len(), "one prediction list per image");
    let mut report = EvalReport::default();
    for (p_img, g_img) in preds.iter().zip(gts) {
        let adj: Vec<Vec<usize>> = p_img
            .iter()
            .map(|p| (0..g_img.len()).filter(|&g| line_iou(p, &g_img[g], width) >= iou_thresh).collect())
            .collect();
        let pairs = max_matching(&adj, g_img.len());
        let tp = pairs.len();
        let m = ImageMatch { tp, fp: p_img.len() - tp, fn_: g_img.len() - tp, pairs, ..Default::default() };
        report.tp += m.tp;
        report.fp += m.fp;
        report.fn_ += m.fn_;
        report.images.push(m);
    }
    report.precision = ratio(report.tp as f64, (report.tp + report.fp) as f64);
    report.recall = ratio(report.tp as f64, (report.tp + report.fn_) as f64);
    report.f1 = f1_score(report.precision, report.recall);
    report
}

/// Angle (radians) between a lane and the vertical image axis, from a
/// least-squares fit of x against y.
pub fn angle_from_vertical(lane: &GridLane, grid: &LaneGrid) -> f64 {
    let pts: Vec<(f64, f64)> = lane.0.iter().enumerate().filter_map(|(i, x)| x.map(|x| (x, grid.row_y(i)))).collect();
    if pts.len() < 2 {
        return 0.0;
    }
    fit_x_of_y(&pts).0.abs().atan()
}

/// Distance below which a point on a lane tilted by `angle` is correct.
pub fn tusimple_threshold(angle: f64) -> f64 {
    TUSIMPLE_PIXEL_THRESH / angle.cos()
}

fn correct_points(pred: &GridLane, gt: &GridLane, thresh: f64) -> usize {
    gt.0.iter().zip(&pred.0).filter(|(g, p)| matches!((g, p), (Some(g), Some(p)) if (p - g).abs() < thresh)).count()
}

/// TuSimple-style evaluation. Every gt takes the prediction with the most
/// correct points; the gt is matched when that ratio reaches 0.85.
/// Predictions matched by no gt are false positives.
pub fn tusimple_accuracy(preds: &[Vec<GridLane>], gts: &[Vec<GridLane>], grid: &LaneGrid) -> EvalReport {
    assert_eq!(preds.len(), gts.len(), "one prediction list per image");
    let mut report = EvalReport::default();
    let (mut n_pred, mut n_gt) = (0usize, 0usize);
    let (mut correct, mut total) = (0usize, 0usize);
    for (p_img, g_img) in preds.iter().zip(gts) {
        let mut m = ImageMatch::default();
        let mut used = vec![false; p_img.len()];
        for (gi, gt) in g_img.iter().enumerate() {
            let thresh = tusimple_threshold(angle_from_vertical(gt, grid));
            let pts = gt.valid_count();
            let best = p_img
                .iter()
                .enumerate()
                .map(|(pi, p)| (pi, correct_points(p, gt, thresh)))
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
            let hits = best.map_or(0, |b| b.1);
            m.correct_points += hits;
            m.total_points += pts;
            match best {
                Some((pi, hits)) if pts > 0 && hits as f64 / pts as f64 >= TUSIMPLE_MATCH_RATIO => {
                    used[pi] = true;
                    m.pairs.push((pi, gi));
                    m.tp += 1;
                }
                _ => m.fn_ += 1,
            }
        }
        m.fp = used.iter().filter(|u| !**u).count();
        n_pred += p_img.len();
        n_gt += g_img.len();
        correct += m.correct_points;
        total += m.total_points;
        report.tp += m.tp;
        report.fp += m.fp;
        report.fn_ += m.fn_;
        report.images.push(m);
    }
    report.accuracy = ratio(correct as f64, total as f64);
    report.fp_rate = ratio(report.fp as f64, n_pred as f64);
    report.fn_rate = ratio(report.fn_ as f64, n_gt as f64);
    report.precision = ratio(report.tp as f64, (report.tp + report.fp) as f64);
    report.recall = ratio(report.tp as f64, (report.tp + report.fn_) as f64);
    report.f1 = f1_score(report.precision, report.recall);
    report
}

impl EvalReport {
    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in [("tp", self.tp), ("fp", self.fp), ("fn", self.fn_)] {
            let _ = writeln!(s, "{k}={v}");
        }
        for (k, v) in [
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("accuracy", self.accuracy),
            ("fp_rate", self.fp_rate),
            ("fn_rate", self.fn_rate),
        ] {
            let _ = writeln!(s, "{k}={v:.6}");
        }
        s
    }

    /// Per-image CSV; `names[i]` labels image `i`.
    pub fn matches_csv(&self, names: &[String]) -> String {
        let mut s = String::from("image,tp,fp,fn,correct_points,total_points,pairs\n");
        for (m, name) in self.images.iter().zip(names) {
            let pairs: Vec<String> = m.pairs.iter().map(|(p, g)| format!("{p}:{g}")).collect();
            let _ = writeln!(
                s,
                "{name},{},{},{},{},{},{}",
                m.tp,
                m.fp,
                m.fn_,
                m.correct_points,
                m.total_points,
                pairs.join(" ")
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> LaneGrid {
        LaneGrid::with_bottom(256.0, 256.0, 76.8, 36).unwrap()
    }

    fn vertical(x: f64) -> GridLane {
        GridLane(vec![Some(x); 36])
    }

    #[test]
    fn perfect_predictions() {
        let gts = vec![vec![vertical(40.0), vertical(120.0)], vec![vertical(200.0)]];
        let r = culane_f1(&gts, &gts, 0.5, culane_width(256.0));
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = tusimple_accuracy(&gts, &gts, &grid());
        assert_eq!((r.accuracy, r.fp_rate, r.fn_rate), (1.0, 0.0, 0.0));
    }

    #[test]
    fn no_predictions() {
        let gts = vec![vec![vertical(40.0)]];
        let r = culane_f1(&[vec![]], &gts, 0.5, 4.0);
        assert_eq!((r.recall, r.f1, r.fn_), (0.0, 0.0, 1));
        let r = culane_f1(&[vec![]], &[vec![]], 0.5, 4.0);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn tusimple_threshold_boundary() {
        assert_eq!(tusimple_threshold(0.0), 20.0);
        let g = grid();
        let gt = vec![vec![vertical(100.0)]];
        let near = tusimple_accuracy(&[vec![vertical(119.9)]], &gt, &g);
        assert_eq!(near.accuracy, 1.0);
        let far = tusimple_accuracy(&[vec![vertical(120.1)]], &gt, &g);
        assert_eq!(far.accuracy, 0.0);
        let off = tusimple_accuracy(&[vec![vertical(125.0)]], &gt, &g);
        assert_eq!((off.accuracy, off.fn_rate, off.fp_rate), (0.0, 1.0, 1.0));
    }

    #[test]
    fn tilted_threshold_grows() {
        let g = grid();
        let lane = GridLane((0..36).map(|i| Some(50.0 + g.row_y(i))).collect());
        let a = angle_from_vertical(&lane, &g);
        assert!((a - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        assert!((tusimple_threshold(a) - 20.0 * 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn matching_prefers_augmenting() {
        // p0 -> {g0, g1}, p1 -> {g0}: greedy would strand p1
        let pairs = max_matching(&[vec![0, 1], vec![0]], 2);
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn report_text() {
        let gts = vec![vec![vertical(40.0)]];
        let r = culane_f1(&gts, &gts, 0.5, 4.0);
        assert!(r.to_key_values().contains("f1=1.000000"));
        assert_eq!(r.matches_csv(&["a".into()]).lines().nth(1), Some("a,1,0,0,0,0,0:0"));
    }
}
