use difflane_core::diffusion::ScaleConfig;
use difflane_core::geometry::{gt_to_anchor, line_iou, nms, GridLane, LaneAnchor, LaneGrid, Polyline, ScoredLane};
use proptest::prelude::*;

fn grid() -> LaneGrid {
    LaneGrid::with_bottom(256.0, 256.0, 76.8, 36).unwrap()
}

fn lane_strategy() -> impl Strategy<Value = GridLane> {
    proptest::collection::vec(proptest::option::weighted(0.8, 0.0f64..256.0), 36).prop_map(GridLane)
}

proptest! {
    #[test]
    fn line_iou_symmetric_and_bounded(a in lane_strategy(), b in lane_strategy(), w in 0.5f64..20.0) {
        let ab = line_iou(&a, &b, w);
        prop_assert_eq!(ab, line_iou(&b, &a, w));
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn line_iou_self_and_translation(a in lane_strategy(), b in lane_strategy(), dx in -50.0f64..50.0) {
        prop_assume!(a.valid_count() > 0);
        prop_assert_eq!(line_iou(&a, &a, 7.5), 1.0);
        let base = line_iou(&a, &b, 7.5);
        let moved = line_iou(&a.translated(dx), &b.translated(dx), 7.5);
        prop_assert!((base - moved).abs() < 1e-9);
    }

    #[test]
    fn params_roundtrip(p in proptest::array::uniform3(0.0f64..=1.0)) {
        let g = grid();
        let a = LaneAnchor::from_params(p, &g);
        prop_assert!(a.offsets.iter().all(|&o| o == 0.0));
        prop_assert_eq!(a.length, 36.0);
        for (got, want) in a.params().iter().zip(&p) {
            prop_assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_roundtrip(p in proptest::array::uniform3(0.0f64..=1.0), scale in 0.1f64..4.0) {
        let c = ScaleConfig { noise_scale: scale };
        let back = c.denormalize(c.normalize(p));
        for k in 0..3 {
            prop_assert!((back[k] - p[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn denormalize_range(s in proptest::array::uniform3(-100.0f64..100.0)) {
        let out = ScaleConfig::default().denormalize(s);
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn straight_lane_roundtrip(x0 in 40.0f64..216.0, slope in -0.4f64..0.4, top_row in 0usize..30) {
        let g = grid();
        let x_top = x0 + slope * (256.0 - 76.8);
        prop_assume!((1.0..255.0).contains(&x_top));
        let pts: Vec<(f64, f64)> = (top_row..36).rev()
            .map(|i| { let y = g.row_y(i); (x0 + slope * (256.0 - y), y) })
            .collect();
        let lane = Polyline::new(pts.clone()).unwrap();
        let anchor = gt_to_anchor(&lane, &g).unwrap();
        let back = anchor.to_polyline(&g).unwrap();
        prop_assert_eq!(back.points().len(), pts.len());
        for (p, q) in pts.iter().zip(back.points()) {
            prop_assert!((p.0 - q.0).abs() < 1e-6);
            prop_assert!((p.1 - q.1).abs() < 1e-9);
        }
    }

    #[test]
    fn nms_idempotent_and_sorted(
        params in proptest::collection::vec((proptest::array::uniform3(0.0f64..=1.0), 0.0f64..1.0), 0..25),
        thresh in 0.1f64..0.9,
    ) {
        let g = grid();
        let cands: Vec<ScoredLane> = params.iter()
            .map(|(p, s)| ScoredLane { anchor: LaneAnchor::from_params(*p, &g), fg_prob: *s })
            .collect();
        let once = nms(&cands, &g, thresh, 7.5, 8);
        prop_assert!(once.len() <= 8);
        prop_assert!(once.windows(2).all(|w| w[0].fg_prob >= w[1].fg_prob));
        prop_assert_eq!(nms(&once, &g, thresh, 7.5, 8), once.clone());
    }
}

#[test]
fn quadratic_offsets_match_analytic_curve() {
    let g = grid();
    let c = 0.001;
    let x = |y: f64| 100.0 + 0.3 * (256.0 - y) + c * (256.0 - y).powi(2);
    let pts: Vec<(f64, f64)> = (0..=90).map(|k| 256.0 - 2.0 * k as f64).map(|y| (x(y), y)).collect();
    let lane = Polyline::new(pts).unwrap();
    let a = gt_to_anchor(&lane, &g).unwrap();
    // oracle: ray through the start point with the least-squares slope of the
    // five lowest samples, subtracted from the analytic curve on every row
    let ys: Vec<f64> = (0..5).map(|k| 256.0 - 2.0 * k as f64).collect();
    let my = ys.iter().sum::<f64>() / 5.0;
    let mx = ys.iter().map(|&y| x(y)).sum::<f64>() / 5.0;
    let slope =
        ys.iter().map(|&y| (y - my) * (x(y) - mx)).sum::<f64>() / ys.iter().map(|&y| (y - my).powi(2)).sum::<f64>();
    let start = mx + slope * (256.0 - my);
    let mut max_oracle: f64 = 0.0;
    for i in 0..36 {
        let y = g.row_y(i);
        let off = x(y) - (start + slope * (y - 256.0));
        max_oracle = max_oracle.max(off.abs());
        if y >= 76.0 + 2.0 {
            assert!((a.offsets[i] - off).abs() < 0.5, "row {i}: {} vs {off}", a.offsets[i]);
        }
    }
    let max_impl = a.offsets.iter().fold(0.0f64, |m, o| m.max(o.abs()));
    assert!((max_impl - max_oracle).abs() < 0.5, "{max_impl} vs {max_oracle}");
    assert!(max_oracle > 20.0);
}

/// Greedy NMS is the unique subset where each candidate, visited by score,
/// is kept iff no kept higher-scored candidate overlaps it.
fn nms_oracle(lanes: &[GridLane], scores: &[f64], thresh: f64, width: f64) -> Vec<usize> {
    let n = lanes.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let rank: Vec<usize> = {
        let mut r = vec![0; n];
        for (k, &i) in order.iter().enumerate() {
            r[i] = k;
        }
        r
    };
    for mask in 0u32..(1 << n) {
        let ok = (0..n).all(|i| {
            let blocked = (0..n)
                .any(|j| mask & (1 << j) != 0 && rank[j] < rank[i] && line_iou(&lanes[i], &lanes[j], width) >= thresh);
            (mask & (1 << i) != 0) == !blocked
        });
        if ok {
            let mut kept: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            kept.sort_by_key(|&i| rank[i]);
            return kept;
        }
    }
    unreachable!("a greedy fixpoint always exists")
}

#[test]
fn nms_matches_exhaustive_oracle_on_cluster() {
    let g = grid();
    let xs = [100.0, 103.0, 108.0, 115.0, 160.0];
    let scores = [0.6, 0.9, 0.7, 0.8, 0.5];
    let cands: Vec<ScoredLane> = xs
        .iter()
        .zip(scores)
        .map(|(&x, s)| ScoredLane { anchor: LaneAnchor::from_params([x / 256.0, 1.0, 0.5], &g), fg_prob: s })
        .collect();
    let lanes: Vec<GridLane> = cands.iter().map(|c| c.anchor.to_grid_lane(&g)).collect();
    for thresh in [0.1, 0.3, 0.5, 0.7] {
        let want: Vec<f64> = nms_oracle(&lanes, &scores, thresh, 7.5).iter().map(|&i| scores[i]).collect();
        let got: Vec<f64> = nms(&cands, &g, thresh, 7.5, 10).iter().map(|c| c.fg_prob).collect();
        assert_eq!(got, want, "thresh {thresh}");
    }
}
