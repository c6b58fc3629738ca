//! SimOTA label assignment and the training losses.

use std::cmp::Ordering;

use candle_core::{DType, Device, Tensor, D};
use difflane_core::geometry::{line_iou, GridLane, LaneAnchor, LaneGrid, ANGLE_CLAMP};
use serde::{Deserialize, Serialize};

use crate::model::{DecoderOutput, DiffusionLane};
use crate::nn::log_softmax_last;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub liou: f64,
    pub smooth_l1: f64,
    pub angle: f64,
    pub seg: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 2.0, liou: 2.0, smooth_l1: 0.2, angle: 0.02, seg: 1.0, aux: 1.0 }
    }
}

/// Denominator of the classification loss of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FocalNorm {
    /// Mean over all anchors.
    Anchors,
    /// Sum over anchors divided by the number of positives (at least 1).
    #[default]
    Positives,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub focal_norm: FocalNorm,
    /// Line-IoU half-width (pixels) for the loss and the assignment cost.
    pub liou_width: f64,
    pub smooth_l1_beta: f64,
    pub cost_cls: f64,
    pub cost_reg: f64,
    pub cost_dist: f64,
    /// IoUs summed for the dynamic k.
    pub top_q: usize,
    pub k_max: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            focal_norm: FocalNorm::Positives,
            liou_width: 7.5,
            smooth_l1_beta: 1.0,
            cost_cls: 1.0,
            cost_reg: 3.0,
            cost_dist: 1.0,
            top_q: 4,
            k_max: 4,
        }
    }
}

/// `labels[a]` is the gt anchor `a` regresses, `None` for background.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pub labels: Vec<Option<usize>>,
    pub per_gt: Vec<Vec<usize>>,
}

impl Assignment {
    pub fn positives(&self) -> Vec<(usize, usize)> {
        self.labels.iter().enumerate().filter_map(|(a, g)| g.map(|g| (a, g))).collect()
    }
}

/// Focal classification cost of calling a prediction with foreground
/// probability `p` a positive.
pub fn focal_cost(p: f64, alpha: f64, gamma: f64) -> f64 {
    let eps = 1e-12;
    let pos = -(p + eps).ln() * alpha * (1.0 - p).powf(gamma);
    let neg = -(1.0 - p + eps).ln() * (1.0 - alpha) * p.powf(gamma);
    pos - neg
}

/// Euclidean distance between start points in normalized image units.
pub fn start_distance(a: &LaneAnchor, g: &LaneAnchor) -> f64 {
    (a.start_x - g.start_x).hypot(a.start_y - g.start_y)
}

/// `(cost[a][g], iou[a][g])`.
pub fn simota_costs(
    fg: &[f64],
    preds: &[LaneAnchor],
    gts: &[LaneAnchor],
    grid: &LaneGrid,
    cfg: &LossConfig,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let gl: Vec<GridLane> = gts.iter().map(|g| g.to_grid_lane(grid)).collect();
    let mut cost = Vec::with_capacity(preds.len());
    let mut iou = Vec::with_capacity(preds.len());
    for (p, &f) in preds.iter().zip(fg) {
        let pl = p.to_grid_lane(grid);
        let fc = focal_cost(f, cfg.focal_alpha, cfg.focal_gamma);
        let ious: Vec<f64> = gl.iter().map(|g| line_iou(&pl, g, cfg.liou_width)).collect();
        cost.push(
            gts.iter()
                .zip(&ious)
                .map(|(g, i)| cfg.cost_cls * fc + cfg.cost_reg * (1.0 - i) + cfg.cost_dist * start_distance(p, g))
                .collect(),
        );
        iou.push(ious);
    }
    (cost, iou)
}

fn by_cost(a: (f64, usize), b: (f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Dynamic-k assignment from precomputed matrices.
///
/// Each gt takes `k = clamp(round(sum of its top-q positive IoUs), 1, k_max)`
/// lowest-cost anchors; an anchor claimed by several gts keeps the cheapest.
/// A gt left empty then takes its cheapest background anchor (or, failing
/// that, the cheapest anchor of a gt holding more than one). Ties go to the
/// lower index.
#[allow(clippy::needless_range_loop)]
pub fn simota_from_costs(cost: &[Vec<f64>], iou: &[Vec<f64>], n_gt: usize, cfg: &LossConfig) -> Assignment {
    let n = cost.len();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    if n == 0 || n_gt == 0 {
        return Assignment { labels, per_gt: vec![Vec::new(); n_gt] };
    }
    let mut claims: Vec<Vec<usize>> = vec![Vec::new(); n];
    for g in 0..n_gt {
        let mut ious: Vec<f64> = (0..n).map(|a| iou[a][g].max(0.0)).collect();
        ious.sort_by(|x, y| y.total_cmp(x));
        let sum: f64 = ious.iter().take(cfg.top_q).sum();
        let k = (sum.round() as usize).clamp(1, cfg.k_max.max(1)).min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| by_cost((cost[x][g], x), (cost[y][g], y)));
        for &a in &order[..k] {
            claims[a].push(g);
        }
    }
    for a in 0..n {
        labels[a] = claims[a].iter().copied().min_by(|&x, &y| by_cost((cost[a][x], x), (cost[a][y], y)));
    }
    for g in 0..n_gt {
        if labels.contains(&Some(g)) {
            continue;
        }
        let counts = |labels: &[Option<usize>], owner: usize| labels.iter().filter(|l| **l == Some(owner)).count();
        let free = (0..n).filter(|&a| labels[a].is_none()).min_by(|&x, &y| by_cost((cost[x][g], x), (cost[y][g], y)));
        let pick = free.or_else(|| {
            (0..n)
                .filter(|&a| labels[a].is_some_and(|o| counts(&labels, o) > 1))
                .min_by(|&x, &y| by_cost((cost[x][g], x), (cost[y][g], y)))
        });
        if let Some(a) = pick {
            labels[a] = Some(g);
        }
    }
    let mut per_gt = vec![Vec::new(); n_gt];
    for (a, l) in labels.iter().enumerate() {
        if let Some(g) = l {
            per_gt[*g].push(a);
        }
    }
    Assignment { labels, per_gt }
}

pub fn simota_assign(
    fg: &[f64],
    preds: &[LaneAnchor],
    gts: &[LaneAnchor],
    grid: &LaneGrid,
    cfg: &LossConfig,
) -> Assignment {
    let (cost, iou) = simota_costs(fg, preds, gts, grid, cfg);
    simota_from_costs(&cost, &iou, gts.len(), cfg)
}

fn host(values: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

fn zero(dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, &Device::Cpu)?)
}

/// Mean over anchors of `-alpha (1 - p_t)^gamma ln p_t`, with the same alpha
/// for both classes. `logits` is `(n, 2)`.
pub fn focal_loss(logits: &Tensor, labels: &[bool], alpha: f64, gamma: f64) -> Result<Tensor> {
    let n = labels.len();
    if n == 0 {
        return zero(logits.dtype());
    }
    let onehot: Vec<f64> = labels.iter().flat_map(|&fg| if fg { [0.0, 1.0] } else { [1.0, 0.0] }).collect();
    let onehot = host(onehot, &[n, 2], logits.dtype())?;
    let logpt = (log_softmax_last(logits)? * onehot)?.sum(D::Minus1)?;
    let mod_factor =
        if gamma == 0.0 { logpt.ones_like()? } else { logpt.exp()?.affine(-1.0, 1.0)?.relu()?.powf(gamma)? };
    Ok(((mod_factor * logpt)?.mean_all()? * (-alpha))?)
}

/// `0.5 m^2 / beta + (|d| - m)` with `m = min(|d|, beta)`, averaged.
pub fn smooth_l1(diff: &Tensor, beta: f64) -> Result<Tensor> {
    let a = diff.abs()?;
    let m = a.clamp(0.0, beta)?;
    Ok(((m.sqr()? * (0.5 / beta))? + (a - m)?)?.mean_all()?)
}

/// Per-row x of predicted lanes: ray through the start point plus offsets.
/// `triples` is `(P, 3)`, `offsets` `(P, N)`; returns `(P, N)`.
pub fn lane_xs(triples: &Tensor, offsets: &Tensor, grid: &LaneGrid) -> Result<Tensor> {
    let dt = triples.dtype();
    let sx = (triples.narrow(1, 0, 1)? * grid.img_w())?;
    let sy = (triples.narrow(1, 1, 1)? * grid.img_h())?;
    let theta = (triples.narrow(1, 2, 1)?.clamp(ANGLE_CLAMP.0, ANGLE_CLAMP.1)? * std::f64::consts::PI)?;
    let cot = (theta.cos()? / theta.sin()?)?;
    let ys = host(grid.y_grid(), &[1, grid.n_points()], dt)?;
    let dy = sy.broadcast_sub(&ys)?;
    Ok((dy.broadcast_mul(&cot)?.broadcast_add(&sx)? + offsets)?)
}

/// Line-IoU loss terms `1 - IoU` per lane, evaluated on the rows where the
/// target lane exists. `target`/`mask` are `(P, N)` host values.
pub fn liou_loss(pred_xs: &Tensor, target: &[f64], mask: &[f64], width: f64) -> Result<Tensor> {
    let (p, n) = pred_xs.dims2()?;
    if p == 0 {
        return zero(pred_xs.dtype());
    }
    let dt = pred_xs.dtype();
    let t = host(target.to_vec(), &[p, n], dt)?;
    let m = host(mask.to_vec(), &[p, n], dt)?;
    let d = (pred_xs - t)?.abs()?;
    let inter = ((d.neg()? + 2.0 * width)? * &m)?.sum(1)?;
    let union = ((d + 2.0 * width)? * &m)?.sum(1)?;
    Ok((inter / union)?.affine(-1.0, 1.0)?.mean_all()?)
}

/// Regression targets of a gt anchor on the grid: per-row x and a validity
/// mask.
pub fn row_targets(gt: &LaneAnchor, grid: &LaneGrid) -> (Vec<f64>, Vec<f64>) {
    let lane = gt.to_grid_lane(grid);
    let xs = lane.0.iter().map(|x| x.unwrap_or(0.0)).collect();
    let mask = lane.0.iter().map(|x| if x.is_some() { 1.0 } else { 0.0 }).collect();
    (xs, mask)
}

/// Unweighted components of one supervised stage (or their sums).
#[derive(Debug, Clone, Default)]
pub struct StageLoss {
    pub cls: Tensor0,
    pub liou: Tensor0,
    pub smooth_l1: Tensor0,
    pub angle: Tensor0,
}

/// Scalar tensor wrapper with a zero default.
#[derive(Debug, Clone, Default)]
pub struct Tensor0(pub Option<Tensor>);

impl Tensor0 {
    fn add(&mut self, t: Tensor) -> Result<()> {
        self.0 = Some(match self.0.take() {
            Some(s) => (s + t)?,
            None => t,
        });
        Ok(())
    }

    pub fn value(&self) -> Result<f64> {
        match &self.0 {
            Some(t) => Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?),
            None => Ok(0.0),
        }
    }

    fn scaled(&self, w: f64) -> Result<Option<Tensor>> {
        Ok(match &self.0 {
            Some(t) => Some((t * w)?),
            None => None,
        })
    }
}

impl StageLoss {
    fn weighted(&self, w: &LossWeights) -> Result<Option<Tensor>> {
        let mut acc = Tensor0::default();
        for (t, wt) in
            [(&self.cls, w.cls), (&self.liou, w.liou), (&self.smooth_l1, w.smooth_l1), (&self.angle, w.angle)]
        {
            if let Some(s) = t.scaled(wt)? {
                acc.add(s)?;
            }
        }
        Ok(acc.0)
    }
}

/// Losses of one stage for image `b` of the batch against `gts`.
pub fn stage_loss(
    out: &DecoderOutput,
    b: usize,
    gts: &[LaneAnchor],
    grid: &LaneGrid,
    cfg: &LossConfig,
) -> Result<(StageLoss, Assignment)> {
    let fg = out.fg_probs()?.swap_remove(b);
    let preds = out.to_anchors()?.swap_remove(b);
    let asg = simota_assign(&fg, &preds, gts, grid, cfg);
    let logits = out.cls_logits.get(b)?;
    let labels: Vec<bool> = asg.labels.iter().map(Option::is_some).collect();
    let mut loss = StageLoss::default();
    let pos = asg.positives();
    let cls = focal_loss(&logits, &labels, cfg.focal_alpha, cfg.focal_gamma)?;
    loss.cls.add(match cfg.focal_norm {
        FocalNorm::Anchors => cls,
        FocalNorm::Positives => (cls * (labels.len() as f64 / pos.len().max(1) as f64))?,
    })?;
    if pos.is_empty() {
        return Ok((loss, asg));
    }
    let dt = logits.dtype();
    let idx = Tensor::from_vec(pos.iter().map(|p| p.0 as u32).collect::<Vec<_>>(), pos.len(), &Device::Cpu)?;
    let tri = out.triples.get(b)?.index_select(&idx, 0)?;
    let len = out.lengths.get(b)?.index_select(&idx, 0)?;
    let off = out.offsets.get(b)?.index_select(&idx, 0)?;
    let n = grid.n_points() as f64;
    let (mut target, mut mask, mut reg_t, mut ang_t) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &(_, g) in &pos {
        let (x, m) = row_targets(&gts[g], grid);
        target.extend(x);
        mask.extend(m);
        reg_t.extend([gts[g].start_x, gts[g].start_y, gts[g].length / n]);
        ang_t.push(gts[g].angle);
    }
    let xs = lane_xs(&tri, &off, grid)?;
    loss.liou.add(liou_loss(&xs, &target, &mask, cfg.liou_width)?)?;
    let reg_pred = Tensor::cat(&[tri.narrow(1, 0, 2)?, (len / n)?], 1)?;
    let reg_diff = (reg_pred - host(reg_t, &[pos.len(), 3], dt)?)?;
    loss.smooth_l1.add(smooth_l1(&reg_diff, cfg.smooth_l1_beta)?)?;
    let ang_diff = (tri.narrow(1, 2, 1)? - host(ang_t, &[pos.len(), 1], dt)?)?;
    loss.angle.add(smooth_l1(&ang_diff, cfg.smooth_l1_beta)?)?;
    Ok((loss, asg))
}

/// Nearest-label downsampling of a full-resolution mask to an `h x w`
/// lattice: each cell takes the label under its center pixel.
pub fn downsample_mask(mask: &[u8], img_w: usize, img_h: usize, h: usize, w: usize) -> Vec<u8> {
    let (sy, sx) = (img_h / h, img_w / w);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(mask[(y * sy + sy / 2) * img_w + x * sx + sx / 2]);
        }
    }
    out
}

/// Mean pixel cross-entropy. `logits` is `(B, K, h, w)`; `labels` holds
/// `B * h * w` class indices.
pub fn seg_loss(logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let (b, k, h, w) = logits.dims4()?;
    if labels.len() != b * h * w {
        return Err(Error::Shape(format!("{} labels for {b}x{h}x{w} logits", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Shape(format!("label {bad} with only {k} classes")));
    }
    let mut onehot = vec![0.0; b * h * w * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l as usize] = 1.0;
    }
    let logp = DiffusionLane::seg_log_probs(logits)?;
    let oh = host(onehot, &[b, h, w, k], logits.dtype())?;
    Ok(((logp * oh)?.sum(D::Minus1)?.mean_all()? * -1.0)?)
}

/// Host values of every loss component; `total` is the weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub liou: f64,
    pub smooth_l1: f64,
    pub angle: f64,
    pub seg: f64,
    pub aux: f64,
    pub total: f64,
}

impl LossReport {
    pub fn check_finite(&self) -> Result<()> {
        for (term, value) in [
            ("cls", self.cls),
            ("liou", self.liou),
            ("smooth_l1", self.smooth_l1),
            ("angle", self.angle),
            ("seg", self.seg),
            ("aux", self.aux),
            ("total", self.total),
        ] {
            if !value.is_finite() {
                return Err(Error::NonFinite { term, value });
            }
        }
        Ok(())
    }
}

/// Everything `total_loss` needs about a batch.
pub struct LossInputs<'a> {
    pub blocks: &'a [DecoderOutput],
    pub aux: Option<&'a [DecoderOutput]>,
    pub seg_logits: Option<&'a Tensor>,
    /// Gt anchors per image.
    pub gts: &'a [Vec<LaneAnchor>],
    /// Full-resolution masks per image.
    pub masks: &'a [&'a [u8]],
}

/// Deep-supervised loss over all decoder blocks plus the auxiliary and
/// segmentation terms, averaged over images.
pub fn total_loss(inp: &LossInputs, grid: &LaneGrid, cfg: &LossConfig) -> Result<(Tensor, LossReport)> {
    let n_img = inp.gts.len();
    if n_img == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut main = StageLoss::default();
    let mut aux = Tensor0::default();
    for b in 0..n_img {
        for out in inp.blocks {
            let (l, _) = stage_loss(out, b, &inp.gts[b], grid, cfg)?;
            for (acc, t) in [
                (&mut main.cls, l.cls),
                (&mut main.liou, l.liou),
                (&mut main.smooth_l1, l.smooth_l1),
                (&mut main.angle, l.angle),
            ] {
                if let Some(t) = t.0 {
                    acc.add(t)?;
                }
            }
        }
        for out in inp.aux.unwrap_or(&[]) {
            let (l, _) = stage_loss(out, b, &inp.gts[b], grid, cfg)?;
            if let Some(t) = l.weighted(&cfg.weights)? {
                aux.add(t)?;
            }
        }
    }
    let mut seg = Tensor0::default();
    if let Some(logits) = inp.seg_logits {
        let (_, _, h, w) = logits.dims4()?;
        let labels: Vec<u8> = inp
            .masks
            .iter()
            .flat_map(|m| downsample_mask(m, grid.img_w() as usize, grid.img_h() as usize, h, w))
            .collect();
        seg.add(seg_loss(logits, &labels)?)?;
    }
    let inv = 1.0 / n_img as f64;
    let scale = |t: &Tensor0| -> Result<Tensor0> { Ok(Tensor0(t.scaled(inv)?)) };
    let main = StageLoss {
        cls: scale(&main.cls)?,
        liou: scale(&main.liou)?,
        smooth_l1: scale(&main.smooth_l1)?,
        angle: scale(&main.angle)?,
    };
    let aux = scale(&aux)?;
    let w = &cfg.weights;
    let mut total = Tensor0::default();
    if let Some(t) = main.weighted(w)? {
        total.add(t)?;
    }
    for (t, wt) in [(&seg, w.seg), (&aux, w.aux)] {
        if let Some(s) = t.scaled(wt)? {
            total.add(s)?;
        }
    }
    let report = LossReport {
        cls: main.cls.value()?,
        liou: main.liou.value()?,
        smooth_l1: main.smooth_l1.value()?,
        angle: main.angle.value()?,
        seg: seg.value()?,
        aux: aux.value()?,
        total: total.value()?,
    };
    report.check_finite()?;
    let dt = inp.blocks.first().map_or(DType::F32, |o| o.cls_logits.dtype());
    let total = match total.0 {
        Some(t) => t,
        None => zero(dt)?,
    };
    Ok((total, report))
}
