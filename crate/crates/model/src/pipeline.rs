//! Training steps, diffusion sampling with anchor resampling, and batch
//! evaluation helpers.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::DType;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use difflane_core::diffusion::{corrupt, ddim_step, sample_noise, time_pairs, NoiseSchedule, ScaleConfig, Triple};
use difflane_core::geometry::{gt_to_anchor, nms, LaneAnchor, ScoredLane};
use difflane_core::synthdata::{pad_ground_truth, Image, LaneScene, PaddingMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign_loss::{total_loss, LossConfig, LossInputs, LossReport};
use crate::model::{AnchorInput, DiffusionLane};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Linear warmup before the cosine decay.
    pub warmup_steps: u64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub n_train: usize,
    pub noise_scale: f64,
    pub t_max: usize,
    pub seed: u64,
    pub padding: PaddingMode,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 1,
            learning_rate: 5e-5,
            weight_decay: 1e-4,
            warmup_steps: 0,
            grad_clip: 0.0,
            n_train: 160,
            noise_scale: 2.0,
            t_max: 1000,
            seed: 0,
            padding: PaddingMode::Gaussian,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip >= 0.0
            && self.n_train > 0
            && self.noise_scale > 0.0
            && self.t_max > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("train settings must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub steps: usize,
    pub fg_threshold: f64,
    pub nms_iou: f64,
    /// Line-IoU half-width used by NMS.
    pub nms_width: f64,
    pub top_k: usize,
    /// Also resample after the last DDIM step.
    pub resample_last: bool,
    pub n_train: usize,
    pub noise_scale: f64,
    pub t_max: usize,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            steps: 2,
            fg_threshold: 0.4,
            nms_iou: 0.5,
            nms_width: 7.5,
            top_k: 6,
            resample_last: false,
            n_train: 160,
            noise_scale: 2.0,
            t_max: 1000,
            seed: 0,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampling steps must be at least 1".into()));
        }
        if !(self.fg_threshold > 0.0 && self.fg_threshold < 1.0) {
            return Err(Error::Config("fg_threshold must lie in (0, 1)".into()));
        }
        if self.n_train == 0 || self.top_k == 0 || self.t_max == 0 || self.noise_scale <= 0.0 {
            return Err(Error::Config("n_train, top_k, t_max and noise_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine decay from `base` to 0 over `total` steps after a linear warmup.
pub fn cosine_lr(base: f64, step: u64, total: u64, warmup: u64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let p = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Gt anchors of a scene; lanes that miss the grid are skipped.
pub fn scene_anchors(scene: &LaneScene, model: &DiffusionLane) -> Vec<LaneAnchor> {
    scene.lanes.iter().filter_map(|l| gt_to_anchor(l, model.grid()).ok()).collect()
}

/// Noisy decoder inputs for one image: padded, normalized, corrupted at `t`.
pub fn noisy_anchors<R: Rng + ?Sized>(
    gts: &[LaneAnchor],
    model: &DiffusionLane,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    t: i64,
    rng: &mut R,
) -> Result<Vec<LaneAnchor>> {
    let scale = ScaleConfig { noise_scale: cfg.noise_scale };
    let padded = pad_ground_truth(gts, cfg.n_train, cfg.padding, &scale, model.grid(), rng)?;
    padded
        .signal
        .iter()
        .map(|x0| {
            let eps = sample_noise(rng);
            let xt = corrupt(*x0, t, eps, sched)?;
            Ok(LaneAnchor::from_params(scale.denormalize(xt), model.grid()))
        })
        .collect()
}

pub struct Trainer {
    pub model: DiffusionLane,
    pub cfg: TrainConfig,
    opt: AdamW,
    sched: NoiseSchedule,
    step: u64,
    total_steps: u64,
    grad_norms: BTreeMap<String, f64>,
}

impl Trainer {
    /// `total_steps` sets the length of the learning-rate schedule.
    pub fn new(mut model: DiffusionLane, cfg: TrainConfig, total_steps: u64) -> Result<Self> {
        cfg.validate()?;
        model.set_training(true);
        let opt = AdamW::new(
            model.params().vars(),
            ParamsAdamW { lr: cfg.learning_rate, weight_decay: cfg.weight_decay, ..Default::default() },
        )?;
        let sched = NoiseSchedule::cosine(cfg.t_max);
        Ok(Self { model, cfg, opt, sched, step: 0, total_steps, grad_norms: BTreeMap::new() })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Continues counting from a resumed checkpoint.
    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn learning_rate(&self) -> f64 {
        cosine_lr(self.cfg.learning_rate, self.step, self.total_steps, self.cfg.warmup_steps)
    }

    /// L2 norm of every parameter's gradient from the last step.
    pub fn grad_norms(&self) -> &BTreeMap<String, f64> {
        &self.grad_norms
    }

    /// Randomness for step `step`: independent of how earlier steps used theirs.
    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step);
        rng
    }

    /// Forward pass and loss for a batch, without updating parameters.
    pub fn loss(&self, batch: &[&LaneScene]) -> Result<(candle_core::Tensor, LossReport)> {
        let mut rng = self.step_rng();
        self.loss_with_rng(batch, &mut rng)
    }

    fn loss_with_rng(&self, batch: &[&LaneScene], rng: &mut ChaCha8Rng) -> Result<(candle_core::Tensor, LossReport)> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let model = &self.model;
        let mut gts = Vec::with_capacity(batch.len());
        let mut inputs = Vec::with_capacity(batch.len());
        let mut ts = Vec::with_capacity(batch.len());
        for scene in batch {
            let g = scene_anchors(scene, model);
            let t = rng.random_range(0..self.cfg.t_max as i64);
            inputs.push(noisy_anchors(&g, model, &self.cfg, &self.sched, t, rng)?);
            gts.push(g);
            ts.push(t);
        }
        let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
        let pyr = model.encode(&model.image_tensor(&images)?)?;
        let blocks = model.decode(&pyr, AnchorInput::from_anchors(inputs, model.dtype())?, &ts)?;
        let w = &self.cfg.loss.weights;
        let aux = if w.aux != 0.0 { Some(model.aux_forward(&pyr)?) } else { None };
        let seg = if w.seg != 0.0 { Some(model.seg_forward(&pyr)?) } else { None };
        let masks: Vec<&[u8]> = batch.iter().map(|s| s.seg_mask.as_slice()).collect();
        let inp =
            LossInputs { blocks: &blocks, aux: aux.as_deref(), seg_logits: seg.as_ref(), gts: &gts, masks: &masks };
        total_loss(&inp, model.grid(), &self.cfg.loss)
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &[&LaneScene]) -> Result<LossReport> {
        let (loss, report) = self.loss(batch)?;
        let mut grads = loss.backward()?;
        self.record_and_clip(&mut grads)?;
        self.opt.set_learning_rate(self.learning_rate());
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(report)
    }

    fn record_and_clip(&mut self, grads: &mut GradStore) -> Result<()> {
        self.grad_norms.clear();
        let mut sq = 0.0;
        for (name, var) in self.model.params().iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                let n2 = g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                sq += n2;
                self.grad_norms.insert(name.clone(), n2.sqrt());
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { term: "gradient", value: norm });
        }
        if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            let s = self.cfg.grad_clip / norm;
            for var in self.model.params().vars() {
                if let Some(g) = grads.remove(var.as_tensor()) {
                    grads.insert(var.as_tensor(), (g * s)?);
                }
            }
        }
        Ok(())
    }

    pub fn into_model(mut self) -> DiffusionLane {
        self.model.set_training(false);
        self.model
    }
}

/// Keeps the triples of anchors whose foreground probability reaches
/// `threshold` (in order) and tops up to `n_train` with fresh standard-normal
/// triples. Returns the triples and the indices that were kept.
pub fn resample_anchors<R: Rng + ?Sized>(
    fg: &[f64],
    triples: &[Triple],
    threshold: f64,
    n_train: usize,
    rng: &mut R,
) -> (Vec<Triple>, Vec<usize>) {
    let kept: Vec<usize> = (0..triples.len()).filter(|&i| fg[i] >= threshold).take(n_train).collect();
    let mut out: Vec<Triple> = kept.iter().map(|&i| triples[i]).collect();
    while out.len() < n_train {
        out.push(sample_noise(rng));
    }
    (out, kept)
}

/// What one sampling step saw and produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub t_now: i64,
    pub t_next: i64,
    /// Anchors fed to the decoder.
    pub input: Vec<LaneAnchor>,
    /// Last-block predictions with their foreground probabilities.
    pub predictions: Vec<ScoredLane>,
    /// Anchors carried into the next step by resampling.
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InferTrace {
    pub steps: Vec<StepTrace>,
    /// Encoder passes spent on this image.
    pub encoder_calls: usize,
}

impl InferTrace {
    pub fn decoder_input_counts(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.input.len()).collect()
    }
}

/// Rng for sampling image `index` under `seed`.
pub fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a4e);
    rng.set_stream(index);
    rng
}

/// Noise-to-lane sampling: encode once, then alternate decoder passes, DDIM
/// updates and anchor resampling. Returns thresholded, suppressed lanes of
/// the final step.
pub fn infer<R: Rng + ?Sized>(
    model: &DiffusionLane,
    image: &Image,
    cfg: &InferConfig,
    rng: &mut R,
) -> Result<(Vec<ScoredLane>, InferTrace)> {
    cfg.validate()?;
    let grid = *model.grid();
    let sched = NoiseSchedule::cosine(cfg.t_max);
    let scale = ScaleConfig { noise_scale: cfg.noise_scale };
    let calls_before = model.encoder_calls();
    let pyr = model.encode(&model.image_tensor(&[image])?)?;
    let mut trace = InferTrace::default();
    let mut x_t: Vec<Triple> = (0..cfg.n_train).map(|_| sample_noise(rng)).collect();
    // length and offsets carried over for anchors kept by resampling
    let mut carry: Vec<Option<(f64, Vec<f64>)>> = vec![None; cfg.n_train];
    let pairs = time_pairs(cfg.steps, cfg.t_max);
    let mut last: Vec<ScoredLane> = Vec::new();
    for (k, &(t_now, t_next)) in pairs.iter().enumerate() {
        let anchors: Vec<LaneAnchor> = x_t
            .iter()
            .zip(&carry)
            .map(|(s, c)| {
                let mut a = LaneAnchor::from_params(scale.denormalize(*s), &grid);
                if let Some((len, off)) = c {
                    a.length = *len;
                    a.offsets = off.clone();
                }
                a
            })
            .collect();
        let outs = model.decode(&pyr, AnchorInput::from_anchors(vec![anchors.clone()], model.dtype())?, &[t_now])?;
        let out = outs.last().ok_or_else(|| Error::Contract("decoder has no blocks".into()))?;
        let fg = out.fg_probs()?.swap_remove(0);
        let preds = out.to_anchors()?.swap_remove(0);
        let mut x_next = Vec::with_capacity(x_t.len());
        for (xt, p) in x_t.iter().zip(&preds) {
            x_next.push(ddim_step(*xt, scale.normalize(p.params()), t_now, t_next, &sched, &scale)?);
        }
        last = preds.iter().zip(&fg).map(|(a, &f)| ScoredLane { anchor: a.clone(), fg_prob: f }).collect();
        let final_pair = k + 1 == pairs.len();
        let mut kept_n = 0;
        if !final_pair || cfg.resample_last {
            let (next, kept) = resample_anchors(&fg, &x_next, cfg.fg_threshold, cfg.n_train, rng);
            kept_n = kept.len();
            carry = vec![None; cfg.n_train];
            for (slot, &i) in kept.iter().enumerate() {
                carry[slot] = Some((preds[i].length, preds[i].offsets.clone()));
            }
            x_t = next;
        } else {
            x_t = x_next;
        }
        trace.steps.push(StepTrace { t_now, t_next, input: anchors, predictions: last.clone(), kept: kept_n });
    }
    trace.encoder_calls = model.encoder_calls() - calls_before;
    let cands: Vec<ScoredLane> =
        last.into_iter().filter(|c| c.fg_prob >= cfg.fg_threshold && c.anchor.to_polyline(&grid).is_some()).collect();
    Ok((nms(&cands, &grid, cfg.nms_iou, cfg.nms_width, cfg.top_k), trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_lr_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 100, 0), 1.0);
        assert!(cosine_lr(1.0, 100, 100, 0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 50, 100, 0) - 0.5).abs() < 1e-12);
        assert!((cosine_lr(1.0, 0, 100, 10) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn resample_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tri: Vec<Triple> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let fg: Vec<f64> = (0..10).map(|i| if i % 3 == 0 { 0.9 } else { 0.1 }).collect();
        let (out, kept) = resample_anchors(&fg, &tri, 0.4, 10, &mut rng);
        assert_eq!(kept, vec![0, 3, 6, 9]);
        assert_eq!(out.len(), 10);
        assert_eq!(&out[..4], &[tri[0], tri[3], tri[6], tri[9]]);
        let (out, kept) = resample_anchors(&[0.0; 10], &tri, 0.4, 10, &mut rng);
        assert!(kept.is_empty() && out.len() == 10);
    }
}
