//! Encoder, hybrid diffusion decoder, auxiliary head and segmentation head.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Module, Tensor, Var, D};
use difflane_core::geometry::{LaneAnchor, LaneGrid};
use difflane_core::synthdata::Image;
use serde::{Deserialize, Serialize};

use crate::nn::{conv1x1, log_softmax_last, softmax_last, Conv3x3, LayerNorm, Linear, ParamStore, Patchify};
use crate::roi::roi_pool;
use crate::{Error, Result};

/// Width of the per-anchor rows the dynamic convolution mixes.
pub const DYN_WIDTH: usize = 16;
pub const STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub img_w: usize,
    pub img_h: usize,
    /// Rows of the lane grid.
    pub n_points: usize,
    /// Top of the lane grid in pixels; the bottom is the last image row.
    pub y_min: f64,
    /// Pyramid channel width.
    pub channels: usize,
    pub d_model: usize,
    /// Bilinear samples per anchor.
    pub n_samples: usize,
    pub heads: usize,
    pub n_blocks: usize,
    pub ffn_dim: usize,
    /// Learnable anchors of the auxiliary head.
    pub aux_anchors: usize,
    /// Segmentation classes: background plus one per lane slot.
    pub seg_classes: usize,
    /// Backbone widths at strides 4, 8, 16, 32.
    pub backbone: [usize; 4],
    /// Build the self-attention/dynamic-convolution path.
    pub local_path: bool,
    /// Weight-init seed; set from the run seed and left out of the
    /// checkpoint hash.
    #[serde(skip)]
    pub param_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            img_w: 256,
            img_h: 256,
            n_points: 36,
            y_min: 76.8,
            channels: 64,
            d_model: 192,
            n_samples: 36,
            heads: 4,
            n_blocks: 3,
            ffn_dim: 384,
            aux_anchors: 40,
            seg_classes: 5,
            backbone: [32, 48, 64, 96],
            local_path: true,
            param_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !self.img_w.is_multiple_of(32) || !self.img_h.is_multiple_of(32) || self.img_w == 0 || self.img_h == 0 {
            return bad("image size must be a positive multiple of 32");
        }
        if !self.d_model.is_multiple_of(DYN_WIDTH) || !self.d_model.is_multiple_of(self.heads.max(1)) || self.heads == 0
        {
            return bad("d_model must be divisible by 16 and by heads");
        }
        if self.n_blocks == 0 || self.n_samples == 0 || self.channels == 0 || self.seg_classes < 2 {
            return bad("blocks, samples, channels and seg classes must be positive");
        }
        self.grid().map(|_| ()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn grid(&self) -> std::result::Result<LaneGrid, difflane_core::geometry::GeometryError> {
        LaneGrid::with_bottom(self.img_w as f64, self.img_h as f64, self.y_min, self.n_points)
    }
}

/// One pyramid level, kept in both layouts the decoder reads.
#[derive(Debug, Clone)]
pub struct Level {
    /// `(B, C, h, w)`.
    pub map: Tensor,
    /// `(B * h * w, C)` for bilinear gathers.
    pub flat: Tensor,
    /// `(B, h * w, C)` for attention.
    pub seq: Tensor,
    pub hw: (usize, usize),
    pub stride: f64,
}

impl Level {
    fn new(map: Tensor, stride: usize) -> Result<Self> {
        let (b, c, h, w) = map.dims4()?;
        let seq = map.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let flat = seq.reshape((b * h * w, c))?;
        Ok(Self { map, flat, seq, hw: (h, w), stride: stride as f64 })
    }
}

/// Levels `M_0..M_2` at strides 8, 16, 32.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Level>,
}

impl FeaturePyramid {
    pub fn batch(&self) -> usize {
        self.levels[0].map.dims()[0]
    }
}

/// Anchors entering a decoder stage: host geometry for sampling plus the
/// tensors the heads refine.
#[derive(Debug, Clone)]
pub struct AnchorInput {
    pub anchors: Vec<Vec<LaneAnchor>>,
    /// `(B, n, 3)` normalized triples.
    pub triples: Tensor,
    /// `(B, n, 1)` lengths in rows.
    pub lengths: Tensor,
    /// `(B, n, N)` offsets in pixels.
    pub offsets: Tensor,
}

impl AnchorInput {
    pub fn from_anchors(anchors: Vec<Vec<LaneAnchor>>, dtype: DType) -> Result<Self> {
        let b = anchors.len();
        let n = anchors.first().map_or(0, Vec::len);
        let np = anchors.iter().flatten().next().map_or(0, |a| a.offsets.len());
        if anchors.iter().any(|a| a.len() != n) || anchors.iter().flatten().any(|a| a.offsets.len() != np) {
            return Err(Error::Contract("ragged anchor batch".into()));
        }
        let mut tri = Vec::with_capacity(b * n * 3);
        let mut len = Vec::with_capacity(b * n);
        let mut off = Vec::with_capacity(b * n * np);
        for a in anchors.iter().flatten() {
            tri.extend(a.params());
            len.push(a.length);
            off.extend(&a.offsets);
        }
        let mk =
            |v: Vec<f64>, s: &[usize]| -> Result<Tensor> { Ok(Tensor::from_vec(v, s, &Device::Cpu)?.to_dtype(dtype)?) };
        Ok(Self {
            triples: mk(tri, &[b, n, 3])?,
            lengths: mk(len, &[b, n, 1])?,
            offsets: mk(off, &[b, n, np])?,
            anchors,
        })
    }

    pub fn count(&self) -> usize {
        self.anchors.first().map_or(0, Vec::len)
    }
}

/// Per-anchor predictions of one decoder stage.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `(B, n, 2)` background/foreground logits.
    pub cls_logits: Tensor,
    /// `(B, n, 3)` start x, start y, angle; unclamped.
    pub triples: Tensor,
    /// `(B, n, 1)` rows.
    pub lengths: Tensor,
    /// `(B, n, N)` pixels.
    pub offsets: Tensor,
}

impl DecoderOutput {
    pub fn fg_probs(&self) -> Result<Vec<Vec<f64>>> {
        let p = softmax_last(&self.cls_logits.detach())?.narrow(D::Minus1, 1, 1)?.squeeze(D::Minus1)?;
        Ok(p.to_dtype(DType::F64)?.to_vec2()?)
    }

    /// Host anchors: triple clamped to `[0, 1]`, predicted length and offsets.
    pub fn to_anchors(&self) -> Result<Vec<Vec<LaneAnchor>>> {
        let tri: Vec<Vec<Vec<f64>>> = self.triples.detach().to_dtype(DType::F64)?.to_vec3()?;
        let len: Vec<Vec<Vec<f64>>> = self.lengths.detach().to_dtype(DType::F64)?.to_vec3()?;
        let off: Vec<Vec<Vec<f64>>> = self.offsets.detach().to_dtype(DType::F64)?.to_vec3()?;
        let c = |v: f64| if v.is_nan() { 0.5 } else { v.clamp(0.0, 1.0) };
        Ok(tri
            .into_iter()
            .zip(len)
            .zip(off)
            .map(|((t, l), o)| {
                t.into_iter()
                    .zip(l)
                    .zip(o)
                    .map(|((t, l), o)| LaneAnchor {
                        start_x: c(t[0]),
                        start_y: c(t[1]),
                        angle: c(t[2]),
                        length: if l[0].is_finite() { l[0] } else { 0.0 },
                        offsets: o,
                    })
                    .collect()
            })
            .collect())
    }

    /// Refined anchors as the detached input of the next stage.
    pub fn next_input(&self) -> Result<AnchorInput> {
        AnchorInput::from_anchors(self.to_anchors()?, self.triples.dtype())
    }

    pub fn count(&self) -> usize {
        self.cls_logits.dims()[1]
    }
}

struct Encoder {
    stem: Patchify,
    convs: Vec<(Conv3x3, Conv3x3)>,
    laterals: Vec<Linear>,
    smooth: Vec<Conv3x3>,
}

impl Encoder {
    fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let bb = cfg.backbone;
        let stem = Patchify::new(ps, "enc.stem", 3, bb[0], 4)?;
        let mut hw = (cfg.img_h / 4, cfg.img_w / 4);
        let mut convs = Vec::new();
        for k in 0..3 {
            let down = Conv3x3::new(ps, &format!("enc.s{}.down", k), bb[k], bb[k + 1], hw, 2)?;
            hw = down.out_hw();
            let body = Conv3x3::new(ps, &format!("enc.s{}.body", k), bb[k + 1], bb[k + 1], hw, 1)?;
            convs.push((down, body));
        }
        let c = cfg.channels;
        let laterals =
            (0..3).map(|k| Ok(Linear::new(ps, &format!("fpn.lat{k}"), bb[k + 1], c)?)).collect::<Result<Vec<_>>>()?;
        let smooth = (0..3)
            .map(|k| {
                let s = STRIDES[k];
                Ok(Conv3x3::new(ps, &format!("fpn.smooth{k}"), c, c, (cfg.img_h / s, cfg.img_w / s), 1)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stem, convs, laterals, smooth })
    }

    fn forward(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let mut h = self.stem.forward(x)?.relu()?;
        let mut feats = Vec::new();
        for (down, body) in &self.convs {
            h = down.forward(&h)?.relu()?;
            h = body.forward(&h)?.relu()?;
            feats.push(h.clone());
        }
        let mut merged: Vec<Tensor> = vec![conv1x1(&self.laterals[2], &feats[2])?];
        for k in (0..2).rev() {
            let (_, _, hh, ww) = feats[k].dims4()?;
            let up = merged.last().expect("coarser level").upsample_nearest2d(hh, ww)?;
            merged.push((conv1x1(&self.laterals[k], &feats[k])? + up)?);
        }
        merged.reverse();
        let levels = merged
            .iter()
            .zip(&self.smooth)
            .zip(STRIDES)
            .map(|((m, s), st)| Level::new(s.forward(m)?, st))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid { levels })
    }
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, d) = x.dims3()?;
    Ok(x.reshape((b, n, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

/// Multi-head scaled dot-product attention on `(B, n, d)` projections.
fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, nq, d) = q.dims3()?;
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let (q, k, v) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    let att = softmax_last(&(q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?)?;
    Ok(att.matmul(&v)?.transpose(1, 2)?.reshape((b, nq, d))?)
}

struct Heads {
    cls1: Linear,
    cls2: Linear,
    reg1: Linear,
    triple: Linear,
    length: Linear,
    offsets: Linear,
    n_points: usize,
    img_w: f64,
}

impl Heads {
    fn new(ps: &mut ParamStore, name: &str, d: usize, n_points: usize, img_w: f64) -> Result<Self> {
        // foreground prior of about 1%
        let prior = (0.01f64 / 0.99).ln();
        Ok(Self {
            cls1: Linear::scaled(ps, &format!("{name}.cls1"), d, d, 2f64.sqrt())?,
            cls2: Linear::with_bias(ps, &format!("{name}.cls2"), d, 2, 0.1, vec![0.0, prior])?,
            reg1: Linear::scaled(ps, &format!("{name}.reg1"), d, d, 2f64.sqrt())?,
            triple: Linear::scaled(ps, &format!("{name}.triple"), d, 3, 0.01)?,
            length: Linear::scaled(ps, &format!("{name}.length"), d, 1, 0.01)?,
            offsets: Linear::scaled(ps, &format!("{name}.offsets"), d, n_points, 0.01)?,
            n_points,
            img_w,
        })
    }

    fn forward(&self, h: &Tensor, inp: &AnchorInput) -> Result<DecoderOutput> {
        let c = self.cls1.forward(h)?.relu()?;
        let r = self.reg1.forward(h)?.relu()?;
        Ok(DecoderOutput {
            cls_logits: self.cls2.forward(&c)?,
            triples: (&inp.triples + self.triple.forward(&r)?)?,
            lengths: (&inp.lengths + (self.length.forward(&r)? * self.n_points as f64)?)?,
            offsets: (&inp.offsets + (self.offsets.forward(&r)? * self.img_w)?)?,
        })
    }
}

/// RoI features of every anchor projected to `d_model` and tagged with the
/// anchor's own triple.
struct RoiEmbed {
    proj: Linear,
    triple: Linear,
    ln: LayerNorm,
}

impl RoiEmbed {
    fn new(ps: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(ps, &format!("{name}.roi"), cfg.n_samples * cfg.channels, cfg.d_model)?,
            triple: Linear::new(ps, &format!("{name}.triple_emb"), 3, cfg.d_model)?,
            ln: LayerNorm::new(ps, &format!("{name}.roi_ln"), cfg.d_model)?,
        })
    }

    fn forward(&self, inp: &AnchorInput, level: &Level, grid: &LaneGrid, n_samples: usize) -> Result<Tensor> {
        let pooled = roi_pool(&level.flat, level.hw, level.stride, &inp.anchors, grid, n_samples)?;
        let p = (self.proj.forward(&pooled)? + self.triple.forward(&inp.triples)?)?;
        Ok(self.ln.forward(&p)?.relu()?)
    }
}

struct Ffn {
    l1: Linear,
    l2: Linear,
    ln: LayerNorm,
}

impl Ffn {
    fn new(ps: &mut ParamStore, name: &str, d: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::scaled(ps, &format!("{name}.ffn1"), d, hidden, 2f64.sqrt())?,
            l2: Linear::new(ps, &format!("{name}.ffn2"), hidden, d)?,
            ln: LayerNorm::new(ps, &format!("{name}.ffn_ln"), d)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.l2.forward(&self.l1.forward(x)?.relu()?)?;
        Ok(self.ln.forward(&(x + y)?)?)
    }
}

struct LocalPath {
    qkv: Linear,
    out: Linear,
    ln_attn: LayerNorm,
    dyn_params: Linear,
    ln_dyn1: LayerNorm,
    ln_dyn2: LayerNorm,
    dyn_out: Linear,
    ln_out: LayerNorm,
}

impl LocalPath {
    fn new(ps: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(ps, &format!("{name}.sa_qkv"), d, 3 * d)?,
            out: Linear::new(ps, &format!("{name}.sa_out"), d, d)?,
            ln_attn: LayerNorm::new(ps, &format!("{name}.sa_ln"), d)?,
            dyn_params: Linear::scaled(ps, &format!("{name}.dyn_params"), d, 2 * DYN_WIDTH * DYN_WIDTH, 0.5)?,
            ln_dyn1: LayerNorm::new(ps, &format!("{name}.dyn_ln1"), DYN_WIDTH)?,
            ln_dyn2: LayerNorm::new(ps, &format!("{name}.dyn_ln2"), DYN_WIDTH)?,
            dyn_out: Linear::new(ps, &format!("{name}.dyn_out"), d, d)?,
            ln_out: LayerNorm::new(ps, &format!("{name}.dyn_ln"), d)?,
        })
    }

    /// Returns `(local_pre, local_post)`.
    fn forward(&self, p: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
        let (b, n, d) = p.dims3()?;
        let qkv = self.qkv.forward(p)?;
        let (q, k, v) = (qkv.narrow(2, 0, d)?, qkv.narrow(2, d, d)?, qkv.narrow(2, 2 * d, d)?);
        let pre = self.ln_attn.forward(&(p + self.out.forward(&attention(&q, &k, &v, heads)?)?)?)?;
        // per-anchor kernels generated from the interacted features, applied
        // to the anchor's own RoI feature viewed as (d/16) x 16
        let kernels = self.dyn_params.forward(&pre)?.reshape((b * n, 2, DYN_WIDTH, DYN_WIDTH))?;
        let k1 = kernels.narrow(1, 0, 1)?.squeeze(1)?.contiguous()?;
        let k2 = kernels.narrow(1, 1, 1)?.squeeze(1)?.contiguous()?;
        let x = p.reshape((b * n, d / DYN_WIDTH, DYN_WIDTH))?;
        let x = self.ln_dyn1.forward(&x.matmul(&k1)?)?.relu()?;
        let x = self.ln_dyn2.forward(&x.matmul(&k2)?)?.relu()?;
        let x = self.dyn_out.forward(&x.reshape((b, n, d))?)?;
        let post = self.ln_out.forward(&(&pre + x)?)?;
        Ok((pre, post))
    }
}

struct HybridBlock {
    embed: RoiEmbed,
    local: Option<LocalPath>,
    w_in: Var,
    w_out: Var,
    q: Linear,
    k: Linear,
    v: Linear,
    gather_out: Linear,
    ln_gather: LayerNorm,
    ffn: Ffn,
    time: Linear,
    heads: Heads,
}

impl HybridBlock {
    fn new(ps: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let (d, c) = (cfg.d_model, cfg.channels);
        Ok(Self {
            embed: RoiEmbed::new(ps, name, cfg)?,
            local: if cfg.local_path { Some(LocalPath::new(ps, name, d)?) } else { None },
            w_in: ps.constant(&format!("{name}.w_in"), &[1], 0.0)?,
            w_out: ps.constant(&format!("{name}.w_out"), &[1], 0.0)?,
            q: Linear::new(ps, &format!("{name}.gather_q"), d, d)?,
            k: Linear::new(ps, &format!("{name}.gather_k"), c, d)?,
            v: Linear::new(ps, &format!("{name}.gather_v"), c, d)?,
            gather_out: Linear::new(ps, &format!("{name}.gather_out"), d, d)?,
            ln_gather: LayerNorm::new(ps, &format!("{name}.gather_ln"), d)?,
            ffn: Ffn::new(ps, name, d, cfg.ffn_dim)?,
            time: Linear::scaled(ps, &format!("{name}.time"), d, 2 * d, 0.0)?,
            heads: Heads::new(ps, &format!("{name}.head"), d, cfg.n_points, cfg.img_w as f64)?,
        })
    }

    fn forward(
        &self,
        inp: &AnchorInput,
        level: &Level,
        t_feat: &Tensor,
        grid: &LaneGrid,
        cfg: &ModelConfig,
    ) -> Result<DecoderOutput> {
        let p = self.embed.forward(inp, level, grid, cfg.n_samples)?;
        let local = match &self.local {
            Some(l) => Some(l.forward(&p, cfg.heads)?),
            None => None,
        };
        let q_in = match &local {
            Some((pre, _)) => (&p + pre.broadcast_mul(self.w_in.as_tensor())?)?,
            None => p,
        };
        let gathered =
            attention(&self.q.forward(&q_in)?, &self.k.forward(&level.seq)?, &self.v.forward(&level.seq)?, cfg.heads)?;
        let mut g = self.ln_gather.forward(&(&q_in + self.gather_out.forward(&gathered)?)?)?;
        if let Some((_, post)) = &local {
            g = (g + post.broadcast_mul(self.w_out.as_tensor())?)?;
        }
        let h = self.ffn.forward(&g)?;
        let h = scale_shift(&h, &self.time.forward(t_feat)?)?;
        self.heads.forward(&h, inp)
    }
}

/// `h * (1 + scale) + shift` with `ss = [scale, shift]` per batch element.
fn scale_shift(h: &Tensor, ss: &Tensor) -> Result<Tensor> {
    let d = h.dim(2)?;
    let scale = (ss.narrow(1, 0, d)? + 1.0)?.unsqueeze(1)?;
    let shift = ss.narrow(1, d, d)?.unsqueeze(1)?;
    Ok(h.broadcast_mul(&scale)?.broadcast_add(&shift)?)
}

struct AuxStage {
    embed: RoiEmbed,
    ffn: Ffn,
    heads: Heads,
}

struct SegHead {
    conv: Conv3x3,
    out: Linear,
}

/// Sinusoidal features of integer timesteps, `(B, d)`.
pub fn timestep_features(t: &[i64], d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = Vec::with_capacity(t.len() * d);
    for &ti in t {
        let tf = ti as f64;
        let freqs = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / (half.max(2) - 1) as f64).exp());
        let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((tf * f).sin(), (tf * f).cos())).unzip();
        out.extend(s);
        out.extend(c);
        out.extend(std::iter::repeat_n(0.0, d - 2 * half));
    }
    out
}

/// The full detector.
pub struct DiffusionLane {
    cfg: ModelConfig,
    grid: LaneGrid,
    ps: ParamStore,
    encoder: Encoder,
    time1: Linear,
    time2: Linear,
    blocks: Vec<HybridBlock>,
    aux_anchors: Var,
    aux: Vec<AuxStage>,
    seg: SegHead,
    training: bool,
    encoder_calls: AtomicUsize,
}

impl DiffusionLane {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        Self::with_dtype(cfg, DType::F32)
    }

    pub fn with_dtype(cfg: ModelConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid().map_err(|e| Error::Config(e.to_string()))?;
        let mut ps = ParamStore::new(cfg.param_seed, dtype);
        let d = cfg.d_model;
        let encoder = Encoder::new(&mut ps, &cfg)?;
        let time1 = Linear::scaled(&mut ps, "time.l1", d, d, 2f64.sqrt())?;
        let time2 = Linear::new(&mut ps, "time.l2", d, d)?;
        let blocks = (0..cfg.n_blocks)
            .map(|b| HybridBlock::new(&mut ps, &format!("dec{b}"), &cfg))
            .collect::<Result<Vec<_>>>()?;
        let m = cfg.aux_anchors;
        // spread over the bottom edge with a fan of angles
        let init: Vec<f64> = (0..m)
            .flat_map(|i| {
                let u = (i as f64 + 0.5) / m as f64;
                [u, 1.0, 0.8 - 0.6 * u]
            })
            .collect();
        let aux_anchors = ps.from_values("aux.anchors", &[m, 3], init)?;
        let aux = (0..3)
            .map(|s| {
                let name = format!("aux{s}");
                Ok(AuxStage {
                    embed: RoiEmbed::new(&mut ps, &name, &cfg)?,
                    ffn: Ffn::new(&mut ps, &name, d, cfg.ffn_dim)?,
                    heads: Heads::new(&mut ps, &format!("{name}.head"), d, cfg.n_points, cfg.img_w as f64)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let c = cfg.channels;
        let seg = SegHead {
            conv: Conv3x3::new(&mut ps, "seg.conv", c, c, (cfg.img_h / 8, cfg.img_w / 8), 1)?,
            out: Linear::new(&mut ps, "seg.out", c, cfg.seg_classes)?,
        };
        Ok(Self {
            cfg,
            grid,
            ps,
            encoder,
            time1,
            time2,
            blocks,
            aux_anchors,
            aux,
            seg,
            training: false,
            encoder_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &LaneGrid {
        &self.grid
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    pub fn dtype(&self) -> DType {
        self.ps.dtype()
    }

    pub fn set_training(&mut self, on: bool) {
        self.training = on;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Parameters used at inference (everything but the auxiliary and
    /// segmentation heads).
    pub fn inference_param_names(&self) -> Vec<String> {
        self.ps.iter().map(|(k, _)| k.clone()).filter(|k| !k.starts_with("aux") && !k.starts_with("seg")).collect()
    }

    pub fn encoder_calls(&self) -> usize {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    /// `(B, 3, H, W)` input, pixels rescaled to roughly unit range.
    pub fn image_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        let (w, h) = (self.cfg.img_w, self.cfg.img_h);
        let mut data = Vec::with_capacity(images.len() * 3 * w * h);
        for img in images {
            if img.width != w || img.height != h {
                return Err(Error::Shape(format!("image is {}x{}, model expects {w}x{h}", img.width, img.height)));
            }
            data.extend(img.to_chw().into_iter().map(|v| (v - 0.5) * 4.0));
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    pub fn encode(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let dims = images.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != self.cfg.img_h || dims[3] != self.cfg.img_w {
            return Err(Error::Shape(format!("expected (B, 3, {}, {}), got {dims:?}", self.cfg.img_h, self.cfg.img_w)));
        }
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
        self.encoder.forward(images)
    }

    fn time_features(&self, t: &[i64]) -> Result<Tensor> {
        let d = self.cfg.d_model;
        let raw = Tensor::from_vec(timestep_features(t, d), (t.len(), d), &Device::Cpu)?.to_dtype(self.dtype())?;
        Ok(self.time2.forward(&self.time1.forward(&raw)?.relu()?)?)
    }

    /// One decoder stage on pyramid level `level`.
    pub fn hybrid_block(
        &self,
        block: usize,
        inp: &AnchorInput,
        pyr: &FeaturePyramid,
        level: usize,
        t: &[i64],
    ) -> Result<DecoderOutput> {
        let tf = self.time_features(t)?;
        self.blocks[block].forward(inp, &pyr.levels[level], &tf, &self.grid, &self.cfg)
    }

    /// Runs every block; block `b` reads level `2 - b` (coarse to fine) and
    /// the detached refinements of block `b - 1`. `t` holds one timestep per
    /// image.
    pub fn decode(&self, pyr: &FeaturePyramid, input: AnchorInput, t: &[i64]) -> Result<Vec<DecoderOutput>> {
        if t.len() != pyr.batch() || input.anchors.len() != pyr.batch() {
            return Err(Error::Shape("batch size mismatch between pyramid, anchors and timesteps".into()));
        }
        let tf = self.time_features(t)?;
        let n_levels = pyr.levels.len();
        let mut outs: Vec<DecoderOutput> = Vec::with_capacity(self.blocks.len());
        let mut inp = input;
        for (b, block) in self.blocks.iter().enumerate() {
            if b > 0 {
                inp = outs[b - 1].next_input()?;
            }
            let level = n_levels - 1 - (b % n_levels);
            outs.push(block.forward(&inp, &pyr.levels[level], &tf, &self.grid, &self.cfg)?);
        }
        Ok(outs)
    }

    /// Auxiliary head on the learnable anchors, one output per level.
    pub fn aux_forward(&self, pyr: &FeaturePyramid) -> Result<Vec<DecoderOutput>> {
        if !self.training {
            return Err(Error::Contract("auxiliary head is training-only".into()));
        }
        let b = pyr.batch();
        let m = self.cfg.aux_anchors;
        let clamped = self.aux_anchors.as_tensor().clamp(0.0, 1.0)?;
        let host: Vec<Vec<f64>> = clamped.to_dtype(DType::F64)?.to_vec2()?;
        let anchors: Vec<LaneAnchor> =
            host.iter().map(|p| LaneAnchor::from_params([p[0], p[1], p[2]], &self.grid)).collect();
        let mut inp = AnchorInput::from_anchors(vec![anchors; b], self.dtype())?;
        inp.triples = clamped.unsqueeze(0)?.broadcast_as((b, m, 3))?.contiguous()?;
        let mut outs: Vec<DecoderOutput> = Vec::with_capacity(3);
        for (s, stage) in self.aux.iter().enumerate() {
            if s > 0 {
                inp = outs[s - 1].next_input()?;
            }
            let level = &pyr.levels[pyr.levels.len() - 1 - s];
            let p = stage.embed.forward(&inp, level, &self.grid, self.cfg.n_samples)?;
            outs.push(stage.heads.forward(&stage.ffn.forward(&p)?, &inp)?);
        }
        Ok(outs)
    }

    /// `(B, K, h0, w0)` class logits at stride 8.
    pub fn seg_forward(&self, pyr: &FeaturePyramid) -> Result<Tensor> {
        let m0 = &pyr.levels[0].map;
        Ok(conv1x1(&self.seg.out, &self.seg.conv.forward(m0)?.relu()?)?)
    }

    pub fn aux_anchor_var(&self) -> &Var {
        &self.aux_anchors
    }

    /// Per-pixel log-probabilities with the class axis last: `(B, h, w, K)`.
    pub fn seg_log_probs(logits: &Tensor) -> Result<Tensor> {
        Ok(log_softmax_last(&logits.permute((0, 2, 3, 1))?)?)
    }
}
