//! Parameter storage and the small set of layers the model is built from.
//!
//! Everything is composed of primitive tensor ops so that autograd covers it.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Result, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named trainable parameters, initialized from a seeded generator in
/// construction order.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { vars: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed), device: Device::Cpu, dtype }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.vars.contains_key(name) {
            candle_core::bail!("duplicate parameter {name}");
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        self.insert(name, vec![value; shape.iter().product()], shape)
    }

    pub fn from_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        self.insert(name, values, shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

/// `y = x W + b`, with `W` stored as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: Var,
    b: Var,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::scaled(ps, name, d_in, d_out, 1.0)
    }

    /// Default init multiplied by `gain`; a zero gain gives an all-zero layer.
    pub fn scaled(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, gain: f64) -> Result<Self> {
        let bound = gain * (3.0 / d_in as f64).sqrt();
        let w = if gain == 0.0 {
            ps.constant(&format!("{name}.weight"), &[d_in, d_out], 0.0)?
        } else {
            ps.uniform(&format!("{name}.weight"), &[d_in, d_out], bound)?
        };
        let b = ps.constant(&format!("{name}.bias"), &[d_out], 0.0)?;
        Ok(Self { w, b })
    }

    pub fn with_bias(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let bound = gain * (3.0 / d_in as f64).sqrt();
        let w = ps.uniform(&format!("{name}.weight"), &[d_in, d_out], bound)?;
        let b = ps.from_values(&format!("{name}.bias"), &[d_out], bias)?;
        Ok(Self { w, b })
    }

    pub fn weight(&self) -> &Var {
        &self.w
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.broadcast_matmul(self.w.as_tensor())?.broadcast_add(self.b.as_tensor())
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    g: Var,
    b: Var,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            g: ps.constant(&format!("{name}.gamma"), &[d], 1.0)?,
            b: ps.constant(&format!("{name}.beta"), &[d], 0.0)?,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        xn.broadcast_mul(self.g.as_tensor())?.broadcast_add(self.b.as_tensor())
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let xs = x.broadcast_sub(&m)?;
    xs.broadcast_sub(&xs.exp()?.sum_keepdim(D::Minus1)?.log()?)
}

/// 3x3 convolution with zero padding 1 for a fixed input size, as a gather
/// of the nine taps followed by one matrix product.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    w: Var,
    b: Var,
    idx: Tensor,
    c_in: usize,
    out_hw: (usize, usize),
}

impl Conv3x3 {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        in_hw: (usize, usize),
        stride: usize,
    ) -> Result<Self> {
        let (h, w) = in_hw;
        let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
        // index h*w is an appended zero column standing in for the padding
        let pad = (h * w) as u32;
        let mut idx = Vec::with_capacity(9 * ho * wo);
        for ky in 0..3 {
            for kx in 0..3 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let y = (oy * stride + ky) as isize - 1;
                        let x = (ox * stride + kx) as isize - 1;
                        let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                        idx.push(if inside { (y as usize * w + x as usize) as u32 } else { pad });
                    }
                }
            }
        }
        let fan_in = c_in * 9;
        let wt = ps.uniform(&format!("{name}.weight"), &[c_out, fan_in], (6.0 / fan_in as f64).sqrt())?;
        let b = ps.constant(&format!("{name}.bias"), &[c_out, 1], 0.0)?;
        let idx = Tensor::from_vec(idx, 9 * ho * wo, ps.device())?;
        Ok(Self { w: wt, b, idx, c_in, out_hw: (ho, wo) })
    }

    pub fn out_hw(&self) -> (usize, usize) {
        self.out_hw
    }
}

impl Module for Conv3x3 {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.c_in {
            candle_core::bail!("conv expects {} channels, got {c}", self.c_in);
        }
        let (ho, wo) = self.out_hw;
        let flat = x.reshape((b, c, h * w))?;
        let flat = Tensor::cat(&[&flat, &flat.narrow(2, 0, 1)?.zeros_like()?], 2)?;
        let cols = flat.index_select(&self.idx, 2)?.reshape((b, c * 9, ho * wo))?;
        let y = self.w.as_tensor().broadcast_matmul(&cols)?.broadcast_add(self.b.as_tensor())?;
        y.reshape((b, (), ho, wo))
    }
}

/// Non-overlapping `p x p` patches projected to `c_out` channels.
#[derive(Debug, Clone)]
pub struct Patchify {
    proj: Linear,
    p: usize,
}

impl Patchify {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, p: usize) -> Result<Self> {
        Ok(Self { proj: Linear::scaled(ps, name, c_in * p * p, c_out, 2f64.sqrt())?, p })
    }
}

impl Module for Patchify {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let p = self.p;
        let (hp, wp) = (h / p, w / p);
        let patches =
            x.reshape(vec![b, c, hp, p, wp, p])?.permute(vec![0, 2, 4, 1, 3, 5])?.reshape((b, hp * wp, c * p * p))?;
        let y = self.proj.forward(&patches)?; // (b, hw, c_out)
        y.transpose(1, 2)?.reshape((b, (), hp, wp))
    }
}

/// Conv 1x1 on an NCHW tensor.
pub fn conv1x1(lin: &Linear, x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let y = lin.forward(&x.reshape((b, c, h * w))?.transpose(1, 2)?)?;
    y.transpose(1, 2)?.reshape((b, (), h, w))
}
