//! Layer primitives on top of candle's autograd.
//!
//! Parameters live in a [`ParamStore`], keyed by dotted names in insertion
//! order, and are initialised from a seeded ChaCha stream so that model
//! construction is reproducible. Convolutions are lowered to im2col + matmul.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        self.insert(name, shape, vec![value; n])
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        self.constant(name, shape, 0.0)
    }

    /// Normal(0, std) resampled until within two standard deviations.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(&mut self.rng);
                if v.abs() <= 2.0 * std {
                    break v;
                }
            })
            .collect();
        self.insert(name, shape, data)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.insert(name, shape, data)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, shape, data)
    }

    /// Overwrites every parameter with zeros.
    pub fn zero_all(&self) -> Result<()> {
        for var in self.vars.values() {
            var.set(&var.zeros_like()?)?;
        }
        Ok(())
    }
}

/// How fresh weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Truncated normal with the given standard deviation, zero bias.
    TruncNormal(f64),
    /// Normal with the given standard deviation, zero bias.
    Normal(f64),
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and bias.
    FanIn,
    /// Uniform(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))), zero bias.
    Xavier,
}

fn init_weight(store: &mut ParamStore, name: &str, shape: &[usize], fan_in: usize, init: Init) -> Result<Var> {
    match init {
        Init::Xavier => {
            let fan_out = shape[0] * shape[2..].iter().product::<usize>();
            store.uniform(name, shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
        }
        Init::TruncNormal(std) => store.trunc_normal(name, shape, std),
        Init::Normal(std) => store.normal(name, shape, std),
        Init::FanIn => store.uniform(name, shape, 1.0 / (fan_in as f64).sqrt()),
    }
}

fn init_bias(store: &mut ParamStore, name: &str, n: usize, fan_in: usize, init: Init) -> Result<Var> {
    match init {
        Init::FanIn => store.uniform(name, &[n], 1.0 / (fan_in as f64).sqrt()),
        _ => store.zeros(name, &[n]),
    }
}

/// Affine map over the last dimension; weight is `(out, in)`.
#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, init: Init) -> Result<Self> {
        let weight = init_weight(store, &format!("{name}.weight"), &[output, input], input, init)?;
        let bias = init_bias(store, &format!("{name}.bias"), output, input, init)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().ok_or_else(|| Error::shape("Linear", "rank >= 1", &dims))?;
        let (out, expected) = self.weight.dims2()?;
        if input != expected {
            return Err(Error::shape("Linear input features", expected, input));
        }
        let rows = x.elem_count() / input;
        let flat = x.reshape((rows, input))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b.as_tensor())?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = out;
        Ok(y.reshape(out_dims)?)
    }
}

/// Dense 2-D convolution, weight `(out, in, kh, kw)`, zero padding.
#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
    ) -> Result<Self> {
        let fan_in = input * kernel * kernel;
        let weight = init_weight(
            store,
            &format!("{name}.weight"),
            &[output, input, kernel, kernel],
            fan_in,
            init,
        )?;
        let bias = init_bias(store, &format!("{name}.bias"), output, fan_in, init)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            kernel,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (o, ci, _, _) = self.weight.dims4()?;
        if c != ci {
            return Err(Error::shape("Conv2d input channels", ci, c));
        }
        let (cols, ho, wo) = if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
            (x.reshape((b, c, h * w))?, h, w)
        } else {
            im2col(x, self.kernel, self.stride, self.padding)?
        };
        let depth = ci * self.kernel * self.kernel;
        let wmat = self.weight.reshape((o, depth))?;
        // One 2-D product over the folded batch; candle's matmul mishandles
        // a broadcast left operand against a batched right operand.
        let flat = if b == 1 {
            cols.reshape((depth, ho * wo))?
        } else {
            cols.transpose(0, 1)?.contiguous()?.reshape((depth, b * ho * wo))?
        };
        let mut y = wmat.matmul(&flat)?;
        if let Some(bias) = &self.bias {
            y = y.broadcast_add(&bias.reshape((o, 1))?)?;
        }
        let y = y.reshape((o, b, ho * wo))?.transpose(0, 1)?.contiguous()?;
        Ok(y.reshape((b, o, ho, wo))?)
    }
}

/// Unfolds `(B, C, H, W)` into `(B, C * k * k, Ho * Wo)` with the channel
/// index major and kernel offsets minor, matching a `(O, C, k, k)` weight.
pub fn im2col(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<(Tensor, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if h + 2 * padding < kernel || w + 2 * padding < kernel {
        return Err(Error::shape("im2col", format!("spatial >= {kernel}"), (h, w)));
    }
    let ho = (h + 2 * padding - kernel) / stride + 1;
    let wo = (w + 2 * padding - kernel) / stride + 1;
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    let xp = if padding > 0 {
        x.pad_with_zeros(2, padding, padding)?
            .pad_with_zeros(3, padding, padding)?
    } else {
        x.clone()
    };
    // A single gather keeps the backward pass to one scatter-add.
    let mut index = Vec::with_capacity(kernel * kernel * ho * wo);
    for ky in 0..kernel {
        for kx in 0..kernel {
            for oy in 0..ho {
                let row = (oy * stride + ky) * wp;
                index.extend((0..wo).map(|ox| (row + ox * stride + kx) as u32));
            }
        }
    }
    let index = Tensor::from_vec(index, kernel * kernel * ho * wo, x.device())?;
    let cols = xp
        .reshape((b, c, hp * wp))?
        .index_select(&index, 2)?
        .reshape((b, c * kernel * kernel, ho * wo))?;
    Ok((cols, ho, wo))
}

/// Depthwise `k x k` convolution with "same" zero padding; weight `(C, k*k)`.
#[derive(Clone)]
pub struct DepthwiseConv2d {
    pub weight: Var,
    pub bias: Var,
    pub kernel: usize,
}

impl DepthwiseConv2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize, init: Init) -> Result<Self> {
        let fan_in = kernel * kernel;
        let weight = init_weight(
            store,
            &format!("{name}.weight"),
            &[channels, kernel * kernel],
            fan_in,
            init,
        )?;
        let bias = init_bias(store, &format!("{name}.bias"), channels, fan_in, init)?;
        Ok(Self { weight, bias, kernel })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let pad = self.kernel / 2;
        let xp = x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?;
        let mut taps = Vec::with_capacity(self.kernel * self.kernel);
        for ky in 0..self.kernel {
            let rows = xp.narrow(2, ky, h)?;
            for kx in 0..self.kernel {
                taps.push(rows.narrow(3, kx, w)?);
            }
        }
        let kk = self.kernel * self.kernel;
        let stacked = Tensor::stack(&taps, 2)?.reshape((b, c, kk, h * w))?;
        let wt = self.weight.reshape((1, c, kk, 1))?;
        let y = stacked.broadcast_mul(&wt)?.sum(2)?;
        let y = y.broadcast_add(&self.bias.reshape((1, c, 1))?)?;
        Ok(y.reshape((b, c, h, w))?)
    }
}

/// Layer normalisation over the last dimension.
#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.weight"), &[dim], 1.0)?,
            beta: store.zeros(&format!("{name}.bias"), &[dim])?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = normalize(x, D::Minus1, self.eps)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

/// Layer normalisation across the channel axis of `(B, C, H, W)` maps,
/// independently at every spatial position.
#[derive(Clone)]
pub struct ChannelNorm {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl ChannelNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.weight"), &[channels], 1.0)?,
            beta: store.zeros(&format!("{name}.bias"), &[channels])?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let normed = normalize(x, 1, self.eps)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Zero-mean, unit-variance (population) along `dim`.
pub fn normalize<Dim: candle_core::shape::Dim + Copy>(x: &Tensor, dim: Dim, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(dim)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(dim)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Per-sample, per-channel normalisation of `(B, C, H, W)` without affine.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    Ok(normalize(&flat, 2, eps)?.reshape((b, c, h, w))?)
}

/// Softmax over the last dimension, shifted by the (detached) row maximum.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Fails if `x` holds a NaN or an infinity.
pub fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    let probe = x
        .detach()
        .sub(&x.detach())?
        .sum_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    if probe.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        x: &[f64],
        (c, h, w): (usize, usize, usize),
        wt: &[f64],
        o: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> Vec<f64> {
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc +=
                                    x[(ic * h + iy as usize) * w + ix as usize] * wt[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_single_and_double_precision_agree() {
        for &(c, k, s, p, h) in &[
            (8, 2, 2, 0, 16),
            (8, 4, 4, 0, 16),
            (8, 3, 1, 1, 8),
            (16, 1, 1, 0, 8),
            (3, 4, 2, 1, 16),
        ] {
            let mut s64 = ParamStore::new(DType::F64, 5);
            let mut s32 = ParamStore::new(DType::F32, 5);
            let c64 = Conv2d::new(&mut s64, "c", c, 6, k, s, p, Init::FanIn).unwrap();
            let c32 = Conv2d::new(&mut s32, "c", c, 6, k, s, p, Init::FanIn).unwrap();
            let x = Tensor::randn(0f64, 1.0, (3, c, h, h), &Device::Cpu).unwrap();
            let a = c64.forward(&x).unwrap();
            let b = c32
                .forward(&x.to_dtype(DType::F32).unwrap())
                .unwrap()
                .to_dtype(DType::F64)
                .unwrap();
            let diff = scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
            assert!(diff < 1e-4, "c={c} k={k} s={s}: {diff}");
        }
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(k, s, p, h, w) in &[
            (3, 1, 1, 5, 6),
            (4, 2, 1, 8, 8),
            (4, 4, 0, 8, 12),
            (4, 1, 1, 5, 5),
            (2, 2, 0, 6, 4),
        ] {
            let mut store = ParamStore::new(DType::F64, 11);
            let conv = Conv2d::new(&mut store, "c", 3, 2, k, s, p, Init::Normal(0.5)).unwrap();
            conv.bias
                .as_ref()
                .unwrap()
                .set(&Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap())
                .unwrap();
            let x: Vec<f64> = (0..2 * 3 * h * w).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
            let xt = Tensor::from_vec(x.clone(), (2, 3, h, w), &Device::Cpu).unwrap();
            let y = conv
                .forward(&xt)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            let wt = conv.weight.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let mut expect = naive_conv(&x[..3 * h * w], (3, h, w), &wt, 2, k, s, p);
            expect.extend(naive_conv(&x[3 * h * w..], (3, h, w), &wt, 2, k, s, p));
            assert_eq!(y.len(), expect.len());
            for (a, b) in y.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn depthwise_matches_grouped_loops() {
        let mut store = ParamStore::new(DType::F64, 5);
        let dw = DepthwiseConv2d::new(&mut store, "dw", 2, 3, Init::Normal(1.0)).unwrap();
        let x: Vec<f64> = (0..2 * 4 * 5).map(|i| (i as f64).sin()).collect();
        let xt = Tensor::from_vec(x.clone(), (1, 2, 4, 5), &Device::Cpu).unwrap();
        let y = dw
            .forward(&xt)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let wt = dw.weight.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let bias = dw.bias.to_vec1::<f64>().unwrap();
        for c in 0..2 {
            let plane = &x[c * 20..(c + 1) * 20];
            let expect = naive_conv(plane, (1, 4, 5), &wt[c * 9..(c + 1) * 9], 1, 3, 1, 1);
            for (i, e) in expect.iter().enumerate() {
                assert!((y[c * 20 + i] - e - bias[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1000.0f32, 0.0, -3.0], [0.5, 0.5, 0.5]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ensure_finite_flags_nan_and_inf() {
        let ok = Tensor::new(&[1.0f32, 2.0], &Device::Cpu).unwrap();
        assert!(ensure_finite(&ok, "ok").is_ok());
        let bad = Tensor::new(&[1.0f32, f32::INFINITY], &Device::Cpu).unwrap();
        assert!(ensure_finite(&bad, "bad").is_err());
        let nan = Tensor::new(&[f32::NAN, 2.0], &Device::Cpu).unwrap();
        assert!(ensure_finite(&nan, "nan").is_err());
    }

    #[test]
    fn store_is_reproducible() {
        let mut a = ParamStore::new(DType::F32, 9);
        let mut b = ParamStore::new(DType::F32, 9);
        let va = a.trunc_normal("w", &[4, 4], 0.02).unwrap();
        let vb = b.trunc_normal("w", &[4, 4], 0.02).unwrap();
        let da = va.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(da, vb.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert!(da.iter().all(|v| v.abs() <= 0.04));
        assert!(a.trunc_normal("w", &[1], 0.02).is_err());
    }
}
