//! Brute-force loop oracles and small helpers shared by the test targets.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use dualcolor::color_decoder::CrossAttention;
use dualcolor::nn::Linear;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], dtype: DType) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Replaces every bias of `linear` with random values so oracles see them.
pub fn randomize_bias(linear: &Linear, rng: &mut impl Rng) {
    if let Some(b) = &linear.bias {
        let t = random_tensor(rng, b.dims(), b.dtype());
        b.set(&t).unwrap();
    }
}

/// `y[n][o] = sum_i x[n][i] w[o][i] + b[o]` over rows of `x`.
fn linear_rows(x: &[f64], rows: usize, input: usize, lin: &Linear) -> Vec<f64> {
    let w = to_f64(lin.weight.as_tensor());
    let b = lin.bias.as_ref().map(|b| to_f64(b.as_tensor()));
    let output = w.len() / input;
    let mut y = vec![0.0; rows * output];
    for n in 0..rows {
        for o in 0..output {
            let mut acc = b.as_ref().map_or(0.0, |b| b[o]);
            for i in 0..input {
                acc += x[n * input + i] * w[o * input + i];
            }
            y[n * output + o] = acc;
        }
    }
    y
}

/// Loop implementation of residual multi-head cross-attention for one
/// batch element: `z` is `K x C`, `f` is `N x C`, both row-major.
pub fn cross_attend_oracle(ca: &CrossAttention, z: &[f64], f: &[f64], k: usize, n: usize, c: usize) -> Vec<f64> {
    let q = linear_rows(z, k, c, &ca.q);
    let kk = linear_rows(f, n, c, &ca.k);
    let v = linear_rows(f, n, c, &ca.v);
    let d = c / ca.heads;
    let scale = if ca.scaled { 1.0 / (d as f64).sqrt() } else { 1.0 };
    let mut out = z.to_vec();
    for h in 0..ca.heads {
        for qi in 0..k {
            let mut logits = vec![0.0; n];
            for (ni, l) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for j in 0..d {
                    dot += q[qi * c + h * d + j] * kk[ni * c + h * d + j];
                }
                *l = dot * scale;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for j in 0..d {
                let mut acc = 0.0;
                for ni in 0..n {
                    acc += e[ni] / s * v[ni * c + h * d + j];
                }
                out[qi * c + h * d + j] += acc;
            }
        }
    }
    out
}

/// `out[b][k][p] = sum_c color[b][k][c] * image[b][c][p]`.
pub fn fuse_oracle(color: &[f64], image: &[f64], b: usize, k: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * k * p];
    for bi in 0..b {
        for ki in 0..k {
            for pi in 0..p {
                let mut acc = 0.0;
                for ci in 0..c {
                    acc += color[(bi * k + ki) * c + ci] * image[(bi * c + ci) * p + pi];
                }
                out[(bi * k + ki) * p + pi] = acc;
            }
        }
    }
    out
}

/// Input channel `c*r*r + dy*r + dx` at `(y, x)` goes to output channel `c`
/// at `(y*r + dy, x*r + dx)`.
pub fn pixel_shuffle_oracle(x: &[f64], b: usize, cin: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let c = cin / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![0.0; b * c * ho * wo];
    for bi in 0..b {
        for ci in 0..cin {
            let (co, dy, dx) = (ci / (r * r), (ci % (r * r)) / r, ci % r);
            for y in 0..h {
                for xx in 0..w {
                    let src = ((bi * cin + ci) * h + y) * w + xx;
                    let dst = ((bi * c + co) * ho + y * r + dy) * wo + xx * r + dx;
                    out[dst] = x[src];
                }
            }
        }
    }
    out
}
