//! Hierarchical backbone producing a four-level feature pyramid.
//!
//! The default backbone follows the ConvNeXt stage plan: a 4x4/4 patchify
//! stem, then per stage a 2x2/2 downsample (except the first) and a stack of
//! blocks `dw7x7 -> LN -> 1x1 (4C) -> GELU -> 1x1 (C)` with a residual. The
//! stem takes the single luminance channel directly.

use candle_core::Tensor;

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::{ChannelNorm, Conv2d, DepthwiseConv2d, Init, ParamStore};

const INIT: Init = Init::TruncNormal(0.02);
const LN_EPS: f64 = 1e-6;

/// Feature maps at strides 4, 8, 16 and 32 of the input.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub f4: Tensor,
    pub f8: Tensor,
    pub f16: Tensor,
    pub f32: Tensor,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [&Tensor; 4] {
        [&self.f4, &self.f8, &self.f16, &self.f32]
    }

    /// Checks strides and widths against an input of `height x width`.
    pub fn check(&self, batch: usize, height: usize, width: usize, widths: [usize; 4]) -> Result<()> {
        for ((level, stride), c) in self.levels().into_iter().zip([4, 8, 16, 32]).zip(widths) {
            let expected = (batch, c, height / stride, width / stride);
            let actual = level.dims4()?;
            if actual != expected {
                return Err(Error::shape("feature pyramid", expected, actual));
            }
        }
        Ok(())
    }
}

/// Anything that maps `(B, 1, H, W)` to a four-level pyramid.
pub trait Backbone {
    fn widths(&self) -> [usize; 4];
    fn forward(&self, x: &Tensor) -> Result<FeaturePyramid>;
}

pub fn check_input(x: &Tensor) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if c != 1 {
        return Err(Error::shape("encoder input channels", 1, c));
    }
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Input(format!(
            "input {h}x{w} must have both sides divisible by 32"
        )));
    }
    Ok((b, h, w))
}

struct Block {
    dw: DepthwiseConv2d,
    norm: ChannelNorm,
    expand: Conv2d,
    project: Conv2d,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            dw: DepthwiseConv2d::new(store, &format!("{name}.dwconv"), dim, 7, INIT)?,
            norm: ChannelNorm::new(store, &format!("{name}.norm"), dim, LN_EPS)?,
            expand: Conv2d::new(store, &format!("{name}.pwconv1"), dim, 4 * dim, 1, 1, 0, INIT)?,
            project: Conv2d::new(store, &format!("{name}.pwconv2"), 4 * dim, dim, 1, 1, 0, INIT)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.dw.forward(x)?;
        let y = self.norm.forward(&y)?;
        let y = self.expand.forward(&y)?.gelu_erf()?;
        let y = self.project.forward(&y)?;
        Ok((x + y)?)
    }
}

struct Stage {
    down_norm: Option<ChannelNorm>,
    down: Conv2d,
    stem_norm: Option<ChannelNorm>,
    blocks: Vec<Block>,
}

pub struct ConvNextEncoder {
    cfg: EncoderConfig,
    stages: Vec<Stage>,
}

impl ConvNextEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let width = cfg.stage_widths[i];
            let prefix = format!("{name}.stage{i}");
            let stage = if i == 0 {
                Stage {
                    down_norm: None,
                    down: Conv2d::new(store, &format!("{prefix}.stem"), 1, width, 4, 4, 0, INIT)?,
                    stem_norm: Some(ChannelNorm::new(store, &format!("{prefix}.stem_norm"), width, LN_EPS)?),
                    blocks: Vec::new(),
                }
            } else {
                let prev = cfg.stage_widths[i - 1];
                Stage {
                    down_norm: Some(ChannelNorm::new(store, &format!("{prefix}.down_norm"), prev, LN_EPS)?),
                    down: Conv2d::new(store, &format!("{prefix}.down"), prev, width, 2, 2, 0, INIT)?,
                    stem_norm: None,
                    blocks: Vec::new(),
                }
            };
            let blocks = (0..cfg.blocks_per_stage[i])
                .map(|j| Block::new(store, &format!("{prefix}.block{j}"), width))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { blocks, ..stage });
        }
        Ok(Self {
            cfg: cfg.clone(),
            stages,
        })
    }
}

impl Backbone for ConvNextEncoder {
    fn widths(&self) -> [usize; 4] {
        self.cfg.stage_widths
    }

    fn forward(&self, x: &Tensor) -> Result<FeaturePyramid> {
        check_input(x)?;
        let mut outs = Vec::with_capacity(4);
        let mut h = x.clone();
        for stage in &self.stages {
            if let Some(norm) = &stage.down_norm {
                h = norm.forward(&h)?;
            }
            h = stage.down.forward(&h)?;
            if let Some(norm) = &stage.stem_norm {
                h = norm.forward(&h)?;
            }
            for block in &stage.blocks {
                h = block.forward(&h)?;
            }
            outs.push(h.clone());
        }
        let mut it = outs.into_iter();
        Ok(FeaturePyramid {
            f4: it.next().unwrap(),
            f8: it.next().unwrap(),
            f16: it.next().unwrap(),
            f32: it.next().unwrap(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn desk() -> EncoderConfig {
        EncoderConfig {
            stage_widths: [8, 16, 32, 64],
            blocks_per_stage: [1, 1, 1, 1],
        }
    }

    #[test]
    fn pyramid_strides_at_64() {
        let mut store = ParamStore::new(DType::F32, 0);
        let enc = ConvNextEncoder::new(&mut store, "enc", &desk()).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 1, 64, 64), &Device::Cpu).unwrap();
        let pyr = enc.forward(&x).unwrap();
        assert_eq!(pyr.f4.dims(), &[2, 8, 16, 16]);
        assert_eq!(pyr.f8.dims(), &[2, 16, 8, 8]);
        assert_eq!(pyr.f16.dims(), &[2, 32, 4, 4]);
        assert_eq!(pyr.f32.dims(), &[2, 64, 2, 2]);
        pyr.check(2, 64, 64, [8, 16, 32, 64]).unwrap();
    }

    #[test]
    fn non_square_and_zero_input() {
        let mut store = ParamStore::new(DType::F32, 0);
        let enc = ConvNextEncoder::new(&mut store, "enc", &desk()).unwrap();
        let x = Tensor::zeros((1, 1, 32, 96), DType::F32, &Device::Cpu).unwrap();
        let pyr = enc.forward(&x).unwrap();
        pyr.check(1, 32, 96, [8, 16, 32, 64]).unwrap();
        for level in pyr.levels() {
            crate::nn::ensure_finite(level, "pyramid").unwrap();
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut store = ParamStore::new(DType::F32, 0);
        let enc = ConvNextEncoder::new(&mut store, "enc", &desk()).unwrap();
        let x = Tensor::zeros((1, 1, 48, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.forward(&x), Err(Error::Input(_))));
    }

    #[test]
    fn zero_blocks_allowed() {
        let cfg = EncoderConfig {
            stage_widths: [4, 4, 8, 8],
            blocks_per_stage: [0, 0, 0, 0],
        };
        let mut store = ParamStore::new(DType::F32, 0);
        let enc = ConvNextEncoder::new(&mut store, "enc", &cfg).unwrap();
        let x = Tensor::zeros((1, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        enc.forward(&x).unwrap().check(1, 32, 32, [4, 4, 8, 8]).unwrap();
    }
}
