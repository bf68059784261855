//! Pixel decoder: four pixel-shuffle upsampling stages with encoder
//! shortcuts, ending in a full-resolution image embedding.

use candle_core::Tensor;

use crate::config::PixelDecoderConfig;
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{ChannelNorm, Conv2d, Init, ParamStore};

/// Rearranges `(B, C*p*p, h, w)` into `(B, C, h*p, w*p)`. Input channel
/// `c*p*p + dy*p + dx` lands at output offset `(dy, dx)` of each `p x p`
/// cell.
pub fn pixel_shuffle(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, cp, h, w) = x.dims4()?;
    if p == 0 || cp % (p * p) != 0 {
        return Err(Error::shape(
            "pixel_shuffle channels",
            format!("multiple of {}", p * p),
            cp,
        ));
    }
    if p == 1 {
        return Ok(x.clone());
    }
    let c = cp / (p * p);
    Ok(x.reshape((b, c, p, p, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, c, h * p, w * p))?)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, hp, wp) = x.dims4()?;
    if p == 0 || hp % p != 0 || wp % p != 0 {
        return Err(Error::shape(
            "pixel_unshuffle spatial",
            format!("multiple of {p}"),
            (hp, wp),
        ));
    }
    if p == 1 {
        return Ok(x.clone());
    }
    let (h, w) = (hp / p, wp / p);
    Ok(x.reshape((b, c, h, p, w, p))?
        .permute((0, 1, 3, 5, 2, 4))?
        .reshape((b, c * p * p, h, w))?)
}

/// Image embedding plus the intermediate maps handed to the color decoder.
#[derive(Debug, Clone)]
pub struct PixelDecoderOutput {
    /// `(B, C, H, W)` at input resolution.
    pub embedding: Tensor,
    /// Stage outputs at 1/16, 1/8 and 1/4 of the input.
    pub f16: Tensor,
    pub f8: Tensor,
    pub f4: Tensor,
}

struct UpStage {
    norm: Option<ChannelNorm>,
    conv: Conv2d,
}

pub struct PixelDecoder {
    stages: Vec<UpStage>,
    expand: Conv2d,
    cfg: PixelDecoderConfig,
    encoder_widths: [usize; 4],
}

impl PixelDecoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &PixelDecoderConfig,
        encoder_widths: [usize; 4],
    ) -> Result<Self> {
        let w = cfg.stage_out_widths;
        if w.contains(&0) {
            return Err(Error::Config("pixel decoder widths must be positive".into()));
        }
        let inputs = [encoder_widths[3], w[0], w[1]];
        let skips = [encoder_widths[2], encoder_widths[1], encoder_widths[0]];
        let mut stages = Vec::with_capacity(3);
        for i in 0..3 {
            if !inputs[i].is_multiple_of(4) {
                return Err(Error::Config(format!(
                    "stage {} input width {} is not divisible by 4",
                    i + 1,
                    inputs[i]
                )));
            }
            let cat = inputs[i] / 4 + skips[i];
            let prefix = format!("{name}.up{i}");
            stages.push(UpStage {
                norm: if cfg.shortcut_norm {
                    Some(ChannelNorm::new(store, &format!("{prefix}.norm"), cat, 1e-6)?)
                } else {
                    None
                },
                conv: Conv2d::new(store, &format!("{prefix}.conv"), cat, w[i], 3, 1, 1, Init::FanIn)?,
            });
        }
        let expand = Conv2d::new(store, &format!("{name}.expand"), w[2], w[3] * 16, 1, 1, 0, Init::FanIn)?;
        Ok(Self {
            stages,
            expand,
            cfg: cfg.clone(),
            encoder_widths,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.stage_out_widths[3]
    }

    pub fn forward(&self, pyr: &FeaturePyramid) -> Result<PixelDecoderOutput> {
        let (b, _, h32, w32) = pyr.f32.dims4()?;
        pyr.check(b, h32 * 32, w32 * 32, self.encoder_widths)?;
        let skips = [&pyr.f16, &pyr.f8, &pyr.f4];
        let mut x = pyr.f32.clone();
        let mut outs = Vec::with_capacity(3);
        for (stage, skip) in self.stages.iter().zip(skips) {
            let up = pixel_shuffle(&x, 2)?;
            let mut cat = Tensor::cat(&[&up, skip], 1)?;
            if let Some(norm) = &stage.norm {
                cat = norm.forward(&cat)?;
            }
            x = stage.conv.forward(&cat)?;
            outs.push(x.clone());
        }
        let embedding = pixel_shuffle(&self.expand.forward(&x)?, 4)?;
        let mut it = outs.into_iter();
        Ok(PixelDecoderOutput {
            embedding,
            f16: it.next().unwrap(),
            f8: it.next().unwrap(),
            f4: it.next().unwrap(),
        })
    }
}
