//! Fusion of color embeddings with the image embedding, and the full
//! generator that ties the encoder and both decoders together.

use candle_core::{DType, Tensor};

use crate::color_decoder::{query_attention_maps, ColorDecoder, ScaleFeatures};
use crate::colorspace::{merge_channels, rgb_to_lab, LabImage, RgbImage};
use crate::config::{ModelConfig, Scale};
use crate::encoder::{check_input, Backbone, ConvNextEncoder, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamStore};
use crate::pixel_decoder::{PixelDecoder, PixelDecoderOutput};

/// Luminance is fed to the network as `(L - 50) / 50`.
pub const L_CENTER: f64 = 50.0;
pub const L_SCALE: f64 = 50.0;
/// Chrominance is predicted in units of `AB_SCALE`.
pub const AB_SCALE: f64 = 128.0;

/// Per-pixel dot product of every color embedding with the image embedding:
/// `(B, K, C) x (B, C, H, W) -> (B, K, H, W)`.
pub fn fuse(color: &Tensor, image: &Tensor) -> Result<Tensor> {
    let (b, k, c) = color.dims3()?;
    let (bi, ci, h, w) = image.dims4()?;
    if (bi, ci) != (b, c) {
        return Err(Error::shape("fuse image embedding", (b, c, "H", "W"), (bi, ci, h, w)));
    }
    let flat = image.reshape((b, c, h * w))?;
    Ok(color.contiguous()?.matmul(&flat)?.reshape((b, k, h, w))?)
}

/// Final 1x1 projection to two chrominance channels, optionally with the
/// normalised luminance concatenated in front of the fused map.
pub struct AbHead {
    pub conv: Conv2d,
    pub concat_input: bool,
}

impl AbHead {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, concat_input: bool) -> Result<Self> {
        let input = channels + usize::from(concat_input);
        Ok(Self {
            conv: Conv2d::new(store, name, input, 2, 1, 1, 0, Init::TruncNormal(0.02))?,
            concat_input,
        })
    }

    /// Returns normalised AB, `(B, 2, H, W)`.
    pub fn forward(&self, l_norm: &Tensor, fused: &Tensor) -> Result<Tensor> {
        if self.concat_input {
            self.conv.forward(&Tensor::cat(&[l_norm, fused], 1)?)
        } else {
            self.conv.forward(fused)
        }
    }
}

/// Everything computed by one generator pass.
pub struct GeneratorOutput {
    pub pyramid: FeaturePyramid,
    pub pixel: PixelDecoderOutput,
    /// `(B, K, C)`, absent when the color decoder is disabled.
    pub color_embedding: Option<Tensor>,
    /// `(B, K, H, W)`, or the image embedding when the color decoder is off.
    pub fused: Tensor,
    /// Predicted chrominance in Lab units, `(B, 2, H, W)`.
    pub ab: Tensor,
    pub trace: Vec<(Scale, (usize, usize))>,
}

pub struct Generator {
    store: ParamStore,
    encoder: ConvNextEncoder,
    pixel_decoder: PixelDecoder,
    color_decoder: Option<ColorDecoder>,
    head: AbHead,
    cfg: ModelConfig,
}

impl Generator {
    pub fn new(cfg: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let encoder = ConvNextEncoder::new(&mut store, "gen.encoder", &cfg.encoder)?;
        let pixel_decoder = PixelDecoder::new(
            &mut store,
            "gen.pixel_decoder",
            &cfg.pixel_decoder,
            cfg.encoder.stage_widths,
        )?;
        let pd = cfg.pixel_decoder.stage_out_widths;
        let color_decoder = if cfg.use_color_decoder {
            Some(ColorDecoder::new(
                &mut store,
                "gen.color_decoder",
                &cfg.color_decoder,
                [pd[0], pd[1], pd[2]],
            )?)
        } else {
            None
        };
        let head_channels = if cfg.use_color_decoder {
            cfg.color_decoder.queries
        } else {
            pd[3]
        };
        let head = AbHead::new(&mut store, "gen.head", head_channels, cfg.fusion_concat_input)?;
        Ok(Self {
            store,
            encoder,
            pixel_decoder,
            color_decoder,
            head,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn color_decoder(&self) -> Option<&ColorDecoder> {
        self.color_decoder.as_ref()
    }

    /// `l` is luminance in Lab units, `(B, 1, H, W)` with `H` and `W`
    /// divisible by 32.
    pub fn forward(&self, l: &Tensor) -> Result<GeneratorOutput> {
        check_input(l)?;
        let l_norm = ((l.to_dtype(self.dtype())? - L_CENTER)? / L_SCALE)?;
        let pyramid = self.encoder.forward(&l_norm)?;
        let pixel = self.pixel_decoder.forward(&pyramid)?;
        let (color_embedding, fused, trace) = match &self.color_decoder {
            Some(cd) => {
                let out = cd.forward(&ScaleFeatures {
                    f16: &pixel.f16,
                    f8: &pixel.f8,
                    f4: &pixel.f4,
                })?;
                let fused = fuse(&out.embedding, &pixel.embedding)?;
                (Some(out.embedding), fused, out.trace)
            }
            None => (None, pixel.embedding.clone(), Vec::new()),
        };
        let ab = (self.head.forward(&l_norm, &fused)? * AB_SCALE)?;
        Ok(GeneratorOutput {
            pyramid,
            pixel,
            color_embedding,
            fused,
            ab,
            trace,
        })
    }

    /// Runs a single luminance plane of any size, reflect-padded on the
    /// bottom and right up to a multiple of 32.
    fn forward_plane(&self, l: &[f32], height: usize, width: usize) -> Result<GeneratorOutput> {
        if l.len() != height * width || height == 0 || width == 0 {
            return Err(Error::shape("luminance plane", height * width, l.len()));
        }
        let (ph, pw) = (height.div_ceil(32) * 32, width.div_ceil(32) * 32);
        let padded = reflect_pad(l, height, width, ph, pw);
        let x = Tensor::from_vec(padded, (1, 1, ph, pw), self.store.device())?;
        self.forward(&x)
    }

    /// Predicts chrominance for a single luminance plane of any size; the
    /// prediction is cropped back to the input. Returns interleaved AB.
    pub fn predict_ab_plane(&self, l: &[f32], height: usize, width: usize) -> Result<Vec<f32>> {
        interleave_ab(&self.forward_plane(l, height, width)?.ab, height, width)
    }

    /// Colorizes `img` and returns the per-query activation maps, `(K, H, W)`
    /// at the image's own size, alongside the colorized result.
    pub fn colorize_with_query_maps(&self, img: &RgbImage) -> Result<(LabImage, Tensor)> {
        if self.color_decoder.is_none() {
            return Err(Error::Config("query maps need the color decoder".into()));
        }
        let (h, w) = (img.height(), img.width());
        let lab = rgb_to_lab(img)?;
        let out = self.forward_plane(lab.l(), h, w)?;
        let queries = out.color_embedding.as_ref().expect("color decoder present");
        let maps = query_attention_maps(queries, &out.pixel.embedding)?
            .to_dtype(DType::F32)?
            .squeeze(0)?
            .narrow(1, 0, h)?
            .narrow(2, 0, w)?
            .contiguous()?;
        let ab = interleave_ab(&out.ab, h, w)?;
        Ok((merge_channels(h, w, lab.l().to_vec(), ab)?, maps))
    }

    /// Colorizes an image: its own luminance is kept, chrominance predicted.
    pub fn colorize(&self, img: &RgbImage) -> Result<LabImage> {
        let lab = rgb_to_lab(img)?;
        let ab = self.predict_ab_plane(lab.l(), img.height(), img.width())?;
        merge_channels(img.height(), img.width(), lab.l().to_vec(), ab)
    }
}

/// Crops `(1, 2, H', W')` chrominance to `height x width` and interleaves it.
fn interleave_ab(ab: &Tensor, height: usize, width: usize) -> Result<Vec<f32>> {
    Ok(ab
        .to_dtype(DType::F32)?
        .squeeze(0)?
        .narrow(1, 0, height)?
        .narrow(2, 0, width)?
        .permute((1, 2, 0))?
        .flatten_all()?
        .to_vec1::<f32>()?)
}

fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads an `h x w` plane on the bottom and right to `ph x pw`.
pub fn reflect_pad(plane: &[f32], h: usize, w: usize, ph: usize, pw: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(ph * pw);
    for y in 0..ph {
        let row = &plane[mirror(y, h) * w..][..w];
        out.extend((0..pw).map(|x| row[mirror(x, w)]));
    }
    out
}
