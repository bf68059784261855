//! Training objectives: pixel L1, perceptual, colorfulness and a
//! least-squares adversarial loss with a patch discriminator.

use candle_core::{DType, Tensor};

use crate::colorspace::lab_to_rgb_tensor;
use crate::config::{DiscriminatorConfig, LossWeights};
use crate::error::{Error, Result};
use crate::fusion::AB_SCALE;
use crate::nn::{instance_norm, leaky_relu, scalar, Conv2d, Init, ParamStore};

/// Stabiliser inside the colorfulness square roots.
pub const COLORFULNESS_EPS: f64 = 1e-8;
/// Weight of the mean term in the colorfulness score.
pub const COLORFULNESS_MEAN_WEIGHT: f64 = 0.3;

fn check_same(a: &Tensor, b: &Tensor, what: &'static str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(what, b.dims().to_vec(), a.dims().to_vec()));
    }
    Ok(())
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

/// L1 between predicted and target chrominance, both in Lab units, measured
/// on the normalised AB scale. The luminance channel is shared, so it adds
/// nothing.
pub fn pixel_loss(pred_ab: &Tensor, target_ab: &Tensor) -> Result<Tensor> {
    check_same(pred_ab, target_ab, "pixel_loss")?;
    Ok((mean_abs_diff(pred_ab, target_ab)? / AB_SCALE)?)
}

/// Lab batch to sRGB clamped to the displayable range; differentiable
/// inside the gamut.
pub fn display_rgb(l: &Tensor, ab: &Tensor) -> Result<Tensor> {
    Ok(lab_to_rgb_tensor(l, ab)?.clamp(0.0, 1.0)?)
}

/// Frozen network producing a list of feature maps from `(B, 3, H, W)`
/// sRGB in `[0, 1]`.
pub trait FeatureExtractor {
    fn features(&self, rgb: &Tensor) -> Result<Vec<Tensor>>;
}

/// Returns the image itself as its only feature.
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, rgb: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![rgb.clone()])
    }
}

/// Four stages of 3x3 convolution + ReLU with fixed random weights, the
/// first at full resolution and the rest at stride 2.
pub struct RandomConvExtractor {
    convs: Vec<Conv2d>,
}

impl RandomConvExtractor {
    pub const WIDTHS: [usize; 4] = [16, 32, 64, 64];

    pub fn new(seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(dtype, seed);
        let mut convs = Vec::with_capacity(4);
        let mut input = 3;
        for (i, &width) in Self::WIDTHS.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let std = (2.0 / (9 * input) as f64).sqrt();
            convs.push(Conv2d::new(
                &mut store,
                &format!("extractor.conv{i}"),
                input,
                width,
                3,
                stride,
                1,
                Init::Normal(std),
            )?);
            input = width;
        }
        Ok(Self { convs })
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn features(&self, rgb: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = ((rgb - 0.5)? * 4.0)?;
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            x = conv.forward(&x)?.relu()?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// Sum over extractor layers of the mean absolute feature difference. The
/// target features carry no gradient.
pub fn perceptual_loss(extractor: &dyn FeatureExtractor, pred_rgb: &Tensor, target_rgb: &Tensor) -> Result<Tensor> {
    check_same(pred_rgb, target_rgb, "perceptual_loss")?;
    let pred = extractor.features(pred_rgb)?;
    let target = extractor.features(&target_rgb.detach())?;
    let mut total: Option<Tensor> = None;
    for (p, t) in pred.iter().zip(&target) {
        let term = mean_abs_diff(p, &t.detach())?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Config("feature extractor returned no layers".into()))
}

/// Per-image spread and mean magnitude of the opponent channels of
/// `(B, 3, H, W)` RGB on the 0..255 scale. Each is `(B,)`.
pub fn colorfulness_stats(rgb255: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = rgb255.dims4()?;
    if c != 3 {
        return Err(Error::shape("colorfulness input channels", 3, c));
    }
    let flat = rgb255.reshape((b, 3, h * w))?;
    let r = flat.narrow(1, 0, 1)?.squeeze(1)?;
    let g = flat.narrow(1, 1, 1)?.squeeze(1)?;
    let bl = flat.narrow(1, 2, 1)?.squeeze(1)?;
    let rg = (&r - &g)?;
    let yb = (((&r + &g)? * 0.5)? - &bl)?;
    let mean_rg = rg.mean_keepdim(1)?;
    let mean_yb = yb.mean_keepdim(1)?;
    let var_rg = rg.broadcast_sub(&mean_rg)?.sqr()?.mean(1)?;
    let var_yb = yb.broadcast_sub(&mean_yb)?.sqr()?.mean(1)?;
    let root_eps = COLORFULNESS_EPS.sqrt();
    let sigma = (((var_rg + var_yb)? + COLORFULNESS_EPS)?.sqrt()? - root_eps)?;
    let mu = (((mean_rg.squeeze(1)?.sqr()? + mean_yb.squeeze(1)?.sqr()?)? + COLORFULNESS_EPS)?.sqrt()? - root_eps)?;
    Ok((sigma, mu))
}

/// `1 - mean(sigma + 0.3 mu) / 100` over RGB on the 0..255 scale. Gray
/// images score exactly 1; more colorful images score lower.
pub fn colorfulness_loss(rgb255: &Tensor) -> Result<Tensor> {
    let (sigma, mu) = colorfulness_stats(rgb255)?;
    let score = (sigma + (mu * COLORFULNESS_MEAN_WEIGHT)?)?.mean_all()?;
    Ok(((score / -100.0)? + 1.0)?)
}

/// PatchGAN discriminator on `(B, 3, H, W)` sRGB in `[0, 1]`.
pub struct PatchDiscriminator {
    store: ParamStore,
    convs: Vec<Conv2d>,
}

impl PatchDiscriminator {
    pub fn new(cfg: &DiscriminatorConfig, dtype: DType, seed: u64) -> Result<Self> {
        if cfg.width == 0 || cfg.layers == 0 {
            return Err(Error::Config("discriminator needs a positive width and depth".into()));
        }
        let mut store = ParamStore::new(dtype, seed);
        let init = Init::Normal(0.02);
        let mut convs = Vec::new();
        let mut input = 3;
        let mut width = cfg.width;
        for i in 0..cfg.layers {
            convs.push(Conv2d::new(
                &mut store,
                &format!("disc.conv{i}"),
                input,
                width,
                4,
                2,
                1,
                init,
            )?);
            input = width;
            width = (width * 2).min(cfg.width * 8);
        }
        convs.push(Conv2d::new(
            &mut store,
            &format!("disc.conv{}", cfg.layers),
            input,
            width,
            4,
            1,
            1,
            init,
        )?);
        convs.push(Conv2d::new(
            &mut store,
            &format!("disc.conv{}", cfg.layers + 1),
            width,
            1,
            4,
            1,
            1,
            init,
        )?);
        Ok(Self { store, convs })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Patch logits `(B, 1, h, w)`.
    pub fn forward(&self, rgb: &Tensor) -> Result<Tensor> {
        let mut x = ((rgb.to_dtype(self.store.dtype())? * 2.0)? - 1.0)?;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i == last {
                break;
            }
            if i > 0 {
                x = instance_norm(&x, 1e-5)?;
            }
            x = leaky_relu(&x, 0.2)?;
        }
        Ok(x)
    }
}

/// Least-squares discriminator objective
/// `0.5 * (mean((D(real) - 1)^2) + mean(D(fake)^2))`.
pub fn discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = (real_logits - 1.0)?.sqr()?.mean_all()?;
    let fake = fake_logits.sqr()?.mean_all()?;
    Ok(((real + fake)? * 0.5)?)
}

/// Least-squares generator objective `mean((D(fake) - 1)^2)`.
pub fn generator_adversarial_loss(fake_logits: &Tensor) -> Result<Tensor> {
    Ok((fake_logits - 1.0)?.sqr()?.mean_all()?)
}

/// Detached values of every term, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub pixel: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub colorfulness: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        [
            self.pixel,
            self.perceptual,
            self.adversarial,
            self.colorfulness,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Generator objective and its graph. Image-space terms see the prediction
/// clamped to `[0, 1]`. Terms with zero weight are still evaluated for the
/// log but kept out of the graph.
pub struct GeneratorLoss {
    pub total: Tensor,
    pub terms: LossTerms,
    /// sRGB of the prediction clamped to the displayable range,
    /// `(B, 3, H, W)`.
    pub pred_rgb: Tensor,
    pub target_rgb: Tensor,
}

pub fn generator_loss(
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor,
    discriminator: &PatchDiscriminator,
    l: &Tensor,
    pred_ab: &Tensor,
    target_ab: &Tensor,
) -> Result<GeneratorLoss> {
    let l = l.to_dtype(pred_ab.dtype())?;
    let target_ab = target_ab.to_dtype(pred_ab.dtype())?;
    let pred_rgb = display_rgb(&l, pred_ab)?;
    let target_rgb = display_rgb(&l, &target_ab)?.detach();

    let mut total: Option<Tensor> = None;
    let mut add = |term: Tensor, weight: f64| -> Result<f64> {
        let value = scalar(&term)?;
        if weight != 0.0 {
            let weighted = (term * weight)?;
            total = Some(match total.take() {
                Some(acc) => (acc + weighted)?,
                None => weighted,
            });
        }
        Ok(value)
    };

    let detach_unless = |x: &Tensor, weight: f64| if weight == 0.0 { x.detach() } else { x.clone() };

    let pixel = add(
        pixel_loss(&detach_unless(pred_ab, weights.pixel), &target_ab)?,
        weights.pixel,
    )?;
    let perceptual = add(
        perceptual_loss(extractor, &detach_unless(&pred_rgb, weights.perceptual), &target_rgb)?,
        weights.perceptual,
    )?;
    let adversarial = add(
        generator_adversarial_loss(&discriminator.forward(&detach_unless(&pred_rgb, weights.adversarial))?)?,
        weights.adversarial,
    )?;
    let colorfulness = add(
        colorfulness_loss(&(detach_unless(&pred_rgb, weights.colorfulness) * 255.0)?)?,
        weights.colorfulness,
    )?;

    let total = match total {
        Some(t) => t,
        None => pred_ab.zeros_like()?.sum_all()?,
    };
    let terms = LossTerms {
        pixel,
        perceptual,
        adversarial,
        colorfulness,
        total: scalar(&total)?,
    };
    Ok(GeneratorLoss {
        total,
        terms,
        pred_rgb,
        target_rgb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn solid(rgb: [f64; 3], b: usize, h: usize, w: usize) -> Tensor {
        let mut data = Vec::new();
        for _ in 0..b {
            for c in rgb {
                data.extend(std::iter::repeat_n(c, h * w));
            }
        }
        Tensor::from_vec(data, (b, 3, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn colorfulness_reference_values() {
        let gray = solid([128.0, 128.0, 128.0], 2, 4, 4);
        assert_eq!(scalar(&colorfulness_loss(&gray).unwrap()).unwrap(), 1.0);
        let red = solid([255.0, 0.0, 0.0], 1, 4, 4);
        let v = scalar(&colorfulness_loss(&red).unwrap()).unwrap();
        // sigma = 0, mu = hypot(255, 127.5)
        let expect = 1.0 - 0.3 * 255f64.hypot(127.5) / 100.0;
        assert!((v - expect).abs() < 1e-6, "{v}");
    }

    #[test]
    fn colorfulness_batch_is_mean_of_images() {
        let a = solid([255.0, 0.0, 0.0], 1, 2, 2);
        let b = solid([10.0, 200.0, 30.0], 1, 2, 2);
        let both = Tensor::cat(&[&a, &b], 0).unwrap();
        let la = scalar(&colorfulness_loss(&a).unwrap()).unwrap();
        let lb = scalar(&colorfulness_loss(&b).unwrap()).unwrap();
        let lab = scalar(&colorfulness_loss(&both).unwrap()).unwrap();
        assert!((lab - 0.5 * (la + lb)).abs() < 1e-12);
    }

    #[test]
    fn lsgan_constant_logits() {
        let zeros = Tensor::zeros((2, 1, 3, 3), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(scalar(&generator_adversarial_loss(&zeros).unwrap()).unwrap(), 1.0);
        assert_eq!(scalar(&discriminator_loss(&zeros, &zeros).unwrap()).unwrap(), 0.5);
        let ones = zeros.ones_like().unwrap();
        assert_eq!(scalar(&discriminator_loss(&ones, &zeros).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn perceptual_zero_on_identical_and_identity_is_l1() {
        let ext = RandomConvExtractor::new(1, DType::F64).unwrap();
        let x = Tensor::rand(0f64, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap();
        assert_eq!(scalar(&perceptual_loss(&ext, &x, &x).unwrap()).unwrap(), 0.0);
        let y = (&x + 0.1).unwrap();
        let v = scalar(&perceptual_loss(&IdentityExtractor, &x, &y).unwrap()).unwrap();
        assert!((v - 0.1).abs() < 1e-12);
        assert_eq!(ext.features(&x).unwrap().len(), 4);
    }

    #[test]
    fn pixel_loss_scale() {
        let a = Tensor::zeros((1, 2, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let b = (a.ones_like().unwrap() * 64.0).unwrap();
        assert_eq!(scalar(&pixel_loss(&a, &b).unwrap()).unwrap(), 0.5);
        assert!(pixel_loss(&a, &b.narrow(1, 0, 1).unwrap()).is_err());
    }

    #[test]
    fn discriminator_patch_shape() {
        let d = PatchDiscriminator::new(&DiscriminatorConfig::default(), DType::F32, 0).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 3, 64, 64), &Device::Cpu).unwrap();
        let y = d.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 1, 14, 14]);
    }

    #[test]
    fn zero_weight_terms_are_logged_but_detached() {
        let d = PatchDiscriminator::new(&DiscriminatorConfig::default(), DType::F64, 0).unwrap();
        let ext = IdentityExtractor;
        let l = Tensor::full(60f64, (1, 1, 32, 32), &Device::Cpu).unwrap();
        let target = Tensor::full(20f64, (1, 2, 32, 32), &Device::Cpu).unwrap();
        let var = candle_core::Var::zeros((1, 2, 32, 32), DType::F64, &Device::Cpu).unwrap();
        let mut w = LossWeights::zero();
        w.pixel = 1.0;
        let out = generator_loss(&w, &ext, &d, &l, var.as_tensor(), &target).unwrap();
        assert!((out.terms.pixel - 20.0 / 128.0).abs() < 1e-12);
        assert!(out.terms.perceptual > 0.0);
        assert!((out.terms.total - out.terms.pixel).abs() < 1e-12);
        let grads = out.total.backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap();
        let expect = -1.0 / (128.0 * 2048.0);
        let gv = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(gv.iter().all(|v| (v - expect).abs() < 1e-15));
    }
}
