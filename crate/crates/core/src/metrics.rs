//! Evaluation measures: colorfulness, colorfulness gap, PSNR and the
//! Fréchet distance between Gaussian fits of image embeddings.

use candle_core::{Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::colorspace::RgbImage;
use crate::data::resize;
use crate::error::{Error, Result};
use crate::losses::{colorfulness_stats, COLORFULNESS_MEAN_WEIGHT};

/// Reported in place of an infinite PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Eigenvalues down to `-PSD_TOLERANCE` (relative to the largest magnitude,
/// floored at 1) are treated as rounding noise and clipped to zero.
pub const PSD_TOLERANCE: f64 = 1e-6;

/// `sigma + 0.3 mu` of the opponent channels, on the 0..255 scale.
pub fn colorfulness_score(img: &RgbImage) -> Result<f64> {
    let (h, w) = (img.height(), img.width());
    let planar: Vec<f64> = (0..3)
        .flat_map(|c| img.pixels().iter().skip(c).step_by(3).map(|&v| v as f64 * 255.0))
        .collect();
    let t = Tensor::from_vec(planar, (1, 3, h, w), &Device::Cpu)?;
    let (sigma, mu) = colorfulness_stats(&t)?;
    let sigma = sigma.to_vec1::<f64>()?[0];
    let mu = mu.to_vec1::<f64>()?[0];
    Ok(sigma + COLORFULNESS_MEAN_WEIGHT * mu)
}

pub fn mean_colorfulness(images: &[RgbImage]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Input("no images to score".into()));
    }
    let scores = images.iter().map(colorfulness_score).collect::<Result<Vec<_>>>()?;
    Ok(mean(&scores))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Absolute difference between the mean colorfulness of two sets.
pub fn delta_cf(generated: &[f64], ground_truth: &[f64]) -> Result<f64> {
    if generated.is_empty() || ground_truth.is_empty() {
        return Err(Error::Input("colorfulness gap needs two non-empty sets".into()));
    }
    Ok((mean(generated) - mean(ground_truth)).abs())
}

/// PSNR of two equally long signals in dB, capped at [`PSNR_CAP`].
pub fn psnr(pred: &[f64], target: &[f64], peak: f64) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape("psnr", target.len(), pred.len()));
    }
    if peak.is_nan() || peak <= 0.0 {
        return Err(Error::Input(format!("psnr peak must be positive, got {peak}")));
    }
    let mse = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Pixel convention for image PSNR.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsnrPeak {
    /// Pixels rounded to 8-bit integers, peak 255.
    Byte,
    /// Pixels as floats in `[0, 1]`, peak 1.
    Unit,
}

impl PsnrPeak {
    pub fn value(self) -> f64 {
        match self {
            PsnrPeak::Byte => 255.0,
            PsnrPeak::Unit => 1.0,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "255" => Ok(PsnrPeak::Byte),
            "1" | "1.0" => Ok(PsnrPeak::Unit),
            _ => Err(Error::Input(format!("psnr peak must be 255 or 1, got {s}"))),
        }
    }
}

pub fn psnr_images(pred: &RgbImage, target: &RgbImage, peak: PsnrPeak) -> Result<f64> {
    if (pred.height(), pred.width()) != (target.height(), target.width()) {
        return Err(Error::shape(
            "psnr_images",
            (target.height(), target.width()),
            (pred.height(), pred.width()),
        ));
    }
    let scale = |img: &RgbImage| -> Vec<f64> {
        img.pixels()
            .iter()
            .map(|&v| match peak {
                PsnrPeak::Byte => (v as f64 * 255.0).round(),
                PsnrPeak::Unit => v as f64,
            })
            .collect()
    };
    psnr(&scale(pred), &scale(target), peak.value())
}

/// Mean and unbiased covariance of a set of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl EmbeddingStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::shape("EmbeddingStats covariance", (d, d), cov.shape()));
        }
        if count < 2 {
            return Err(Error::Input(format!(
                "covariance needs at least 2 samples, got {count}"
            )));
        }
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > 1e-8 {
            return Err(Error::Input(format!(
                "covariance is not symmetric (deviation {asym:e})"
            )));
        }
        Ok(Self { mean, cov, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// A one-dimensional Gaussian, for analytic checks.
    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, variance), 2)
    }
}

/// Streaming mean and co-moment accumulator. Two accumulators over disjoint
/// samples merge into the accumulator of their union.
#[derive(Debug, Clone)]
pub struct EmbeddingAccumulator {
    count: usize,
    mean: DVector<f64>,
    comoment: DMatrix<f64>,
}

impl EmbeddingAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: DVector::zeros(dim),
            comoment: DMatrix::zeros(dim, dim),
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.mean.len() {
            return Err(Error::shape("embedding", self.mean.len(), x.len()));
        }
        let x = DVector::from_column_slice(x);
        self.count += 1;
        let delta = &x - &self.mean;
        self.mean += &delta / self.count as f64;
        let delta_after = &x - &self.mean;
        self.comoment += &delta * delta_after.transpose();
        Ok(())
    }

    pub fn merge(&mut self, other: &EmbeddingAccumulator) -> Result<()> {
        if other.mean.len() != self.mean.len() {
            return Err(Error::shape("merged embedding", self.mean.len(), other.mean.len()));
        }
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        self.mean += &delta * (nb / n);
        self.comoment += &other.comoment + &delta * delta.transpose() * (na * nb / n);
        self.count += other.count;
        Ok(())
    }

    pub fn finish(&self) -> Result<EmbeddingStats> {
        if self.count < 2 {
            return Err(Error::Input(format!(
                "covariance needs at least 2 samples, got {}",
                self.count
            )));
        }
        let mut cov = &self.comoment / (self.count - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        EmbeddingStats::new(self.mean.clone(), cov, self.count)
    }
}

fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < -PSD_TOLERANCE * scale {
            log::debug!("{what} has eigenvalue {v:e}");
            return Err(Error::NotPsd(*v));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m, "covariance")?;
    let roots = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * roots * eig.eigenvectors.transpose())
}

/// Squared mean distance plus the trace term of the Fréchet distance
/// between two Gaussians. The cross term uses the symmetric form
/// `tr((A^1/2 B A^1/2)^1/2)`, which equals `tr((AB)^1/2)` for PSD inputs.
pub fn frechet_distance(a: &EmbeddingStats, b: &EmbeddingStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet_distance", a.dim(), b.dim()));
    }
    let root_a = sqrtm_psd(&a.cov)?;
    psd_eigen(&b.cov, "covariance")?;
    let inner = &root_a * &b.cov * &root_a;
    let cross = psd_eigen(&inner, "covariance product")?
        .eigenvalues
        .map(f64::sqrt)
        .sum();
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let d = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Maps an image to a fixed-length feature vector.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, img: &RgbImage) -> Result<Vec<f64>>;
}

/// Fixed random projection of a 16x16 thumbnail followed by `tanh`.
pub struct RandomEmbedder {
    weights: DMatrix<f64>,
}

impl RandomEmbedder {
    pub const THUMBNAIL: usize = 16;

    pub fn new(dim: usize, seed: u64) -> Self {
        let inputs = Self::THUMBNAIL * Self::THUMBNAIL * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (inputs as f64).sqrt();
        let weights = DMatrix::from_fn(dim, inputs, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        });
        Self { weights }
    }
}

impl Embedder for RandomEmbedder {
    fn dim(&self) -> usize {
        self.weights.nrows()
    }

    fn embed(&self, img: &RgbImage) -> Result<Vec<f64>> {
        let thumb = resize(img, Self::THUMBNAIL, Self::THUMBNAIL)?;
        let x = DVector::from_iterator(
            thumb.pixels().len(),
            thumb.pixels().iter().map(|&v| (v as f64 - 0.5) * 4.0),
        );
        Ok((&self.weights * x).map(f64::tanh).iter().copied().collect())
    }
}

pub fn embed_statistics(images: &[RgbImage], embedder: &dyn Embedder) -> Result<EmbeddingStats> {
    let mut acc = EmbeddingAccumulator::new(embedder.dim());
    for img in images {
        acc.push(&embedder.embed(img)?)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_and_red_colorfulness() {
        let gray = RgbImage::filled(8, 8, [0.4, 0.4, 0.4]).unwrap();
        assert_eq!(colorfulness_score(&gray).unwrap(), 0.0);
        let red = RgbImage::filled(8, 8, [1.0, 0.0, 0.0]).unwrap();
        let want = 0.3 * (255f64 * 255.0 + 127.5 * 127.5).sqrt();
        assert!((colorfulness_score(&red).unwrap() - want).abs() < 1e-3);
    }

    #[test]
    fn delta_cf_definition() {
        assert_eq!(delta_cf(&[40.0], &[38.0]).unwrap(), 2.0);
        assert_eq!(delta_cf(&[1.0, 3.0], &[3.0, 1.0]).unwrap(), 0.0);
        assert!(delta_cf(&[], &[1.0]).is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        let a = vec![10.0; 16];
        let b = vec![11.0; 16];
        assert!((psnr(&a, &b, 255.0).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-12);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), PSNR_CAP);
        assert!(psnr(&[0.0], &[255.0], 255.0).unwrap().abs() < 1e-12);
        assert!(psnr(&a, &b[..3], 255.0).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        let n01 = EmbeddingStats::scalar(0.0, 1.0).unwrap();
        let n31 = EmbeddingStats::scalar(3.0, 1.0).unwrap();
        let n04 = EmbeddingStats::scalar(0.0, 4.0).unwrap();
        assert!(frechet_distance(&n01, &n01).unwrap() < 1e-12);
        assert!((frechet_distance(&n01, &n31).unwrap() - 9.0).abs() < 1e-12);
        assert!((frechet_distance(&n01, &n04).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frechet_rejects_indefinite() {
        let bad = EmbeddingStats::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]),
            3,
        )
        .unwrap();
        let ok = EmbeddingStats::new(DVector::zeros(2), DMatrix::identity(2, 2), 3).unwrap();
        assert!(matches!(frechet_distance(&bad, &ok), Err(Error::NotPsd(_))));
        assert!(matches!(frechet_distance(&ok, &bad), Err(Error::NotPsd(_))));
    }

    #[test]
    fn two_point_statistics() {
        let mut acc = EmbeddingAccumulator::new(2);
        acc.push(&[1.0, 2.0]).unwrap();
        assert!(acc.finish().is_err());
        acc.push(&[3.0, 6.0]).unwrap();
        let s = acc.finish().unwrap();
        assert_eq!(s.mean.as_slice(), &[2.0, 4.0]);
        assert_eq!(s.cov.as_slice(), &[2.0, 4.0, 4.0, 8.0]);
    }

    #[test]
    fn constant_embedder_has_zero_covariance() {
        struct Constant;
        impl Embedder for Constant {
            fn dim(&self) -> usize {
                3
            }
            fn embed(&self, _: &RgbImage) -> Result<Vec<f64>> {
                Ok(vec![1.0, -2.0, 0.5])
            }
        }
        let imgs = vec![RgbImage::filled(4, 4, [0.1, 0.2, 0.3]).unwrap(); 5];
        let s = embed_statistics(&imgs, &Constant).unwrap();
        assert_eq!(s.cov, DMatrix::zeros(3, 3));
        assert!(embed_statistics(&imgs[..1], &Constant).is_err());
    }

    #[test]
    fn merged_accumulators_match_single_pass() {
        let xs: Vec<[f64; 3]> = (0..11)
            .map(|i| {
                let t = i as f64;
                [t.sin(), (t * 0.7).cos() * 2.0, t * 0.1]
            })
            .collect();
        let mut whole = EmbeddingAccumulator::new(3);
        let (mut left, mut right) = (EmbeddingAccumulator::new(3), EmbeddingAccumulator::new(3));
        for (i, x) in xs.iter().enumerate() {
            whole.push(x).unwrap();
            if i < 4 {
                left.push(x).unwrap()
            } else {
                right.push(x).unwrap()
            }
        }
        left.merge(&right).unwrap();
        let (a, b) = (whole.finish().unwrap(), left.finish().unwrap());
        assert!((a.mean - b.mean).abs().max() < 1e-12);
        assert!((a.cov - b.cov).abs().max() < 1e-12);
    }

    #[test]
    fn random_embedder_is_pinned() {
        let img = RgbImage::filled(20, 24, [0.9, 0.3, 0.1]).unwrap();
        let a = RandomEmbedder::new(8, 3).embed(&img).unwrap();
        let b = RandomEmbedder::new(8, 3).embed(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
    }
}
