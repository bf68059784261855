//! Dataset ingestion: image files or a procedural toy set, square-cropped,
//! resized and turned into `(L, AB)` training pairs.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colorspace::{lab_pixel_to_srgb, rgb_to_lab, srgb_pixel_to_lab, RgbImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    /// Image directory; `None` selects the procedural toy set.
    pub root: Option<PathBuf>,
    /// Optional file listing one path per line, relative to `root`.
    pub manifest: Option<PathBuf>,
    pub resolution: usize,
    pub augment: bool,
    /// Scales the hue/saturation jitter ranges; 0 disables jitter.
    pub augment_strength: f32,
    pub seed: u64,
    /// Size of the procedural set when `root` is `None`.
    pub procedural_count: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            root: None,
            manifest: None,
            resolution: 64,
            augment: false,
            augment_strength: 1.0,
            seed: 0,
            procedural_count: 500,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || !self.resolution.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "resolution {} must be a positive multiple of 32",
                self.resolution
            )));
        }
        if !(0.0..=1.0).contains(&self.augment_strength) {
            return Err(Error::Config("augment_strength must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One training batch in Lab units: `x_l` is `(B, 1, H, W)` in `[0, 100]`,
/// `y_ab` is `(B, 2, H, W)`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x_l: Tensor,
    pub y_ab: Tensor,
    pub ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Stacks RGB images of equal size into a Lab batch.
    pub fn from_images(images: &[RgbImage], ids: Vec<usize>, dtype: DType) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Input("cannot build an empty batch".into()))?;
        let (h, w) = (first.height(), first.width());
        let plane = h * w;
        let mut l = Vec::with_capacity(images.len() * plane);
        let mut ab = vec![0f32; images.len() * 2 * plane];
        for (i, img) in images.iter().enumerate() {
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::shape("Batch::from_images", (h, w), (img.height(), img.width())));
            }
            let lab = rgb_to_lab(img)?;
            l.extend_from_slice(lab.l());
            for (p, pair) in lab.ab().chunks_exact(2).enumerate() {
                ab[i * 2 * plane + p] = pair[0];
                ab[i * 2 * plane + plane + p] = pair[1];
            }
        }
        let b = images.len();
        Ok(Self {
            x_l: Tensor::from_vec(l, (b, 1, h, w), &Device::Cpu)?.to_dtype(dtype)?,
            y_ab: Tensor::from_vec(ab, (b, 2, h, w), &Device::Cpu)?.to_dtype(dtype)?,
            ids,
        })
    }
}

/// Decoded, resized images held in memory.
pub struct Dataset {
    spec: DatasetSpec,
    images: Vec<RgbImage>,
}

impl Dataset {
    pub fn build(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let images = match &spec.root {
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_da7a);
                (0..spec.procedural_count)
                    .map(|_| procedural_image(spec.resolution, &mut rng))
                    .collect::<Result<Vec<_>>>()?
            }
            Some(root) => {
                let paths = list_images(root, spec.manifest.as_deref())?;
                let mut images = Vec::with_capacity(paths.len());
                for path in paths {
                    match load_rgb(&path).and_then(|img| square_resize(&img, spec.resolution)) {
                        Ok(img) => images.push(img),
                        Err(e) => log::warn!("skipping {}: {e}", path.display()),
                    }
                }
                images
            }
        };
        if images.is_empty() {
            let root = spec.root.clone().unwrap_or_else(|| PathBuf::from("<procedural>"));
            return Err(Error::EmptyDataset(root));
        }
        Ok(Self {
            spec: spec.clone(),
            images,
        })
    }

    pub fn from_images(spec: &DatasetSpec, images: Vec<RgbImage>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset(PathBuf::from("<memory>")));
        }
        Ok(Self {
            spec: spec.clone(),
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[RgbImage] {
        &self.images
    }

    /// Sample order for one epoch; a pure function of seed and epoch.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.images.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch));
        order.shuffle(&mut rng);
        order
    }

    /// The batches of one epoch; the last one may be short.
    pub fn epoch(&self, epoch: u64, batch_size: usize, dtype: DType) -> impl Iterator<Item = Result<Batch>> + '_ {
        let order = self.epoch_order(epoch);
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
        chunks.into_iter().map(move |ids| self.make_batch(epoch, ids, dtype))
    }

    fn make_batch(&self, epoch: u64, ids: Vec<usize>, dtype: DType) -> Result<Batch> {
        let images: Vec<RgbImage> = ids
            .iter()
            .map(|&i| {
                let img = &self.images[i];
                if self.spec.augment {
                    let seed = self.spec.seed ^ (epoch << 32) ^ i as u64;
                    color_augment(img, self.spec.augment_strength, seed)
                } else {
                    img.clone()
                }
            })
            .collect();
        Batch::from_images(&images, ids, dtype)
    }

    /// Batch number `step` of the endless stream, without replaying it.
    pub fn batch_at(&self, step: u64, batch_size: usize, dtype: DType) -> Result<Batch> {
        let batch_size = batch_size.max(1);
        let per_epoch = self.images.len().div_ceil(batch_size) as u64;
        if per_epoch == 0 {
            return Err(Error::Input("dataset is empty".into()));
        }
        let epoch = step / per_epoch;
        let index = (step % per_epoch) as usize;
        let order = self.epoch_order(epoch);
        let ids = order
            .chunks(batch_size)
            .nth(index)
            .expect("index within epoch")
            .to_vec();
        self.make_batch(epoch, ids, dtype)
    }

    /// Endless batch stream across epochs.
    pub fn stream(&self, batch_size: usize, dtype: DType) -> BatchStream<'_> {
        BatchStream {
            dataset: self,
            batch_size,
            dtype,
            epoch: 0,
            pending: Vec::new(),
        }
    }
}

pub struct BatchStream<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    dtype: DType,
    epoch: u64,
    pending: Vec<Vec<usize>>,
}

impl Iterator for BatchStream<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pending.is_empty() {
            let order = self.dataset.epoch_order(self.epoch);
            self.pending = order.chunks(self.batch_size.max(1)).rev().map(|c| c.to_vec()).collect();
            self.epoch += 1;
        }
        let ids = self.pending.pop()?;
        Some(self.dataset.make_batch(self.epoch - 1, ids, self.dtype))
    }
}

fn is_image_path(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Image files under `root` (recursively, sorted), or those named by the
/// manifest.
pub fn list_images(root: &Path, manifest: Option<&Path>) -> Result<Vec<PathBuf>> {
    if let Some(m) = manifest {
        let text = std::fs::read_to_string(m).map_err(|e| Error::io(m, e))?;
        return Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| root.join(l))
            .collect());
    }
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if is_image_path(&path) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    RgbImage::new(h as usize, w as usize, rgb.into_raw())
}

/// Writes an 8-bit PNG.
pub fn save_rgb_png(img: &RgbImage, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img
        .pixels()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .ok_or_else(|| Error::Input("pixel buffer size mismatch".into()))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn to_buffer(img: &RgbImage) -> image::Rgb32FImage {
    image::Rgb32FImage::from_raw(img.width() as u32, img.height() as u32, img.pixels().to_vec())
        .expect("consistent dimensions")
}

/// Resizes with a triangle filter whose support widens when shrinking.
pub fn resize(img: &RgbImage, height: usize, width: usize) -> Result<RgbImage> {
    if (img.height(), img.width()) == (height, width) {
        return Ok(img.clone());
    }
    let out = image::imageops::resize(&to_buffer(img), width as u32, height as u32, FilterType::Triangle);
    RgbImage::new(height, width, out.into_raw())
}

/// Center-crops to a square, then resizes to `size x size`.
pub fn square_resize(img: &RgbImage, size: usize) -> Result<RgbImage> {
    let side = img.height().min(img.width());
    let top = (img.height() - side) / 2;
    let left = (img.width() - side) / 2;
    let cropped =
        image::imageops::crop_imm(&to_buffer(img), left as u32, top as u32, side as u32, side as u32).to_image();
    let cropped = RgbImage::new(side, side, cropped.into_raw())?;
    resize(&cropped, size, size)
}

/// Hue rotation (up to +-18 degrees) and chroma scaling (0.7..1.3), both
/// multiplied by `strength`, applied in the a/b plane so luminance is kept.
/// Pixels whose gamut clamp would move L by more than 2 units fall back
/// toward their original chroma.
pub fn color_augment(img: &RgbImage, strength: f32, seed: u64) -> RgbImage {
    if strength == 0.0 {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = strength as f64;
    let angle = rng.random_range(-18.0..=18.0f64).to_radians() * s;
    let scale = 1.0 + rng.random_range(-0.3..=0.3f64) * s;
    let (sin, cos) = angle.sin_cos();
    let mut out = Vec::with_capacity(img.pixels().len());
    for px in img.pixels().chunks_exact(3) {
        let [l, a, b] = srgb_pixel_to_lab([px[0] as f64, px[1] as f64, px[2] as f64]);
        let ta = scale * (a * cos - b * sin);
        let tb = scale * (a * sin + b * cos);
        let at = |t: f64| lab_pixel_to_srgb([l, a + t * (ta - a), b + t * (tb - b)]);
        let drift = |rgb: [f64; 3]| (srgb_pixel_to_lab(rgb)[0] - l).abs();
        let mut rgb = at(1.0);
        if drift(rgb) > 2.0 {
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..24 {
                let mid = 0.5 * (lo + hi);
                if drift(at(mid)) > 2.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            rgb = at(lo);
        }
        out.extend(rgb.map(|c| c as f32));
    }
    RgbImage::new(img.height(), img.width(), out).expect("clamped finite output")
}

const SKY: [f32; 3] = [0.35, 0.6, 0.95];
const GROUND: [f32; 3] = [0.25, 0.6, 0.2];
const SHAPE_COLORS: [[f32; 3]; 3] = [
    [0.9, 0.15, 0.1],  // discs
    [0.2, 0.25, 0.85], // squares
    [0.95, 0.85, 0.1], // triangles
];

/// A toy scene: sky over ground plus one to three shapes whose hue is tied
/// to their geometry, so color is predictable from structure.
pub fn procedural_image(size: usize, rng: &mut impl Rng) -> Result<RgbImage> {
    let fs = size as f32;
    let horizon = rng.random_range(0.35..0.7f32) * fs;
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        let yf = y as f32;
        for _x in 0..size {
            let color = if yf < horizon {
                let t = 0.55 + 0.45 * yf / horizon;
                SKY.map(|c| (c * t + (1.0 - t) * 0.1).min(1.0))
            } else {
                let t = 1.0 - 0.4 * (yf - horizon) / (fs - horizon).max(1.0);
                GROUND.map(|c| c * t)
            };
            pixels.extend(color);
        }
    }
    let shapes = rng.random_range(1..=3);
    for _ in 0..shapes {
        let kind = rng.random_range(0..3usize);
        let radius = rng.random_range(0.1..0.22f32) * fs;
        let cx = rng.random_range(radius..fs - radius);
        let cy = rng.random_range(radius..fs - radius);
        let shade = rng.random_range(0.6..1.0f32);
        let color = SHAPE_COLORS[kind].map(|c| c * shade);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let inside = match kind {
                    0 => dx * dx + dy * dy <= radius * radius,
                    1 => dx.abs() <= radius * 0.85 && dy.abs() <= radius * 0.85,
                    _ => dy <= radius * 0.8 && dy >= -radius && dx.abs() <= (dy + radius) * 0.6,
                };
                if inside {
                    let i = (y * size + x) * 3;
                    pixels[i..i + 3].copy_from_slice(&color);
                }
            }
        }
    }
    RgbImage::new(size, size, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::rgb_to_lab;

    fn spec(count: usize) -> DatasetSpec {
        DatasetSpec {
            procedural_count: count,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn batch_sizes_cover_epoch() {
        let ds = Dataset::build(&spec(10)).unwrap();
        let sizes: Vec<usize> = ds.epoch(0, 4, DType::F32).map(|b| b.unwrap().len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut seen: Vec<usize> = ds.epoch(0, 4, DType::F32).flat_map(|b| b.unwrap().ids).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_batches() {
        let a = Dataset::build(&spec(6)).unwrap();
        let b = Dataset::build(&spec(6)).unwrap();
        for (x, y) in a.stream(4, DType::F32).zip(b.stream(4, DType::F32)).take(5) {
            let (x, y) = (x.unwrap(), y.unwrap());
            assert_eq!(x.ids, y.ids);
            assert_eq!(
                x.y_ab.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                y.y_ab.flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
    }

    #[test]
    fn batch_at_matches_stream() {
        let ds = Dataset::build(&spec(7)).unwrap();
        for (step, batch) in ds.stream(3, DType::F32).take(8).enumerate() {
            assert_eq!(batch.unwrap().ids, ds.batch_at(step as u64, 3, DType::F32).unwrap().ids);
        }
    }

    #[test]
    fn batch_shapes() {
        let ds = Dataset::build(&spec(3)).unwrap();
        let batch = ds.epoch(0, 3, DType::F32).next().unwrap().unwrap();
        assert_eq!(batch.x_l.dims(), &[3, 1, 64, 64]);
        assert_eq!(batch.y_ab.dims(), &[3, 2, 64, 64]);
    }

    #[test]
    fn resolution_must_be_multiple_of_32() {
        let bad = DatasetSpec {
            resolution: 48,
            ..spec(1)
        };
        assert!(Dataset::build(&bad).is_err());
    }

    #[test]
    fn empty_directory_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = DatasetSpec {
            root: Some(dir.path().to_path_buf()),
            ..spec(0)
        };
        assert!(matches!(Dataset::build(&s), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn unreadable_files_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = procedural_image(40, &mut rng).unwrap();
        save_rgb_png(&img, &dir.path().join("ok.png")).unwrap();
        let s = DatasetSpec {
            root: Some(dir.path().to_path_buf()),
            resolution: 32,
            ..spec(0)
        };
        let ds = Dataset::build(&s).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!((ds.images()[0].height(), ds.images()[0].width()), (32, 32));
    }

    #[test]
    fn manifest_selects_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for name in ["a.png", "b.png", "c.png"] {
            save_rgb_png(&procedural_image(32, &mut rng).unwrap(), &dir.path().join(name)).unwrap();
        }
        let manifest = dir.path().join("list.txt");
        std::fs::write(&manifest, "c.png\n\na.png\n").unwrap();
        let paths = list_images(dir.path(), Some(&manifest)).unwrap();
        assert_eq!(paths, vec![dir.path().join("c.png"), dir.path().join("a.png")]);
    }

    #[test]
    fn center_crop_then_resize() {
        // Left third red, middle blue, right third red: the crop keeps blue
        // in the middle.
        let (h, w) = (30, 90);
        let mut px = Vec::new();
        for _ in 0..h {
            for x in 0..w {
                px.extend(if (30..60).contains(&x) {
                    [0.0, 0.0, 1.0]
                } else {
                    [1.0, 0.0, 0.0]
                });
            }
        }
        let img = RgbImage::new(h, w, px).unwrap();
        let out = square_resize(&img, 32).unwrap();
        assert_eq!((out.height(), out.width()), (32, 32));
        assert!(out.pixels().chunks(3).all(|p| p[2] > 0.99 && p[0] < 0.01));
    }

    #[test]
    fn augment_identity_at_zero_strength() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = procedural_image(32, &mut rng).unwrap();
        assert_eq!(color_augment(&img, 0.0, 9), img);
    }

    #[test]
    fn augment_is_deterministic_bounded_and_keeps_luminance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..8 {
            let img = procedural_image(32, &mut rng).unwrap();
            let a = color_augment(&img, 1.0, seed);
            assert_eq!(a, color_augment(&img, 1.0, seed));
            assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            let la = rgb_to_lab(&a).unwrap();
            let lo = rgb_to_lab(&img).unwrap();
            for (x, y) in la.l().iter().zip(lo.l()) {
                assert!((x - y).abs() <= 2.0 + 1e-3, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn pairs_reassemble_to_source() {
        let ds = Dataset::build(&spec(2)).unwrap();
        let batch = ds.epoch(0, 2, DType::F32).next().unwrap().unwrap();
        let l = batch.x_l.to_dtype(DType::F64).unwrap();
        let ab = batch.y_ab.to_dtype(DType::F64).unwrap();
        let rgb = crate::colorspace::lab_to_rgb_tensor(&l, &ab).unwrap();
        for (k, &id) in batch.ids.iter().enumerate() {
            let got = rgb.get(k).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let src = &ds.images()[id];
            let plane = 64 * 64;
            for p in 0..plane {
                for c in 0..3 {
                    let want = src.pixels()[p * 3 + c] as f64;
                    assert!((got[c * plane + p] - want).abs() < 1e-3);
                }
            }
        }
    }
}
