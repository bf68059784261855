//! sRGB <-> CIELAB conversion (D65 white, standard sRGB companding) and
//! the luminance/chrominance split the colorizer works in.
//!
//! Scalar conversions run in `f64` and store `f32`. The tensor variant
//! [`lab_to_rgb_tensor`] is differentiable and does not clamp, so losses can
//! see out-of-gamut predictions.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Linear sRGB -> XYZ, D65.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

/// XYZ -> linear sRGB, the exact inverse of `RGB_TO_XYZ`.
const XYZ_TO_RGB: [[f64; 3]; 3] = invert3(RGB_TO_XYZ);

const fn invert3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
    let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
    let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    [
        [
            c00 / det,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det,
        ],
        [
            c01 / det,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det,
        ],
        [
            c02 / det,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det,
        ],
    ]
}

/// Reference white as the row sums of `RGB_TO_XYZ`, so that R = G = B maps
/// to a = b = 0 up to rounding.
const WHITE: [f64; 3] = [
    0.412_456_4 + 0.357_576_1 + 0.180_437_5,
    0.212_672_9 + 0.715_152_2 + 0.072_175_0,
    0.019_333_9 + 0.119_192_0 + 0.950_304_1,
];

const DELTA: f64 = 6.0 / 29.0;

pub const L_MAX: f32 = 100.0;
pub const AB_MIN: f32 = -128.0;
pub const AB_MAX: f32 = 127.0;

/// An RGB image, row-major `H x W x 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl RgbImage {
    /// Builds an image from interleaved RGB values. Values are clamped into
    /// `[0, 1]`; non-finite values are rejected.
    pub fn new(height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Input(format!("empty image {height}x{width}")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::shape("RgbImage::new", height * width * 3, pixels.len()));
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("rgb pixel {} channel {}", i / 3, i % 3)));
        }
        for v in &mut pixels {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Converts every pixel to its luminance and replicates it, i.e. the
    /// neutral-chroma version of this image.
    pub fn to_gray(&self) -> Result<RgbImage> {
        let lab = rgb_to_lab(self)?;
        let (l, ab) = split_luminance(&lab);
        let zeros = vec![0.0; ab.len()];
        let gray = merge_channels(self.height, self.width, l, zeros)?;
        Ok(lab_to_rgb(&gray))
    }
}

/// A CIELAB image: `L` is `H x W`, `ab` is interleaved `H x W x 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    height: usize,
    width: usize,
    l: Vec<f32>,
    ab: Vec<f32>,
}

impl LabImage {
    pub fn new(height: usize, width: usize, l: Vec<f32>, ab: Vec<f32>) -> Result<Self> {
        merge_channels(height, width, l, ab)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn l(&self) -> &[f32] {
        &self.l
    }

    pub fn ab(&self) -> &[f32] {
        &self.ab
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = y * self.width + x;
        [self.l[i], self.ab[2 * i], self.ab[2 * i + 1]]
    }
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// Converts one sRGB triple (each in `[0, 1]`) to `[L, a, b]`.
pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let mut xyz = [0.0; 3];
    for (row, out) in RGB_TO_XYZ.iter().zip(xyz.iter_mut()) {
        *out = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts one `[L, a, b]` triple to sRGB, clamping into the gamut.
pub fn lab_pixel_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        WHITE[0] * lab_f_inv(fx),
        WHITE[1] * lab_f_inv(fy),
        WHITE[2] * lab_f_inv(fz),
    ];
    let mut rgb = [0.0; 3];
    for (row, out) in XYZ_TO_RGB.iter().zip(rgb.iter_mut()) {
        let lin = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
        *out = linear_to_srgb(lin.clamp(0.0, 1.0)).clamp(0.0, 1.0);
    }
    rgb
}

pub fn rgb_to_lab(img: &RgbImage) -> Result<LabImage> {
    let n = img.height * img.width;
    let mut l = Vec::with_capacity(n);
    let mut ab = Vec::with_capacity(2 * n);
    for px in img.pixels.chunks_exact(3) {
        let lab = srgb_pixel_to_lab([px[0] as f64, px[1] as f64, px[2] as f64]);
        if !lab.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("rgb_to_lab".into()));
        }
        l.push(lab[0].clamp(0.0, L_MAX as f64) as f32);
        ab.push(lab[1] as f32);
        ab.push(lab[2] as f32);
    }
    Ok(LabImage {
        height: img.height,
        width: img.width,
        l,
        ab,
    })
}

pub fn lab_to_rgb(img: &LabImage) -> RgbImage {
    let mut pixels = Vec::with_capacity(img.height * img.width * 3);
    for (l, ab) in img.l.iter().zip(img.ab.chunks_exact(2)) {
        let rgb = lab_pixel_to_srgb([*l as f64, ab[0] as f64, ab[1] as f64]);
        pixels.extend(rgb.map(|c| c as f32));
    }
    RgbImage {
        height: img.height,
        width: img.width,
        pixels,
    }
}

/// Splits a Lab image into its luminance plane and interleaved AB planes.
pub fn split_luminance(img: &LabImage) -> (Vec<f32>, Vec<f32>) {
    (img.l.clone(), img.ab.clone())
}

/// Recombines a luminance plane with interleaved AB planes.
pub fn merge_channels(height: usize, width: usize, l: Vec<f32>, ab: Vec<f32>) -> Result<LabImage> {
    if height == 0 || width == 0 {
        return Err(Error::Input(format!("empty image {height}x{width}")));
    }
    let n = height * width;
    if l.len() != n {
        return Err(Error::shape("merge_channels (L)", n, l.len()));
    }
    if ab.len() != 2 * n {
        return Err(Error::shape("merge_channels (AB)", 2 * n, ab.len()));
    }
    Ok(LabImage { height, width, l, ab })
}

fn const_like(t: &Tensor, v: f64) -> Result<Tensor> {
    Ok(Tensor::full(v, (), t.device())?.to_dtype(t.dtype())?)
}

/// Differentiable Lab -> sRGB over `(B, 1, H, W)` luminance and `(B, 2, H, W)`
/// chrominance in Lab units. Returns `(B, 3, H, W)` sRGB on the `[0, 1]`
/// scale without any gamut clamp.
pub fn lab_to_rgb_tensor(l: &Tensor, ab: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = l.dims4()?;
    if c != 1 || ab.dims4()? != (b, 2, h, w) {
        return Err(Error::shape("lab_to_rgb_tensor", (b, 2, h, w), ab.dims().to_vec()));
    }
    let fy = ((l + 16.0)? / 116.0)?;
    let fx = (&fy + (ab.narrow(1, 0, 1)? / 500.0)?)?;
    let fz = (&fy - (ab.narrow(1, 1, 1)? / 200.0)?)?;
    let finv = |t: &Tensor| -> Result<Tensor> {
        let cube = t.powf(3.0)?;
        let lin = ((t - 4.0 / 29.0)? * (3.0 * DELTA * DELTA))?;
        let mask = t.gt(&const_like(t, DELTA)?.broadcast_as(t.shape())?)?;
        Ok(mask.where_cond(&cube, &lin)?)
    };
    let x = (finv(&fx)? * WHITE[0])?;
    let y = (finv(&fy)? * WHITE[1])?;
    let z = (finv(&fz)? * WHITE[2])?;
    let threshold = 0.003_130_8;
    let mut channels = Vec::with_capacity(3);
    for row in XYZ_TO_RGB.iter() {
        let lin = (((&x * row[0])? + (&y * row[1])?)? + (&z * row[2])?)?;
        let floor = const_like(&lin, threshold)?.broadcast_as(lin.shape())?;
        // The power branch only sees values above the threshold, so its
        // derivative stays finite for the samples the mask discards.
        let pow = ((lin.maximum(&floor)?.powf(1.0 / 2.4)? * 1.055)? - 0.055)?;
        let low = (&lin * 12.92)?;
        let mask = lin.gt(&floor)?;
        channels.push(mask.where_cond(&pow, &low)?);
    }
    Ok(Tensor::cat(&channels, 1)?)
}

/// Non-differentiable sRGB -> Lab over `(B, 3, H, W)` tensors, via the scalar
/// path. Used to build training targets.
pub fn rgb_tensor_to_lab(rgb: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = rgb.dims4()?;
    if c != 3 {
        return Err(Error::shape("rgb_tensor_to_lab", 3, c));
    }
    let data = rgb.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let plane = h * w;
    let mut l = vec![0f32; b * plane];
    let mut ab = vec![0f32; b * 2 * plane];
    for bi in 0..b {
        let base = bi * 3 * plane;
        for p in 0..plane {
            let lab = srgb_pixel_to_lab([data[base + p], data[base + plane + p], data[base + 2 * plane + p]]);
            l[bi * plane + p] = lab[0] as f32;
            ab[bi * 2 * plane + p] = lab[1] as f32;
            ab[bi * 2 * plane + plane + p] = lab[2] as f32;
        }
    }
    let dev = rgb.device();
    Ok((
        Tensor::from_vec(l, (b, 1, h, w), dev)?.to_dtype(rgb.dtype())?,
        Tensor::from_vec(ab, (b, 2, h, w), dev)?.to_dtype(rgb.dtype())?,
    ))
}
