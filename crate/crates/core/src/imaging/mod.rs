//! Raster images, perturbation sampling, signed update steps and the SSIM
//! dissimilarity budget.
//!
//! Pixels are stored interleaved (`HWC`) as `f64` intensities in `[0, 255]`.
//! The attacker works on a continuous copy; [`quantize_clamp`] produces the
//! 8-bit raster that is actually uploaded.

mod ppm;
mod ssim;

pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
pub use ssim::{ssim, SsimParams};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_INTENSITY: f64 = 255.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
    quantized: bool,
}

impl Image {
    /// Builds an image from interleaved pixels. Values are clamped to the
    /// valid range; the quantized flag is derived from the data.
    pub fn from_pixels(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f64>,
    ) -> Result<Self> {
        let expected = height * width * channels;
        if pixels.len() != expected || expected == 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}x{width}x{channels}"),
                actual: format!("{} values", pixels.len()),
            });
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pixel".into()));
        }
        let pixels: Vec<f64> = pixels.into_iter().map(clamp_intensity).collect();
        let quantized = pixels.iter().all(|p| p.fract() == 0.0);
        Ok(Image {
            height,
            width,
            channels,
            pixels,
            quantized,
        })
    }

    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_pixels(
            height,
            width,
            channels,
            bytes.iter().map(|&b| f64::from(b)).collect(),
        )
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::from_pixels(height, width, channels, vec![value; height * width * channels])
            .expect("non-empty shape")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn is_quantized(&self) -> bool {
        self.quantized
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// 8-bit view; requires a quantized image.
    pub fn to_bytes(&self) -> Option<Vec<u8>> {
        self.quantized
            .then(|| self.pixels.iter().map(|&p| p as u8).collect())
    }

    pub fn max_abs_diff(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub(crate) fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_error(self.shape(), other.shape()));
        }
        Ok(())
    }
}

pub(crate) fn shape_error(expected: (usize, usize, usize), actual: (usize, usize, usize)) -> Error {
    Error::ShapeMismatch {
        expected: format!("{}x{}x{}", expected.0, expected.1, expected.2),
        actual: format!("{}x{}x{}", actual.0, actual.1, actual.2),
    }
}

#[inline]
fn clamp_intensity(v: f64) -> f64 {
    v.clamp(0.0, MAX_INTENSITY)
}

/// Per-pixel update direction with entries in `{-1, 0, +1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelDirection {
    shape: (usize, usize, usize),
    signs: Vec<i8>,
}

impl PixelDirection {
    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        PixelDirection {
            shape,
            signs: vec![0; shape.0 * shape.1 * shape.2],
        }
    }

    /// Sign of a pixel-shaped gradient. Exact zeros stay zero.
    pub fn from_gradient(shape: (usize, usize, usize), gradient: &[f64]) -> Result<Self> {
        if gradient.len() != shape.0 * shape.1 * shape.2 {
            return Err(Error::DimensionMismatch {
                expected: shape.0 * shape.1 * shape.2,
                actual: gradient.len(),
            });
        }
        let signs = gradient
            .iter()
            .map(|&g| {
                if g > 0.0 {
                    1
                } else if g < 0.0 {
                    -1
                } else {
                    0
                }
            })
            .collect();
        Ok(PixelDirection { shape, signs })
    }

    pub fn from_signs(shape: (usize, usize, usize), signs: Vec<i8>) -> Result<Self> {
        if signs.len() != shape.0 * shape.1 * shape.2 {
            return Err(Error::DimensionMismatch {
                expected: shape.0 * shape.1 * shape.2,
                actual: signs.len(),
            });
        }
        if signs.iter().any(|s| !(-1..=1).contains(s)) {
            return Err(Error::InvalidArgument("direction entries must be in {-1,0,1}".into()));
        }
        Ok(PixelDirection { shape, signs })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn is_zero(&self) -> bool {
        self.signs.iter().all(|&s| s == 0)
    }
}

/// Uniform draw from the L-infinity ball of radius `delta` around `image`,
/// clamped to the valid intensity range.
pub fn sample_perturbation<R: Rng + ?Sized>(image: &Image, delta: f64, rng: &mut R) -> Result<Image> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidArgument(format!("delta must be >= 0, got {delta}")));
    }
    if delta == 0.0 {
        return Ok(image.clone());
    }
    let pixels = image
        .pixels
        .iter()
        .map(|&p| clamp_intensity(p + rng.random_range(-delta..=delta)))
        .collect();
    Ok(Image {
        pixels,
        quantized: false,
        ..*image
    })
}

/// `clamp(image + epsilon * direction, 0, 255)`.
pub fn apply_signed_step(image: &Image, direction: &PixelDirection, epsilon: f64) -> Result<Image> {
    if direction.shape != image.shape() {
        return Err(shape_error(image.shape(), direction.shape));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    Image::from_pixels(
        image.height,
        image.width,
        image.channels,
        image
            .pixels
            .iter()
            .zip(&direction.signs)
            .map(|(&p, &s)| p + epsilon * f64::from(s))
            .collect(),
    )
}

/// Rounds half-to-even into `[0, 255]` and marks the image quantized.
pub fn quantize_clamp(image: &Image) -> Image {
    if image.quantized {
        return image.clone();
    }
    Image {
        pixels: image
            .pixels
            .iter()
            .map(|&p| clamp_intensity(p.round_ties_even()))
            .collect(),
        quantized: true,
        ..*image
    }
}
