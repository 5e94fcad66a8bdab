use super::{ScreenGeometry, ScreenImage};
use crate::error::{Error, Result};

/// Intensities below this level (relative to the peak) are zeroed.
pub const PIXEL_THRESHOLD: f32 = 0.01;

/// Sets every pixel below `level` to exactly zero.
pub fn threshold(pixels: &mut [f32], level: f32) {
    for p in pixels.iter_mut() {
        if *p < level {
            *p = 0.0;
        }
    }
}

fn clip_negative(pixels: &mut [f32]) {
    for p in pixels.iter_mut() {
        if *p < 0.0 {
            *p = 0.0;
        }
    }
}

fn normalize_max(pixels: &mut [f32]) -> Result<()> {
    let max = pixels.iter().copied().fold(0.0f32, f32::max);
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::EmptyImage);
    }
    if max != 1.0 {
        pixels.iter_mut().for_each(|p| *p /= max);
    }
    Ok(())
}

/// Clip, normalise to unit maximum and threshold. Idempotent.
pub(crate) fn normalize_stages(pixels: &mut [f32]) -> Result<()> {
    clip_negative(pixels);
    normalize_max(pixels)?;
    threshold(pixels, PIXEL_THRESHOLD);
    Ok(())
}

/// Averages non-overlapping `factor x factor` blocks.
pub fn block_downsample(img: &ScreenImage, factor: usize) -> Result<ScreenImage> {
    if factor == 0 || !img.height.is_multiple_of(factor) || !img.width.is_multiple_of(factor) {
        return Err(Error::Input(format!(
            "{}x{} image cannot be split into {factor}x{factor} blocks",
            img.height, img.width
        )));
    }
    let (h, w) = (img.height / factor, img.width / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0f32; h * w];
    for (r, row) in out.chunks_mut(w).enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for dr in 0..factor {
                let base = (r * factor + dr) * img.width + c * factor;
                acc += img.pixels[base..base + factor]
                    .iter()
                    .map(|&p| p as f64)
                    .sum::<f64>();
            }
            *v = (acc * inv) as f32;
        }
    }
    ScreenImage::new(h, w, out, img.calibration.binned(factor))
}

fn crop(img: &ScreenImage, origin: (usize, usize), size: (usize, usize)) -> ScreenImage {
    let mut pixels = Vec::with_capacity(size.0 * size.1);
    for r in origin.0..origin.0 + size.0 {
        let base = r * img.width + origin.1;
        pixels.extend_from_slice(&img.pixels[base..base + size.1]);
    }
    ScreenImage {
        height: size.0,
        width: size.1,
        pixels,
        calibration: img.calibration,
    }
}

/// Screen geometry together with its stored background frame.
#[derive(Clone, Debug)]
pub struct Screen {
    geometry: ScreenGeometry,
    background: Vec<f32>,
}

impl Screen {
    pub fn new(geometry: ScreenGeometry, background: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if background.len() != geometry.raw.0 * geometry.raw.1 {
            return Err(Error::shape(
                "background frame",
                &[geometry.raw.0, geometry.raw.1],
                &[background.len()],
            ));
        }
        Ok(Self {
            geometry,
            background,
        })
    }

    pub fn geometry(&self) -> &ScreenGeometry {
        &self.geometry
    }

    pub fn background(&self) -> &[f32] {
        &self.background
    }

    /// Background subtraction, clipping, unit-max normalisation, threshold,
    /// crop and block averaging. The threshold is applied once more after
    /// averaging so that no output pixel lies in `(0, 0.01)`.
    pub fn preprocess(&self, raw: &ScreenImage) -> Result<ScreenImage> {
        let g = &self.geometry;
        if (raw.height, raw.width) != g.raw {
            return Err(Error::shape(
                "preprocess",
                &[raw.height, raw.width],
                &[g.raw.0, g.raw.1],
            ));
        }
        if raw.pixels.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Input(
                "raw intensities must be finite and non-negative".into(),
            ));
        }
        let mut img = raw.clone();
        img.pixels
            .iter_mut()
            .zip(&self.background)
            .for_each(|(p, b)| *p -= b);
        normalize_stages(&mut img.pixels)?;
        let mut out = block_downsample(&crop(&img, g.crop_origin, g.crop), g.factor)?;
        threshold(&mut out.pixels, PIXEL_THRESHOLD);
        if out.pixels.iter().all(|&p| p == 0.0) {
            return Err(Error::EmptyImage);
        }
        Ok(out)
    }
}
