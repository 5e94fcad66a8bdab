//! Browser bindings: simulate a screen shot, compare two shots with MS-SSIM,
//! and size a decoder. The plain functions are usable (and tested) natively;
//! the `wasm_bindgen` wrappers below only convert errors to JS strings.

use psae::beamline::{GenOptions, PhaseVector, ScreenImage, WorkingPoint};
use psae::diagnostics::LpsSummary;
use psae::loss::{ms_ssim, MsSsimConfig};
use psae::model::{DecoderConfig, EncoderConfig};
use psae::tensor::Tensor;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Particle count used in the browser; enough for smooth 96x128 images.
pub const DEMO_PARTICLES: usize = 60_000;

/// A preprocessed 96x128 shot with its longitudinal diagnostics.
#[wasm_bindgen]
pub struct Shot {
    image: ScreenImage,
    lps: LpsSummary,
}

#[wasm_bindgen]
impl Shot {
    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    /// Row-major intensities in [0, 1].
    pub fn pixels(&self) -> Vec<f32> {
        self.image.pixels.clone()
    }

    /// RGBA bytes for `ImageData`, grey levels.
    pub fn rgba(&self) -> Vec<u8> {
        self.image
            .pixels
            .iter()
            .flat_map(|&p| {
                let v = (p.clamp(0.0, 1.0) * 255.0).round() as u8;
                [v, v, v, 255]
            })
            .collect()
    }

    /// Current per time column (A).
    pub fn current(&self) -> Vec<f64> {
        self.lps.current_profile.clone()
    }

    pub fn time_per_px_ps(&self) -> f64 {
        self.image.calibration.time_per_px_ps
    }

    pub fn peak_current(&self) -> f64 {
        self.lps.current_profile.iter().copied().fold(0.0, f64::max)
    }

    /// Current-weighted mean slice energy spread (MeV), NaN if undefined.
    pub fn mean_slice_spread(&self) -> f64 {
        self.lps.mean_slice_spread().unwrap_or(f64::NAN)
    }
}

fn phases(wp: WorkingPoint, gun: f64, a1: f64, ah1: f64) -> PhaseVector {
    match wp {
        WorkingPoint::Wp1 => PhaseVector::wp1(gun, a1, ah1),
        WorkingPoint::Wp2 => PhaseVector::wp2(gun, a1),
    }
}

/// Simulates and preprocesses one desk-scale shot (`ah1` is ignored for WP2).
pub fn simulate_shot(wp: &str, gun: f64, a1: f64, ah1: f64, seed: u64) -> Result<Shot, String> {
    let wp: WorkingPoint = wp.parse().map_err(|e: psae::Error| e.to_string())?;
    let opts = GenOptions {
        particles: DEMO_PARTICLES,
        ..GenOptions::default()
    };
    let sim = opts.simulator(wp).map_err(|e| e.to_string())?;
    let image = sim
        .shot(&phases(wp, gun, a1, ah1), seed)
        .map_err(|e| e.to_string())?;
    let lps = LpsSummary::of(&image).map_err(|e| e.to_string())?;
    Ok(Shot { image, lps })
}

/// Multi-scale structural similarity of two shots.
pub fn shot_similarity(a: &Shot, b: &Shot) -> Result<f64, String> {
    let t = |img: &ScreenImage| {
        Tensor::new(
            [img.height, img.width],
            img.pixels.iter().map(|&p| p as f64).collect(),
        )
        .map_err(|e| e.to_string())
    };
    ms_ssim(&t(&a.image)?, &t(&b.image)?, &MsSsimConfig::default()).map_err(|e| e.to_string())
}

/// Shape chain and parameter counts of a ten-stage decoder, as JSON.
pub fn decoder_report(
    channels: &str,
    n_upsample: usize,
    latent: usize,
    phase_dim: usize,
) -> Result<String, String> {
    let ch = channels
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad channel width `{}`", s.trim()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let dec = DecoderConfig::new(latent, &ch, n_upsample).map_err(|e| e.to_string())?;
    let enc = EncoderConfig::new(phase_dim, latent);
    let chain = dec.shape_chain().map_err(|e| e.to_string())?;
    let (h, w) = dec.output_dims().map_err(|e| e.to_string())?;
    Ok(json!({
        "output": [h, w],
        "chain": chain,
        "decoder_parameters": dec.param_count(),
        "encoder_parameters": enc.param_count(),
        "total_parameters": dec.param_count() + enc.param_count(),
    })
    .to_string())
}

#[wasm_bindgen]
pub fn simulate(wp: &str, gun: f64, a1: f64, ah1: f64, seed: u32) -> Result<Shot, JsValue> {
    simulate_shot(wp, gun, a1, ah1, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn similarity(a: &Shot, b: &Shot) -> Result<f64, JsValue> {
    shot_similarity(a, b).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn decoder_summary(
    channels: &str,
    n_upsample: usize,
    latent: usize,
    phase_dim: usize,
) -> Result<String, JsValue> {
    decoder_report(channels, n_upsample, latent, phase_dim).map_err(|e| JsValue::from_str(&e))
}
