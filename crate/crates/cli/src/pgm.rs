//! 16-bit binary portable greymap.

use psae::beamline::ScreenImage;

/// `P5` with maxval 65535; pixels in [0, 1] map linearly, big-endian samples.
pub fn encode(img: &ScreenImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    out.reserve(2 * img.pixels.len());
    for &p in &img.pixels {
        let v = (p.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16;
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}
