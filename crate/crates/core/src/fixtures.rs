//! Bundled content image and prompt used by the demo, tests and ablations.

use crate::error::Result;
use crate::imageio::{decode_ppm, to_rgb8};
use crate::tensor::Tensor;

pub const CONTENT_PPM: &[u8] = include_bytes!("../assets/content.ppm");

pub const STYLE_PROMPT: &str = "Picasso oil painting";

/// Extra prompts for multi-prompt runs.
pub const ALT_PROMPTS: [&str; 3] = ["watercolor sketch", "neon cyberpunk city", "van gogh starry night"];

/// The bundled 64x64 content image.
pub fn content_image() -> Tensor {
    decode_ppm(CONTENT_PPM).expect("bundled fixture is a valid PPM")
}

fn smoothstep(edge: f64, x: f64, width: f64) -> f64 {
    1.0 / (1.0 + (-(x - edge) / width).exp())
}

/// Soft-edged landscape (sky gradient, sun, two hill bands, lake) that the
/// bundled fixture was quantized from.
pub fn procedural_scene(h: usize, w: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(h * w * 3);
    let (sh, sw) = (64.0 / h as f64, 64.0 / w as f64);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 * sh, x as f64 * sw);
            let t = fy / 40.0;
            let mut c = [0.40 + 0.45 * t, 0.60 + 0.30 * t, 0.92 + 0.03 * t];

            let d = ((fx - 46.0).powi(2) + (fy - 14.0).powi(2)).sqrt();
            let sun = 1.0 - smoothstep(7.0, d, 1.2);
            let sun_rgb = [1.0, 0.85, 0.35];
            for k in 0..3 {
                c[k] = c[k] * (1.0 - sun) + sun_rgb[k] * sun;
            }

            let far = 34.0 + 5.0 * (fx / 8.0).sin() + 2.0 * (fx / 3.5 + 1.0).sin();
            let a = smoothstep(far, fy, 0.9);
            let far_rgb = [0.35 - 0.002 * fy, 0.45 + 0.002 * fx, 0.55];
            for k in 0..3 {
                c[k] = c[k] * (1.0 - a) + far_rgb[k] * a;
            }

            let near = 42.0 + 4.0 * (fx / 11.0 + 2.0).sin();
            let b = smoothstep(near, fy, 0.9);
            let g = 0.5 + 0.1 * (fx / 5.0).sin() * (fy / 4.0).cos();
            let near_rgb = [0.22 + 0.1 * g, 0.48 * g + 0.25, 0.18];
            for k in 0..3 {
                c[k] = c[k] * (1.0 - b) + near_rgb[k] * b;
            }

            let lake = (1.0 - smoothstep(14.0, ((fx - 20.0) / 1.8).hypot(fy - 55.0), 1.0)) * b;
            let lake_rgb = [0.25, 0.45 + 0.05 * (fx / 2.0).sin(), 0.75];
            for k in 0..3 {
                c[k] = c[k] * (1.0 - lake) + lake_rgb[k] * lake;
            }
            data.extend(c.iter().map(|v| v.clamp(0.0, 1.0)));
        }
    }
    Tensor::new(&[h, w, 3], data)
}

/// 8-bit quantization of [`procedural_scene`], as stored in the asset.
pub fn quantized_scene(h: usize, w: usize) -> Result<Tensor> {
    let rgb = to_rgb8(&procedural_scene(h, w)?)?;
    Tensor::new(&[h, w, 3], rgb.iter().map(|&v| f64::from(v) / 255.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_asset_matches_generator() {
        let img = content_image();
        assert_eq!(img.shape(), &[64, 64, 3]);
        assert_eq!(img, quantized_scene(64, 64).unwrap());
    }
}
