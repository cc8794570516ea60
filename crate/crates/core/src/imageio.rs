//! 8-bit PNG and binary PPM (P6) images as `[H, W, 3]` tensors in `[0, 1]`.

use std::io::{Cursor, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest accepted side length, in pixels.
pub const MAX_SIDE: usize = 2048;

const PNG_SIGNATURE: &[u8; 8] = b"\x89PNG\r\n\x1a\n";

fn check_extent(w: usize, h: usize) -> Result<()> {
    if w == 0 || h == 0 {
        return Err(Error::Input("image has zero extent".into()));
    }
    if w > MAX_SIDE || h > MAX_SIDE {
        return Err(Error::Input(format!("image {w}x{h} exceeds the {MAX_SIDE}px limit")));
    }
    Ok(())
}

fn to_tensor(h: usize, w: usize, rgb: &[u8]) -> Result<Tensor> {
    Tensor::new(&[h, w, 3], rgb.iter().map(|&v| f64::from(v) / 255.0).collect())
}

/// Quantizes to 8 bits; values are clamped to `[0, 1]` first.
pub fn to_rgb8(img: &Tensor) -> Result<Vec<u8>> {
    if img.rank() != 3 || img.shape()[2] != 3 {
        return Err(Error::dim(format!("image must be [H, W, 3], got {:?}", img.shape())));
    }
    img.ensure_finite("image")?;
    Ok(img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect())
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("non-ASCII PPM header".into()))?);
    }
    if fields[0] != "P6" {
        return Err(Error::Format(format!("unsupported PPM magic {:?}", fields[0])));
    }
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Format(format!("bad PPM {what} {s:?}")))
    };
    let (w, h, maxval) = (parse(fields[1], "width")?, parse(fields[2], "height")?, parse(fields[3], "maxval")?);
    if maxval != 255 {
        return Err(Error::Format(format!("only 8-bit PPM is supported, maxval {maxval}")));
    }
    check_extent(w, h)?;
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h * 3;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Format("truncated PPM raster".into()))?;
    to_tensor(h, w, raster)
}

pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let rgb = to_rgb8(img)?;
    let mut out = format!("P6\n{} {}\n255\n", img.shape()[1], img.shape()[0]).into_bytes();
    out.extend_from_slice(&rgb);
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("PNG: {e}")))?;
    let (w, h) = {
        let info = reader.info();
        (info.width as usize, info.height as usize)
    };
    check_extent(w, h)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("PNG output size overflows".into()))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("PNG: {e}")))?;
    let channels = match frame.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Format("PNG palette was not expanded".into())),
    };
    let mut rgb = Vec::with_capacity(w * h * 3);
    for row in buf.chunks(frame.line_size).take(h) {
        for px in row[..w * channels].chunks(channels) {
            match channels {
                1 | 2 => rgb.extend_from_slice(&[px[0]; 3]),
                _ => rgb.extend_from_slice(&px[..3]),
            }
        }
    }
    to_tensor(h, w, &rgb)
}

pub fn encode_png(img: &Tensor) -> Result<Vec<u8>> {
    let rgb = to_rgb8(img)?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.shape()[1] as u32, img.shape()[0] as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Format(format!("PNG: {e}")))?;
        writer.write_image_data(&rgb).map_err(|e| Error::Format(format!("PNG: {e}")))?;
        writer.finish().map_err(|e| Error::Format(format!("PNG: {e}")))?;
    }
    Ok(out)
}

/// Sniffs the format from the leading bytes.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        Err(Error::Format("not a PNG or binary PPM image".into()))
    }
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Writes `bytes` through a temporary file in the target directory and renames
/// it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Format is chosen by extension: `.png`, or `.ppm` / `.pnm`.
pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let bytes = match ext.as_str() {
        "png" => encode_png(img)?,
        "ppm" | "pnm" => encode_ppm(img)?,
        other => return Err(Error::Input(format!("unsupported image extension {other:?} (use .png or .ppm)"))),
    };
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quantized(h: usize, w: usize) -> Tensor {
        let data = (0..h * w * 3).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        Tensor::new(&[h, w, 3], data).unwrap()
    }

    #[test]
    fn ppm_round_trip_is_exact() {
        let img = quantized(5, 7);
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n7 5\n255\n"));
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn ppm_header_comments() {
        let mut bytes = b"P6 # comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let img = decode_image(&bytes).unwrap();
        assert_eq!(img.shape(), &[1, 2, 3]);
        assert_eq!(img.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn png_round_trip_is_exact() {
        let img = quantized(4, 3);
        let bytes = encode_png(&img).unwrap();
        assert_eq!(decode_image(&bytes).unwrap(), img);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(decode_image(b"GIF89a").is_err());
        let bytes = encode_ppm(&quantized(4, 4)).unwrap();
        assert!(decode_image(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_ppm(b"P6\n3000 3000\n255\n").is_err());
    }

    #[test]
    fn write_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let img = quantized(4, 4);
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            write_image(&p, &img).unwrap();
            assert_eq!(read_image(&p).unwrap(), img);
        }
        assert!(write_image(&dir.path().join("a.jpg"), &img).is_err());
    }
}
