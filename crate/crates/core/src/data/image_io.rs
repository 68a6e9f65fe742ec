//! 8-bit RGB PNG reading and writing for `[3, H, W]` tensors in `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rainforge_tensor::Tensor;

use crate::error::{Error, Result};

fn image_err(path: &Path, msg: impl ToString) -> Error {
    Error::Image { path: path.to_path_buf(), msg: msg.to_string() }
}

/// Loads an 8-bit RGB PNG; each byte `v` maps to `v / 255`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Rgb || depth != png::BitDepth::Eight {
        return Err(image_err(path, format!("expected 8-bit RGB, found {depth:?}-bit {color:?}")));
    }
    let size = reader.output_buffer_size().ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    Ok(Tensor::from_fn([3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        buf[y * stride + x * 3 + c] as f32 / 255.0
    }))
}

/// Clamps to `[0, 1]` and rounds half up to the nearest of 256 levels.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes a `[3, H, W]` (or `[1, 3, H, W]`) tensor as an 8-bit RGB PNG.
pub fn save_image(img: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = match *img.shape() {
        [3, h, w] | [1, 3, h, w] => (h, w),
        _ => return Err(image_err(path, format!("expected a [3, H, W] image, got {:?}", img.shape()))),
    };
    let d = img.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            bytes.push(quantize(d[c * h * w + p]));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))?;
    Ok(())
}

/// PNG files in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.7), 255);
        for v in 0..=255u8 {
            assert_eq!(quantize(v as f32 / 255.0), v);
        }
    }
}
