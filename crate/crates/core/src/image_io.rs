//! 8-bit RGB PNG conversion for `[3, H, W]` images in `[-1, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(x + 1)·127.5`, rounded half away from zero and clamped to a byte.
pub fn quantize(x: f64) -> u8 {
    if x.is_nan() {
        return 0;
    }
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

fn check(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [3, h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        s => Err(Error::dim(format!(
            "image tensor must be [3, H, W], got {s:?}"
        ))),
    }
}

pub fn to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (h, w) = check(t)?;
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = y as usize * w + x as usize;
        image::Rgb([
            quantize(d[at]),
            quantize(d[h * w + at]),
            quantize(d[2 * h * w + at]),
        ])
    }))
}

pub fn from_rgb(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn(vec![3, h, w], |i| {
        let (c, at) = (i / (h * w), i % (h * w));
        dequantize(img.get_pixel((at % w) as u32, (at / w) as u32)[c])
    })
}

pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let img = to_rgb(t)?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Decodes a PNG (any colour type) as RGB.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(from_rgb(&img.to_rgb8()))
}

/// Width and height from the PNG header without decoding pixels.
pub fn png_dimensions(bytes: &[u8]) -> Result<(u32, u32)> {
    image::ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png)
        .into_dimensions()
        .map_err(|e| Error::Image(e.to_string()))
}

pub fn save_png(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_png(t)?)?;
    Ok(())
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_png(&std::fs::read(path)?)
}
