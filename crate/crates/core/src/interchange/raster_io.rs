use std::fs;
use std::io::BufWriter;
use std::path::Path;

use image::RgbImage;

use super::BinaryMask;
use crate::error::{Error, Result};

/// Integer label raster as read from a ground-truth image (0 = no change).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRaster {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(format!("{}: {other}", path.display())),
    }
}

/// Encodes a binary raster as a 1-bit grayscale PNG (1 = white = change).
pub fn encode_change_map_png(map: &BinaryMask) -> Result<Vec<u8>> {
    let (h, w) = map.size();
    let stride = w.div_ceil(8);
    let mut packed = vec![0u8; stride * h];
    for y in 0..h {
        for x in 0..w {
            if map.get(y, x) {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, w as u32, h as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::One);
        let mut writer = encoder.write_header().map_err(|e| Error::Image(e.to_string()))?;
        writer
            .write_image_data(&packed)
            .map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_change_map_png(map: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_change_map_png(map)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_label_raster(path: impl AsRef<Path>) -> Result<LabelRaster> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_luma16();
    let (w, h) = img.dimensions();
    Ok(LabelRaster {
        height: h as usize,
        width: w as usize,
        labels: img.into_raw(),
    })
}

pub fn read_rgb_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    Ok(image::open(path).map_err(|e| image_err(path, e))?.into_rgb8())
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn write_rgb_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    img.write_to(&mut BufWriter::new(file), image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}
