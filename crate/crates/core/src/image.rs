//! PNG output for renders, depth maps and skeleton images.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

fn check(len: usize, w: usize, h: usize, c: usize) -> Result<()> {
    if len != w * h * c {
        return Err(Error::Shape(format!("{len} values for a {w}x{h}x{c} image")));
    }
    Ok(())
}

fn save<P: image::Pixel<Subpixel = S> + image::PixelWithColorType, S: image::Primitive>(
    img: ImageBuffer<P, Vec<S>>,
    path: &Path,
) -> Result<()>
where
    [S]: image::EncodableLayout,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

/// 8-bit RGB from row-major `[0, 1]` floats.
pub fn rgb8(values: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    check(values.len(), width, height, 3)?;
    Ok(values.iter().map(|&v| quantize(v, 255.0) as u8).collect())
}

pub fn write_rgb8(path: &Path, data: Vec<u8>, width: usize, height: usize) -> Result<()> {
    check(data.len(), width, height, 3)?;
    let img = ImageBuffer::<Rgb<u8>, _>::from_raw(width as u32, height as u32, data).expect("size checked");
    save(img, path)
}

pub fn write_rgb(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    write_rgb8(path, rgb8(values, width, height)?, width, height)
}

/// 16-bit grayscale from `[0, 1]` floats.
pub fn write_gray16(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    check(values.len(), width, height, 1)?;
    let data = values.iter().map(|&v| quantize(v, 65535.0) as u16).collect();
    let img = ImageBuffer::<Luma<u16>, _>::from_raw(width as u32, height as u32, data).expect("size checked");
    save(img, path)
}

/// Places equally sized RGB images side by side.
pub fn hstack(images: &[Vec<f64>], width: usize, height: usize) -> Result<Vec<f64>> {
    for im in images {
        check(im.len(), width, height, 3)?;
    }
    let total = width * images.len();
    let mut out = vec![0.0; total * height * 3];
    for (k, im) in images.iter().enumerate() {
        for y in 0..height {
            let src = &im[y * width * 3..(y + 1) * width * 3];
            let at = (y * total + k * width) * 3;
            out[at..at + width * 3].copy_from_slice(src);
        }
    }
    Ok(out)
}
