//! PNG encode/decode for [0,1] images (8-bit per channel).

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::imaging::Image;

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let quant = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    match c {
        1 => {
            let mut out = GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    out.put_pixel(x as u32, y as u32, image::Luma([quant(img.data()[[0, y, x]])]));
                }
            }
            out.save(path)?;
        }
        3 => {
            let mut out = RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = [
                        quant(img.data()[[0, y, x]]),
                        quant(img.data()[[1, y, x]]),
                        quant(img.data()[[2, y, x]]),
                    ];
                    out.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
            out.save(path)?;
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "cannot encode {c}-channel image as PNG"
            )))
        }
    }
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Image> {
    let decoded = image::open(path)?;
    let img = match decoded {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let data = Array3::from_shape_fn((1, h as usize, w as usize), |(_, y, x)| {
                g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
            });
            Image::new(data)?
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
                rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
            });
            Image::new(data)?
        }
    };
    Ok(img)
}
