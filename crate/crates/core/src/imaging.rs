//! Conversions between 8-bit RGB images and `[-1, 1]` pixel latents.

use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Resizes to the latent's spatial size and maps `[0, 255]` to `[-1, 1]`.
pub fn image_to_latent(img: &RgbImage, shape: [usize; 3]) -> Result<Tensor> {
    let [c, h, w] = shape;
    if c != 3 {
        return Err(Error::invalid(format!("pixel latents need 3 channels, got {c}")));
    }
    let resized;
    let src = if img.dimensions() == (w as u32, h as u32) {
        img
    } else {
        resized = image::imageops::resize(img, w as u32, h as u32, FilterType::Triangle);
        &resized
    };
    let mut data = vec![0.0; c * h * w];
    for (x, y, px) in src.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * h + y as usize) * w + x as usize] = px[ch] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![c, h, w], data)
}

/// Maps a `(3, h, w)` latent to 8-bit RGB and upsamples (nearest) to `size x size`.
pub fn latent_to_image(latent: &Tensor, size: u32) -> Result<RgbImage> {
    let s = latent.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid(format!("expected a (3, h, w) latent, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = latent.data();
    let small = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            let v = d[(ch * h + y as usize) * w + x as usize];
            ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    if size as usize == w && size as usize == h {
        Ok(small)
    } else {
        Ok(image::imageops::resize(&small, size, size, FilterType::Nearest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_at_native_size() {
        let img = RgbImage::from_fn(4, 4, |x, y| image::Rgb([(x * 60) as u8, (y * 60) as u8, 255]));
        let lat = image_to_latent(&img, [3, 4, 4]).unwrap();
        assert!(lat.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(latent_to_image(&lat, 4).unwrap(), img);
    }

    #[test]
    fn upsampling_keeps_values() {
        let lat = Tensor::full(&[3, 2, 2], 1.0);
        let img = latent_to_image(&lat, 8).unwrap();
        assert_eq!(img.dimensions(), (8, 8));
        assert!(img.pixels().all(|p| p.0 == [255, 255, 255]));
        assert!(latent_to_image(&Tensor::zeros(&[1, 2, 2]), 2).is_err());
    }
}
