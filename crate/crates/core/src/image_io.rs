//! Image decoding, resizing and PNG output with embedded text metadata.
//!
//! Images travel through the crate as `(3, H, W)` f32 tensors in `[0, 1]`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn load_rgb(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)?.to_rgb8();
    rgb8_to_tensor(&img)
}

pub fn rgb8_to_tensor(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &Device::Cpu)?)
}

/// Checks that `t` is a `(3, H, W)` image tensor and returns `(H, W)`.
pub fn check_rgb(t: &Tensor) -> Result<(usize, usize)> {
    match t.dims() {
        [3, h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        other => Err(Error::Format(format!("expected an RGB image tensor (3, H, W), got {other:?}"))),
    }
}

fn to_planes(t: &Tensor) -> Result<(usize, usize, Vec<f32>)> {
    let (h, w) = check_rgb(t)?;
    Ok((h, w, t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?))
}

pub fn tensor_to_rgb8(t: &Tensor) -> Result<RgbImage> {
    let (h, w, data) = to_planes(t)?;
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(data[i]), q(data[h * w + i]), q(data[2 * h * w + i])])
    }))
}

/// Bilinear resize to `(height, width)`.
pub fn resize(t: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w, data) = to_planes(t)?;
    if (h, w) == (height, width) {
        return Ok(t.to_dtype(DType::F32)?);
    }
    let img: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([data[i], data[h * w + i], data[2 * h * w + i]])
    });
    let out = image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle);
    let mut planes = vec![0f32; 3 * height * width];
    for (x, y, px) in out.enumerate_pixels() {
        for c in 0..3 {
            planes[c * height * width + y as usize * width + x as usize] = px[c];
        }
    }
    Ok(Tensor::from_vec(planes, (3, height, width), &Device::Cpu)?)
}

/// Scales the shorter side to `size`, then takes the central `size x size` crop.
pub fn resize_shorter_center_crop(t: &Tensor, size: usize) -> Result<Tensor> {
    let (h, w) = check_rgb(t)?;
    let (nh, nw) = if h <= w {
        (size, ((w * size) as f64 / h as f64).round().max(size as f64) as usize)
    } else {
        (((h * size) as f64 / w as f64).round().max(size as f64) as usize, size)
    };
    let r = resize(t, nh, nw)?;
    let top = (nh - size) / 2;
    let left = (nw - size) / 2;
    Ok(r.narrow(1, top, size)?.narrow(2, left, size)?.contiguous()?)
}

/// Writes an 8-bit RGB PNG carrying `text` as `tEXt` chunks.
pub fn save_png(path: impl AsRef<Path>, t: &Tensor, text: &[(&str, String)]) -> Result<()> {
    let path = path.as_ref();
    let img = tensor_to_rgb8(t)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width(), img.height());
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.clone())
            .map_err(|e| Error::Format(format!("png text chunk: {e}")))?;
    }
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Format(format!("png header: {e}")))?;
    writer
        .write_image_data(img.as_raw())
        .map_err(|e| Error::Format(format!("png data: {e}")))?;
    writer.finish().map_err(|e| Error::Format(format!("png finish: {e}")))?;
    Ok(())
}

/// `tEXt` chunks of a PNG file.
pub fn read_png_text(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("png decode: {e}")))?;
    Ok(reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|c| (c.keyword.clone(), c.text.clone()))
        .collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of an image tensor (its f32 values).
pub fn image_hash(t: &Tensor) -> Result<String> {
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut h = Sha256::new();
    for d in t.dims() {
        h.update((*d as u64).to_le_bytes());
    }
    for x in v {
        h.update(x.to_le_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_keeps_pixels_and_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| (i % 256) as f32 / 255.0).collect();
        let t = Tensor::from_vec(data, (3, 4, 5), &Device::Cpu).unwrap();
        save_png(&path, &t, &[("meta", "{\"seed\":7}".into())]).unwrap();
        let back = load_rgb(&path).unwrap();
        let diff = (back - &t).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap();
        assert!(diff.to_scalar::<f32>().unwrap() < 1e-6);
        let text = read_png_text(&path).unwrap();
        assert_eq!(text, vec![("meta".to_string(), "{\"seed\":7}".to_string())]);
    }

    #[test]
    fn center_crop_shape() {
        let t = Tensor::zeros((3, 40, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(resize_shorter_center_crop(&t, 32).unwrap().dims(), &[3, 32, 32]);
        let bad = Tensor::zeros((1, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(check_rgb(&bad), Err(Error::Format(_))));
    }
}
