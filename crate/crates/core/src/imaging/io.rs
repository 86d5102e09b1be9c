use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array3;

use super::{sirt, BitOrigin, ColorSpace, Image};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Png8,
    Png16,
    Sirt,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png8 | ImageFormat::Png16 => "png",
            ImageFormat::Sirt => "sirt",
        }
    }
}

fn decode_err(path: &Path, reason: impl ToString) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Load a PNG (8/16-bit gray or RGB, alpha dropped) or a `.sirt` H x W x C tensor.
/// Values are scaled to `[0, 1]` and odd dimensions are center-cropped to even.
pub fn load_image(path: &Path, colorspace: ColorSpace) -> Result<Image> {
    let is_sirt = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("sirt"));
    let img = if is_sirt {
        load_sirt(path, colorspace, true)?
    } else {
        load_png(path, colorspace)?
    };
    let h = img.height() / 2 * 2;
    let w = img.width() / 2 * 2;
    if h == 0 || w == 0 {
        return Err(Error::InvalidImage(format!(
            "{} is too small ({}x{})",
            path.display(),
            img.height(),
            img.width()
        )));
    }
    if (h, w) == (img.height(), img.width()) {
        Ok(img)
    } else {
        img.center_crop(h, w)
    }
}

fn load_png(path: &Path, colorspace: ColorSpace) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e))?;
    let (color, depth) = reader.output_color_type();
    let (src_channels, keep) = match color {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(decode_err(path, "indexed PNGs are not supported"));
        }
    };
    let (bytes_per_sample, max, origin) = match depth {
        png::BitDepth::Eight => (1, 255.0f32, BitOrigin::U8),
        png::BitDepth::Sixteen => (2, 65535.0f32, BitOrigin::U16),
        other => {
            return Err(decode_err(path, format!("unsupported bit depth {other:?}")));
        }
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(path, e))?;
    let (h, w) = (info.height as usize, info.width as usize);
    if h == 0 || w == 0 {
        return Err(Error::InvalidImage(format!("{} is empty", path.display())));
    }
    let line = info.line_size;
    let data = Array3::from_shape_fn((h, w, keep), |(y, x, c)| {
        let at = y * line + (x * src_channels + c) * bytes_per_sample;
        let raw = if bytes_per_sample == 1 {
            buf[at] as f32
        } else {
            u16::from_be_bytes([buf[at], buf[at + 1]]) as f32
        };
        raw / max
    });
    Ok(Image::new(data, colorspace)?.with_bit_origin(origin))
}

fn load_sirt(path: &Path, colorspace: ColorSpace, clamp: bool) -> Result<Image> {
    let t = sirt::read(path)?;
    let dims = match t.dims.as_slice() {
        [h, w, c] => (*h, *w, *c),
        [h, w] => (*h, *w, 1),
        other => {
            return Err(decode_err(path, format!("expected a rank-3 image, got dims {other:?}")));
        }
    };
    if t.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidImage(format!("{} holds non-finite values", path.display())));
    }
    let data = Array3::from_shape_vec(dims, t.data)
        .map_err(|e| decode_err(path, e))?;
    let data = if clamp { data.mapv(|v| v.clamp(0.0, 1.0)) } else { data };
    Image::new(data, colorspace)
}

/// Load a `.sirt` image as stored, without clamping or cropping. Used for
/// noise-carrying targets whose values legitimately leave `[0, 1]`.
pub fn load_sirt_unclamped(path: &Path, colorspace: ColorSpace) -> Result<Image> {
    load_sirt(path, colorspace, false)
}

/// Write an image to `.sirt` exactly as held in memory.
pub fn save_sirt_unclamped(img: &Image, path: &Path) -> Result<()> {
    let (h, w, c) = img.dims();
    let data: Vec<f32> = img.data().iter().copied().collect();
    sirt::write(path, &[h, w, c], &data)
}

/// Write a clamped, quantized PNG. 1- and 3-channel images only.
pub fn save_png(img: &Image, path: &Path, sixteen_bit: bool) -> Result<()> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::InvalidImage(format!("cannot write {c}-channel PNG"))),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(color);
    let bytes: Vec<u8> = if sixteen_bit {
        enc.set_depth(png::BitDepth::Sixteen);
        img.data()
            .iter()
            .flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
            .collect()
    } else {
        enc.set_depth(png::BitDepth::Eight);
        img.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    };
    if img.colorspace() == ColorSpace::Srgb {
        enc.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
    }
    let mut writer = enc.write_header().map_err(|e| decode_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| decode_err(path, e))?;
    writer.finish().map_err(|e| decode_err(path, e))
}

/// Save in the given format. Values are clamped to `[0, 1]` in every format.
pub fn save_image(img: &Image, path: &Path, format: ImageFormat) -> Result<()> {
    match format {
        ImageFormat::Png8 => save_png(img, path, false),
        ImageFormat::Png16 => save_png(img, path, true),
        ImageFormat::Sirt => save_sirt_unclamped(&img.clamped(), path),
    }
}
