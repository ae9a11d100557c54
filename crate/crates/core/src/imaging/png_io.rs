use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Decoder, Encoder};

use super::Image;
use crate::error::{Error, Result};
use crate::nn::Tensor;

fn png_err(path: &Path, msg: impl ToString) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Reads an 8- or 16-bit RGB/RGBA PNG into `[0, 1]`; alpha is dropped.
pub fn load_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let channels = match info.color_type {
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        other => return Err(png_err(path, format!("unsupported color type {other:?}, need RGB or RGBA"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let hw = w * h;
    let mut data = vec![0.0f32; 3 * hw];
    match info.bit_depth {
        BitDepth::Eight => {
            for y in 0..h {
                let line = &buf[y * info.line_size..];
                for x in 0..w {
                    for c in 0..3 {
                        data[c * hw + y * w + x] = line[x * channels + c] as f32 / 255.0;
                    }
                }
            }
        }
        BitDepth::Sixteen => {
            for y in 0..h {
                let line = &buf[y * info.line_size..];
                for x in 0..w {
                    for c in 0..3 {
                        let i = 2 * (x * channels + c);
                        let v = u16::from_be_bytes([line[i], line[i + 1]]);
                        data[c * hw + y * w + x] = v as f32 / 65535.0;
                    }
                }
            }
        }
        other => return Err(png_err(path, format!("unsupported bit depth {other:?}"))),
    }
    Image::new(Tensor::from_vec(&[3, h, w], data)?)
}

/// Quantizes with round-half-up to 8-bit RGB.
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let hw = h * w;
    let t = image.tensor().data();
    let mut bytes = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            bytes.push(quantize_u8(t[c * hw + i]));
        }
    }
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut enc = Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(ColorType::Rgb);
    enc.set_depth(BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}
