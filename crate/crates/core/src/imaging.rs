//! Float images and their PNG / raw encodings.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// Row-major, channel-interleaved float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Multiplies every channel by a single-channel mask of the same size.
    pub fn masked(&self, mask: &Image) -> Result<Image> {
        if mask.channels != 1 || mask.width != self.width || mask.height != self.height {
            return Err(Error::Contract("mask size does not match image".into()));
        }
        let mut out = self.clone();
        for (p, m) in mask.data.iter().enumerate() {
            for c in 0..self.channels {
                out.data[p * self.channels + c] *= m;
            }
        }
        Ok(out)
    }

    /// Pixel-wise `> threshold` as a {0, 1} single-channel image.
    pub fn threshold(&self, threshold: f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self
                .data
                .iter()
                .map(|&v| if v > threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// Sub-image `[x0, x0+w) × [y0, y0+h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        let mut out = Image::new(w, h, self.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    out.data[(y * w + x) * self.channels + c] = self.get(x0 + x, y0 + y, c);
                }
            }
        }
        out
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// 8-bit PNG; 3-channel images as RGB, 1-channel as grey.
pub fn png_bytes(img: &Image) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    let (w, h) = (img.width as u32, img.height as u32);
    match img.channels {
        3 => {
            let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
                ImageBuffer::from_raw(w, h, img.data.iter().map(|&v| to_u8(v)).collect()).unwrap();
            buf.write_to(&mut out, image::ImageFormat::Png)?;
        }
        1 => {
            let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
                ImageBuffer::from_raw(w, h, img.data.iter().map(|&v| to_u8(v)).collect()).unwrap();
            buf.write_to(&mut out, image::ImageFormat::Png)?;
        }
        c => return Err(Error::Contract(format!("cannot encode {c}-channel png"))),
    }
    Ok(out.into_inner())
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    std::fs::write(path, png_bytes(img)?)?;
    Ok(())
}

/// 16-bit greyscale PNG of a single-channel image.
pub fn save_png16(img: &Image, path: &Path) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::Contract("16-bit png expects one channel".into()));
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        img.width as u32,
        img.height as u32,
        img.data.iter().map(|&v| to_u16(v)).collect(),
    )
    .unwrap();
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Decodes a PNG into `channels` (1 or 3) float channels in [0, 1].
pub fn load_png(path: &Path, channels: usize) -> Result<Image> {
    let dynimg = image::open(path)?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let data: Vec<f64> = match channels {
        3 => dynimg.to_rgb8().into_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        1 => dynimg.to_luma8().into_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        c => return Err(Error::Contract(format!("cannot decode into {c} channels"))),
    };
    Ok(Image {
        width: w,
        height: h,
        channels,
        data,
    })
}

/// Raw little-endian `f32` dump, no header.
pub fn save_raw_f32(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_raw_f32(path: &Path, width: usize, height: usize, channels: usize) -> Result<Image> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != width * height * channels * 4 {
        return Err(Error::Contract(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            width * height * channels * 4
        )));
    }
    Ok(Image {
        width,
        height,
        channels,
        data: bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    })
}
