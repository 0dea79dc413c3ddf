use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 224;
const IDIM_MAGIC: &[u8; 4] = b"IDIM";

/// Height x width x channels, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PageImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PageImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Format(format!(
                "image data has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels: 3,
            data: vec![value; height * width * 3],
        }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Bilinear resampling with half-pixel centres and edge clamping.
    pub fn resize(&self, height: usize, width: usize) -> PageImage {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = vec![0f32; height * width * self.channels];
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = (fy - y0 as f64) as f32;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = (fx - x0 as f64) as f32;
                for c in 0..self.channels {
                    let top = self.at(y0, x0, c) * (1.0 - wx) + self.at(y0, x1, c) * wx;
                    let bottom = self.at(y1, x0, c) * (1.0 - wx) + self.at(y1, x1, c) * wx;
                    out[(y * width + x) * self.channels + c] = top * (1.0 - wy) + bottom * wy;
                }
            }
        }
        PageImage {
            height,
            width,
            channels: self.channels,
            data: out,
        }
    }

    /// Resized to the model's square input.
    pub fn preprocess(&self) -> Result<PageImage> {
        if self.channels != 3 {
            return Err(Error::Format(format!("expected 3 channels, got {}", self.channels)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Format("image has no pixels".into()));
        }
        Ok(self.resize(IMAGE_SIZE, IMAGE_SIZE))
    }

    pub fn load(path: &Path) -> Result<PageImage> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let parsed = if bytes.starts_with(IDIM_MAGIC) {
            decode_idim(&bytes)
        } else if bytes.starts_with(b"P6") {
            decode_ppm(&bytes)
        } else {
            Err(Error::Format("unrecognised image format".into()))
        };
        parsed.map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Binary PPM, maxval 255.
pub fn encode_ppm(img: &PageImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                let v = if c < img.channels { img.at(y, x, c) } else { 0.0 };
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

fn ppm_header_fields(bytes: &[u8]) -> Result<([usize; 3], usize)> {
    let mut fields = [0usize; 3];
    let mut pos = 2;
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated PPM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad PPM header field".into()))?;
    }
    // exactly one whitespace byte separates header and raster
    Ok((fields, pos + 1))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<PageImage> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::Format("not a binary PPM".into()));
    }
    let ([w, h, maxval], start) = ppm_header_fields(bytes)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    let raster = bytes
        .get(start..start + w * h * 3)
        .ok_or_else(|| Error::Format("truncated PPM raster".into()))?;
    let data = raster.iter().map(|&b| b as f32 / maxval as f32).collect();
    PageImage::new(h, w, 3, data)
}

pub fn encode_idim(img: &PageImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.data.len() * 4);
    out.extend_from_slice(IDIM_MAGIC);
    for v in [img.height, img.width, img.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_idim(bytes: &[u8]) -> Result<PageImage> {
    if bytes.len() < 16 || &bytes[..4] != IDIM_MAGIC {
        return Err(Error::Format("not an IDIM tensor file".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let payload = &bytes[16..];
    if payload.len() != h * w * c * 4 {
        return Err(Error::Format(format!(
            "IDIM payload has {} bytes, expected {}",
            payload.len(),
            h * w * c * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    PageImage::new(h, w, c, data)
}

pub fn write_ppm(img: &PageImage, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_ppm(img)).map_err(|e| Error::io(path, e))
}
