//! Float images and their PNG / PFM encodings.

use std::io::{BufRead, Write};
use std::path::Path;

use super::RenderError;
use crate::math::Vec3;
use crate::scalar::Scalar;

/// Row-major, channel-last float image. Row 0 is the top.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![T::zero(); width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self, RenderError> {
        if data.len() != width * height * channels {
            return Err(RenderError::ShapeMismatch(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, index: usize) -> &[T] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, index: usize) -> &mut [T] {
        let c = self.channels;
        &mut self.data[index * c..(index + 1) * c]
    }

    pub fn rgb(&self, index: usize) -> Vec3<T> {
        Vec3::from_slice(self.pixel(index))
    }

    pub fn set_rgb(&mut self, index: usize, v: Vec3<T>) {
        self.pixel_mut(index).copy_from_slice(&v.to_array());
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// 8-bit RGB bytes; one-channel images are replicated to gray.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let quant = |v: T| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8;
        let mut out = Vec::with_capacity(self.pixel_count() * 3);
        for i in 0..self.pixel_count() {
            let p = self.pixel(i);
            for k in 0..3 {
                out.push(quant(p[k.min(self.channels - 1)]));
            }
        }
        out
    }

    pub fn write_png(&self, path: &Path) -> Result<(), RenderError> {
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| RenderError::Io(format!("{}: {e}", path.display())))
    }

    /// Little-endian PFM (`Pf` for one channel, `PF` for three).
    pub fn write_pfm(&self, path: &Path) -> Result<(), RenderError> {
        let mut bytes = Vec::new();
        self.encode_pfm(&mut bytes)?;
        std::fs::write(path, bytes).map_err(|e| RenderError::Io(format!("{}: {e}", path.display())))
    }

    pub fn encode_pfm<W: Write>(&self, mut w: W) -> Result<(), RenderError> {
        let tag = match self.channels {
            1 => "Pf",
            3 => "PF",
            c => return Err(RenderError::ShapeMismatch(format!("PFM needs 1 or 3 channels, got {c}"))),
        };
        let io = |e: std::io::Error| RenderError::Io(e.to_string());
        write!(w, "{tag}\n{} {}\n-1.0\n", self.width, self.height).map_err(io)?;
        // PFM stores rows bottom to top.
        for row in (0..self.height).rev() {
            let start = row * self.width * self.channels;
            for v in &self.data[start..start + self.width * self.channels] {
                w.write_all(&v.to_f32_lossy().to_le_bytes()).map_err(io)?;
            }
        }
        Ok(())
    }
}

impl Image<f32> {
    pub fn read_pfm(path: &Path) -> Result<Self, RenderError> {
        let bytes = std::fs::read(path).map_err(|e| RenderError::Io(format!("{}: {e}", path.display())))?;
        Self::decode_pfm(&bytes)
    }

    pub fn decode_pfm(bytes: &[u8]) -> Result<Self, RenderError> {
        let bad = |m: &str| RenderError::Io(format!("malformed PFM: {m}"));
        let mut cursor = std::io::Cursor::new(bytes);
        let mut line = String::new();
        let mut next_line = |cursor: &mut std::io::Cursor<&[u8]>| -> Result<String, RenderError> {
            line.clear();
            cursor.read_line(&mut line).map_err(|e| RenderError::Io(e.to_string()))?;
            Ok(line.trim().to_string())
        };
        let channels = match next_line(&mut cursor)?.as_str() {
            "Pf" => 1,
            "PF" => 3,
            _ => return Err(bad("unknown tag")),
        };
        let dims = next_line(&mut cursor)?;
        let mut it = dims.split_whitespace().map(str::parse::<usize>);
        let (width, height) = match (it.next(), it.next()) {
            (Some(Ok(w)), Some(Ok(h))) => (w, h),
            _ => return Err(bad("dimensions")),
        };
        let scale: f32 = next_line(&mut cursor)?.parse().map_err(|_| bad("scale"))?;
        let little = scale < 0.0;
        let start = cursor.position() as usize;
        let body = &bytes[start..];
        let n = width * height * channels;
        if body.len() != n * 4 {
            return Err(bad("payload length"));
        }
        let mut data = vec![0f32; n];
        let row_len = width * channels;
        for (r, chunk) in body.chunks_exact(row_len * 4).enumerate() {
            let row = height - 1 - r;
            for (k, b) in chunk.chunks_exact(4).enumerate() {
                let raw = [b[0], b[1], b[2], b[3]];
                data[row * row_len + k] = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            }
        }
        Image::from_data(width, height, channels, data)
    }

    pub fn read_png(path: &Path) -> Result<Self, RenderError> {
        let img = image::open(path)
            .map_err(|e| RenderError::Io(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| f32::from(b) / 255.0).collect();
        Image::from_data(w as usize, h as usize, 3, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip() {
        let data: Vec<f32> = (0..2 * 3 * 3).map(|i| i as f32 * 0.25 - 1.0).collect();
        let img = Image::from_data(2, 3, 3, data).unwrap();
        let mut bytes = Vec::new();
        img.encode_pfm(&mut bytes).unwrap();
        assert_eq!(Image::decode_pfm(&bytes).unwrap(), img);
        let mask = Image::from_data(3, 1, 1, vec![0.0f32, 0.5, 1.0]).unwrap();
        let mut bytes = Vec::new();
        mask.encode_pfm(&mut bytes).unwrap();
        assert_eq!(Image::decode_pfm(&bytes).unwrap(), mask);
        assert!(Image::decode_pfm(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn quantization_clamps() {
        let img = Image::from_data(1, 1, 3, vec![-0.5f32, 0.5, 2.0]).unwrap();
        assert_eq!(img.to_rgb8(), vec![0, 128, 255]);
    }
}
