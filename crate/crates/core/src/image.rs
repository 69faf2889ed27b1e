//! RGB images with channels in `[0, 1]`, stored planar (`[3][H][W]`).

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// Planar RGB: channel `c`, row `y`, column `x` at `c*H*W + y*W + x`.
    pub data: Vec<f32>,
}

/// Image sides accepted by the generator: `4·2^b` for `b ≥ 1`.
pub fn is_valid_resolution(res: usize) -> bool {
    res >= 8 && res % 4 == 0 && (res / 4).is_power_of_two()
}

pub fn check_resolution(res: usize) -> Result<()> {
    if is_valid_resolution(res) {
        Ok(())
    } else {
        Err(Error::Argument(format!("resolution {res} is not 4·2^b with b ≥ 1")))
    }
}

impl RenderedImage {
    pub fn from_planar(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Shape(format!(
                "{} values for a {width}×{height}×3 image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("channel value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in rgb {
            data.extend(std::iter::repeat(c).take(width * height));
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let hw = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[hw + i], self.data[2 * hw + i]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let hw = self.width * self.height;
        let i = y * self.width + x;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * hw + i] = v;
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| quantize(v) as f32 / 255.0).collect(),
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let hw = self.width * self.height;
        let mut rgb = Vec::with_capacity(3 * hw);
        for i in 0..hw {
            for c in 0..3 {
                rgb.push(quantize(self.data[c * hw + i]));
            }
        }
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
            writer.write_image_data(&rgb).map_err(|e| Error::Image(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let decoder = png::Decoder::new(Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(|e| Error::Image(e.to_string()))?;
        let mut buf = vec![0u8; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Image(format!("unsupported bit depth {:?}", info.bit_depth)));
        }
        let stride = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(Error::Image(format!("unsupported color type {other:?}"))),
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let hw = w * h;
        let mut data = vec![0.0f32; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                data[c * hw + i] = buf[i * stride + c] as f32 / 255.0;
            }
        }
        Ok(Self { width: w, height: h, data })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes)
    }
}

/// Width and height from a PNG header without decoding pixels.
pub fn png_dimensions(path: &Path) -> Result<(usize, usize)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let info = reader.info();
    Ok((info.width as usize, info.height as usize))
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_after_quantization() {
        let mut img = RenderedImage::filled(8, 4, [0.1, 0.5, 0.9]);
        img.set_pixel(3, 2, [1.0, 0.0, 0.25]);
        let q = img.quantized();
        let back = RenderedImage::from_png_bytes(&q.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back, q);
        assert_eq!(back.pixel(3, 2), [1.0, 0.0, 64.0 / 255.0]);
    }

    #[test]
    fn resolution_law() {
        for r in [8, 16, 32, 64, 128, 256, 512] {
            assert!(is_valid_resolution(r));
        }
        for r in [0, 4, 12, 24, 48, 100] {
            assert!(!is_valid_resolution(r));
        }
    }

    #[test]
    fn rejects_out_of_range_channels() {
        assert!(matches!(
            RenderedImage::from_planar(1, 1, vec![0.0, 1.5, 0.0]),
            Err(Error::Data(_))
        ));
    }
}
