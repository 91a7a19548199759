//! RGB float images and their 8-bit PNG / PPM encodings.

use std::io::{self, Write};
use std::path::Path;

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * 3, "image buffer size mismatch");
        Image {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, data)
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "image size mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn encode_png(&self) -> io::Result<Vec<u8>> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(io::Error::other)?;
            writer
                .write_image_data(&self.to_rgb8())
                .map_err(io::Error::other)?;
        }
        Ok(buf)
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_rgb8());
        out
    }

    pub fn save_png(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.encode_png()?)
    }

    pub fn save_ppm(&self, path: &Path) -> io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode_ppm())
    }

    pub fn decode_png(bytes: &[u8]) -> io::Result<Image> {
        let decoder = png::Decoder::new(io::Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(io::Error::other)?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(io::Error::other)?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(io::Error::other("only 8-bit RGB PNGs are supported"));
        }
        let data = buf[..info.buffer_size()]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        Ok(Image::new(info.width as usize, info.height as usize, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_8bit_exact() {
        let data: Vec<f64> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as f64 / 255.0).collect();
        let img = Image::new(4, 3, data);
        let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
    }

    #[test]
    fn ppm_header() {
        let img = Image::filled(2, 1, [1.0, 0.0, 0.5]);
        let bytes = img.encode_ppm();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[255, 0, 128, 255, 0, 128]);
    }
}
