//! Planar float images and their on-disk forms (8-bit PNG, float depth maps).

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub const DEPTH_MAGIC: &[u8; 4] = b"DPTH";
pub const DEPTH_VERSION: u32 = 1;

/// (channels, height, width) float image, values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (channels, height, width) = t.dims3()?;
        Ok(Self {
            channels,
            height,
            width,
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.data.clone(),
            (self.channels, self.height, self.width),
            &Device::Cpu,
        )?
        .to_dtype(dtype)?)
    }

    /// Writes an 8-bit RGB or RGBA PNG.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let mut buf = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    buf.push(q(self.get(c, y, x)));
                }
            }
        }
        match self.channels {
            3 => image::RgbImage::from_raw(w, h, buf)
                .expect("buffer size matches")
                .save_with_format(path, image::ImageFormat::Png)?,
            4 => image::RgbaImage::from_raw(w, h, buf)
                .expect("buffer size matches")
                .save_with_format(path, image::ImageFormat::Png)?,
            c => return Err(Error::Shape(format!("cannot write {c}-channel PNG"))),
        }
        Ok(())
    }

    /// Reads a PNG as RGB.
    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::format(path, e.to_string()))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::filled(3, h, w, 0.0);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, p[c] as f32 / 255.0);
            }
        }
        Ok(out)
    }

    /// Drops alpha, keeping the first three channels.
    pub fn rgb(&self) -> Self {
        let n = self.height * self.width;
        Self {
            channels: 3,
            height: self.height,
            width: self.width,
            data: self.data[..3 * n].to_vec(),
        }
    }
}

/// A set of equally sized RGB images held as bytes, for batch sampling.
#[derive(Debug, Clone)]
pub struct ImageBank {
    pub res: usize,
    data: Vec<u8>,
}

impl ImageBank {
    /// Loads every PNG, checking that each is `res`×`res`.
    pub fn load(paths: &[std::path::PathBuf], res: usize) -> Result<Self> {
        use rayon::prelude::*;
        let per = 3 * res * res;
        let chunks = paths
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let img = Image::read_png(p).map_err(|e| Error::Item { index: i, source: Box::new(e) })?;
                if img.height != res || img.width != res {
                    return Err(Error::format(p, format!("expected {res}x{res}, found {}x{}", img.height, img.width)));
                }
                Ok(img.data.iter().map(|v| (v * 255.0).round() as u8).collect::<Vec<u8>>())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(per * paths.len());
        chunks.into_iter().for_each(|c| data.extend(c));
        Ok(Self { res, data })
    }

    pub fn from_images(images: &[Image]) -> Result<Self> {
        let res = images.first().map_or(0, |i| i.height);
        let mut data = Vec::new();
        for img in images {
            if img.channels != 3 || img.height != res || img.width != res {
                return Err(Error::Shape("image bank needs equally sized RGB images".into()));
            }
            data.extend(img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        Ok(Self { res, data })
    }

    pub fn len(&self) -> usize {
        if self.res == 0 {
            0
        } else {
            self.data.len() / (3 * self.res * self.res)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (B, 3, res, res) tensor of the selected images in [0, 1].
    pub fn batch(&self, indices: &[usize], dtype: DType) -> Result<Tensor> {
        let per = 3 * self.res * self.res;
        let mut out = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("image index {i} out of range")));
            }
            out.extend(self.data[i * per..(i + 1) * per].iter().map(|&b| b as f32 / 255.0));
        }
        Ok(Tensor::from_vec(out, (indices.len(), 3, self.res, self.res), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Depth map: 16-byte header (magic, version, height, width as LE u32) then
/// row-major little-endian f32 values.
pub fn write_depth(path: &Path, height: usize, width: usize, depth: &[f32]) -> Result<()> {
    if depth.len() != height * width {
        return Err(Error::Shape(format!("{} depth values for {height}x{width}", depth.len())));
    }
    let mut buf = Vec::with_capacity(16 + 4 * depth.len());
    buf.extend_from_slice(DEPTH_MAGIC);
    for v in [DEPTH_VERSION, height as u32, width as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in depth {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_depth(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 16 || &buf[..4] != DEPTH_MAGIC {
        return Err(Error::format(path, "not a depth map"));
    }
    let word = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w) = (word(1), word(2));
    if buf.len() != 16 + 4 * h * w {
        return Err(Error::format(path, "depth payload truncated"));
    }
    let data = buf[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, w, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let mut img = Image::filled(3, 2, 3, 0.5);
        img.set(0, 1, 2, 1.0);
        img.write_png(&p).unwrap();
        let back = Image::read_png(&p).unwrap();
        assert_eq!((back.channels, back.height, back.width), (3, 2, 3));
        assert_eq!(back.get(0, 1, 2), 1.0);
        assert!((back.get(1, 0, 0) - 128.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn depth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        write_depth(&p, 2, 2, &[1.0, 2.0, 3.0, 4.5]).unwrap();
        let (h, w, d) = read_depth(&p).unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(d, vec![1.0, 2.0, 3.0, 4.5]);
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 16 + 16);
    }
}
