use crate::error::{shape_err, Result};
use crate::tensor::{Element, Tensor};

/// Interleaved `height x width x channels` image with `f32` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape_err(
                "Raster::new",
                format!("{height}x{width}x{channels} needs {} values, got {}", height * width * channels, data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    fn remap(&self, height: usize, width: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut out = Self::filled(height, width, self.channels, 0.0);
        for y in 0..height {
            for x in 0..width {
                let (sy, sx) = src(y, x);
                for c in 0..self.channels {
                    out.set(y, x, c, self.at(sy, sx, c));
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Self {
        self.remap(self.height, self.width, |y, x| (y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        self.remap(self.height, self.width, |y, x| (self.height - 1 - y, x))
    }

    /// Rotates by `quarter_turns * 90` degrees counter-clockwise.
    pub fn rotate90(&self, quarter_turns: u32) -> Self {
        let (h, w) = (self.height, self.width);
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => self.remap(w, h, |y, x| (x, w - 1 - y)),
            2 => self.remap(h, w, |y, x| (h - 1 - y, w - 1 - x)),
            _ => self.remap(w, h, |y, x| (h - 1 - x, y)),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(shape_err(
                "crop",
                format!(
                    "window {height}x{width} at ({top}, {left}) exceeds {}x{}",
                    self.height, self.width
                ),
            ));
        }
        Ok(self.remap(height, width, |y, x| (top + y, left + x)))
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        self.remap(height, width, |y, x| {
            (y * self.height / height, x * self.width / width)
        })
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        let tap = |dst: usize, out_len: usize, in_len: usize| {
            let pos = ((dst as f32 + 0.5) * in_len as f32 / out_len as f32 - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, pos - i0 as f32)
        };
        let mut out = Self::filled(height, width, self.channels, 0.0);
        for y in 0..height {
            let (y0, y1, ly) = tap(y, height, self.height);
            for x in 0..width {
                let (x0, x1, lx) = tap(x, width, self.width);
                for c in 0..self.channels {
                    let top = self.at(y0, x0, c) * (1.0 - lx) + self.at(y0, x1, c) * lx;
                    let bot = self.at(y1, x0, c) * (1.0 - lx) + self.at(y1, x1, c) * lx;
                    out.set(y, x, c, top * (1.0 - ly) + bot * ly);
                }
            }
        }
        out
    }

    /// Planar `[channels, height, width]` copy, appended to `out`.
    pub(crate) fn extend_planar<T: Element>(&self, out: &mut Vec<T>) {
        for c in 0..self.channels {
            for i in 0..self.height * self.width {
                out.push(T::from_f64_lossy(self.data[i * self.channels + c] as f64));
            }
        }
    }

    /// Reads sample `index` of a `[batch, channels, height, width]` tensor.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if index >= b {
            return Err(shape_err("Raster::from_tensor", format!("index {index} >= batch {b}")));
        }
        let plane = h * w;
        let base = index * c * plane;
        let mut data = vec![0.0; c * plane];
        for ch in 0..c {
            for i in 0..plane {
                data[i * c + ch] = t.data()[base + ch * plane + i].to_f64_lossy() as f32;
            }
        }
        Self::new(h, w, c, data)
    }
}
