//! Fixed invertible codec between RGB patches and latent grids, plus 8-bit PNG
//! I/O.
//!
//! `encode` folds each 2x2 pixel block into channels (space-to-depth) and maps
//! `[0, 1]` to `[-1, 1]`. Latent channel `(dy * 2 + dx) * 3 + c` at `(y, x)`
//! holds pixel `(2y + dy, 2x + dx)`, colour `c`.

use std::io::{Read, Write};
use std::path::Path;

use crate::diffusion::LatentGrid;
use crate::error::{shape_err, Error, Result};
use crate::real::Real;

pub const IMAGE_SIZE: usize = 32;
pub const LATENT_CHANNELS: usize = 12;
pub const LATENT_SIZE: usize = IMAGE_SIZE / 2;

/// Pixel values below this are stored as 0 so the `[-1, 1]` map is exact in
/// 64-bit arithmetic.
pub const FLUSH_BELOW: f32 = 1.0 / 16_777_216.0;

const LATENT_SCALE: f64 = 2.0;
const LATENT_SHIFT: f64 = 0.5;
/// Latent values that decode to pixels inside `[0, 1]`.
pub const LATENT_RANGE: (f64, f64) = (-LATENT_SHIFT * LATENT_SCALE, (1.0 - LATENT_SHIFT) * LATENT_SCALE);

/// RGB image, row-major HWC, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImagePatch {
    /// Rejects non-finite or out-of-range values.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(shape_err(format!("{height}x{width} RGB image needs {} values", height * width * 3)));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self::flushed(height, width, data))
    }

    /// Clamps into `[0, 1]`; NaN is still an error.
    pub fn from_clamped(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::Range("NaN pixel value".into()));
        }
        Self::new(height, width, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    fn flushed(height: usize, width: usize, mut data: Vec<f32>) -> Self {
        for v in &mut data {
            if *v < FLUSH_BELOW {
                *v = 0.0;
            }
        }
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::new(height, width, rgb.iter().copied().cycle().take(height * width * 3).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Quarter turn counter-clockwise.
    pub fn rotate90(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let (ny, nx) = (w - 1 - x, y);
                let src = (y * w + x) * 3;
                let dst = (ny * h + nx) * 3;
                data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        Self { height: w, width: h, data }
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| quantize(v) as f32 / 255.0).collect();
        Self::flushed(self.height, self.width, data)
    }

    pub fn write_png<W: Write>(&self, w: W) -> Result<()> {
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        writer.write_image_data(&bytes)?;
        writer.finish()?;
        Ok(())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_png(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// 8-bit RGB only; values are `k / 255`.
    pub fn read_png<R: Read>(r: R) -> Result<Self> {
        let dec = png::Decoder::new(r);
        let mut reader = dec.read_info()?;
        let mut buf = vec![0u8; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf)?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Format(format!(
                "expected 8-bit RGB PNG, got {:?} {:?}",
                info.color_type, info.bit_depth
            )));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let data = buf[..w * h * 3].iter().map(|&k| k as f32 / 255.0).collect();
        Self::new(h, w, data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::read_png(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Space-to-depth by 2 followed by `z = (x - 0.5) * 2`.
pub fn encode<T: Real>(x: &ImagePatch) -> Result<LatentGrid<T>> {
    if x.height % 2 != 0 || x.width % 2 != 0 {
        return Err(shape_err(format!("image {}x{} is not divisible by 2", x.height, x.width)));
    }
    let (h, w) = (x.height / 2, x.width / 2);
    let mut values = vec![T::zero(); LATENT_CHANNELS * h * w];
    for y in 0..x.height {
        for xx in 0..x.width {
            let (dy, dx) = (y % 2, xx % 2);
            for c in 0..3 {
                let ch = (dy * 2 + dx) * 3 + c;
                let v = x.data[(y * x.width + xx) * 3 + c] as f64;
                values[(ch * h + y / 2) * w + xx / 2] = T::lit((v - LATENT_SHIFT) * LATENT_SCALE);
            }
        }
    }
    LatentGrid::new(LATENT_CHANNELS, h, w, values)
}

/// Inverse of [`encode`] with the result clamped to `[0, 1]`.
pub fn decode<T: Real>(z: &LatentGrid<T>) -> Result<ImagePatch> {
    if z.channels() != LATENT_CHANNELS {
        return Err(shape_err(format!("latent has {} channels, codec needs {LATENT_CHANNELS}", z.channels())));
    }
    let (h, w) = (z.height(), z.width());
    let mut data = vec![0.0f32; h * w * 12];
    for ch in 0..LATENT_CHANNELS {
        let (blk, c) = (ch / 3, ch % 3);
        let (dy, dx) = (blk / 2, blk % 2);
        for y in 0..h {
            for x in 0..w {
                let v = z.values()[(ch * h + y) * w + x].as_f64();
                if v.is_nan() {
                    return Err(Error::Range("NaN latent value".into()));
                }
                let px = (v / LATENT_SCALE + LATENT_SHIFT).clamp(0.0, 1.0);
                data[((2 * y + dy) * 2 * w + 2 * x + dx) * 3 + c] = px as f32;
            }
        }
    }
    ImagePatch::new(2 * h, 2 * w, data)
}
