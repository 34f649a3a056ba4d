use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RASTER_MAGIC: &[u8; 4] = b"DRF1";
/// Magic plus width, height and channel count.
pub const HEADER_LEN: usize = 16;

/// Interleaved `f32` image: values for pixel `(row, col)` occupy
/// `data[(row·width + col)·channels ..][..channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(width: u32, height: u32, channels: u32, data: Vec<f32>) -> Result<Self> {
        let expect = width as usize * height as usize * channels as usize;
        if data.len() != expect {
            return Err(Error::shape(
                "raster",
                format!("payload has {} values, extents need {expect}", data.len()),
                &[&[height as usize, width as usize, channels as usize]],
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("raster value {i} is not finite")));
        }
        Ok(Raster { width, height, channels, data })
    }

    /// From a `C×H×W` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::shape("raster", "expected C×H×W", &[s]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(t.len());
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    data.push(t.data()[(ch * h + r) * w + col] as f32);
                }
            }
        }
        Raster::new(w as u32, h as u32, c as u32, data)
    }

    /// To a `C×H×W` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let (c, h, w) = (self.channels as usize, self.height as usize, self.width as usize);
        let mut out = vec![0.0; self.data.len()];
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    out[(ch * h + r) * w + col] = self.data[(r * w + col) * c + ch] as f64;
                }
            }
        }
        Tensor::new(&[c, h, w], out)
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 4 * self.data.len()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(RASTER_MAGIC);
        for v in [self.width, self.height, self.channels] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, msg: String| Err(Error::Format { offset: offset as u64, msg });
        if bytes.len() < 4 || &bytes[..4] != RASTER_MAGIC {
            return fail(0, "bad magic, expected DRF1".into());
        }
        let mut dims = [0u32; 3];
        for (i, name) in ["width", "height", "channels"].iter().enumerate() {
            let at = 4 + 4 * i;
            let Some(b) = bytes.get(at..at + 4) else {
                return fail(bytes.len(), format!("truncated header reading {name}"));
            };
            dims[i] = u32::from_le_bytes(b.try_into().unwrap());
            if dims[i] == 0 {
                return fail(at, format!("{name} is zero"));
            }
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d as usize));
        let Some(n) = n.filter(|n| n.checked_mul(4).and_then(|b| b.checked_add(HEADER_LEN)).is_some()) else {
            return fail(4, "extents overflow".into());
        };
        let end = HEADER_LEN + 4 * n;
        if bytes.len() < end {
            return fail(bytes.len(), format!("truncated payload: need {end} bytes, have {}", bytes.len()));
        }
        if bytes.len() > end {
            return fail(end, "trailing bytes after payload".into());
        }
        let mut data = Vec::with_capacity(n);
        for (i, b) in bytes[HEADER_LEN..end].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(b.try_into().unwrap());
            if !v.is_finite() {
                return fail(HEADER_LEN + 4 * i, "non-finite value".into());
            }
            data.push(v);
        }
        Ok(Raster { width: dims[0], height: dims[1], channels: dims[2], data })
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }
}

pub fn save_raster(path: impl AsRef<Path>, raster: &Raster) -> Result<()> {
    let mut buf = Vec::with_capacity(raster.encoded_len());
    raster.write_to(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<Raster> {
    Raster::decode(&fs::read(path)?)
}
