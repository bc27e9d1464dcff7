//! Binary netpbm images: P5 grayscale and P6 colour, 8 or 16 bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoded image, samples interleaved per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Pnm {
    /// `[1, channels, height, width]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (c, hw) = (self.channels, self.width * self.height);
        let m = f64::from(self.maxval);
        let mut data = vec![0.0; c * hw];
        for (i, s) in self.samples.iter().enumerate() {
            data[(i % c) * hw + i / c] = f64::from(*s) / m;
        }
        Tensor::new(vec![1, c, self.height, self.width], data).expect("extents match samples")
    }
}

/// Quantizes a `[0, 1]` value to a byte with `round(255·v)`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an 8-bit P5 image.
pub fn encode_pgm(width: usize, height: usize, bytes: &[u8]) -> Result<Vec<u8>> {
    encode(b"P5", width, height, 1, bytes)
}

/// Encodes an 8-bit P6 image from interleaved RGB bytes.
pub fn encode_ppm(width: usize, height: usize, bytes: &[u8]) -> Result<Vec<u8>> {
    encode(b"P6", width, height, 3, bytes)
}

fn encode(magic: &[u8], width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Vec<u8>> {
    if width == 0 || height == 0 || bytes.len() != width * height * channels {
        return Err(Error::InvalidArgument(format!(
            "{} bytes for a {width}×{height}×{channels} image",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(bytes.len() + 20);
    out.extend_from_slice(magic);
    out.extend_from_slice(format!("\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(bytes);
    Ok(out)
}

/// Encodes a `[1, C, H, W]` or `[C, H, W]` tensor with one or three channels.
pub fn encode_tensor(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match image.shape() {
        [1, c, h, w] | [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape("encode_tensor", format!("expected one image, got {s:?}"))),
    };
    let hw = h * w;
    let mut bytes = vec![0u8; c * hw];
    for ch in 0..c {
        for i in 0..hw {
            bytes[i * c + ch] = quantize(image.data()[ch * hw + i]);
        }
    }
    match c {
        1 => encode_pgm(w, h, &bytes),
        3 => encode_ppm(w, h, &bytes),
        _ => Err(Error::shape("encode_tensor", format!("{c} channels"))),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            what: "netpbm image",
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Format {
                what: "netpbm image",
                offset: start,
                detail: format!("{what} out of range"),
            })
    }
}

/// Parses a P5 or P6 file.
pub fn decode(bytes: &[u8]) -> Result<Pnm> {
    let mut c = Cursor { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(c.fail("magic must be P5 or P6")),
    };
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(c.fail("zero image extent"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(c.fail(format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.fail("missing whitespace before raster")),
    }
    let wide = maxval > 255;
    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .ok_or_else(|| c.fail("image extent overflows"))?;
    let need = if wide { n * 2 } else { n };
    let raster = &bytes[c.pos..];
    if raster.len() < need {
        return Err(Error::Format {
            what: "netpbm image",
            offset: bytes.len(),
            detail: format!("raster truncated: {} of {need} bytes", raster.len()),
        });
    }
    let samples: Vec<u16> = if wide {
        raster[..need].chunks_exact(2).map(|p| u16::from_be_bytes([p[0], p[1]])).collect()
    } else {
        raster[..need].iter().map(|b| u16::from(*b)).collect()
    };
    if let Some(i) = samples.iter().position(|s| usize::from(*s) > maxval) {
        return Err(Error::Format {
            what: "netpbm image",
            offset: c.pos + if wide { 2 * i } else { i },
            detail: format!("sample {} exceeds maxval {maxval}", samples[i]),
        });
    }
    Ok(Pnm {
        width,
        height,
        channels,
        maxval: maxval as u16,
        samples,
    })
}

pub fn read(path: &Path) -> Result<Pnm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { offset, detail, .. } => Error::Data(format!("{}: byte {offset}: {detail}", path.display())),
        other => other,
    })
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
