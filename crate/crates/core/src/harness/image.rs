//! 8-bit images with a float view, and binary PNM (P5/P6, maxval 255).

use std::fs;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Dims, Scalar, Tensor4};

/// Planar image: `channels×h×w` samples, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    channels: usize,
    h: usize,
    w: usize,
    samples: Vec<u8>,
    float: Vec<f64>,
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl ImageBuffer {
    pub fn from_u8(channels: usize, h: usize, w: usize, samples: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(shape_err!("images have 1 or 3 channels, not {channels}"));
        }
        if samples.len() != channels * h * w {
            return Err(shape_err!(
                "{} samples for a {channels}×{h}×{w} image",
                samples.len()
            ));
        }
        let float = samples.iter().map(|&s| f64::from(s) / 255.0).collect();
        Ok(Self {
            channels,
            h,
            w,
            samples,
            float,
        })
    }

    /// Keeps the float values (clamped to [0, 1]); samples are rounded.
    pub fn from_float(channels: usize, h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(shape_err!("images have 1 or 3 channels, not {channels}"));
        }
        if values.len() != channels * h * w {
            return Err(shape_err!("{} values for a {channels}×{h}×{w} image", values.len()));
        }
        let float: Vec<f64> = values.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let samples = float.iter().map(|&v| quantize(v)).collect();
        Ok(Self {
            channels,
            h,
            w,
            samples,
            float,
        })
    }

    /// First sample of an `n×c×h×w` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor4<T>) -> Result<Self> {
        let d = t.dims();
        let vals = t.data()[..d.c * d.plane()].iter().map(|v| v.as_f64()).collect();
        Self::from_float(d.c, d.h, d.w, vals)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor4<T> {
        let d = Dims::new(1, self.channels, self.h, self.w);
        Tensor4::from_vec(d, self.float.iter().map(|&v| T::from_f64(v)).collect())
            .expect("length checked at construction")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    pub fn float(&self) -> &[f64] {
        &self.float
    }

    /// Re-reads the float view from the 8-bit samples.
    pub fn quantized(&self) -> Self {
        Self::from_u8(self.channels, self.h, self.w, self.samples.clone()).expect("same shape")
    }

    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.w, self.h).into_bytes();
        let plane = self.h * self.w;
        if self.channels == 1 {
            out.extend_from_slice(&self.samples);
        } else {
            for i in 0..plane {
                for c in 0..3 {
                    out.push(self.samples[c * plane + i]);
                }
            }
        }
        out
    }

    pub fn from_pnm(bytes: &[u8]) -> Result<Self> {
        let mut p = Header { bytes, pos: 0 };
        let magic = p.token()?;
        let channels = match magic.1.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => {
                return Err(Error::Parse {
                    offset: magic.0,
                    msg: format!("expected P5 or P6, found `{other}`"),
                })
            }
        };
        let w = p.number("width")?;
        let h = p.number("height")?;
        let (max_at, maxval) = (p.pos, p.number("maxval")?);
        if maxval != 255 {
            return Err(Error::Unsupported(format!(
                "PNM maxval {maxval} at byte {max_at}; only 255 is supported"
            )));
        }
        match bytes.get(p.pos) {
            Some(b) if b.is_ascii_whitespace() => p.pos += 1,
            _ => {
                return Err(Error::Parse {
                    offset: p.pos,
                    msg: "missing whitespace after maxval".into(),
                })
            }
        }
        let plane = w * h;
        let need = plane * channels;
        let payload = &bytes[p.pos..];
        if payload.len() < need {
            return Err(Error::Parse {
                offset: bytes.len(),
                msg: format!("payload truncated: {} of {need} bytes", payload.len()),
            });
        }
        let payload = &payload[..need];
        let samples = if channels == 1 {
            payload.to_vec()
        } else {
            let mut s = vec![0u8; need];
            for i in 0..plane {
                for c in 0..3 {
                    s[c * plane + i] = payload[i * 3 + c];
                }
            }
            s
        };
        Self::from_u8(channels, h, w, samples)
    }

    pub fn read_pnm(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_pnm(&fs::read(path)?)
    }

    pub fn write_pnm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_pnm())?;
        Ok(())
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<(usize, String)> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse {
                offset: start,
                msg: "header truncated".into(),
            });
        }
        Ok((start, String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned()))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let (at, tok) = self.token()?;
        tok.parse().map_err(|_| Error::Parse {
            offset: at,
            msg: format!("bad {what} `{tok}`"),
        })
    }
}

/// Peak signal-to-noise ratio in dB on the float views (peak 1). Identical
/// images give `f64::INFINITY`; see [`psnr_display`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if (a.channels, a.h, a.w) != (b.channels, b.h, b.w) {
        return Err(shape_err!(
            "psnr of {}×{}×{} and {}×{}×{}",
            a.channels,
            a.h,
            a.w,
            b.channels,
            b.h,
            b.w
        ));
    }
    Ok(psnr_slices(&a.float, &b.float))
}

pub const PSNR_CAP: f64 = 100.0;

pub fn psnr_display(db: f64) -> f64 {
    db.min(PSNR_CAP)
}

pub(crate) fn psnr_slices(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p6_fixture_decodes() {
        let bytes = b"P6\n# two pixels\n2 1\n255\n\xff\xff\xff\x00\x00\x00";
        let img = ImageBuffer::from_pnm(bytes).unwrap();
        assert_eq!((img.channels(), img.height(), img.width()), (3, 1, 2));
        // planar: R plane, G plane, B plane
        assert_eq!(img.samples(), &[255, 0, 255, 0, 255, 0]);
        assert_eq!(img.float()[0], 1.0);
    }

    #[test]
    fn round_trip_is_exact() {
        let samples: Vec<u8> = (0..3 * 5 * 4).map(|i| (i * 37 % 256) as u8).collect();
        let img = ImageBuffer::from_u8(3, 5, 4, samples).unwrap();
        assert_eq!(ImageBuffer::from_pnm(&img.to_pnm()).unwrap(), img);
        let gray = ImageBuffer::from_u8(1, 2, 3, vec![0, 1, 2, 3, 254, 255]).unwrap();
        assert_eq!(ImageBuffer::from_pnm(&gray.to_pnm()).unwrap(), gray);
    }

    #[test]
    fn errors_carry_offsets() {
        assert!(matches!(ImageBuffer::from_pnm(b"P3\n1 1\n255\n"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(ImageBuffer::from_pnm(b"P5\n1 x\n255\n"), Err(Error::Parse { offset: 5, .. })));
        assert!(matches!(ImageBuffer::from_pnm(b"P5\n2 2\n255\n\x00"), Err(Error::Parse { offset: 12, .. })));
        assert!(matches!(ImageBuffer::from_pnm(b"P5\n2 2"), Err(Error::Parse { .. })));
        assert!(matches!(ImageBuffer::from_pnm(b"P5\n1 1\n65535\n\x00\x00"), Err(Error::Unsupported(_))));
    }

    #[test]
    fn psnr_cases() {
        let a = ImageBuffer::from_u8(1, 1, 4, vec![10, 20, 30, 40]).unwrap();
        assert_eq!(psnr_display(psnr(&a, &a).unwrap()), 100.0);
        let b = ImageBuffer::from_u8(1, 1, 4, vec![20, 10, 40, 30]).unwrap();
        let want = 20.0 * (255.0f64 / 10.0).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let c = ImageBuffer::from_u8(1, 2, 2, vec![0; 4]).unwrap();
        assert!(psnr(&a, &c).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let img = ImageBuffer::from_u8(3, 2, 2, (0..12).map(|i| i * 20).collect()).unwrap();
        let t: Tensor4 = img.to_tensor();
        assert_eq!(ImageBuffer::from_tensor(&t).unwrap(), img);
    }
}
