//! Netpbm images: grayscale in, grayscale out.
//!
//! Reads P2/P5 (gray) and P3/P6 (color, reduced to BT.601 luminance) with
//! any maxval up to 65535. Writes 8-bit binary P5.

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::fileio::{read_file, write_atomic};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const WHAT: &str = "netpbm image";

fn malformed(detail: impl Into<String>) -> Error {
    FormatError::Malformed {
        what: WHAT,
        detail: detail.into(),
    }
    .into()
}

/// ITU-R BT.601 luma.
pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(if self.pos >= self.bytes.len() {
                FormatError::Truncated {
                    what: WHAT,
                    detail: "header ended early".into(),
                }
                .into()
            } else {
                malformed(format!("expected a number at byte {start}"))
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| malformed("header number out of range"))
    }
}

/// Decodes a netpbm image to luminance values in `[0, 1]`, shape `H x W`.
pub fn decode_gray<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(FormatError::BadMagic {
            expected: "P2, P3, P5 or P6".into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned(),
        }
        .into());
    }
    let (channels, binary) = match bytes[1] {
        b'2' => (1, false),
        b'5' => (1, true),
        b'3' => (3, false),
        b'6' => (3, true),
        _ => {
            return Err(FormatError::BadMagic {
                expected: "P2, P3, P5 or P6".into(),
                found: String::from_utf8_lossy(&bytes[..2]).into_owned(),
            }
            .into())
        }
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number()?;
    let height = h.number()?;
    let maxval = h.number()?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(malformed(format!("dimensions {width}x{height}, maxval {maxval}")));
    }
    let samples = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .ok_or_else(|| malformed("image dimensions overflow"))?;

    let raw: Vec<usize> = if binary {
        // exactly one whitespace byte separates the header from the raster
        let start = h.pos + 1;
        let wide = maxval > 255;
        let need = samples * if wide { 2 } else { 1 };
        let raster = bytes.get(start..start + need).ok_or_else(|| -> Error {
            FormatError::Truncated {
                what: WHAT,
                detail: format!("raster needs {need} bytes, {} available", bytes.len().saturating_sub(start)),
            }
            .into()
        })?;
        if wide {
            raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as usize).collect()
        } else {
            raster.iter().map(|&b| b as usize).collect()
        }
    } else {
        (0..samples).map(|_| h.number()).collect::<Result<_>>()?
    };
    if let Some(bad) = raw.iter().find(|&&v| v > maxval) {
        return Err(malformed(format!("sample {bad} exceeds maxval {maxval}")));
    }

    let scale = 1.0 / maxval as f64;
    let data = if channels == 1 {
        raw.iter().map(|&v| T::of(v as f64 * scale)).collect()
    } else {
        raw.chunks_exact(3)
            .map(|px| {
                let y = luminance(px[0] as f64 * scale, px[1] as f64 * scale, px[2] as f64 * scale);
                T::of(y.clamp(0.0, 1.0))
            })
            .collect()
    };
    Tensor::from_vec(&[height, width], data)
}

/// 8-bit binary PGM; values are clamped to `[0, 1]` and stored as `round(255 v)`.
pub fn encode_pgm<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let &[height, width] = image.shape() else {
        return Err(Error::dim("encode_pgm (expected rank 2)", image.shape(), &[0, 0]));
    };
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| quantize(v.to_f64_lossy())));
    Ok(out)
}

pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

pub fn read_gray<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_gray(&read_file(path)?).map_err(|e| match e {
        Error::Format(f) => Error::config(format!("{}: {f}", path.display())),
        other => other,
    })
}

pub fn write_pgm<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    write_atomic(path, &encode_pgm(image)?)
}

/// Whether a file name looks like a netpbm image.
pub fn is_netpbm_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("pgm" | "ppm" | "pnm")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_gray_round_trip() {
        let img = Tensor::<f64>::from_fn(&[3, 4], |i| i as f64 / 11.0);
        let bytes = encode_pgm(&img).unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        let back: Tensor<f64> = decode_gray(&bytes).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn ascii_with_comments() {
        let text = b"P2\n# made by hand\n3 1\n# max\n10\n0 5 10\n";
        let img: Tensor<f64> = decode_gray(text).unwrap();
        assert_eq!(img.shape(), &[1, 3]);
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn color_becomes_luminance() {
        let mut bytes = b"P6 2 1 255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 255, 255, 255]);
        let img: Tensor<f64> = decode_gray(&bytes).unwrap();
        assert!((img.data()[0] - 0.299).abs() < 1e-12);
        assert!((img.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sixteen_bit_samples() {
        let mut bytes = b"P5 2 1 65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x00, 0x00]);
        let img: Tensor<f32> = decode_gray(&bytes).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0]);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            decode_gray::<f32>(b"GIF89a"),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        assert!(matches!(
            decode_gray::<f32>(b"P5 4 4 255\n\x00\x01"),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        assert!(decode_gray::<f32>(b"P2 2 1 10 3 11").is_err());
    }

    #[test]
    fn quantization_rounds_and_clamps() {
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(f64::NAN), 0);
    }
}
