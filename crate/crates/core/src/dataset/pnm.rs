//! Binary PPM (P6) and PGM (P5) images.
//!
//! Decoded images are `[H, W, C]` tensors with values in [0, 1]; `C` is 3
//! for P6 and 1 for P5. Both 8-bit and 16-bit samples are read; writing is
//! always 8-bit.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let magic = cur.token()?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(cur.error(format!("unsupported magic {other:?}"), 0)),
    };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.error(format!("empty image {width}x{height}"), cur.pos));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(cur.error(format!("maxval {maxval} out of range"), cur.pos));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.error("missing whitespace after header".into(), cur.pos)),
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let samples = width * height * channels;
    let raster = &bytes[cur.pos..];
    if raster.len() < samples * bps {
        return Err(cur.error(
            format!("truncated raster: expected {} bytes, found {}", samples * bps, raster.len()),
            bytes.len(),
        ));
    }
    let maxval = maxval as f64;
    let data = if bps == 1 {
        raster[..samples].iter().map(|&b| (b as f64 / maxval).min(1.0)).collect()
    } else {
        raster[..samples * 2]
            .chunks(2)
            .map(|p| (u16::from_be_bytes([p[0], p[1]]) as f64 / maxval).min(1.0))
            .collect()
    };
    Tensor::new(vec![height, width, channels], data)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn error(&self, reason: String, offset: usize) -> Error {
        Error::MalformedImage {
            path: self.path.to_path_buf(),
            reason,
            offset,
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<String> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("unexpected end of header".into(), self.pos));
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        let t = self.token()?;
        t.parse()
            .map_err(|_| self.error(format!("invalid {what} {t:?}"), start))
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an `[H, W, 3]` tensor as P6 or an `[H, W]`/`[H, W, 1]` tensor
/// as P5.
pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    let (h, w, magic) = match s {
        [h, w, 3] => (*h, *w, "P6"),
        [h, w, 1] | [h, w] => (*h, *w, "P5"),
        _ => return Err(Error::shape("pnm encode", format!("{s:?}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn write(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a binary mask as an 8-bit PGM (0 or 255).
pub fn write_mask(path: &Path, mask: &[bool], h: usize, w: usize) -> Result<()> {
    let t = Tensor::new(vec![h, w], mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?;
    write(path, &t)
}

pub fn read_mask(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let t = read(path)?;
    let s = t.shape().to_vec();
    if s[2] != 1 {
        return Err(Error::MalformedImage {
            path: path.to_path_buf(),
            reason: "mask must be a single-channel PGM".into(),
            offset: 0,
        });
    }
    Ok((t.data().iter().map(|&v| v >= 0.5).collect(), s[0], s[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_8bit() {
        let img = Tensor::new(vec![2, 3, 3], (0..18).map(|i| i as f64 * 15.0 / 255.0).collect()).unwrap();
        let bytes = encode(&img).unwrap();
        let back = decode(&bytes, Path::new("x.ppm")).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn comments_and_sixteen_bit() {
        let mut bytes = b"P5 # c\n2 1\n# more\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x00, 0x00]);
        let t = decode(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(t.shape(), &[1, 2, 1]);
        assert_eq!(t.data(), &[1.0, 0.0]);
    }

    #[test]
    fn truncated_raster_reports_offset() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0; 5]);
        let len = bytes.len();
        match decode(&bytes, Path::new("t.ppm")) {
            Err(Error::MalformedImage { offset, reason, .. }) => {
                assert_eq!(offset, len);
                assert!(reason.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_header() {
        assert!(matches!(
            decode(b"P3\n1 1\n255\n0", Path::new("a")),
            Err(Error::MalformedImage { offset: 0, .. })
        ));
        assert!(matches!(
            decode(b"P6\n1 x\n255\n", Path::new("a")),
            Err(Error::MalformedImage { offset: 5, .. })
        ));
    }
}
