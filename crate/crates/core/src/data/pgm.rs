//! Binary 8-bit PGM (`P5`, maxval 255).
//!
//! Writing quantizes `v ∈ [0, 1]` to `floor(v·255 + 0.5)`; reading divides
//! by 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Header plus payload for a `1×H×W` raster.
pub fn encode(raster: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = raster.shape().chw()?;
    if c != 1 {
        return Err(Error::dim("write_pgm", raster.dims(), &[1, h, w]));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w);
    for &v in raster.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("pixel value {v} outside [0, 1]")));
        }
        out.push(quantize(v));
    }
    Ok(out)
}

pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor() as u8
}

pub fn write_pgm(raster: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode(raster)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Width, height and raw payload bytes.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let malformed = |reason: &str| Error::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::Unsupported {
            path: path.to_path_buf(),
            reason: format!("magic `{magic}`, expected `P5`"),
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and `#` comments between header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(malformed("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("header field out of range"))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(malformed("zero image dimension"));
    }
    if maxval != 255 {
        return Err(malformed(&format!("maxval {maxval}, expected 255")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(malformed("missing separator after maxval"));
    }
    pos += 1;
    let payload = &bytes[pos..];
    if payload.len() < w * h {
        return Err(malformed(&format!(
            "truncated payload: {} of {} bytes",
            payload.len(),
            w * h
        )));
    }
    if payload.len() > w * h {
        return Err(malformed("trailing bytes after payload"));
    }
    Ok((w, h, payload.to_vec()))
}

pub(crate) fn read_raw(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads a PGM into a `1×H×W` tensor with values in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let (w, h, payload) = read_raw(path)?;
    Tensor::new(vec![1, h, w], payload.iter().map(|&b| f64::from(b) / 255.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem.pgm")
    }

    #[test]
    fn zeros_encode_to_zero_payload() {
        let bytes = encode(&Tensor::zeros(&[1, 4, 4]).unwrap()).unwrap();
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0u8; 16]);
    }

    #[test]
    fn half_rounds_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 0);
    }

    #[test]
    fn rejects_ascii_pgm() {
        let err = decode(b"P2\n1 1\n255\n0\n", p()).unwrap_err();
        assert!(matches!(err, Error::Unsupported { .. }));
    }

    #[test]
    fn rejects_bad_maxval_and_truncation() {
        assert!(matches!(decode(b"P5\n2 1\n65535\n\0\0", p()), Err(Error::Malformed { .. })));
        assert!(matches!(decode(b"P5\n2 2\n255\n\0\0\0", p()), Err(Error::Malformed { .. })));
        assert!(matches!(decode(b"P5\n2", p()), Err(Error::Malformed { .. })));
    }

    #[test]
    fn header_comments_are_skipped() {
        let (w, h, payload) = decode(b"P5 # made by hand\n2 1\n255\n\x07\xff", p()).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(payload, vec![7, 255]);
    }

    #[test]
    fn out_of_range_pixel_is_rejected() {
        let t = Tensor::new(vec![1, 1, 1], vec![1.5]).unwrap();
        assert!(encode(&t).is_err());
    }
}
