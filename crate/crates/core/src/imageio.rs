//! Binary PPM (P6) and PGM (P5) images, 8 bits per sample.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed {kind} header")]
    Header { kind: &'static str },
    #[error("expected {expected} pixel bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

/// Planar `[3, H, W]` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub planes: Vec<f64>,
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let (h, w) = (img.height, img.width);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..h * w {
        for c in 0..3 {
            out.push(to_byte(img.planes[c * h * w + p]));
        }
    }
    out
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<(), ImageError> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage, ImageError> {
    decode_ppm(&fs::read(path)?)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, ImageError> {
    let (w, h, data) = parse_header(bytes, b"P6", "PPM")?;
    let n = w * h;
    if data.len() < 3 * n {
        return Err(ImageError::Truncated { expected: 3 * n, found: data.len() });
    }
    let mut planes = vec![0.0; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            planes[c * n + p] = data[3 * p + c] as f64 / 255.0;
        }
    }
    Ok(RgbImage { height: h, width: w, planes })
}

/// Grayscale `values` (row-major, already in `[0, 1]`).
pub fn encode_pgm(height: usize, width: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    out
}

pub fn write_pgm(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<(), ImageError> {
    fs::write(path, encode_pgm(height, width, values))?;
    Ok(())
}

/// Returns `(height, width, bytes)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), ImageError> {
    let (w, h, data) = parse_header(bytes, b"P5", "PGM")?;
    if data.len() < w * h {
        return Err(ImageError::Truncated { expected: w * h, found: data.len() });
    }
    Ok((h, w, data[..w * h].to_vec()))
}

fn parse_header<'a>(bytes: &'a [u8], magic: &[u8], kind: &'static str) -> Result<(usize, usize, &'a [u8]), ImageError> {
    let bad = || ImageError::Header { kind };
    if !bytes.starts_with(magic) {
        return Err(bad());
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for f in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos]).ok().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    }
    if fields[2] != 255 || fields[0] == 0 || fields[1] == 0 || !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad());
    }
    Ok((fields[0], fields[1], &bytes[pos + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_on_byte_grid() {
        let planes: Vec<f64> = (0..3 * 2 * 5).map(|i| (i * 7 % 256) as f64 / 255.0).collect();
        let img = RgbImage { height: 2, width: 5, planes };
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pgm_layout() {
        let bytes = encode_pgm(2, 3, &[0.0, 0.5, 1.0, 1.0, 0.5, 0.0]);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let (h, w, data) = decode_pgm(&bytes).unwrap();
        assert_eq!((h, w), (2, 3));
        assert_eq!(data, vec![0, 128, 255, 255, 128, 0]);
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
    }
}
