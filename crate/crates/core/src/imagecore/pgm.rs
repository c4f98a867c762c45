//! Binary 8-bit PGM (P5, maxval 255).

use std::fs;
use std::path::Path;

use super::{Image, Mask, MaskFrame};
use crate::error::{Error, Result};

fn encode(width: usize, height: usize, bytes: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.reserve(width * height);
    out.extend(bytes);
    out
}

/// Quantizes intensities as `round(v * 255)`.
pub fn write_pgm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let bytes = img.pixels().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
    let data = encode(img.width(), img.height(), bytes);
    fs::write(path.as_ref(), data).map_err(|e| Error::io(path.as_ref(), e))
}

/// Masks are stored as 0/255.
pub fn write_pgm_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let bytes = mask.bits().iter().map(|&b| if b { 255 } else { 0 });
    let data = encode(mask.width(), mask.height(), bytes);
    fs::write(path.as_ref(), data).map_err(|e| Error::io(path.as_ref(), e))
}

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(buf: &[u8]) -> Result<Header> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            match buf.get(*pos) {
                Some(b'#') => {
                    while let Some(&c) = buf.get(*pos) {
                        *pos += 1;
                        if c == b'\n' {
                            break;
                        }
                    }
                }
                Some(c) if c.is_ascii_whitespace() => *pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("unexpected end of PGM header".into())),
            }
        }
        let start = *pos;
        while let Some(c) = buf.get(*pos) {
            if c.is_ascii_whitespace() || *c == b'#' {
                break;
            }
            *pos += 1;
        }
        String::from_utf8(buf[start..*pos].to_vec()).map_err(|_| Error::Format("non-ASCII PGM header".into()))
    };

    let magic = token(&mut pos)?;
    if magic != "P5" {
        return Err(Error::Format(format!("expected P5 magic, found `{magic}`")));
    }
    let number = |what: &str, pos: &mut usize| -> Result<usize> {
        let t = token(pos)?;
        t.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM {what} `{t}`")))
    };
    let width = number("width", &mut pos)?;
    let height = number("height", &mut pos)?;
    let maxval = number("maxval", &mut pos)?;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("PGM maxval {maxval}, only 255 is supported")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match buf.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("missing whitespace after PGM maxval".into())),
    }
    Ok(Header {
        width,
        height,
        data_offset: pos,
    })
}

fn read_raster(path: &Path) -> Result<(Header, Vec<u8>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(&buf)?;
    let n = header.width * header.height;
    let data = &buf[header.data_offset..];
    if data.len() < n {
        return Err(Error::Format(format!(
            "{}: truncated raster ({} of {n} bytes)",
            path.display(),
            data.len()
        )));
    }
    let raster = data[..n].to_vec();
    Ok((header, raster))
}

/// Read an image; PGM carries no pitch so the caller supplies it.
pub fn read_pgm(path: impl AsRef<Path>, pitch_mm: f64) -> Result<Image> {
    let (h, raster) = read_raster(path.as_ref())?;
    let px = raster.iter().map(|&b| b as f32 / 255.0).collect();
    Image::from_pixels(h.width, h.height, pitch_mm, px)
}

/// Read a mask: any nonzero byte is set.
pub fn read_pgm_mask(path: impl AsRef<Path>, frame: MaskFrame) -> Result<Mask> {
    let (h, raster) = read_raster(path.as_ref())?;
    Mask::from_bits(h.width, h.height, frame, raster.iter().map(|&b| b != 0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let px: Vec<f32> = (0..37 * 11).map(|i| ((i * 7919) % 1000) as f32 / 999.0).collect();
        let img = Image::from_pixels(37, 11, 0.03, px).unwrap();
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path, 0.03).unwrap();
        assert_eq!((back.width(), back.height()), (37, 11));
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert_eq!((a * 255.0).round(), (b * 255.0).round());
        }
        // A second round trip is exact.
        write_pgm(&path, &back).unwrap();
        assert_eq!(read_pgm(&path, 0.03).unwrap(), back);
    }

    #[test]
    fn mask_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let bits = (0..50 * 20).map(|i| (i * 31) % 7 < 3).collect();
        let m = Mask::from_bits(50, 20, MaskFrame::CropHalf, bits).unwrap();
        write_pgm_mask(&path, &m).unwrap();
        assert_eq!(read_pgm_mask(&path, MaskFrame::CropHalf).unwrap(), m);
    }

    #[test]
    fn error_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        fs::write(&p, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert_eq!(read_pgm(&p, 1.0).unwrap_err().code(), "FormatError");
        fs::write(&p, b"P2\n1 1\n255\n0").unwrap();
        assert_eq!(read_pgm(&p, 1.0).unwrap_err().code(), "FormatError");
        fs::write(&p, b"P5\n1 1\n65535\n\x00\x00").unwrap();
        assert_eq!(read_pgm(&p, 1.0).unwrap_err().code(), "UnsupportedFormat");
        fs::write(&p, b"P5 # comment\n2 1 255\n\x00\xff").unwrap();
        let img = read_pgm(&p, 1.0).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
        assert_eq!(read_pgm(dir.path().join("missing.pgm"), 1.0).unwrap_err().code(), "IoError");
    }
}
