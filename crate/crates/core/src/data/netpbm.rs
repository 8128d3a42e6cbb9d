//! Binary PPM (P6) images and PGM (P5) label rasters.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::tensor::Tensor;

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    /// offset of the first raster byte
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::parse(
            0,
            format!("expected magic {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
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
        if start == pos {
            let name = ["width", "height", "maxval"][i];
            return Err(Error::parse(start, format!("expected {name}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::parse(start, "header number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::parse(pos, "expected single whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::parse(2, "zero image extent"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::parse(pos - 1, format!("unsupported maxval {maxval}")));
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_start: pos,
    })
}

fn raster<'a>(bytes: &'a [u8], header: &Header, per_pixel: usize) -> Result<&'a [u8]> {
    let expected = header.width * header.height * per_pixel;
    let actual = bytes.len() - header.data_start;
    if actual < expected {
        return Err(Error::parse(
            bytes.len(),
            format!("truncated raster: expected {expected} bytes, found {actual}"),
        ));
    }
    Ok(&bytes[header.data_start..header.data_start + expected])
}

/// Decodes a P6 image into a `3×H×W` tensor with values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let header = parse_header(bytes, b"P6")?;
    let raw = raster(bytes, &header, 3)?;
    let (h, w) = (header.height, header.width);
    let plane = h * w;
    let scale = header.maxval as f64;
    let mut data = vec![0.0; 3 * plane];
    for (pix, rgb) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            if rgb[c] as usize > header.maxval {
                return Err(Error::parse(
                    header.data_start + pix * 3 + c,
                    format!("sample {} exceeds maxval {}", rgb[c], header.maxval),
                ));
            }
            data[c * plane + pix] = rgb[c] as f64 / scale;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Encodes a `3×H×W` tensor as P6 with maxval 255, clamping to `[0, 1]`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::dim("encode_ppm", image.shape(), &[3, h, w]));
    }
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    for pix in 0..plane {
        for ch in 0..3 {
            out.push(quantize(data[ch * plane + pix]));
        }
    }
    Ok(out)
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let header = parse_header(bytes, b"P5")?;
    let raw = raster(bytes, &header, 1)?;
    LabelMap::new(header.height, header.width, raw.to_vec())
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend_from_slice(labels.data());
    out
}

fn with_path<T>(result: Result<T>, path: &Path) -> Result<T> {
    result.map_err(|e| match e {
        Error::Parse { offset, message, .. } => Error::Parse {
            path: Some(path.to_path_buf()),
            offset,
            message,
        },
        other => other,
    })
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    with_path(decode_ppm(&fs::read(path)?), path)
}

pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

/// Reads a label raster and checks every value is `< classes` or the ignore label.
pub fn read_pgm(path: &Path, classes: usize) -> Result<LabelMap> {
    let bytes = fs::read(path)?;
    let labels = with_path(decode_pgm(&bytes), path)?;
    if let Some(pix) = labels
        .data()
        .iter()
        .position(|&l| l != IGNORE_LABEL && l as usize >= classes)
    {
        let header_len = bytes.len() - labels.data().len();
        return Err(Error::Parse {
            path: Some(path.to_path_buf()),
            offset: header_len + pix,
            message: format!(
                "label {} out of range for {classes} classes",
                labels.data()[pix]
            ),
        });
    }
    Ok(labels)
}

pub fn write_pgm(labels: &LabelMap, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(labels))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel_is_one() {
        let img = decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(img.shape(), &[3, 1, 1]);
        assert_eq!(img.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn comments_in_header() {
        let img = decode_ppm(b"P6 # made by hand\n2 # w\n1\n255\n\x00\x00\x00\xff\x00\x80").unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert_eq!(img.at(&[0, 0, 1]), 1.0);
        assert_eq!(img.at(&[2, 0, 1]), 128.0 / 255.0);
    }

    #[test]
    fn truncated_raster_reports_counts() {
        let err = decode_ppm(b"P6\n2 2\n255\n\x00\x00\x00").unwrap_err().to_string();
        assert!(err.contains("expected 12 bytes, found 3"), "{err}");
        let err = decode_pgm(b"P5\n4 1\n255\n\x01").unwrap_err().to_string();
        assert!(err.contains("expected 4 bytes, found 1"), "{err}");
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\x00"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(decode_ppm(b"P6\nx 1\n255\n"), Err(Error::Parse { offset: 3, .. })));
        assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
    }

    #[test]
    fn label_range_checked_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lab.pgm");
        std::fs::write(&path, b"P5\n3 1\n255\n\x00\x07\xff").unwrap();
        match read_pgm(&path, 6).unwrap_err() {
            Error::Parse { offset, message, .. } => {
                assert_eq!(offset, 12);
                assert!(message.contains("label 7"));
            }
            e => panic!("{e}"),
        }
        assert!(read_pgm(&path, 8).is_ok());
    }

    #[test]
    fn image_round_trip_within_quantization() {
        let img = Tensor::from_fn(&[3, 4, 5], |i| ((i * 37) % 101) as f64 / 100.0);
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert!(img.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-12);
    }
}
