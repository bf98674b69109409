//! File formats: 8-bit binary PGM (P5) images and masks, and plain-text
//! contours with one `x y` pair per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Contour, Point};
use crate::grid::{Image, SegMap};

fn format_err(what: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        what,
        detail: detail.into(),
    }
}

pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn encode_mask_pgm(mask: &SegMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.data().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Decodes P5 (binary) or P2 (ASCII) graymaps to intensities in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err("pgm", "truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| format_err("pgm", "non-ASCII header"))?);
    }
    let magic = fields[0];
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format_err("pgm", format!("bad header field `{s}`")));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(format_err("pgm", format!("unsupported maxval {maxval}")));
    }
    let scale = maxval as f64;
    let data: Vec<f64> = match magic {
        "P5" => {
            let body = &bytes[(pos + 1).min(bytes.len())..];
            if body.len() < w * h {
                return Err(format_err("pgm", format!("expected {} pixels, found {}", w * h, body.len())));
            }
            body[..w * h].iter().map(|&b| b as f64 / scale).collect()
        }
        "P2" => {
            let text = std::str::from_utf8(&bytes[pos..]).map_err(|_| format_err("pgm", "non-ASCII body"))?;
            let vals = text
                .split_ascii_whitespace()
                .take(w * h)
                .map(|t| t.parse::<f64>().map(|v| v / scale))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| format_err("pgm", "bad pixel value"))?;
            if vals.len() != w * h {
                return Err(format_err("pgm", "truncated pixel data"));
            }
            vals
        }
        other => return Err(format_err("pgm", format!("unsupported magic `{other}`"))),
    };
    Image::from_vec(h, w, data)
}

pub fn write_pgm(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

pub fn write_mask_pgm(path: &Path, mask: &SegMap) -> Result<()> {
    fs::write(path, encode_mask_pgm(mask)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_mask_pgm(path: &Path) -> Result<SegMap> {
    Ok(read_pgm(path)?.map(|&v| v >= 0.5))
}

pub fn encode_contour(contour: &Contour) -> String {
    let mut s = String::with_capacity(contour.len() * 24);
    for p in contour.points() {
        s.push_str(&format!("{} {}\n", p.x, p.y));
    }
    s
}

pub fn decode_contour(text: &str) -> Result<Contour> {
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_ascii_whitespace();
        let mut coord = || -> Result<f64> {
            it.next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| format_err("contour", format!("line {}: expected `x y`", n + 1)))
        };
        let (x, y) = (coord()?, coord()?);
        points.push(Point::new(x, y));
    }
    Ok(Contour::new(points))
}

pub fn write_contour(path: &Path, contour: &Contour) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(encode_contour(contour).as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_contour(path: &Path) -> Result<Contour> {
    decode_contour(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pgm_header_and_quantization() {
        let img = Image::from_vec(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let bytes = encode_pgm(&img);
        assert!(bytes.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
        let back = decode_pgm(&bytes).unwrap();
        assert_eq!(back.data(), &[0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn ascii_pgm_with_comments() {
        let text = b"P2\n# a comment\n2 2\n# another\n10\n0 5\n10 2\n";
        let img = decode_pgm(text).unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0, 0.2]);
        assert!(decode_pgm(b"P6\n1 1\n255\n\0\0\0").is_err());
        assert!(decode_pgm(b"P5\n4 4\n255\n\0").is_err());
    }

    #[test]
    fn mask_pgm() {
        let mut m = SegMap::filled(2, 2, false);
        m.set(0, 1, true);
        let back = decode_pgm(&encode_mask_pgm(&m)).unwrap().map(|&v| v >= 0.5);
        assert_eq!(back, m);
    }

    #[test]
    fn contour_rejects_malformed_lines() {
        assert!(decode_contour("1 2\n3\n").is_err());
        assert_eq!(decode_contour("# header\n1 2\n\n3.5 -4\n").unwrap().len(), 2);
    }

    proptest! {
        #[test]
        fn contour_text_round_trips(coords in proptest::collection::vec(-1e6f64..1e6, 2..80)) {
            let n = coords.len() / 2 * 2;
            let c = Contour::from_flat(&coords[..n]).unwrap();
            prop_assert_eq!(decode_contour(&encode_contour(&c)).unwrap(), c);
        }

        #[test]
        fn pgm_round_trips_quantized_images(px in proptest::collection::vec(0u8..=255, 12)) {
            let img = Image::from_vec(3, 4, px.iter().map(|&b| b as f64 / 255.0).collect()).unwrap();
            prop_assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
        }
    }
}
