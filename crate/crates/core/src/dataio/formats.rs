//! Binary PGM (P5, 8-bit) for images and masks, little-endian PFM for
//! heatmaps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset,
        detail: detail.into(),
    }
}

/// Header tokenizer for the netpbm family: whitespace separated fields,
/// `#` comments to end of line, and exactly one whitespace byte before the
/// raster.
struct Header<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn token(&mut self) -> Result<(usize, &'a str)> {
        loop {
            match self.buf.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.buf.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(format_err(self.pos, "unexpected end of header")),
            }
        }
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.buf[start..self.pos]).map_err(|_| format_err(start, "non-ASCII header"))?;
        Ok((start, text))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let (at, t) = self.token()?;
        t.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| format_err(at, format!("bad {what} {t:?}")))
    }

    /// Consumes the single whitespace byte that ends the header.
    fn raster_start(&mut self) -> Result<usize> {
        match self.buf.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(format_err(self.pos, "header must end with one whitespace byte")),
        }
    }
}

/// Raw 8-bit PGM raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u8,
    pub data: Vec<u8>,
}

impl Pgm {
    pub fn parse(buf: &[u8]) -> Result<Pgm> {
        let mut h = Header { buf, pos: 0 };
        let (at, magic) = h.token()?;
        if magic != "P5" {
            return Err(format_err(at, format!("expected P5 magic, found {magic:?}")));
        }
        let width = h.number("width")?;
        let height = h.number("height")?;
        let (max_at, _) = Header { buf, pos: h.pos }.token()?;
        let maxval = h.number("maxval")?;
        if maxval > 255 {
            return Err(format_err(max_at, format!("maxval {maxval} needs 16-bit samples; only 8-bit is supported")));
        }
        let start = h.raster_start()?;
        let need = width * height;
        if buf.len() < start + need {
            return Err(format_err(buf.len(), format!("raster truncated: {} of {need} bytes", buf.len() - start)));
        }
        if buf.len() > start + need {
            return Err(format_err(start + need, "trailing bytes after raster"));
        }
        let data = buf[start..].to_vec();
        if let Some(p) = data.iter().position(|&v| v as usize > maxval) {
            return Err(format_err(start + p, format!("sample {} exceeds maxval {maxval}", data[p])));
        }
        Ok(Pgm {
            width,
            height,
            maxval: maxval as u8,
            data,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn to_image(&self) -> Image {
        let m = self.maxval as f32;
        Image::from_vec(self.width, self.height, self.data.iter().map(|&v| v as f32 / m).collect())
            .expect("dimensions checked by parse")
    }

    /// Samples must be 0 or maxval.
    pub fn to_mask(&self) -> Result<BinaryMask> {
        let mut bits = Vec::with_capacity(self.data.len());
        for (i, &v) in self.data.iter().enumerate() {
            bits.push(match v {
                0 => 0,
                v if v == self.maxval => 1,
                v => return Err(Error::arg(format!("mask sample {v} at pixel {i} is neither 0 nor {}", self.maxval))),
            });
        }
        BinaryMask::from_vec(self.width, self.height, bits)
    }

    /// Rounds `[0,1]` intensities to 8 bits.
    pub fn from_image(img: &Image) -> Pgm {
        Pgm {
            width: img.width(),
            height: img.height(),
            maxval: 255,
            data: img
                .data()
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }

    pub fn from_mask(mask: &BinaryMask) -> Pgm {
        Pgm {
            width: mask.width(),
            height: mask.height(),
            maxval: 255,
            data: mask.data().iter().map(|&v| v * 255).collect(),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads an 8-bit PGM as `[0,1]` intensities, resized to `size`² when
/// given.
pub fn load_image(path: &Path, size: Option<usize>) -> Result<Image> {
    let img = Pgm::parse(&read(path)?)?.to_image();
    Ok(match size {
        Some(s) if img.dims() != (s, s) => img.resize(s, s),
        _ => img,
    })
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    write(path, &Pgm::from_image(img).encode())
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    Pgm::parse(&read(path)?)?.to_mask()
}

pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    write(path, &Pgm::from_mask(mask).encode())
}

/// Grayscale PFM: `Pf`, dimensions, scale `-1.0` (little-endian), then
/// rows bottom to top.
pub fn encode_pfm(map: &Image) -> Vec<u8> {
    let (w, h) = map.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&map.get(x, y).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(buf: &[u8]) -> Result<Image> {
    let mut h = Header { buf, pos: 0 };
    let (at, magic) = h.token()?;
    if magic != "Pf" {
        return Err(format_err(at, format!("expected grayscale PFM magic Pf, found {magic:?}")));
    }
    let w = h.number("width")?;
    let height = h.number("height")?;
    let (at, scale) = h.token()?;
    let scale: f64 = scale
        .parse()
        .map_err(|_| format_err(at, format!("bad scale {scale:?}")))?;
    if !(scale < 0.0) {
        return Err(format_err(at, "scale must be negative (little-endian samples required)"));
    }
    let start = h.raster_start()?;
    let need = w * height * 4;
    if buf.len() != start + need {
        return Err(format_err(buf.len().min(start + need), format!("raster holds {} bytes, expected {need}", buf.len() - start)));
    }
    let mut img = Image::new(w, height);
    let mut chunks = buf[start..].chunks_exact(4);
    for y in (0..height).rev() {
        for x in 0..w {
            let c = chunks.next().expect("length checked");
            img.set(x, y, f32::from_le_bytes(c.try_into().expect("4 bytes")));
        }
    }
    Ok(img)
}

pub fn save_heatmap(map: &Image, path: &Path) -> Result<()> {
    write(path, &encode_pfm(map))
}

pub fn load_heatmap(path: &Path) -> Result<Image> {
    decode_pfm(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_pgm() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 255, 0]);
        let img = Pgm::parse(&bytes).unwrap().to_image();
        assert_eq!(img.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn comments_in_header() {
        let mut bytes = b"P5 # made by hand\n2 1\n# max\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        assert_eq!(Pgm::parse(&bytes).unwrap().data, vec![7, 9]);
    }

    #[test]
    fn malformed_headers_report_offsets() {
        assert!(matches!(Pgm::parse(b"P2\n1 1\n255\n\0"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(Pgm::parse(b"P5\n1 x\n255\n\0"), Err(Error::Format { offset: 5, .. })));
        assert!(matches!(Pgm::parse(b"P5\n2 2\n255\n\0"), Err(Error::Format { .. })));
        assert!(matches!(Pgm::parse(b"P5\n1 1\n65535\n\0\0"), Err(Error::Format { offset: 7, .. })));
    }

    #[test]
    fn big_endian_pfm_rejected() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.0f32.to_be_bytes());
        assert!(matches!(decode_pfm(&bytes), Err(Error::Format { offset: 7, .. })));
    }

    #[test]
    fn pfm_rows_run_bottom_to_top() {
        let img = Image::from_vec(1, 2, vec![0.25, 0.75]).unwrap();
        let bytes = encode_pfm(&img);
        let body = &bytes[bytes.len() - 8..];
        assert_eq!(&body[..4], &0.75f32.to_le_bytes());
    }

    #[test]
    fn non_binary_mask_rejected() {
        let pgm = Pgm {
            width: 2,
            height: 1,
            maxval: 255,
            data: vec![0, 128],
        };
        assert!(pgm.to_mask().is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = BinaryMask::from_fn(5, 3, |x, y| (x + y) % 2 == 0);
        save_mask(&mask, &dir.path().join("m.pgm")).unwrap();
        assert_eq!(load_mask(&dir.path().join("m.pgm")).unwrap(), mask);
        let map = Image::from_fn(4, 3, |x, y| x as f32 * 0.1 + y as f32 * 1e-3);
        save_heatmap(&map, &dir.path().join("h.pfm")).unwrap();
        assert_eq!(load_heatmap(&dir.path().join("h.pfm")).unwrap(), map);
    }

    proptest! {
        #[test]
        fn mask_and_heatmap_round_trip_bit_exact(
            (w, h, bits, vals) in (1usize..12, 1usize..12).prop_flat_map(|(w, h)| (
                Just(w),
                Just(h),
                proptest::collection::vec(0u8..2, w * h),
                proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), w * h),
            ))
        ) {
            let mask = BinaryMask::from_vec(w, h, bits).unwrap();
            prop_assert_eq!(Pgm::parse(&Pgm::from_mask(&mask).encode()).unwrap().to_mask().unwrap(), mask);
            let map = Image::from_vec(w, h, vals).unwrap();
            let back = decode_pfm(&encode_pfm(&map)).unwrap();
            prop_assert!(back.data().iter().zip(map.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
