//! Binary PGM (`P5`). Images are stored with maxval 65535 as big-endian
//! 16-bit samples; label maps with maxval 255 as 0/127/255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, Label, LabelMap};

const LABEL_CODES: [u8; 3] = [0, 127, 255];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawPgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn header(width: usize, height: usize, maxval: u32) -> Vec<u8> {
    format!("P5\n{width} {height}\n{maxval}\n").into_bytes()
}

pub fn encode_image_pgm(image: &Image) -> Result<Vec<u8>> {
    let mut out = header(image.width(), image.height(), 65535);
    out.reserve(image.len() * 2);
    for (i, &v) in image.pixels().iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!(
                "image value {v} at pixel {i} outside [0, 1]"
            )));
        }
        out.extend_from_slice(&((v * 65535.0).round() as u16).to_be_bytes());
    }
    Ok(out)
}

pub fn encode_label_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = header(labels.width(), labels.height(), 255);
    out.extend(
        labels
            .pixels()
            .iter()
            .map(|l| LABEL_CODES[l.as_u8() as usize]),
    );
    out
}

fn fail(offset: usize, reason: impl Into<String>) -> Error {
    Error::Pgm {
        offset,
        reason: reason.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        let had_space = self.pos;
        self.skip_space_and_comments();
        if self.pos == had_space {
            return Err(fail(self.pos, format!("expected whitespace before {what}")));
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(match self.bytes.get(self.pos) {
                None => fail(self.pos, format!("header ends before {what}")),
                Some(b) => fail(
                    self.pos,
                    format!("expected digit for {what}, found byte {b:#04x}"),
                ),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| fail(start, format!("{what} out of range")))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<RawPgm> {
    if bytes.len() < 2 {
        return Err(fail(bytes.len(), "file shorter than magic"));
    }
    if &bytes[..2] != b"P5" {
        return Err(fail(0, "magic is not P5"));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(fail(cur.pos, format!("zero extent {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(fail(cur.pos, format!("maxval {maxval} not in 1..=65535")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        Some(b) => {
            return Err(fail(
                cur.pos,
                format!("expected whitespace after maxval, found byte {b:#04x}"),
            ))
        }
        None => return Err(fail(cur.pos, "header ends after maxval")),
    }
    let (w, h) = (width as usize, height as usize);
    let sample_bytes = if maxval > 255 { 2 } else { 1 };
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(sample_bytes))
        .ok_or_else(|| fail(cur.pos, "extent overflow"))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(fail(
            bytes.len(),
            format!("payload truncated: {} of {need} bytes", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(fail(cur.pos + need, "trailing bytes after payload"));
    }
    let samples: Vec<u16> = if sample_bytes == 2 {
        payload
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        payload.iter().map(|&b| b as u16).collect()
    };
    if let Some(i) = samples.iter().position(|&s| s as u32 > maxval) {
        return Err(fail(
            cur.pos + i * sample_bytes,
            format!("sample exceeds maxval {maxval}"),
        ));
    }
    Ok(RawPgm {
        width: w,
        height: h,
        maxval: maxval as u16,
        samples,
    })
}

/// Any maxval is accepted; samples scale by `1 / maxval`.
pub fn decode_image_pgm(bytes: &[u8]) -> Result<Image> {
    let raw = decode_pgm(bytes)?;
    let scale = 1.0 / raw.maxval as f64;
    Image::new(
        raw.width,
        raw.height,
        raw.samples.iter().map(|&s| s as f64 * scale).collect(),
    )
}

pub fn decode_label_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let raw = decode_pgm(bytes)?;
    if raw.maxval != 255 {
        return Err(fail(
            0,
            format!("label maps need maxval 255, found {}", raw.maxval),
        ));
    }
    let payload_start = bytes.len() - raw.samples.len();
    let labels = raw
        .samples
        .iter()
        .enumerate()
        .map(|(i, &s)| match s {
            0 => Ok(Label::Background),
            127 => Ok(Label::Liver),
            255 => Ok(Label::Tumor),
            other => Err(fail(
                payload_start + i,
                format!("label code {other} not in {{0, 127, 255}}"),
            )),
        })
        .collect::<Result<Vec<_>>>()?;
    LabelMap::new(raw.width, raw.height, labels)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_image_pgm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_image_pgm(image)?)
}

pub fn save_label_pgm(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_label_pgm(labels))
}

pub fn load_image_pgm(path: impl AsRef<Path>) -> Result<Image> {
    decode_image_pgm(&read(path.as_ref())?)
}

pub fn load_label_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    decode_label_pgm(&read(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_hexed_2x2() {
        let mut bytes = b"P5\n2 2\n65535\n".to_vec();
        bytes.extend_from_slice(&[0x00, 0x00, 0xff, 0xff, 0x80, 0x00, 0x00, 0x01]);
        let img = decode_image_pgm(&bytes).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0, 32768.0 / 65535.0, 1.0 / 65535.0]);

        let lbl = decode_label_pgm(b"P5 2 2 255\n\x00\x7f\xff\x00").unwrap();
        assert_eq!(
            lbl.pixels(),
            &[
                Label::Background,
                Label::Liver,
                Label::Tumor,
                Label::Background
            ]
        );
    }

    #[test]
    fn comments_in_header() {
        let lbl = decode_label_pgm(b"P5\n# made by hand\n1 1\n255\n\x7f").unwrap();
        assert_eq!(lbl.pixels(), &[Label::Liver]);
    }

    #[test]
    fn label_roundtrip_exact() {
        let m = LabelMap::from_u8(3, 2, &[0, 1, 2, 2, 1, 0]).unwrap();
        assert_eq!(decode_label_pgm(&encode_label_pgm(&m)).unwrap(), m);
    }

    #[test]
    fn image_roundtrip_quantized() {
        let img = Image::from_fn(5, 3, |x, y| ((x * 3 + y) as f64 / 17.0).min(1.0)).unwrap();
        let back = decode_image_pgm(&encode_image_pgm(&img).unwrap()).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 1.0 / 65535.0);
        }
        let bad = Image::new(1, 1, vec![1.5]).unwrap();
        assert!(encode_image_pgm(&bad).is_err());
    }

    #[test]
    fn rejections_carry_offsets() {
        let cases: [&[u8]; 7] = [
            b"P6\n1 1\n255\n\x00",
            b"P5\n1 x\n255\n\x00",
            b"P5\n1 1\n255\n",
            b"P5\n1 1\n255\n\x00\x00",
            b"P5\n0 1\n255\n",
            b"P5\n1 1\n70000\n\x00\x00",
            b"P5\n1 1\n255",
        ];
        for bytes in cases {
            let err = decode_pgm(bytes).unwrap_err();
            assert!(matches!(err, Error::Pgm { .. }), "{err}");
        }
        match decode_pgm(b"P5\n1 1\n255\n").unwrap_err() {
            Error::Pgm { offset, .. } => assert_eq!(offset, 11),
            e => panic!("{e}"),
        }
        assert!(decode_label_pgm(b"P5 1 1 255\n\x05").is_err());
        assert!(decode_label_pgm(b"P5 1 1 254\n\x00").is_err());
    }
}
