//! Binary (P5) and ASCII (P2) PGM with maxval 255.

use super::Page;
use crate::error::{Error, Result};

fn err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Pgm { offset, detail: detail.into() }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(match self.bytes.get(self.pos) {
                None => err(self.pos, format!("unexpected end of data reading {what}")),
                Some(_) => err(self.pos, format!("expected {what}")),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| err(start, format!("{what} out of range")))
    }
}

pub fn read_pgm(bytes: &[u8]) -> Result<Page> {
    let binary = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return Err(err(0, "expected magic P5 or P2")),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    if !cur.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(err(2, "expected whitespace after magic"));
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_space_and_comments();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(err(maxval_at, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(err(maxval_at, format!("maxval must be 255, got {maxval}")));
    }
    let n = width * height;
    let pixels = if binary {
        match bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(err(cur.pos, "expected single whitespace before raster")),
        }
        let raster = bytes
            .get(cur.pos..cur.pos + n)
            .ok_or_else(|| err(bytes.len(), format!("truncated raster: need {n} bytes, have {}", bytes.len() - cur.pos)))?;
        raster.iter().map(|&v| v as f64 / 255.0).collect()
    } else {
        let mut px = Vec::with_capacity(n);
        for _ in 0..n {
            cur.skip_space_and_comments();
            let at = cur.pos;
            let v = cur.number("pixel value")?;
            if v > 255 {
                return Err(err(at, format!("pixel value {v} exceeds maxval")));
            }
            px.push(v as f64 / 255.0);
        }
        px
    };
    Page::gray(width, height, pixels)
}

/// Encodes a page as P5; colour pages are converted to luma first.
pub fn write_pgm(page: &Page) -> Vec<u8> {
    let gray = page.to_gray();
    let mut out = format!("P5\n{} {}\n255\n", gray.width, gray.height).into_bytes();
    out.extend(gray.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_p5() {
        let page = read_pgm(b"P5\n1 1\n255\n\x00").unwrap();
        assert_eq!(page.pixels, vec![0.0]);
    }

    #[test]
    fn ascii_fixture() {
        let page = read_pgm(b"P2\n# fixture\n2 2\n255\n0 255\n255 0\n").unwrap();
        assert_eq!((page.width, page.height), (2, 2));
        assert_eq!(page.pixels, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn comments_in_header() {
        let page = read_pgm(b"P5 # c1\n3 # c2\n1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(write_pgm(&page), b"P5\n3 1\n255\n\x01\x02\x03");
    }

    #[test]
    fn errors_carry_offsets() {
        match read_pgm(b"P6\n1 1\n255\n\x00") {
            Err(Error::Pgm { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        match read_pgm(b"P5\n2 2\n255\n\x00\x00") {
            Err(Error::Pgm { offset, detail }) => {
                assert_eq!(offset, 13);
                assert!(detail.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
        match read_pgm(b"P5\n1 1\n65535\n\x00\x00") {
            Err(Error::Pgm { offset: 7, detail }) => assert!(detail.contains("maxval")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_pgm(b"P2\n1 1\n255\n256\n"), Err(Error::Pgm { offset: 11, .. })));
        assert!(matches!(read_pgm(b"P5\n1"), Err(Error::Pgm { .. })));
    }

    #[test]
    fn p2_rewrites_as_canonical_p5() {
        let bytes = write_pgm(&read_pgm(b"P2 2 1 255 7 200").unwrap());
        assert_eq!(bytes, b"P5\n2 1\n255\n\x07\xc8");
    }

    proptest! {
        #[test]
        fn p5_payload_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
            let payload: Vec<u8> = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
            let mut file = format!("P5\n{w} {h}\n255\n").into_bytes();
            file.extend(&payload);
            let again = write_pgm(&read_pgm(&file).unwrap());
            prop_assert_eq!(again, file);
        }
    }
}
