//! Binary PPM (P6) and PGM (P5, 8- and 16-bit) encoding.

use std::path::Path;

use crate::error::{Error, Result};

fn header(magic: &str, width: usize, height: usize, maxval: u32) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n{maxval}\n").into_bytes()
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = header("P6", width, height, 255);
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm8(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    assert_eq!(data.len(), width * height);
    let mut out = header("P5", width, height, 255);
    out.extend_from_slice(data);
    out
}

/// 16-bit samples are big-endian.
pub fn encode_pgm16(width: usize, height: usize, data: &[u16]) -> Vec<u8> {
    assert_eq!(data.len(), width * height);
    let mut out = header("P5", width, height, 65535);
    for v in data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u32,
    pub raw: Vec<u8>,
}

impl Pnm {
    pub fn samples_u16(&self) -> Vec<u16> {
        if self.maxval > 255 {
            self.raw
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        } else {
            self.raw.iter().map(|&b| b as u16).collect()
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Option<u64> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()?
            .parse()
            .ok()
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Pnm, String> {
    if bytes.len() < 2 {
        return Err("file too short".into());
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        m => {
            return Err(format!(
                "unsupported magic {:?}",
                String::from_utf8_lossy(m)
            ))
        }
    };
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number().ok_or("bad width")? as usize;
    let height = c.number().ok_or("bad height")? as usize;
    let maxval = c.number().ok_or("bad maxval")? as u32;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    if c.pos >= bytes.len() || !bytes[c.pos].is_ascii_whitespace() {
        return Err("missing separator after header".into());
    }
    let start = c.pos + 1;
    let bps = if maxval > 255 { 2 } else { 1 };
    let need = width * height * channels * bps;
    if bytes.len() - start != need {
        return Err(format!(
            "expected {need} data bytes, found {}",
            bytes.len() - start
        ));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        maxval,
        raw: bytes[start..].to_vec(),
    })
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Pnm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

/// Reads a file and checks its size and channel count.
pub fn read_expect(path: &Path, width: usize, height: usize, channels: usize) -> Result<Pnm> {
    let p = read(path)?;
    if p.width != width || p.height != height || p.channels != channels {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "expected {width}x{height}x{channels}, found {}x{}x{}",
                p.width, p.height, p.channels
            ),
        });
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_with_comment() {
        let bytes = b"P5 # c\n2 1\n255\n\x07\x09";
        let p = decode(bytes).unwrap();
        assert_eq!((p.width, p.height, p.channels), (2, 1, 1));
        assert_eq!(p.raw, vec![7, 9]);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(decode(b"P3\n1 1\n255\n").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode(b"P5\n1 1\n0\n\x00").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            let n = w * h;
            let rgb: Vec<u8> = (0..n * 3).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let p = decode(&encode_ppm(w, h, &rgb)).unwrap();
            prop_assert_eq!(p.raw, rgb.clone());
            let g: Vec<u8> = rgb[..n].to_vec();
            prop_assert_eq!(decode(&encode_pgm8(w, h, &g)).unwrap().raw, g);
            let g16: Vec<u16> = (0..n).map(|i| (seed >> (i % 48)) as u16).collect();
            prop_assert_eq!(decode(&encode_pgm16(w, h, &g16)).unwrap().samples_u16(), g16);
        }
    }
}
