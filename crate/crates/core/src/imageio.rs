//! Binary PPM (P6) and PGM (P5) images with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit interleaved pixel grid with 1 (gray) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0; width * height * channels],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            what: "PNM image",
            msg: msg.to_string(),
        };
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
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let channels = match fields[0] {
            "P6" => 3,
            "P5" => 1,
            other => return Err(bad(&format!("unsupported magic {other}"))),
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
        let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(bad("maxval must be 255"));
        }
        let n = width * height * channels;
        if bytes.len() < pos || bytes.len() - pos != n {
            return Err(bad(&format!(
                "expected {n} raster bytes, found {}",
                bytes.len().saturating_sub(pos)
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data: bytes[pos..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let mut img = Image::new(3, 2, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i * 13) as u8;
        }
        let bytes = img.encode();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(Image::decode(&bytes).unwrap(), img);
    }

    #[test]
    fn pgm_with_comment() {
        let bytes = b"P5\n# mask\n2 2\n255\n\x00\xff\xff\x00";
        let img = Image::decode(bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 2, 1));
        assert_eq!(img.get(1, 0, 0), 255);
    }

    #[test]
    fn truncated_raster_rejected() {
        let mut bytes = Image::new(4, 4, 1).encode();
        bytes.pop();
        assert!(Image::decode(&bytes).is_err());
        assert!(Image::decode(b"P3\n1 1\n255\n").is_err());
    }
}
