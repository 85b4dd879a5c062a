//! Binary PPM (P6) / PGM (P5) image IO. Loading normalizes 8-bit samples to
//! `[0, 1]`; writing clamps and quantizes.

use super::RawImage;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use std::io::{Read, Write};
use std::path::Path;

fn read_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    // skip whitespace and '#' comments
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PPM/PGM header".to_string()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).to_string())
}

pub fn load(path: &Path) -> Result<RawImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn decode(bytes: &[u8]) -> Result<RawImage> {
    let mut pos = 0;
    let magic = read_token(bytes, &mut pos)?;
    let ch = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(Error::Format(format!("unsupported magic {other:?}"))),
    };
    let w: usize = read_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Format("bad width".to_string()))?;
    let h: usize = read_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Format("bad height".to_string()))?;
    let maxval: usize = read_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Format("bad maxval".to_string()))?;
    if maxval != 255 {
        return Err(Error::Format(format!("only 8-bit images supported, maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * ch;
    if bytes.len() < pos + need {
        return Err(Error::Format("truncated pixel data".to_string()));
    }
    let data: Vec<f64> = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    RawImage::new(Tensor::new(vec![h, w, ch], data)?)
}

pub fn save(img: &RawImage, path: &Path) -> Result<()> {
    let bytes = encode(img);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn encode(img: &RawImage) -> Vec<u8> {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let magic = if ch == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(
        img.pixels
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}
