//! Binary PPM (P6) images, 8 bits per channel.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rounds every value to the nearest multiple of 1/255, clamped to [0, 1].
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

pub fn encode(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::ShapeMismatch {
            node: "ppm image".into(),
            expected: "[3, H, W]".into(),
            actual: s.to_vec(),
        });
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let bad = |reason: &str| Error::Malformed {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    // header: magic, width, height, maxval separated by whitespace
    let mut fields = Vec::new();
    let mut pos = 0;
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
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 || w == 0 || h == 0 {
        return Err(bad("only 8-bit non-empty images are supported"));
    }
    pos += 1;
    let pixels = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| bad("truncated pixel data"))?;
    let mut data = vec![0f32; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            data[c * h * w + i] = pixels[3 * i + c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn write(path: &Path, img: &Tensor) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode(img)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor> {
    decode(&fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_images_round_trip_exactly() {
        let img = quantize(&Tensor::from_fn(&[3, 4, 5], |i| (i as f32 * 0.037) % 1.0));
        let back = decode(&encode(&img).unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"P5\n1 1\n255\n\0", Path::new("mem")).is_err());
        assert!(decode(b"P6\n2 2\n255\n\0\0", Path::new("mem")).is_err());
    }
}
