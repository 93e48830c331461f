//! RGB image buffers and binary PPM I/O.
//!
//! Images hold `f64` values in [0, 1], row-major `[H, W, 3]`. PPM output is
//! P6 with maxval 255 and round-half-up quantization `round(255 * v)`, so
//! artifacts are byte-exact functions of the float image.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub h: usize,
    pub w: usize,
    /// `[h, w, 3]` row-major, values in [0, 1]
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * 3 {
            return Err(Error::dim("RgbImage::new", format!("{h}x{w}x3 = {}", h * w * 3), format!("{}", data.len())));
        }
        Ok(RgbImage { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        RgbImage { h, w, data: vec![0.0; h * w * 3] }
    }

    pub fn constant(h: usize, w: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            data.extend_from_slice(&rgb);
        }
        RgbImage { h, w, data }
    }
}

/// Encode as binary PPM bytes.
pub fn encode_ppm(img: &RgbImage) -> Result<Vec<u8>> {
    if img.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::contract("write_ppm", "values must lie in [0, 1]"));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend(img.data.iter().map(|&v| (255.0 * v).round() as u8));
    Ok(out)
}

pub fn write_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    let bytes = encode_ppm(img)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Parse binary PPM (P6, maxval 255). Values scale back to [0, 1].
pub fn decode_ppm(data: &[u8]) -> Result<RgbImage> {
    let mut at = 0usize;
    let mut token = |what: &str| -> Result<(usize, String)> {
        // skip whitespace and comments
        loop {
            while at < data.len() && data[at].is_ascii_whitespace() {
                at += 1;
            }
            if at < data.len() && data[at] == b'#' {
                while at < data.len() && data[at] != b'\n' {
                    at += 1;
                }
            } else {
                break;
            }
        }
        let start = at;
        while at < data.len() && !data[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(Error::Parse { offset: start, message: format!("missing {what}") });
        }
        Ok((at, String::from_utf8_lossy(&data[start..at]).into_owned()))
    };
    let (_, magic) = token("magic")?;
    if magic != "P6" {
        return Err(Error::Parse { offset: 0, message: format!("expected P6, got {magic}") });
    }
    let (_, w) = token("width")?;
    let (_, h) = token("height")?;
    let (pos, maxval) = token("maxval")?;
    if maxval != "255" {
        return Err(Error::Parse { offset: pos, message: format!("expected maxval 255, got {maxval}") });
    }
    let w: usize = w.parse().map_err(|_| Error::Parse { offset: pos, message: format!("bad width {w}") })?;
    let h: usize = h.parse().map_err(|_| Error::Parse { offset: pos, message: format!("bad height {h}") })?;
    let start = pos + 1; // single whitespace byte after maxval
    let need = w * h * 3;
    if data.len() < start + need {
        return Err(Error::Parse {
            offset: data.len(),
            message: format!("truncated pixel data: need {need} bytes from offset {start}"),
        });
    }
    let values: Vec<f64> = data[start..start + need].iter().map(|&b| b as f64 / 255.0).collect();
    RgbImage::new(h, w, values)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&std::fs::read(path)?)
}

/// Alias-free area downsample by an integer factor (mean over f×f blocks).
pub fn area_downsample(img: &RgbImage, factor: usize) -> Result<RgbImage> {
    if factor == 0 || img.h % factor != 0 || img.w % factor != 0 {
        return Err(Error::contract(
            "area_downsample",
            format!("{}x{} not divisible by {factor}", img.h, img.w),
        ));
    }
    let (oh, ow) = (img.h / factor, img.w / factor);
    let mut data = vec![0.0; oh * ow * 3];
    let norm = 1.0 / (factor * factor) as f64;
    for i in 0..oh {
        for j in 0..ow {
            let out = &mut data[(i * ow + j) * 3..(i * ow + j + 1) * 3];
            for di in 0..factor {
                for dj in 0..factor {
                    let src = ((i * factor + di) * img.w + (j * factor + dj)) * 3;
                    for ch in 0..3 {
                        out[ch] += img.data[src + ch];
                    }
                }
            }
            for v in out.iter_mut() {
                *v *= norm;
            }
        }
    }
    RgbImage::new(oh, ow, data)
}
