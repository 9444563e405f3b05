//! PFM and PNG image files. Pixel buffers are row-major, top row first,
//! three channels per pixel.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "pfm",
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes a little-endian color PFM.
pub fn write_pfm(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("PF\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(rgb.len() * 4);
    // PFM stores the bottom row first
    for y in (0..height).rev() {
        for v in &rgb[y * width * 3..(y + 1) * width * 3] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a color (`PF`) or grayscale (`Pf`) PFM; grayscale is expanded
/// to three channels.
pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(format_err(path, format!("bad magic {other:?}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad dimension {s:?}")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let scale: f64 = fields[3].parse().map_err(|_| format_err(path, "bad scale"))?;
    let little = scale < 0.0;
    let n = w * h * channels;
    if bytes.len() < pos + n * 4 {
        return Err(format_err(path, format!("expected {n} floats")));
    }
    let mut rgb = vec![0.0; w * h * 3];
    for (k, chunk) in bytes[pos..pos + n * 4].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) } as f64;
        let (pix, ch) = (k / channels, k % channels);
        let (x, yb) = (pix % w, pix / w);
        let y = h - 1 - yb;
        let base = (y * w + x) * 3;
        if channels == 1 {
            rgb[base..base + 3].fill(v);
        } else {
            rgb[base + ch] = v;
        }
    }
    Ok((w, h, rgb))
}

/// Writes 8-bit RGB, clamping values to `[0, 1]`.
pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    let data: Vec<u8> = rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &data, width as u32, height as u32, image::ColorType::Rgb8)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Reads a PNG as RGB in `[0, 1]`; an alpha channel is composited over
/// `background`.
pub fn read_png(path: &Path, background: [f64; 3]) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let img = img.to_rgba32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut rgb = Vec::with_capacity(w * h * 3);
    for p in img.pixels() {
        let a = p[3] as f64;
        for c in 0..3 {
            rgb.push(p[c] as f64 * a + background[c] * (1.0 - a));
        }
    }
    Ok((w, h, rgb))
}
