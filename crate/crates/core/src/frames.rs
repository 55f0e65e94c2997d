//! Binary PPM frame dumps for looking at transformed videos.

use std::io::Write;
use std::path::{Path, PathBuf};

use vidpriv_tensor::Tensor;

use crate::error::{Error, Result};
use crate::tokenizer::{compose_clip, DecisionMatrix, TubeletLayout};

pub fn quantize(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

/// Parses a P6 image with maxval 255 (comments are not supported).
pub fn decode_ppm(bytes: &[u8]) -> Result<Ppm> {
    let bad = |m: &str| Error::Data(format!("ppm: {m}"));
    let mut fields = Vec::with_capacity(4);
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
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("only P6 with maxval 255 is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (width, height) = (num(fields[1])?, num(fields[2])?);
    let rgb = bytes.get(pos..).unwrap_or_default().to_vec();
    if rgb.len() != width * height * 3 {
        return Err(bad("payload size does not match dimensions"));
    }
    Ok(Ppm { width, height, rgb })
}

/// Writes `frame_%04d.ppm` for every frame of `[T, H, W, 3]` pixels. With a
/// decision, abandoned tubelets are blacked out first.
pub fn dump_frames(
    pixels: &Tensor,
    decision: Option<(&DecisionMatrix, &TubeletLayout)>,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let &[t, h, w, 3] = pixels.shape() else {
        return Err(Error::Layout(format!("frames must be [T, H, W, 3], got {:?}", pixels.shape())));
    };
    let shown = match decision {
        Some((d, layout)) => compose_clip(pixels, d, layout)?,
        None => pixels.clone(),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let frame_len = h * w * 3;
    let mut paths = Vec::with_capacity(t);
    for (i, frame) in shown.data().chunks(frame_len).enumerate() {
        let rgb: Vec<u8> = frame.iter().map(|&x| quantize(x)).collect();
        let path = dir.join(format!("frame_{i:04}.ppm"));
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&encode_ppm(w, h, &rgb)).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
