//! PFM float maps and PGM intensity/mask images.
//!
//! Float images (correspondence channels, phase maps) are PFM, little-endian
//! (scale −1), rows stored bottom-to-top. Intensity frames are 16-bit PGM and
//! masks 8-bit PGM with 0/255. Files are named `{cam}_{kind}_{shift}.{ext}`.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::render::{CorrespondenceMap, Frame};

/// Row-major (top row first) float image with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

pub fn artifact_name(cam: usize, kind: &str, shift: usize, ext: &str) -> String {
    format!("cam{cam}_{kind}_{shift}.{ext}")
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format(format!("{}: {}", path.display(), msg.into()))
}

/// Splits `n_tokens` whitespace-separated header tokens off the front of
/// `bytes`; returns them and the offset of the byte after the single
/// whitespace that ends the last token.
fn header_tokens(bytes: &[u8], n_tokens: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(n_tokens);
    let mut i = 0;
    while tokens.len() < n_tokens {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return if tokens.len() == n_tokens { Some((tokens, i)) } else { None };
    }
    Some((tokens, i + 1))
}

pub fn write_pfm(path: impl AsRef<Path>, image: &FloatImage) -> Result<()> {
    let path = path.as_ref();
    let tag = match image.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(format_err(path, format!("PFM needs 1 or 3 channels, got {c}"))),
    };
    if image.data.len() != image.width * image.height * image.channels {
        return Err(format_err(path, "pixel buffer size mismatch"));
    }
    let mut out = Vec::with_capacity(32 + image.data.len() * 4);
    write!(out, "{tag}\n{} {}\n-1.0\n", image.width, image.height)?;
    let row_len = image.width * image.channels;
    for row in image.data.chunks_exact(row_len).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<FloatImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let (tok, offset) = header_tokens(&bytes, 4).ok_or_else(|| format_err(path, "truncated PFM header"))?;
    let channels = match tok[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(format_err(path, format!("not a PFM file (magic `{other}`)"))),
    };
    let dim = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad dimension `{s}`")));
    let (width, height) = (dim(&tok[1])?, dim(&tok[2])?);
    let scale: f64 = tok[3].parse().map_err(|_| format_err(path, format!("bad scale `{}`", tok[3])))?;
    if scale == 0.0 {
        return Err(format_err(path, "zero scale"));
    }
    let little = scale < 0.0;
    let n = width * height * channels;
    let body = &bytes[offset..];
    if body.len() < n * 4 {
        return Err(format_err(path, format!("expected {} data bytes, found {}", n * 4, body.len())));
    }
    let vals: Vec<f32> = body[..n * 4]
        .chunks_exact(4)
        .map(|c| {
            let b = [c[0], c[1], c[2], c[3]];
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    let row_len = width * channels;
    let data: Vec<f32> = vals.chunks_exact(row_len.max(1)).rev().flatten().copied().collect();
    Ok(FloatImage { width, height, channels, data })
}

/// Writes gray values given as `0..=maxval` integers.
fn write_pgm_raw(path: &Path, width: usize, height: usize, maxval: u16, values: &[u16]) -> Result<()> {
    let mut out = Vec::with_capacity(32 + values.len() * 2);
    write!(out, "P5\n{width} {height}\n{maxval}\n")?;
    if maxval > 255 {
        for v in values {
            out.extend_from_slice(&v.to_be_bytes());
        }
    } else {
        out.extend(values.iter().map(|&v| v as u8));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Gray values and maxval.
fn read_pgm_raw(path: &Path) -> Result<(usize, usize, u16, Vec<u16>)> {
    let bytes = std::fs::read(path)?;
    let (tok, offset) = header_tokens(&bytes, 4).ok_or_else(|| format_err(path, "truncated PGM header"))?;
    if tok[0] != "P5" {
        return Err(format_err(path, format!("not a binary PGM (magic `{}`)", tok[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad header field `{s}`")));
    let (width, height, maxval) = (num(&tok[1])?, num(&tok[2])?, num(&tok[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(path, format!("bad maxval {maxval}")));
    }
    let n = width * height;
    let body = &bytes[offset..];
    let values: Vec<u16> = if maxval > 255 {
        if body.len() < 2 * n {
            return Err(format_err(path, "truncated 16-bit PGM data"));
        }
        body[..2 * n].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        if body.len() < n {
            return Err(format_err(path, "truncated 8-bit PGM data"));
        }
        body[..n].iter().map(|&b| b as u16).collect()
    };
    Ok((width, height, maxval as u16, values))
}

/// 16-bit PGM; intensities are quantized to 1/65535.
pub fn write_frame_pgm(path: impl AsRef<Path>, frame: &Frame) -> Result<()> {
    let values: Vec<u16> =
        frame.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    write_pgm_raw(path.as_ref(), frame.width, frame.height, 65535, &values)
}

pub fn read_frame_pgm(path: impl AsRef<Path>) -> Result<Frame> {
    let (w, h, maxval, values) = read_pgm_raw(path.as_ref())?;
    let scale = 1.0 / maxval as f64;
    Ok(Frame::new(w, h, values.iter().map(|&v| v as f64 * scale).collect()))
}

pub fn write_mask_pgm(path: impl AsRef<Path>, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let values: Vec<u16> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_pgm_raw(path.as_ref(), width, height, 255, &values)
}

pub fn read_mask_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    let (w, h, maxval, values) = read_pgm_raw(path.as_ref())?;
    let half = maxval / 2;
    Ok((w, h, values.iter().map(|&v| v > half).collect()))
}

/// Correspondence as a 3-channel PFM `(u, v, 0)` plus a mask PGM.
pub fn save_correspondence(dir: impl AsRef<Path>, cam: usize, map: &CorrespondenceMap) -> Result<()> {
    let dir = dir.as_ref();
    let mut data = Vec::with_capacity(map.u.len() * 3);
    for i in 0..map.u.len() {
        let (u, v) = if map.valid[i] { (map.u[i] as f32, map.v[i] as f32) } else { (f32::NAN, f32::NAN) };
        data.extend_from_slice(&[u, v, 0.0]);
    }
    let img = FloatImage { width: map.width, height: map.height, channels: 3, data };
    write_pfm(dir.join(artifact_name(cam, "corr", 0, "pfm")), &img)?;
    write_mask_pgm(dir.join(artifact_name(cam, "mask", 0, "pgm")), map.width, map.height, &map.valid)
}

pub fn load_correspondence(dir: impl AsRef<Path>, cam: usize) -> Result<CorrespondenceMap> {
    let dir = dir.as_ref();
    let pfm_path = dir.join(artifact_name(cam, "corr", 0, "pfm"));
    let img = read_pfm(&pfm_path)?;
    if img.channels != 3 {
        return Err(format_err(&pfm_path, "correspondence PFM must have 3 channels"));
    }
    let (mw, mh, mask) = read_mask_pgm(dir.join(artifact_name(cam, "mask", 0, "pgm")))?;
    if (mw, mh) != (img.width, img.height) {
        return Err(format_err(&pfm_path, "mask size differs from correspondence size"));
    }
    let mut map = CorrespondenceMap::invalid(img.width, img.height);
    for i in 0..mask.len() {
        let (u, v) = (img.data[3 * i] as f64, img.data[3 * i + 1] as f64);
        if mask[i] && u.is_finite() && v.is_finite() {
            map.u[i] = u;
            map.v[i] = v;
            map.valid[i] = true;
        }
    }
    Ok(map)
}

pub fn frame_path(dir: impl AsRef<Path>, cam: usize, kind: &str, shift: usize) -> PathBuf {
    dir.as_ref().join(artifact_name(cam, kind, shift, "pgm"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::render_correspondence;
    use crate::scene::SceneConfig;

    #[test]
    fn pfm_round_trip_and_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pfm");
        let img = FloatImage { width: 3, height: 2, channels: 1, data: vec![1.0, 2.0, 3.0, 4.0, 5.0, -6.5] };
        write_pfm(&p, &img).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        // bottom row first
        assert_eq!(&bytes[12..16], &4.0f32.to_le_bytes());
        assert_eq!(read_pfm(&p).unwrap(), img);
    }

    #[test]
    fn pfm_big_endian_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.pfm");
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_be_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert_eq!(read_pfm(&p).unwrap().data, vec![1.5, -2.0]);
    }

    #[test]
    fn truncated_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pfm");
        std::fs::write(&p, b"PF\n4 4\n-1.0\n\0\0").unwrap();
        assert!(matches!(read_pfm(&p), Err(Error::Format(_))));
        std::fs::write(&p, b"P2\n1 1\n255\n0").unwrap();
        assert!(matches!(read_frame_pgm(&p), Err(Error::Format(_))));
    }

    #[test]
    fn pgm_frames_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        let frame = Frame::new(2, 2, vec![0.0, 1.0, 0.25, 0.5]);
        let p = dir.path().join("f.pgm");
        write_frame_pgm(&p, &frame).unwrap();
        let back = read_frame_pgm(&p).unwrap();
        for (a, b) in frame.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 65535.0);
        }
        let m = dir.path().join("m.pgm");
        write_mask_pgm(&m, 3, 1, &[true, false, true]).unwrap();
        assert_eq!(read_mask_pgm(&m).unwrap(), (3, 1, vec![true, false, true]));
        assert_eq!(std::fs::read(&m).unwrap(), b"P5\n3 1\n255\n\xff\x00\xff");
    }

    #[test]
    fn correspondence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = render_correspondence(&SceneConfig::default_scene(), 0);
        save_correspondence(dir.path(), 0, &map).unwrap();
        assert!(dir.path().join("cam0_corr_0.pfm").exists());
        assert!(dir.path().join("cam0_mask_0.pgm").exists());
        let back = load_correspondence(dir.path(), 0).unwrap();
        assert_eq!(back.valid, map.valid);
        for i in 0..map.u.len() {
            if map.valid[i] {
                assert_eq!(back.u[i], map.u[i] as f32 as f64);
                assert_eq!(back.v[i], map.v[i] as f32 as f64);
            }
        }
    }
}
