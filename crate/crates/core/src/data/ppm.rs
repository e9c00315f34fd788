//! Binary PPM (P6, maxval 255) image I/O.

use std::fs;
use std::path::Path;

use super::{io_err, DataError, Result};

/// Write interleaved RGB pixels in `[0,1]` as a P6 file.
pub fn write_ppm(path: &Path, pixels: &[f64], width: usize, height: usize) -> Result<()> {
    assert_eq!(pixels.len(), width * height * 3, "pixel buffer size");
    let mut bytes = Vec::with_capacity(32 + pixels.len());
    bytes.extend_from_slice(format!("P6\n{width} {height}\n255\n").as_bytes());
    for &v in pixels {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Read a P6 file back into `[0,1]` floats.
pub fn read_ppm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    parse_ppm(&bytes).map_err(|msg| DataError::Malformed { what: "ppm", msg })
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<(Vec<f64>, usize, usize), String> {
    let mut pos = 0;
    let mut field = |bytes: &[u8]| -> std::result::Result<String, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = field(bytes)?;
    if magic != "P6" {
        return Err(format!("bad magic {magic:?}"));
    }
    let width: usize = field(bytes)?.parse().map_err(|_| "bad width".to_string())?;
    let height: usize = field(bytes)?.parse().map_err(|_| "bad height".to_string())?;
    let maxval: usize = field(bytes)?.parse().map_err(|_| "bad maxval".to_string())?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // Exactly one whitespace byte separates header from payload.
    pos += 1;
    let want = width * height * 3;
    let payload = bytes
        .get(pos..pos + want)
        .ok_or_else(|| "truncated payload".to_string())?;
    let pixels = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok((pixels, width, height))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_exact_for_pure_levels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let px = vec![0.0, 1.0, 0.5, 1.0, 0.0, 0.0];
        write_ppm(&path, &px, 2, 1).unwrap();
        let (back, w, h) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(back[0], 0.0);
        assert_eq!(back[1], 1.0);
        assert_eq!(back[3], 1.0);
        assert!((back[2] - 0.5).abs() < 1.0 / 255.0);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P5\n1 1\n255\n\0").unwrap();
        assert!(read_ppm(&path).is_err());
    }
}
