//! Binary PGM (P5) rasters, pixel value = class id.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::Contract(format!(
            "raster holds {} bytes, expected {}x{}={}",
            data.len(),
            width,
            height,
            width * height
        )));
    }
    let mut out = Vec::with_capacity(data.len() + 32);
    out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(data);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
    f.write_all(&out).map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let buf = std::fs::read(path).map_err(|e| Error::io_at(path, e))?;
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
        }
        let start = *pos;
        while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Parse(format!("{}: truncated header", path.display())));
        }
        Ok(String::from_utf8_lossy(&buf[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    if magic != "P5" {
        return Err(Error::Parse(format!("{}: expected P5, got {magic}", path.display())));
    }
    let width: usize = token(&mut pos)?
        .parse()
        .map_err(|_| Error::Parse(format!("{}: bad width", path.display())))?;
    let height: usize = token(&mut pos)?
        .parse()
        .map_err(|_| Error::Parse(format!("{}: bad height", path.display())))?;
    let maxval: usize = token(&mut pos)?
        .parse()
        .map_err(|_| Error::Parse(format!("{}: bad maxval", path.display())))?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse(format!("{}: unsupported maxval {maxval}", path.display())));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let expected = width * height;
    let have = buf.len().saturating_sub(pos);
    if have < expected {
        return Err(Error::Parse(format!(
            "{}: raster truncated: {have} data bytes, expected {expected} ({width}x{height})",
            path.display()
        )));
    }
    Ok((width, height, buf[pos..pos + expected].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.pgm");
        let data: Vec<u8> = (0..20u8).collect();
        write_pgm(&p, 5, 4, &data).unwrap();
        let (w, h, back) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (5, 4));
        assert_eq!(back, data);
    }

    #[test]
    fn truncation_reports_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.pgm");
        write_pgm(&p, 5, 4, &vec![1u8; 20]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_pgm(&p).unwrap_err().to_string();
        assert!(err.contains("17 data bytes"), "{err}");
        assert!(err.contains("expected 20"), "{err}");
    }
}
