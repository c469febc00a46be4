//! Binary container of named tensors, plus PGM export for eyeballing frames.
//!
//! Layout (all integers little-endian):
//! `b"HCTA0001"`, `u32` tensor count, then per tensor a `u32` name length,
//! UTF-8 name, `u32` rank, `u64` dims and row-major `f64` data.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HCTA0001";

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn encode_tensors(tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors).expect("writing to a Vec cannot fail");
    buf
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("tensor archive is truncated".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a tensor archive (bad magic)".into()));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

/// Binary PGM (P5) of a `[T×H×W]` stack laid out top to bottom, values in
/// `[0, 1]` mapped to `0..=255`. A `# frames T` comment records the stacking.
pub fn pgm_stack(frames: &Tensor) -> Result<Vec<u8>> {
    let &[t, h, w] = frames.shape() else {
        return Err(Error::Dimension(format!("PGM export needs [T×H×W], got {:?}", frames.shape())));
    };
    let mut out = format!("P5\n# frames {t}\n{w} {}\n255\n", t * h).into_bytes();
    out.extend(frames.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Inverse of [`pgm_stack`] up to 8-bit quantization. Without a
/// `# frames` comment the image is read as a single frame.
pub fn read_pgm_stack(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Format(format!("PGM: {m}"));
    let mut pos = 0;
    let mut frames: Option<usize> = None;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(bad("truncated header"));
        }
        if bytes[pos] == b'#' {
            let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| pos + e);
            let comment = std::str::from_utf8(&bytes[pos + 1..end]).unwrap_or("").trim();
            if let Some(n) = comment.strip_prefix("frames") {
                frames = Some(n.trim().parse().map_err(|_| bad("invalid frames comment"))?);
            }
            pos = end;
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary (P5) image"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("invalid header number"));
    let (w, rows, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = &bytes[(pos + 1).min(bytes.len())..];
    if data.len() != w * rows {
        return Err(bad(&format!("expected {} raster bytes, found {}", w * rows, data.len())));
    }
    let t = frames.unwrap_or(1);
    if t == 0 || rows % t != 0 {
        return Err(bad(&format!("{rows} rows do not split into {t} frames")));
    }
    Tensor::new(&[t, rows / t, w], data.iter().map(|&b| b as f64 / maxval as f64).collect())
}
