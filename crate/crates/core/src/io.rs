//! On-disk formats: TSR1 tensors, CKPT parameter bundles, PGM/PPM images.
//!
//! TSR1 layout (all integers little-endian):
//!
//! ```text
//! "TSR1" | u8 dtype (0 = f32, 1 = f64) | u32 rank | rank × u32 extent | row-major scalars
//! ```
//!
//! CKPT layout: `"CKPT" | u32 count | count × (u16 name_len | UTF-8 name | TSR1 blob)`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

const TSR_MAGIC: &[u8; 4] = b"TSR1";
const CKPT_MAGIC: &[u8; 4] = b"CKPT";

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * t.rank() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(TSR_MAGIC);
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "unexpected end of data at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode_tensor_from<T: Scalar>(r: &mut Reader<'_>) -> Result<Tensor<T>> {
    if r.take(4)? != TSR_MAGIC {
        return Err(Error::Format("missing TSR1 magic".into()));
    }
    let tag = r.u8()?;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
    let rank = r.u32()? as usize;
    let shape = (0..rank)
        .map(|_| r.u32().map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel: usize = shape.iter().product();
    let bytes = r.take(numel * dtype.size())?;
    let data: Vec<T> = match dtype {
        d if d == T::DTYPE => bytes.chunks_exact(d.size()).map(T::read_le).collect(),
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::read_le(c)))
            .collect(),
    };
    Tensor::from_vec(shape, data)
}

/// Decodes a TSR1 blob, converting the stored scalars to `T`.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let t = decode_tensor_from(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(t)
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_tensor(&fs::read(path)?)
}

pub fn encode_checkpoint<T: Scalar>(entries: &BTreeMap<String, Tensor<T>>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&encode_tensor(t));
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::Format("missing CKPT magic".into()));
    }
    let count = r.u32()?;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Format(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let t = decode_tensor_from(&mut r)?;
        if entries.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate checkpoint entry {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(entries)
}

/// Writes through a temporary sibling and renames, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// 16-bit binary PGM of a `h×w` grid, scaled so the grid maximum maps to 65535.
/// Negative values clamp to 0; an all-zero grid encodes as all zeros.
pub fn encode_pgm16(grid: &[f64], h: usize, w: usize) -> Vec<u8> {
    assert_eq!(grid.len(), h * w, "grid size does not match {h}×{w}");
    let max = grid.iter().copied().fold(0.0f64, f64::max);
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in grid {
        let level = if max > 0.0 {
            ((v.max(0.0) / max) * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}

/// Decodes a 16-bit P5 PGM into `(width, height, levels)`.
pub fn decode_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let (header, body) = split_header(bytes, 4)?;
    if header[0] != "P5" || header[3] != "65535" {
        return Err(Error::Format("not a 16-bit P5 PGM".into()));
    }
    let w: usize = header[1].parse().map_err(|_| Error::Format("bad PGM width".into()))?;
    let h: usize = header[2].parse().map_err(|_| Error::Format("bad PGM height".into()))?;
    if body.len() != 2 * w * h {
        return Err(Error::Format("PGM body size mismatch".into()));
    }
    let levels = body
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((w, h, levels))
}

/// 8-bit binary PPM from packed RGB triples.
pub fn encode_ppm(rgb: &[[u8; 3]], h: usize, w: usize) -> Vec<u8> {
    assert_eq!(rgb.len(), h * w, "pixel count does not match {h}×{w}");
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for px in rgb {
        out.extend_from_slice(px);
    }
    out
}

fn split_header(bytes: &[u8], fields: usize) -> Result<(Vec<String>, &[u8])> {
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < fields {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated image header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((tokens, &bytes[(pos + 1).min(bytes.len())..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tsr1_header_layout() {
        let t = Tensor::<f32>::from_vec(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"TSR1");
        assert_eq!(b[4], 0);
        assert_eq!(&b[5..9], &2u32.to_le_bytes());
        assert_eq!(&b[9..13], &2u32.to_le_bytes());
        assert_eq!(&b[13..17], &1u32.to_le_bytes());
        assert_eq!(&b[17..21], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 25);
    }

    #[test]
    fn truncated_and_foreign_blobs_are_rejected() {
        let t = Tensor::<f64>::ones(&[3]);
        let b = encode_tensor(&t);
        assert!(decode_tensor::<f64>(&b[..b.len() - 1]).is_err());
        assert!(decode_tensor::<f64>(b"TSR2\0\0\0\0\0").is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode_tensor::<f64>(&extra).is_err());
    }

    #[test]
    fn pgm_max_maps_to_full_scale() {
        let bytes = encode_pgm16(&[0.0, 0.5, 2.0, 1.0], 2, 2);
        let (w, h, levels) = decode_pgm16(&bytes).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(levels, vec![0, 16384, 65535, 32768]);
    }

    #[test]
    fn ppm_header_and_size() {
        let bytes = encode_ppm(&[[1, 2, 3], [4, 5, 6]], 1, 2);
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
    }

    proptest! {
        #[test]
        fn checkpoint_roundtrip_is_bitwise(
            values in proptest::collection::vec(any::<f32>(), 1..40),
            names in proptest::collection::btree_set("[a-z0-9.]{1,24}", 1..5),
        ) {
            let mut entries = BTreeMap::new();
            for (i, n) in names.iter().enumerate() {
                let v: Vec<f32> = values.iter().map(|x| x + i as f32).collect();
                entries.insert(n.clone(), Tensor::from_vec(vec![v.len()], v).unwrap());
            }
            let bytes = encode_checkpoint(&entries).unwrap();
            let back: BTreeMap<String, Tensor<f32>> = decode_checkpoint(&bytes).unwrap();
            prop_assert_eq!(back.len(), entries.len());
            for (k, t) in &entries {
                let b = &back[k];
                prop_assert_eq!(b.shape(), t.shape());
                let same = b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                prop_assert!(same);
            }
            prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        }
    }
}
