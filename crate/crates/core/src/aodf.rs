//! AODF v1 container for fields and masks.
//!
//! Little-endian layout:
//!
//! | bytes  | content                                   |
//! |--------|-------------------------------------------|
//! | 0..4   | magic `AODF`                              |
//! | 4..8   | version `u32` = 1                         |
//! | 8..12  | `n_time` `u32`                            |
//! | 12..16 | `height` `u32`                            |
//! | 16..20 | `width` `u32`                             |
//! | 20..24 | payload kind `u32` (0 = f32 field, 1 = u8 mask) |
//! | 24..   | payload in row-major (t, i, j) order      |
//!
//! Fields are stored as `f32`; values round-trip bit-exactly when they are
//! representable in single precision.

use std::fs;
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec, MaskField};

pub const MAGIC: [u8; 4] = *b"AODF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum PayloadKind {
    Field = 0,
    Mask = 1,
}

/// Parsed AODF header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub n_time: usize,
    pub height: usize,
    pub width: usize,
    pub kind: PayloadKind,
}

impl Header {
    fn len(&self) -> usize {
        self.n_time * self.height * self.width
    }
}

fn header_bytes(h: &Header) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&MAGIC);
    for v in [VERSION, h.n_time as u32, h.height as u32, h.width as u32, h.kind as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap())
}

/// Parse the header of an in-memory AODF image.
pub fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, format!("file is {} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::format(path, format!("bad magic {:02x?}", &bytes[0..4])));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let kind = match u32_at(bytes, 20) {
        0 => PayloadKind::Field,
        1 => PayloadKind::Mask,
        k => return Err(Error::format(path, format!("unknown payload kind {k}"))),
    };
    let h = Header {
        n_time: u32_at(bytes, 8) as usize,
        height: u32_at(bytes, 12) as usize,
        width: u32_at(bytes, 16) as usize,
        kind,
    };
    let elem = if kind == PayloadKind::Field { 4 } else { 1 };
    let want = h.len() * elem;
    let got = bytes.len() - HEADER_LEN;
    if got != want {
        return Err(Error::format(path, format!("payload is {got} bytes, header implies {want}")));
    }
    Ok(h)
}

pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(&bytes, path)
}

pub fn encode_field(x: &Field) -> Vec<u8> {
    let (n_time, height, width) = x.spec().shape();
    let mut out = header_bytes(&Header { n_time, height, width, kind: PayloadKind::Field });
    out.reserve(x.spec().len() * 4);
    for &v in x.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn encode_mask(m: &MaskField) -> Vec<u8> {
    let (n_time, height, width) = m.spec().shape();
    let mut out = header_bytes(&Header { n_time, height, width, kind: PayloadKind::Mask });
    out.extend_from_slice(m.as_slice());
    out
}

pub fn decode_field(bytes: &[u8], path: &Path) -> Result<Field> {
    let h = parse_header(bytes, path)?;
    if h.kind != PayloadKind::Field {
        return Err(Error::format(path, "expected a field payload, found a mask"));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let spec = GridSpec::derived(h.n_time, h.height, h.width, 1.0).map_err(|e| Error::format(path, e.to_string()))?;
    let values = Array3::from_shape_vec(spec.shape(), data).map_err(|e| Error::format(path, e.to_string()))?;
    Field::new(spec, values).map_err(|e| Error::format(path, e.to_string()))
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<MaskField> {
    let h = parse_header(bytes, path)?;
    if h.kind != PayloadKind::Mask {
        return Err(Error::format(path, "expected a mask payload, found a field"));
    }
    let spec = GridSpec::derived(h.n_time, h.height, h.width, 1.0).map_err(|e| Error::format(path, e.to_string()))?;
    let flags = Array3::from_shape_vec(spec.shape(), bytes[HEADER_LEN..].to_vec())
        .map_err(|e| Error::format(path, e.to_string()))?;
    MaskField::new(spec, flags).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_field(x: &Field, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_field(x)).map_err(|e| Error::io(path, e))
}

pub fn read_field(path: impl AsRef<Path>) -> Result<Field> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_field(&bytes, path)
}

pub fn write_mask(m: &MaskField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask(m)).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<MaskField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn header_layout() {
        let f = Field::zeros(GridSpec::new(2, 4, 5).unwrap());
        let b = encode_field(&f);
        assert_eq!(&b[0..4], &[0x41, 0x4F, 0x44, 0x46]);
        assert_eq!(u32_at(&b, 4), 1);
        assert_eq!((u32_at(&b, 8), u32_at(&b, 12), u32_at(&b, 16), u32_at(&b, 20)), (2, 4, 5, 0));
        assert_eq!(b.len(), 24 + 2 * 4 * 5 * 4);
    }

    #[test]
    fn wrong_magic() {
        let mut b = encode_field(&Field::zeros(GridSpec::new(1, 4, 4).unwrap()));
        b[0] = b'X';
        assert!(matches!(decode_field(&b, p()), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_payload() {
        let b = encode_field(&Field::zeros(GridSpec::new(1, 4, 4).unwrap()));
        assert!(matches!(decode_field(&b[..b.len() - 3], p()), Err(Error::Format { .. })));
        assert!(matches!(decode_field(&b[..10], p()), Err(Error::Format { .. })));
    }

    #[test]
    fn kind_mismatch() {
        let m = MaskField::ones(GridSpec::new(1, 4, 4).unwrap());
        assert!(decode_field(&encode_mask(&m), p()).is_err());
        assert_eq!(decode_mask(&encode_mask(&m), p()).unwrap(), m);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GridSpec::new(2, 4, 4).unwrap();
        let f = Field::from_vec(spec, (0..32).map(|i| i as f64 * 0.25).collect()).unwrap();
        let path = dir.path().join("f.aodf");
        write_field(&f, &path).unwrap();
        assert_eq!(read_field(&path).unwrap().as_slice(), f.as_slice());
        assert!(read_field(dir.path().join("missing.aodf")).is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_for_f32_values(vals in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 48)) {
            let spec = GridSpec::new(3, 4, 4).unwrap();
            let f = Field::from_vec(spec, vals.iter().map(|&v| v as f64).collect()).unwrap();
            let back = decode_field(&encode_field(&f), p()).unwrap();
            for (a, b) in back.as_slice().iter().zip(&vals) {
                prop_assert_eq!((*a as f32).to_bits(), b.to_bits());
            }
        }
    }
}
