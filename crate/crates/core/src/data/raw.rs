use std::path::Path;

use crate::error::{Error, Result};

use super::Split;

const MAGIC: &[u8; 4] = b"MDLD";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 2 + 2;

/// Serializes a split in the little-endian `MDLD` layout.
pub fn encode_raw(split: &Split, num_classes: usize) -> Result<Vec<u8>> {
    let narrow = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u16")))
    };
    let n = u32::try_from(split.len()).map_err(|_| Error::Format("too many items".into()))?;
    let px = split.height * split.width;
    let mut out = Vec::with_capacity(HEADER_LEN + split.len() * (2 + 4 * px));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&narrow(num_classes, "num_classes")?.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&narrow(split.height, "height")?.to_le_bytes());
    out.extend_from_slice(&narrow(split.width, "width")?.to_le_bytes());
    for i in 0..split.len() {
        let label = split.labels[i];
        if label >= num_classes {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        out.extend_from_slice(&(label as u16).to_le_bytes());
        for p in split.image(i) {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    Ok(out)
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

/// Parses an `MDLD` buffer, returning the split and its class count.
pub fn decode_raw(bytes: &[u8]) -> Result<(Split, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:02x?}", &bytes[..4])));
    }
    let version = u16_at(bytes, 4);
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let num_classes = u16_at(bytes, 6) as usize;
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let (height, width) = (u16_at(bytes, 12) as usize, u16_at(bytes, 14) as usize);
    let px = height * width;
    let expected = HEADER_LEN + n * (2 + 4 * px);
    if bytes.len() != expected {
        return Err(Error::Truncated { expected, found: bytes.len() });
    }
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * px);
    for rec in bytes[HEADER_LEN..].chunks_exact(2 + 4 * px) {
        let label = u16_at(rec, 0) as usize;
        if label >= num_classes {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        labels.push(label);
        for c in rec[2..].chunks_exact(4) {
            let p = f32::from_le_bytes(c.try_into().unwrap());
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Format(format!("pixel value {p} outside [0, 1]")));
            }
            pixels.push(p);
        }
    }
    Ok((Split { height, width, pixels, labels }, num_classes))
}

pub fn save_raw(split: &Split, num_classes: usize, path: &Path) -> Result<()> {
    std::fs::write(path, encode_raw(split, num_classes)?).map_err(|e| Error::io(path, e))
}

pub fn load_raw(path: &Path) -> Result<(Split, usize)> {
    decode_raw(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
