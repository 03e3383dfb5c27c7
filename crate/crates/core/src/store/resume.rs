use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::{binarize, RealMask};
use crate::net::{DomainParams, MaskState};

use super::codec::{checked_body, header, Reader, Writer};

pub const RESUME_MAGIC: &[u8; 4] = b"MDRM";
pub const RESUME_VERSION: u16 = 1;

/// Serializes the real-valued masks of a domain that is still training.
pub fn encode_real_masks(domain: &DomainParams) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.buf.extend(RESUME_MAGIC);
    w.u16(RESUME_VERSION);
    w.u64(domain.backbone_digest);
    w.str(&domain.id)?;
    w.len_u16(domain.layers.len(), "masked layer count")?;
    for (i, layer) in domain.layers.iter().enumerate() {
        match &layer.mask {
            MaskState::Real(r) => w.tensor(&r.values)?,
            MaskState::Binary(_) => {
                return Err(Error::Config(format!("layer {i} has no real-valued mask to save")))
            }
        }
    }
    Ok(w.finish())
}

/// Restores real-valued masks into a domain loaded from its delta. The real
/// masks must binarize to the domain's current masks.
pub fn apply_real_masks(domain: &mut DomainParams, bytes: &[u8]) -> Result<()> {
    let body = checked_body(bytes)?;
    let mut r = Reader::new(body);
    header(&mut r, RESUME_MAGIC, RESUME_VERSION)?;
    let digest = r.u64()?;
    if digest != domain.backbone_digest {
        return Err(Error::DigestMismatch { expected: digest, found: domain.backbone_digest });
    }
    let id = r.str()?;
    if id != domain.id {
        return Err(Error::Format(format!("resume file belongs to domain {id:?}, not {:?}", domain.id)));
    }
    let n = r.u16()? as usize;
    if n != domain.layers.len() {
        return Err(Error::Format(format!("{n} masks stored, domain has {} masked layers", domain.layers.len())));
    }
    let masks = (0..n).map(|_| r.tensor().map(|values| RealMask { values })).collect::<Result<Vec<_>>>()?;
    r.expect_end()?;
    for (i, (layer, real)) in domain.layers.iter().zip(&masks).enumerate() {
        if real.shape() != layer.mask.shape() || binarize(real) != layer.mask.binary() {
            return Err(Error::Format(format!("stored real mask of layer {i} does not match the domain")));
        }
    }
    for (layer, real) in domain.layers.iter_mut().zip(masks) {
        layer.mask = MaskState::Real(real);
    }
    Ok(())
}

pub fn save_real_masks(domain: &DomainParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode_real_masks(domain)?).map_err(|e| Error::io(path, e))
}

pub fn load_real_masks(domain: &mut DomainParams, path: &Path) -> Result<()> {
    apply_real_masks(domain, &std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
