use std::path::Path;

use crate::autograd::RunningStats;
use crate::error::{Error, Result};
use crate::net::{ArchSpec, BaseModel, Backbone, BnParams, Classifier};
use crate::tensor::Tensor;

use super::codec::{checked_body, header, Reader, Writer};

pub const BACKBONE_MAGIC: &[u8; 4] = b"MDBB";
pub const BACKBONE_VERSION: u16 = 1;

/// Serializes a pretrained model: architecture, weights, batch norms and the
/// pretraining classifier.
pub fn encode_backbone(model: &BaseModel) -> Result<Vec<u8>> {
    let bb = &model.backbone;
    let mut w = Writer::default();
    w.buf.extend(BACKBONE_MAGIC);
    w.u16(BACKBONE_VERSION);
    w.u64(bb.digest());
    let arch = bb.arch().to_text();
    w.len_u32(arch.len(), "architecture text")?;
    w.buf.extend(arch.as_bytes());
    w.len_u16(bb.weights().len(), "weight count")?;
    for t in bb.weights() {
        w.tensor(t)?;
    }
    w.len_u16(bb.bn().len(), "batch-norm count")?;
    for b in bb.bn() {
        w.len_u32(b.channels(), "channels")?;
        w.f32s(b.gamma.data());
        w.f32s(b.beta.data());
        w.f32s(&b.running.mean);
        w.f32s(&b.running.var);
    }
    w.tensor(&model.head.weight)?;
    w.tensor(&model.head.bias)?;
    Ok(w.finish())
}

pub fn decode_backbone(bytes: &[u8]) -> Result<BaseModel> {
    let body = checked_body(bytes)?;
    let mut r = Reader::new(body);
    header(&mut r, BACKBONE_MAGIC, BACKBONE_VERSION)?;
    let digest = r.u64()?;
    let n = r.u32()? as usize;
    let text = std::str::from_utf8(r.bytes(n)?).map_err(|_| Error::Format("architecture is not UTF-8".into()))?;
    let arch = ArchSpec::parse(text)?;
    let weights = (0..r.u16()?).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let mut bn = Vec::new();
    for _ in 0..r.u16()? {
        let c = r.u32()? as usize;
        bn.push(BnParams {
            gamma: Tensor::new(&[c], r.f32s(c)?)?,
            beta: Tensor::new(&[c], r.f32s(c)?)?,
            running: RunningStats { mean: r.f32s(c)?, var: r.f32s(c)? },
        });
    }
    let head = Classifier { weight: r.tensor()?, bias: r.tensor()? };
    r.expect_end()?;
    let backbone = Backbone::from_parts(arch, weights, bn)?;
    let found = backbone.digest();
    if found != digest {
        return Err(Error::DigestMismatch { expected: digest, found });
    }
    if head.weight.rank() != 2 || head.weight.shape() != [head.num_classes(), backbone.feature_dim()] {
        return Err(Error::dim(format!("stored classifier {:?} does not fit the backbone", head.weight.shape())));
    }
    Ok(BaseModel { backbone, head })
}

pub fn save_backbone(model: &BaseModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_backbone(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_backbone(path: &Path) -> Result<BaseModel> {
    decode_backbone(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
