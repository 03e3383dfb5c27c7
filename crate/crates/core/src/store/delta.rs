use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::{AffineScalars, Granularity, KPolicy, MaskTransformConfig, Scalar, Surrogate, Variant};
use crate::net::{Backbone, BnParams, Classifier, DomainParams, MaskState, MaskedLayer};
use crate::autograd::RunningStats;
use crate::tensor::Tensor;

use super::bits::{pack_mask, packed_len, unpack_mask};
use super::codec::{checked_body, header, Reader, Writer};

pub const DELTA_MAGIC: &[u8; 4] = b"MDMK";
pub const DELTA_VERSION: u16 = 1;

/// Byte ranges of the sections of an encoded domain delta.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeltaLayout {
    pub header: usize,
    /// Masks, learned scalars and batch norms.
    pub payload: usize,
    pub classifier: usize,
    pub footer: usize,
}

impl DeltaLayout {
    pub fn total(&self) -> usize {
        self.header + self.payload + self.classifier + self.footer
    }
}

fn write_policy(w: &mut Writer, p: KPolicy) {
    match p {
        KPolicy::Fixed(v) => {
            w.u8(0);
            w.f32(v);
        }
        KPolicy::Learned { init } => {
            w.u8(1);
            w.f32(init);
        }
    }
}

fn read_policy(r: &mut Reader<'_>) -> Result<KPolicy> {
    let kind = r.u8()?;
    let v = r.f32()?;
    match kind {
        0 => Ok(KPolicy::Fixed(v)),
        1 => Ok(KPolicy::Learned { init: v }),
        _ => Err(Error::Format(format!("unknown scalar policy kind {kind}"))),
    }
}

/// Serializes a domain in the `MDMK` layout. Real masks are stored binarized.
pub fn encode_domain(domain: &DomainParams) -> Result<Vec<u8>> {
    Ok(encode_with_layout(domain)?.0)
}

pub fn encode_with_layout(domain: &DomainParams) -> Result<(Vec<u8>, DeltaLayout)> {
    let mut payload = Writer::default();
    for layer in &domain.layers {
        payload.buf.extend(pack_mask(&layer.mask.binary()));
        if !domain.config.is_piggyback() {
            for t in layer.scalars.k.iter().filter_map(Scalar::learned) {
                payload.f32s(t.data());
            }
        }
    }
    for b in &domain.bn {
        payload.f32s(b.gamma.data());
        payload.f32s(b.beta.data());
        payload.f32s(&b.running.mean);
        payload.f32s(&b.running.var);
    }

    let mut w = Writer::default();
    w.buf.extend(DELTA_MAGIC);
    w.u16(DELTA_VERSION);
    w.u64(domain.backbone_digest);
    w.str(&domain.id)?;
    let cfg = domain.config;
    w.u8(cfg.variant.code());
    w.u8(cfg.surrogate.code());
    w.u8(cfg.granularity.code());
    for p in cfg.variant.policies() {
        write_policy(&mut w, p);
    }
    w.len_u16(domain.layers.len(), "masked layer count")?;
    for layer in &domain.layers {
        let shape = layer.mask.shape();
        w.u8(shape.len() as u8);
        for &d in shape {
            w.len_u32(d, "mask dimension")?;
        }
        for k in &layer.scalars.k {
            match k {
                Scalar::Fixed(v) => {
                    w.u8(0);
                    w.f32(*v);
                }
                Scalar::Learned(t) => {
                    w.u8(1);
                    w.len_u32(t.numel(), "scalar count")?;
                }
            }
        }
    }
    w.len_u16(domain.bn.len(), "batch-norm count")?;
    for b in &domain.bn {
        w.len_u32(b.channels(), "channels")?;
    }
    w.len_u16(domain.num_classes(), "class count")?;
    w.len_u32(payload.buf.len(), "payload length")?;
    let header = w.buf.len();
    w.buf.extend(&payload.buf);

    let head = &domain.head;
    w.len_u32(head.in_dim(), "classifier input")?;
    w.len_u32(head.num_classes(), "classifier output")?;
    w.f32s(head.weight.data());
    w.f32s(head.bias.data());
    let classifier = w.buf.len() - header - payload.buf.len();
    let layout = DeltaLayout { header, payload: payload.buf.len(), classifier, footer: 4 };
    Ok((w.finish(), layout))
}

struct LayerDesc {
    shape: Vec<usize>,
    k: [(u8, f32, usize); 4],
}

/// Parses an `MDMK` buffer without a backbone. The checksum is verified
/// first, then magic and version.
pub fn decode_domain(bytes: &[u8]) -> Result<DomainParams> {
    Ok(decode_with_layout(bytes)?.0)
}

pub fn decode_with_layout(bytes: &[u8]) -> Result<(DomainParams, DeltaLayout)> {
    let body = checked_body(bytes)?;
    let mut r = Reader::new(body);
    header(&mut r, DELTA_MAGIC, DELTA_VERSION)?;
    let digest = r.u64()?;
    let id = r.str()?;
    let (vcode, scode, gcode) = (r.u8()?, r.u8()?, r.u8()?);
    let policies = [read_policy(&mut r)?, read_policy(&mut r)?, read_policy(&mut r)?, read_policy(&mut r)?];
    let config = MaskTransformConfig {
        variant: Variant::from_code(vcode, policies)?,
        surrogate: Surrogate::from_code(scode)?,
        granularity: Granularity::from_code(gcode)?,
    };
    let n_layers = r.u16()? as usize;
    let mut descs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let mut k = [(0u8, 0f32, 0usize); 4];
        for slot in &mut k {
            *slot = match r.u8()? {
                0 => (0, r.f32()?, 0),
                1 => (1, 0.0, r.u32()? as usize),
                other => return Err(Error::Format(format!("unknown scalar kind {other}"))),
            };
        }
        descs.push(LayerDesc { shape, k });
    }
    let n_bn = r.u16()? as usize;
    let channels = (0..n_bn).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
    let num_classes = r.u16()? as usize;
    let payload_len = r.u32()? as usize;
    let header_len = r.pos();

    let mut layers = Vec::with_capacity(n_layers);
    for d in &descs {
        let numel: usize = d.shape.iter().product();
        let mask = unpack_mask(r.bytes(packed_len(numel))?, &d.shape)?;
        let mut k = Vec::with_capacity(4);
        for &(kind, value, count) in &d.k {
            k.push(if kind == 0 {
                Scalar::Fixed(value)
            } else {
                let shape: &[usize] = match config.granularity {
                    Granularity::PerLayer => &[],
                    Granularity::PerChannel => &[count],
                };
                Scalar::Learned(Tensor::new(shape, r.f32s(count)?)?)
            });
        }
        let k: [Scalar; 4] = k.try_into().expect("four scalars");
        layers.push(MaskedLayer {
            mask: MaskState::Binary(mask),
            scalars: AffineScalars { k, granularity: config.granularity },
        });
    }
    let mut bn = Vec::with_capacity(n_bn);
    for &c in &channels {
        bn.push(BnParams {
            gamma: Tensor::new(&[c], r.f32s(c)?)?,
            beta: Tensor::new(&[c], r.f32s(c)?)?,
            running: RunningStats { mean: r.f32s(c)?, var: r.f32s(c)? },
        });
    }
    if r.pos() - header_len != payload_len {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header declares {payload_len}",
            r.pos() - header_len
        )));
    }
    let in_dim = r.u32()? as usize;
    let out = r.u32()? as usize;
    if out != num_classes {
        return Err(Error::Format(format!("classifier has {out} outputs, header declares {num_classes}")));
    }
    let weight = Tensor::new(&[out, in_dim], r.f32s(out * in_dim)?)?;
    let bias = Tensor::new(&[out], r.f32s(out)?)?;
    let classifier_len = r.pos() - header_len - payload_len;
    r.expect_end()?;
    let domain = DomainParams { id, config, backbone_digest: digest, layers, bn, head: Classifier { weight, bias } };
    let layout = DeltaLayout { header: header_len, payload: payload_len, classifier: classifier_len, footer: 4 };
    Ok((domain, layout))
}

pub fn save_domain(domain: &DomainParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode_domain(domain)?).map_err(|e| Error::io(path, e))
}

/// Reads a delta and checks it against `backbone` (digest, then shapes).
pub fn load_domain(path: &Path, backbone: &Backbone) -> Result<DomainParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    attach_domain(decode_domain(&bytes)?, backbone)
}

pub(crate) fn attach_domain(domain: DomainParams, backbone: &Backbone) -> Result<DomainParams> {
    let found = backbone.digest();
    if domain.backbone_digest != found {
        return Err(Error::DigestMismatch { expected: domain.backbone_digest, found });
    }
    domain.validate(backbone)?;
    Ok(domain)
}
