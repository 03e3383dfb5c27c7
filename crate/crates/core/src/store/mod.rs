//! Binary persistence: bit-packed masks, domain deltas (`MDMK`), backbone
//! checkpoints (`MDBB`) and real-mask resume files (`MDRM`).

mod bits;
mod checkpoint;
mod codec;
mod delta;
mod resume;

pub use bits::{pack_mask, packed_len, unpack_mask};
pub use checkpoint::{decode_backbone, encode_backbone, load_backbone, save_backbone, BACKBONE_MAGIC, BACKBONE_VERSION};
pub use delta::{
    decode_domain, decode_with_layout, encode_domain, encode_with_layout, load_domain, save_domain, DeltaLayout,
    DELTA_MAGIC, DELTA_VERSION,
};
pub use resume::{apply_real_masks, encode_real_masks, load_real_masks, save_real_masks, RESUME_MAGIC, RESUME_VERSION};

use crate::error::Result;
use crate::net::{Backbone, DomainParams};

/// Decodes a delta and checks it against `backbone`.
pub fn decode_domain_for(bytes: &[u8], backbone: &Backbone) -> Result<DomainParams> {
    delta::attach_domain(decode_domain(bytes)?, backbone)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::mask::{Granularity, MaskTransformConfig, RealMask, Variant};
    use crate::metrics::count_domain_bits;
    use crate::net::{add_domain, ArchSpec, BaseModel, MaskState};
    use crate::rng;
    use crate::tensor::Tensor;

    fn trained_like(variant: Variant, granularity: Granularity) -> (Backbone, DomainParams) {
        let bb = Backbone::build(ArchSpec::smallnet(), 5).unwrap();
        let cfg = MaskTransformConfig { granularity, ..MaskTransformConfig::new(variant) };
        let mut d = add_domain(&bb, "digits", 7, cfg, 6).unwrap();
        let mut r = rng::stream(42, 0);
        for layer in &mut d.layers {
            if let MaskState::Real(m) = &mut layer.mask {
                let n = m.values.numel();
                m.values = Tensor::new(m.shape(), rng::uniform_vec(&mut r, n, -1.0, 1.0)).unwrap();
            }
            for k in &mut layer.scalars.k {
                if let crate::mask::Scalar::Learned(t) = k {
                    let n = t.numel();
                    *t = Tensor::new(t.shape(), rng::uniform_vec(&mut r, n, -0.5, 1.5)).unwrap();
                }
            }
        }
        for b in &mut d.bn {
            let c = b.channels();
            b.gamma = Tensor::new(&[c], rng::uniform_vec(&mut r, c, 0.5, 1.5)).unwrap();
            b.running.var = rng::uniform_vec(&mut r, c, 0.5, 2.0);
        }
        (bb, d)
    }

    fn input() -> Tensor {
        let mut r = rng::stream(3, 3);
        Tensor::new(&[4, 1, 16, 16], rng::uniform_vec(&mut r, 4 * 256, 0.0, 1.0)).unwrap()
    }

    #[test]
    fn delta_round_trip_is_bit_exact() {
        for (v, g) in [
            (Variant::Full, Granularity::PerLayer),
            (Variant::Full, Granularity::PerChannel),
            (Variant::Simple, Granularity::PerLayer),
            (Variant::Piggyback, Granularity::PerLayer),
        ] {
            let (bb, d) = trained_like(v, g);
            let bytes = encode_domain(&d).unwrap();
            let back = decode_domain_for(&bytes, &bb).unwrap();
            assert!(back.layers.iter().all(|l| matches!(l.mask, MaskState::Binary(_))));
            assert_eq!(back.binary_masks(), d.binary_masks());
            let (a, b) = (d.predict(&bb, &input()).unwrap(), back.predict(&bb, &input()).unwrap());
            assert!(a.bit_eq(&b), "{v} {g}");
            assert_eq!(encode_domain(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn payload_bits_equal_domain_bits() {
        for (v, g) in [
            (Variant::Full, Granularity::PerLayer),
            (Variant::Full, Granularity::PerChannel),
            (Variant::Simple, Granularity::PerLayer),
            (Variant::Piggyback, Granularity::PerLayer),
        ] {
            let (_, d) = trained_like(v, g);
            let (bytes, layout) = encode_with_layout(&d).unwrap();
            assert_eq!(layout.total(), bytes.len());
            assert_eq!(8 * layout.payload as u64, count_domain_bits(&d), "{v} {g}");
            assert_eq!(decode_with_layout(&bytes).unwrap().1, layout);
        }
    }

    #[test]
    fn wrong_backbone_is_rejected() {
        let (_, d) = trained_like(Variant::Full, Granularity::PerLayer);
        let other = Backbone::build(ArchSpec::smallnet(), 99).unwrap();
        let err = decode_domain_for(&encode_domain(&d).unwrap(), &other).unwrap_err();
        assert!(matches!(err, Error::DigestMismatch { .. }));
    }

    #[test]
    fn corruption_is_detected() {
        let (_, d) = trained_like(Variant::Full, Granularity::PerLayer);
        let bytes = encode_domain(&d).unwrap();
        let mut flipped = bytes.clone();
        flipped[100] ^= 0x10;
        assert!(matches!(decode_domain(&flipped), Err(Error::Checksum { .. })));
        assert!(decode_domain(&bytes[..bytes.len() - 1]).is_err());
        assert!(matches!(decode_domain(&bytes[..2]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn unsupported_version() {
        let (_, d) = trained_like(Variant::Full, Granularity::PerLayer);
        let mut bytes = encode_domain(&d).unwrap();
        bytes[4] = 9;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_domain(&bytes), Err(Error::Version(9))));
        bytes[0] = b'X';
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_domain(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn backbone_checkpoint_round_trip() {
        let mut m = BaseModel::build(ArchSpec::smallnet(), 4, 8).unwrap();
        m.backbone.bn_mut(1).running.mean[3] = 0.25;
        let bytes = encode_backbone(&m).unwrap();
        let back = decode_backbone(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.backbone.digest(), m.backbone.digest());
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(matches!(decode_backbone(&bad), Err(Error::Checksum { .. })));
    }

    #[test]
    fn files_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (bb, d) = trained_like(Variant::Full, Granularity::PerLayer);
        let delta = dir.path().join("d.mdmk");
        let resume = dir.path().join("d.mdrm");
        save_domain(&d, &delta).unwrap();
        save_real_masks(&d, &resume).unwrap();
        let mut back = load_domain(&delta, &bb).unwrap();
        load_real_masks(&mut back, &resume).unwrap();
        assert_eq!(back, d);
        assert!(matches!(load_domain(&dir.path().join("missing"), &bb), Err(Error::Io { .. })));
    }

    #[test]
    fn resume_rejects_mismatched_masks() {
        let (_, d) = trained_like(Variant::Full, Granularity::PerLayer);
        let bytes = encode_real_masks(&d).unwrap();
        let mut other = d.clone();
        if let MaskState::Real(RealMask { values }) = &mut other.layers[0].mask {
            values.data_mut()[0] = if values.data()[0] >= 0.0 { -1.0 } else { 1.0 };
        }
        other.freeze_masks();
        assert!(apply_real_masks(&mut other, &bytes).is_err());
    }
}
