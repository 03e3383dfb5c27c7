use mdmask::mask::{BinaryMask, MaskTransformConfig, Variant};
use mdmask::metrics::{score, ScoreSpec};
use mdmask::net::{add_domain, ArchSpec, Backbone};
use mdmask::store::{self, pack_mask, unpack_mask};
use proptest::prelude::*;

proptest! {
    #[test]
    fn pack_round_trip(bits in prop::collection::vec(any::<bool>(), 1..2000)) {
        let n = bits.len();
        let m = BinaryMask::new(&[n], bits).unwrap();
        let packed = pack_mask(&m);
        prop_assert_eq!(packed.len(), n.div_ceil(8));
        prop_assert_eq!(unpack_mask(&packed, &[n]).unwrap(), m);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
        let _ = store::decode_domain(&bytes);
        let _ = store::decode_backbone(&bytes);
    }

    #[test]
    fn score_decreases_with_error(e_max in 0.01f32..1.0, a in 0.0f32..1.0, b in 0.0f32..1.0) {
        let spec = ScoreSpec::new(vec![e_max]).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(score(&[lo], &spec).unwrap() >= score(&[hi], &spec).unwrap());
        prop_assert!(score(&[hi], &spec).unwrap() >= 0.0);
    }

    #[test]
    fn truncated_delta_is_rejected(cut in 0usize..1000) {
        let bb = Backbone::build(ArchSpec::smallnet(), 3).unwrap();
        let d = add_domain(&bb, "p", 4, MaskTransformConfig::new(Variant::Full), 4).unwrap();
        let bytes = store::encode_domain(&d).unwrap();
        let cut = cut % bytes.len();
        prop_assert!(store::decode_domain(&bytes[..cut]).is_err());
    }
}

#[test]
fn smallnet_digest_is_stable() {
    let bb = Backbone::build(ArchSpec::smallnet(), 7).unwrap();
    assert_eq!(bb.digest(), Backbone::build(ArchSpec::smallnet(), 7).unwrap().digest());
    assert_eq!(format!("{:016x}", bb.digest()), "c5bbc87941d7c271");
}
