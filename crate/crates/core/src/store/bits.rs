use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Bytes needed for `numel` bits.
pub fn packed_len(numel: usize) -> usize {
    numel.div_ceil(8)
}

/// Element `j` goes to bit `j % 8` of byte `j / 8`; padding bits are zero.
pub fn pack_mask(mask: &BinaryMask) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(mask.numel())];
    for (j, &b) in mask.bits().iter().enumerate() {
        if b {
            out[j / 8] |= 1 << (j % 8);
        }
    }
    out
}

/// Inverse of [`pack_mask`] for a mask of the given shape.
pub fn unpack_mask(bytes: &[u8], shape: &[usize]) -> Result<BinaryMask> {
    let numel: usize = shape.iter().product();
    if bytes.len() != packed_len(numel) {
        return Err(Error::Truncated { expected: packed_len(numel), found: bytes.len() });
    }
    if !numel.is_multiple_of(8) {
        let used = numel % 8;
        if bytes[bytes.len() - 1] >> used != 0 {
            return Err(Error::CorruptPadding);
        }
    }
    let bits = (0..numel).map(|j| bytes[j / 8] >> (j % 8) & 1 == 1).collect();
    BinaryMask::new(shape, bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::new(&[bits.len()], bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn hand_packed_examples() {
        assert_eq!(pack_mask(&mask(&[1, 0, 1, 1, 0, 0, 0, 1])), vec![0x8D]);
        assert_eq!(pack_mask(&mask(&[0; 8])), vec![0x00]);
        assert_eq!(pack_mask(&mask(&[1, 1, 1])), vec![0x07]);
        assert_eq!(unpack_mask(&[0x8D], &[8]).unwrap(), mask(&[1, 0, 1, 1, 0, 0, 0, 1]));
    }

    #[test]
    fn padding_and_length_errors() {
        assert!(matches!(unpack_mask(&[0xFF], &[3]), Err(Error::CorruptPadding)));
        assert!(matches!(unpack_mask(&[0x07, 0x00], &[3]), Err(Error::Truncated { .. })));
        assert!(matches!(unpack_mask(&[], &[1]), Err(Error::Truncated { .. })));
        assert_eq!(unpack_mask(&[], &[0]).unwrap().numel(), 0);
    }

    #[test]
    fn keeps_shape() {
        let m = BinaryMask::new(&[2, 3], vec![true, false, false, true, true, false]).unwrap();
        assert_eq!(unpack_mask(&pack_mask(&m), &[2, 3]).unwrap(), m);
    }
}
