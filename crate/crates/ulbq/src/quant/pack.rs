//! Bit-packing of integer codes.
//!
//! Codes of `bits` width each are laid out LSB-first in a contiguous byte
//! stream: the first code occupies the lowest `bits` bits of byte 0, the
//! next code the bits above it, spilling into the following byte as needed.
//! The stream holds exactly `ceil(n * bits / 8)` bytes; slack bits in the
//! final byte are zero.

use crate::error::{Error, Result};

/// Number of bytes a packed stream of `n` codes occupies.
pub fn packed_len(n: usize, bits: u8) -> usize {
    (n * bits as usize).div_ceil(8)
}

/// Pack codes into an LSB-first bit stream.
///
/// Panics if any code does not fit in `bits` bits — codes come from our own
/// quantizers, which clamp to the representable range.
pub fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    let limit = crate::quant::qmax(bits) as u8;
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mut bit = 0usize;
    for &c in codes {
        assert!(c <= limit, "code {c} exceeds {bits}-bit range");
        let byte = bit / 8;
        let off = bit % 8;
        out[byte] |= c << off;
        if off + bits as usize > 8 {
            out[byte + 1] |= c >> (8 - off);
        }
        bit += bits as usize;
    }
    out
}

/// Unpack `n` codes from an LSB-first bit stream.
///
/// The stream length must match `n` exactly; anything else means the byte
/// stream and the shape it claims to carry disagree.
pub fn unpack_codes(bytes: &[u8], bits: u8, n: usize) -> Result<Vec<u8>> {
    let expect = packed_len(n, bits);
    if bytes.len() != expect {
        return Err(Error::corrupt(format!(
            "packed stream is {} bytes but {n} codes at {bits} bits need {expect}",
            bytes.len()
        )));
    }
    let mask = crate::quant::qmax(bits) as u16;
    let mut out = Vec::with_capacity(n);
    let mut bit = 0usize;
    for _ in 0..n {
        let byte = bit / 8;
        let off = bit % 8;
        let mut v = (bytes[byte] as u16) >> off;
        if off + bits as usize > 8 {
            v |= (bytes[byte + 1] as u16) << (8 - off);
        }
        out.push((v & mask) as u8);
        bit += bits as usize;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_two_bit_codes_pack_into_four_bytes() {
        let codes: Vec<u8> = (0..16).map(|i| (i % 4) as u8).collect();
        let packed = pack_codes(&codes, 2);
        assert_eq!(packed.len(), 4);
        // 0,1,2,3 LSB-first per byte: 0b11_10_01_00
        assert_eq!(packed, vec![0b1110_0100; 4]);
        assert_eq!(unpack_codes(&packed, 2, 16).unwrap(), codes);
    }

    #[test]
    fn three_bit_codes_straddle_byte_boundaries() {
        let codes = vec![0b101u8, 0b011, 0b110, 0b001, 0b111];
        let packed = pack_codes(&codes, 3);
        assert_eq!(packed.len(), 2); // 15 bits
        assert_eq!(unpack_codes(&packed, 3, 5).unwrap(), codes);
    }

    #[test]
    fn empty_stream_packs_to_nothing() {
        assert_eq!(pack_codes(&[], 4), Vec::<u8>::new());
        assert_eq!(unpack_codes(&[], 4, 0).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn wrong_length_is_rejected() {
        let packed = pack_codes(&[1, 2, 3], 4);
        assert_eq!(packed.len(), 2);
        assert!(unpack_codes(&packed, 4, 5).is_err(), "five codes need three bytes");
        assert!(unpack_codes(&packed[..1], 4, 3).is_err(), "truncated stream");
    }

    #[test]
    #[should_panic(expected = "exceeds")]
    fn oversized_code_panics() {
        pack_codes(&[4], 2);
    }
}
