use crate::error::{Error, Result};

/// Bytes needed for `count` codes of `bits` bits each.
pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Packs codes contiguously, least-significant bit first. Codes must fit in `bits`.
pub fn pack_bits(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    if bits == 8 {
        return Ok(codes.to_vec());
    }
    let limit = 1u16 << bits;
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mut acc: u32 = 0;
    let mut filled = 0u32;
    let mut pos = 0;
    for (i, &c) in codes.iter().enumerate() {
        if c as u16 >= limit {
            return Err(Error::Internal(format!(
                "code {c} at position {i} does not fit in {bits} bits"
            )));
        }
        acc |= (c as u32) << filled;
        filled += bits as u32;
        while filled >= 8 {
            out[pos] = acc as u8;
            pos += 1;
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out[pos] = acc as u8;
    }
    Ok(out)
}

/// Inverse of [`pack_bits`]. The byte count must be exactly `packed_len(count, bits)`.
pub fn unpack_bits(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let expected = packed_len(count, bits);
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "packed payload has {} bytes, expected {expected} for {count} codes at {bits} bits",
            bytes.len()
        )));
    }
    if bits == 8 {
        return Ok(bytes.to_vec());
    }
    let mask = (1u32 << bits) - 1;
    let mut out = Vec::with_capacity(count);
    let mut acc: u32 = 0;
    let mut filled = 0u32;
    let mut src = bytes.iter();
    for _ in 0..count {
        while filled < bits as u32 {
            acc |= (*src.next().expect("length checked") as u32) << filled;
            filled += 8;
        }
        out.push((acc & mask) as u8);
        acc >>= bits;
        filled -= bits as u32;
    }
    Ok(out)
}

fn check_bits(bits: u8) -> Result<()> {
    if (1..=8).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!("bit width {bits} outside 1..=8")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn eight_bit_is_passthrough() {
        let codes = [0, 7, 255, 128];
        assert_eq!(pack_bits(&codes, 8).unwrap(), codes);
    }

    #[test]
    fn four_bit_size() {
        let p = pack_bits(&[1, 2, 3], 4).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p, [0x21, 0x03]);
        assert_eq!(unpack_bits(&p, 4, 3).unwrap(), [1, 2, 3]);
    }

    #[test]
    fn overflow_is_internal_error() {
        assert!(matches!(pack_bits(&[4], 2), Err(Error::Internal(_))));
    }

    #[test]
    fn wrong_length_is_format_error() {
        assert!(matches!(unpack_bits(&[0, 0], 4, 5), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip(bits in 2u8..=8, raw in proptest::collection::vec(any::<u8>(), 0..200)) {
            let codes: Vec<u8> = raw.iter().map(|c| (*c as u16 % (1u16 << bits)) as u8).collect();
            let p = pack_bits(&codes, bits).unwrap();
            prop_assert_eq!(p.len(), packed_len(codes.len(), bits));
            prop_assert_eq!(unpack_bits(&p, bits, codes.len()).unwrap(), codes);
        }
    }
}
