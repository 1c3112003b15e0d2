//! On-space record layout: `varint(key len) ‖ varint(value len) ‖ key ‖
//! value`, with base-128 varints.

pub fn varint_len(mut v: u64) -> usize {
    let mut n = 1;
    while v >= 0x80 {
        v >>= 7;
        n += 1;
    }
    n
}

pub fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

/// Returns the value and the bytes consumed, or `None` if `buf` ends
/// mid-varint or the varint is longer than 10 bytes.
pub fn get_varint(buf: &[u8]) -> Option<(u64, usize)> {
    let mut v = 0u64;
    for (i, &b) in buf.iter().enumerate().take(10) {
        v |= ((b & 0x7F) as u64) << (7 * i);
        if b & 0x80 == 0 {
            return Some((v, i + 1));
        }
    }
    None
}

pub fn encoded_len(key: &[u8], value: &[u8]) -> usize {
    varint_len(key.len() as u64) + varint_len(value.len() as u64) + key.len() + value.len()
}

pub fn encode(key: &[u8], value: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(key, value));
    put_varint(&mut out, key.len() as u64);
    put_varint(&mut out, value.len() as u64);
    out.extend_from_slice(key);
    out.extend_from_slice(value);
    out
}

/// Decodes one record at the start of `buf`: `(key, value, size)`.
pub fn decode(buf: &[u8]) -> Option<(&[u8], &[u8], usize)> {
    let (klen, a) = get_varint(buf)?;
    let (vlen, b) = get_varint(&buf[a..])?;
    let start = a + b;
    let kend = start.checked_add(klen as usize)?;
    let end = kend.checked_add(vlen as usize)?;
    if end > buf.len() {
        return None;
    }
    Some((&buf[start..kend], &buf[kend..end], end))
}

/// Decodes just the key of a record, given at least its header and key.
pub fn decode_key(buf: &[u8]) -> Option<&[u8]> {
    let (klen, a) = get_varint(buf)?;
    let (_, b) = get_varint(&buf[a..])?;
    let start = a + b;
    buf.get(start..start.checked_add(klen as usize)?)
}

/// Bytes needed to decode the key of a record whose header is in `buf`.
pub fn key_prefix_len(buf: &[u8]) -> Option<usize> {
    let (klen, a) = get_varint(buf)?;
    let (_, b) = get_varint(&buf[a..])?;
    Some(a + b + klen as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_record_layout() {
        let r = encode(b"cat", b"abcd");
        assert_eq!(r.len(), 9);
        assert_eq!(r, b"\x03\x04catabcd");
        assert_eq!(decode(&r), Some((&b"cat"[..], &b"abcd"[..], 9)));
        assert_eq!(decode_key(&r[..5]), Some(&b"cat"[..]));
        assert_eq!(decode(&r[..8]), None);
    }

    #[test]
    fn varint_boundaries() {
        for v in [0u64, 127, 128, 16383, 16384, u32::MAX as u64, u64::MAX] {
            let mut b = Vec::new();
            put_varint(&mut b, v);
            assert_eq!(b.len(), varint_len(v));
            assert_eq!(get_varint(&b), Some((v, b.len())));
        }
        assert_eq!(get_varint(&[0x80, 0x80]), None);
    }

    proptest! {
        #[test]
        fn roundtrip(key in prop::collection::vec(any::<u8>(), 1..300),
                     value in prop::collection::vec(any::<u8>(), 0..600)) {
            let r = encode(&key, &value);
            prop_assert_eq!(r.len(), encoded_len(&key, &value));
            let (k, v, n) = decode(&r).unwrap();
            prop_assert_eq!(k, &key[..]);
            prop_assert_eq!(v, &value[..]);
            prop_assert_eq!(n, r.len());
            prop_assert_eq!(key_prefix_len(&r), Some(r.len() - value.len()));
        }
    }
}
