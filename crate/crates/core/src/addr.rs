//! Address ranges and hex formatting shared by every module.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Size of the 32-bit physical address space.
pub const ADDRESS_SPACE: u64 = 1 << 32;

/// A half-open byte range `[base, base + size)` in the 32-bit address space.
///
/// `size` is 64-bit so the whole 4 GB space is representable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AddrRange {
    #[serde(with = "hex32")]
    pub base: u32,
    #[serde(with = "hex64")]
    pub size: u64,
}

impl AddrRange {
    pub const fn new(base: u32, size: u64) -> Self {
        AddrRange { base, size }
    }

    /// Inclusive-bounds constructor, `[first, last]`.
    pub const fn inclusive(first: u32, last: u32) -> Self {
        AddrRange { base: first, size: last as u64 - first as u64 + 1 }
    }

    /// One past the last byte, as a 64-bit value.
    pub fn end(&self) -> u64 {
        self.base as u64 + self.size
    }

    pub fn last(&self) -> Option<u32> {
        if self.size == 0 {
            None
        } else {
            Some((self.end() - 1) as u32)
        }
    }

    pub fn contains(&self, addr: u32) -> bool {
        let a = addr as u64;
        a >= self.base as u64 && a < self.end()
    }

    pub fn contains_range(&self, other: &AddrRange) -> bool {
        other.base as u64 >= self.base as u64 && other.end() <= self.end()
    }

    pub fn overlaps(&self, other: &AddrRange) -> bool {
        self.size > 0 && other.size > 0 && (self.base as u64) < other.end() && (other.base as u64) < self.end()
    }

    pub fn fits_address_space(&self) -> bool {
        self.end() <= ADDRESS_SPACE
    }

    /// Every address in the range at the given stride, starting at `base`.
    pub fn addresses(&self, stride: u32) -> impl Iterator<Item = u32> + '_ {
        let stride = stride.max(1) as u64;
        (self.base as u64..self.end()).step_by(stride as usize).map(|a| a as u32)
    }
}

impl fmt::Display for AddrRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.last() {
            Some(last) => write!(f, "{:#010x}-{:#010x}", self.base, last),
            None => write!(f, "{:#010x}+0", self.base),
        }
    }
}

/// Parses `0x`-prefixed hex or plain decimal.
pub fn parse_u64(text: &str) -> Option<u64> {
    let t = text.trim().replace('_', "");
    if let Some(h) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        u64::from_str_radix(h, 16).ok()
    } else {
        t.parse().ok()
    }
}

/// Human-readable byte count, `32 KB` style when it divides evenly.
pub fn format_size(bytes: u64) -> String {
    const KB: u64 = 1024;
    const MB: u64 = 1024 * KB;
    const GB: u64 = 1024 * MB;
    match bytes {
        b if b >= GB && b % GB == 0 => format!("{} GB", b / GB),
        b if b >= MB && b % MB == 0 => format!("{} MB", b / MB),
        b if b >= KB && b % KB == 0 => format!("{} KB", b / KB),
        b => format!("{b} bytes"),
    }
}

/// Serde adapters writing addresses as `0x`-prefixed hex strings. Integers are
/// accepted on input too.
macro_rules! hex_serde {
    ($name:ident, $ty:ty, $width:expr) => {
        pub mod $name {
            use serde::de::{self, Deserializer, Visitor};
            use serde::Serializer;
            use std::fmt;

            pub fn serialize<S: Serializer>(v: &$ty, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&format!("{:#0w$x}", v, w = $width))
            }

            pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<$ty, D::Error> {
                struct V;
                impl<'de> Visitor<'de> for V {
                    type Value = $ty;
                    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                        f.write_str("an integer or a 0x-prefixed hex string")
                    }
                    fn visit_i64<E: de::Error>(self, v: i64) -> Result<$ty, E> {
                        <$ty>::try_from(v).map_err(|_| E::custom(format!("{v} out of range")))
                    }
                    fn visit_u64<E: de::Error>(self, v: u64) -> Result<$ty, E> {
                        <$ty>::try_from(v).map_err(|_| E::custom(format!("{v} out of range")))
                    }
                    fn visit_str<E: de::Error>(self, v: &str) -> Result<$ty, E> {
                        let n = super::parse_u64(v).ok_or_else(|| E::custom(format!("invalid number `{v}`")))?;
                        <$ty>::try_from(n).map_err(|_| E::custom(format!("{v} out of range")))
                    }
                }
                d.deserialize_any(V)
            }
        }
    };
}

hex_serde!(hex32, u32, 10);
hex_serde!(hex64, u64, 10);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inclusive_and_end() {
        let r = AddrRange::inclusive(0xE000_1000, 0xE000_1FFF);
        assert_eq!(r.size, 0x1000);
        assert_eq!(r.end(), 0xE000_2000);
        assert!(r.contains(0xE000_1FFF));
        assert!(!r.contains(0xE000_2000));
    }

    #[test]
    fn whole_space() {
        let r = AddrRange::new(0, ADDRESS_SPACE);
        assert!(r.contains(u32::MAX));
        assert!(r.fits_address_space());
        assert_eq!(r.last(), Some(u32::MAX));
    }

    #[test]
    fn sizes() {
        assert_eq!(format_size(128 * 1024), "128 KB");
        assert_eq!(format_size(100), "100 bytes");
        assert_eq!(parse_u64("0x0800_0000"), Some(0x0800_0000));
        assert_eq!(parse_u64("4096"), Some(4096));
    }
}
