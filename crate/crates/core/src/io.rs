//! Shared machinery for the little-endian binary artifact formats.
//!
//! Every format follows the same frame: a 4-byte magic, a u16 version, a
//! payload whose size is computable from the header counts, and a trailing
//! 8-byte FNV-1a checksum over all preceding bytes. Loaders check, in order:
//! magic, version, declared size (truncation reports the byte offset where
//! data ran out), checksum, then field-level consistency.

use crate::hash::fnv1a;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u16, found: u16 },
    #[error("truncated file: {what} at byte offset {offset} (expected {expected} bytes total)")]
    Truncated {
        offset: u64,
        expected: u64,
        what: &'static str,
    },
    #[error("checksum mismatch at byte offset {offset}: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum {
        offset: u64,
        stored: u64,
        computed: u64,
    },
    #[error("inconsistent {what}: {detail}")]
    Inconsistent { what: &'static str, detail: String },
}

/// Append the FNV-1a checksum of `bytes` to itself, completing a file image.
pub fn seal(mut bytes: Vec<u8>) -> Vec<u8> {
    let sum = fnv1a(&bytes);
    bytes.extend_from_slice(&sum.to_le_bytes());
    bytes
}

/// Validate the frame of a file image: magic, version, declared payload size,
/// and trailing checksum. Returns the payload (everything between the version
/// field and the checksum).
///
/// `payload_len` receives the bytes after magic+version (checksum excluded)
/// and returns the expected payload length once the header counts are known.
pub fn open_frame<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    version: u16,
    payload_len: impl FnOnce(&'a [u8]) -> Result<u64, FormatError>,
) -> Result<&'a [u8], FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            offset: bytes.len() as u64,
            expected: 14,
            what: "magic",
        });
    }
    let found: [u8; 4] = bytes[0..4].try_into().expect("length checked");
    if &found != magic {
        return Err(FormatError::BadMagic {
            expected: *magic,
            found,
        });
    }
    if bytes.len() < 6 {
        return Err(FormatError::Truncated {
            offset: bytes.len() as u64,
            expected: 14,
            what: "version",
        });
    }
    let found_version = u16::from_le_bytes(bytes[4..6].try_into().expect("length checked"));
    if found_version != version {
        return Err(FormatError::Version {
            expected: version,
            found: found_version,
        });
    }
    let payload = &bytes[6..];
    let want_payload = payload_len(payload)?;
    let expected_total = 6 + want_payload + 8;
    if (bytes.len() as u64) < expected_total {
        return Err(FormatError::Truncated {
            offset: bytes.len() as u64,
            expected: expected_total,
            what: "payload",
        });
    }
    if bytes.len() as u64 > expected_total {
        return Err(FormatError::Inconsistent {
            what: "file size",
            detail: format!(
                "{} trailing bytes after checksum",
                bytes.len() as u64 - expected_total
            ),
        });
    }
    let checksum_offset = (expected_total - 8) as usize;
    let stored = u64::from_le_bytes(
        bytes[checksum_offset..checksum_offset + 8]
            .try_into()
            .expect("length checked"),
    );
    let computed = fnv1a(&bytes[..checksum_offset]);
    if stored != computed {
        return Err(FormatError::Checksum {
            offset: checksum_offset as u64,
            stored,
            computed,
        });
    }
    Ok(&bytes[6..checksum_offset])
}

/// Cursor over a validated payload with typed little-endian reads.
pub struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    base_offset: u64,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        // Payload starts after magic (4) + version (2).
        Self {
            bytes,
            pos: 0,
            base_offset: 6,
        }
    }

    pub fn offset(&self) -> u64 {
        self.base_offset + self.pos as u64
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.bytes.len() {
            return Err(FormatError::Truncated {
                offset: self.offset(),
                expected: self.base_offset + self.bytes.len() as u64 + 8,
                what,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f32(&mut self, what: &'static str) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &'static str) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f32_vec(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>, FormatError> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f64_vec(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, FormatError> {
        let raw = self.take(8 * n, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn skip(&mut self, n: usize, what: &'static str) -> Result<(), FormatError> {
        self.take(n, what)?;
        Ok(())
    }

    pub fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Read a count field out of a payload prefix while computing expected sizes.
pub fn peek_u32(payload: &[u8], at: usize, what: &'static str) -> Result<u32, FormatError> {
    if at + 4 > payload.len() {
        return Err(FormatError::Truncated {
            offset: 6 + payload.len() as u64,
            expected: 6 + (at + 4) as u64 + 8,
            what,
        });
    }
    Ok(u32::from_le_bytes(payload[at..at + 4].try_into().unwrap()))
}

pub fn peek_u64(payload: &[u8], at: usize, what: &'static str) -> Result<u64, FormatError> {
    if at + 8 > payload.len() {
        return Err(FormatError::Truncated {
            offset: 6 + payload.len() as u64,
            expected: 6 + (at + 8) as u64 + 8,
            what,
        });
    }
    Ok(u64::from_le_bytes(payload[at..at + 8].try_into().unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 4] = b"TEST";

    fn sample_file() -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes()); // count
        bytes.extend_from_slice(&[10, 20, 30]); // payload items
        seal(bytes)
    }

    fn open(bytes: &[u8]) -> Result<&[u8], FormatError> {
        open_frame(bytes, MAGIC, 1, |p| {
            let n = peek_u32(p, 0, "count")?;
            Ok(4 + u64::from(n))
        })
    }

    #[test]
    fn round_trip() {
        let file = sample_file();
        let payload = open(&file).unwrap();
        assert_eq!(payload, &[3, 0, 0, 0, 10, 20, 30]);
    }

    #[test]
    fn bad_magic() {
        let mut file = sample_file();
        file[0] = b'X';
        assert!(matches!(open(&file), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn version_mismatch() {
        let mut file = sample_file();
        file[4] = 9;
        assert!(matches!(
            open(&file),
            Err(FormatError::Version { found: 9, .. })
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let file = sample_file();
        let cut = &file[..file.len() - 10];
        match open(cut) {
            Err(FormatError::Truncated { offset, .. }) => {
                assert_eq!(offset, cut.len() as u64)
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn checksum_flip_detected() {
        let mut file = sample_file();
        let idx = 10; // a payload item, so the declared size stays intact
        file[idx] ^= 0xff;
        assert!(matches!(open(&file), Err(FormatError::Checksum { .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut file = sample_file();
        file.push(0);
        assert!(matches!(open(&file), Err(FormatError::Inconsistent { .. })));
    }

    #[test]
    fn cursor_reads_and_truncation() {
        let payload = [1u8, 0, 0, 0, 0x9a, 0x99, 0x99, 0x3f];
        let mut c = Cursor::new(&payload);
        assert_eq!(c.u32("n").unwrap(), 1);
        let f = c.f32("x").unwrap();
        assert!((f - 1.2).abs() < 1e-6);
        assert!(c.done());
        assert!(matches!(
            c.u8("extra"),
            Err(FormatError::Truncated { offset: 14, .. })
        ));
    }
}
