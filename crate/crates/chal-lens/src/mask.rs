//! Label masks and binary masks.
//!
//! A [`LabelMask`] stores one 16-bit label per pixel (0 = background,
//! k >= 1 = instance k). The on-disk format is binary PGM (`P5`) with
//! maxval 65535 and big-endian samples: bit-exact, language-neutral and
//! readable by stock image tools. [`BitMask`] is the packed binary view
//! used by all overlap computations.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask dimensions must be positive, got {width}x{height}")]
    EmptyDimensions { width: usize, height: usize },
    #[error("label buffer has {got} entries, expected {expected} ({width}x{height})")]
    BufferSize {
        width: usize,
        height: usize,
        expected: usize,
        got: usize,
    },
    #[error("dimension mismatch: {w1}x{h1} vs {w2}x{h2}")]
    DimensionMismatch {
        w1: usize,
        h1: usize,
        w2: usize,
        h2: usize,
    },
    #[error("{path}: not a binary PGM (P5) file")]
    NotPgm { path: String },
    #[error("{path}: malformed PGM header: {reason}")]
    PgmHeader { path: String, reason: String },
    #[error("{path}: PGM payload truncated (expected {expected} bytes, got {got})")]
    PgmTruncated {
        path: String,
        expected: usize,
        got: usize,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// Dense 2-D grid of 16-bit instance labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    labels: Vec<u16>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, labels: Vec<u16>) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::EmptyDimensions { width, height });
        }
        if labels.len() != width * height {
            return Err(MaskError::BufferSize {
                width,
                height,
                expected: width * height,
                got: labels.len(),
            });
        }
        Ok(LabelMask {
            width,
            height,
            labels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self, MaskError> {
        Self::new(width, height, vec![0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u16) {
        self.labels[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &LabelMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Sorted list of distinct non-zero labels.
    pub fn distinct_labels(&self) -> Vec<u16> {
        let mut seen = [false; 1 << 16];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..=u16::MAX)
            .filter(|&l| seen[l as usize])
            .collect()
    }

    /// Binary view: every non-zero label becomes foreground.
    pub fn to_binary(&self) -> BitMask {
        let mut bits = BitMask::zeros(self.width, self.height);
        for (idx, &l) in self.labels.iter().enumerate() {
            if l != 0 {
                bits.set_index(idx);
            }
        }
        bits
    }

    /// Binary view of the pixels equal to `label`.
    pub fn label_mask(&self, label: u16) -> BitMask {
        let mut bits = BitMask::zeros(self.width, self.height);
        for (idx, &l) in self.labels.iter().enumerate() {
            if l == label {
                bits.set_index(idx);
            }
        }
        bits
    }

    pub fn read_pgm(path: &Path) -> Result<Self, MaskError> {
        let bytes = fs::read(path).map_err(|source| MaskError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_pgm(&bytes, &path.display().to_string())
    }

    pub fn parse_pgm(bytes: &[u8], path: &str) -> Result<Self, MaskError> {
        let mut cursor = 0usize;
        if bytes.len() < 2 || &bytes[0..2] != b"P5" {
            return Err(MaskError::NotPgm {
                path: path.to_string(),
            });
        }
        cursor += 2;
        let mut fields = [0usize; 3];
        for field in fields.iter_mut() {
            *field = read_pgm_int(bytes, &mut cursor, path)?;
        }
        let (width, height, maxval) = (fields[0], fields[1], fields[2]);
        if width == 0 || height == 0 {
            return Err(MaskError::EmptyDimensions { width, height });
        }
        if maxval == 0 || maxval > 65535 {
            return Err(MaskError::PgmHeader {
                path: path.to_string(),
                reason: format!("maxval {maxval} out of range"),
            });
        }
        // exactly one whitespace byte separates header and payload
        cursor += 1;
        let n = width * height;
        let two_byte = maxval > 255;
        let expected = if two_byte { 2 * n } else { n };
        let payload = &bytes[cursor.min(bytes.len())..];
        if payload.len() < expected {
            return Err(MaskError::PgmTruncated {
                path: path.to_string(),
                expected,
                got: payload.len(),
            });
        }
        let labels: Vec<u16> = if two_byte {
            payload[..expected]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        } else {
            payload[..expected].iter().map(|&b| b as u16).collect()
        };
        LabelMask::new(width, height, labels)
    }

    /// Writes the canonical 16-bit big-endian `P5` representation.
    pub fn write_pgm(&self, path: &Path) -> Result<(), MaskError> {
        let mut buf = Vec::with_capacity(32 + 2 * self.labels.len());
        write!(buf, "P5\n{} {}\n65535\n", self.width, self.height).expect("vec write");
        for &l in &self.labels {
            buf.extend_from_slice(&l.to_be_bytes());
        }
        fs::write(path, buf).map_err(|source| MaskError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn read_pgm_int(bytes: &[u8], cursor: &mut usize, path: &str) -> Result<usize, MaskError> {
    // skip whitespace and '#' comments
    loop {
        while *cursor < bytes.len() && bytes[*cursor].is_ascii_whitespace() {
            *cursor += 1;
        }
        if *cursor < bytes.len() && bytes[*cursor] == b'#' {
            while *cursor < bytes.len() && bytes[*cursor] != b'\n' {
                *cursor += 1;
            }
        } else {
            break;
        }
    }
    let start = *cursor;
    while *cursor < bytes.len() && bytes[*cursor].is_ascii_digit() {
        *cursor += 1;
    }
    if start == *cursor {
        return Err(MaskError::PgmHeader {
            path: path.to_string(),
            reason: "expected integer".to_string(),
        });
    }
    std::str::from_utf8(&bytes[start..*cursor])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| MaskError::PgmHeader {
            path: path.to_string(),
            reason: "unparseable integer".to_string(),
        })
}

/// Packed binary mask with cached foreground count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    width: usize,
    height: usize,
    words: Vec<u64>,
    ones: usize,
}

impl BitMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        BitMask {
            width,
            height,
            words: vec![0; n.div_ceil(64)],
            ones: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.ones
    }

    pub fn is_empty(&self) -> bool {
        self.ones == 0
    }

    pub fn same_shape(&self, other: &BitMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn get_index(&self, idx: usize) -> bool {
        self.words[idx / 64] >> (idx % 64) & 1 == 1
    }

    #[inline]
    pub fn set_index(&mut self, idx: usize) {
        let w = &mut self.words[idx / 64];
        let bit = 1u64 << (idx % 64);
        if *w & bit == 0 {
            *w |= bit;
            self.ones += 1;
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.get_index(y * self.width + x)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize) {
        self.set_index(y * self.width + x);
    }

    pub fn intersection_count(&self, other: &BitMask) -> usize {
        debug_assert!(self.same_shape(other));
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    /// Foreground pixels of `self` not covered by `other`.
    pub fn difference(&self, other: &BitMask) -> BitMask {
        debug_assert!(self.same_shape(other));
        let words: Vec<u64> = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| a & !b)
            .collect();
        let ones = words.iter().map(|w| w.count_ones() as usize).sum();
        BitMask {
            width: self.width,
            height: self.height,
            words,
            ones,
        }
    }

    pub fn union(&self, other: &BitMask) -> BitMask {
        debug_assert!(self.same_shape(other));
        let words: Vec<u64> = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| a | b)
            .collect();
        let ones = words.iter().map(|w| w.count_ones() as usize).sum();
        BitMask {
            width: self.width,
            height: self.height,
            words,
            ones,
        }
    }

    /// Iterates over foreground pixel indices in row-major order.
    pub fn iter_foreground(&self) -> impl Iterator<Item = usize> + '_ {
        let n = self.width * self.height;
        (0..n).filter(move |&i| self.get_index(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let mask = LabelMask::new(3, 2, vec![0, 1, 2, 0, 700, 65535]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        mask.write_pgm(&path).unwrap();
        let back = LabelMask::read_pgm(&path).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn pgm_with_comment() {
        let bytes = b"P5\n# a comment\n2 1\n255\n\x01\x00".to_vec();
        let mask = LabelMask::parse_pgm(&bytes, "test").unwrap();
        assert_eq!(mask.labels(), &[1, 0]);
    }

    #[test]
    fn pgm_rejects_truncation() {
        let bytes = b"P5\n2 2\n65535\n\x00\x01".to_vec();
        assert!(matches!(
            LabelMask::parse_pgm(&bytes, "t"),
            Err(MaskError::PgmTruncated { .. })
        ));
    }

    #[test]
    fn rejects_zero_dimensions() {
        assert!(LabelMask::new(0, 4, vec![]).is_err());
    }

    #[test]
    fn binary_views() {
        let mask = LabelMask::new(2, 2, vec![0, 3, 3, 7]).unwrap();
        let all = mask.to_binary();
        assert_eq!(all.count(), 3);
        let threes = mask.label_mask(3);
        assert_eq!(threes.count(), 2);
        assert_eq!(mask.distinct_labels(), vec![3, 7]);
        assert_eq!(threes.intersection_count(&all), 2);
    }

    #[test]
    fn bitmask_set_is_idempotent() {
        let mut m = BitMask::zeros(10, 10);
        m.set(3, 4);
        m.set(3, 4);
        assert_eq!(m.count(), 1);
    }
}
