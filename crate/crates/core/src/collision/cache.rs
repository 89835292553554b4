//! Binary container for assembled collision matrices.
//!
//! One file holds one dense row-major `f64` matrix plus the parameters it was
//! assembled under. Layout, all little-endian:
//!
//! ```text
//! magic           10 bytes  "PKIN-KMAT\0"
//! format version  u32
//! gamma           f64
//! v_max           f64
//! n_per_axis      u32
//! m_cutoff        f64
//! samples_per_row u64
//! seed            u64
//! payload         (n_per_axis^3)^2 * 8 bytes, row-major f64
//! checksum        u32, CRC-32 of the payload bytes
//! ```
//!
//! Readers validate magic, version, payload size, and checksum, and refuse
//! mismatched parameter headers; a cutoff-split model is stored as two such
//! files (one per part) with identical headers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::Error;
use crate::Result;

pub const MAGIC: [u8; 10] = *b"PKIN-KMAT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Assembly parameters stored alongside the payload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelHeader {
    pub gamma: f64,
    pub v_max: f64,
    pub n_per_axis: u32,
    pub m_cutoff: f64,
    pub samples_per_row: u64,
    pub seed: u64,
}

impl KernelHeader {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(56);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.gamma.to_le_bytes());
        out.extend_from_slice(&self.v_max.to_le_bytes());
        out.extend_from_slice(&self.n_per_axis.to_le_bytes());
        out.extend_from_slice(&self.m_cutoff.to_le_bytes());
        out.extend_from_slice(&self.samples_per_row.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out
    }

    /// Matrix dimension implied by the grid: `n_per_axis^3` velocity nodes.
    pub fn matrix_dim(&self) -> usize {
        let n = self.n_per_axis as usize;
        n * n * n
    }

    /// Stable file-name stem encoding every parameter.
    pub fn file_stem(&self) -> String {
        fn num(x: f64) -> String {
            let mut s = format!("{x}");
            s = s.replace('-', "neg").replace('.', "p");
            s
        }
        format!(
            "kin-g{}-v{}-n{}-m{}-b{}-s{}",
            num(self.gamma),
            num(self.v_max),
            self.n_per_axis,
            num(self.m_cutoff),
            self.samples_per_row,
            self.seed
        )
    }
}

/// Table-driven CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
pub struct Crc32 {
    table: [u32; 256],
    state: u32,
}

impl Crc32 {
    pub fn new() -> Self {
        let mut table = [0u32; 256];
        for (i, slot) in table.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *slot = c;
        }
        Crc32 { table, state: 0xFFFF_FFFF }
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.state = self.table[((self.state ^ u32::from(b)) & 0xFF) as usize] ^ (self.state >> 8);
        }
    }

    pub fn finish(&self) -> u32 {
        self.state ^ 0xFFFF_FFFF
    }
}

impl Default for Crc32 {
    fn default() -> Self {
        Self::new()
    }
}

/// Writes one matrix with its header and payload checksum.
pub fn write_matrix(path: &Path, header: &KernelHeader, data: &[f64]) -> Result<()> {
    let dim = header.matrix_dim();
    if data.len() != dim * dim {
        return Err(Error::Dimension {
            context: "kernel cache payload",
            expected: dim * dim,
            got: data.len(),
        });
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&header.encode())?;
    let mut crc = Crc32::new();
    let mut buf = Vec::with_capacity(8192);
    for chunk in data.chunks(1024) {
        buf.clear();
        for &x in chunk {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        crc.update(&buf);
        w.write_all(&buf)?;
    }
    w.write_all(&crc.finish().to_le_bytes())?;
    w.flush()?;
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::CacheFormat(format!("truncated while reading {what}: {e}")))
}

/// Reads one matrix back, validating structure and checksum. When `expect` is
/// given, the stored header must match it exactly.
pub fn read_matrix(path: &Path, expect: Option<&KernelHeader>) -> Result<(KernelHeader, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 10];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::CacheFormat(format!(
            "bad magic in {}: {:?}",
            path.display(),
            magic
        )));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    read_exact_or(&mut r, &mut b4, "format version")?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(Error::CacheFormat(format!(
            "unsupported format version {version} (supported: {FORMAT_VERSION})"
        )));
    }
    read_exact_or(&mut r, &mut b8, "gamma")?;
    let gamma = f64::from_le_bytes(b8);
    read_exact_or(&mut r, &mut b8, "v_max")?;
    let v_max = f64::from_le_bytes(b8);
    read_exact_or(&mut r, &mut b4, "n_per_axis")?;
    let n_per_axis = u32::from_le_bytes(b4);
    read_exact_or(&mut r, &mut b8, "m_cutoff")?;
    let m_cutoff = f64::from_le_bytes(b8);
    read_exact_or(&mut r, &mut b8, "samples_per_row")?;
    let samples_per_row = u64::from_le_bytes(b8);
    read_exact_or(&mut r, &mut b8, "seed")?;
    let seed = u64::from_le_bytes(b8);
    let header = KernelHeader {
        gamma,
        v_max,
        n_per_axis,
        m_cutoff,
        samples_per_row,
        seed,
    };
    if let Some(e) = expect {
        if header != *e {
            return Err(Error::CacheFormat(format!(
                "header mismatch in {}: stored {header:?}, requested {e:?}",
                path.display()
            )));
        }
    }
    let dim = header.matrix_dim();
    let total = dim
        .checked_mul(dim)
        .ok_or_else(|| Error::CacheFormat(format!("matrix dimension overflow (n={n_per_axis})")))?;
    let mut data = Vec::with_capacity(total);
    let mut crc = Crc32::new();
    let mut buf = vec![0u8; 8192];
    let mut remaining = total * 8;
    while remaining > 0 {
        let take = remaining.min(buf.len());
        read_exact_or(&mut r, &mut buf[..take], "payload")?;
        crc.update(&buf[..take]);
        for chunk in buf[..take].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        remaining -= take;
    }
    read_exact_or(&mut r, &mut b4, "checksum")?;
    let stored = u32::from_le_bytes(b4);
    let computed = crc.finish();
    if stored != computed {
        return Err(Error::CacheFormat(format!(
            "checksum mismatch in {}: stored {stored:#010x}, computed {computed:#010x}",
            path.display()
        )));
    }
    // The payload must be followed by end-of-file.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::CacheFormat(format!(
            "trailing bytes after checksum in {}",
            path.display()
        )));
    }
    Ok((header, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("pkin-cache-test-{}-{name}", std::process::id()));
        p
    }

    fn header() -> KernelHeader {
        KernelHeader {
            gamma: -1.0,
            v_max: 3.0,
            n_per_axis: 2,
            m_cutoff: 0.25,
            samples_per_row: 77,
            seed: 0xDEAD_BEEF,
        }
    }

    #[test]
    fn crc32_matches_the_standard_check_value() {
        let mut crc = Crc32::new();
        crc.update(b"123456789");
        assert_eq!(crc.finish(), 0xCBF4_3926);
    }

    #[test]
    fn round_trip_preserves_everything() {
        let h = header();
        let dim = h.matrix_dim();
        let data: Vec<f64> = (0..dim * dim).map(|i| (i as f64).sin() * 1e3).collect();
        let path = tmp("roundtrip.kmat");
        write_matrix(&path, &h, &data).unwrap();
        let (h2, data2) = read_matrix(&path, Some(&h)).unwrap();
        assert_eq!(h, h2);
        assert_eq!(data, data2, "payload must round-trip bit-exactly");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn corruption_and_mismatch_are_detected() {
        let h = header();
        let dim = h.matrix_dim();
        let data: Vec<f64> = (0..dim * dim).map(|i| i as f64).collect();
        let path = tmp("corrupt.kmat");
        write_matrix(&path, &h, &data).unwrap();

        // Flip one payload byte: checksum must catch it.
        let mut bytes = std::fs::read(&path).unwrap();
        let payload_start = 56;
        bytes[payload_start + 11] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_matrix(&path, None).unwrap_err();
        assert!(matches!(err, Error::CacheFormat(ref m) if m.contains("checksum")), "{err}");

        // Truncation must be reported as such.
        bytes[payload_start + 11] ^= 0x40;
        bytes.truncate(bytes.len() - 7);
        std::fs::write(&path, &bytes).unwrap();
        let err = read_matrix(&path, None).unwrap_err();
        assert!(matches!(err, Error::CacheFormat(ref m) if m.contains("truncated")), "{err}");

        // Wrong magic.
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = read_matrix(&path, None).unwrap_err();
        assert!(matches!(err, Error::CacheFormat(ref m) if m.contains("magic")), "{err}");

        // Parameter mismatch against the requested header.
        std::fs::remove_file(&path).ok();
        write_matrix(&path, &h, &data).unwrap();
        let mut other = h;
        other.seed += 1;
        let err = read_matrix(&path, Some(&other)).unwrap_err();
        assert!(matches!(err, Error::CacheFormat(ref m) if m.contains("mismatch")), "{err}");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn file_stem_encodes_parameters_readably() {
        let stem = header().file_stem();
        assert_eq!(stem, "kin-gneg1-v3-n2-m0p25-b77-s3735928559");
    }
}
