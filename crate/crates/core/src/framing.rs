//! Append-only record framing shared by queue logs and the repository journal.
//!
//! Each record is `len: u32 LE | payload | crc32(payload): u32 LE`.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

const HEADER: usize = 4;
const TRAILER: usize = 4;

/// Upper bound on a single record; larger lengths are treated as corruption.
pub const MAX_RECORD: usize = 16 * 1024 * 1024;

pub fn encode(payload: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER + payload.len() + TRAILER);
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.extend_from_slice(payload);
    buf.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    buf
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SkipReason {
    BadChecksum,
    Truncated,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Skipped {
    pub offset: u64,
    pub reason: SkipReason,
}

#[derive(Debug, Default)]
pub struct Scan {
    pub records: Vec<(u64, Vec<u8>)>,
    pub skipped: Vec<Skipped>,
    /// Byte offset just past the last intact frame; anything after it is an
    /// unreadable tail.
    pub valid_len: u64,
}

/// Splits a byte buffer into frames. Frames with a bad checksum are skipped;
/// a frame running past the end of the buffer ends the scan.
pub fn scan(bytes: &[u8]) -> Scan {
    let mut out = Scan::default();
    let mut pos = 0usize;
    while pos < bytes.len() {
        let offset = pos as u64;
        if bytes.len() - pos < HEADER {
            out.skipped.push(Skipped { offset, reason: SkipReason::Truncated });
            break;
        }
        let len = u32::from_le_bytes(bytes[pos..pos + HEADER].try_into().unwrap()) as usize;
        if len > MAX_RECORD || bytes.len() - pos - HEADER < len + TRAILER {
            out.skipped.push(Skipped { offset, reason: SkipReason::Truncated });
            break;
        }
        let body = &bytes[pos + HEADER..pos + HEADER + len];
        let crc_at = pos + HEADER + len;
        let crc = u32::from_le_bytes(bytes[crc_at..crc_at + TRAILER].try_into().unwrap());
        pos = crc_at + TRAILER;
        out.valid_len = pos as u64;
        if crc32fast::hash(body) == crc {
            out.records.push((offset, body.to_vec()));
        } else {
            out.skipped.push(Skipped { offset, reason: SkipReason::BadChecksum });
        }
    }
    out
}

/// An append-only framed log file.
#[derive(Debug)]
pub struct LogFile {
    path: PathBuf,
    file: File,
    sync: bool,
}

impl LogFile {
    pub fn create(path: &Path, sync: bool) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { path: path.to_path_buf(), file, sync })
    }

    /// Reads every frame, cutting off an unreadable tail so later appends
    /// land on a clean boundary.
    pub fn open_and_scan(path: &Path, sync: bool) -> io::Result<(Self, Scan)> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let scan = scan(&bytes);
        if scan.valid_len < bytes.len() as u64 {
            OpenOptions::new().write(true).open(path)?.set_len(scan.valid_len)?;
        }
        let log = Self::create(path, sync)?;
        Ok((log, scan))
    }

    pub fn append(&mut self, payload: &[u8]) -> io::Result<()> {
        self.file.write_all(&encode(payload))?;
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
