//! Append-only shards of compressed gradient records.
//!
//! The header's `record_count` is the committed count. Appends write whole
//! records first and bump the count afterwards, so an interrupted append
//! leaves bytes past the committed region that readers report as a partial
//! trailing record instead of silently using them.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::influence::CompressedGradient;
use crate::store::sizes;

pub const SHARD_MAGIC: &[u8; 4] = b"DMIN";
pub const SHARD_VERSION: u16 = 1;
const COUNT_OFFSET: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub version: u16,
    pub dim: u32,
    pub steps: u16,
    pub record_count: u64,
}

impl ShardHeader {
    pub fn to_bytes(&self) -> [u8; 20] {
        let mut b = [0u8; 20];
        b[..4].copy_from_slice(SHARD_MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6..10].copy_from_slice(&self.dim.to_le_bytes());
        b[10..12].copy_from_slice(&self.steps.to_le_bytes());
        b[12..20].copy_from_slice(&self.record_count.to_le_bytes());
        b
    }

    pub fn parse(b: &[u8; 20], path: &Path) -> Result<Self> {
        if &b[..4] != SHARD_MAGIC {
            return Err(Error::format(path, 0, format!("bad shard magic {:?}", &b[..4])));
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != SHARD_VERSION {
            return Err(Error::format(
                path,
                4,
                format!("unsupported shard version {version}"),
            ));
        }
        Ok(Self {
            version,
            dim: u32::from_le_bytes(b[6..10].try_into().unwrap()),
            steps: u16::from_le_bytes([b[10], b[11]]),
            record_count: u64::from_le_bytes(b[12..20].try_into().unwrap()),
        })
    }

    pub fn record_len(&self) -> u64 {
        sizes::record(self.steps as u64, self.dim as u64)
    }

    pub fn floats_per_record(&self) -> usize {
        self.steps as usize * self.dim as usize
    }

    /// Reads the header and checks the file length against the committed
    /// record count.
    pub fn read_checked(path: &Path) -> Result<Self> {
        let mut f = File::open(path)?;
        let len = f.metadata()?.len();
        let mut b = [0u8; 20];
        if len < sizes::SHARD_HEADER {
            return Err(Error::format(path, 0, "file shorter than the 20-byte shard header"));
        }
        f.read_exact(&mut b)?;
        let header = Self::parse(&b, path)?;
        header.check_length(path, len)?;
        Ok(header)
    }

    fn check_length(&self, path: &Path, len: u64) -> Result<()> {
        let rec = self.record_len();
        let expected = sizes::SHARD_HEADER + self.record_count * rec;
        if len < expected {
            let complete = (len - sizes::SHARD_HEADER) / rec;
            let offset = sizes::SHARD_HEADER + complete * rec;
            return Err(Error::integrity(
                path,
                offset,
                format!(
                    "record {complete} truncated: header commits {} records ({expected} bytes), file has {len}",
                    self.record_count
                ),
            ));
        }
        if len > expected {
            let extra = len - expected;
            let msg = if extra < rec {
                format!("partial trailing record of {extra} bytes")
            } else {
                format!("{extra} bytes of uncommitted records past the header count")
            };
            return Err(Error::integrity(path, expected, msg));
        }
        Ok(())
    }
}

/// Single writer for one shard file.
#[derive(Debug)]
pub struct ShardWriter {
    path: PathBuf,
    out: BufWriter<File>,
    header: ShardHeader,
}

impl ShardWriter {
    pub fn create(path: &Path, dim: usize, steps: usize) -> Result<Self> {
        let header = ShardHeader {
            version: SHARD_VERSION,
            dim: u32::try_from(dim)
                .map_err(|_| Error::InvalidConfig(format!("dimension {dim} exceeds u32")))?,
            steps: u16::try_from(steps)
                .map_err(|_| Error::InvalidConfig(format!("{steps} timesteps exceed u16")))?,
            record_count: 0,
        };
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&header.to_bytes())?;
        out.flush()?;
        Ok(Self {
            path: path.to_path_buf(),
            out,
            header,
        })
    }

    /// Reopens a sealed shard for further appends.
    pub fn open_append(path: &Path) -> Result<Self> {
        let header = ShardHeader::read_checked(path)?;
        let mut file = OpenOptions::new().read(true).write(true).open(path)?;
        file.seek(SeekFrom::End(0))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            header,
        })
    }

    pub fn header(&self) -> &ShardHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn byte_len(&self) -> u64 {
        sizes::SHARD_HEADER + self.header.record_count * self.header.record_len()
    }

    pub fn append_records<'a, I>(&mut self, records: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a CompressedGradient>,
    {
        let width = self.header.floats_per_record();
        let mut added = 0u64;
        for rec in records {
            if rec.sketches.len() != width {
                return Err(Error::Dimension {
                    expected: width,
                    got: rec.sketches.len(),
                });
            }
            self.out.write_all(&rec.sample_id.to_le_bytes())?;
            for v in &rec.sketches {
                self.out.write_all(&v.to_le_bytes())?;
            }
            added += 1;
        }
        if added == 0 {
            return Ok(());
        }
        self.out.flush()?;
        self.header.record_count += added;
        let file = self.out.get_mut();
        file.seek(SeekFrom::Start(COUNT_OFFSET))?;
        file.write_all(&self.header.record_count.to_le_bytes())?;
        file.seek(SeekFrom::End(0))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<ShardHeader> {
        self.out.flush()?;
        self.out.get_ref().sync_all()?;
        Ok(self.header)
    }
}

/// Streaming reader over a sealed shard; holds one record at a time.
#[derive(Debug)]
pub struct ShardReader {
    input: BufReader<File>,
    header: ShardHeader,
    next: u64,
    buf: Vec<u8>,
}

impl ShardReader {
    pub fn open(path: &Path) -> Result<Self> {
        let header = ShardHeader::read_checked(path)?;
        let mut input = BufReader::with_capacity(1 << 20, File::open(path)?);
        input.seek(SeekFrom::Start(sizes::SHARD_HEADER))?;
        Ok(Self {
            input,
            buf: vec![0u8; header.record_len() as usize],
            header,
            next: 0,
        })
    }

    pub fn header(&self) -> &ShardHeader {
        &self.header
    }

    fn read_record(&mut self) -> Result<CompressedGradient> {
        self.input.read_exact(&mut self.buf)?;
        let sample_id = u64::from_le_bytes(self.buf[..8].try_into().unwrap());
        let sketches = self.buf[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(CompressedGradient {
            sample_id,
            sketches,
            degenerate: false,
        })
    }
}

impl Iterator for ShardReader {
    type Item = Result<CompressedGradient>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.header.record_count {
            return None;
        }
        self.next += 1;
        Some(self.read_record())
    }
}

/// Visits every record in file order; returns the number visited.
pub fn stream_scan<F>(path: &Path, mut visitor: F) -> Result<u64>
where
    F: FnMut(CompressedGradient) -> Result<()>,
{
    let mut n = 0;
    for rec in ShardReader::open(path)? {
        visitor(rec?)?;
        n += 1;
    }
    Ok(n)
}
