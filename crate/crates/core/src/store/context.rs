use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sketch::{Permutation, SignVector, SketchConfig, SketchContext};
use crate::store::{Manifest, PERM_FILE, SIGN_FILE};

const PERM_MAGIC: &[u8; 4] = b"DMPM";
const SIGN_MAGIC: &[u8; 4] = b"DMSG";
const IO_CHUNK: usize = 1 << 16;

/// Writes `perm.bin` and `signs.bin` into `dir`.
pub fn write_context(ctx: &SketchContext, dir: &Path) -> Result<()> {
    let l_pad = ctx.config().padded_len as u64;

    let mut w = BufWriter::new(File::create(dir.join(PERM_FILE))?);
    w.write_all(PERM_MAGIC)?;
    w.write_all(&l_pad.to_le_bytes())?;
    for ix in ctx.permutation().indices() {
        w.write_all(&ix.to_le_bytes())?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join(SIGN_FILE))?);
    w.write_all(SIGN_MAGIC)?;
    w.write_all(&l_pad.to_le_bytes())?;
    w.write_all(ctx.signs().as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Reads the context files of a cache and checks them against its manifest.
pub fn read_context(dir: &Path, manifest: &Manifest) -> Result<SketchContext> {
    let config = SketchConfig::new(manifest.param_count, manifest.target_dim, manifest.sketch_seed)?;
    if config.padded_len != manifest.padded_len {
        return Err(Error::CacheIncompatible(format!(
            "manifest padded_len {} disagrees with computed {}",
            manifest.padded_len, config.padded_len
        )));
    }
    let perm = read_permutation(&dir.join(PERM_FILE))?;
    let signs = read_signs(&dir.join(SIGN_FILE))?;
    SketchContext::from_parts(config, perm, signs)
        .map_err(|e| Error::CacheIncompatible(format!("context files: {e}")))
}

fn read_header(r: &mut impl Read, path: &Path, magic: &[u8; 4]) -> Result<u64> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)
        .map_err(|_| Error::format(path, 0, "file shorter than its 12-byte header"))?;
    if &head[..4] != magic {
        return Err(Error::format(
            path,
            0,
            format!("bad magic {:?}, expected {:?}", &head[..4], magic),
        ));
    }
    Ok(u64::from_le_bytes(head[4..12].try_into().unwrap()))
}

fn check_length(path: &Path, expected: u64) -> Result<()> {
    let actual = std::fs::metadata(path)?.len();
    if actual != expected {
        return Err(Error::format(
            path,
            actual.min(expected),
            format!("file is {actual} bytes, layout requires {expected}"),
        ));
    }
    Ok(())
}

pub fn read_permutation(path: &Path) -> Result<Permutation> {
    let mut r = BufReader::new(File::open(path)?);
    let l_pad = read_header(&mut r, path, PERM_MAGIC)?;
    check_length(path, super::sizes::perm_file(l_pad))?;
    let mut indices = Vec::with_capacity(l_pad as usize);
    let mut buf = vec![0u8; IO_CHUNK * 4];
    let mut remaining = l_pad as usize;
    while remaining > 0 {
        let n = remaining.min(IO_CHUNK);
        r.read_exact(&mut buf[..n * 4])?;
        indices.extend(
            buf[..n * 4]
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap())),
        );
        remaining -= n;
    }
    Permutation::from_indices(indices).map_err(|e| Error::format(path, 12, e.to_string()))
}

pub fn read_signs(path: &Path) -> Result<SignVector> {
    let mut r = BufReader::new(File::open(path)?);
    let l_pad = read_header(&mut r, path, SIGN_MAGIC)?;
    check_length(path, super::sizes::sign_file(l_pad))?;
    let mut bytes = vec![0u8; super::sizes::sign_payload(l_pad) as usize];
    r.read_exact(&mut bytes)?;
    SignVector::from_bytes(l_pad as usize, bytes)
}
