use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::diffusion::DataPoint;
use crate::influence::{
    score_compressed, CompressedGradient, GradientSetup, InfluenceRecord, QuerySketches,
    ScaleConstants,
};
use crate::sketch::SketchContext;
use crate::store::context::{read_context, read_permutation, read_signs, write_context};
use crate::store::shard::{ShardHeader, ShardReader, ShardWriter};
use crate::store::{shard_file_name, sizes, Manifest, MANIFEST_FILE, PERM_FILE, SIGN_FILE};

/// Shards roll over once they would exceed this many bytes.
pub const DEFAULT_SHARD_LIMIT: u64 = 1 << 30;

/// Builds a cache directory: context files up front, shards as records
/// arrive, the manifest last.
#[derive(Debug)]
pub struct CacheWriter {
    dir: PathBuf,
    dim: usize,
    steps: usize,
    shard_limit: u64,
    current: ShardWriter,
    shard_count: usize,
    sample_count: u64,
    degenerate: Vec<u64>,
}

impl CacheWriter {
    /// Creates `dir` if needed and clears any previous cache in it.
    pub fn create(dir: &Path, ctx: &SketchContext, steps: usize) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let manifest = dir.join(MANIFEST_FILE);
        if manifest.exists() {
            fs::remove_file(manifest)?;
        }
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.starts_with("shard-") && name.ends_with(".bin") {
                fs::remove_file(&path)?;
            }
        }
        write_context(ctx, dir)?;
        let dim = ctx.config().target_dim;
        let current = ShardWriter::create(&dir.join(shard_file_name(0)), dim, steps)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            dim,
            steps,
            shard_limit: DEFAULT_SHARD_LIMIT,
            current,
            shard_count: 1,
            sample_count: 0,
            degenerate: Vec::new(),
        })
    }

    pub fn with_shard_limit(mut self, bytes: u64) -> Self {
        self.shard_limit = bytes;
        self
    }

    pub fn append(&mut self, records: &[CompressedGradient]) -> Result<()> {
        let rec_len = sizes::record(self.steps as u64, self.dim as u64);
        let mut start = 0;
        while start < records.len() {
            let room = if self.current.header().record_count == 0 {
                1
            } else {
                self.shard_limit.saturating_sub(self.current.byte_len()) / rec_len
            };
            if room == 0 {
                self.roll()?;
                continue;
            }
            let end = records.len().min(start + room as usize);
            let batch = &records[start..end];
            self.current.append_records(batch)?;
            self.sample_count += batch.len() as u64;
            self.degenerate
                .extend(batch.iter().filter(|r| r.degenerate).map(|r| r.sample_id));
            start = end;
        }
        Ok(())
    }

    fn roll(&mut self) -> Result<()> {
        let path = self.dir.join(shard_file_name(self.shard_count));
        let next = ShardWriter::create(&path, self.dim, self.steps)?;
        std::mem::replace(&mut self.current, next).finish()?;
        self.shard_count += 1;
        Ok(())
    }

    /// Seals the last shard and writes the manifest, filling in the counts
    /// and degenerate ids.
    pub fn finish(self, mut manifest: Manifest) -> Result<Manifest> {
        self.current.finish()?;
        manifest.sample_count = self.sample_count;
        manifest.shard_count = self.shard_count;
        manifest.degenerate_ids = self.degenerate;
        if manifest.record_width() != self.steps * self.dim {
            return Err(Error::CacheIncompatible(format!(
                "manifest describes {} floats per record, shards hold {}",
                manifest.record_width(),
                self.steps * self.dim
            )));
        }
        manifest.write(&self.dir)?;
        Ok(manifest)
    }
}

/// Samples whose sketches are computed together before being appended.
const WRITE_CHUNK: usize = 256;

/// Computes, compresses and stores the gradients of `data` (ids are
/// positions) into a fresh cache at `dir`.
pub fn write_cache(
    dir: &Path,
    setup: &GradientSetup<'_>,
    ctx: &SketchContext,
    data: &[DataPoint],
    scale: ScaleConstants,
) -> Result<Manifest> {
    let manifest = Manifest::describe(setup, ctx, scale);
    let mut writer = CacheWriter::create(dir, ctx, setup.plan.len())?;
    for (c, chunk) in data.chunks(WRITE_CHUNK).enumerate() {
        let base = c * WRITE_CHUNK;
        let records: Vec<CompressedGradient> = chunk
            .par_iter()
            .enumerate()
            .map(|(i, p)| setup.cache_sample(ctx, (base + i) as u64, p))
            .collect::<Result<_>>()?;
        writer.append(&records)?;
    }
    writer.finish(manifest)
}

/// A sealed cache opened for reading.
#[derive(Debug, Clone)]
pub struct Cache {
    dir: PathBuf,
    manifest: Manifest,
}

impl Cache {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(dir)?;
        if let Some(f) = manifest.findings().into_iter().next() {
            return Err(Error::format(dir.join(MANIFEST_FILE), 0, f));
        }
        let cache = Self {
            dir: dir.to_path_buf(),
            manifest,
        };
        let mut total = 0;
        for path in cache.shard_paths() {
            let h = ShardHeader::read_checked(&path)?;
            cache.check_header(&h, &path)?;
            total += h.record_count;
        }
        if total != cache.manifest.sample_count {
            return Err(Error::CacheIncompatible(format!(
                "shards hold {total} records, manifest says {}",
                cache.manifest.sample_count
            )));
        }
        Ok(cache)
    }

    fn check_header(&self, h: &ShardHeader, path: &Path) -> Result<()> {
        if h.dim as usize != self.manifest.target_dim || h.steps as usize != self.manifest.steps.len() {
            return Err(Error::format(
                path,
                6,
                format!(
                    "shard has v={} S={}, manifest has v={} S={}",
                    h.dim,
                    h.steps,
                    self.manifest.target_dim,
                    self.manifest.steps.len()
                ),
            ));
        }
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> u64 {
        self.manifest.sample_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn context(&self) -> Result<SketchContext> {
        read_context(&self.dir, &self.manifest)
    }

    pub fn shard_paths(&self) -> Vec<PathBuf> {
        (0..self.manifest.shard_count)
            .map(|i| self.dir.join(shard_file_name(i)))
            .collect()
    }

    /// Streams every record, shard by shard, in insertion order.
    pub fn records(&self) -> impl Iterator<Item = Result<CompressedGradient>> + '_ {
        self.shard_paths().into_iter().flat_map(|p| {
            let it: Box<dyn Iterator<Item = Result<CompressedGradient>>> = match ShardReader::open(&p) {
                Ok(r) => Box::new(r),
                Err(e) => Box::new(std::iter::once(Err(e))),
            };
            it
        })
        .map(|r| {
            r.map(|mut rec| {
                rec.degenerate = self.manifest.degenerate_ids.contains(&rec.sample_id);
                rec
            })
        })
    }

    /// Exact scan of the cache, shards scored in parallel and concatenated
    /// in shard order.
    pub fn score(&self, query: &QuerySketches, scale: ScaleConstants) -> Result<Vec<InfluenceRecord>> {
        if query.dim() != self.manifest.target_dim || query.per_step.len() != self.manifest.steps.len() {
            return Err(Error::Dimension {
                expected: self.manifest.record_width(),
                got: query.per_step.len() * query.dim(),
            });
        }
        let parts: Vec<Vec<InfluenceRecord>> = self
            .shard_paths()
            .par_iter()
            .map(|p| score_compressed(query, ShardReader::open(p)?, scale))
            .collect::<Result<_>>()?;
        Ok(parts.into_iter().flatten().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub item: String,
    pub message: String,
    pub offset: Option<u64>,
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.offset {
            Some(o) => write!(f, "{}: {} (byte {o})", self.item, self.message),
            None => write!(f, "{}: {}", self.item, self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.findings.is_empty()
    }

    fn push(&mut self, item: &str, message: impl Into<String>, offset: Option<u64>) {
        self.findings.push(Finding {
            item: item.to_string(),
            message: message.into(),
            offset,
        });
    }

    fn push_error(&mut self, item: &str, err: Error) {
        match err {
            Error::Format { offset, msg, .. } | Error::Integrity { offset, msg, .. } => {
                self.push(item, msg, Some(offset))
            }
            other => self.push(item, other.to_string(), None),
        }
    }
}

/// Checks a cache directory against `manifest`. Problems become findings;
/// nothing here returns early on a bad file.
pub fn validate(manifest: &Manifest, dir: &Path) -> ValidationReport {
    let mut report = ValidationReport::default();
    for f in manifest.findings() {
        report.push(MANIFEST_FILE, f, None);
    }

    let l_pad = manifest.padded_len as u64;
    match read_permutation(&dir.join(PERM_FILE)) {
        Ok(p) if p.len() as u64 != l_pad => {
            report.push(PERM_FILE, format!("holds {} indices, manifest padded_len is {l_pad}", p.len()), Some(4))
        }
        Ok(_) => {}
        Err(e) => report.push_error(PERM_FILE, e),
    }
    match read_signs(&dir.join(SIGN_FILE)) {
        Ok(s) if s.len() as u64 != l_pad => {
            report.push(SIGN_FILE, format!("holds {} signs, manifest padded_len is {l_pad}", s.len()), Some(4))
        }
        Ok(_) => {}
        Err(e) => report.push_error(SIGN_FILE, e),
    }

    let mut total = 0u64;
    for i in 0..manifest.shard_count {
        let name = shard_file_name(i);
        match ShardHeader::read_checked(&dir.join(&name)) {
            Ok(h) => {
                if h.dim as usize != manifest.target_dim || h.steps as usize != manifest.steps.len() {
                    report.push(
                        &name,
                        format!(
                            "header v={} S={} disagrees with manifest v={} S={}",
                            h.dim,
                            h.steps,
                            manifest.target_dim,
                            manifest.steps.len()
                        ),
                        Some(6),
                    );
                }
                total += h.record_count;
            }
            Err(e) => report.push_error(&name, e),
        }
    }
    if report.findings.iter().all(|f| !f.item.starts_with("shard-")) && total != manifest.sample_count {
        report.push(
            MANIFEST_FILE,
            format!("sample_count {} but shards hold {total} records", manifest.sample_count),
            None,
        );
    }
    let stray = dir.join(shard_file_name(manifest.shard_count));
    if stray.exists() {
        report.push(
            &shard_file_name(manifest.shard_count),
            "shard beyond manifest shard_count",
            None,
        );
    }
    report
}
