//! Maximum-inner-product top-k retrieval over concatenated sketches.
//!
//! A hierarchical navigable small-world graph built single-threaded in cache
//! order, with node levels drawn from a seeded stream, so a cache and seed
//! always give the same graph. Similarity is the raw inner product.
//!
//! Index file: `"DMIX"`, version `u16`, `M, ef_construction, ef: u32`,
//! build seed `u64`, 32-byte manifest hash, graph payload, then a SHA-256 of
//! everything before it.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::influence::{rank_order, topk, InfluenceRecord, QuerySketches, ScaleConstants};
use crate::rng::SplitMix64;
use crate::sketch::dot_f64;
use crate::store::Cache;

const MAGIC: &[u8; 4] = b"DMIX";
const VERSION: u16 = 1;
const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexParams {
    /// Maximum links per node above layer 0; layer 0 allows `2 * m`.
    pub m: usize,
    pub ef_construction: usize,
    pub ef: usize,
}

impl Default for IndexParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            ef: 200,
        }
    }
}

impl IndexParams {
    pub fn check(&self) -> Result<()> {
        if self.m == 0 || self.ef_construction == 0 || self.ef == 0 {
            return Err(Error::InvalidConfig(format!(
                "index parameters must be >= 1, got M={} ef_construction={} ef={}",
                self.m, self.ef_construction, self.ef
            )));
        }
        for v in [self.m, self.ef_construction, self.ef] {
            if v > u32::MAX as usize {
                return Err(Error::InvalidConfig(format!("index parameter {v} exceeds u32")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    sim: f32,
    node: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    // Higher similarity is greater; among equals the lower node wins.
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Visited {
    marks: Vec<u32>,
    epoch: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Self {
            marks: vec![0; n],
            epoch: 0,
        }
    }

    fn reset(&mut self) {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.epoch = 1;
        }
    }

    fn insert(&mut self, node: u32) -> bool {
        let m = &mut self.marks[node as usize];
        if *m == self.epoch {
            false
        } else {
            *m = self.epoch;
            true
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f32 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

#[derive(Debug, Clone, PartialEq)]
pub struct HnswIndex {
    params: IndexParams,
    seed: u64,
    manifest_hash: [u8; 32],
    dim: usize,
    ids: Vec<u64>,
    vectors: Vec<f32>,
    /// `links[node][layer]`; a node's level is `links[node].len() - 1`.
    links: Vec<Vec<Vec<u32>>>,
    entry: u32,
}

impl HnswIndex {
    /// Indexes every record of a sealed cache.
    pub fn build(cache: &Cache, params: IndexParams, seed: u64) -> Result<Self> {
        let dim = cache.manifest().record_width();
        let mut ids = Vec::with_capacity(cache.len() as usize);
        let mut vectors = Vec::with_capacity(cache.len() as usize * dim);
        for rec in cache.records() {
            let rec = rec?;
            ids.push(rec.sample_id);
            vectors.extend_from_slice(&rec.sketches);
        }
        Self::from_vectors(dim, ids, vectors, params, seed, cache.manifest().hash_bytes())
    }

    /// Indexes `ids.len()` row-major vectors of length `dim`.
    pub fn from_vectors(
        dim: usize,
        ids: Vec<u64>,
        vectors: Vec<f32>,
        params: IndexParams,
        seed: u64,
        manifest_hash: [u8; 32],
    ) -> Result<Self> {
        params.check()?;
        if ids.is_empty() {
            return Err(Error::Build("cache is empty".into()));
        }
        if dim == 0 || vectors.len() != ids.len() * dim {
            return Err(Error::Build(format!(
                "{} floats do not form {} vectors of dimension {dim}",
                vectors.len(),
                ids.len()
            )));
        }
        if ids.len() > u32::MAX as usize {
            return Err(Error::Build("too many vectors".into()));
        }
        if let Some(i) = vectors.iter().position(|x| !x.is_finite()) {
            return Err(Error::Build(format!("non-finite value in vector {}", i / dim)));
        }
        let level_mult = 1.0 / (params.m.max(2) as f64).ln();
        let mut rng = SplitMix64::new(seed);
        let mut index = Self {
            params,
            seed,
            manifest_hash,
            dim,
            links: Vec::with_capacity(ids.len()),
            ids,
            vectors,
            entry: 0,
        };
        let mut visited = Visited::new(index.ids.len());
        for node in 0..index.ids.len() as u32 {
            let u = 1.0 - rng.next_f64();
            let level = ((-u.ln() * level_mult) as usize).min(MAX_LEVEL);
            index.insert(node, level, &mut visited);
        }
        Ok(index)
    }

    fn vector(&self, node: u32) -> &[f32] {
        let i = node as usize * self.dim;
        &self.vectors[i..i + self.dim]
    }

    fn level(&self, node: u32) -> usize {
        self.links[node as usize].len() - 1
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.params.m
        } else {
            self.params.m
        }
    }

    fn score(&self, q: &[f32], node: u32) -> Scored {
        Scored {
            sim: dot(q, self.vector(node)),
            node,
        }
    }

    fn insert(&mut self, node: u32, level: usize, visited: &mut Visited) {
        self.links.push(vec![Vec::new(); level + 1]);
        if node == 0 {
            self.entry = 0;
            return;
        }
        let q = self.vector(node).to_vec();
        let top = self.level(self.entry);
        let mut entries = vec![self.score(&q, self.entry)];
        for layer in (level + 1..=top).rev() {
            entries = self.greedy(&q, entries[0], layer);
        }
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(&q, &entries, self.params.ef_construction, layer, visited);
            let chosen = self.select(&found, self.params.m);
            for &nb in &chosen {
                self.links[nb as usize][layer].push(node);
                if self.links[nb as usize][layer].len() > self.max_links(layer) {
                    self.shrink(nb, layer);
                }
            }
            self.links[node as usize][layer] = chosen;
            entries = found;
        }
        if level > top {
            self.entry = node;
        }
    }

    fn shrink(&mut self, node: u32, layer: usize) {
        let base = self.vector(node);
        let mut cands: Vec<Scored> = self.links[node as usize][layer]
            .iter()
            .map(|&n| self.score(base, n))
            .collect();
        cands.sort_by(|a, b| b.cmp(a));
        let kept = self.select(&cands, self.max_links(layer));
        self.links[node as usize][layer] = kept;
    }

    /// Neighbor-selection heuristic: prefer candidates closer to the base
    /// than to any already chosen neighbor, then top up with the rest.
    /// `cands` must be sorted best first.
    fn select(&self, cands: &[Scored], m: usize) -> Vec<u32> {
        let mut chosen: Vec<u32> = Vec::with_capacity(m);
        let mut pruned = Vec::new();
        for c in cands {
            if chosen.len() >= m {
                break;
            }
            let v = self.vector(c.node);
            if chosen.iter().all(|&s| dot(v, self.vector(s)) < c.sim) {
                chosen.push(c.node);
            } else {
                pruned.push(c.node);
            }
        }
        for p in pruned {
            if chosen.len() >= m {
                break;
            }
            chosen.push(p);
        }
        chosen
    }

    fn greedy(&self, q: &[f32], mut best: Scored, layer: usize) -> Vec<Scored> {
        loop {
            let mut moved = false;
            for &nb in &self.links[best.node as usize][layer] {
                let s = self.score(q, nb);
                if s > best {
                    best = s;
                    moved = true;
                }
            }
            if !moved {
                return vec![best];
            }
        }
    }

    fn search_layer(
        &self,
        q: &[f32],
        entries: &[Scored],
        ef: usize,
        layer: usize,
        visited: &mut Visited,
    ) -> Vec<Scored> {
        visited.reset();
        let mut cands = BinaryHeap::new();
        let mut found: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        for &e in entries {
            if visited.insert(e.node) {
                cands.push(e);
                found.push(Reverse(e));
            }
        }
        while found.len() > ef {
            found.pop();
        }
        while let Some(c) = cands.pop() {
            if found.len() >= ef && c < found.peek().unwrap().0 {
                break;
            }
            for &nb in &self.links[c.node as usize][layer] {
                if !visited.insert(nb) {
                    continue;
                }
                let s = self.score(q, nb);
                if found.len() < ef || s > found.peek().unwrap().0 {
                    cands.push(s);
                    found.push(Reverse(s));
                    if found.len() > ef {
                        found.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = found.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Approximate top-`k` by raw inner product, highest first.
    pub fn query(&self, q: &[f32], k: usize, ef: usize) -> Result<Vec<InfluenceRecord>> {
        if q.len() != self.dim {
            return Err(Error::Query(format!(
                "query has {} floats, index vectors have {}",
                q.len(),
                self.dim
            )));
        }
        if ef < k {
            return Err(Error::Query(format!("ef {ef} must be at least k {k}")));
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut best = self.score(q, self.entry);
        for layer in (1..=self.level(self.entry)).rev() {
            best = self.greedy(q, best, layer)[0];
        }
        let mut visited = Visited::new(self.ids.len());
        let found = self.search_layer(q, &[best], ef, 0, &mut visited);
        let mut out: Vec<InfluenceRecord> = found
            .iter()
            .map(|s| InfluenceRecord {
                sample_id: self.ids[s.node as usize],
                score: dot_f64(q, self.vector(s.node)),
            })
            .collect();
        out.sort_by(rank_order);
        out.truncate(k);
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> IndexParams {
        self.params
    }

    pub fn manifest_hash(&self) -> &[u8; 32] {
        &self.manifest_hash
    }

    /// Refuses an index built from a different cache.
    pub fn check_cache(&self, cache: &Cache) -> Result<()> {
        if self.manifest_hash != cache.manifest().hash_bytes() {
            return Err(Error::CacheIncompatible(
                "index was built from a different cache manifest".into(),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + self.vectors.len() * 4 + self.ids.len() * 80);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.params.m, self.params.ef_construction, self.params.ef] {
            b.extend_from_slice(&(v as u32).to_le_bytes());
        }
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&self.manifest_hash);
        b.extend_from_slice(&(self.dim as u32).to_le_bytes());
        b.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        b.extend_from_slice(&self.entry.to_le_bytes());
        for id in &self.ids {
            b.extend_from_slice(&id.to_le_bytes());
        }
        for x in &self.vectors {
            b.extend_from_slice(&x.to_le_bytes());
        }
        for layers in &self.links {
            b.push((layers.len() - 1) as u8);
            for l in layers {
                b.extend_from_slice(&(l.len() as u32).to_le_bytes());
                for n in l {
                    b.extend_from_slice(&n.to_le_bytes());
                }
            }
        }
        let sum = Sha256::digest(&b);
        b.extend_from_slice(&sum);
        b
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|(offset, msg)| Error::format(path, offset, msg))
    }

    /// Loads an index and checks it belongs to `cache`.
    pub fn load_for(path: &Path, cache: &Cache) -> Result<Self> {
        let index = Self::load(path)?;
        index.check_cache(cache)?;
        if index.dim != cache.manifest().record_width() {
            return Err(Error::CacheIncompatible(format!(
                "index dimension {} differs from cache record width {}",
                index.dim,
                cache.manifest().record_width()
            )));
        }
        Ok(index)
    }

    fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, (u64, String)> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err((0, "bad index magic".into()));
        }
        if bytes.len() < 6 + 32 {
            return Err((bytes.len() as u64, "file too short".into()));
        }
        let body_len = bytes.len() - 32;
        if Sha256::digest(&bytes[..body_len]).as_slice() != &bytes[body_len..] {
            return Err((body_len as u64, "checksum mismatch".into()));
        }
        let mut r = Reader {
            bytes: &bytes[..body_len],
            pos: 4,
        };
        let version = u16::from_le_bytes(r.take()?);
        if version != VERSION {
            return Err((4, format!("unsupported index version {version}")));
        }
        let params = IndexParams {
            m: r.u32()? as usize,
            ef_construction: r.u32()? as usize,
            ef: r.u32()? as usize,
        };
        params.check().map_err(|e| (6, e.to_string()))?;
        let seed = u64::from_le_bytes(r.take()?);
        let manifest_hash: [u8; 32] = r.take()?;
        let dim = r.u32()? as usize;
        let n = u64::from_le_bytes(r.take()?) as usize;
        let entry = r.u32()?;
        if n == 0 || entry as usize >= n || dim == 0 {
            return Err((r.pos as u64, "empty index or bad entry point".into()));
        }
        let need = n.checked_mul(8 + dim * 4).filter(|&x| x <= body_len);
        if need.is_none() {
            return Err((r.pos as u64, "vector section exceeds file".into()));
        }
        let ids = (0..n)
            .map(|_| r.take().map(u64::from_le_bytes))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let vectors = (0..n * dim)
            .map(|_| r.take().map(f32::from_le_bytes))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut links = Vec::with_capacity(n);
        for _ in 0..n {
            let level = r.take::<1>()?[0] as usize;
            let mut layers = Vec::with_capacity(level + 1);
            for _ in 0..=level {
                let at = r.pos as u64;
                let count = r.u32()? as usize;
                if count > n {
                    return Err((at, format!("link count {count} exceeds node count")));
                }
                let l = (0..count)
                    .map(|_| r.u32())
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                if l.iter().any(|&x| x as usize >= n) {
                    return Err((at, "link to missing node".into()));
                }
                layers.push(l);
            }
            links.push(layers);
        }
        if r.pos != body_len {
            return Err((r.pos as u64, "trailing bytes before checksum".into()));
        }
        let top = links[entry as usize].len() - 1;
        if links.iter().any(|l| l.len() - 1 > top) {
            return Err((0, "entry point is not on the top layer".into()));
        }
        Ok(Self {
            params,
            seed,
            manifest_hash,
            dim,
            ids,
            vectors,
            links,
            entry,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> std::result::Result<[u8; N], (u64, String)> {
        let end = self.pos + N;
        if end > self.bytes.len() {
            return Err((self.pos as u64, "unexpected end of index".into()));
        }
        let out = self.bytes[self.pos..end].try_into().unwrap();
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, (u64, String)> {
        Ok(u32::from_le_bytes(self.take()?))
    }
}

/// Brute-force top-`k` by raw inner product over the whole cache.
pub fn exact_search(cache: &Cache, q: &[f32], k: usize) -> Result<Vec<InfluenceRecord>> {
    let m = cache.manifest();
    if q.len() != m.record_width() {
        return Err(Error::Query(format!(
            "query has {} floats, cache records have {}",
            q.len(),
            m.record_width()
        )));
    }
    let sketches = QuerySketches::from_concatenated(q, m.target_dim)?;
    Ok(topk(cache.score(&sketches, ScaleConstants::default())?, k))
}
