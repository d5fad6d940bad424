//! Desk-scale evaluation: detection rate, compressed-vs-exact fidelity,
//! KNN recall, storage arithmetic and timings.
//!
//! `run_experiment` is deterministic given its config: the report text and
//! JSON summary contain no wall times, which are kept in
//! [`EvalReport::timings`].

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::diffusion::{
    gen_clusters, sample_ddpm, train, ClusterSpec, DataPoint, Denoiser, ForwardNoise, ModelShape,
    Schedule, TrainConfig,
};
use crate::error::{Error, Result};
use crate::influence::{
    topk, GradientSetup, InfluenceRecord, NoiseConfig, NoiseMode, ScaleConstants, TimestepPlan,
};
use crate::knn::{exact_search, HnswIndex, IndexParams};
use crate::kv::{join_list, parse_list, KeyValues};
use crate::rng::{keyed_seed, SplitMix64};
use crate::sketch::SketchContext;
use crate::store::{shard_file_name, sizes, write_cache, Cache, Manifest, PERM_FILE, SIGN_FILE};

/// Fraction of the first `k` ids whose training label is `query_label`.
pub fn detection_rate(
    topk_ids: &[u64],
    train_labels: &[Option<u32>],
    query_label: u32,
    k: usize,
) -> Result<f64> {
    if k == 0 || k > topk_ids.len() {
        return Err(Error::Input(format!(
            "k must be in [1, {}], got {k}",
            topk_ids.len()
        )));
    }
    let mut hits = 0;
    for &id in &topk_ids[..k] {
        let label = train_labels
            .get(id as usize)
            .ok_or(Error::Lookup(id))?;
        if *label == Some(query_label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / k as f64)
}

/// `|approx[..k] ∩ exact[..k]| / k`; shorter lists count as misses.
pub fn recall_at_k(approx: &[u64], exact: &[u64], k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let truth: HashSet<u64> = exact.iter().take(k).copied().collect();
    let hit = approx.iter().take(k).filter(|id| truth.contains(id)).count();
    hit as f64 / k as f64
}

/// 1-based ranks, ties sharing the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho with average ranks for ties.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Input(format!(
            "need two equal-length lists of at least 2 scores, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::UndefinedCorrelation("NaN score".into()));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - mean, y - mean);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// A uniformly random ordering of `0..n`.
pub fn random_ranking(n: u64, seed: u64) -> Vec<u64> {
    let mut rng = SplitMix64::new(seed);
    let mut ids: Vec<u64> = (0..n).collect();
    for i in (1..ids.len()).rev() {
        let j = rng.next_bounded(i as u64 + 1) as usize;
        ids.swap(i, j);
    }
    ids
}

/// Byte counts implied by the layouts, without touching any file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StorageFigures {
    pub param_count: u64,
    pub padded_len: u64,
    pub steps: u64,
    pub target_dim: u64,
    /// `L * 4 * S`.
    pub uncompressed_per_sample: u64,
    /// `S * v * 4`.
    pub compressed_per_sample: u64,
    /// Compressed payload plus the 8-byte id.
    pub record_bytes: u64,
    pub perm_payload: u64,
    pub sign_payload: u64,
    /// `compressed_per_sample / uncompressed_per_sample`.
    pub ratio: f64,
}

impl StorageFigures {
    pub fn new(param_count: u64, target_dim: u64, steps: u64) -> Self {
        let padded_len = param_count.div_ceil(target_dim) * target_dim;
        let uncompressed = sizes::uncompressed_sample(param_count, steps);
        let compressed = sizes::sample_payload(steps, target_dim);
        Self {
            param_count,
            padded_len,
            steps,
            target_dim,
            uncompressed_per_sample: uncompressed,
            compressed_per_sample: compressed,
            record_bytes: sizes::record(steps, target_dim),
            perm_payload: 4 * padded_len,
            sign_payload: sizes::sign_payload(padded_len),
            ratio: compressed as f64 / uncompressed as f64,
        }
    }
}

/// Formula figures next to measured file sizes of one cache.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StorageReport {
    pub figures: StorageFigures,
    pub samples: u64,
    pub shards: usize,
    /// Header and record arithmetic summed over shards.
    pub shard_bytes_expected: u64,
    /// Sum of shard file lengths on disk.
    pub shard_bytes_actual: u64,
    pub perm_file_bytes: u64,
    pub sign_file_bytes: u64,
}

impl StorageReport {
    pub fn context_bytes(&self) -> u64 {
        self.perm_file_bytes + self.sign_file_bytes
    }
}

pub fn storage_report(manifest: &Manifest, dir: &Path) -> Result<StorageReport> {
    let steps = manifest.steps.len() as u64;
    let v = manifest.target_dim as u64;
    let figures = StorageFigures::new(manifest.param_count as u64, v, steps);
    let len = |p: &Path| -> Result<u64> { Ok(std::fs::metadata(p)?.len()) };
    let mut actual = 0;
    for i in 0..manifest.shard_count {
        actual += len(&dir.join(shard_file_name(i)))?;
    }
    Ok(StorageReport {
        figures,
        samples: manifest.sample_count,
        shards: manifest.shard_count,
        shard_bytes_expected: manifest.shard_count as u64 * sizes::SHARD_HEADER
            + manifest.sample_count * figures.record_bytes,
        shard_bytes_actual: actual,
        perm_file_bytes: len(&dir.join(PERM_FILE))?,
        sign_file_bytes: len(&dir.join(SIGN_FILE))?,
    })
}

/// Everything `run_experiment` needs; parsed from the `key = value` dialect.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub clusters: usize,
    pub per_cluster: usize,
    pub heldout_per_cluster: usize,
    pub generated_per_cluster: usize,
    pub dim: usize,
    pub separation: f32,
    pub stddev: f32,
    pub hidden: usize,
    pub conditional: bool,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub forward_noise: ForwardNoise,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub plan_steps: usize,
    pub dims: Vec<usize>,
    pub knn_dim: usize,
    pub ks: Vec<usize>,
    pub index: IndexParams,
    pub noise_mode: NoiseMode,
    pub timing_reps: usize,
    pub data_seed: u64,
    pub init_seed: u64,
    pub train_seed: u64,
    pub sample_seed: u64,
    pub sketch_seed: u64,
    pub noise_seed: u64,
    pub index_seed: u64,
    pub random_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            clusters: 3,
            per_cluster: 300,
            heldout_per_cluster: 10,
            generated_per_cluster: 10,
            dim: 8,
            separation: 3.0,
            stddev: 1.0,
            hidden: 142,
            conditional: true,
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 0.05,
            forward_noise: ForwardNoise::Scaled,
            epochs: 200,
            lr: 0.05,
            batch: 32,
            plan_steps: 10,
            dims: vec![1024, 4096],
            knn_dim: 4096,
            ks: vec![1, 5, 10],
            index: IndexParams::default(),
            noise_mode: NoiseMode::Shared,
            timing_reps: 5,
            data_seed: 1,
            init_seed: 2,
            train_seed: 3,
            sample_seed: 4,
            sketch_seed: 5,
            noise_seed: 6,
            index_seed: 7,
            random_seed: 8,
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "clusters",
    "per_cluster",
    "heldout_per_cluster",
    "generated_per_cluster",
    "dim",
    "separation",
    "stddev",
    "hidden",
    "conditional",
    "timesteps",
    "beta_start",
    "beta_end",
    "forward_noise",
    "epochs",
    "lr",
    "batch",
    "plan_steps",
    "dims",
    "knn_dim",
    "ks",
    "m",
    "ef_construction",
    "ef",
    "noise_mode",
    "timing_reps",
    "data_seed",
    "init_seed",
    "train_seed",
    "sample_seed",
    "sketch_seed",
    "noise_seed",
    "index_seed",
    "random_seed",
];

impl ExperimentConfig {
    /// Missing keys keep their defaults; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        if let Some(k) = kv.keys().find(|k| !CONFIG_KEYS.contains(k)) {
            return Err(Error::InvalidConfig(format!("unknown experiment key `{k}`")));
        }
        let d = Self::default();
        let list = |key: &str, default: &[usize]| -> Result<Vec<usize>> {
            match kv.raw(key) {
                Some(raw) => parse_list(key, raw),
                None => Ok(default.to_vec()),
            }
        };
        let cfg = Self {
            clusters: kv.get_or("clusters", d.clusters)?,
            per_cluster: kv.get_or("per_cluster", d.per_cluster)?,
            heldout_per_cluster: kv.get_or("heldout_per_cluster", d.heldout_per_cluster)?,
            generated_per_cluster: kv.get_or("generated_per_cluster", d.generated_per_cluster)?,
            dim: kv.get_or("dim", d.dim)?,
            separation: kv.get_or("separation", d.separation)?,
            stddev: kv.get_or("stddev", d.stddev)?,
            hidden: kv.get_or("hidden", d.hidden)?,
            conditional: kv.get_or("conditional", d.conditional)?,
            timesteps: kv.get_or("timesteps", d.timesteps)?,
            beta_start: kv.get_or("beta_start", d.beta_start)?,
            beta_end: kv.get_or("beta_end", d.beta_end)?,
            forward_noise: kv.get_or("forward_noise", d.forward_noise)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            lr: kv.get_or("lr", d.lr)?,
            batch: kv.get_or("batch", d.batch)?,
            plan_steps: kv.get_or("plan_steps", d.plan_steps)?,
            dims: list("dims", &d.dims)?,
            knn_dim: kv.get_or("knn_dim", d.knn_dim)?,
            ks: list("ks", &d.ks)?,
            index: IndexParams {
                m: kv.get_or("m", d.index.m)?,
                ef_construction: kv.get_or("ef_construction", d.index.ef_construction)?,
                ef: kv.get_or("ef", d.index.ef)?,
            },
            noise_mode: kv.get_or("noise_mode", d.noise_mode)?,
            timing_reps: kv.get_or("timing_reps", d.timing_reps)?,
            data_seed: kv.get_or("data_seed", d.data_seed)?,
            init_seed: kv.get_or("init_seed", d.init_seed)?,
            train_seed: kv.get_or("train_seed", d.train_seed)?,
            sample_seed: kv.get_or("sample_seed", d.sample_seed)?,
            sketch_seed: kv.get_or("sketch_seed", d.sketch_seed)?,
            noise_seed: kv.get_or("noise_seed", d.noise_seed)?,
            index_seed: kv.get_or("index_seed", d.index_seed)?,
            random_seed: kv.get_or("random_seed", d.random_seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::default();
        kv.insert("clusters", self.clusters);
        kv.insert("per_cluster", self.per_cluster);
        kv.insert("heldout_per_cluster", self.heldout_per_cluster);
        kv.insert("generated_per_cluster", self.generated_per_cluster);
        kv.insert("dim", self.dim);
        kv.insert("separation", self.separation);
        kv.insert("stddev", self.stddev);
        kv.insert("hidden", self.hidden);
        kv.insert("conditional", self.conditional);
        kv.insert("timesteps", self.timesteps);
        kv.insert("beta_start", self.beta_start);
        kv.insert("beta_end", self.beta_end);
        kv.insert("forward_noise", self.forward_noise);
        kv.insert("epochs", self.epochs);
        kv.insert("lr", self.lr);
        kv.insert("batch", self.batch);
        kv.insert("plan_steps", self.plan_steps);
        kv.insert("dims", join_list(&self.dims));
        kv.insert("knn_dim", self.knn_dim);
        kv.insert("ks", join_list(&self.ks));
        kv.insert("m", self.index.m);
        kv.insert("ef_construction", self.index.ef_construction);
        kv.insert("ef", self.index.ef);
        kv.insert("noise_mode", self.noise_mode);
        kv.insert("timing_reps", self.timing_reps);
        kv.insert("data_seed", self.data_seed);
        kv.insert("init_seed", self.init_seed);
        kv.insert("train_seed", self.train_seed);
        kv.insert("sample_seed", self.sample_seed);
        kv.insert("sketch_seed", self.sketch_seed);
        kv.insert("noise_seed", self.noise_seed);
        kv.insert("index_seed", self.index_seed);
        kv.insert("random_seed", self.random_seed);
        kv.to_text()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.clusters == 0 || self.per_cluster == 0 {
            return bad("clusters and per_cluster must be positive".into());
        }
        if self.heldout_per_cluster + self.generated_per_cluster == 0 {
            return bad("need at least one query per cluster".into());
        }
        if self.dims.is_empty() || self.dims.contains(&0) {
            return bad("dims must list positive sketch dimensions".into());
        }
        if self.knn_dim != 0 && !self.dims.contains(&self.knn_dim) {
            return bad(format!(
                "knn_dim {} must be one of dims (or 0 to skip the index)",
                self.knn_dim
            ));
        }
        let n = self.clusters * self.per_cluster;
        if self.ks.is_empty() || self.ks.iter().any(|&k| k == 0 || k > n) {
            return bad(format!("every k must be in [1, {n}]"));
        }
        if self.knn_dim != 0 && self.ks.iter().any(|&k| k > self.index.ef) {
            return bad(format!("ef {} is smaller than a requested k", self.index.ef));
        }
        if self.timing_reps == 0 {
            return bad("timing_reps must be positive".into());
        }
        self.index.check()?;
        ModelShape::new(self.dim, self.hidden, self.clusters)?;
        Schedule::linear(self.timesteps, self.beta_start, self.beta_end)?;
        TimestepPlan::evenly_spaced(self.timesteps, self.plan_steps)?;
        ScaleConstants::new(self.epochs as f64, self.lr)?;
        Ok(())
    }

    fn max_k(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryKind {
    Generated,
    Heldout,
}

#[derive(Debug, Clone)]
struct Query {
    point: DataPoint,
    label: u32,
    kind: QueryKind,
}

/// Mean detection rate per k for one ranker over one query set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionRow {
    pub ranker: String,
    pub queries: QueryKind,
    pub rates: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityRow {
    pub target_dim: usize,
    pub spearman_mean: f64,
    pub spearman_min: f64,
    pub top10_overlap_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallRow {
    pub target_dim: usize,
    pub ef: usize,
    pub recalls: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub config_hash: String,
    pub param_count: usize,
    pub train_samples: usize,
    pub cluster_share: f64,
    pub final_train_loss: f64,
    pub queries: usize,
    pub detection: Vec<DetectionRow>,
    pub fidelity: Vec<FidelityRow>,
    pub recall: Vec<RecallRow>,
    pub storage: Vec<StorageReport>,
    pub cache_manifest_hashes: Vec<(usize, String)>,
}

impl Summary {
    /// Mean detection rate of `ranker` at `k` over all queries.
    pub fn detection(&self, ranker: &str, k: usize) -> Option<f64> {
        let rows: Vec<&DetectionRow> = self.detection.iter().filter(|r| r.ranker == ranker).collect();
        if rows.is_empty() {
            return None;
        }
        rows.iter()
            .map(|r| r.rates.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v))
            .sum::<Option<f64>>()
            .map(|s| s / rows.len() as f64)
    }

    pub fn fidelity(&self, v: usize) -> Option<&FidelityRow> {
        self.fidelity.iter().find(|f| f.target_dim == v)
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub config: ExperimentConfig,
    pub summary: Summary,
    /// Wall seconds per phase, not part of the deterministic output.
    pub timings: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes") + "\n"
    }

    pub fn timings_text(&self) -> String {
        self.timings
            .iter()
            .map(|(p, s)| format!("{p}\t{s:.6}\n"))
            .collect()
    }

    pub fn text(&self) -> String {
        let s = &self.summary;
        let mut o = String::new();
        let _ = writeln!(o, "experiment report");
        let _ = writeln!(o, "config sha256 {}", s.config_hash);
        let _ = writeln!(o);
        let _ = writeln!(o, "[config]");
        o.push_str(&self.config.to_text());
        let _ = writeln!(o);
        let _ = writeln!(o, "[run]");
        let _ = writeln!(o, "param_count       {}", s.param_count);
        let _ = writeln!(o, "train_samples     {}", s.train_samples);
        let _ = writeln!(o, "queries           {}", s.queries);
        let _ = writeln!(o, "cluster_share     {:.4}", s.cluster_share);
        let _ = writeln!(o, "final_train_loss  {:.6}", s.final_train_loss);
        let _ = writeln!(o);
        let _ = writeln!(o, "[detection rate]");
        let _ = write!(o, "{:<16}{:<12}", "ranker", "queries");
        for k in &self.config.ks {
            let _ = write!(o, "{:>10}", format!("k={k}"));
        }
        let _ = writeln!(o);
        for row in &s.detection {
            let kind = match row.queries {
                QueryKind::Generated => "generated",
                QueryKind::Heldout => "held-out",
            };
            let _ = write!(o, "{:<16}{:<12}", row.ranker, kind);
            for (_, r) in &row.rates {
                let _ = write!(o, "{r:>10.4}");
            }
            let _ = writeln!(o);
        }
        let _ = writeln!(o);
        let _ = writeln!(o, "[compressed vs exact]");
        let _ = writeln!(o, "{:<10}{:>14}{:>14}{:>16}", "v", "spearman_mean", "spearman_min", "top10_overlap");
        for f in &s.fidelity {
            let _ = writeln!(
                o,
                "{:<10}{:>14.4}{:>14.4}{:>16.4}",
                f.target_dim, f.spearman_mean, f.spearman_min, f.top10_overlap_mean
            );
        }
        if !s.recall.is_empty() {
            let _ = writeln!(o);
            let _ = writeln!(o, "[knn recall vs exact scan]");
            for r in &s.recall {
                let _ = write!(o, "v={} ef={}", r.target_dim, r.ef);
                for (k, v) in &r.recalls {
                    let _ = write!(o, "  recall@{k}={v:.4}");
                }
                let _ = writeln!(o);
            }
        }
        let _ = writeln!(o);
        let _ = writeln!(o, "[storage bytes]");
        let _ = writeln!(
            o,
            "{:<10}{:>16}{:>14}{:>10}{:>16}{:>16}{:>12}{:>12}{:>12}",
            "v", "uncompressed/s", "compressed/s", "record", "shards_expected", "shards_actual", "perm_file", "sign_file", "ratio"
        );
        for st in &s.storage {
            let f = &st.figures;
            let _ = writeln!(
                o,
                "{:<10}{:>16}{:>14}{:>10}{:>16}{:>16}{:>12}{:>12}{:>12.6}",
                f.target_dim,
                f.uncompressed_per_sample,
                f.compressed_per_sample,
                f.record_bytes,
                st.shard_bytes_expected,
                st.shard_bytes_actual,
                st.perm_file_bytes,
                st.sign_file_bytes,
                f.ratio
            );
        }
        let _ = writeln!(o);
        let _ = writeln!(o, "[caches]");
        for (v, h) in &s.cache_manifest_hashes {
            let _ = writeln!(o, "v={v} manifest sha256 {h}");
        }
        o
    }
}

struct Clock {
    timings: Vec<(String, f64)>,
    start: Instant,
}

impl Clock {
    fn new() -> Self {
        Self {
            timings: Vec::new(),
            start: Instant::now(),
        }
    }

    fn lap(&mut self, phase: impl Into<String>) {
        self.timings.push((phase.into(), self.start.elapsed().as_secs_f64()));
        self.start = Instant::now();
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn ids(records: &[InfluenceRecord]) -> Vec<u64> {
    records.iter().map(|r| r.sample_id).collect()
}

fn nearest_mean(x: &[f32], means: &[Vec<f32>]) -> u32 {
    let d = |m: &Vec<f32>| -> f32 { x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum() };
    (0..means.len())
        .min_by(|&a, &b| d(&means[a]).total_cmp(&d(&means[b])))
        .unwrap_or(0) as u32
}

/// Rows of mean detection rate for each query kind.
fn detection_rows(
    ranker: &str,
    rankings: &[Vec<u64>],
    queries: &[Query],
    labels: &[Option<u32>],
    ks: &[usize],
) -> Result<Vec<DetectionRow>> {
    let mut rows = Vec::new();
    for kind in [QueryKind::Generated, QueryKind::Heldout] {
        let sel: Vec<usize> = (0..queries.len()).filter(|&i| queries[i].kind == kind).collect();
        if sel.is_empty() {
            continue;
        }
        let mut rates = Vec::new();
        for &k in ks {
            let mut sum = 0.0;
            for &i in &sel {
                sum += detection_rate(&rankings[i], labels, queries[i].label, k)?;
            }
            rates.push((k, sum / sel.len() as f64));
        }
        rows.push(DetectionRow {
            ranker: ranker.to_string(),
            queries: kind,
            rates,
        });
    }
    Ok(rows)
}

/// gen-data, train, cache, index, query and score, all under `workdir`.
pub fn run_experiment(cfg: &ExperimentConfig, workdir: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    std::fs::create_dir_all(workdir)?;
    let mut clock = Clock::new();

    let spec = ClusterSpec::separated(
        cfg.clusters,
        cfg.per_cluster,
        cfg.dim,
        cfg.separation,
        cfg.stddev,
        cfg.data_seed,
    )
    .map_err(|e| e.in_phase("gen-data"))?;
    let data = gen_clusters(&spec).map_err(|e| e.in_phase("gen-data"))?;
    let heldout = gen_clusters(&ClusterSpec {
        per_cluster: cfg.heldout_per_cluster,
        seed: keyed_seed(cfg.data_seed, 1),
        ..spec.clone()
    })
    .map_err(|e| e.in_phase("gen-data"))?;
    let labels: Vec<Option<u32>> = data.iter().map(|p| p.label).collect();
    clock.lap("gen-data");

    let n_classes = if cfg.conditional { cfg.clusters } else { 0 };
    let shape = ModelShape::new(cfg.dim, cfg.hidden, n_classes)?;
    let sched = Schedule::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)?
        .with_forward(cfg.forward_noise);
    let outcome = train(
        Denoiser::init(shape, cfg.init_seed),
        &data,
        &sched,
        &TrainConfig {
            epochs: cfg.epochs,
            lr: cfg.lr,
            batch: cfg.batch,
            seed: cfg.train_seed,
        },
    )
    .map_err(|e| e.in_phase("train"))?;
    let model = outcome.model;
    clock.lap("train");

    let mut queries = Vec::new();
    for c in 0..cfg.clusters as u32 {
        for j in 0..cfg.generated_per_cluster {
            let seed = keyed_seed(cfg.sample_seed, (c as u64) << 32 | j as u64);
            let cond = cfg.conditional.then_some(c);
            let x = sample_ddpm(&model, &sched, cond, seed).map_err(|e| e.in_phase("sample"))?;
            // Unconditional samples are attributed to the nearest cluster.
            let label = if cfg.conditional { c } else { nearest_mean(&x, &spec.means) };
            queries.push(Query {
                point: DataPoint::new(x, Some(label)).map_err(|e| e.in_phase("sample"))?,
                label,
                kind: QueryKind::Generated,
            });
        }
    }
    for p in heldout {
        let label = p.label.unwrap_or(0);
        queries.push(Query {
            point: p,
            label,
            kind: QueryKind::Heldout,
        });
    }
    let points: Vec<DataPoint> = queries.iter().map(|q| q.point.clone()).collect();
    clock.lap("sample");

    let plan = TimestepPlan::evenly_spaced(cfg.timesteps, cfg.plan_steps)?;
    let setup = GradientSetup {
        model: &model,
        sched: &sched,
        plan: &plan,
        noise: NoiseConfig {
            seed: cfg.noise_seed,
            mode: cfg.noise_mode,
        },
    };
    let scale = ScaleConstants::new(cfg.epochs as f64, cfg.lr)?;
    let exact = setup
        .score_exact_many(&points, &data, scale)
        .map_err(|e| e.in_phase("score-exact"))?;
    let max_k = cfg.max_k();
    let exact_rank: Vec<Vec<u64>> = exact.iter().map(|s| ids(&topk(s.clone(), max_k))).collect();
    clock.lap("score-exact");

    let n = data.len() as u64;
    let random_rank: Vec<Vec<u64>> = (0..queries.len())
        .map(|i| random_ranking(n, keyed_seed(cfg.random_seed, i as u64)))
        .collect();

    let mut detection = detection_rows("exact", &exact_rank, &queries, &labels, &cfg.ks)?;
    let mut fidelity = Vec::new();
    let mut recall = Vec::new();
    let mut storage = Vec::new();
    let mut hashes = Vec::new();

    for &v in &cfg.dims {
        let dir = workdir.join(format!("cache-v{v}"));
        let ctx = SketchContext::derive(model.param_count(), v, cfg.sketch_seed)?;
        let manifest = write_cache(&dir, &setup, &ctx, &data, scale)
            .map_err(|e| e.in_phase("cache-grads"))?;
        let cache = Cache::open(&dir)?;
        clock.lap(format!("cache-grads v={v}"));

        let sketches = points
            .par_iter()
            .map(|p| setup.query_sketches(&ctx, p))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_phase("score-compressed"))?;
        let compressed = sketches
            .iter()
            .map(|q| cache.score(q, scale))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_phase("score-compressed"))?;
        clock.lap(format!("score-compressed v={v}"));

        let mut rhos = Vec::new();
        let mut overlaps = Vec::new();
        for (e, c) in exact.iter().zip(&compressed) {
            let a: Vec<f64> = e.iter().map(|r| r.score).collect();
            let b: Vec<f64> = c.iter().map(|r| r.score).collect();
            rhos.push(rank_correlation(&a, &b).map_err(|e| e.in_phase("fidelity"))?);
            overlaps.push(recall_at_k(&ids(&topk(c.clone(), 10)), &ids(&topk(e.clone(), 10)), 10));
        }
        fidelity.push(FidelityRow {
            target_dim: v,
            spearman_mean: rhos.iter().sum::<f64>() / rhos.len() as f64,
            spearman_min: rhos.iter().copied().fold(f64::INFINITY, f64::min),
            top10_overlap_mean: overlaps.iter().sum::<f64>() / overlaps.len() as f64,
        });
        let comp_rank: Vec<Vec<u64>> = compressed.iter().map(|s| ids(&topk(s.clone(), max_k))).collect();
        detection.extend(detection_rows(
            &format!("compressed-{v}"),
            &comp_rank,
            &queries,
            &labels,
            &cfg.ks,
        )?);

        if v == cfg.knn_dim {
            let index = HnswIndex::build(&cache, cfg.index, cfg.index_seed)
                .map_err(|e| e.in_phase("build-index"))?;
            index.save(&workdir.join(format!("index-v{v}.dmix")))?;
            clock.lap(format!("build-index v={v}"));

            let concat: Vec<Vec<f32>> = sketches.iter().map(|q| q.concatenated()).collect();
            let mut knn_rank = Vec::new();
            let mut lat = Vec::new();
            for rep in 0..cfg.timing_reps {
                let t = Instant::now();
                let res = concat
                    .iter()
                    .map(|q| index.query(q, max_k, cfg.index.ef))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| e.in_phase("query"))?;
                lat.push(t.elapsed().as_secs_f64() / concat.len() as f64);
                if rep == 0 {
                    knn_rank = res.iter().map(|r| ids(r)).collect();
                }
            }
            clock.timings.push((format!("query median per-query v={v}"), median(lat)));
            let truth: Vec<Vec<u64>> = concat
                .iter()
                .map(|q| exact_search(&cache, q, max_k).map(|r| ids(&r)))
                .collect::<Result<_>>()?;
            let recalls = cfg
                .ks
                .iter()
                .map(|&k| {
                    let s: f64 = knn_rank.iter().zip(&truth).map(|(a, t)| recall_at_k(a, t, k)).sum();
                    (k, s / truth.len() as f64)
                })
                .collect();
            recall.push(RecallRow {
                target_dim: v,
                ef: cfg.index.ef,
                recalls,
            });
            detection.extend(detection_rows(
                &format!("knn-{v}"),
                &knn_rank,
                &queries,
                &labels,
                &cfg.ks,
            )?);
            clock.lap(format!("query v={v}"));
        }

        storage.push(storage_report(&manifest, &dir)?);
        hashes.push((v, manifest.hash()));
    }

    detection.extend(detection_rows("random", &random_rank, &queries, &labels, &cfg.ks)?);

    let config_hash = crate::diffusion::model::hex_string(&<sha2::Sha256 as sha2::Digest>::digest(
        cfg.to_text().as_bytes(),
    ));
    let summary = Summary {
        config_hash,
        param_count: model.param_count(),
        train_samples: data.len(),
        cluster_share: cfg.per_cluster as f64 / data.len() as f64,
        final_train_loss: outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
        queries: queries.len(),
        detection,
        fidelity,
        recall,
        storage,
        cache_manifest_hashes: hashes,
    };
    Ok(EvalReport {
        config: cfg.clone(),
        summary,
        timings: clock.timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_rate_examples() {
        let labels = vec![Some(0), Some(1), Some(0), Some(0), Some(1), None];
        assert_eq!(detection_rate(&[0, 1, 2, 3, 4], &labels, 0, 5).unwrap(), 0.6);
        assert_eq!(detection_rate(&[0, 2, 3], &labels, 0, 3).unwrap(), 1.0);
        assert_eq!(detection_rate(&[5, 1], &labels, 0, 2).unwrap(), 0.0);
        assert!(matches!(detection_rate(&[9], &labels, 0, 1), Err(Error::Lookup(9))));
        assert!(detection_rate(&[0], &labels, 0, 2).is_err());
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[1, 2, 3], &[1, 2, 3], 3), 1.0);
        assert_eq!(recall_at_k(&[1, 2, 3], &[4, 5, 6], 3), 0.0);
        assert_eq!(recall_at_k(&[3, 2, 9], &[2, 3, 4], 2), 1.0);
    }

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(rank_correlation(&a, &[10.0, 20.0, 30.0, 40.0]).unwrap(), 1.0);
        assert_eq!(rank_correlation(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!(matches!(
            rank_correlation(&a, &[1.0; 4]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(rank_correlation(&[1.0], &[1.0]).is_err());
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn config_round_trip_and_rejections() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(ExperimentConfig::parse("").unwrap(), cfg);
        assert!(ExperimentConfig::parse("bogus = 1\n").is_err());
        assert!(ExperimentConfig::parse("knn_dim = 77\n").is_err());
        assert!(ExperimentConfig::parse("ks = 0\n").is_err());
    }

    #[test]
    fn storage_figures_small_case() {
        let f = StorageFigures::new(10, 4, 2);
        assert_eq!(f.padded_len, 12);
        assert_eq!(f.uncompressed_per_sample, 80);
        assert_eq!(f.compressed_per_sample, 32);
        assert_eq!(f.record_bytes, 40);
        assert_eq!(f.sign_payload, 2);
    }
}
