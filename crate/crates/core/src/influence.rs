//! Influence estimation from normalized per-timestep loss gradients.
//!
//! The influence of training sample `i` on query `q` is
//!
//! ```text
//! I(q, i) = e * lr_avg * sum_{t in plan} <g_q(t) / |g_q(t)|, g_i(t) / |g_i(t)|>
//! ```
//!
//! where `g(t)` is the gradient of the noise-prediction loss at timestep `t`
//! computed with the same noise `eps(t)` for every sample and every query.
//! Cached samples store `compress(g_i(t) / |g_i(t)|)` per step; the exact
//! variant keeps gradients uncompressed and serves as the reference.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::diffusion::train::grad_loss;
use crate::diffusion::{DataPoint, Denoiser, Schedule};
use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, keyed_seed, SplitMix64};
use crate::sketch::{dot_f64, CompressedVec, SketchContext};

/// Sample id used for queries when noise is drawn per sample.
pub const QUERY_ID: u64 = u64::MAX;

/// Gradients with L2 norm below this are treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Strictly increasing subset of `1..=T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    steps: Vec<usize>,
}

impl TimestepPlan {
    /// `steps[i] = round(i * T / S)` for `i = 1..=S`.
    pub fn evenly_spaced(total_steps: usize, count: usize) -> Result<Self> {
        if count == 0 || count > total_steps {
            return Err(Error::InvalidConfig(format!(
                "timestep count must be in [1, {total_steps}], got {count}"
            )));
        }
        let steps = (1..=count)
            .map(|i| (2 * i * total_steps + count) / (2 * count))
            .collect();
        Self::from_steps(steps, total_steps)
    }

    pub fn from_steps(steps: Vec<usize>, total_steps: usize) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidConfig("timestep plan is empty".into()));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "timestep plan must be strictly increasing".into(),
            ));
        }
        if steps[0] == 0 || *steps.last().unwrap() > total_steps {
            return Err(Error::InvalidConfig(format!(
                "timestep plan must lie within [1, {total_steps}]"
            )));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Whether all samples share the noise drawn at a timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    #[default]
    Shared,
    PerSample,
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseMode::Shared => "shared",
            NoiseMode::PerSample => "per-sample",
        })
    }
}

impl FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(NoiseMode::Shared),
            "per-sample" => Ok(NoiseMode::PerSample),
            other => Err(Error::InvalidConfig(format!(
                "noise mode must be `shared` or `per-sample`, got `{other}`"
            ))),
        }
    }
}

/// Standard-normal noise for timestep `t`, identical for every caller that
/// passes the same `(noise_seed, t)`.
pub fn noise_for(noise_seed: u64, t: usize, dim: usize) -> Vec<f32> {
    let mut rng = SplitMix64::new(keyed_seed(noise_seed, t as u64));
    let mut buf = vec![0.0f64; dim];
    fill_standard_normal(&mut rng, &mut buf);
    buf.into_iter().map(|v| v as f32).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseConfig {
    pub seed: u64,
    pub mode: NoiseMode,
}

impl NoiseConfig {
    pub fn shared(seed: u64) -> Self {
        Self {
            seed,
            mode: NoiseMode::Shared,
        }
    }

    pub fn noise(&self, sample_id: u64, t: usize, dim: usize) -> Vec<f32> {
        match self.mode {
            NoiseMode::Shared => noise_for(self.seed, t, dim),
            NoiseMode::PerSample => noise_for(keyed_seed(self.seed, sample_id), t, dim),
        }
    }
}

/// Multiplier `e * lr_avg` applied to every score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleConstants {
    pub epochs: f64,
    pub avg_lr: f64,
}

impl Default for ScaleConstants {
    fn default() -> Self {
        Self {
            epochs: 1.0,
            avg_lr: 1.0,
        }
    }
}

impl ScaleConstants {
    pub fn new(epochs: f64, avg_lr: f64) -> Result<Self> {
        if !(epochs > 0.0 && avg_lr > 0.0 && epochs.is_finite() && avg_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "scale constants must be positive, got epochs={epochs} lr={avg_lr}"
            )));
        }
        Ok(Self { epochs, avg_lr })
    }

    pub fn factor(&self) -> f64 {
        self.epochs * self.avg_lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfluenceRecord {
    pub sample_id: u64,
    pub score: f64,
}

/// A unit-norm flat gradient; `degenerate` marks a near-zero gradient that
/// was replaced by the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitGradient {
    pub values: Vec<f32>,
    pub degenerate: bool,
}

/// One sample's cached sketches, `S` blocks of `v` floats in plan order.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedGradient {
    pub sample_id: u64,
    pub sketches: Vec<f32>,
    pub degenerate: bool,
}

impl CompressedGradient {
    pub fn step(&self, i: usize, dim: usize) -> &[f32] {
        &self.sketches[i * dim..(i + 1) * dim]
    }
}

/// Per-step sketches of a query, aligned with the plan.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySketches {
    pub per_step: Vec<CompressedVec>,
}

impl QuerySketches {
    pub fn dim(&self) -> usize {
        self.per_step.first().map_or(0, |c| c.len())
    }

    /// Concatenation in plan order, as stored in the KNN index.
    pub fn concatenated(&self) -> Vec<f32> {
        self.per_step
            .iter()
            .flat_map(|c| c.values.iter().copied())
            .collect()
    }

    pub fn from_concatenated(values: &[f32], dim: usize) -> Result<Self> {
        if dim == 0 || values.len() % dim != 0 {
            return Err(Error::Dimension {
                expected: dim,
                got: values.len(),
            });
        }
        Ok(Self {
            per_step: values
                .chunks(dim)
                .map(|c| CompressedVec { values: c.to_vec() })
                .collect(),
        })
    }
}

/// Everything needed to turn a data point into per-timestep unit gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradientSetup<'a> {
    pub model: &'a Denoiser<f32>,
    pub sched: &'a Schedule,
    pub plan: &'a TimestepPlan,
    pub noise: NoiseConfig,
}

impl GradientSetup<'_> {
    /// `g / |g|` for the loss gradient at timestep `t`.
    pub fn unit_gradient(&self, point: &DataPoint, sample_id: u64, t: usize) -> Result<UnitGradient> {
        let eps = self.noise.noise(sample_id, t, self.model.shape().data_dim);
        let g = grad_loss(self.model, point, t, &eps, self.sched)?;
        Ok(normalize(g))
    }

    /// Compressed unit gradients at every planned timestep.
    pub fn cache_sample(
        &self,
        ctx: &SketchContext,
        sample_id: u64,
        point: &DataPoint,
    ) -> Result<CompressedGradient> {
        let v = ctx.config().target_dim;
        if ctx.config().param_count != self.model.param_count() {
            return Err(Error::Dimension {
                expected: self.model.param_count(),
                got: ctx.config().param_count,
            });
        }
        let mut sketches = vec![0.0f32; self.plan.len() * v];
        let mut degenerate = false;
        for (i, &t) in self.plan.steps().iter().enumerate() {
            let unit = self
                .unit_gradient(point, sample_id, t)
                .map_err(|e| with_sample(e, sample_id))?;
            degenerate |= unit.degenerate;
            ctx.compress_into(&unit.values, &mut sketches[i * v..(i + 1) * v])?;
        }
        Ok(CompressedGradient {
            sample_id,
            sketches,
            degenerate,
        })
    }

    /// Query-side sketches, computed exactly as for cached samples.
    pub fn query_sketches(&self, ctx: &SketchContext, point: &DataPoint) -> Result<QuerySketches> {
        let cg = self.cache_sample(ctx, QUERY_ID, point)?;
        QuerySketches::from_concatenated(&cg.sketches, ctx.config().target_dim)
    }

    /// Uncompressed unit gradients at every planned timestep.
    pub fn unit_gradients(&self, point: &DataPoint, sample_id: u64) -> Result<Vec<UnitGradient>> {
        self.plan
            .steps()
            .iter()
            .map(|&t| self.unit_gradient(point, sample_id, t))
            .collect()
    }

    /// Reference scores without compression.
    pub fn score_exact(
        &self,
        query: &DataPoint,
        dataset: &[DataPoint],
        scale: ScaleConstants,
    ) -> Result<Vec<InfluenceRecord>> {
        Ok(self
            .score_exact_many(std::slice::from_ref(query), dataset, scale)?
            .pop()
            .unwrap_or_default())
    }

    /// Exact scores for several queries in one pass over the training set;
    /// each training gradient is computed once and dotted with every query.
    pub fn score_exact_many(
        &self,
        queries: &[DataPoint],
        dataset: &[DataPoint],
        scale: ScaleConstants,
    ) -> Result<Vec<Vec<InfluenceRecord>>> {
        let query_grads: Vec<Vec<UnitGradient>> = queries
            .par_iter()
            .map(|q| self.unit_gradients(q, QUERY_ID))
            .collect::<Result<_>>()?;
        let per_sample: Vec<Vec<f64>> = dataset
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let grads = self
                    .unit_gradients(p, i as u64)
                    .map_err(|e| with_sample(e, i as u64))?;
                Ok(query_grads
                    .iter()
                    .map(|qg| {
                        qg.iter()
                            .zip(&grads)
                            .map(|(a, b)| dot_f64(&a.values, &b.values))
                            .sum::<f64>()
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        let factor = scale.factor();
        Ok((0..queries.len())
            .map(|q| {
                per_sample
                    .iter()
                    .enumerate()
                    .map(|(i, s)| InfluenceRecord {
                        sample_id: i as u64,
                        score: factor * s[q],
                    })
                    .collect()
            })
            .collect())
    }
}

fn with_sample(err: Error, sample_id: u64) -> Error {
    match err {
        Error::Numeric(msg) => Error::Numeric(format!("sample {sample_id}: {msg}")),
        other => other,
    }
}

/// L2-normalizes `g`; near-zero gradients become the zero vector.
pub fn normalize(mut g: Vec<f32>) -> UnitGradient {
    let norm = g.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm < DEGENERATE_NORM {
        g.iter_mut().for_each(|x| *x = 0.0);
        return UnitGradient {
            values: g,
            degenerate: true,
        };
    }
    for x in g.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    UnitGradient {
        values: g,
        degenerate: false,
    }
}

/// Unscaled sum over steps of per-step sketch inner products, ascending
/// step order.
pub fn raw_score(query: &QuerySketches, record: &CompressedGradient) -> Result<f64> {
    let v = query.dim();
    let s = query.per_step.len();
    if record.sketches.len() != s * v {
        return Err(Error::CacheIncompatible(format!(
            "sample {} has {} floats, query expects {} steps x {} dims",
            record.sample_id,
            record.sketches.len(),
            s,
            v
        )));
    }
    Ok(query
        .per_step
        .iter()
        .enumerate()
        .map(|(i, q)| dot_f64(&q.values, record.step(i, v)))
        .sum())
}

/// Scores every record of a (possibly streamed) cache.
pub fn score_compressed<I>(
    query: &QuerySketches,
    cache: I,
    scale: ScaleConstants,
) -> Result<Vec<InfluenceRecord>>
where
    I: IntoIterator<Item = Result<CompressedGradient>>,
{
    let factor = scale.factor();
    cache
        .into_iter()
        .map(|rec| {
            let rec = rec?;
            Ok(InfluenceRecord {
                sample_id: rec.sample_id,
                score: factor * raw_score(query, &rec)?,
            })
        })
        .collect()
}

/// Descending by score, ties by ascending sample id.
pub fn rank_order(a: &InfluenceRecord, b: &InfluenceRecord) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.sample_id.cmp(&b.sample_id))
}

/// The `k` highest-scoring records, sorted by [`rank_order`].
pub fn topk(mut records: Vec<InfluenceRecord>, k: usize) -> Vec<InfluenceRecord> {
    let k = k.min(records.len());
    if k == 0 {
        return Vec::new();
    }
    if k < records.len() {
        records.select_nth_unstable_by(k - 1, rank_order);
        records.truncate(k);
    }
    records.sort_by(rank_order);
    records
}
