use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::diffusion::model::hex_string;
use crate::diffusion::{Denoiser, ForwardNoise, Schedule};
use crate::error::{Error, Result};
use crate::influence::{GradientSetup, NoiseConfig, NoiseMode, ScaleConstants, TimestepPlan};
use crate::kv::{join_list, KeyValues};
use crate::sketch::{padded_len, SketchContext};
use crate::store::MANIFEST_FILE;

pub const SCHEMA_VERSION: u32 = 1;

/// Run metadata binding a cache to its model, seeds, plan and compression.
///
/// Keys: `schema_version`, `model_hash`, `param_count`, `padded_len`,
/// `target_dim`, `steps` (comma list), `num_timesteps`, `beta_start`,
/// `beta_end`, `forward_noise` (`scaled|unscaled`), `sketch_seed`,
/// `noise_seed`, `noise_mode` (`shared|per-sample`), `dtype` (`f32`),
/// `sample_count`, `shard_count`, `epochs`, `avg_lr`, `normalized`,
/// `degenerate_ids` (comma list, may be empty).
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub schema_version: u32,
    pub model_hash: String,
    pub param_count: usize,
    pub padded_len: usize,
    pub target_dim: usize,
    pub steps: Vec<usize>,
    pub num_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub forward_noise: ForwardNoise,
    pub sketch_seed: u64,
    pub noise_seed: u64,
    pub noise_mode: NoiseMode,
    pub dtype: String,
    pub sample_count: u64,
    pub shard_count: usize,
    pub epochs: f64,
    pub avg_lr: f64,
    pub normalized: bool,
    pub degenerate_ids: Vec<u64>,
}

impl Manifest {
    /// Manifest for a cache about to be written; counts are filled in by
    /// [`crate::store::CacheWriter::finish`].
    pub fn describe(
        setup: &GradientSetup<'_>,
        ctx: &SketchContext,
        scale: ScaleConstants,
    ) -> Self {
        let cfg = ctx.config();
        Self {
            schema_version: SCHEMA_VERSION,
            model_hash: setup.model.content_hash(),
            param_count: cfg.param_count,
            padded_len: cfg.padded_len,
            target_dim: cfg.target_dim,
            steps: setup.plan.steps().to_vec(),
            num_timesteps: setup.sched.steps(),
            beta_start: setup.sched.beta_start,
            beta_end: setup.sched.beta_end,
            forward_noise: setup.sched.forward,
            sketch_seed: cfg.seed,
            noise_seed: setup.noise.seed,
            noise_mode: setup.noise.mode,
            dtype: "f32".into(),
            sample_count: 0,
            shard_count: 0,
            epochs: scale.epochs,
            avg_lr: scale.avg_lr,
            normalized: true,
            degenerate_ids: Vec::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::default();
        kv.insert("schema_version", self.schema_version);
        kv.insert("model_hash", &self.model_hash);
        kv.insert("param_count", self.param_count);
        kv.insert("padded_len", self.padded_len);
        kv.insert("target_dim", self.target_dim);
        kv.insert("steps", join_list(&self.steps));
        kv.insert("num_timesteps", self.num_timesteps);
        kv.insert("beta_start", self.beta_start);
        kv.insert("beta_end", self.beta_end);
        kv.insert("forward_noise", self.forward_noise);
        kv.insert("sketch_seed", self.sketch_seed);
        kv.insert("noise_seed", self.noise_seed);
        kv.insert("noise_mode", self.noise_mode);
        kv.insert("dtype", &self.dtype);
        kv.insert("sample_count", self.sample_count);
        kv.insert("shard_count", self.shard_count);
        kv.insert("epochs", self.epochs);
        kv.insert("avg_lr", self.avg_lr);
        kv.insert("normalized", self.normalized);
        kv.insert("degenerate_ids", join_list(&self.degenerate_ids));
        format!("# gradient cache manifest\n{}", kv.to_text())
    }

    /// Parses the text form. Only syntax and types are checked here; use
    /// [`Manifest::findings`] for cross-field consistency.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        Ok(Self {
            schema_version: kv.require("schema_version")?,
            model_hash: kv.require("model_hash")?,
            param_count: kv.require("param_count")?,
            padded_len: kv.require("padded_len")?,
            target_dim: kv.require("target_dim")?,
            steps: kv
                .list("steps")?
                .ok_or_else(|| Error::InvalidConfig("missing key `steps`".into()))?,
            num_timesteps: kv.require("num_timesteps")?,
            beta_start: kv.require("beta_start")?,
            beta_end: kv.require("beta_end")?,
            forward_noise: kv.require("forward_noise")?,
            sketch_seed: kv.require("sketch_seed")?,
            noise_seed: kv.require("noise_seed")?,
            noise_mode: kv.require("noise_mode")?,
            dtype: kv.require("dtype")?,
            sample_count: kv.require("sample_count")?,
            shard_count: kv.require("shard_count")?,
            epochs: kv.require("epochs")?,
            avg_lr: kv.require("avg_lr")?,
            normalized: kv.require("normalized")?,
            degenerate_ids: kv.list("degenerate_ids")?.unwrap_or_default(),
        })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)?;
        Self::parse(&text).map_err(|e| Error::format(&path, 0, e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), self.to_text())?;
        Ok(())
    }

    /// SHA-256 of the text form, hex encoded.
    pub fn hash(&self) -> String {
        hex_string(&Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn hash_bytes(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    /// Cross-field consistency problems, empty when the manifest is sound.
    pub fn findings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            out.push(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.target_dim == 0 {
            out.push("target_dim is zero".into());
        } else {
            if self.padded_len % self.target_dim != 0 {
                out.push(format!(
                    "target_dim {} does not divide padded_len {}",
                    self.target_dim, self.padded_len
                ));
            }
            if self.param_count > 0 && self.padded_len != padded_len(self.param_count, self.target_dim)
            {
                out.push(format!(
                    "padded_len {} is not the smallest multiple of {} >= param_count {}",
                    self.padded_len, self.target_dim, self.param_count
                ));
            }
        }
        if self.param_count == 0 {
            out.push("param_count is zero".into());
        }
        if let Err(e) = TimestepPlan::from_steps(self.steps.clone(), self.num_timesteps) {
            out.push(format!("steps: {e}"));
        }
        if self.steps.len() > u16::MAX as usize {
            out.push("more timesteps than a shard header can record".into());
        }
        if let Err(e) = Schedule::linear(self.num_timesteps, self.beta_start, self.beta_end) {
            out.push(format!("schedule: {e}"));
        }
        if self.dtype != "f32" {
            out.push(format!("dtype `{}` unsupported (expected f32)", self.dtype));
        }
        if !(self.epochs > 0.0 && self.avg_lr > 0.0) {
            out.push("epochs and avg_lr must be positive".into());
        }
        out
    }

    pub fn plan(&self) -> Result<TimestepPlan> {
        TimestepPlan::from_steps(self.steps.clone(), self.num_timesteps)
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Ok(Schedule::linear(self.num_timesteps, self.beta_start, self.beta_end)?
            .with_forward(self.forward_noise))
    }

    pub fn scale(&self) -> Result<ScaleConstants> {
        ScaleConstants::new(self.epochs, self.avg_lr)
    }

    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig {
            seed: self.noise_seed,
            mode: self.noise_mode,
        }
    }

    /// Floats per record.
    pub fn record_width(&self) -> usize {
        self.steps.len() * self.target_dim
    }

    /// Refuses to score with a model other than the one that built the cache.
    pub fn check_model(&self, model: &Denoiser<f32>) -> Result<()> {
        if model.param_count() != self.param_count {
            return Err(Error::CacheIncompatible(format!(
                "model has {} parameters, cache expects {}",
                model.param_count(),
                self.param_count
            )));
        }
        let hash = model.content_hash();
        if hash != self.model_hash {
            return Err(Error::CacheIncompatible(format!(
                "model hash {hash} does not match cache model hash {}",
                self.model_hash
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn sample_manifest() -> Manifest {
        Manifest {
            schema_version: SCHEMA_VERSION,
            model_hash: "ab".repeat(32),
            param_count: 10,
            padded_len: 12,
            target_dim: 4,
            steps: vec![25, 50],
            num_timesteps: 50,
            beta_start: 1e-4,
            beta_end: 0.05,
            forward_noise: ForwardNoise::Scaled,
            sketch_seed: 7,
            noise_seed: 8,
            noise_mode: NoiseMode::Shared,
            dtype: "f32".into(),
            sample_count: 3,
            shard_count: 1,
            epochs: 200.0,
            avg_lr: 0.05,
            normalized: true,
            degenerate_ids: vec![],
        }
    }

    #[test]
    fn text_round_trip() {
        let mut m = sample_manifest();
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        m.degenerate_ids = vec![4, 9];
        m.noise_mode = NoiseMode::PerSample;
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn missing_key_rejected() {
        let text = sample_manifest().to_text().replace("noise_seed = 8\n", "");
        assert!(Manifest::parse(&text).is_err());
    }

    #[test]
    fn consistency_findings() {
        assert!(sample_manifest().findings().is_empty());
        let mut m = sample_manifest();
        m.target_dim = 5;
        assert!(m.findings().iter().any(|f| f.contains("does not divide")));
        let mut m = sample_manifest();
        m.steps = vec![10, 60];
        assert!(m.findings().iter().any(|f| f.starts_with("steps")));
    }

    #[test]
    fn hash_changes_with_content() {
        let a = sample_manifest();
        let mut b = a.clone();
        b.sample_count += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), sample_manifest().hash());
    }
}
