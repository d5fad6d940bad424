#![allow(dead_code)]

use std::path::Path;

use diffusion_influence::diffusion::{
    gen_clusters, train, ClusterSpec, DataPoint, Denoiser, ModelShape, Schedule, TrainConfig,
};
use diffusion_influence::influence::{
    GradientSetup, NoiseConfig, QuerySketches, ScaleConstants, TimestepPlan,
};
use diffusion_influence::rng::{fill_standard_normal, SplitMix64};
use diffusion_influence::sketch::SketchContext;
use diffusion_influence::store::{write_cache, Cache};

pub fn gaussian_f32(rng: &mut SplitMix64, n: usize) -> Vec<f32> {
    let mut buf = vec![0.0f64; n];
    fill_standard_normal(rng, &mut buf);
    buf.into_iter().map(|x| x as f32).collect()
}

pub fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub struct ToySpec {
    pub clusters: usize,
    pub per_cluster: usize,
    pub dim: usize,
    pub separation: f32,
    pub hidden: usize,
    pub timesteps: usize,
    pub epochs: usize,
    pub plan_steps: usize,
    pub target_dim: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            clusters: 3,
            per_cluster: 100,
            dim: 4,
            separation: 3.0,
            hidden: 16,
            timesteps: 50,
            epochs: 10,
            plan_steps: 4,
            target_dim: 64,
            seed: 11,
        }
    }
}

/// A trained toy model with a sealed gradient cache.
pub struct Toy {
    pub spec: ClusterSpec,
    pub data: Vec<DataPoint>,
    pub model: Denoiser<f32>,
    pub sched: Schedule,
    pub plan: TimestepPlan,
    pub noise: NoiseConfig,
    pub ctx: SketchContext,
    pub scale: ScaleConstants,
    pub cache: Cache,
}

impl Toy {
    pub fn build(t: &ToySpec, dir: &Path) -> Toy {
        let spec = ClusterSpec::separated(t.clusters, t.per_cluster, t.dim, t.separation, 1.0, t.seed)
            .unwrap();
        let data = gen_clusters(&spec).unwrap();
        let sched = Schedule::linear(t.timesteps, 1e-4, 0.05).unwrap();
        let shape = ModelShape::new(t.dim, t.hidden, t.clusters).unwrap();
        let cfg = TrainConfig {
            epochs: t.epochs,
            lr: 0.05,
            batch: 32,
            seed: t.seed + 1,
        };
        let model = train(Denoiser::init(shape, t.seed + 2), &data, &sched, &cfg)
            .unwrap()
            .model;
        let plan = TimestepPlan::evenly_spaced(t.timesteps, t.plan_steps).unwrap();
        let noise = NoiseConfig::shared(t.seed + 3);
        let ctx = SketchContext::derive(model.param_count(), t.target_dim, t.seed + 4).unwrap();
        let scale = ScaleConstants::new(t.epochs as f64, cfg.lr).unwrap();
        let setup = GradientSetup {
            model: &model,
            sched: &sched,
            plan: &plan,
            noise,
        };
        write_cache(dir, &setup, &ctx, &data, scale).unwrap();
        Toy {
            spec,
            data,
            model,
            sched,
            plan,
            noise,
            ctx,
            scale,
            cache: Cache::open(dir).unwrap(),
        }
    }

    pub fn setup(&self) -> GradientSetup<'_> {
        GradientSetup {
            model: &self.model,
            sched: &self.sched,
            plan: &self.plan,
            noise: self.noise,
        }
    }

    /// Fresh points drawn around the same cluster centers.
    pub fn probes(&self, per_cluster: usize, seed: u64) -> Vec<DataPoint> {
        gen_clusters(&ClusterSpec {
            per_cluster,
            seed,
            ..self.spec.clone()
        })
        .unwrap()
    }

    pub fn query(&self, p: &DataPoint) -> QuerySketches {
        self.setup().query_sketches(&self.ctx, p).unwrap()
    }
}
