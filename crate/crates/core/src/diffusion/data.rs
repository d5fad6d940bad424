//! Synthetic clustered datasets standing in for labeled training subsets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub x: Vec<f32>,
    pub label: Option<u32>,
}

impl DataPoint {
    pub fn new(x: Vec<f32>, label: Option<u32>) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("data point has non-finite entries".into()));
        }
        Ok(Self { x, label })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub n_clusters: usize,
    pub per_cluster: usize,
    pub dim: usize,
    pub means: Vec<Vec<f32>>,
    pub stddev: f32,
    pub seed: u64,
}

impl ClusterSpec {
    /// Centers at `±separation * e_k`: cluster `c` sits on axis `c % dim`,
    /// with the sign flipping on every wrap around the axes.
    pub fn separated(
        n_clusters: usize,
        per_cluster: usize,
        dim: usize,
        separation: f32,
        stddev: f32,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("dim must be positive".into()));
        }
        let means = (0..n_clusters)
            .map(|c| {
                let mut m = vec![0.0; dim];
                let sign = if (c / dim) % 2 == 0 { 1.0 } else { -1.0 };
                m[c % dim] = sign * separation;
                m
            })
            .collect();
        let spec = Self {
            n_clusters,
            per_cluster,
            dim,
            means,
            stddev,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 {
            return Err(Error::InvalidConfig("need at least one cluster".into()));
        }
        if !(self.stddev > 0.0 && self.stddev.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "cluster stddev must be positive, got {}",
                self.stddev
            )));
        }
        if self.means.len() != self.n_clusters || self.means.iter().any(|m| m.len() != self.dim) {
            return Err(Error::InvalidConfig(
                "cluster means must have one center of length dim per cluster".into(),
            ));
        }
        Ok(())
    }
}

/// `per_cluster` Gaussian points around each mean, cluster-major order,
/// labelled with the cluster index.
pub fn gen_clusters(spec: &ClusterSpec) -> Result<Vec<DataPoint>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0f32, spec.stddev)
        .map_err(|e| Error::InvalidConfig(format!("cluster noise: {e}")))?;
    let mut out = Vec::with_capacity(spec.n_clusters * spec.per_cluster);
    for (c, mean) in spec.means.iter().enumerate() {
        for _ in 0..spec.per_cluster {
            let x = mean.iter().map(|&m| m + normal.sample(&mut rng)).collect();
            out.push(DataPoint {
                x,
                label: Some(c as u32),
            });
        }
    }
    Ok(out)
}
