use std::fmt;
use std::str::FromStr;

use crate::diffusion::model::Real;
use crate::error::{Error, Result};

/// Linear beta schedule. Timesteps are 1-based: `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub beta_start: f64,
    pub beta_end: f64,
    pub forward: ForwardNoise,
}

impl Schedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            beta_start,
            beta_end,
            forward: ForwardNoise::Scaled,
        })
    }

    pub fn with_forward(mut self, forward: ForwardNoise) -> Self {
        self.forward = forward;
        self
    }

    /// Coefficients `(a, b)` of `z_t = a z0 + b eps`.
    pub fn noise_coefficients(&self, t: usize) -> (f64, f64) {
        match self.forward {
            ForwardNoise::Scaled => {
                let ab = self.alpha_bar(t);
                (ab.sqrt(), (1.0 - ab).sqrt())
            }
            ForwardNoise::Unscaled => (1.0, 1.0),
        }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Range {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }
}

/// How a clean latent is noised to timestep `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ForwardNoise {
    /// `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`
    #[default]
    Scaled,
    /// `z_t = z0 + eps`
    Unscaled,
}

impl fmt::Display for ForwardNoise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ForwardNoise::Scaled => "scaled",
            ForwardNoise::Unscaled => "unscaled",
        })
    }
}

impl FromStr for ForwardNoise {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaled" => Ok(ForwardNoise::Scaled),
            "unscaled" => Ok(ForwardNoise::Unscaled),
            other => Err(Error::InvalidConfig(format!(
                "forward noise must be `scaled` or `unscaled`, got `{other}`"
            ))),
        }
    }
}

/// Noises `z0` to timestep `t` with noise `eps`.
pub fn forward_noise<F: Real>(
    z0: &[F],
    t: usize,
    eps: &[F],
    sched: &Schedule,
) -> Result<Vec<F>> {
    sched.check(t)?;
    if z0.len() != eps.len() {
        return Err(Error::Dimension {
            expected: z0.len(),
            got: eps.len(),
        });
    }
    let (a, b) = sched.noise_coefficients(t);
    Ok(noise_with(z0, eps, F::of(a), F::of(b)))
}

pub(crate) fn noise_with<F: Real>(z0: &[F], eps: &[F], a: F, b: F) -> Vec<F> {
    z0.iter().zip(eps).map(|(&z, &e)| a * z + b * e).collect()
}
