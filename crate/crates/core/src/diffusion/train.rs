//! Noise-prediction loss, its parameter gradient, and plain minibatch
//! gradient descent.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::diffusion::data::DataPoint;
use crate::diffusion::model::{Denoiser, Real};
use crate::diffusion::schedule::{forward_noise, Schedule};
use crate::error::{Error, Result};

/// Elements per work unit when a batch is split across threads. Fixed so the
/// summation order does not depend on the thread count.
const BATCH_CHUNK: usize = 4;

/// Mean squared error between predicted and true noise, and its gradient
/// with respect to every parameter, flattened in layout order.
pub fn loss_and_grad<F: Real>(
    model: &Denoiser<F>,
    x0: &[F],
    label: Option<u32>,
    t: usize,
    eps: &[F],
    sched: &Schedule,
) -> Result<(F, Vec<F>)> {
    let mut grad = vec![F::zero(); model.param_count()];
    let loss = accumulate_grad(model, x0, label, t, eps, sched, F::one(), &mut grad)?;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient at parameter {i} (timestep {t})"
        )));
    }
    Ok((loss, grad))
}

/// Gradient of the noise-prediction loss for one data point.
pub fn grad_loss(
    model: &Denoiser<f32>,
    point: &DataPoint,
    t: usize,
    eps: &[f32],
    sched: &Schedule,
) -> Result<Vec<f32>> {
    loss_and_grad(model, &point.x, point.label, t, eps, sched).map(|(_, g)| g)
}

/// Adds `scale * dL/dθ` into `grad` and returns the unscaled loss.
#[allow(clippy::too_many_arguments)]
fn accumulate_grad<F: Real>(
    model: &Denoiser<F>,
    x0: &[F],
    label: Option<u32>,
    t: usize,
    eps: &[F],
    sched: &Schedule,
    scale: F,
    grad: &mut [F],
) -> Result<F> {
    if eps.len() != model.shape().data_dim {
        return Err(Error::Dimension {
            expected: model.shape().data_dim,
            got: eps.len(),
        });
    }
    let z_t = forward_noise(x0, t, eps, sched)?;
    let acts = model.forward(&z_t, t, label)?;
    if acts.out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite noise prediction at timestep {t}"
        )));
    }
    let d = F::of(eps.len() as f64);
    let two = F::of(2.0);
    let mut loss = F::zero();
    let d_out: Vec<F> = acts
        .out
        .iter()
        .zip(eps)
        .map(|(&o, &e)| {
            let r = o - e;
            loss = loss + r * r;
            scale * two * r / d
        })
        .collect();
    model.backward_into(&acts, &d_out, label, grad);
    Ok(loss / d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Denoiser<f32>,
    pub epochs: usize,
    /// Constant learning rate, i.e. the average learning rate.
    pub lr: f64,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Minibatch gradient descent. Every element of a batch gets a uniformly
/// drawn timestep and fresh Gaussian noise.
pub fn train(
    mut model: Denoiser<f32>,
    data: &[DataPoint],
    sched: &Schedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidConfig(format!("invalid learning rate {}", cfg.lr)));
    }
    let dim = model.shape().data_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch) {
            let draws: Vec<(usize, usize, Vec<f32>)> = batch
                .iter()
                .map(|&i| {
                    let t = rng.random_range(1..=sched.steps());
                    let eps = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    (i, t, eps)
                })
                .collect();
            let scale = 1.0 / batch.len() as f32;
            let partials: Vec<(f64, Vec<f32>)> = draws
                .par_chunks(BATCH_CHUNK)
                .map(|chunk| {
                    let mut grad = vec![0.0f32; model.param_count()];
                    let mut loss = 0.0f64;
                    for (i, t, eps) in chunk {
                        let p = &data[*i];
                        loss += accumulate_grad(&model, &p.x, p.label, *t, eps, sched, scale, &mut grad)?
                            as f64;
                    }
                    Ok((loss, grad))
                })
                .collect::<Result<_>>()?;

            let params = model.params_mut();
            let lr = cfg.lr as f32;
            for (loss, grad) in &partials {
                epoch_loss += loss;
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() || model.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Training(format!("loss became non-finite in epoch {epoch}")));
        }
        epoch_losses.push(mean);
    }

    Ok(TrainOutcome {
        model,
        epochs: cfg.epochs,
        lr: cfg.lr,
        epoch_losses,
    })
}
