use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffusion::model::Denoiser;
use crate::diffusion::schedule::Schedule;
use crate::error::{Error, Result};

/// Ancestral DDPM sampling from `t = T` down to 1 with `sigma_t^2 = beta_t`.
pub fn sample_ddpm(
    model: &Denoiser<f32>,
    sched: &Schedule,
    label: Option<u32>,
    seed: u64,
) -> Result<Vec<f32>> {
    let dim = model.shape().data_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut z32 = vec![0.0f32; dim];

    for t in (1..=sched.steps()).rev() {
        for (z, v) in z32.iter_mut().zip(&x) {
            *z = *v as f32;
        }
        let eps_hat = model.predict(&z32, t, label)?;
        let (alpha, beta, ab) = (sched.alpha(t), sched.beta(t), sched.alpha_bar(t));
        let coef = beta / (1.0 - ab).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        for (v, e) in x.iter_mut().zip(&eps_hat) {
            *v = inv_sqrt_alpha * (*v - coef * *e as f64);
        }
        if t > 1 {
            let sigma = beta.sqrt();
            for v in x.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v += sigma * n;
            }
        }
    }

    let out: Vec<f32> = x.into_iter().map(|v| v as f32).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sample has non-finite entries".into()));
    }
    Ok(out)
}
