//! MLP noise predictor with manual reverse-mode gradients.
//!
//! Forward pass for noisy latent `z` (dim `D`), timestep `t` and optional
//! class label `c`:
//!
//! ```text
//! x   = [z ; E[c]]                      (E[c] omitted when C = 0)
//! tau = W_t sin_cos(t) + b_t            (32-dim sinusoidal embedding)
//! h1  = tanh(W_in x + b_in + tau)
//! h2  = tanh(W_1 h1 + b_1)
//! h3  = tanh(W_2 h2 + b_2)
//! out = W_out h3 + b_out
//! ```
//!
//! Flat parameter order (all matrices row-major, rows = outputs):
//! `W_in, b_in, W_1, b_1, W_2, b_2, W_out, b_out, E, W_t, b_t`.
//!
//! With `K = D + e` (`e = 16` if conditional, else 0) the parameter count is
//! `L = H*K + H + 2*(H*H + H) + D*H + D + C*e + 32*H + H`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::Range;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TIME_EMBED_DIM: usize = 32;
pub const CLASS_EMBED_DIM: usize = 16;

/// Scalar type the model can run in: f32 for training and caching, f64 for
/// finite-difference verification.
pub trait Real: Float + Sum + Send + Sync + Debug + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub data_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone)]
pub struct Layout {
    pub w_in: Range<usize>,
    pub b_in: Range<usize>,
    pub w_h1: Range<usize>,
    pub b_h1: Range<usize>,
    pub w_h2: Range<usize>,
    pub b_h2: Range<usize>,
    pub w_out: Range<usize>,
    pub b_out: Range<usize>,
    pub class_table: Range<usize>,
    pub w_time: Range<usize>,
    pub b_time: Range<usize>,
}

impl ModelShape {
    pub fn new(data_dim: usize, hidden_dim: usize, n_classes: usize) -> Result<Self> {
        if data_dim == 0 || hidden_dim == 0 {
            return Err(Error::InvalidConfig(
                "data_dim and hidden_dim must be positive".into(),
            ));
        }
        Ok(Self {
            data_dim,
            hidden_dim,
            n_classes,
        })
    }

    pub fn class_dim(&self) -> usize {
        if self.n_classes > 0 {
            CLASS_EMBED_DIM
        } else {
            0
        }
    }

    pub fn input_width(&self) -> usize {
        self.data_dim + self.class_dim()
    }

    /// Closed-form flat parameter count.
    pub fn param_count(&self) -> usize {
        let (d, h, k) = (self.data_dim, self.hidden_dim, self.input_width());
        h * k + h + 2 * (h * h + h) + d * h + d + self.n_classes * self.class_dim()
            + TIME_EMBED_DIM * h
            + h
    }

    pub fn layout(&self) -> Layout {
        let (d, h, k) = (self.data_dim, self.hidden_dim, self.input_width());
        let mut at = 0;
        let mut next = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Layout {
            w_in: next(h * k),
            b_in: next(h),
            w_h1: next(h * h),
            b_h1: next(h),
            w_h2: next(h * h),
            b_h2: next(h),
            w_out: next(d * h),
            b_out: next(d),
            class_table: next(self.n_classes * self.class_dim()),
            w_time: next(TIME_EMBED_DIM * h),
            b_time: next(h),
        }
    }
}

/// Sinusoidal embedding of a timestep: 16 sines then 16 cosines with
/// geometrically spaced frequencies `10000^(-i/16)`.
pub fn timestep_embedding<F: Real>(t: usize) -> [F; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut out = [F::zero(); TIME_EMBED_DIM];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = F::of(arg.sin());
        out[half + i] = F::of(arg.cos());
    }
    out
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Activations<F> {
    pub input: Vec<F>,
    pub temb: [F; TIME_EMBED_DIM],
    pub h1: Vec<F>,
    pub h2: Vec<F>,
    pub h3: Vec<F>,
    pub out: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<F> {
    shape: ModelShape,
    params: Vec<F>,
}

impl<F: Real> Denoiser<F> {
    pub fn zeros(shape: ModelShape) -> Self {
        Self {
            shape,
            params: vec![F::zero(); shape.param_count()],
        }
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases, unit-scale class
    /// embeddings.
    pub fn init(shape: ModelShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::zeros(shape);
        let lay = shape.layout();
        let h = shape.hidden_dim;
        let mut fill = |params: &mut [F], range: Range<usize>, bound: f64| {
            for p in &mut params[range] {
                *p = F::of(rng.random_range(-bound..bound));
            }
        };
        fill(&mut model.params, lay.w_in, 1.0 / (shape.input_width() as f64).sqrt());
        fill(&mut model.params, lay.w_h1, 1.0 / (h as f64).sqrt());
        fill(&mut model.params, lay.w_h2, 1.0 / (h as f64).sqrt());
        fill(&mut model.params, lay.w_out, 1.0 / (h as f64).sqrt());
        fill(&mut model.params, lay.class_table, 1.0);
        fill(&mut model.params, lay.w_time, 1.0 / (TIME_EMBED_DIM as f64).sqrt());
        model
    }

    pub fn from_flat(shape: ModelShape, params: Vec<F>) -> Result<Self> {
        if params.len() != shape.param_count() {
            return Err(Error::Dimension {
                expected: shape.param_count(),
                got: params.len(),
            });
        }
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn into_flat(self) -> Vec<F> {
        self.params
    }

    pub fn cast<G: Real>(&self) -> Denoiser<G> {
        Denoiser {
            shape: self.shape,
            params: self.params.iter().map(|p| G::of(p.as_f64())).collect(),
        }
    }

    fn check_inputs(&self, z: &[F], label: Option<u32>) -> Result<()> {
        if z.len() != self.shape.data_dim {
            return Err(Error::Dimension {
                expected: self.shape.data_dim,
                got: z.len(),
            });
        }
        // Unconditional models ignore labels.
        if let (Some(c), true) = (label, self.shape.n_classes > 0) {
            if c as usize >= self.shape.n_classes {
                return Err(Error::Input(format!(
                    "label {c} out of range for a model with {} classes",
                    self.shape.n_classes
                )));
            }
        }
        Ok(())
    }

    /// Predicted noise for `z` at timestep `t`. A conditional model given no
    /// label uses a zero class embedding.
    pub fn predict(&self, z: &[F], t: usize, label: Option<u32>) -> Result<Vec<F>> {
        Ok(self.forward(z, t, label)?.out)
    }

    pub fn forward(&self, z: &[F], t: usize, label: Option<u32>) -> Result<Activations<F>> {
        self.check_inputs(z, label)?;
        let s = &self.shape;
        let lay = s.layout();
        let p = &self.params;
        let h = s.hidden_dim;

        let mut input = Vec::with_capacity(s.input_width());
        input.extend_from_slice(z);
        if s.class_dim() > 0 {
            match label {
                Some(c) => {
                    let row = lay.class_table.start + c as usize * s.class_dim();
                    input.extend_from_slice(&p[row..row + s.class_dim()]);
                }
                None => input.extend(std::iter::repeat_n(F::zero(), s.class_dim())),
            }
        }

        let temb = timestep_embedding::<F>(t);
        let tau = affine(&p[lay.w_time], &p[lay.b_time], &temb, h);
        let mut a1 = affine(&p[lay.w_in], &p[lay.b_in], &input, h);
        for (a, t) in a1.iter_mut().zip(&tau) {
            *a = *a + *t;
        }
        let h1: Vec<F> = a1.into_iter().map(F::tanh).collect();
        let h2: Vec<F> = affine(&p[lay.w_h1], &p[lay.b_h1], &h1, h)
            .into_iter()
            .map(F::tanh)
            .collect();
        let h3: Vec<F> = affine(&p[lay.w_h2], &p[lay.b_h2], &h2, h)
            .into_iter()
            .map(F::tanh)
            .collect();
        let out = affine(&p[lay.w_out], &p[lay.b_out], &h3, s.data_dim);
        Ok(Activations {
            input,
            temb,
            h1,
            h2,
            h3,
            out,
        })
    }

    /// Adds `dL/dθ` to `grad` given `dL/d(out)`.
    pub fn backward_into(
        &self,
        acts: &Activations<F>,
        d_out: &[F],
        label: Option<u32>,
        grad: &mut [F],
    ) {
        let s = &self.shape;
        let lay = s.layout();
        let p = &self.params;

        let d_h3 = affine_backward(&p[lay.w_out.clone()], &acts.h3, d_out, grad, &lay.w_out, &lay.b_out);
        let d_a3 = tanh_backward(&acts.h3, &d_h3);
        let d_h2 = affine_backward(&p[lay.w_h2.clone()], &acts.h2, &d_a3, grad, &lay.w_h2, &lay.b_h2);
        let d_a2 = tanh_backward(&acts.h2, &d_h2);
        let d_h1 = affine_backward(&p[lay.w_h1.clone()], &acts.h1, &d_a2, grad, &lay.w_h1, &lay.b_h1);
        let d_a1 = tanh_backward(&acts.h1, &d_h1);
        let d_input = affine_backward(&p[lay.w_in.clone()], &acts.input, &d_a1, grad, &lay.w_in, &lay.b_in);
        affine_backward(&p[lay.w_time.clone()], &acts.temb, &d_a1, grad, &lay.w_time, &lay.b_time);

        if let (Some(c), true) = (label, s.class_dim() > 0) {
            let row = lay.class_table.start + c as usize * s.class_dim();
            for (g, d) in grad[row..row + s.class_dim()]
                .iter_mut()
                .zip(&d_input[s.data_dim..])
            {
                *g = *g + *d;
            }
        }
    }
}

impl Denoiser<f32> {
    /// SHA-256 over the little-endian bytes of the flat weights, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.to_le_bytes());
        }
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `W x + b` for a row-major `rows x x.len()` matrix.
fn affine<F: Real>(w: &[F], b: &[F], x: &[F], rows: usize) -> Vec<F> {
    let cols = x.len();
    debug_assert_eq!(w.len(), rows * cols);
    (0..rows)
        .map(|r| {
            let row = &w[r * cols..(r + 1) * cols];
            row.iter().zip(x).fold(b[r], |acc, (&wi, &xi)| acc + wi * xi)
        })
        .collect()
}

/// Accumulates weight and bias gradients into `grad` and returns `dL/dx`.
fn affine_backward<F: Real>(
    w: &[F],
    x: &[F],
    d_y: &[F],
    grad: &mut [F],
    w_range: &Range<usize>,
    b_range: &Range<usize>,
) -> Vec<F> {
    let cols = x.len();
    let mut d_x = vec![F::zero(); cols];
    {
        let gw = &mut grad[w_range.clone()];
        for (r, &dy) in d_y.iter().enumerate() {
            let row_g = &mut gw[r * cols..(r + 1) * cols];
            let row_w = &w[r * cols..(r + 1) * cols];
            for c in 0..cols {
                row_g[c] = row_g[c] + dy * x[c];
                d_x[c] = d_x[c] + row_w[c] * dy;
            }
        }
    }
    for (g, &dy) in grad[b_range.clone()].iter_mut().zip(d_y) {
        *g = *g + dy;
    }
    d_x
}

fn tanh_backward<F: Real>(h: &[F], d_h: &[F]) -> Vec<F> {
    h.iter()
        .zip(d_h)
        .map(|(&y, &d)| d * (F::one() - y * y))
        .collect()
}
