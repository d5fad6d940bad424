//! Count-sketch style gradient compression.
//!
//! A flat vector of length `L` is zero-padded to `L_pad` (the smallest
//! multiple of the target dimension `v`), permuted, multiplied elementwise by
//! a random ±1 vector, and finally summed in `v` contiguous groups of
//! `L_pad / v` elements. The map is linear, and inner products between
//! compressed vectors are unbiased estimates of the original inner products.
//!
//! Only the permutation (4 bytes per element) and the sign vector (1 bit per
//! element) have to be stored; both are re-derivable from the seed.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Dimensions of a sketch transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SketchConfig {
    pub param_count: usize,
    pub target_dim: usize,
    pub seed: u64,
    pub padded_len: usize,
}

impl SketchConfig {
    pub fn new(param_count: usize, target_dim: usize, seed: u64) -> Result<Self> {
        if param_count == 0 {
            return Err(Error::InvalidConfig("param_count must be at least 1".into()));
        }
        if target_dim == 0 {
            return Err(Error::InvalidConfig("target_dim must be at least 1".into()));
        }
        let padded_len = padded_len(param_count, target_dim);
        if padded_len as u64 >= 1u64 << 32 {
            return Err(Error::InvalidConfig(format!(
                "padded length {padded_len} does not fit 32-bit permutation indices"
            )));
        }
        Ok(Self {
            param_count,
            target_dim,
            seed,
            padded_len,
        })
    }

    /// Number of consecutive permuted elements summed into one output slot.
    pub fn group_size(&self) -> usize {
        self.padded_len / self.target_dim
    }
}

/// Smallest multiple of `target_dim` that is `>= param_count`.
pub fn padded_len(param_count: usize, target_dim: usize) -> usize {
    param_count.div_ceil(target_dim) * target_dim
}

/// Permutation of `0..L_pad`; slot `i` of the permuted vector reads
/// element `indices[i]` of the padded input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    indices: Vec<u32>,
}

impl Permutation {
    pub fn identity(len: usize) -> Self {
        Self {
            indices: (0..len as u32).collect(),
        }
    }

    /// Fisher–Yates shuffle of the identity driven by `rng`.
    pub fn shuffled(len: usize, rng: &mut SplitMix64) -> Self {
        let mut indices: Vec<u32> = (0..len as u32).collect();
        for i in (1..len).rev() {
            let j = rng.next_bounded(i as u64 + 1) as usize;
            indices.swap(i, j);
        }
        Self { indices }
    }

    /// Checks the bijection invariant.
    pub fn from_indices(indices: Vec<u32>) -> Result<Self> {
        let mut seen = vec![false; indices.len()];
        for &ix in &indices {
            let ix = ix as usize;
            if ix >= seen.len() || std::mem::replace(&mut seen[ix], true) {
                return Err(Error::Input(format!(
                    "permutation index {ix} is out of range or repeated"
                )));
            }
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Bit-packed ±1 vector. Bit `i` lives in byte `i / 8` at position `i % 8`
/// (LSB first); a set bit means +1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignVector {
    len: usize,
    bytes: Vec<u8>,
}

impl SignVector {
    pub fn all_positive(len: usize) -> Self {
        let mut bytes = vec![0xFF; len.div_ceil(8)];
        clear_tail(len, &mut bytes);
        Self { len, bytes }
    }

    /// One bit per element, taken LSB-first from successive 64-bit draws.
    pub fn random(len: usize, rng: &mut SplitMix64) -> Self {
        let mut bytes = Vec::with_capacity(len.div_ceil(8) + 8);
        while bytes.len() < len.div_ceil(8) {
            bytes.extend_from_slice(&rng.next_u64().to_le_bytes());
        }
        bytes.truncate(len.div_ceil(8));
        clear_tail(len, &mut bytes);
        Self { len, bytes }
    }

    pub fn from_signs(signs: &[i8]) -> Self {
        let mut bytes = vec![0u8; signs.len().div_ceil(8)];
        for (i, &s) in signs.iter().enumerate() {
            if s > 0 {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        Self {
            len: signs.len(),
            bytes,
        }
    }

    pub fn from_bytes(len: usize, mut bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::Dimension {
                expected: len.div_ceil(8),
                got: bytes.len(),
            });
        }
        clear_tail(len, &mut bytes);
        Ok(Self { len, bytes })
    }

    #[inline]
    pub fn is_positive(&self, i: usize) -> bool {
        self.bytes[i >> 3] & (1 << (i & 7)) != 0
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }
}

fn clear_tail(len: usize, bytes: &mut [u8]) {
    if len % 8 != 0 {
        if let Some(last) = bytes.last_mut() {
            *last &= (1u8 << (len % 8)) - 1;
        }
    }
}

/// A compressed vector of dimension `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedVec {
    pub values: Vec<f32>,
}

impl CompressedVec {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The reusable compression transform. Immutable once derived.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchContext {
    config: SketchConfig,
    perm: Permutation,
    signs: SignVector,
}

impl SketchContext {
    /// Derives the context from its seed: sub-stream 0 drives the
    /// permutation, sub-stream 1 the signs.
    pub fn derive(param_count: usize, target_dim: usize, seed: u64) -> Result<Self> {
        let config = SketchConfig::new(param_count, target_dim, seed)?;
        let [perm_seed, sign_seed] = SplitMix64::split::<2>(seed);
        let perm = Permutation::shuffled(config.padded_len, &mut SplitMix64::new(perm_seed));
        let signs = SignVector::random(config.padded_len, &mut SplitMix64::new(sign_seed));
        Ok(Self {
            config,
            perm,
            signs,
        })
    }

    /// Assembles a context from explicit parts, e.g. read back from disk.
    pub fn from_parts(config: SketchConfig, perm: Permutation, signs: SignVector) -> Result<Self> {
        if perm.len() != config.padded_len {
            return Err(Error::Dimension {
                expected: config.padded_len,
                got: perm.len(),
            });
        }
        if signs.len() != config.padded_len {
            return Err(Error::Dimension {
                expected: config.padded_len,
                got: signs.len(),
            });
        }
        if config.padded_len % config.target_dim != 0 || config.padded_len < config.param_count {
            return Err(Error::InvalidConfig(format!(
                "padded length {} incompatible with param_count {} and target_dim {}",
                config.padded_len, config.param_count, config.target_dim
            )));
        }
        Ok(Self {
            config,
            perm,
            signs,
        })
    }

    pub fn config(&self) -> &SketchConfig {
        &self.config
    }

    pub fn permutation(&self) -> &Permutation {
        &self.perm
    }

    pub fn signs(&self) -> &SignVector {
        &self.signs
    }

    pub fn compress(&self, g: &[f32]) -> Result<CompressedVec> {
        let mut values = vec![0.0; self.config.target_dim];
        self.compress_into(g, &mut values)?;
        Ok(CompressedVec { values })
    }

    /// Writes the sketch of `g` into `out` (length `v`). Each group is
    /// accumulated in f64 in ascending slot order.
    pub fn compress_into(&self, g: &[f32], out: &mut [f32]) -> Result<()> {
        let cfg = &self.config;
        if g.len() != cfg.param_count {
            return Err(Error::Dimension {
                expected: cfg.param_count,
                got: g.len(),
            });
        }
        if out.len() != cfg.target_dim {
            return Err(Error::Dimension {
                expected: cfg.target_dim,
                got: out.len(),
            });
        }
        let group = cfg.group_size();
        let perm = self.perm.indices();
        for (j, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for i in j * group..(j + 1) * group {
                let src = perm[i] as usize;
                // Indices past param_count read the zero padding.
                if src < g.len() {
                    let x = g[src] as f64;
                    if self.signs.is_positive(i) {
                        acc += x;
                    } else {
                        acc -= x;
                    }
                }
            }
            *slot = acc as f32;
        }
        Ok(())
    }
}

/// Dot product of two sketches, accumulated in f64.
pub fn sketch_inner(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(dot_f64(a, b))
}

#[inline]
pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}
