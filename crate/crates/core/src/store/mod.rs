//! Byte-exact persistence of gradient caches.
//!
//! A cache directory holds:
//!
//! | file               | layout (little-endian)                                    |
//! |--------------------|-----------------------------------------------------------|
//! | `manifest.txt`     | UTF-8 `key = value` lines, see [`Manifest`]               |
//! | `perm.bin`         | `"DMPM"`, `L_pad: u64`, `L_pad x u32` indices             |
//! | `signs.bin`        | `"DMSG"`, `L_pad: u64`, `ceil(L_pad/8)` bytes, LSB first  |
//! | `shard-NNNNN.bin`  | 20-byte header then records, see [`shard`]                |
//!
//! Shard header: `"DMIN"`, version `u16`, `v: u32`, `S: u16`,
//! `record_count: u64`. Record: `sample_id: u64` then `S * v` f32 values.

mod artifacts;
mod cache;
mod context;
mod manifest;
pub mod shard;

pub use artifacts::{read_dataset, read_model, write_dataset, write_model, ModelFile};
pub use cache::{
    validate, write_cache, Cache, CacheWriter, Finding, ValidationReport, DEFAULT_SHARD_LIMIT,
};
pub use context::{read_context, read_permutation, read_signs, write_context};
pub use manifest::{Manifest, SCHEMA_VERSION};
pub use shard::{ShardHeader, ShardReader, ShardWriter};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PERM_FILE: &str = "perm.bin";
pub const SIGN_FILE: &str = "signs.bin";

pub fn shard_file_name(index: usize) -> String {
    format!("shard-{index:05}.bin")
}

/// Size formulas for every persisted component.
pub mod sizes {
    pub const CONTEXT_HEADER: u64 = 12;
    pub const SHARD_HEADER: u64 = 20;
    pub const RECORD_ID: u64 = 8;

    pub fn perm_file(padded_len: u64) -> u64 {
        CONTEXT_HEADER + 4 * padded_len
    }

    pub fn sign_payload(padded_len: u64) -> u64 {
        padded_len.div_ceil(8)
    }

    pub fn sign_file(padded_len: u64) -> u64 {
        CONTEXT_HEADER + sign_payload(padded_len)
    }

    /// Compressed gradient bytes per sample, without the id.
    pub fn sample_payload(steps: u64, dim: u64) -> u64 {
        steps * dim * 4
    }

    pub fn record(steps: u64, dim: u64) -> u64 {
        RECORD_ID + sample_payload(steps, dim)
    }

    pub fn shard(records: u64, steps: u64, dim: u64) -> u64 {
        SHARD_HEADER + records * record(steps, dim)
    }

    /// Uncompressed f32 gradients of one sample over `steps` timesteps.
    pub fn uncompressed_sample(param_count: u64, steps: u64) -> u64 {
        param_count * 4 * steps
    }
}
