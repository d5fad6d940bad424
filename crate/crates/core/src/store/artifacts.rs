//! Dataset and model files written next to a cache.
//!
//! Dataset: `"DMDS"`, version `u16`, `dim: u32`, `count: u64`, then per point
//! `label: u32` (`u32::MAX` = none) and `dim` f32 values.
//!
//! Model: `"DMMD"`, version `u16`, `D, H, C, T: u32`, `beta_start,
//! beta_end: f64`, forward-noise flag `u8` (0 scaled, 1 unscaled),
//! `epochs: u64`, `lr: f64`, `param_count: u64`, then the flat f32 weights.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::diffusion::{DataPoint, Denoiser, ForwardNoise, ModelShape, Schedule};
use crate::error::{Error, Result};

const DATASET_MAGIC: &[u8; 4] = b"DMDS";
const MODEL_MAGIC: &[u8; 4] = b"DMMD";
const VERSION: u16 = 1;
const NO_LABEL: u32 = u32::MAX;

/// A trained denoiser with the schedule and training constants it was
/// trained under.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub model: Denoiser<f32>,
    pub num_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub forward_noise: ForwardNoise,
    pub epochs: usize,
    pub lr: f64,
}

impl ModelFile {
    pub fn schedule(&self) -> Result<Schedule> {
        Ok(Schedule::linear(self.num_timesteps, self.beta_start, self.beta_end)?
            .with_forward(self.forward_noise))
    }
}

struct Cursor<'a> {
    r: BufReader<File>,
    path: &'a Path,
    offset: u64,
}

impl<'a> Cursor<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        Ok(Self {
            r: BufReader::new(File::open(path)?),
            path,
            offset: 0,
        })
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.r.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => {
                Error::format(self.path, self.offset, "unexpected end of file")
            }
            _ => Error::Io(e),
        })?;
        self.offset += N as u64;
        Ok(b)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if &self.bytes::<4>()? != magic {
            return Err(Error::format(self.path, 0, format!("bad magic, expected {magic:?}")));
        }
        let version = self.u16()?;
        if version != VERSION {
            return Err(Error::format(self.path, 4, format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut extra = [0u8; 1];
        if self.r.read(&mut extra)? != 0 {
            return Err(Error::format(self.path, self.offset, "trailing bytes"));
        }
        Ok(())
    }
}

fn u32_field(name: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("{name} {v} exceeds u32")))
}

pub fn write_dataset(path: &Path, data: &[DataPoint]) -> Result<()> {
    let dim = data.first().map_or(0, |p| p.x.len());
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32_field("dim", dim)?.to_le_bytes())?;
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    for p in data {
        if p.x.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: p.x.len(),
            });
        }
        w.write_all(&p.label.unwrap_or(NO_LABEL).to_le_bytes())?;
        for x in &p.x {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<DataPoint>> {
    let mut c = Cursor::open(path)?;
    c.magic(DATASET_MAGIC)?;
    let dim = c.u32()? as usize;
    let count = c.u64()?;
    let expected = 18 + count.saturating_mul(4 + 4 * dim as u64);
    let actual = std::fs::metadata(path)?.len();
    if actual != expected {
        return Err(Error::format(
            path,
            actual.min(expected),
            format!("file is {actual} bytes, {count} points of dim {dim} need {expected}"),
        ));
    }
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let at = c.offset;
        let label = match c.u32()? {
            NO_LABEL => None,
            l => Some(l),
        };
        let x = (0..dim).map(|_| c.f32()).collect::<Result<Vec<_>>>()?;
        out.push(DataPoint::new(x, label).map_err(|e| Error::format(path, at, e.to_string()))?);
    }
    Ok(out)
}

pub fn write_model(path: &Path, file: &ModelFile) -> Result<()> {
    let shape = file.model.shape();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, v) in [
        ("data_dim", shape.data_dim),
        ("hidden_dim", shape.hidden_dim),
        ("n_classes", shape.n_classes),
        ("num_timesteps", file.num_timesteps),
    ] {
        w.write_all(&u32_field(name, v)?.to_le_bytes())?;
    }
    w.write_all(&file.beta_start.to_le_bytes())?;
    w.write_all(&file.beta_end.to_le_bytes())?;
    w.write_all(&[match file.forward_noise {
        ForwardNoise::Scaled => 0,
        ForwardNoise::Unscaled => 1,
    }])?;
    w.write_all(&(file.epochs as u64).to_le_bytes())?;
    w.write_all(&file.lr.to_le_bytes())?;
    w.write_all(&(file.model.param_count() as u64).to_le_bytes())?;
    for p in file.model.params() {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    let mut c = Cursor::open(path)?;
    c.magic(MODEL_MAGIC)?;
    let data_dim = c.u32()? as usize;
    let hidden_dim = c.u32()? as usize;
    let n_classes = c.u32()? as usize;
    let num_timesteps = c.u32()? as usize;
    let shape = ModelShape::new(data_dim, hidden_dim, n_classes)
        .map_err(|e| Error::format(path, 6, e.to_string()))?;
    let beta_start = c.f64()?;
    let beta_end = c.f64()?;
    let forward_noise = match c.u8()? {
        0 => ForwardNoise::Scaled,
        1 => ForwardNoise::Unscaled,
        f => return Err(Error::format(path, c.offset - 1, format!("bad forward-noise flag {f}"))),
    };
    let epochs = c.u64()? as usize;
    let lr = c.f64()?;
    let count = c.u64()? as usize;
    if count != shape.param_count() {
        return Err(Error::format(
            path,
            c.offset - 8,
            format!("{count} parameters stored, shape needs {}", shape.param_count()),
        ));
    }
    let params = (0..count).map(|_| c.f32()).collect::<Result<Vec<_>>>()?;
    c.expect_eof()?;
    let file = ModelFile {
        model: Denoiser::from_flat(shape, params)?,
        num_timesteps,
        beta_start,
        beta_end,
        forward_noise,
        epochs,
        lr,
    };
    file.schedule().map_err(|e| Error::format(path, 22, e.to_string()))?;
    Ok(file)
}
