//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `SALACKPT`, a little-endian `u32` format
//! version, a `u64` length followed by that many bytes of JSON metadata,
//! then every learnable tensor in canonical order and finally the running
//! mean and variance of every normalization layer, all as little-endian
//! `f32`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{NetworkConfig, ParameterSet};
use crate::preprocess::PreprocessConfig;

const MAGIC: &[u8; 8] = b"SALACKPT";
const VERSION: u32 = 1;

/// Descriptive data stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub network: NetworkConfig,
    /// Geometry the training images were prepared with.
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    pub seed: u64,
    pub fold: usize,
    /// Zero-based epoch whose end state was saved.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub num_parameters: usize,
}

fn write_f32s(w: &mut impl Write, values: &[f32]) -> Result<()> {
    for &v in values {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, out: &mut [f32]) -> Result<()> {
    r.read_f32_into::<LittleEndian>(out).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format("checkpoint truncated"),
        _ => Error::Io(e),
    })
}

/// Writes atomically: the file is assembled next to `path` and renamed over
/// it, so an interrupted save never leaves a partial checkpoint behind.
pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParameterSet<f32>, meta: &CheckpointMeta) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let json = serde_json::to_vec(meta)?;
        w.write_u64::<LittleEndian>(json.len() as u64)?;
        w.write_all(&json)?;
        for p in params.params() {
            write_f32s(&mut w, &p.value)?;
        }
        for n in params.norms() {
            write_f32s(&mut w, &n.running_mean)?;
            write_f32s(&mut w, &n.running_var)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads only the metadata block.
pub fn read_checkpoint_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let mut r = open(path.as_ref())?;
    read_meta(&mut r)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn read_meta(r: &mut impl Read) -> Result<CheckpointMeta> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::format("not a checkpoint file"))?;
    if &magic != MAGIC {
        return Err(Error::format("not a checkpoint file"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.read_u64::<LittleEndian>()?;
    if len > 1 << 24 {
        return Err(Error::format("checkpoint metadata too large"));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(|_| Error::format("checkpoint truncated"))?;
    Ok(serde_json::from_slice(&json)?)
}

/// Restores parameters and running statistics.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParameterSet<f32>, CheckpointMeta)> {
    let mut r = open(path.as_ref())?;
    let meta = read_meta(&mut r)?;
    let mut params = ParameterSet::<f32>::build(&meta.network)?;
    for p in params.params_mut() {
        read_f32s(&mut r, &mut p.value)?;
    }
    for n in params.norms_mut() {
        read_f32s(&mut r, &mut n.running_mean)?;
        read_f32s(&mut r, &mut n.running_var)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("trailing bytes after checkpoint payload"));
    }
    Ok((params, meta))
}
