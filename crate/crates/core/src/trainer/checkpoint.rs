//! Single-file checkpoints.
//!
//! Layout: the 4-byte magic, a little-endian `u64` manifest length, the
//! JSON manifest, then every array as little-endian `f64` in manifest
//! order. The manifest carries the configuration text and its hash,
//! the schedule position and the shape of each array.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::Trainer;
use crate::autodiff::optim::Adam;
use crate::autodiff::Matrix;
use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct AdamState {
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config_hash: String,
    config: String,
    epoch: usize,
    /// Every random stream is derived from the seed and this counter.
    step: u64,
    optimizers: BTreeMap<String, AdamState>,
    arrays: Vec<ArrayEntry>,
}

fn optimizers(t: &Trainer) -> [(&'static str, &Adam); 3] {
    [("var", &t.var_opt), ("gen", &t.gan_opt.gen), ("disc", &t.gan_opt.disc)]
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let mut arrays: Vec<(String, &Matrix)> = trainer.store.iter().map(|(k, v)| (format!("param/{k}"), v)).collect();
    let mut opt_meta = BTreeMap::new();
    for (name, adam) in optimizers(trainer) {
        opt_meta.insert(
            name.to_string(),
            AdamState {
                t: adam.t,
                beta1: adam.beta1,
                beta2: adam.beta2,
                eps: adam.eps,
            },
        );
        arrays.extend(adam.m.iter().map(|(k, v)| (format!("{name}.m/{k}"), v)));
        arrays.extend(adam.v.iter().map(|(k, v)| (format!("{name}.v/{k}"), v)));
    }
    let manifest = Manifest {
        version: VERSION,
        config_hash: trainer.config.hash(),
        config: trainer.config.to_text(),
        epoch: trainer.epoch,
        step: trainer.step,
        optimizers: opt_meta,
        arrays: arrays
            .iter()
            .map(|(name, m)| ArrayEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let err = io_err(path);
    let mut w = BufWriter::new(File::create(path).map_err(&err)?);
    w.write_all(CHECKPOINT_MAGIC).map_err(&err)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(&err)?;
    w.write_u64::<LittleEndian>(json.len() as u64).map_err(&err)?;
    w.write_all(&json).map_err(&err)?;
    for (_, m) in &arrays {
        for &x in m.data() {
            w.write_f64::<LittleEndian>(x).map_err(&err)?;
        }
    }
    w.flush().map_err(&err)
}

/// Rebuilds a trainer from a checkpoint. Every parameter of the configured
/// model must be present with its recorded shape.
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let err = io_err(path);
    let bad = |reason: String| Error::format(path, reason);
    let mut r = BufReader::new(File::open(path).map_err(&err)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(&err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(&err)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = r.read_u64::<LittleEndian>().map_err(&err)?;
    if len > 1 << 30 {
        return Err(bad("manifest too large".into()));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(&err)?;
    let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| bad(format!("manifest: {e}")))?;
    let config = RunConfig::parse(&manifest.config)?;
    if config.hash() != manifest.config_hash {
        return Err(bad("configuration hash mismatch".into()));
    }

    let mut trainer = Trainer::new(config)?;
    trainer.epoch = manifest.epoch;
    trainer.step = manifest.step;
    let mut seen = 0usize;
    for entry in &manifest.arrays {
        let mut data = vec![0.0; entry.rows * entry.cols];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(&err)?;
        let m = Matrix::from_vec(entry.rows, entry.cols, data);
        let (kind, name) = entry
            .name
            .split_once('/')
            .ok_or_else(|| bad(format!("bad array name `{}`", entry.name)))?;
        let slot = match kind {
            "param" => {
                seen += 1;
                let p = trainer
                    .store
                    .get_mut(name)
                    .ok_or_else(|| bad(format!("unexpected parameter `{name}`")))?;
                if p.shape() != m.shape() {
                    return Err(bad(format!("parameter `{name}` has shape {:?}, expected {:?}", m.shape(), p.shape())));
                }
                *p = m;
                continue;
            }
            "var.m" => &mut trainer.var_opt.m,
            "var.v" => &mut trainer.var_opt.v,
            "gen.m" => &mut trainer.gan_opt.gen.m,
            "gen.v" => &mut trainer.gan_opt.gen.v,
            "disc.m" => &mut trainer.gan_opt.disc.m,
            "disc.v" => &mut trainer.gan_opt.disc.v,
            _ => return Err(bad(format!("bad array name `{}`", entry.name))),
        };
        slot.insert(name.to_string(), m);
    }
    if seen != trainer.store.len() {
        return Err(bad(format!("{} of {} parameters present", seen, trainer.store.len())));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(&err)?;
    if !rest.is_empty() {
        return Err(bad("trailing bytes".into()));
    }
    for (name, st) in &manifest.optimizers {
        let adam = match name.as_str() {
            "var" => &mut trainer.var_opt,
            "gen" => &mut trainer.gan_opt.gen,
            "disc" => &mut trainer.gan_opt.disc,
            _ => return Err(bad(format!("unknown optimizer `{name}`"))),
        };
        adam.t = st.t;
        adam.beta1 = st.beta1;
        adam.beta2 = st.beta2;
        adam.eps = st.eps;
    }
    Ok(trainer)
}
