//! Checkpoint container: magic "FGAN", format version, the canonical
//! config snapshot, named little-endian f32 tensor records (parameters,
//! spectral u vectors, optimizer moments), update counters, and the full
//! RNG state. A loaded checkpoint reproduces training bit-exactly from its
//! iteration.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::UNet;
use crate::layers::SpectralState;
use crate::objective::OptimizerState;
use crate::rng::RngState;
use crate::tensor::{Dims, Tensor};

pub const MAGIC: &[u8; 4] = b"FGAN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Dims,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub config_text: String,
    pub tensors: Vec<TensorRecord>,
    pub iteration: u64,
    pub d_updates: u64,
    pub g_updates: u64,
    pub last_d_loss: f32,
    pub last_g_loss: f32,
    pub rng_state: RngState,
}

pub fn save(path: &Path, data: &CheckpointData) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);

    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    let cfg = data.config_text.as_bytes();
    w.write_all(&(cfg.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(cfg).map_err(io)?;

    w.write_all(&(data.tensors.len() as u32).to_le_bytes())
        .map_err(io)?;
    for rec in &data.tensors {
        let name = rec.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name).map_err(io)?;
        for d in rec.dims {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for v in &rec.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }

    w.write_all(&data.iteration.to_le_bytes()).map_err(io)?;
    w.write_all(&data.d_updates.to_le_bytes()).map_err(io)?;
    w.write_all(&data.g_updates.to_le_bytes()).map_err(io)?;
    w.write_all(&data.last_d_loss.to_le_bytes()).map_err(io)?;
    w.write_all(&data.last_g_loss.to_le_bytes()).map_err(io)?;
    w.write_all(&data.rng_state.seed).map_err(io)?;
    w.write_all(&data.rng_state.stream.to_le_bytes()).map_err(io)?;
    w.write_all(&data.rng_state.word_pos.to_le_bytes()).map_err(io)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CheckpointData> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a FGAN checkpoint",
            path.display()
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {version}, this build reads {VERSION}",
            path.display()
        )));
    }

    let cfg_len = read_u32(&mut r, path)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    read_exact(&mut r, &mut cfg, path)?;
    let config_text = String::from_utf8(cfg)
        .map_err(|_| Error::Checkpoint(format!("{}: config is not utf-8", path.display())))?;

    let n_tensors = read_u32(&mut r, path)? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, path)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint(format!("{}: tensor name not utf-8", path.display())))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = read_u32(&mut r, path)? as usize;
        }
        let count: usize = dims.iter().product();
        let mut buf = [0u8; 4];
        let mut data = vec![0.0f32; count];
        for v in &mut data {
            read_exact(&mut r, &mut buf, path)?;
            *v = f32::from_le_bytes(buf);
        }
        tensors.push(TensorRecord { name, dims, data });
    }

    let iteration = read_u64(&mut r, path)?;
    let d_updates = read_u64(&mut r, path)?;
    let g_updates = read_u64(&mut r, path)?;
    let last_d_loss = read_f32(&mut r, path)?;
    let last_g_loss = read_f32(&mut r, path)?;
    let mut seed = [0u8; 32];
    read_exact(&mut r, &mut seed, path)?;
    let stream = read_u64(&mut r, path)?;
    let mut wp = [0u8; 16];
    read_exact(&mut r, &mut wp, path)?;
    let word_pos = u128::from_le_bytes(wp);

    Ok(CheckpointData {
        config_text,
        tensors,
        iteration,
        d_updates,
        g_updates,
        last_d_loss,
        last_g_loss,
        rng_state: RngState {
            seed,
            stream,
            word_pos,
        },
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read, path: &Path) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(f32::from_le_bytes(b))
}

fn tensor_record(name: String, t: &Tensor) -> TensorRecord {
    TensorRecord {
        name,
        dims: t.dims(),
        data: t.to_vec(),
    }
}

fn vec_record(name: String, data: Vec<f32>) -> TensorRecord {
    TensorRecord {
        name,
        dims: [1, 1, 1, data.len()],
        data,
    }
}

/// Gather every tensor a resumed run needs: parameters, spectral u
/// estimates, and Adam moments (named after their parameter).
#[allow(clippy::too_many_arguments)]
pub fn collect_trainer_state(
    config_text: String,
    g: &UNet,
    d: &Discriminator,
    opt_g: &OptimizerState,
    opt_d: &OptimizerState,
    iteration: u64,
    rng_state: RngState,
    d_updates: u64,
    g_updates: u64,
    last_d_loss: f32,
    last_g_loss: f32,
) -> CheckpointData {
    let mut tensors = Vec::new();
    for (name, t) in g.named_params().into_iter().chain(d.named_params()) {
        tensors.push(tensor_record(name, &t));
    }
    for (name, state) in g.spectral_states().into_iter().chain(d.spectral_states()) {
        tensors.push(vec_record(format!("sn.{name}.u"), state.u));
        tensors.push(vec_record(format!("sn.{name}.v"), state.v));
    }
    for (params, opt) in [(g.named_params(), opt_g), (d.named_params(), opt_d)] {
        for ((name, _), slot) in params.into_iter().zip(&opt.slots) {
            tensors.push(vec_record(format!("adam.{name}.m"), slot.m.clone()));
            tensors.push(vec_record(format!("adam.{name}.v"), slot.v.clone()));
        }
    }
    CheckpointData {
        config_text,
        tensors,
        iteration,
        d_updates,
        g_updates,
        last_d_loss,
        last_g_loss,
        rng_state,
    }
}

/// Write a checkpoint's tensors back into freshly built networks and
/// optimizer states. Every expected record must be present with matching
/// dims; unknown records are an error.
pub fn restore_trainer_state(
    data: &CheckpointData,
    g: &mut UNet,
    d: &mut Discriminator,
    opt_g: &mut OptimizerState,
    opt_d: &mut OptimizerState,
) -> Result<()> {
    let mut by_name: std::collections::HashMap<&str, &TensorRecord> =
        data.tensors.iter().map(|r| (r.name.as_str(), r)).collect();
    let mut take = |name: &str| -> Result<&TensorRecord> {
        by_name
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor record '{name}'")))
    };

    for (name, t) in g.named_params().into_iter().chain(d.named_params()) {
        let rec = take(&name)?;
        if rec.dims != t.dims() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has dims {:?} in checkpoint, {:?} in architecture",
                rec.dims,
                t.dims()
            )));
        }
        t.set_data(&rec.data);
    }

    let g_sn: Vec<String> = g.spectral_states().into_iter().map(|(n, _)| n).collect();
    for name in g_sn {
        let u = take(&format!("sn.{name}.u"))?.clone();
        let v = take(&format!("sn.{name}.v"))?.clone();
        g.restore_spectral_state(
            &name,
            SpectralState {
                u: u.data,
                v: v.data,
                sigma_estimate: 1.0,
                power_iters_per_step: 1,
                zero_weight_warned: false,
            },
        )?;
    }
    let d_sn: Vec<String> = d.spectral_states().into_iter().map(|(n, _)| n).collect();
    for name in d_sn {
        let u = take(&format!("sn.{name}.u"))?.clone();
        let v = take(&format!("sn.{name}.v"))?.clone();
        d.restore_spectral_state(
            &name,
            SpectralState {
                u: u.data,
                v: v.data,
                sigma_estimate: 1.0,
                power_iters_per_step: 1,
                zero_weight_warned: false,
            },
        )?;
    }

    for (params, opt, t) in [
        (g.named_params(), &mut *opt_g, data.g_updates),
        (d.named_params(), &mut *opt_d, data.d_updates),
    ] {
        for ((name, _), slot) in params.into_iter().zip(opt.slots.iter_mut()) {
            let m = take(&format!("adam.{name}.m"))?;
            let v = take(&format!("adam.{name}.v"))?;
            if m.data.len() != slot.m.len() || v.data.len() != slot.v.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moments for '{name}' have the wrong length"
                )));
            }
            slot.m.copy_from_slice(&m.data);
            slot.v.copy_from_slice(&v.data);
        }
        opt.t = t;
    }

    if let Some(leftover) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!(
            "unexpected tensor record '{leftover}'"
        )));
    }
    Ok(())
}
