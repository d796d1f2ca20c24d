//! Versioned binary checkpoints.
//!
//! Layout (little-endian throughout):
//! magic `DORA`, format version u32, run id u64, base seed u64, the seven
//! model dims as u32, adapter kind u8, base mode u8, then the head tensors,
//! then one record per site: layer, kind, d_in, d_out, and either a
//! base-weight digest (when the base is bit-reconstructible from its seed)
//! or the full tensors, followed by r' and each component's a, b, c,
//! smoothed score, active and eligible flags as f64, or the control-arm
//! pair. Loading rebuilds the base from the stored seed and verifies every
//! digest, so silent corruption cannot masquerade as a valid model.

use std::io::{Read, Write};
use std::path::Path;

use crate::dora::{LoraComponent, MatrixKind};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Matrix;
use crate::params::Param;
use crate::train::AdapterKind;

const MAGIC: &[u8; 4] = b"DORA";
const VERSION: u32 = 1;

const BASE_FROM_SEED: u8 = 0;
const BASE_STORED: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub run_id: u64,
    pub adapter: AdapterKind,
}

/// FNV-1a over the little-endian bytes of every entry.
pub fn digest(m: &Matrix) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in m.data() {
        for byte in v.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

pub fn save(model: &Model, adapter: AdapterKind, run_id: u64, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    write_all(&mut file, model, adapter, run_id)
}

fn write_all(w: &mut impl Write, model: &Model, adapter: AdapterKind, run_id: u64) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u64(w, run_id)?;
    put_u64(w, model.base_seed)?;
    for dim in [
        model.cfg.d,
        model.cfg.heads,
        model.cfg.layers,
        model.cfg.d_ff,
        model.cfg.n_max,
        model.cfg.input_dim,
        model.cfg.output_dim,
    ] {
        put_u32(w, dim as u32)?;
    }
    put_u8(w, adapter_code(adapter))?;

    // The base is stored as digests only when bit-identical to a fresh
    // rebuild from the seed; a pretrained base is stored in full.
    let reference = Model::new(model.cfg, model.base_seed)?;
    let base_from_seed = base_matches(model, &reference);
    put_u8(w, if base_from_seed { BASE_FROM_SEED } else { BASE_STORED })?;

    put_mat(w, &model.head_w.value)?;
    put_mat(w, &model.head_b.value)?;

    for block in &model.blocks {
        if base_from_seed {
            // Bias vectors of a fresh base are zero by construction.
        } else {
            put_mat(w, &block.b1.value)?;
            put_mat(w, &block.b2.value)?;
        }
        for site in &block.sites {
            put_u32(w, site.layer_id.layer as u32)?;
            put_u32(w, site.layer_id.kind.index() as u32)?;
            put_u32(w, site.d_in() as u32)?;
            put_u32(w, site.d_out() as u32)?;
            if base_from_seed {
                put_u64(w, digest(&site.w0.value))?;
            } else {
                put_mat(w, &site.w0.value)?;
            }
            put_u32(w, site.components.len() as u32)?;
            for comp in &site.components {
                put_mat(w, &comp.a.value)?;
                put_mat(w, &comp.b.value)?;
                put_f64(w, comp.gate())?;
                put_f64(w, comp.smoothed_score)?;
                put_f64(w, if comp.active { 1.0 } else { 0.0 })?;
                put_f64(w, if comp.eligible { 1.0 } else { 0.0 })?;
            }
            match &site.lora {
                Some(pair) => {
                    put_u32(w, pair.rank() as u32)?;
                    put_mat(w, &pair.a.value)?;
                    put_mat(w, &pair.b.value)?;
                }
                None => put_u32(w, 0)?,
            }
        }
    }
    Ok(())
}

fn base_matches(model: &Model, reference: &Model) -> bool {
    model
        .blocks
        .iter()
        .zip(&reference.blocks)
        .all(|(a, b)| {
            a.b1.value == b.b1.value
                && a.b2.value == b.b2.value
                && a.sites
                    .iter()
                    .zip(&b.sites)
                    .all(|(sa, sb)| sa.w0.value == sb.w0.value)
        })
}

pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    read_all(&mut bytes.as_slice())
}

fn read_all(r: &mut impl Read) -> Result<(Model, CheckpointMeta)> {
    let mut magic = [0u8; 4];
    take(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Corrupt("bad magic bytes".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Corrupt(format!(
            "unsupported format version {version}"
        )));
    }
    let run_id = get_u64(r)?;
    let base_seed = get_u64(r)?;
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = get_u32(r)? as usize;
    }
    let cfg = crate::model::TransformerConfig {
        d: dims[0],
        heads: dims[1],
        layers: dims[2],
        d_ff: dims[3],
        n_max: dims[4],
        input_dim: dims[5],
        output_dim: dims[6],
    };
    cfg.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
    let adapter = adapter_from_code(get_u8(r)?)?;
    let base_mode = get_u8(r)?;

    let mut model = Model::new(cfg, base_seed)?;
    model.head_w = Param::new(get_mat(r, cfg.d, cfg.output_dim)?);
    model.head_b = Param::new(get_mat(r, 1, cfg.output_dim)?);

    for layer in 0..cfg.layers {
        if base_mode == BASE_STORED {
            let b1 = get_mat(r, 1, cfg.d_ff)?;
            let b2 = get_mat(r, 1, cfg.d)?;
            model.blocks[layer].b1 = Param::new(b1);
            model.blocks[layer].b2 = Param::new(b2);
        }
        for kind in MatrixKind::ALL {
            let got_layer = get_u32(r)? as usize;
            let got_kind = get_u32(r)? as usize;
            if got_layer != layer || got_kind != kind.index() {
                return Err(Error::Corrupt(format!(
                    "site record out of order: expected L{layer}.{kind}, found layer {got_layer} kind {got_kind}"
                )));
            }
            let (d_in, d_out) = kind.dims(cfg.d, cfg.d_ff);
            if (get_u32(r)? as usize, get_u32(r)? as usize) != (d_in, d_out) {
                return Err(Error::Corrupt(format!("dim mismatch at L{layer}.{kind}")));
            }
            let site = model.site_mut(layer, kind);
            if base_mode == BASE_FROM_SEED {
                let stored = get_u64(r)?;
                let actual = digest(&site.w0.value);
                if stored != actual {
                    return Err(Error::Corrupt(format!(
                        "base digest mismatch at L{layer}.{kind}: stored {stored:#018x}, rebuilt {actual:#018x}"
                    )));
                }
            } else {
                site.w0 = Param::new(get_mat(r, d_in, d_out)?);
            }
            let r_prime = get_u32(r)? as usize;
            if r_prime > 1_000_000 {
                return Err(Error::Corrupt(format!("implausible component count {r_prime}")));
            }
            let mut components = Vec::with_capacity(r_prime);
            for i in 0..r_prime {
                let a = get_mat(r, d_out, 1)?;
                let b = get_mat(r, 1, d_in)?;
                let c = get_f64(r)?;
                let smoothed = get_f64(r)?;
                let active = get_f64(r)? != 0.0;
                let eligible = get_f64(r)? != 0.0;
                if !active && c != 0.0 {
                    return Err(Error::Corrupt(format!(
                        "component {i} at L{layer}.{kind} is inactive with a nonzero gate"
                    )));
                }
                components.push(LoraComponent {
                    a: Param::new(a),
                    b: Param::new(b),
                    c: Param::new(Matrix::scalar(c)),
                    active,
                    eligible,
                    smoothed_score: smoothed,
                    score_seeded: true,
                });
            }
            site.components = components;
            let rank = get_u32(r)? as usize;
            if rank > 0 {
                site.lora = Some(crate::dora::LoraPair {
                    a: Param::new(get_mat(r, d_in, rank)?),
                    b: Param::new(get_mat(r, rank, d_out)?),
                });
            }
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Corrupt("trailing bytes after checkpoint".into()));
    }
    Ok((model, CheckpointMeta { run_id, adapter }))
}

fn adapter_code(a: AdapterKind) -> u8 {
    match a {
        AdapterKind::None => 0,
        AdapterKind::Dora => 1,
        AdapterKind::Lora => 2,
    }
}

fn adapter_from_code(code: u8) -> Result<AdapterKind> {
    match code {
        0 => Ok(AdapterKind::None),
        1 => Ok(AdapterKind::Dora),
        2 => Ok(AdapterKind::Lora),
        other => Err(Error::Corrupt(format!("unknown adapter code {other}"))),
    }
}

fn put_u8(w: &mut impl Write, v: u8) -> Result<()> {
    w.write_all(&[v])?;
    Ok(())
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_mat(w: &mut impl Write, m: &Matrix) -> Result<()> {
    for v in m.data() {
        put_f64(w, *v)?;
    }
    Ok(())
}

fn take(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Corrupt("unexpected end of file".into()))
}

fn get_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    take(r, &mut b)?;
    Ok(b[0])
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    take(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    take(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    take(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn get_mat(r: &mut impl Read, rows: usize, cols: usize) -> Result<Matrix> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(get_f64(r)?);
    }
    Ok(Matrix::from_vec(rows, cols, data))
}
