//! Model checkpoint file format.
//!
//! Little-endian binary, laid out so other implementations can interoperate:
//!
//! ```text
//! magic            8 bytes     b"CUTMODEL"
//! version          u32         currently 1
//! config_hash      u64         FNV-1a of the producing config text
//! embedding_dim    u32
//! encoding         u8          0 = dense features, 1 = hashed tokens
//! query tower      u32 layer count, then per layer: out u32, in u32, act u8
//! item tower       same
//! ...data...       per tower, per layer: weight f64 row-major [out×in],
//!                  then bias f64 [out]
//! heads            temperature, alpha_pos, beta_neg, each:
//!                  weight f64 [embedding_dim], bias f64, floor f64, ceiling f64
//! ```
//!
//! Activation codes: 0 = identity, 1 = tanh.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{
    Activation, FeatureEncoding, Layer, ModelError, ModelParams, TemperatureHead, TowerParams,
};

pub const MAGIC: &[u8; 8] = b"CUTMODEL";
pub const VERSION: u32 = 1;

pub fn save(path: &Path, model: &ModelParams, config_hash: u64) -> Result<(), ModelError> {
    model.validate()?;
    let mut w: Vec<u8> = Vec::new();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&config_hash.to_le_bytes())?;
    w.write_all(&(model.embedding_dim() as u32).to_le_bytes())?;
    w.write_all(&[match model.encoding {
        FeatureEncoding::Dense => 0u8,
        FeatureEncoding::Hashed => 1u8,
    }])?;
    for tower in [&model.query, &model.item] {
        w.write_all(&(tower.layers.len() as u32).to_le_bytes())?;
        for layer in &tower.layers {
            w.write_all(&(layer.weight.nrows() as u32).to_le_bytes())?;
            w.write_all(&(layer.weight.ncols() as u32).to_le_bytes())?;
            w.write_all(&[match layer.activation {
                Activation::Identity => 0u8,
                Activation::Tanh => 1u8,
            }])?;
        }
    }
    for tower in [&model.query, &model.item] {
        for layer in &tower.layers {
            for v in layer.weight.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in layer.bias.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    for head in [&model.temperature, &model.alpha_pos, &model.beta_neg] {
        for v in head.weight.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&head.bias.to_le_bytes())?;
        w.write_all(&head.floor.to_le_bytes())?;
        w.write_all(&head.ceiling.to_le_bytes())?;
    }
    crate::kv::atomic_write(path, &w)?;
    Ok(())
}

/// Loads a checkpoint, returning the model and the config hash recorded in
/// its header.
pub fn load(path: &Path) -> Result<(ModelParams, u64), ModelError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint(format!(
            "bad magic {magic:?}, not a model checkpoint"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config_hash = read_u64(&mut r)?;
    let embedding_dim = read_u32(&mut r)? as usize;
    let encoding = match read_u8(&mut r)? {
        0 => FeatureEncoding::Dense,
        1 => FeatureEncoding::Hashed,
        other => {
            return Err(ModelError::Checkpoint(format!(
                "unknown feature encoding {other}"
            )))
        }
    };

    let mut shapes: Vec<Vec<(usize, usize, Activation)>> = Vec::with_capacity(2);
    for _ in 0..2 {
        let count = read_u32(&mut r)? as usize;
        if count == 0 || count > 64 {
            return Err(ModelError::Checkpoint(format!(
                "implausible layer count {count}"
            )));
        }
        let mut tower = Vec::with_capacity(count);
        for _ in 0..count {
            let out = read_u32(&mut r)? as usize;
            let inp = read_u32(&mut r)? as usize;
            let act = match read_u8(&mut r)? {
                0 => Activation::Identity,
                1 => Activation::Tanh,
                other => {
                    return Err(ModelError::Checkpoint(format!(
                        "unknown activation code {other}"
                    )))
                }
            };
            tower.push((out, inp, act));
        }
        shapes.push(tower);
    }

    let mut towers = Vec::with_capacity(2);
    for tower_shapes in &shapes {
        let mut layers = Vec::with_capacity(tower_shapes.len());
        for &(out, inp, act) in tower_shapes {
            let mut data = vec![0f64; out * inp];
            read_f64_slice(&mut r, &mut data)?;
            let weight = Array2::from_shape_vec((out, inp), data)
                .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
            let mut bias = vec![0f64; out];
            read_f64_slice(&mut r, &mut bias)?;
            layers.push(Layer {
                weight,
                bias: Array1::from_vec(bias),
                activation: act,
            });
        }
        towers.push(TowerParams { layers });
    }
    let item = towers.pop().unwrap();
    let query = towers.pop().unwrap();

    let mut heads = Vec::with_capacity(3);
    for _ in 0..3 {
        let mut weight = vec![0f64; embedding_dim];
        read_f64_slice(&mut r, &mut weight)?;
        let bias = read_f64(&mut r)?;
        let floor = read_f64(&mut r)?;
        let ceiling = read_f64(&mut r)?;
        heads.push(TemperatureHead {
            weight: Array1::from_vec(weight),
            bias,
            floor,
            ceiling,
        });
    }
    let beta_neg = heads.pop().unwrap();
    let alpha_pos = heads.pop().unwrap();
    let temperature = heads.pop().unwrap();

    let model = ModelParams {
        query,
        item,
        temperature,
        alpha_pos,
        beta_neg,
        encoding,
    };
    model.validate()?;
    if model.embedding_dim() != embedding_dim {
        return Err(ModelError::Checkpoint(format!(
            "header says embedding dim {embedding_dim} but towers produce {}",
            model.embedding_dim()
        )));
    }
    Ok((model, config_hash))
}

fn read_u8(r: &mut impl Read) -> Result<u8, ModelError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f64_slice(r: &mut impl Read, out: &mut [f64]) -> Result<(), ModelError> {
    let mut buf = vec![0u8; out.len() * 8];
    r.read_exact(&mut buf)?;
    for (i, chunk) in buf.chunks_exact(8).enumerate() {
        out[i] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_preserves_model_exactly() {
        let shape = ModelShape {
            query_input: 5,
            item_input: 9,
            hidden: 7,
            embedding: 4,
            tau_floor: 0.02,
            tau_ceiling: 1.0,
            encoding: FeatureEncoding::Hashed,
        };
        let model = ModelParams::init(&shape, &mut ChaCha8Rng::seed_from_u64(1234)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model, 0xdead_beef).unwrap();
        let (loaded, hash) = load(&path).unwrap();
        assert_eq!(hash, 0xdead_beef);
        assert_eq!(loaded, model);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTMODEL----------------").unwrap();
        assert!(matches!(load(&path), Err(ModelError::Checkpoint(_))));
    }
}
