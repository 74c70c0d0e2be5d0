//! ATW1: a named-tensor container for encoder + head weights.
//!
//! Layout (integers little-endian):
//! ```text
//! magic   4 bytes  "ATW1"
//! version u8       1
//! count   u32
//! entry   name_len u16, UTF-8 name, embedded ATT1 tensor record
//! ```
//! Entries are written in a fixed canonical order and names must be unique;
//! loading validates every shape against the target `EncoderConfig`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, Ix1, Ix2};

use crate::encoder::{EncoderConfig, HeadWeights, LayerWeights, WeightSet};
use crate::error::{Error, Result};
use crate::io::tensor::{decode_tensor_prefix, encode_tensor};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"ATW1";
pub const WEIGHTS_VERSION: u8 = 1;

/// All weight tensors with their canonical names, in canonical order.
pub fn weight_entries(weights: &WeightSet) -> Vec<(String, ArrayD<f64>)> {
    let mut entries: Vec<(String, ArrayD<f64>)> = vec![
        ("patch_proj.weight".into(), weights.patch_w.clone().into_dyn()),
        ("patch_proj.bias".into(), weights.patch_b.clone().into_dyn()),
        ("cls_token".into(), weights.cls_token.clone().into_dyn()),
        ("pos_embed".into(), weights.pos_embed.clone().into_dyn()),
    ];
    for (i, layer) in weights.layers.iter().enumerate() {
        let mut push = |part: &str, t: ArrayD<f64>| {
            entries.push((format!("layers.{i}.{part}"), t));
        };
        push("ln1.gamma", layer.ln1_gamma.clone().into_dyn());
        push("ln1.beta", layer.ln1_beta.clone().into_dyn());
        push("qkv.weight", layer.qkv_w.clone().into_dyn());
        push("qkv.bias", layer.qkv_b.clone().into_dyn());
        push("out.weight", layer.out_w.clone().into_dyn());
        push("out.bias", layer.out_b.clone().into_dyn());
        push("ln2.gamma", layer.ln2_gamma.clone().into_dyn());
        push("ln2.beta", layer.ln2_beta.clone().into_dyn());
        push("mlp.fc1.weight", layer.fc1_w.clone().into_dyn());
        push("mlp.fc1.bias", layer.fc1_b.clone().into_dyn());
        push("mlp.fc2.weight", layer.fc2_w.clone().into_dyn());
        push("mlp.fc2.bias", layer.fc2_b.clone().into_dyn());
    }
    entries.push(("ln_final.gamma".into(), weights.final_gamma.clone().into_dyn()));
    entries.push(("ln_final.beta".into(), weights.final_beta.clone().into_dyn()));
    entries.push(("head.fc1.weight".into(), weights.head.fc1_w.clone().into_dyn()));
    entries.push(("head.fc1.bias".into(), weights.head.fc1_b.clone().into_dyn()));
    entries.push(("head.fc2.weight".into(), weights.head.fc2_w.clone().into_dyn()));
    entries.push(("head.fc2.bias".into(), weights.head.fc2_b.clone().into_dyn()));
    entries
}

pub fn encode_weights(weights: &WeightSet) -> Result<Vec<u8>> {
    let entries = weight_entries(weights);
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&WEIGHTS_MAGIC);
    bytes.push(WEIGHTS_VERSION);
    bytes.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in &entries {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Validation(format!("tensor name too long: {name}")));
        }
        bytes.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name_bytes);
        bytes.extend_from_slice(&encode_tensor(tensor)?);
    }
    Ok(bytes)
}

fn take_array1(map: &mut HashMap<String, ArrayD<f64>>, name: &str) -> Result<ndarray::Array1<f64>> {
    let tensor = map
        .remove(name)
        .ok_or_else(|| Error::Validation(format!("missing weight tensor {name}")))?;
    tensor
        .into_dimensionality::<Ix1>()
        .map_err(|_| Error::Shape(format!("weight tensor {name} has a wrong rank")))
}

fn take_array2(map: &mut HashMap<String, ArrayD<f64>>, name: &str) -> Result<ndarray::Array2<f64>> {
    let tensor = map
        .remove(name)
        .ok_or_else(|| Error::Validation(format!("missing weight tensor {name}")))?;
    tensor
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Shape(format!("weight tensor {name} has a wrong rank")))
}

/// Rebuild a `WeightSet` from named tensors, validating shapes against the
/// config. Unknown or missing names are errors.
pub fn weights_from_entries(
    entries: Vec<(String, ArrayD<f64>)>,
    config: &EncoderConfig,
) -> Result<WeightSet> {
    let mut map: HashMap<String, ArrayD<f64>> = HashMap::with_capacity(entries.len());
    for (name, tensor) in entries {
        if map.insert(name.clone(), tensor).is_some() {
            return Err(Error::Validation(format!("duplicate weight tensor {name}")));
        }
    }
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let n = |part: &str| format!("layers.{i}.{part}");
        layers.push(LayerWeights {
            ln1_gamma: take_array1(&mut map, &n("ln1.gamma"))?,
            ln1_beta: take_array1(&mut map, &n("ln1.beta"))?,
            qkv_w: take_array2(&mut map, &n("qkv.weight"))?,
            qkv_b: take_array1(&mut map, &n("qkv.bias"))?,
            out_w: take_array2(&mut map, &n("out.weight"))?,
            out_b: take_array1(&mut map, &n("out.bias"))?,
            ln2_gamma: take_array1(&mut map, &n("ln2.gamma"))?,
            ln2_beta: take_array1(&mut map, &n("ln2.beta"))?,
            fc1_w: take_array2(&mut map, &n("mlp.fc1.weight"))?,
            fc1_b: take_array1(&mut map, &n("mlp.fc1.bias"))?,
            fc2_w: take_array2(&mut map, &n("mlp.fc2.weight"))?,
            fc2_b: take_array1(&mut map, &n("mlp.fc2.bias"))?,
        });
    }
    let weights = WeightSet {
        patch_w: take_array2(&mut map, "patch_proj.weight")?,
        patch_b: take_array1(&mut map, "patch_proj.bias")?,
        cls_token: take_array1(&mut map, "cls_token")?,
        pos_embed: take_array2(&mut map, "pos_embed")?,
        layers,
        final_gamma: take_array1(&mut map, "ln_final.gamma")?,
        final_beta: take_array1(&mut map, "ln_final.beta")?,
        head: HeadWeights {
            fc1_w: take_array2(&mut map, "head.fc1.weight")?,
            fc1_b: take_array1(&mut map, "head.fc1.bias")?,
            fc2_w: take_array2(&mut map, "head.fc2.weight")?,
            fc2_b: take_array1(&mut map, "head.fc2.bias")?,
        },
    };
    if let Some(name) = map.keys().next() {
        return Err(Error::Validation(format!("unknown weight tensor {name}")));
    }
    weights.validate_shapes(config)?;
    Ok(weights)
}

pub fn decode_weights(bytes: &[u8], config: &EncoderConfig) -> Result<WeightSet> {
    if bytes.len() < 9 {
        return Err(Error::Truncated {
            expected: 9,
            found: bytes.len(),
        });
    }
    if bytes[0..4] != WEIGHTS_MAGIC {
        return Err(Error::BadMagic {
            expected: "ATW1",
            found: [bytes[0], bytes[1], bytes[2], bytes[3]],
        });
    }
    if bytes[4] != WEIGHTS_VERSION {
        return Err(Error::BadVersion {
            field: "version",
            value: bytes[4],
        });
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let mut offset = 9;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        if bytes.len() < offset + 2 {
            return Err(Error::Truncated {
                expected: offset + 2,
                found: bytes.len(),
            });
        }
        let name_len = u16::from_le_bytes(bytes[offset..offset + 2].try_into().unwrap()) as usize;
        offset += 2;
        if bytes.len() < offset + name_len {
            return Err(Error::Truncated {
                expected: offset + name_len,
                found: bytes.len(),
            });
        }
        let name = std::str::from_utf8(&bytes[offset..offset + name_len])
            .map_err(|_| Error::Validation("weight name is not UTF-8".into()))?
            .to_string();
        offset += name_len;
        let (tensor, consumed) = decode_tensor_prefix(&bytes[offset..])?;
        offset += consumed;
        entries.push((name, tensor));
    }
    if offset != bytes.len() {
        return Err(Error::Validation(format!(
            "{} trailing bytes after weight entries",
            bytes.len() - offset
        )));
    }
    weights_from_entries(entries, config)
}

pub fn save_weights(path: &Path, weights: &WeightSet) -> Result<()> {
    fs::write(path, encode_weights(weights)?)?;
    Ok(())
}

pub fn load_weights(path: &Path, config: &EncoderConfig) -> Result<WeightSet> {
    decode_weights(&fs::read(path)?, config)
}
