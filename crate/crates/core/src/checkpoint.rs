//! Binary checkpoint container.
//!
//! Model checkpoints ("VCKP"): magic, u32 format version, a length-prefixed
//! `key=value` text block holding the model configuration, then each named
//! tensor as (name length u32, name bytes, rank u32, dims u32 each, 64-bit
//! little-endian floats). Tensors are written in registry order, so
//! save -> load -> save is byte-identical.
//!
//! Optimizer state rides in a sidecar ("VCKO", same container layout) next
//! to the checkpoint, holding the Adam hyperparameters, step counter and
//! both moment tensors; together they make training resumable bit-exactly.

use crate::compute::{AdamState, Tensor};
use crate::error::{Error, Result};
use crate::wavenet::{zeroed_params, ModelConfig, ModelParams};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const MODEL_MAGIC: &[u8; 4] = b"VCKP";
const OPTIMIZER_MAGIC: &[u8; 4] = b"VCKO";
const FORMAT_VERSION: u32 = 1;

/// Conventional sidecar path: `<checkpoint>.opt`.
pub fn optimizer_path(checkpoint: &Path) -> PathBuf {
    let mut os = checkpoint.as_os_str().to_os_string();
    os.push(".opt");
    PathBuf::from(os)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let kv = config_to_kv(&params.config);
    let named: Vec<(&str, &Tensor)> = params
        .names()
        .iter()
        .map(|n| n.as_str())
        .zip(params.tensors())
        .collect();
    write_container(path, MODEL_MAGIC, &kv, &named)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let (kv, tensors) = read_container(path, MODEL_MAGIC)?;
    let config = config_from_kv(&kv, path)?;
    let mut params = zeroed_params(&config)?;
    fill_named_tensors(path, "checkpoint", params_names(&params), tensors, |name, t| {
        *params
            .tensor_mut_by_name(name)
            .expect("name came from the registry") = t;
    })?;
    params.check_finite()?;
    Ok(params)
}

fn params_names(params: &ModelParams) -> Vec<String> {
    params.names().to_vec()
}

pub fn save_optimizer(path: &Path, adam: &AdamState, param_names: &[String]) -> Result<()> {
    let kv = vec![
        ("lr".to_string(), format_f64(adam.lr)),
        ("beta1".to_string(), format_f64(adam.beta1)),
        ("beta2".to_string(), format_f64(adam.beta2)),
        ("epsilon".to_string(), format_f64(adam.epsilon)),
        ("t".to_string(), adam.t.to_string()),
    ];
    let mut named: Vec<(String, &Tensor)> = Vec::new();
    for (name, t) in param_names.iter().zip(&adam.first_moment) {
        named.push((format!("m.{name}"), t));
    }
    for (name, t) in param_names.iter().zip(&adam.second_moment) {
        named.push((format!("v.{name}"), t));
    }
    let borrowed: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    write_container(path, OPTIMIZER_MAGIC, &kv, &borrowed)
}

pub fn load_optimizer(path: &Path, params: &ModelParams) -> Result<AdamState> {
    let (kv, tensors) = read_container(path, OPTIMIZER_MAGIC)?;
    let get = |key: &str| -> Result<&str> {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| malformed(path, "optimizer state", format!("missing key '{key}'")))
    };
    let parse = |key: &str| -> Result<f64> {
        get(key)?
            .parse::<f64>()
            .map_err(|e| malformed(path, "optimizer state", format!("bad {key}: {e}")))
    };
    let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape.clone()).collect();
    let mut adam = AdamState::new(&shapes, parse("lr")?);
    adam.beta1 = parse("beta1")?;
    adam.beta2 = parse("beta2")?;
    adam.epsilon = parse("epsilon")?;
    adam.t = get("t")?
        .parse::<u64>()
        .map_err(|e| malformed(path, "optimizer state", format!("bad t: {e}")))?;

    let mut expected = Vec::new();
    for name in params.names() {
        expected.push(format!("m.{name}"));
    }
    for name in params.names() {
        expected.push(format!("v.{name}"));
    }
    let n = params.names().len();
    fill_named_tensors(path, "optimizer state", expected, tensors, |name, t| {
        let (kind, param) = name.split_at(2);
        let idx = params
            .names()
            .iter()
            .position(|p| p == param)
            .expect("name came from the registry");
        match kind {
            "m." => adam.first_moment[idx] = t,
            _ => adam.second_moment[idx] = t,
        }
    })?;
    debug_assert_eq!(adam.first_moment.len(), n);
    Ok(adam)
}

fn format_f64(v: f64) -> String {
    // shortest decimal that parses back to the same bits
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
    s
}

fn config_to_kv(config: &ModelConfig) -> Vec<(String, String)> {
    [
        ("blocks", config.blocks),
        ("layers_per_block", config.layers_per_block),
        ("kernel_size", config.kernel_size),
        ("residual_channels", config.residual_channels),
        ("skip_channels", config.skip_channels),
        ("classes", config.classes),
        ("cond_channels", config.cond_channels),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

fn config_from_kv(kv: &[(String, String)], path: &Path) -> Result<ModelConfig> {
    let get = |key: &str| -> Result<usize> {
        kv.iter()
            .find(|(k, _)| k == key)
            .ok_or_else(|| malformed(path, "checkpoint", format!("missing config key '{key}'")))?
            .1
            .parse::<usize>()
            .map_err(|e| malformed(path, "checkpoint", format!("bad config key '{key}': {e}")))
    };
    let config = ModelConfig {
        blocks: get("blocks")?,
        layers_per_block: get("layers_per_block")?,
        kernel_size: get("kernel_size")?,
        residual_channels: get("residual_channels")?,
        skip_channels: get("skip_channels")?,
        classes: get("classes")?,
        cond_channels: get("cond_channels")?,
    };
    config.validate()?;
    Ok(config)
}

fn malformed(path: &Path, format: &'static str, detail: String) -> Error {
    Error::MalformedFile {
        format,
        path: path.to_path_buf(),
        detail,
    }
}

/// Fill destination tensors from (name, tensor) records, enforcing exact
/// coverage: every expected name exactly once, correct shapes, no strays.
fn fill_named_tensors(
    path: &Path,
    what: &'static str,
    expected: Vec<String>,
    tensors: Vec<(String, Tensor)>,
    mut store: impl FnMut(&str, Tensor),
) -> Result<()> {
    let mut seen = vec![false; expected.len()];
    for (name, tensor) in tensors {
        let Some(idx) = expected.iter().position(|e| *e == name) else {
            return Err(malformed(path, what, format!("unexpected tensor '{name}'")));
        };
        if seen[idx] {
            return Err(malformed(path, what, format!("duplicate tensor '{name}'")));
        }
        seen[idx] = true;
        store(&name, tensor);
    }
    if let Some(missing) = expected.iter().zip(&seen).find(|(_, s)| !**s) {
        return Err(malformed(path, what, format!("missing tensor '{}'", missing.0)));
    }
    Ok(())
}

fn write_container(
    path: &Path,
    magic: &[u8; 4],
    kv: &[(String, String)],
    tensors: &[(&str, &Tensor)],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mut block = String::new();
    for (k, v) in kv {
        block.push_str(k);
        block.push('=');
        block.push_str(v);
        block.push('\n');
    }
    buf.extend_from_slice(&(block.len() as u32).to_le_bytes());
    buf.extend_from_slice(block.as_bytes());
    for (name, tensor) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
        for &d in &tensor.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &tensor.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    // atomic: write a sibling temp file, then rename over the target
    let tmp = path.with_extension("tmp-write");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

type Container = (Vec<(String, String)>, Vec<(String, Tensor)>);

fn read_container(path: &Path, magic: &[u8; 4]) -> Result<Container> {
    let what: &'static str = if magic == MODEL_MAGIC {
        "checkpoint"
    } else {
        "optimizer state"
    };
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    let mut cursor = 0usize;

    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > buf.len() {
            return Err(malformed(path, what, "truncated file".into()));
        }
        let s = &buf[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };
    let take_u32 = |cursor: &mut usize| -> Result<u32> {
        let b = take(cursor, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };

    if take(&mut cursor, 4)? != magic {
        return Err(malformed(path, what, "bad magic".into()));
    }
    let version = take_u32(&mut cursor)?;
    if version != FORMAT_VERSION {
        return Err(malformed(path, what, format!("unsupported version {version}")));
    }
    let block_len = take_u32(&mut cursor)? as usize;
    let block = std::str::from_utf8(take(&mut cursor, block_len)?)
        .map_err(|_| malformed(path, what, "config block is not UTF-8".into()))?
        .to_string();
    let mut kv = Vec::new();
    for line in block.lines() {
        let Some((k, v)) = line.split_once('=') else {
            return Err(malformed(path, what, format!("bad config line '{line}'")));
        };
        kv.push((k.to_string(), v.to_string()));
    }

    let mut tensors = Vec::new();
    while cursor < buf.len() {
        let name_len = take_u32(&mut cursor)? as usize;
        let name = std::str::from_utf8(take(&mut cursor, name_len)?)
            .map_err(|_| malformed(path, what, "tensor name is not UTF-8".into()))?
            .to_string();
        let rank = take_u32(&mut cursor)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&mut cursor)? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = take(&mut cursor, numel * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        tensors.push((name, Tensor { shape, data }));
    }
    Ok((kv, tensors))
}
