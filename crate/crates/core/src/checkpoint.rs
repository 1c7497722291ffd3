//! Checkpoint files.
//!
//! A checkpoint is a UTF-8 header followed by one little-endian blob:
//!
//! ```text
//! csinet-checkpoint 1
//! dtype f32
//! step <optimizer steps taken>
//! seed <model seed>
//! config <line count>
//! <config lines, `key = value`>
//! arrays <count>
//! <name> <shape, comma separated> <byte offset> <byte length>
//! ...
//! blob
//! <raw array bytes>
//! ```
//!
//! Array names are prefixed with their role: `param/`, `buffer/`, `adam_m/`
//! and `adam_v/`. Values are stored in the model dtype, so loading reproduces
//! the saved tensors bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::config::{Config, TrainConfig};
use crate::error::{Error, Result};
use crate::model::CsiNet;
use crate::train::AdamW;

const MAGIC: &str = "csinet-checkpoint 1";

/// Snapshot of everything needed to continue a run.
pub struct TrainState {
    pub config: Config,
    pub step: usize,
    pub arrays: Vec<(String, Tensor)>,
    pub dtype: DType,
}

impl TrainState {
    pub fn capture(config: &Config, net: &CsiNet, opt: &AdamW) -> Self {
        let mut arrays = Vec::new();
        for (name, var, trainable) in net.params.all() {
            let role = if trainable { "param" } else { "buffer" };
            arrays.push((format!("{role}/{name}"), var.as_tensor().clone()));
        }
        for (name, t) in &opt.m {
            arrays.push((format!("adam_m/{name}"), t.clone()));
        }
        for (name, t) in &opt.v {
            arrays.push((format!("adam_v/{name}"), t.clone()));
        }
        Self {
            config: Config {
                model: net.cfg.clone(),
                train: config.train.clone(),
            },
            step: opt.step,
            arrays,
            dtype: net.dtype(),
        }
    }
}

/// A loaded checkpoint with the network rebuilt.
pub struct LoadedCheckpoint {
    pub config: Config,
    pub net: CsiNet,
    pub step: usize,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

impl LoadedCheckpoint {
    pub fn optimizer(&self, cfg: &TrainConfig) -> AdamW {
        let mut opt = AdamW::new(cfg);
        opt.step = self.step;
        opt.m = self.adam_m.clone();
        opt.v = self.adam_v.clone();
        opt
    }
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Dimension(format!("unsupported dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        other => return Err(Error::Dimension(format!("unsupported dtype {other:?}"))),
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let config_text = state.config.to_text();
    let mut header = format!(
        "{MAGIC}\ndtype {}\nstep {}\nseed {}\nconfig {}\n{config_text}arrays {}\n",
        dtype_name(state.dtype)?,
        state.step,
        state.config.model.seed,
        config_text.lines().count(),
        state.arrays.len()
    );
    let mut blob = Vec::new();
    for (name, t) in &state.arrays {
        let bytes = tensor_bytes(&t.to_dtype(state.dtype)?)?;
        let shape: Vec<String> = t.dims().iter().map(|d| d.to_string()).collect();
        header += &format!(
            "{name} {} {} {}\n",
            shape.join(","),
            blob.len(),
            bytes.len()
        );
        blob.extend(bytes);
    }
    header += "blob\n";
    let mut out = header.into_bytes();
    out.extend(blob);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Save the network alone, without optimizer state.
pub fn save_model(path: &Path, config: &Config, net: &CsiNet) -> Result<()> {
    save_checkpoint(
        path,
        &TrainState::capture(config, net, &AdamW::new(&config.train)),
    )
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn line(&mut self) -> Result<&str> {
        let rest = &self.data[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(self.path, "truncated header"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::format(self.path, "header is not UTF-8"))
    }

    fn field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let path = self.path;
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|v| v.strip_prefix(' '))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(path, format!("expected `{key} <value>`, found {line:?}")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        data: &data,
        pos: 0,
        path,
    };
    if r.line()? != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let dtype = match r.field::<String>("dtype")?.as_str() {
        "f32" => DType::F32,
        "f64" => DType::F64,
        other => return Err(Error::format(path, format!("unknown dtype {other}"))),
    };
    let step: usize = r.field("step")?;
    let seed: u64 = r.field("seed")?;
    let n_cfg: usize = r.field("config")?;
    let mut text = String::new();
    for _ in 0..n_cfg {
        text += r.line()?;
        text.push('\n');
    }
    let mut config = Config::default();
    config.apply_text(&text)?;
    if config.model.seed != seed {
        return Err(Error::format(path, "seed does not match the stored config"));
    }
    let n_arrays: usize = r.field("arrays")?;
    let mut entries = Vec::with_capacity(n_arrays);
    for _ in 0..n_arrays {
        let line = r.line()?.to_string();
        let f: Vec<&str> = line.split(' ').collect();
        let bad = || Error::format(path, format!("bad array entry {line:?}"));
        if f.len() != 4 {
            return Err(bad());
        }
        let shape: Vec<usize> = if f[1].is_empty() {
            vec![]
        } else {
            f[1].split(',')
                .map(|d| d.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?
        };
        let off: usize = f[2].parse().map_err(|_| bad())?;
        let len: usize = f[3].parse().map_err(|_| bad())?;
        entries.push((f[0].to_string(), shape, off, len));
    }
    if r.line()? != "blob" {
        return Err(Error::format(path, "missing blob marker"));
    }
    let blob = &data[r.pos..];
    let width = dtype.size_in_bytes();
    let mut arrays = BTreeMap::new();
    for (name, shape, off, len) in entries {
        let count: usize = shape.iter().product();
        if len != count * width || off + len > blob.len() {
            return Err(Error::format(path, format!("array {name} is truncated")));
        }
        let bytes = &blob[off..off + len];
        let t = match dtype {
            DType::F32 => {
                let v: Vec<f32> = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, shape, &Device::Cpu)?
            }
            _ => {
                let v: Vec<f64> = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, shape, &Device::Cpu)?
            }
        };
        arrays.insert(name, t);
    }

    let net = CsiNet::new(&config.model, dtype)?;
    for (name, var, trainable) in net.params.all() {
        let role = if trainable { "param" } else { "buffer" };
        let key = format!("{role}/{name}");
        let t = arrays
            .remove(&key)
            .ok_or_else(|| Error::format(path, format!("missing array {key}")))?;
        if t.dims() != var.as_tensor().dims() {
            return Err(Error::format(
                path,
                format!(
                    "array {key} has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.as_tensor().dims()
                ),
            ));
        }
        var.set(&t)?;
    }
    let mut adam_m = BTreeMap::new();
    let mut adam_v = BTreeMap::new();
    for (name, t) in arrays {
        if let Some(n) = name.strip_prefix("adam_m/") {
            adam_m.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix("adam_v/") {
            adam_v.insert(n.to_string(), t);
        } else {
            return Err(Error::format(path, format!("unexpected array {name}")));
        }
    }
    Ok(LoadedCheckpoint {
        config,
        net,
        step,
        adam_m,
        adam_v,
    })
}
