//! Checkpoint file format.
//!
//! Layout: magic `METROLAB`, format version u32 (LE), a canonical key-sorted
//! text header (u64 length prefix) carrying the model config, precision, and
//! trainer state, then named tensors: u16 name length + name, u32 rank,
//! u64 extents, and raw little-endian floats at the stored precision.
//! Optimizer moments ride along as `opt.m.<param>` / `opt.v.<param>`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Precision};
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::model::MetroModel;
use crate::tensor::Param;

pub const MAGIC: &[u8; 8] = b"METROLAB";
pub const FORMAT_VERSION: u32 = 1;

/// Trainer-side state needed for exact resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub opt_step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub data_epoch: u64,
    pub data_cursor: u64,
    /// Trailing combined-loss window for the divergence detector, stored as
    /// exact f64 bits.
    pub loss_window: Vec<f64>,
}

impl TrainState {
    pub fn capture_rng(rng: &ChaCha8Rng) -> ([u8; 32], u128) {
        (rng.get_seed(), rng.get_word_pos())
    }

    pub fn restore_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }
}

pub struct LoadedCheckpoint<E: Elem> {
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<E>)>,
    pub state: Option<TrainState>,
}

impl<E: Elem> LoadedCheckpoint<E> {
    /// Rebuild the model from the stored config and parameter tensors.
    /// Every model parameter must be present with its exact shape.
    pub fn instantiate(&self) -> Result<MetroModel<E>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = MetroModel::new(&self.config, &mut rng)?;
        for p in model.params().iter() {
            let (shape, data) = self.tensors.get(p.name()).ok_or_else(|| {
                Error::Checkpoint(format!("missing tensor {}", p.name()))
            })?;
            if shape != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name(),
                    shape,
                    p.shape()
                )));
            }
            p.set_value(data.clone());
        }
        for name in self.tensors.keys() {
            if !name.starts_with("opt.") && model.params().get(name).is_none() {
                return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
            }
        }
        Ok(model)
    }

    /// Optimizer moment tensors, if saved: name -> (m, v).
    pub fn optimizer_moments(&self) -> BTreeMap<String, (Vec<E>, Vec<E>)> {
        let mut out = BTreeMap::new();
        for (name, (_, data)) in &self.tensors {
            if let Some(param) = name.strip_prefix("opt.m.") {
                if let Some((_, v)) = self.tensors.get(&format!("opt.v.{param}")) {
                    out.insert(param.to_string(), (data.clone(), v.clone()));
                }
            }
        }
        out
    }
}

fn precision_of<E: Elem>() -> Precision {
    match E::NAME {
        "f64" => Precision::F64,
        _ => Precision::F32,
    }
}

fn header_text(config: &ModelConfig, state: Option<&TrainState>, precision: Precision) -> String {
    let mut kv: Vec<(String, String)> = config
        .to_kv()
        .into_iter()
        .map(|(k, v)| (format!("model.{k}"), v))
        .collect();
    kv.push(("precision".into(), precision.to_string()));
    if let Some(s) = state {
        kv.push(("state.step".into(), s.step.to_string()));
        kv.push(("state.opt_step".into(), s.opt_step.to_string()));
        let seed_hex: String = s.rng_seed.iter().map(|b| format!("{b:02x}")).collect();
        kv.push(("state.rng_seed".into(), seed_hex));
        kv.push(("state.rng_word_pos".into(), s.rng_word_pos.to_string()));
        kv.push(("state.data_epoch".into(), s.data_epoch.to_string()));
        kv.push(("state.data_cursor".into(), s.data_cursor.to_string()));
        let window: Vec<String> = s.loss_window.iter().map(|x| format!("{:016x}", x.to_bits())).collect();
        kv.push(("state.loss_window".into(), window.join(",")));
    }
    kv.sort();
    let mut text = String::new();
    for (k, v) in kv {
        text.push_str(&k);
        text.push('=');
        text.push_str(&v);
        text.push('\n');
    }
    text
}

fn parse_header(text: &str) -> Result<(ModelConfig, Precision, Option<TrainState>)> {
    let mut map: BTreeMap<&str, &str> = BTreeMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed header line {line:?}")))?;
        map.insert(k, v);
    }
    let mut config = ModelConfig::default();
    for (k, v) in &map {
        if let Some(field) = k.strip_prefix("model.") {
            config.set_field(field, v)?;
        }
    }
    let precision = Precision::parse(
        map.get("precision")
            .ok_or_else(|| Error::Checkpoint("header missing precision".into()))?,
    )?;
    let state = if map.contains_key("state.step") {
        let get = |key: &str| -> Result<&str> {
            map.get(key)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("header missing {key}")))
        };
        let seed_hex = get("state.rng_seed")?;
        if seed_hex.len() != 64 {
            return Err(Error::Checkpoint("rng seed must be 32 hex bytes".into()));
        }
        let mut rng_seed = [0u8; 32];
        for (i, chunk) in seed_hex.as_bytes().chunks(2).enumerate() {
            let s = std::str::from_utf8(chunk).unwrap();
            rng_seed[i] = u8::from_str_radix(s, 16)
                .map_err(|_| Error::Checkpoint("invalid rng seed hex".into()))?;
        }
        let parse_u64 = |key: &str| -> Result<u64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("invalid integer for {key}")))
        };
        let window_text = get("state.loss_window")?;
        let loss_window = if window_text.is_empty() {
            Vec::new()
        } else {
            window_text
                .split(',')
                .map(|s| {
                    u64::from_str_radix(s, 16)
                        .map(f64::from_bits)
                        .map_err(|_| Error::Checkpoint("invalid loss window entry".into()))
                })
                .collect::<Result<Vec<f64>>>()?
        };
        Some(TrainState {
            step: parse_u64("state.step")?,
            opt_step: parse_u64("state.opt_step")?,
            rng_seed,
            rng_word_pos: get("state.rng_word_pos")?
                .parse()
                .map_err(|_| Error::Checkpoint("invalid rng word pos".into()))?,
            data_epoch: parse_u64("state.data_epoch")?,
            data_cursor: parse_u64("state.data_cursor")?,
            loss_window,
        })
    } else {
        None
    };
    Ok((config, precision, state))
}

/// Write a checkpoint. `extra` carries non-parameter tensors (optimizer
/// moments); parameter tensors come from the model itself.
pub fn save<E: Elem>(
    path: &Path,
    model: &MetroModel<E>,
    extra: &BTreeMap<String, (Vec<usize>, Vec<E>)>,
    state: Option<&TrainState>,
) -> Result<()> {
    let mut tensors: BTreeMap<String, (Vec<usize>, Arc<Vec<E>>)> = BTreeMap::new();
    for p in model.params().iter() {
        tensors.insert(p.name().to_string(), (p.shape().to_vec(), p.value()));
    }
    for (name, (shape, data)) in extra {
        tensors.insert(name.clone(), (shape.clone(), Arc::new(data.clone())));
    }

    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let header = header_text(&model.cfg, state, precision_of::<E>());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, (shape, data)) in &tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &dim in shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &x in data.iter() {
            x.write_le(&mut out);
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&out)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn open(path: &Path) -> Result<(Reader, u32, String)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let hlen = r.u64()? as usize;
    let header = String::from_utf8(r.take(hlen)?.to_vec())
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    Ok((r, version, header))
}

/// Read just the stored precision so the caller can pick the element type.
pub fn peek_precision(path: &Path) -> Result<Precision> {
    let (_, _, header) = open(path)?;
    let (_, precision, _) = parse_header(&header)?;
    Ok(precision)
}

pub fn load<E: Elem>(path: &Path) -> Result<LoadedCheckpoint<E>> {
    let (mut r, version, header) = open(path)?;
    let (config, precision, state) = parse_header(&header)?;
    if precision != precision_of::<E>() {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {precision} tensors, requested {}",
            precision_of::<E>()
        )));
    }
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * E::BYTES)?;
        let data: Vec<E> = raw.chunks_exact(E::BYTES).map(E::read_le).collect();
        tensors.insert(name, (shape, data));
    }
    Ok(LoadedCheckpoint {
        version,
        config,
        tensors,
        state,
    })
}

/// Convenience: parameter snapshot of a model as checkpoint-style tensors.
pub fn param_tensors<E: Elem>(params: &[Arc<Param<E>>]) -> BTreeMap<String, (Vec<usize>, Vec<E>)> {
    params
        .iter()
        .map(|p| (p.name().to_string(), (p.shape().to_vec(), p.value().to_vec())))
        .collect()
}
