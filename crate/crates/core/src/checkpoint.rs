//! Binary checkpoints.
//!
//! Layout: the 8 magic bytes `MSDFCKPT`, a `u32` format version, a `u64`
//! header length, the JSON header, then every tensor's data as `f64`
//! little-endian in header order. Models are rebuilt from the header and
//! their parameters set by name. Training checkpoints also carry the
//! optimizer moments (`opt.m.*`, `opt.v.*`), the best snapshot (`best.*`)
//! and the counters under `extra.train_state`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use msdf_text::{Task, Vocab};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::generator::{Architecture, GeneratorModel};
use crate::optim::{AdamConfig, AdamW};
use crate::params::{ParamStore, Parameterized};
use crate::selector::SelectorModel;
use crate::tensor::Tensor;
use crate::trainer::{TrainMeta, TrainState};
use crate::transformer::ModelConfig;
use crate::Scalar;

pub const MAGIC: &[u8; 8] = b"MSDFCKPT";
pub const VERSION: u32 = 1;
const MAX_HEADER: u64 = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Generator,
    Selector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: Kind,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<Architecture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_history_tokens: Option<usize>,
    pub vocab: Vec<String>,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

/// Writes a header and its tensors; `header.tensors` is filled in here.
pub fn write_raw<S: Scalar, W: Write>(mut w: W, mut header: Header, tensors: &[(String, &Tensor<S>)]) -> Result<()> {
    header.tensors = tensors
        .iter()
        .map(|(n, t)| TensorEntry {
            name: n.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in tensors {
        for v in t.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_raw<S: Scalar, R: Read>(mut r: R) -> Result<(Header, Vec<(String, Tensor<S>)>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated before magic"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| bad("truncated before version"))?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| bad("truncated before header"))?;
    let len = u64::from_le_bytes(b8);
    if len > MAX_HEADER {
        return Err(bad(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| bad(format!("truncated data for {}", e.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| S::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((header, tensors))
}

/// Models that can be rebuilt from a checkpoint header.
pub trait Checkpointable<S: Scalar>: Parameterized<S> + Sized {
    const KIND: Kind;

    /// Header without tensors or extra.
    fn header(&self) -> Header;

    /// A model with the header's structure; parameters are overwritten
    /// afterwards.
    fn build(header: &Header) -> Result<Self>;
}

impl<S: Scalar> Checkpointable<S> for GeneratorModel<S> {
    const KIND: Kind = Kind::Generator;

    fn header(&self) -> Header {
        Header {
            kind: Kind::Generator,
            config: self.config.clone(),
            arch: Some(self.arch),
            task: self.task,
            max_history_tokens: None,
            vocab: self.vocab.tokens().to_vec(),
            tensors: Vec::new(),
            extra: serde_json::Value::Null,
        }
    }

    fn build(h: &Header) -> Result<Self> {
        let arch = h.arch.ok_or_else(|| bad("generator checkpoint without arch"))?;
        let vocab = Vocab::from_tokens(h.vocab.clone())?;
        GeneratorModel::new(h.config.clone(), arch, h.task, vocab, 0)
    }
}

impl<S: Scalar> Checkpointable<S> for SelectorModel<S> {
    const KIND: Kind = Kind::Selector;

    fn header(&self) -> Header {
        Header {
            kind: Kind::Selector,
            config: self.config.clone(),
            arch: None,
            task: None,
            max_history_tokens: Some(self.max_history_tokens),
            vocab: self.vocab.tokens().to_vec(),
            tensors: Vec::new(),
            extra: serde_json::Value::Null,
        }
    }

    fn build(h: &Header) -> Result<Self> {
        let vocab = Vocab::from_tokens(h.vocab.clone())?;
        let mut m = SelectorModel::new(h.config.clone(), vocab, 0)?;
        if let Some(n) = h.max_history_tokens {
            m.max_history_tokens = n;
        }
        Ok(m)
    }
}

/// A model read back from disk.
#[derive(Debug)]
pub struct Loaded<M, S: Scalar> {
    pub model: M,
    pub extra: serde_json::Value,
    pub state: Option<TrainState<S>>,
}

pub fn save<S: Scalar, M: Checkpointable<S>>(
    model: &M,
    path: impl AsRef<Path>,
    extra: serde_json::Value,
    state: Option<&TrainState<S>>,
) -> Result<()> {
    let path = path.as_ref();
    let mut header = model.header();
    header.extra = extra;
    let store = model.params();
    let mut tensors: Vec<(String, &Tensor<S>)> = store.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
    if let Some(st) = state {
        let meta = serde_json::to_value(st.meta()).map_err(|e| bad(e.to_string()))?;
        let adam = serde_json::to_value(&st.optimizer.config).map_err(|e| bad(e.to_string()))?;
        if !header.extra.is_object() {
            header.extra = serde_json::json!({});
        }
        header.extra["train_state"] = meta;
        header.extra["adam"] = adam;
        for (id, name, _) in store.iter() {
            tensors.push((format!("opt.m.{name}"), &st.optimizer.m[id.0]));
            tensors.push((format!("opt.v.{name}"), &st.optimizer.v[id.0]));
        }
        if let Some(best) = &st.best {
            tensors.extend(best.iter().map(|(_, n, t)| (format!("best.{n}"), t)));
        }
    }
    // write next to the target and rename so readers never see a partial file
    let tmp = path.with_extension("tmp");
    write_raw(BufWriter::new(File::create(&tmp)?), header, &tensors)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<S: Scalar, M: Checkpointable<S>>(path: impl AsRef<Path>) -> Result<Loaded<M, S>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    let (header, tensors) = read_raw::<S, _>(BufReader::new(file))?;
    from_parts(header, tensors)
}

pub fn from_parts<S: Scalar, M: Checkpointable<S>>(
    header: Header,
    tensors: Vec<(String, Tensor<S>)>,
) -> Result<Loaded<M, S>> {
    if header.kind != M::KIND {
        return Err(bad(format!("expected a {:?} checkpoint, found {:?}", M::KIND, header.kind)));
    }
    let mut model = M::build(&header)?;
    let n = model.params().len();
    let mut seen = vec![false; n];
    let mut m = vec![None; n];
    let mut v = vec![None; n];
    let mut best = vec![None; n];
    for (name, t) in tensors {
        let (slot, base) = if let Some(b) = name.strip_prefix("opt.m.") {
            (Some(&mut m), b)
        } else if let Some(b) = name.strip_prefix("opt.v.") {
            (Some(&mut v), b)
        } else if let Some(b) = name.strip_prefix("best.") {
            (Some(&mut best), b)
        } else {
            (None, name.as_str())
        };
        let id = model
            .params()
            .id(base)
            .ok_or_else(|| bad(format!("unknown tensor {name}")))?;
        let want = model.params().get(id).shape();
        if want != t.shape() {
            return Err(bad(format!("{name}: shape {:?}, model expects {want:?}", t.shape())));
        }
        match slot {
            Some(s) => s[id.0] = Some(t),
            None => {
                seen[id.0] = true;
                model.params_mut().set(id, t)?;
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(bad(format!("missing tensor {}", model.params().name(crate::ParamId(i)))));
    }
    let state = match header.extra.get("train_state") {
        None => None,
        Some(meta) => {
            let meta: TrainMeta = serde_json::from_value(meta.clone()).map_err(|e| bad(format!("train_state: {e}")))?;
            let adam: AdamConfig = match header.extra.get("adam") {
                Some(a) => serde_json::from_value(a.clone()).map_err(|e| bad(format!("adam: {e}")))?,
                None => AdamConfig::default(),
            };
            let take = |slot: Vec<Option<Tensor<S>>>, what: &str| -> Result<Vec<Tensor<S>>> {
                slot.into_iter()
                    .enumerate()
                    .map(|(i, t)| t.ok_or_else(|| bad(format!("missing {what} for {}", model.params().name(crate::ParamId(i))))))
                    .collect()
            };
            let optimizer = AdamW {
                config: adam,
                step: meta.optimizer_step,
                m: take(m, "opt.m")?,
                v: take(v, "opt.v")?,
            };
            let best = if best.iter().all(Option::is_some) {
                let mut store: ParamStore<S> = model.params().clone();
                for (i, t) in best.into_iter().enumerate() {
                    store.set(crate::ParamId(i), t.expect("checked"))?;
                }
                Some(store)
            } else if best.iter().all(Option::is_none) {
                None
            } else {
                return Err(bad("partial best snapshot"));
            };
            Some(TrainState {
                step: meta.step,
                epoch: meta.epoch,
                batch_in_epoch: meta.batch_in_epoch,
                optimizer,
                best_dev: meta.best_dev,
                best_step: meta.best_step,
                best,
            })
        }
    };
    Ok(Loaded {
        model,
        extra: header.extra,
        state,
    })
}

/// Reads only the header (kind, config, vocabulary).
pub fn peek(path: impl AsRef<Path>) -> Result<Header> {
    let (h, _) = read_raw::<f64, _>(BufReader::new(File::open(path)?))?;
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_roundtrip_is_bit_exact() {
        let t = Tensor::<f64>::matrix(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let header = Header {
            kind: Kind::Selector,
            config: ModelConfig::default(),
            arch: None,
            task: None,
            max_history_tokens: None,
            vocab: vec![],
            tensors: vec![],
            extra: serde_json::json!({"k": 1}),
        };
        let mut buf = Vec::new();
        write_raw(&mut buf, header, &[("w".to_string(), &t)]).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let (h, ts) = read_raw::<f64, _>(buf.as_slice()).unwrap();
        assert_eq!(h.tensors, vec![TensorEntry { name: "w".into(), shape: vec![2, 2] }]);
        let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ts[0].1), bits(&t));

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_raw::<f64, _>(bad_magic.as_slice()).is_err());
        assert!(read_raw::<f64, _>(&buf[..buf.len() - 3]).is_err());
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_raw::<f64, _>(trailing.as_slice()).is_err());
    }
}
