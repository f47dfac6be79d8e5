//! JSON checkpoint envelope with bit-stable float serialization.

use std::collections::BTreeMap;
use std::path::Path;

use serde::ser::{Error as _, SerializeSeq};
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use super::mlp::Mlp;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    #[serde(serialize_with = "serialize_f64s")]
    pub data: Vec<f64>,
}

/// Writes every value with 17 significant digits.
fn serialize_f64s<S: Serializer>(data: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(data.len()))?;
    for x in data {
        if !x.is_finite() {
            return Err(S::Error::custom(format!("non-finite tensor value {x}")));
        }
        let raw = RawValue::from_string(format!("{x:.16e}")).map_err(S::Error::custom)?;
        seq.serialize_element(&raw)?;
    }
    seq.end()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub created: String,
    pub config_hash: String,
    pub tensors: BTreeMap<String, Tensor>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub metadata: serde_json::Value,
}

/// SHA-256 of the config's JSON form with object keys sorted.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let canonical = serde_json::to_value(cfg)?;
    let bytes = serde_json::to_vec(&canonical)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Checkpoint {
    pub fn new(config_hash: impl Into<String>) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            config_hash: config_hash.into(),
            tensors: BTreeMap::new(),
            metadata: serde_json::Value::Null,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(n, data.len()));
        }
        self.tensors.insert(name.into(), Tensor { shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::DataError(format!("checkpoint has no tensor '{name}'")))
    }

    /// Stores each layer as `<prefix>.<l>.weight` `[in, out]` and
    /// `<prefix>.<l>.bias` `[out]`.
    pub fn insert_mlp(&mut self, prefix: &str, net: &Mlp) -> Result<()> {
        for l in 0..net.num_layers() {
            let (w, b) = net.layer(l);
            self.insert(format!("{prefix}.{l}.weight"), w.shape().to_vec(), w.iter().copied().collect())?;
            self.insert(format!("{prefix}.{l}.bias"), b.shape().to_vec(), b.to_vec())?;
        }
        Ok(())
    }

    pub fn mlp(&self, prefix: &str) -> Result<Mlp> {
        let mut sizes = Vec::new();
        let mut params = Vec::new();
        for l in 0.. {
            let Some(w) = self.tensors.get(&format!("{prefix}.{l}.weight")) else {
                break;
            };
            let b = self.get(&format!("{prefix}.{l}.bias"))?;
            let [i, o] = w.shape[..] else {
                return Err(Error::DataError(format!("{prefix}.{l}.weight is not a matrix")));
            };
            if b.shape != [o] {
                return Err(Error::DataError(format!("{prefix}.{l}.bias has shape {:?}", b.shape)));
            }
            match sizes.last() {
                None => sizes.push(i),
                Some(&prev) if prev != i => {
                    return Err(Error::DataError(format!("{prefix}.{l} input {i} != previous output {prev}")));
                }
                _ => {}
            }
            sizes.push(o);
            params.extend_from_slice(&w.data);
            params.extend_from_slice(&b.data);
        }
        if sizes.is_empty() {
            return Err(Error::DataError(format!("checkpoint has no network '{prefix}'")));
        }
        Mlp::from_params(sizes, params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::DataError(format!(
                "unsupported checkpoint format {}",
                ck.format_version
            )));
        }
        for (name, t) in &ck.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::DataError(format!("tensor '{name}' shape/data mismatch")));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}
