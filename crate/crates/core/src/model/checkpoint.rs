//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  b"DTMCKPT\0"
//! version  u32      currently 1
//! hlen     u64      length of the JSON header
//! header   hlen bytes of UTF-8 JSON: model config, schema, producer config
//!          and the ordered (name, shape) list of stored tensors
//! payload  every tensor's f64 values in header order, little-endian
//! ```
//!
//! Identical contents serialize to identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{DtmModel, Head, ModelConfig};
use super::schema::AttributeSchema;
use crate::error::{Error, Result};
use crate::tensor::BatchNormState;

const MAGIC: &[u8; 8] = b"DTMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    schema: AttributeSchema,
    /// Serialized configuration of whatever produced the weights.
    producer: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Model weights, BN running statistics and provenance config.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DtmModel,
    pub producer: serde_json::Value,
}

type Visitor<'a> = dyn FnMut(&str, &[usize], &mut [f64]) + 'a;

fn visit_bn(prefix: &str, bn: &mut BatchNormState, f: &mut Visitor<'_>) {
    let c = bn.channels();
    let gs = bn.gamma.shape().to_vec();
    f(&format!("{prefix}.gamma"), &gs, bn.gamma.data_mut());
    f(&format!("{prefix}.beta"), &gs, bn.beta.data_mut());
    f(&format!("{prefix}.running_mean"), &[c], &mut bn.running_mean);
    f(&format!("{prefix}.running_var"), &[c], &mut bn.running_var);
}

/// Visits every stored tensor in a fixed order.
fn visit_state(model: &mut DtmModel, f: &mut Visitor<'_>) {
    for (i, st) in model.backbone.stages.iter_mut().enumerate() {
        let s = st.kernel.shape().to_vec();
        f(&format!("backbone.{i}.kernel"), &s, st.kernel.data_mut());
        visit_bn(&format!("backbone.{i}.bn"), &mut st.bn, f);
    }
    match &mut model.head {
        Head::Dtm(h) => {
            for (name, bank) in [("gap", h.gap.as_mut()), ("gmp", h.gmp.as_mut())] {
                if let Some(bank) = bank {
                    let s = bank.templates.shape().to_vec();
                    f(&format!("head.{name}.templates"), &s, bank.templates.data_mut());
                    if let Some(bn) = bank.bn.as_mut() {
                        visit_bn(&format!("head.{name}.bn"), bn, f);
                    }
                }
            }
        }
        Head::Fc(fc) => {
            let s = fc.w_fc.shape().to_vec();
            f("head.fc.w_fc", &s, fc.w_fc.data_mut());
            if let Some(bn) = fc.bn.as_mut() {
                visit_bn("head.fc.bn", bn, f);
            }
        }
    }
}

fn read_array<const N: usize>(bytes: &[u8], at: &mut usize) -> Result<[u8; N]> {
    let end = *at + N;
    let slice = bytes
        .get(*at..end)
        .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
    *at = end;
    Ok(slice.try_into().expect("length checked"))
}

impl Checkpoint {
    pub fn new(model: DtmModel, producer: serde_json::Value) -> Self {
        Checkpoint { model, producer }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut model = self.model.clone();
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        visit_state(&mut model, &mut |name, shape, data| {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: shape.to_vec(),
            });
            for v in data.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        });
        let header = Header {
            model_config: self.model.config.clone(),
            schema: self.model.schema.clone(),
            producer: self.producer.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header encoding: {e}")))?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut at = 0;
        let magic: [u8; 8] = read_array(bytes, &mut at)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(read_array(bytes, &mut at)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(read_array(bytes, &mut at)?) as usize;
        let json = bytes
            .get(at..at.saturating_add(hlen))
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        at += hlen;
        let header: Header = serde_json::from_slice(json)
            .map_err(|e| Error::Checkpoint(format!("header decoding: {e}")))?;

        let mut model = DtmModel::new(header.schema, header.model_config, 0)?;
        let mut expected = Vec::new();
        visit_state(&mut model, &mut |name, shape, _| {
            expected.push(TensorEntry {
                name: name.to_string(),
                shape: shape.to_vec(),
            })
        });
        if expected != header.tensors {
            return Err(Error::Checkpoint(
                "tensor list does not match the architecture in the header".into(),
            ));
        }
        let total: usize = expected.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        let payload = &bytes[at..];
        if payload.len() != total * 8 {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, expected {}",
                payload.len(),
                total * 8
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        visit_state(&mut model, &mut |_, _, data| {
            for v in data.iter_mut() {
                *v = values.next().expect("length checked");
            }
        });
        Ok(Checkpoint {
            model,
            producer: header.producer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
