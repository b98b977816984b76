//! Binary checkpoints: `u64` LE header length, JSON header, then the tensors
//! as little-endian `f64` in header order.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::classifier::AttributeClassifier;
use super::conditional::ConditionalLM;
use super::lexicon::Lexicon;
use super::lm::{CausalLM, LmConfig};
use super::params::ParamStore;
use super::table::EmbeddingTable;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const TABLE: &str = "table";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub version: u32,
    pub kind: String,
    pub lexicon: Lexicon,
    pub tensors: Vec<TensorEntry>,
    pub meta: Value,
    pub table_hash: String,
}

/// Any model that can be stored in a checkpoint.
#[derive(Clone, Debug)]
pub enum Checkpoint {
    Lm(CausalLM),
    Classifier(AttributeClassifier),
    Conditional(ConditionalLM),
}

impl Checkpoint {
    pub fn table(&self) -> &Arc<EmbeddingTable> {
        match self {
            Self::Lm(m) => m.table(),
            Self::Classifier(c) => c.table(),
            Self::Conditional(c) => c.table(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Lm(_) => "lm",
            Self::Classifier(_) => "classifier",
            Self::Conditional(_) => "conditional",
        }
    }
}

fn encode(kind: &str, table: &EmbeddingTable, meta: Value, tensors: Vec<(String, &Tensor)>) -> Result<Vec<u8>> {
    let mut all = vec![(TABLE.to_string(), table.weights())];
    all.extend(tensors);
    let header = Header {
        version: FORMAT_VERSION,
        kind: kind.into(),
        lexicon: table.lexicon().clone(),
        tensors: all
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta,
        table_hash: table.content_hash(),
    };
    let head = serde_json::to_vec(&header)?;
    let payload: usize = all.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(8 + head.len() + payload * 8);
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    for (_, t) in &all {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(Header, Vec<(String, Tensor)>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("file too short for header length"));
    }
    let head_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8usize.saturating_add(head_len)).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    let mut offset = 8 + head_len;
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if bytes.len() - offset != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, header describes {}",
            bytes.len() - offset,
            expected * 8
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let data = bytes[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += n * 8;
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok((header, tensors))
}

fn take_table(header: &Header, tensors: &mut Vec<(String, Tensor)>) -> Result<Arc<EmbeddingTable>> {
    if tensors.first().map(|(n, _)| n.as_str()) != Some(TABLE) {
        return Err(Error::Checkpoint("first tensor must be the embedding table".into()));
    }
    let (_, weights) = tensors.remove(0);
    let table = EmbeddingTable::new(weights, header.lexicon.clone())?;
    let hash = table.content_hash();
    if hash != header.table_hash {
        return Err(Error::TableMismatch(header.table_hash.clone(), hash));
    }
    Ok(Arc::new(table))
}

fn store_from(tensors: Vec<(String, Tensor)>) -> ParamStore {
    let mut p = ParamStore::default();
    for (name, t) in tensors {
        p.push(name, t);
    }
    p
}

fn strip(prefix: &str, tensors: &[(String, Tensor)]) -> Vec<(String, Tensor)> {
    tensors
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
        .collect()
}

fn meta_field<T: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<T> {
    let v = meta.get(key).ok_or_else(|| Error::Checkpoint(format!("meta.{key} missing")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("meta.{key}: {e}")))
}

pub fn to_bytes(model: &Checkpoint) -> Result<Vec<u8>> {
    match model {
        Checkpoint::Lm(lm) => {
            let named = lm.params().names().iter().cloned().zip(lm.params().tensors()).collect();
            encode("lm", lm.table(), json!({ "config": lm.config() }), named)
        }
        Checkpoint::Classifier(c) => {
            let named = c.params().names().iter().cloned().zip(c.params().tensors()).collect();
            let meta = json!({ "labels": c.labels(), "hidden": c.hidden() });
            encode("classifier", c.table(), meta, named)
        }
        Checkpoint::Conditional(cond) => {
            let (lms, meta): (Vec<&CausalLM>, Value) = match cond {
                ConditionalLM::Separate { lms, labels } => (
                    lms.iter().collect(),
                    json!({ "mode": "separate", "labels": labels, "config": lms[0].config() }),
                ),
                ConditionalLM::Verbalizer {
                    lm,
                    label_tokens,
                    labels,
                } => (
                    vec![lm],
                    json!({ "mode": "verbalizer", "labels": labels, "label_tokens": label_tokens, "config": lm.config() }),
                ),
            };
            let mut named = Vec::new();
            for (k, lm) in lms.iter().enumerate() {
                for (n, t) in lm.params().names().iter().zip(lm.params().tensors()) {
                    named.push((format!("lm{k}/{n}"), t));
                }
            }
            encode("conditional", cond.table(), meta, named)
        }
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, mut tensors) = decode(bytes)?;
    let table = take_table(&header, &mut tensors)?;
    let meta = &header.meta;
    match header.kind.as_str() {
        "lm" => {
            let config: LmConfig = meta_field(meta, "config")?;
            Ok(Checkpoint::Lm(CausalLM::from_parts(table, config, store_from(tensors))?))
        }
        "classifier" => {
            let labels: Vec<String> = meta_field(meta, "labels")?;
            let hidden: usize = meta_field(meta, "hidden")?;
            Ok(Checkpoint::Classifier(AttributeClassifier::from_parts(
                table,
                labels,
                hidden,
                store_from(tensors),
            )?))
        }
        "conditional" => {
            let labels: Vec<String> = meta_field(meta, "labels")?;
            let config: LmConfig = meta_field(meta, "config")?;
            let mode: String = meta_field(meta, "mode")?;
            let lm_at = |k: usize| CausalLM::from_parts(table.clone(), config.clone(), store_from(strip(&format!("lm{k}/"), &tensors)));
            match mode.as_str() {
                "separate" => {
                    let lms = (0..labels.len()).map(lm_at).collect::<Result<Vec<_>>>()?;
                    Ok(Checkpoint::Conditional(ConditionalLM::separate(lms, labels)?))
                }
                "verbalizer" => {
                    let tokens: Vec<usize> = meta_field(meta, "label_tokens")?;
                    Ok(Checkpoint::Conditional(ConditionalLM::verbalizer(lm_at(0)?, tokens, labels)?))
                }
                other => Err(Error::Checkpoint(format!("unknown conditional mode {other}"))),
            }
        }
        other => Err(Error::Checkpoint(format!("unknown checkpoint kind {other}"))),
    }
}

pub fn save(path: &Path, model: &Checkpoint) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

fn wrong_kind(path: &Path, want: &str, got: &Checkpoint) -> Error {
    Error::Checkpoint(format!("{}: expected a {want} checkpoint, found {}", path.display(), got.kind()))
}

pub fn load_lm(path: &Path) -> Result<CausalLM> {
    match load(path)? {
        Checkpoint::Lm(m) => Ok(m),
        other => Err(wrong_kind(path, "lm", &other)),
    }
}

pub fn load_classifier(path: &Path) -> Result<AttributeClassifier> {
    match load(path)? {
        Checkpoint::Classifier(m) => Ok(m),
        other => Err(wrong_kind(path, "classifier", &other)),
    }
}

pub fn load_conditional(path: &Path) -> Result<ConditionalLM> {
    match load(path)? {
        Checkpoint::Conditional(m) => Ok(m),
        other => Err(wrong_kind(path, "conditional", &other)),
    }
}
