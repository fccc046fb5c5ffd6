//! Binary store of unit-norm embeddings with per-row metadata.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! magic "MCLAB-EMB" | u32 version | u64 count | u32 dim | u8 side (0 image, 1 text)
//! count * dim f32
//! count JSON lines of row metadata, in row order
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{l2_norm, Embedding};

const MAGIC: &[u8] = b"MCLAB-EMB";
pub const STORE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Image,
    Text,
}

impl Side {
    fn byte(self) -> u8 {
        match self {
            Side::Image => 0,
            Side::Text => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Side::Image),
            1 => Ok(Side::Text),
            other => Err(Error::Format(format!("unknown store side byte {other}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowMeta {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

impl RowMeta {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    side: Side,
    dim: usize,
    data: Vec<f32>,
    meta: Vec<RowMeta>,
    ids: BTreeSet<String>,
}

impl EmbeddingStore {
    pub fn new(side: Side, dim: usize) -> Self {
        Self {
            side,
            dim,
            data: Vec::new(),
            meta: Vec::new(),
            ids: BTreeSet::new(),
        }
    }

    pub fn push(&mut self, meta: RowMeta, emb: &Embedding) -> Result<()> {
        if emb.dim() != self.dim {
            return Err(Error::dimension(format!("embedding of {}", meta.id), self.dim, emb.dim()));
        }
        if !self.ids.insert(meta.id.clone()) {
            return Err(Error::Validation(format!("duplicate store id {}", meta.id)));
        }
        self.data.extend_from_slice(emb.as_slice());
        self.meta.push(meta);
        Ok(())
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.meta[i].id
    }

    pub fn meta(&self, i: usize) -> &RowMeta {
        &self.meta[i]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&RowMeta, &[f32])> {
        self.meta.iter().zip(self.data.chunks_exact(self.dim.max(1)))
    }

    /// Keeps the rows for which `keep` holds, in order.
    pub fn filter(&self, mut keep: impl FnMut(&RowMeta) -> bool) -> Self {
        let mut out = Self::new(self.side, self.dim);
        for (m, row) in self.rows() {
            if keep(m) {
                out.data.extend_from_slice(row);
                out.ids.insert(m.id.clone());
                out.meta.push(m.clone());
            }
        }
        out
    }

    /// Checks the unit-norm and unique-id invariants.
    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.meta.len() * self.dim || self.ids.len() != self.meta.len() {
            return Err(Error::Validation("store rows and ids disagree".into()));
        }
        for (m, row) in self.rows() {
            let n = l2_norm(row);
            if (n - 1.0).abs() > Embedding::NORM_TOLERANCE {
                return Err(Error::Validation(format!("row {} has norm {n}", m.id)));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(MAGIC.len() + 17 + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&STORE_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        let dim = u32::try_from(self.dim).map_err(|_| Error::Format("dimension too large".into()))?;
        out.extend_from_slice(&dim.to_le_bytes());
        out.push(self.side.byte());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for m in &self.meta {
            out.extend_from_slice(serde_json::to_string(m).map_err(|e| Error::Format(e.to_string()))?.as_bytes());
            out.push(b'\n');
        }
        Ok(out)
    }

    /// Parses and validates a store.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let err = |m: String| Error::Format(format!("{}: {m}", origin.display()));
        let header = MAGIC.len() + 4 + 8 + 4 + 1;
        if bytes.len() < header || &bytes[..MAGIC.len()] != MAGIC {
            return Err(err("not an embedding store".into()));
        }
        let mut pos = MAGIC.len();
        let mut take = |n: usize| {
            let s = &bytes[pos..pos + n];
            pos += n;
            s
        };
        let version = u32::from_le_bytes(take(4).try_into().unwrap());
        if version != STORE_FORMAT_VERSION {
            return Err(err(format!("store version {version} is not supported")));
        }
        let count = u64::from_le_bytes(take(8).try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(take(4).try_into().unwrap()) as usize;
        let side = Side::from_byte(take(1)[0])?;
        let n_floats = count.checked_mul(dim).ok_or_else(|| err("size overflow".into()))?;
        let body = header + n_floats * 4;
        if bytes.len() < body {
            return Err(err("store is truncated".into()));
        }
        let data: Vec<f32> = bytes[header..body]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let text = std::str::from_utf8(&bytes[body..]).map_err(|e| err(format!("metadata is not UTF-8: {e}")))?;
        let mut meta = Vec::with_capacity(count);
        for (i, line) in text.lines().enumerate() {
            let m: RowMeta = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            meta.push(m);
        }
        if meta.len() != count {
            return Err(err(format!("{count} rows but {} metadata lines", meta.len())));
        }
        let ids: BTreeSet<String> = meta.iter().map(|m| m.id.clone()).collect();
        if ids.len() != count {
            return Err(Error::Validation(format!("{}: duplicate ids", origin.display())));
        }
        let store = Self {
            side,
            dim,
            data,
            meta,
            ids,
        };
        store.validate()?;
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read embedding store {}: {e}", path.display())))?;
        Self::from_bytes(&bytes, path)
    }
}
