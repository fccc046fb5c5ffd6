//! Single-file binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MCLAB-CKPT" | u32 format_version
//! u32 len | JSON header {model config, vocab_size, step, epoch, best_val_loss, rng}
//! u32 len | vocabulary text
//! u32 n_params, then per parameter:
//!     u32 len | name | u32 rows | u32 cols | rows*cols f32
//! u8 has_optimizer, then if set:
//!     u32 len | JSON optimizer config
//!     per parameter in the same order: u64 steps | first moment f32s | second moment f32s
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClipMae, ModelConfig};
use crate::nn::{AdamW, AdamWConfig, ParamStore, Tensor};
use crate::text::Vocabulary;

const MAGIC: &[u8] = b"MCLAB-CKPT";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as a decimal string; it is a 128-bit counter.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Format(format!("bad rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    vocab_size: usize,
    step: u64,
    epoch: u64,
    best_val_loss: Option<f64>,
    rng: Option<RngState>,
}

/// Model, vocabulary, optimizer and loop state at one point of training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ClipMae,
    pub vocab: Vocabulary,
    pub optimizer: Option<AdamW>,
    pub step: u64,
    pub epoch: u64,
    pub rng: Option<RngState>,
    pub best_val_loss: Option<f64>,
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.0.write_all(&[v])?)
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        let len = u32::try_from(b.len()).map_err(|_| Error::Format("section too large".into()))?;
        self.u32(len)?;
        Ok(self.0.write_all(b)?)
    }
    fn floats(&mut self, v: &[f32]) -> Result<()> {
        let mut buf = Vec::with_capacity(v.len() * 4);
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        Ok(self.0.write_all(&buf)?)
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&[u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(CHECKPOINT_FORMAT_VERSION)?;
        let header = Header {
            model: self.model.config().clone(),
            vocab_size: self.model.vocab_size(),
            step: self.step,
            epoch: self.epoch,
            best_val_loss: self.best_val_loss,
            rng: self.rng.clone(),
        };
        w.bytes(serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?.as_bytes())?;
        w.bytes(self.vocab.to_text().as_bytes())?;
        let params = &self.model.params;
        w.u32(params.len() as u32)?;
        for id in params.ids() {
            let t = params.value(id);
            w.bytes(params.name(id).as_bytes())?;
            w.u32(t.rows() as u32)?;
            w.u32(t.cols() as u32)?;
            w.floats(t.data())?;
        }
        match &self.optimizer {
            None => w.u8(0)?,
            Some(opt) => {
                w.u8(1)?;
                w.bytes(serde_json::to_string(&opt.config).map_err(|e| Error::Format(e.to_string()))?.as_bytes())?;
                for i in 0..params.len() {
                    w.u64(opt.steps[i])?;
                    w.floats(opt.first[i].data())?;
                    w.floats(opt.second[i].data())?;
                }
            }
        }
        Ok(w.0)
    }

    pub fn from_bytes(data: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { data, pos: 0 };
        let ctx = |m: String| Error::Format(format!("{}: {m}", origin.display()));
        if r.take(MAGIC.len()).ok() != Some(MAGIC) {
            return Err(ctx("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(ctx(format!(
                "checkpoint format_version {version} is not supported (expected {CHECKPOINT_FORMAT_VERSION})"
            )));
        }
        let header: Header =
            serde_json::from_slice(r.bytes()?).map_err(|e| ctx(format!("bad header: {e}")))?;
        let vocab = Vocabulary::parse(&r.string()?, origin)?;
        if vocab.len() != header.vocab_size {
            return Err(ctx(format!(
                "vocabulary has {} words, model expects {}",
                vocab.len(),
                header.vocab_size
            )));
        }
        let n = r.u32()? as usize;
        let mut store = ParamStore::new();
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let values = r.floats(rows * cols)?;
            if store.id(&name).is_some() {
                return Err(ctx(format!("parameter {name} stored twice")));
            }
            store.add(name, Tensor::from_vec(rows, cols, values), false);
            shapes.push((rows, cols));
        }
        let model = ClipMae::from_params(header.model, header.vocab_size, &store)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let config: AdamWConfig =
                    serde_json::from_slice(r.bytes()?).map_err(|e| ctx(format!("bad optimizer config: {e}")))?;
                let mut opt = AdamW::new(&model.params, config);
                for (saved, &(rows, cols)) in store.ids().zip(&shapes) {
                    let id = model.params.id(store.name(saved)).expect("checked by from_params");
                    let i = id.index();
                    opt.steps[i] = r.u64()?;
                    opt.first[i] = Tensor::from_vec(rows, cols, r.floats(rows * cols)?);
                    opt.second[i] = Tensor::from_vec(rows, cols, r.floats(rows * cols)?);
                }
                Some(opt)
            }
            other => return Err(ctx(format!("bad optimizer flag {other}"))),
        };
        if r.pos != data.len() {
            return Err(ctx(format!("{} trailing bytes", data.len() - r.pos)));
        }
        Ok(Self {
            model,
            vocab,
            optimizer,
            step: header.step,
            epoch: header.epoch,
            rng: header.rng,
            best_val_loss: header.best_val_loss,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut data = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?
            .read_to_end(&mut data)?;
        Self::from_bytes(&data, path)
    }
}
