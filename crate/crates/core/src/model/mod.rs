//! Image encoder, text encoder, masked-patch decoder and projection heads.
//!
//! All images, whatever their modality, go through the same patch
//! transformer. Its mean-pooled token features feed a linear projection into
//! the shared embedding space; a lightweight decoder rebuilds masked patches
//! from the visible tokens. Text runs through a causal transformer and is
//! pooled at the end token.

mod mask;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ReconTarget;
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::text::TokenSequence;

pub use mask::{masked_count, patchify, sincos_2d, unpatchify, PatchMask};

/// Which view of an image feeds the contrastive terms during pretraining.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveView {
    /// Reuse the masked encoder pass that also feeds reconstruction.
    #[default]
    Masked,
    /// Run a separate pass over all patches.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub text_dim: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub mlp_ratio: usize,
    pub max_text_len: usize,
    pub proj_dim: usize,
    pub mask_ratio: f64,
    pub temperature_init: f64,
    pub learnable_temperature: bool,
    pub temperature_clamp: [f64; 2],
    pub contrastive_view: ContrastiveView,
    pub recon_target: ReconTarget,
}

impl Default for ModelConfig {
    /// Desk-scale model for 64x64 synthetic images.
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            patch_size: 8,
            enc_dim: 128,
            enc_depth: 4,
            enc_heads: 4,
            dec_dim: 64,
            dec_depth: 2,
            dec_heads: 4,
            text_dim: 128,
            text_depth: 2,
            text_heads: 4,
            mlp_ratio: 4,
            max_text_len: 64,
            proj_dim: 128,
            mask_ratio: 0.75,
            temperature_init: 0.07,
            learnable_temperature: true,
            temperature_clamp: [0.01, 100.0],
            contrastive_view: ContrastiveView::Masked,
            recon_target: ReconTarget::MaskedOnly,
        }
    }
}

impl ModelConfig {
    /// 224x224 inputs with 16x16 patches, as used for clinical images.
    pub fn full_resolution() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            ..Self::default()
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn pixel_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("enc_dim", self.enc_dim),
            ("enc_depth", self.enc_depth),
            ("enc_heads", self.enc_heads),
            ("dec_dim", self.dec_dim),
            ("dec_depth", self.dec_depth),
            ("dec_heads", self.dec_heads),
            ("text_dim", self.text_dim),
            ("text_depth", self.text_depth),
            ("text_heads", self.text_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("max_text_len", self.max_text_len),
            ("proj_dim", self.proj_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        for (name, dim, heads) in [
            ("enc", self.enc_dim, self.enc_heads),
            ("dec", self.dec_dim, self.dec_heads),
            ("text", self.text_dim, self.text_heads),
        ] {
            if dim % heads != 0 {
                return Err(Error::Config(format!(
                    "{name}_dim {dim} is not divisible by {name}_heads {heads}"
                )));
            }
        }
        for (name, dim) in [("enc_dim", self.enc_dim), ("dec_dim", self.dec_dim)] {
            if dim % 4 != 0 {
                return Err(Error::Config(format!(
                    "{name} {dim} must be divisible by 4 for 2-D position encoding"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask_ratio {} outside [0, 1)",
                self.mask_ratio
            )));
        }
        if self.max_text_len < 2 {
            return Err(Error::Config("max_text_len must hold start and end tokens".into()));
        }
        let [lo, hi] = self.temperature_clamp;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "temperature_clamp [{lo}, {hi}] is not a positive interval"
            )));
        }
        if !(lo..=hi).contains(&self.temperature_init) {
            return Err(Error::Config(format!(
                "temperature_init {} outside clamp [{lo}, {hi}]",
                self.temperature_init
            )));
        }
        Ok(())
    }
}

/// Unit-norm vector in the shared image-text space.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub const NORM_TOLERANCE: f64 = 1e-6;

    /// Wraps a vector that must already have unit l2 norm.
    pub fn new(vector: Vec<f32>) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding has non-finite entries".into()));
        }
        let norm = l2_norm(&vector);
        if (norm - 1.0).abs() > Self::NORM_TOLERANCE {
            return Err(Error::Numeric(format!("embedding norm {norm} is not 1")));
        }
        Ok(Self(vector))
    }

    /// Scales `vector` to unit norm.
    pub fn normalized(vector: &[f32]) -> Result<Self> {
        let norm = l2_norm(vector);
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Numeric(format!("cannot normalize vector with norm {norm}")));
        }
        Ok(Self(
            vector.iter().map(|&v| (f64::from(v) / norm) as f32).collect(),
        ))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| f64::from(*a) * f64::from(*b))
            .sum()
    }
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

/// Pooled encoder features and projected embeddings for a batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub features: Tensor,
    pub embeddings: Vec<Embedding>,
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    attn_out: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Ids {
    patch: (ParamId, ParamId),
    enc_blocks: Vec<BlockIds>,
    enc_norm: (ParamId, ParamId),
    img_proj: ParamId,
    dec_embed: (ParamId, ParamId),
    mask_token: ParamId,
    dec_blocks: Vec<BlockIds>,
    dec_norm: (ParamId, ParamId),
    dec_pred: (ParamId, ParamId),
    tok_embed: ParamId,
    text_pos: ParamId,
    text_blocks: Vec<BlockIds>,
    text_norm: (ParamId, ParamId),
    text_proj: ParamId,
    log_tau: ParamId,
}

/// Parameter-name prefix of the image encoder (patch embedding, blocks,
/// final norm and projection).
pub const IMAGE_ENCODER_PREFIX: &str = "image.";
/// Parameter-name prefix of the text encoder.
pub const TEXT_ENCODER_PREFIX: &str = "text.";

/// Contrastive image-text model with a masked-autoencoder decoder.
#[derive(Clone, Debug)]
pub struct ClipMae {
    config: ModelConfig,
    vocab_size: usize,
    pub params: ParamStore,
    ids: Ids,
    enc_pos: Tensor,
    dec_pos: Tensor,
}

struct Init<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f32, decay: bool) -> ParamId {
        let dist = Normal::new(0.0f32, std).expect("valid std");
        let data = (0..rows * cols).map(|_| dist.sample(self.rng)).collect();
        self.store.add(name, Tensor::from_vec(rows, cols, data), decay)
    }

    /// Xavier-uniform weight plus zero bias.
    fn linear(&mut self, name: &str, din: usize, dout: usize) -> (ParamId, ParamId) {
        let w = self.linear_weight(name, din, dout);
        let b = self
            .store
            .add(format!("{name}.bias"), Tensor::zeros(1, dout), false);
        (w, b)
    }

    fn linear_weight(&mut self, name: &str, din: usize, dout: usize) -> ParamId {
        let bound = (6.0 / (din + dout) as f32).sqrt();
        let data = (0..din * dout)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.store.add(
            format!("{name}.weight"),
            Tensor::from_vec(din, dout, data),
            true,
        )
    }

    fn norm(&mut self, name: &str, dim: usize) -> (ParamId, ParamId) {
        let g = self
            .store
            .add(format!("{name}.gamma"), Tensor::full(1, dim, 1.0), false);
        let b = self
            .store
            .add(format!("{name}.beta"), Tensor::zeros(1, dim), false);
        (g, b)
    }

    fn block(&mut self, name: &str, dim: usize, mlp_ratio: usize) -> BlockIds {
        BlockIds {
            ln1: self.norm(&format!("{name}.ln1"), dim),
            qkv: self.linear(&format!("{name}.qkv"), dim, 3 * dim),
            attn_out: self.linear(&format!("{name}.attn_out"), dim, dim),
            ln2: self.norm(&format!("{name}.ln2"), dim),
            fc1: self.linear(&format!("{name}.fc1"), dim, mlp_ratio * dim),
            fc2: self.linear(&format!("{name}.fc2"), mlp_ratio * dim, dim),
        }
    }
}

impl ClipMae {
    /// Builds a freshly initialized model for a vocabulary of `vocab_size`
    /// token ids.
    pub fn new<R: Rng>(config: ModelConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocabulary of size {vocab_size} lacks the reserved ids"
            )));
        }
        let mut store = ParamStore::new();
        let c = &config;
        let mut init = Init {
            store: &mut store,
            rng,
        };
        let patch = init.linear("image.patch", c.patch_len(), c.enc_dim);
        let enc_blocks = (0..c.enc_depth)
            .map(|i| init.block(&format!("image.blocks.{i}"), c.enc_dim, c.mlp_ratio))
            .collect();
        let enc_norm = init.norm("image.norm", c.enc_dim);
        let img_proj = init.linear_weight("image.proj", c.enc_dim, c.proj_dim);
        let dec_embed = init.linear("decoder.embed", c.enc_dim, c.dec_dim);
        let mask_token = init.normal("decoder.mask_token".into(), 1, c.dec_dim, 0.02, false);
        let dec_blocks = (0..c.dec_depth)
            .map(|i| init.block(&format!("decoder.blocks.{i}"), c.dec_dim, c.mlp_ratio))
            .collect();
        let dec_norm = init.norm("decoder.norm", c.dec_dim);
        let dec_pred = init.linear("decoder.pred", c.dec_dim, c.patch_len());
        let tok_embed = init.normal("text.token_embed".into(), vocab_size, c.text_dim, 0.02, false);
        let text_pos = init.normal(
            "text.pos_embed".into(),
            c.max_text_len,
            c.text_dim,
            0.01,
            false,
        );
        let text_blocks = (0..c.text_depth)
            .map(|i| init.block(&format!("text.blocks.{i}"), c.text_dim, c.mlp_ratio))
            .collect();
        let text_norm = init.norm("text.norm", c.text_dim);
        let text_proj = init.linear_weight("text.proj", c.text_dim, c.proj_dim);
        let log_tau = store.add(
            "temperature.log",
            Tensor::scalar(c.temperature_init.ln() as f32),
            false,
        );
        if !c.learnable_temperature {
            store.set_trainable_prefix("temperature.", false);
        }
        let ids = Ids {
            patch,
            enc_blocks,
            enc_norm,
            img_proj,
            dec_embed,
            mask_token,
            dec_blocks,
            dec_norm,
            dec_pred,
            tok_embed,
            text_pos,
            text_blocks,
            text_norm,
            text_proj,
            log_tau,
        };
        Ok(Self {
            enc_pos: sincos_2d(c.grid(), c.enc_dim),
            dec_pos: sincos_2d(c.grid(), c.dec_dim),
            config,
            vocab_size,
            params: store,
            ids,
        })
    }

    /// Rebuilds a model from saved parameters. Every parameter of the
    /// architecture must be present with its expected shape.
    pub fn from_params(config: ModelConfig, vocab_size: usize, params: &ParamStore) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(config, vocab_size, &mut rng)?;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let saved = params
                .id(&name)
                .ok_or_else(|| Error::Format(format!("parameter {name} missing")))?;
            let value = params.value(saved);
            if value.shape() != model.params.value(id).shape() {
                return Err(Error::dimension(
                    format!("parameter {name}"),
                    format!("{:?}", model.params.value(id).shape()),
                    format!("{:?}", value.shape()),
                ));
            }
            *model.params.value_mut(id) = value.clone();
        }
        if params.len() != model.params.len() {
            return Err(Error::Format(format!(
                "{} saved parameters, architecture has {}",
                params.len(),
                model.params.len()
            )));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Effective temperature after clamping.
    pub fn temperature(&self) -> f64 {
        let raw = f64::from(self.params.value(self.ids.log_tau).item()).exp();
        let [lo, hi] = self.config.temperature_clamp;
        raw.clamp(lo, hi)
    }

    pub fn log_temperature_id(&self) -> ParamId {
        self.ids.log_tau
    }

    /// Pulls the temperature parameter back inside the clamp interval.
    pub fn clamp_temperature(&mut self) {
        let [lo, hi] = self.config.temperature_clamp;
        let v = self.params.value_mut(self.ids.log_tau);
        let t = f64::from(v.item()).clamp(lo.ln(), hi.ln());
        v.data_mut()[0] = t as f32;
    }

    pub(crate) fn temperature_var(&self, g: &mut Graph) -> (Var, f64, bool) {
        let v = g.param(&self.params, self.ids.log_tau);
        let raw = f64::from(g.value(v).item()).exp();
        let [lo, hi] = self.config.temperature_clamp;
        let tau = raw.clamp(lo, hi);
        (v, tau, raw < lo || raw > hi)
    }

    fn p(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(&self.params, id)
    }

    fn block(
        &self,
        g: &mut Graph,
        x: Var,
        ids: &BlockIds,
        batch: usize,
        heads: usize,
        causal: bool,
    ) -> Var {
        let (g1, b1) = (self.p(g, ids.ln1.0), self.p(g, ids.ln1.1));
        let h = g.layer_norm(x, g1, b1);
        let (w, b) = (self.p(g, ids.qkv.0), self.p(g, ids.qkv.1));
        let qkv = g.linear(h, w, Some(b));
        let a = g.attention(qkv, batch, heads, causal);
        let (w, b) = (self.p(g, ids.attn_out.0), self.p(g, ids.attn_out.1));
        let a = g.linear(a, w, Some(b));
        let x = g.add(x, a);
        let (g2, b2) = (self.p(g, ids.ln2.0), self.p(g, ids.ln2.1));
        let h = g.layer_norm(x, g2, b2);
        let (w, b) = (self.p(g, ids.fc1.0), self.p(g, ids.fc1.1));
        let h = g.linear(h, w, Some(b));
        let h = g.gelu(h);
        let (w, b) = (self.p(g, ids.fc2.0), self.p(g, ids.fc2.1));
        let h = g.linear(h, w, Some(b));
        g.add(x, h)
    }

    /// Encodes `batch` images given as stacked patch rows. `positions[i]`
    /// is the grid position of patch row `i`; every image contributes the
    /// same number of rows. Returns normalized tokens.
    pub(crate) fn image_tokens(
        &self,
        g: &mut Graph,
        patches: Tensor,
        positions: &[usize],
        batch: usize,
    ) -> Var {
        assert_eq!(patches.rows(), positions.len());
        let mut pos = Tensor::zeros(positions.len(), self.config.enc_dim);
        for (i, &p) in positions.iter().enumerate() {
            pos.row_mut(i).copy_from_slice(self.enc_pos.row(p));
        }
        let x = g.input(patches);
        let (w, b) = (self.p(g, self.ids.patch.0), self.p(g, self.ids.patch.1));
        let x = g.linear(x, w, Some(b));
        let pos = g.input(pos);
        let mut x = g.add(x, pos);
        for blk in &self.ids.enc_blocks {
            x = self.block(g, x, blk, batch, self.config.enc_heads, false);
        }
        let (gm, bt) = (self.p(g, self.ids.enc_norm.0), self.p(g, self.ids.enc_norm.1));
        g.layer_norm(x, gm, bt)
    }

    /// Mean-pools tokens per image and projects. Returns `(features, embeddings)`.
    pub(crate) fn image_head(&self, g: &mut Graph, tokens: Var, per_image: usize) -> (Var, Var) {
        let features = g.segment_mean(tokens, per_image);
        let w = self.p(g, self.ids.img_proj);
        let z = g.linear(features, w, None);
        (features, g.l2_normalize(z))
    }

    /// Rebuilds the full patch grid from visible tokens. `visible[b]` lists
    /// the grid positions encoded for image `b`, in token order.
    pub(crate) fn decode(&self, g: &mut Graph, tokens: Var, visible: &[Vec<usize>]) -> Var {
        let n = self.config.n_patches();
        let batch = visible.len();
        let per = visible.first().map_or(0, Vec::len);
        let (w, b) = (self.p(g, self.ids.dec_embed.0), self.p(g, self.ids.dec_embed.1));
        let x = g.linear(tokens, w, Some(b));
        let mask_tok = self.p(g, self.ids.mask_token);
        let pool = g.concat_rows(x, mask_tok);
        let mask_row = batch * per;
        let mut idx = vec![mask_row; batch * n];
        for (bi, vis) in visible.iter().enumerate() {
            assert_eq!(vis.len(), per, "uneven visible counts");
            for (j, &p) in vis.iter().enumerate() {
                idx[bi * n + p] = bi * per + j;
            }
        }
        let x = g.gather_rows(pool, idx);
        let mut pos = Tensor::zeros(batch * n, self.config.dec_dim);
        for bi in 0..batch {
            for p in 0..n {
                pos.row_mut(bi * n + p).copy_from_slice(self.dec_pos.row(p));
            }
        }
        let pos = g.input(pos);
        let mut x = g.add(x, pos);
        for blk in &self.ids.dec_blocks {
            x = self.block(g, x, blk, batch, self.config.dec_heads, false);
        }
        let (gm, bt) = (self.p(g, self.ids.dec_norm.0), self.p(g, self.ids.dec_norm.1));
        let x = g.layer_norm(x, gm, bt);
        let (w, b) = (self.p(g, self.ids.dec_pred.0), self.p(g, self.ids.dec_pred.1));
        g.linear(x, w, Some(b))
    }

    /// Text features at each sequence's end token and their projections.
    pub(crate) fn text_forward(&self, g: &mut Graph, seqs: &[&TokenSequence]) -> (Var, Var) {
        let batch = seqs.len();
        let len = seqs.iter().map(|s| s.end_position() + 1).max().unwrap_or(1);
        let mut ids = Vec::with_capacity(batch * len);
        let mut pos = Vec::with_capacity(batch * len);
        for s in seqs {
            for t in 0..len {
                ids.push(s.ids()[t] as usize);
                pos.push(t);
            }
        }
        let table = self.p(g, self.ids.tok_embed);
        let x = g.gather_rows(table, ids);
        let pos_table = self.p(g, self.ids.text_pos);
        let p = g.gather_rows(pos_table, pos);
        let mut x = g.add(x, p);
        for blk in &self.ids.text_blocks {
            x = self.block(g, x, blk, batch, self.config.text_heads, true);
        }
        let (gm, bt) = (self.p(g, self.ids.text_norm.0), self.p(g, self.ids.text_norm.1));
        let x = g.layer_norm(x, gm, bt);
        let ends = seqs
            .iter()
            .enumerate()
            .map(|(b, s)| b * len + s.end_position())
            .collect();
        let features = g.gather_rows(x, ends);
        let w = self.p(g, self.ids.text_proj);
        let z = g.linear(features, w, None);
        (features, g.l2_normalize(z))
    }

    fn check_pixels(&self, pixels: &[f32]) -> Result<()> {
        let want = self.config.pixel_len();
        if pixels.len() != want {
            let c = &self.config;
            return Err(Error::dimension(
                "image encoder input",
                format!(
                    "{}x{}x{} = {want} values",
                    c.image_size, c.image_size, c.channels
                ),
                format!("{} values", pixels.len()),
            ));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite pixel value".into()));
        }
        Ok(())
    }

    pub fn patchify(&self, pixels: &[f32]) -> Result<Tensor> {
        self.check_pixels(pixels)?;
        let c = &self.config;
        Ok(patchify(pixels, c.image_size, c.channels, c.patch_size))
    }

    /// Full-view encoding of a batch of `h x w x c` images in `[0, 1]`.
    pub fn encode_images(&self, images: &[&[f32]]) -> Result<Encoded> {
        const CHUNK: usize = 64;
        let n = self.config.n_patches();
        let mut features = Tensor::zeros(images.len(), self.config.enc_dim);
        let mut embeddings = Vec::with_capacity(images.len());
        for (c, chunk) in images.chunks(CHUNK).enumerate() {
            let mut rows = Vec::with_capacity(chunk.len() * n * self.config.patch_len());
            for img in chunk {
                rows.extend_from_slice(self.patchify(img)?.data());
            }
            let patches = Tensor::from_vec(chunk.len() * n, self.config.patch_len(), rows);
            let positions: Vec<usize> = (0..chunk.len()).flat_map(|_| 0..n).collect();
            let mut g = Graph::new();
            let tokens = self.image_tokens(&mut g, patches, &positions, chunk.len());
            let (f, e) = self.image_head(&mut g, tokens, n);
            for i in 0..chunk.len() {
                features
                    .row_mut(c * CHUNK + i)
                    .copy_from_slice(g.value(f).row(i));
                embeddings.push(Embedding::normalized(g.value(e).row(i))?);
            }
        }
        Ok(Encoded {
            features,
            embeddings,
        })
    }

    pub fn encode_image(&self, pixels: &[f32]) -> Result<(Vec<f32>, Embedding)> {
        let mut out = self.encode_images(&[pixels])?;
        Ok((
            out.features.row(0).to_vec(),
            out.embeddings.pop().expect("one embedding"),
        ))
    }

    pub fn encode_texts(&self, seqs: &[&TokenSequence]) -> Result<Encoded> {
        const CHUNK: usize = 128;
        for s in seqs {
            if s.len() > self.config.max_text_len {
                return Err(Error::dimension(
                    "text encoder input",
                    format!("at most {} tokens", self.config.max_text_len),
                    s.len(),
                ));
            }
            if let Some(&bad) = s.ids().iter().find(|&&id| id as usize >= self.vocab_size) {
                return Err(Error::dimension(
                    "text encoder input",
                    format!("token ids below {}", self.vocab_size),
                    bad,
                ));
            }
        }
        let mut features = Tensor::zeros(seqs.len(), self.config.text_dim);
        let mut embeddings = Vec::with_capacity(seqs.len());
        for (c, chunk) in seqs.chunks(CHUNK).enumerate() {
            let mut g = Graph::new();
            let (f, e) = self.text_forward(&mut g, chunk);
            for i in 0..chunk.len() {
                features
                    .row_mut(c * CHUNK + i)
                    .copy_from_slice(g.value(f).row(i));
                embeddings.push(Embedding::normalized(g.value(e).row(i))?);
            }
        }
        Ok(Encoded {
            features,
            embeddings,
        })
    }

    pub fn encode_text(&self, seq: &TokenSequence) -> Result<(Vec<f32>, Embedding)> {
        let mut out = self.encode_texts(&[seq])?;
        Ok((
            out.features.row(0).to_vec(),
            out.embeddings.pop().expect("one embedding"),
        ))
    }

    /// Splits an image into visible patch rows and a random mask.
    pub fn mask_patches<R: Rng + ?Sized>(
        &self,
        pixels: &[f32],
        mask_ratio: f64,
        rng: &mut R,
    ) -> Result<MaskedImage> {
        let patches = self.patchify(pixels)?;
        let mask = PatchMask::sample(self.config.n_patches(), mask_ratio, rng);
        let positions = mask.visible();
        let mut visible = Tensor::zeros(positions.len(), self.config.patch_len());
        for (i, &p) in positions.iter().enumerate() {
            visible.row_mut(i).copy_from_slice(patches.row(p));
        }
        Ok(MaskedImage {
            visible,
            positions,
            mask,
        })
    }

    /// Predicts every patch of the grid from the visible patches of one
    /// image. Output is `n_patches x patch_len`.
    pub fn reconstruct(&self, masked: &MaskedImage) -> Result<Tensor> {
        let c = &self.config;
        if masked.mask.len() != c.n_patches()
            || masked.visible.cols() != c.patch_len()
            || masked.visible.rows() != masked.positions.len()
        {
            return Err(Error::dimension(
                "reconstruct",
                format!("{} patches of length {}", c.n_patches(), c.patch_len()),
                format!(
                    "mask over {} patches, {} visible rows of length {}",
                    masked.mask.len(),
                    masked.visible.rows(),
                    masked.visible.cols()
                ),
            ));
        }
        let mut g = Graph::new();
        let tokens = self.image_tokens(&mut g, masked.visible.clone(), &masked.positions, 1);
        let pred = self.decode(&mut g, tokens, std::slice::from_ref(&masked.positions));
        Ok(g.value(pred).clone())
    }
}

/// Visible patches of one image together with the mask that produced them.
#[derive(Clone, Debug)]
pub struct MaskedImage {
    pub visible: Tensor,
    pub positions: Vec<usize>,
    pub mask: PatchMask,
}
