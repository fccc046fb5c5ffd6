use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::schedule::{lr_at, Schedule};
use crate::error::{Error, Result};
use crate::evaluation::macro_auroc;
use crate::model::{ClipMae, IMAGE_ENCODER_PREFIX};
use crate::nn::{clip_grad_norm, AdamW, AdamWConfig, Graph, ParamId, ParamStore, Tensor, Var};
use crate::text::Vocabulary;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Softmax over mutually exclusive classes.
    #[default]
    SingleLabel,
    /// Independent sigmoid per label.
    MultiLabel,
}

/// Fine-tuning settings. Unset epoch count, batch size and peak rate take
/// the mode's defaults (single-label: 50 epochs, batch 16, 5e-4;
/// multi-label: 30 epochs, batch 4, 1e-2).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub total_epochs: Option<usize>,
    pub freeze_epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: Option<f64>,
    pub final_lr: f64,
    pub batch_size: Option<usize>,
    /// Hidden width of the head; defaults to the encoder width.
    pub hidden: Option<usize>,
    pub seed: u64,
    pub grad_clip: f64,
    pub optimizer: AdamWConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: FinetuneMode::SingleLabel,
            total_epochs: None,
            freeze_epochs: 5,
            warmup_epochs: 10,
            peak_lr: None,
            final_lr: 1e-6,
            batch_size: None,
            hidden: None,
            seed: 0,
            grad_clip: 1.0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn total_epochs(&self) -> usize {
        self.total_epochs.unwrap_or(match self.mode {
            FinetuneMode::SingleLabel => 50,
            FinetuneMode::MultiLabel => 30,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.mode {
            FinetuneMode::SingleLabel => 16,
            FinetuneMode::MultiLabel => 4,
        })
    }

    pub fn peak_lr(&self) -> f64 {
        self.peak_lr.unwrap_or(match self.mode {
            FinetuneMode::SingleLabel => 5e-4,
            FinetuneMode::MultiLabel => 1e-2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let total = self.total_epochs();
        if total == 0 {
            return Err(Error::Config("total_epochs must be positive".into()));
        }
        if self.freeze_epochs >= total {
            return Err(Error::Config(format!(
                "freeze_epochs ({}) must be below total_epochs ({total})",
                self.freeze_epochs
            )));
        }
        if self.batch_size() == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.hidden == Some(0) {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        self.schedule(1).validate()
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Schedule {
        Schedule::Finetune {
            peak_lr: self.peak_lr(),
            final_lr: self.final_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.total_epochs(),
            steps_per_epoch,
        }
    }
}

/// One image with its label vector (one-hot in single-label mode).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledItem {
    pub id: String,
    /// `h x w x c` values in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub targets: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub class_names: Vec<String>,
    pub items: Vec<LabeledItem>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn targets(&self) -> Vec<Vec<bool>> {
        self.items.iter().map(|i| i.targets.clone()).collect()
    }

    /// Class index of every item; errors unless each has exactly one label.
    pub fn single_labels(&self) -> Result<Vec<usize>> {
        self.items
            .iter()
            .map(|item| {
                let mut on = item.targets.iter().enumerate().filter(|(_, t)| **t).map(|(c, _)| c);
                match (on.next(), on.next()) {
                    (Some(c), None) => Ok(c),
                    _ => Err(Error::Data(format!("item {} does not carry exactly one label", item.id))),
                }
            })
            .collect()
    }

    pub fn validate(&self, mode: FinetuneMode) -> Result<()> {
        let k = self.n_classes();
        let mut names = self.class_names.clone();
        names.sort();
        names.dedup();
        if names.len() != k {
            return Err(Error::Config("duplicate class names".into()));
        }
        for item in &self.items {
            if item.targets.len() != k {
                return Err(Error::dimension(
                    format!("labels of item {}", item.id),
                    k,
                    item.targets.len(),
                ));
            }
        }
        match mode {
            FinetuneMode::SingleLabel => {
                if k < 2 {
                    return Err(Error::Config("single-label fine-tuning needs at least 2 classes".into()));
                }
                self.single_labels()?;
            }
            FinetuneMode::MultiLabel => {
                if k < 1 {
                    return Err(Error::Config("multi-label fine-tuning needs a label column".into()));
                }
            }
        }
        Ok(())
    }

    /// Classes with no positive item.
    pub fn missing_classes(&self) -> Vec<&str> {
        (0..self.n_classes())
            .filter(|&c| !self.items.iter().any(|i| i.targets[c]))
            .map(|c| self.class_names[c].as_str())
            .collect()
    }

    fn subset(&self, picks: &[usize]) -> Self {
        Self {
            class_names: self.class_names.clone(),
            items: picks.iter().map(|&i| self.items[i].clone()).collect(),
        }
    }
}

/// Result of [`fewshot_sample`].
#[derive(Clone, Debug)]
pub struct FewShot {
    pub set: LabeledSet,
    /// Classes that had fewer than the requested examples, with the count
    /// taken.
    pub clamped: Vec<(String, usize)>,
}

/// Draws `min(n_per_class, available)` items per class without replacement.
/// Items are grouped by their first positive label.
pub fn fewshot_sample(set: &LabeledSet, n_per_class: usize, seed: u64) -> Result<FewShot> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = Vec::new();
    let mut clamped = Vec::new();
    for (c, name) in set.class_names.iter().enumerate() {
        let members: Vec<usize> = (0..set.len())
            .filter(|&i| set.items[i].targets.iter().position(|&t| t) == Some(c))
            .collect();
        if members.is_empty() {
            return Err(Error::Data(format!("class {name} has no examples to sample")));
        }
        let n = n_per_class.min(members.len());
        if n < n_per_class {
            log::warn!(
                "class {name} has {} examples, fewer than the {n_per_class} requested; taking all",
                members.len()
            );
            clamped.push((name.clone(), n));
        }
        let mut chosen: Vec<usize> = index::sample(&mut rng, members.len(), n).into_iter().map(|k| members[k]).collect();
        chosen.sort_unstable();
        picks.extend(chosen);
    }
    Ok(FewShot {
        set: set.subset(&picks),
        clamped,
    })
}

#[derive(Clone, Debug)]
struct HeadIds {
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

/// Parameter-name prefix of the classification head.
pub const HEAD_PREFIX: &str = "head.";

/// Image encoder plus a one-hidden-layer classification head on the pooled
/// encoder features.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub model: ClipMae,
    pub mode: FinetuneMode,
    pub class_names: Vec<String>,
    head: HeadIds,
}

impl Classifier {
    fn new<R: Rng>(model: &ClipMae, class_names: Vec<String>, mode: FinetuneMode, hidden: usize, rng: &mut R) -> Self {
        let mut model = model.clone();
        let d = model.config().enc_dim;
        let k = class_names.len();
        let mut linear = |store: &mut ParamStore, name: &str, din: usize, dout: usize| {
            let bound = (6.0 / (din + dout) as f32).sqrt();
            let w = (0..din * dout).map(|_| rng.random_range(-bound..bound)).collect();
            (
                store.add(format!("{name}.weight"), Tensor::from_vec(din, dout, w), true),
                store.add(format!("{name}.bias"), Tensor::zeros(1, dout), false),
            )
        };
        let fc1 = linear(&mut model.params, "head.fc1", d, hidden);
        let fc2 = linear(&mut model.params, "head.fc2", hidden, k);
        Self {
            model,
            mode,
            class_names,
            head: HeadIds { fc1, fc2 },
        }
    }

    fn head_forward(&self, g: &mut Graph, features: Var) -> Var {
        let p = &self.model.params;
        let (w, b) = (g.param(p, self.head.fc1.0), g.param(p, self.head.fc1.1));
        let h = g.linear(features, w, Some(b));
        let h = g.gelu(h);
        let (w, b) = (g.param(p, self.head.fc2.0), g.param(p, self.head.fc2.1));
        g.linear(h, w, Some(b))
    }

    /// Pooled pre-projection encoder features.
    pub fn features(&self, images: &[&[f32]]) -> Result<Tensor> {
        Ok(self.model.encode_images(images)?.features)
    }

    /// Class probabilities from precomputed features: softmax rows in
    /// single-label mode, per-label sigmoids in multi-label mode.
    pub fn predict_features(&self, features: &Tensor) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.input(features.clone());
        let logits = self.head_forward(&mut g, x);
        let logits = g.value(logits);
        (0..logits.rows())
            .map(|r| activate(self.mode, logits.row(r)))
            .collect()
    }

    pub fn predict(&self, images: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
        Ok(self.predict_features(&self.features(images)?))
    }

    /// The underlying model without the head, with its fine-tuned encoder.
    pub fn backbone(&self) -> Result<ClipMae> {
        let mut store = ParamStore::new();
        for id in self.model.params.ids() {
            let name = self.model.params.name(id);
            if !name.starts_with(HEAD_PREFIX) {
                store.add(name, self.model.params.value(id).clone(), false);
            }
        }
        ClipMae::from_params(self.model.config().clone(), self.model.vocab_size(), &store)
    }

    /// Writes the backbone as a checkpoint (`CLASSIFIER_CHECKPOINT`) and the
    /// head as JSON (`CLASSIFIER_HEAD`) under `dir`.
    pub fn save(&self, vocab: &Vocabulary, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let ckpt = Checkpoint {
            model: self.backbone()?,
            vocab: vocab.clone(),
            optimizer: None,
            step: 0,
            epoch: 0,
            rng: None,
            best_val_loss: None,
        };
        ckpt.save(&dir.join(CLASSIFIER_CHECKPOINT))?;
        let p = &self.model.params;
        let saved = |id: ParamId| SavedTensor {
            name: p.name(id).to_string(),
            rows: p.value(id).rows(),
            cols: p.value(id).cols(),
            data: p.value(id).data().to_vec(),
        };
        let head = HeadFile {
            mode: self.mode,
            class_names: self.class_names.clone(),
            params: [self.head.fc1.0, self.head.fc1.1, self.head.fc2.0, self.head.fc2.1]
                .into_iter()
                .map(saved)
                .collect(),
        };
        let json = serde_json::to_string(&head).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join(CLASSIFIER_HEAD), json)?;
        Ok(())
    }

    /// Reads a classifier written by [`Classifier::save`].
    pub fn load(dir: &Path) -> Result<(Self, Vocabulary)> {
        let ckpt = Checkpoint::load(&dir.join(CLASSIFIER_CHECKPOINT))?;
        let path = dir.join(CLASSIFIER_HEAD);
        let text = std::fs::read_to_string(&path)?;
        let head: HeadFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let [w1, _, _, _] = &head.params[..] else {
            return Err(Error::Format(format!("{}: expected 4 head tensors", path.display())));
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = Classifier::new(&ckpt.model, head.class_names, head.mode, w1.cols, &mut rng);
        for t in head.params {
            let id = c
                .model
                .params
                .id(&t.name)
                .filter(|_| t.name.starts_with(HEAD_PREFIX))
                .ok_or_else(|| Error::Format(format!("{}: unknown head tensor {}", path.display(), t.name)))?;
            let slot = c.model.params.value_mut(id);
            if slot.shape() != (t.rows, t.cols) || t.data.len() != t.rows * t.cols {
                return Err(Error::dimension(
                    format!("head tensor {}", t.name),
                    format!("{:?}", slot.shape()),
                    format!("{:?}", (t.rows, t.cols)),
                ));
            }
            *slot = Tensor::from_vec(t.rows, t.cols, t.data);
        }
        Ok((c, ckpt.vocab))
    }
}

pub const CLASSIFIER_CHECKPOINT: &str = "classifier.ckpt";
pub const CLASSIFIER_HEAD: &str = "head.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadFile {
    mode: FinetuneMode,
    class_names: Vec<String>,
    params: Vec<SavedTensor>,
}

fn activate(mode: FinetuneMode, logits: &[f32]) -> Vec<f64> {
    match mode {
        FinetuneMode::SingleLabel => {
            let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
            let e: Vec<f64> = logits.iter().map(|&v| (f64::from(v) - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }
        FinetuneMode::MultiLabel => logits.iter().map(|&v| 1.0 / (1.0 + (-f64::from(v)).exp())).collect(),
    }
}

/// Mean loss over the batch and its gradient with respect to the logits.
fn head_loss(mode: FinetuneMode, logits: &Tensor, targets: &[&[bool]]) -> (f64, Tensor) {
    let (n, k) = logits.shape();
    let mut grad = Tensor::zeros(n, k);
    let mut loss = 0.0;
    for (r, t) in targets.iter().enumerate() {
        let p = activate(mode, logits.row(r));
        let g = grad.row_mut(r);
        match mode {
            FinetuneMode::SingleLabel => {
                let c = t.iter().position(|&b| b).expect("one label per item");
                loss -= p[c].max(f64::MIN_POSITIVE).ln();
                for j in 0..k {
                    let y = if j == c { 1.0 } else { 0.0 };
                    g[j] = ((p[j] - y) / n as f64) as f32;
                }
            }
            FinetuneMode::MultiLabel => {
                for j in 0..k {
                    let z = f64::from(logits.row(r)[j]);
                    let y = if t[j] { 1.0 } else { 0.0 };
                    // log(1 + e^z) - y z, written to avoid overflow
                    loss += (z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z) / k as f64;
                    g[j] = ((p[j] - y) / (n * k) as f64) as f32;
                }
            }
        }
    }
    (loss / n as f64, grad)
}

/// Order-sensitive hash of the image-encoder parameter bits.
pub fn encoder_digest(params: &ParamStore) -> u64 {
    let mut h = DefaultHasher::new();
    for id in params.ids() {
        if params.name(id).starts_with(IMAGE_ENCODER_PREFIX) {
            h.write(params.name(id).as_bytes());
            for v in params.value(id).data() {
                h.write_u32(v.to_bits());
            }
        }
    }
    h.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub frozen: bool,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_auroc: Option<f64>,
    /// Image-encoder digest at the start of the epoch.
    pub encoder_digest: u64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Weights from the epoch with the best validation score.
    pub classifier: Classifier,
    pub history: Vec<FinetuneEpoch>,
    /// Encoder digest after the last epoch.
    pub final_digest: u64,
    /// Learning rate used at every optimizer step.
    pub lrs: Vec<f64>,
    pub schedule: Schedule,
    pub best_epoch: usize,
    pub best_val_auroc: Option<f64>,
}

fn val_scores(
    clf: &Classifier,
    features: &Tensor,
    val: &LabeledSet,
) -> (f64, Option<f64>) {
    let mut g = Graph::new();
    let x = g.input(features.clone());
    let logits = clf.head_forward(&mut g, x);
    let logits = g.value(logits);
    let targets: Vec<&[bool]> = val.items.iter().map(|i| i.targets.as_slice()).collect();
    let (loss, _) = head_loss(clf.mode, logits, &targets);
    let probs: Vec<Vec<f64>> = (0..logits.rows()).map(|r| activate(clf.mode, logits.row(r))).collect();
    (loss, macro_auroc(&probs, &val.targets()).ok())
}

/// Trains a classification head on the image encoder of `model`.
///
/// The encoder is frozen for the first `freeze_epochs` epochs and trained
/// jointly afterwards; text encoder, decoder, projection and temperature
/// stay fixed. After every epoch the validation macro AUROC is computed and
/// the best weights are kept (validation loss decides when AUROC is
/// undefined; without a validation set the last epoch is kept).
pub fn finetune(
    model: &ClipMae,
    train: &LabeledSet,
    val: Option<&LabeledSet>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    train.validate(cfg.mode)?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let missing = train.missing_classes();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "classes absent from the training split: {}",
            missing.join(", ")
        )));
    }
    if let Some(v) = val {
        v.validate(cfg.mode)?;
        if v.class_names != train.class_names {
            return Err(Error::Config("validation classes differ from training classes".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hidden = cfg.hidden.unwrap_or(model.config().enc_dim);
    let mut clf = Classifier::new(model, train.class_names.clone(), cfg.mode, hidden, &mut rng);
    let params = &mut clf.model.params;
    params.set_trainable_prefix("", false);
    params.set_trainable_prefix(HEAD_PREFIX, true);
    let mut opt = AdamW::new(params, cfg.optimizer);

    let bs = cfg.batch_size();
    let spe = train.len().div_ceil(bs);
    let schedule = cfg.schedule(spe);
    schedule.validate()?;
    let n_patches = model.config().n_patches();
    let patch_len = model.config().patch_len();
    let train_pixels: Vec<&[f32]> = train.items.iter().map(|i| i.pixels.as_slice()).collect();
    let val_pixels: Vec<&[f32]> = val.map_or_else(Vec::new, |v| v.items.iter().map(|i| i.pixels.as_slice()).collect());
    let mut frozen_train = Some(clf.features(&train_pixels)?);
    let mut frozen_val = match val {
        Some(_) => Some(clf.features(&val_pixels)?),
        None => None,
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.total_epochs());
    let mut lrs = Vec::with_capacity(schedule.total_steps());
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut best_auroc = None;
    let mut step = 0usize;
    for epoch in 0..cfg.total_epochs() {
        let frozen = epoch < cfg.freeze_epochs;
        if !frozen && frozen_train.is_some() {
            frozen_train = None;
            frozen_val = None;
            let p = &mut clf.model.params;
            p.set_trainable_prefix(IMAGE_ENCODER_PREFIX, true);
            p.set_trainable_prefix("image.proj", false);
        }
        let digest = encoder_digest(&clf.model.params);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(bs) {
            let lr = lr_at(step, &schedule);
            lrs.push(lr);
            let mut g = Graph::new();
            let features = match &frozen_train {
                Some(f) => {
                    let mut rows = Vec::with_capacity(chunk.len() * f.cols());
                    for &i in chunk {
                        rows.extend_from_slice(f.row(i));
                    }
                    g.input(Tensor::from_vec(chunk.len(), f.cols(), rows))
                }
                None => {
                    let mut rows = Vec::with_capacity(chunk.len() * n_patches * patch_len);
                    for &i in chunk {
                        rows.extend_from_slice(clf.model.patchify(train_pixels[i])?.data());
                    }
                    let patches = Tensor::from_vec(chunk.len() * n_patches, patch_len, rows);
                    let positions: Vec<usize> = (0..chunk.len()).flat_map(|_| 0..n_patches).collect();
                    let tokens = clf.model.image_tokens(&mut g, patches, &positions, chunk.len());
                    g.segment_mean(tokens, n_patches)
                }
            };
            let logits = clf.head_forward(&mut g, features);
            let targets: Vec<&[bool]> = chunk.iter().map(|&i| train.items[i].targets.as_slice()).collect();
            let (loss, grad) = head_loss(cfg.mode, g.value(logits), &targets);
            if !loss.is_finite() {
                let ids: Vec<&str> = chunk.iter().map(|&i| train.items[i].id.as_str()).collect();
                return Err(Error::Numeric(format!("non-finite fine-tune loss on [{}]", ids.join(", "))));
            }
            loss_sum += loss * chunk.len() as f64;
            let root = g.loss(loss as f32, vec![(logits, grad)]);
            let p = &mut clf.model.params;
            p.zero_grad();
            g.backward_into(root, p);
            clip_grad_norm(p, cfg.grad_clip);
            opt.step(p, lr as f32);
            step += 1;
        }
        if !clf.model.params.all_finite() {
            return Err(Error::Numeric(format!("non-finite parameters after fine-tune epoch {epoch}")));
        }
        let (val_loss, val_auroc) = match val {
            Some(v) => {
                let (l, a) = match &frozen_val {
                    Some(f) => val_scores(&clf, f, v),
                    None => val_scores(&clf, &clf.features(&val_pixels)?, v),
                };
                (Some(l), a)
            }
            None => (None, None),
        };
        let score = match (val_auroc, val_loss) {
            (Some(a), _) => a,
            (None, Some(l)) => -l,
            (None, None) => epoch as f64,
        };
        if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
            best = Some((score, epoch, clf.model.params.clone()));
            best_auroc = val_auroc;
        }
        history.push(FinetuneEpoch {
            epoch,
            frozen,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_auroc,
            encoder_digest: digest,
        });
        log::debug!("fine-tune epoch {epoch}: loss {:.4} val auroc {val_auroc:?}", loss_sum / train.len() as f64);
    }
    let final_digest = encoder_digest(&clf.model.params);
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    clf.model.params = best_params;
    Ok(FinetuneOutcome {
        classifier: clf,
        history,
        final_digest,
        lrs,
        schedule,
        best_epoch,
        best_val_auroc: best_auroc,
    })
}
