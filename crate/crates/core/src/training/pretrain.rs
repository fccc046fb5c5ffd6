use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{pairing_text, Batch, BatchSource};
use super::checkpoint::{Checkpoint, RngState};
use super::schedule::{lr_at, Schedule};
use crate::corpus::{CorpusManifest, ImageRecord, PatientRecord, Split};
use crate::error::{Error, Result};
use crate::losses::{combined_objective, LossBreakdown, LossWeights, ObjectiveInputs};
use crate::model::{ClipMae, ContrastiveView, ModelConfig, PatchMask};
use crate::nn::{clip_grad_norm, AdamW, AdamWConfig, Graph, Tensor, Var};
use crate::text::{ModalityNames, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// Warmup length in steps; overrides `warmup_epochs` when set.
    pub warmup_steps: Option<usize>,
    pub total_epochs: usize,
    pub batch_size: usize,
    /// Steps per epoch; defaults to `n_train / batch_size` (at least 1).
    pub steps_per_epoch: Option<usize>,
    pub weights: LossWeights,
    /// Overrides the model's mask ratio when set.
    pub mask_ratio: Option<f64>,
    pub seed: u64,
    /// Also write `epoch-N.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Share of training patients held out for validation when the corpus
    /// has no val split.
    pub val_fraction: f64,
    pub grad_clip: f64,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            warmup_epochs: 2,
            warmup_steps: None,
            total_epochs: 20,
            batch_size: 64,
            steps_per_epoch: None,
            weights: LossWeights::default(),
            mask_ratio: None,
            seed: 0,
            checkpoint_every: 0,
            val_fraction: 0.1,
            grad_clip: 1.0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be positive".into()));
        }
        if self.warmup_steps.is_none() && self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if let Some(r) = self.mask_ratio {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("mask_ratio must be in [0, 1), got {r}")));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction must be in [0, 1), got {}", self.val_fraction)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        self.steps_per_epoch.unwrap_or((n_train / self.batch_size).max(1))
    }

    pub fn schedule(&self, n_train: usize) -> Schedule {
        let spe = self.steps_per_epoch(n_train);
        Schedule::Pretrain {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps.unwrap_or(self.warmup_epochs * spe),
            total_steps: self.total_epochs * spe,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub l_img_text: f64,
    pub l_img_img: f64,
    pub l_recon: f64,
    pub total: f64,
    pub n_text_pairs: usize,
    pub n_img_pairs: usize,
    pub temperature: f64,
}

/// One line of the validation log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub val_loss: f64,
    pub best: bool,
}

/// Texts seen by the text encoder for the given patients: one per
/// (patient with keywords, declared modality).
pub fn training_texts<'a>(
    patients: impl IntoIterator<Item = &'a PatientRecord>,
    modalities: &[crate::corpus::Modality],
    names: &ModalityNames,
) -> Vec<String> {
    let mut out = Vec::new();
    for p in patients {
        for m in modalities {
            if let Some(t) = pairing_text(names, m, p) {
                out.push(t);
            }
        }
    }
    out
}

/// Forward result of one batch: the graph holding it, the scalar root and
/// the loss record.
pub struct BatchLoss {
    pub graph: Graph,
    pub root: Var,
    pub breakdown: LossBreakdown,
}

fn to_f64(t: &Tensor) -> Array2<f64> {
    Array2::from_shape_fn((t.rows(), t.cols()), |(r, c)| f64::from(t.row(r)[c]))
}

fn to_f32(a: &Array2<f64>) -> Tensor {
    Tensor::from_vec(a.nrows(), a.ncols(), a.iter().map(|&v| v as f32).collect())
}

struct MaskedRows {
    patches: Tensor,
    positions: Vec<usize>,
    visible: Vec<Vec<usize>>,
    masks: Vec<PatchMask>,
    full: Vec<Tensor>,
}

fn mask_images<R: Rng + ?Sized>(model: &ClipMae, images: &[&ImageRecord], ratio: f64, rng: &mut R) -> Result<MaskedRows> {
    let c = model.config();
    let n = c.n_patches();
    let mut data = Vec::new();
    let mut positions = Vec::new();
    let mut visible = Vec::new();
    let mut masks = Vec::new();
    let mut full = Vec::new();
    for img in images {
        let patches = model.patchify(&img.pixels.to_unit())?;
        let mask = PatchMask::sample(n, ratio, rng);
        let vis = mask.visible();
        for &p in &vis {
            data.extend_from_slice(patches.row(p));
        }
        positions.extend_from_slice(&vis);
        visible.push(vis);
        masks.push(mask);
        full.push(patches);
    }
    Ok(MaskedRows {
        patches: Tensor::from_vec(positions.len(), c.patch_len(), data),
        positions,
        visible,
        masks,
        full,
    })
}

fn full_rows(model: &ClipMae, images: &[&ImageRecord]) -> Result<(Tensor, Vec<usize>)> {
    let n = model.config().n_patches();
    let mut data = Vec::new();
    for img in images {
        data.extend_from_slice(model.patchify(&img.pixels.to_unit())?.data());
    }
    let positions = (0..images.len()).flat_map(|_| 0..n).collect();
    Ok((Tensor::from_vec(images.len() * n, model.config().patch_len(), data), positions))
}

/// Builds the graph of the combined objective for one batch. Terms whose
/// weight is zero are not computed. Masks are drawn from `rng` in sample
/// order: anchors first, then partners.
pub fn batch_loss<R: Rng + ?Sized>(
    model: &ClipMae,
    batch: &Batch<'_>,
    weights: &LossWeights,
    mask_ratio: f64,
    rng: &mut R,
) -> Result<BatchLoss> {
    let cfg = model.config();
    let b = batch.len();
    let n = cfg.n_patches();
    let plen = cfg.patch_len();
    let mut g = Graph::new();
    let anchors: Vec<&ImageRecord> = batch.samples.iter().map(|s| s.anchor).collect();
    let masked = mask_images(model, &anchors, mask_ratio, rng)?;
    let per = n - crate::model::masked_count(n, mask_ratio);
    let tokens = model.image_tokens(&mut g, masked.patches, &masked.positions, b);

    let anchor_emb = match cfg.contrastive_view {
        ContrastiveView::Masked => model.image_head(&mut g, tokens, per).1,
        ContrastiveView::Full => {
            let (rows, pos) = full_rows(model, &anchors)?;
            let t = model.image_tokens(&mut g, rows, &pos, b);
            model.image_head(&mut g, t, n).1
        }
    };

    let text_idx: Vec<usize> = (0..b).filter(|&i| batch.samples[i].text.is_some()).collect();
    let use_text = weights.img_text > 0.0 && text_idx.len() >= 2;
    let (img_t, txt) = if use_text {
        let seqs: Vec<_> = text_idx.iter().map(|&i| batch.samples[i].text.as_ref().unwrap()).collect();
        let (_, txt) = model.text_forward(&mut g, &seqs);
        (Some(g.gather_rows(anchor_emb, text_idx.clone())), Some(txt))
    } else {
        (None, None)
    };

    let pair_idx: Vec<usize> = (0..b).filter(|&i| batch.samples[i].partner.is_some()).collect();
    let use_pairs = weights.img_img > 0.0 && pair_idx.len() >= 2;
    let (pair_a, pair_b) = if use_pairs {
        let partners: Vec<&ImageRecord> = pair_idx.iter().map(|&i| batch.samples[i].partner.unwrap()).collect();
        let emb = match cfg.contrastive_view {
            ContrastiveView::Masked => {
                let m = mask_images(model, &partners, mask_ratio, rng)?;
                let t = model.image_tokens(&mut g, m.patches, &m.positions, partners.len());
                model.image_head(&mut g, t, per).1
            }
            ContrastiveView::Full => {
                let (rows, pos) = full_rows(model, &partners)?;
                let t = model.image_tokens(&mut g, rows, &pos, partners.len());
                model.image_head(&mut g, t, n).1
            }
        };
        (Some(g.gather_rows(anchor_emb, pair_idx.clone())), Some(emb))
    } else {
        (None, None)
    };

    let use_recon = weights.recon > 0.0;
    let pred = use_recon.then(|| model.decode(&mut g, tokens, &masked.visible));
    let recon = match pred {
        Some(p) => Array3::from_shape_vec((b, n, plen), g.value(p).data().iter().map(|&v| f64::from(v)).collect())
            .expect("decoder output shape"),
        None => Array3::zeros((b, n, plen)),
    };
    let mut original = Array3::<f64>::zeros((b, n, plen));
    for (i, full) in masked.full.iter().enumerate() {
        for p in 0..n {
            for (k, &v) in full.row(p).iter().enumerate() {
                original[[i, p, k]] = f64::from(v);
            }
        }
    }
    let mask = Array2::from_shape_fn((b, n), |(i, p)| masked.masks[i].is_masked(p));

    let (tau_var, tau, clamped) = model.temperature_var(&mut g);
    let arr = |v: Option<Var>, g: &Graph| v.map(|v| to_f64(g.value(v)));
    let (img_a, txt_a, pa_a, pb_a) = (arr(img_t, &g), arr(txt, &g), arr(pair_a, &g), arr(pair_b, &g));
    let inputs = ObjectiveInputs {
        img: img_a.as_ref().map(|a| a.view()),
        txt: txt_a.as_ref().map(|a| a.view()),
        pair_a: pa_a.as_ref().map(|a| a.view()),
        pair_b: pb_a.as_ref().map(|a| a.view()),
        reconstructed: recon.view(),
        original: original.view(),
        mask: mask.view(),
        tau,
    };
    let obj = combined_objective(&inputs, weights, cfg.recon_target)?;
    let mut breakdown = obj.breakdown;
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss on batch [{}]",
            batch.patient_ids().join(", ")
        )));
    }
    if !use_recon {
        breakdown.n_masked = 0;
    }
    let mut grads: Vec<(Var, Tensor)> = Vec::new();
    for (var, grad) in [(img_t, obj.img), (txt, obj.txt), (pair_a, obj.pair_a), (pair_b, obj.pair_b)] {
        if let (Some(v), Some(gr)) = (var, grad) {
            grads.push((v, to_f32(&gr)));
        }
    }
    if let Some(p) = pred {
        let flat = obj.reconstructed.iter().map(|&v| v as f32).collect();
        grads.push((p, Tensor::from_vec(b * n, plen, flat)));
    }
    let d_log_tau = if clamped { 0.0 } else { obj.tau * tau };
    grads.push((tau_var, Tensor::scalar(d_log_tau as f32)));
    let root = g.loss(breakdown.total as f32, grads);
    Ok(BatchLoss {
        graph: g,
        root,
        breakdown,
    })
}

/// Everything produced by [`pretrain`].
#[derive(Debug)]
pub struct PretrainOutcome {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub val_log_path: PathBuf,
    pub steps: Vec<StepRecord>,
    pub val_losses: Vec<f64>,
    pub best_val_loss: f64,
    /// Model after the final step (the checkpoint holds the best one).
    pub final_model: ClipMae,
    pub vocab: Vocabulary,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train.jsonl";
pub const VAL_LOG: &str = "val.jsonl";

/// Splits the corpus into pretraining train and validation patients.
fn pretrain_splits<'a>(corpus: &'a CorpusManifest, val_fraction: f64) -> Result<(Vec<&'a PatientRecord>, Vec<&'a PatientRecord>)> {
    let train: Vec<&PatientRecord> = corpus.split(Split::Train).map(|e| &e.patient).collect();
    let val: Vec<&PatientRecord> = corpus.split(Split::Val).map(|e| &e.patient).collect();
    if train.is_empty() {
        return Err(Error::Data("corpus has no train patients".into()));
    }
    if !val.is_empty() {
        return Ok((train, val));
    }
    let n_val = ((train.len() as f64) * val_fraction).round() as usize;
    if n_val == 0 || n_val >= train.len() {
        return Err(Error::Data(
            "corpus has no val split and val_fraction leaves no validation patients".into(),
        ));
    }
    let cut = train.len() - n_val;
    Ok((train[..cut].to_vec(), train[cut..].to_vec()))
}

/// Mean combined loss over the validation patients with a fixed random
/// stream, so epochs are comparable.
pub fn validation_loss(
    model: &ClipMae,
    source: &BatchSource<'_>,
    cfg: &PretrainConfig,
    mask_ratio: f64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_5A11);
    let batches = source.sweep(cfg.batch_size, &mut rng);
    let mut sum = 0.0;
    let mut count = 0usize;
    for batch in &batches {
        match batch_loss(model, batch, &cfg.weights, mask_ratio, &mut rng) {
            Ok(l) => {
                sum += l.breakdown.total * batch.len() as f64;
                count += batch.len();
            }
            Err(Error::DegenerateBatch(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if count == 0 {
        return Err(Error::DegenerateBatch("no validation batch has a computable loss".into()));
    }
    Ok(sum / count as f64)
}

/// Pretrains a fresh model on the corpus's train split.
///
/// Writes `logs/train.jsonl` (one record per step), `logs/val.jsonl` (one
/// record per epoch) and `checkpoints/best.ckpt` (lowest validation loss)
/// under `out_dir`.
pub fn pretrain(
    corpus: &CorpusManifest,
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    out_dir: &Path,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    corpus.validate()?;
    if let Some((h, w, c)) = corpus.image_shape() {
        if h != model_cfg.image_size || w != model_cfg.image_size || c != model_cfg.channels {
            return Err(Error::Config(format!(
                "corpus images are {h}x{w}x{c}, model expects {0}x{0}x{1}",
                model_cfg.image_size, model_cfg.channels
            )));
        }
    }
    let (train, val) = pretrain_splits(corpus, cfg.val_fraction)?;
    let names = ModalityNames::default();
    let texts = training_texts(train.iter().copied(), &corpus.modality_set, &names);
    let vocab = Vocabulary::fit(texts.iter().map(String::as_str), model_cfg.max_text_len);
    let train_src = BatchSource::new(train.iter().copied(), &vocab, &names)?;
    let val_src = BatchSource::new(val.iter().copied(), &vocab, &names)?;
    let mask_ratio = cfg.mask_ratio.unwrap_or(model_cfg.mask_ratio);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ClipMae::new(model_cfg.clone(), vocab.len(), &mut rng)?;
    let mut opt = AdamW::new(&model.params, cfg.optimizer);
    let schedule = cfg.schedule(train_src.n_patients());
    schedule.validate()?;
    let spe = cfg.steps_per_epoch(train_src.n_patients());

    let ckpt_dir = out_dir.join("checkpoints");
    let log_dir = out_dir.join("logs");
    fs::create_dir_all(&ckpt_dir)?;
    fs::create_dir_all(&log_dir)?;
    let log_path = log_dir.join(TRAIN_LOG);
    let val_log_path = log_dir.join(VAL_LOG);
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    let mut val_log = BufWriter::new(fs::File::create(&val_log_path)?);
    let checkpoint_path = ckpt_dir.join(BEST_CHECKPOINT);

    let mut steps = Vec::with_capacity(schedule.total_steps());
    let mut val_losses = Vec::with_capacity(cfg.total_epochs);
    let mut best = f64::INFINITY;
    let mut step: u64 = 0;
    for epoch in 0..cfg.total_epochs as u64 {
        for _ in 0..spe {
            let lr = lr_at(step as usize, &schedule);
            let batch = train_src.compose(cfg.batch_size, &mut rng);
            let loss = batch_loss(&model, &batch, &cfg.weights, mask_ratio, &mut rng)?;
            model.params.zero_grad();
            loss.graph.backward_into(loss.root, &mut model.params);
            drop(loss.graph);
            if !model.params.grad_norm().is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at step {step} on batch [{}]",
                    batch.patient_ids().join(", ")
                )));
            }
            clip_grad_norm(&mut model.params, cfg.grad_clip);
            opt.step(&mut model.params, lr as f32);
            model.clamp_temperature();
            if !model.params.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite parameters after step {step} on batch [{}]",
                    batch.patient_ids().join(", ")
                )));
            }
            let b = loss.breakdown;
            let rec = StepRecord {
                step,
                epoch,
                lr,
                l_img_text: b.l_img_text,
                l_img_img: b.l_img_img,
                l_recon: b.l_recon,
                total: b.total,
                n_text_pairs: b.n_text_pairs,
                n_img_pairs: b.n_img_pairs,
                temperature: model.temperature(),
            };
            writeln!(log, "{}", serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?)?;
            steps.push(rec);
            step += 1;
        }
        log.flush()?;
        let v = validation_loss(&model, &val_src, cfg, mask_ratio)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss after epoch {epoch}")));
        }
        val_losses.push(v);
        let improved = v < best;
        let make_ckpt = |best_val: f64, model: &ClipMae, opt: &AdamW, rng: &ChaCha8Rng| Checkpoint {
            model: model.clone(),
            vocab: vocab.clone(),
            optimizer: Some(opt.clone()),
            step,
            epoch: epoch + 1,
            rng: Some(RngState::capture(rng)),
            best_val_loss: Some(best_val),
        };
        if improved {
            best = v;
            make_ckpt(best, &model, &opt, &rng).save(&checkpoint_path)?;
        }
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every as u64 == 0 {
            make_ckpt(best, &model, &opt, &rng).save(&ckpt_dir.join(format!("epoch-{}.ckpt", epoch + 1)))?;
        }
        let rec = EpochRecord {
            epoch,
            step,
            val_loss: v,
            best: improved,
        };
        writeln!(val_log, "{}", serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?)?;
        val_log.flush()?;
        log::info!("epoch {epoch}: val loss {v:.5}{}", if improved { " (best)" } else { "" });
    }
    Ok(PretrainOutcome {
        checkpoint_path,
        log_path,
        val_log_path,
        steps,
        val_losses,
        best_val_loss: best,
        final_model: model,
        vocab,
    })
}

/// Reads a training log written by [`pretrain`].
pub fn read_step_log(path: &Path) -> Result<Vec<StepRecord>> {
    read_jsonl(path)
}

pub fn read_val_log(path: &Path) -> Result<Vec<EpochRecord>> {
    read_jsonl(path)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
