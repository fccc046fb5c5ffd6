use std::fs;
use std::io::Write;
use std::path::Path;

use log::info;

use mclab::corpus::{generate_synthetic_corpus, load_corpus, persist_corpus, CorpusManifest, Split};
use mclab::evaluation::{
    append_reports, embed_images, embed_texts, evaluate_protocol, finetune_evaluation, EvalDataset, MetricReport,
    RowMeta, Side,
};
use mclab::model::ModelConfig;
use mclab::text::ModalityNames;
use mclab::training::{pairing_text, pretrain as run_pretrain, Checkpoint};

use crate::config::{RunConfig, RESOLVED};
use crate::error::CliError;
use crate::output::Output;

pub use mclab::evaluation::Protocol;

/// Fine-tune history file written by the finetune command.
pub const FINETUNE_LOG: &str = "logs/finetune.jsonl";
/// Directory holding the fine-tuned classifier.
pub const CLASSIFIER_DIR: &str = "checkpoints/classifier";

pub fn parse_split(s: &str) -> Result<Split, CliError> {
    Split::ALL
        .into_iter()
        .find(|x| x.as_str() == s)
        .ok_or_else(|| CliError::Usage(format!("unknown split {s:?}; expected train, val or test")))
}

fn load_data(dir: &Path) -> Result<CorpusManifest, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Validation(format!("data directory {} does not exist", dir.display())));
    }
    Ok(load_corpus(dir)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(CliError::Validation(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn check_image_shape(model: &ModelConfig, corpus: &CorpusManifest) -> Result<(), CliError> {
    if let Some((h, w, c)) = corpus.image_shape() {
        if (h, w, c) != (model.image_size, model.image_size, model.channels) {
            return Err(CliError::Validation(format!(
                "corpus images are {h}x{w}x{c} but the model expects {0}x{0}x{1}",
                model.image_size, model.channels
            )));
        }
    }
    Ok(())
}

pub fn generate_data(cfg: RunConfig, dir: &Path, out: &Output) -> Result<(), CliError> {
    cfg.validate()?;
    if dir.exists() {
        let non_empty = !dir.is_dir() || fs::read_dir(dir)?.next().is_some();
        if non_empty {
            return Err(CliError::Validation(format!(
                "output directory {} is not empty; refusing to overwrite",
                dir.display()
            )));
        }
    }
    let corpus = generate_synthetic_corpus(&cfg.corpus.generator, cfg.corpus.seed)?;
    out.prepare_dir(dir)?;
    persist_corpus(&corpus, dir)?;
    load_corpus(dir)?.validate()?;
    cfg.write_resolved(&dir.join(RESOLVED))?;
    info!("wrote {} patients to {}", corpus.entries.len(), dir.display());
    Ok(())
}

pub fn pretrain(cfg: RunConfig, data: &Path, dir: &Path, out: &Output) -> Result<(), CliError> {
    cfg.validate()?;
    let corpus = load_data(data)?;
    check_image_shape(&cfg.model, &corpus)?;
    out.prepare_run_dir(dir)?;
    cfg.write_resolved(&dir.join(RESOLVED))?;
    let result = run_pretrain(&corpus, &cfg.model, &cfg.pretrain, dir)?;
    info!(
        "{} steps, best validation loss {:.4}; checkpoint {}",
        result.steps.len(),
        result.best_val_loss,
        result.checkpoint_path.display()
    );
    Ok(())
}

pub fn embed(cfg: RunConfig, checkpoint: &Path, data: &Path, side: Side, file: &Path, out: &Output) -> Result<(), CliError> {
    cfg.validate()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let corpus = load_data(data)?;
    check_image_shape(ckpt.model.config(), &corpus)?;
    let ds = EvalDataset::from_corpus(&corpus, cfg.eval.split, cfg.eval.classes.as_deref())?;
    let store = match side {
        Side::Image => {
            let items: Vec<_> = ds.items.iter().map(|i| (i.image, vec![ds.class_names[i.class].clone()])).collect();
            embed_images(&ckpt.model, &items)?
        }
        Side::Text => {
            let names = ModalityNames::default();
            let mut texts: Vec<(RowMeta, String)> = Vec::new();
            for e in corpus.split(cfg.eval.split) {
                let p = &e.patient;
                for m in &corpus.modality_set {
                    if let Some(t) = pairing_text(&names, m, p) {
                        let mut meta = RowMeta::new(format!("{}#{}", p.patient_id, m.tag()));
                        meta.patient_id = Some(p.patient_id.clone());
                        meta.modality = Some(m.tag().to_string());
                        meta.labels = p.keywords.as_ref().map(|k| k.labels().to_vec()).unwrap_or_default();
                        texts.push((meta, t));
                    }
                }
            }
            if texts.is_empty() {
                return Err(CliError::Validation(format!("no {} patient has report keywords", cfg.eval.split)));
            }
            embed_texts(&ckpt.model, &ckpt.vocab, &texts)?
        }
    };
    out.prepare_file(file)?;
    store.save(file)?;
    let mut resolved = file.as_os_str().to_owned();
    resolved.push(format!(".{RESOLVED}"));
    cfg.write_resolved(Path::new(&resolved))?;
    info!("wrote {} embeddings to {}", store.len(), file.display());
    Ok(())
}

fn write_reports(path: &Path, reports: &[MetricReport]) -> Result<(), CliError> {
    if path.exists() {
        fs::remove_file(path)?;
    }
    append_reports(path, reports)?;
    Ok(())
}

pub fn evaluate(
    cfg: RunConfig,
    protocol: Protocol,
    checkpoint: &Path,
    data: &Path,
    dir: &Path,
    out: &Output,
) -> Result<(), CliError> {
    cfg.validate()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let corpus = load_data(data)?;
    check_image_shape(ckpt.model.config(), &corpus)?;
    out.prepare_run_dir(dir)?;
    cfg.write_resolved(&dir.join(RESOLVED))?;
    let reports = match protocol {
        Protocol::Finetune => {
            let ds = EvalDataset::from_corpus(&corpus, cfg.eval.split, cfg.eval.classes.as_deref())?;
            let (reports, outcome) = finetune_evaluation(&ckpt, &ds, &cfg.eval, &cfg.finetune)?;
            let mut log = fs::File::create(dir.join(FINETUNE_LOG))?;
            for h in &outcome.history {
                let line = serde_json::to_string(h).map_err(|e| CliError::Runtime(e.to_string()))?;
                writeln!(log, "{line}")?;
            }
            outcome.classifier.save(&ckpt.vocab, &dir.join(CLASSIFIER_DIR))?;
            info!("best fine-tune epoch {}", outcome.best_epoch);
            reports
        }
        p => evaluate_protocol(&ckpt, &corpus, p, &cfg.eval, &cfg.finetune)?,
    };
    let path = dir.join("reports").join(format!("{}.jsonl", protocol.as_str()));
    write_reports(&path, &reports)?;
    for r in reports.iter().filter(|r| r.seed.is_none()) {
        let shots = r.n_per_class.map(|n| format!(" n={n}")).unwrap_or_default();
        println!(
            "{} {}{shots} {:.4} [{:.4}, {:.4}]",
            r.protocol, r.metric, r.value, r.ci_low, r.ci_high
        );
    }
    info!("wrote {} report lines to {}", reports.len(), path.display());
    Ok(())
}
