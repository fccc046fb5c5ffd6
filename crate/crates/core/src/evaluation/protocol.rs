use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{macro_auroc, one_hot, per_class_auroc, per_class_average_precision, two_sided_t_test};
use super::report::MetricReport;
use super::retrieval::{recall_at_k, RetrievalResult};
use super::store::{EmbeddingStore, RowMeta, Side};
use super::zeroshot::zero_shot_classify;
use crate::corpus::{synthetic_class_catalogue, CorpusManifest, ImageRecord, Modality, PatientRecord, Split};
use crate::error::{Error, Result};
use crate::model::{ClipMae, Embedding};
use crate::text::{KeywordDictionary, ModalityNames, Vocabulary};
use crate::training::{
    fewshot_sample, finetune, pairing_text, Checkpoint, FinetuneConfig, FinetuneOutcome, LabeledItem, LabeledSet,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Zeroshot,
    Fewshot,
    Finetune,
    Retrieval,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Zeroshot => "zeroshot",
            Protocol::Fewshot => "fewshot",
            Protocol::Finetune => "finetune",
            Protocol::Retrieval => "retrieval",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Dataset name written into reports.
    pub dataset: String,
    /// Corpus split evaluated.
    pub split: Split,
    /// Restrict evaluation to these class names.
    pub classes: Option<Vec<String>>,
    pub ks: Vec<usize>,
    pub shots: Vec<usize>,
    /// Few-shot repeats per shot count; repeat `r` samples with seed `seed + r`.
    pub seeds: usize,
    pub seed: u64,
    /// Patients drawn for the retrieval gallery.
    pub retrieval_patients: usize,
    /// Train, validation and test shares of the by-patient downstream split.
    pub downstream_split: [f64; 3],
    /// Fine-tuning settings for few-shot runs; the fine-tune section is used
    /// when unset.
    pub fewshot_finetune: Option<FinetuneConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dataset: "synthetic".into(),
            split: Split::Test,
            classes: None,
            ks: vec![1, 5, 10],
            shots: vec![1, 2, 4, 8, 16],
            seeds: 5,
            seed: 0,
            retrieval_patients: 200,
            downstream_split: [0.55, 0.15, 0.30],
            fewshot_finetune: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be non-empty and positive".into()));
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(Error::Config("shots must be non-empty and positive".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be positive".into()));
        }
        if self.retrieval_patients == 0 {
            return Err(Error::Config("retrieval_patients must be positive".into()));
        }
        let s = self.downstream_split;
        if s.iter().any(|v| !(*v > 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("downstream_split {s:?} must be positive and sum to 1")));
        }
        if let Some(c) = &self.classes {
            if c.len() < 2 {
                return Err(Error::Config("at least 2 classes are needed".into()));
            }
        }
        Ok(())
    }
}

/// One evaluated image and its class.
#[derive(Clone, Debug)]
pub struct EvalItem<'a> {
    pub image: &'a ImageRecord,
    pub patient: &'a PatientRecord,
    pub class: usize,
}

/// Labeled images of one corpus split.
///
/// Synthetic corpora are labeled by latent class, with the class's keyword
/// rendering as prompt text. Other corpora are labeled by each patient's
/// rendered keyword set; patients without keywords are left out.
#[derive(Clone, Debug)]
pub struct EvalDataset<'a> {
    pub class_names: Vec<String>,
    /// Text naming each class in prompts.
    pub class_texts: Vec<String>,
    pub modalities: Vec<Modality>,
    pub items: Vec<EvalItem<'a>>,
}

impl<'a> EvalDataset<'a> {
    pub fn from_corpus(corpus: &'a CorpusManifest, split: Split, classes: Option<&[String]>) -> Result<Self> {
        let entries: Vec<_> = corpus.split(split).collect();
        if entries.is_empty() {
            return Err(Error::Data(format!("corpus has no {split} patients")));
        }
        let latent = entries.iter().all(|e| e.latent_class.is_some());
        let mut class_names = Vec::new();
        let mut class_texts = Vec::new();
        let mut labeled: Vec<(&'a PatientRecord, usize)> = Vec::new();
        if latent {
            let catalogue = synthetic_class_catalogue();
            let dict = KeywordDictionary::starter();
            let n = entries.iter().filter_map(|e| e.latent_class).max().unwrap_or(0) + 1;
            if n > catalogue.len() {
                return Err(Error::Data(format!("latent class {} has no catalogue entry", n - 1)));
            }
            for c in &catalogue[..n] {
                class_names.push(c.name.to_string());
                class_texts.push(dict.extract(c.phrases[0]).render());
            }
            labeled.extend(entries.iter().map(|e| (&e.patient, e.latent_class.unwrap())));
        } else {
            let mut index: BTreeMap<String, usize> = BTreeMap::new();
            for e in &entries {
                if let Some(kw) = &e.patient.keywords {
                    let name = kw.render();
                    let next = index.len();
                    let c = *index.entry(name.clone()).or_insert(next);
                    if c == class_names.len() {
                        class_names.push(name.clone());
                        class_texts.push(name);
                    }
                    labeled.push((&e.patient, c));
                }
            }
        }
        let mut ds = Self {
            class_names,
            class_texts,
            modalities: corpus.modality_set.clone(),
            items: labeled
                .into_iter()
                .flat_map(|(p, class)| p.images.iter().map(move |image| EvalItem { image, patient: p, class }))
                .collect(),
        };
        if let Some(keep) = classes {
            ds = ds.restrict(keep)?;
        }
        if ds.class_names.len() < 2 {
            return Err(Error::Config(format!(
                "evaluation needs at least 2 classes, found {}",
                ds.class_names.len()
            )));
        }
        Ok(ds)
    }

    /// Keeps only the named classes, renumbered in the given order.
    pub fn restrict(self, keep: &[String]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (new, name) in keep.iter().enumerate() {
            let old = self
                .class_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Config(format!("unknown class {name:?}")))?;
            if map.insert(old, new).is_some() {
                return Err(Error::Config(format!("duplicate class name {name:?}")));
            }
        }
        let class_texts = keep
            .iter()
            .map(|n| self.class_texts[self.class_names.iter().position(|c| c == n).unwrap()].clone())
            .collect();
        Ok(Self {
            class_names: keep.to_vec(),
            class_texts,
            modalities: self.modalities,
            items: self
                .items
                .into_iter()
                .filter_map(|it| map.get(&it.class).map(|&c| EvalItem { class: c, ..it }))
                .collect(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.items[i].class).collect()
    }

    /// Item indices split by patient into train, validation and test parts.
    pub fn downstream_split(&self, shares: [f64; 3], seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut patients: Vec<&str> = self.items.iter().map(|i| i.patient.patient_id.as_str()).collect();
        patients.sort_unstable();
        patients.dedup();
        patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = patients.len();
        let n_train = (shares[0] * n as f64).round() as usize;
        let n_val = ((shares[1] * n as f64).round() as usize).min(n - n_train);
        let part: BTreeMap<&str, usize> = patients
            .iter()
            .enumerate()
            .map(|(i, p)| (*p, usize::from(i >= n_train) + usize::from(i >= n_train + n_val)))
            .collect();
        let mut out = (Vec::new(), Vec::new(), Vec::new());
        for (i, item) in self.items.iter().enumerate() {
            match part[item.patient.patient_id.as_str()] {
                0 => out.0.push(i),
                1 => out.1.push(i),
                _ => out.2.push(i),
            }
        }
        out
    }

    pub fn labeled_set(&self, idx: &[usize]) -> LabeledSet {
        let k = self.n_classes();
        LabeledSet {
            class_names: self.class_names.clone(),
            items: idx
                .iter()
                .map(|&i| {
                    let it = &self.items[i];
                    LabeledItem {
                        id: it.image.image_id.clone(),
                        pixels: it.image.pixels.to_unit(),
                        targets: (0..k).map(|c| c == it.class).collect(),
                    }
                })
                .collect(),
        }
    }
}

fn row_meta(image: &ImageRecord, labels: Vec<String>) -> RowMeta {
    RowMeta {
        id: image.image_id.clone(),
        patient_id: Some(image.patient_id.clone()),
        modality: Some(image.modality.tag().to_string()),
        labels,
    }
}

/// Full-view image embeddings.
pub fn embed_images(model: &ClipMae, images: &[(&ImageRecord, Vec<String>)]) -> Result<EmbeddingStore> {
    let mut store = EmbeddingStore::new(Side::Image, model.config().proj_dim);
    for chunk in images.chunks(256) {
        let pixels: Vec<Vec<f32>> = chunk.iter().map(|(i, _)| i.pixels.to_unit()).collect();
        let refs: Vec<&[f32]> = pixels.iter().map(Vec::as_slice).collect();
        let enc = model.encode_images(&refs)?;
        for ((img, labels), e) in chunk.iter().zip(&enc.embeddings) {
            store.push(row_meta(img, labels.clone()), e)?;
        }
    }
    Ok(store)
}

pub fn embed_texts(model: &ClipMae, vocab: &Vocabulary, texts: &[(RowMeta, String)]) -> Result<EmbeddingStore> {
    let mut store = EmbeddingStore::new(Side::Text, model.config().proj_dim);
    let seqs: Vec<_> = texts.iter().map(|(_, t)| vocab.tokenize(t)).collect();
    let refs: Vec<_> = seqs.iter().collect();
    let enc = model.encode_texts(&refs)?;
    for ((meta, _), e) in texts.iter().zip(&enc.embeddings) {
        store.push(meta.clone(), e)?;
    }
    Ok(store)
}

fn softmax_rows(scores: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    scores
        .iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|s| ((s - max) / tau).exp()).collect();
            let sum: f64 = e.iter().sum();
            e.into_iter().map(|v| v / sum).collect()
        })
        .collect()
}

/// Zero-shot class probabilities of the given items: cosine similarity to
/// a prompt per (image modality, class), softmax-normalized at the model
/// temperature. Also returns the predicted classes.
pub fn zero_shot_scores(ckpt: &Checkpoint, ds: &EvalDataset<'_>, idx: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let names = ModalityNames::default();
    let mut prompts: BTreeMap<&str, Vec<(String, Embedding)>> = BTreeMap::new();
    for m in &ds.modalities {
        let texts: Vec<(RowMeta, String)> = ds
            .class_names
            .iter()
            .zip(&ds.class_texts)
            .map(|(name, text)| Ok((RowMeta::new(name.clone()), names.prompt(m, text)?)))
            .collect::<Result<_>>()?;
        let store = embed_texts(&ckpt.model, &ckpt.vocab, &texts)?;
        let list = (0..store.len())
            .map(|i| Ok((store.id(i).to_string(), Embedding::new(store.row(i).to_vec())?)))
            .collect::<Result<_>>()?;
        prompts.insert(m.tag(), list);
    }
    let images: Vec<(&ImageRecord, Vec<String>)> = idx.iter().map(|&i| (ds.items[i].image, Vec::new())).collect();
    let store = embed_images(&ckpt.model, &images)?;
    let mut scores = Vec::with_capacity(idx.len());
    let mut predicted = Vec::with_capacity(idx.len());
    for (i, (img, _)) in images.iter().enumerate() {
        let p = prompts
            .get(img.modality.tag())
            .ok_or_else(|| Error::Data(format!("image {} has an undeclared modality", img.image_id)))?;
        let pred = zero_shot_classify(&Embedding::new(store.row(i).to_vec())?, p)?;
        predicted.push(pred.predicted);
        scores.push(pred.scores);
    }
    Ok((softmax_rows(&scores, ckpt.model.temperature()), predicted))
}

fn classification_reports(
    protocol: &str,
    dataset: &str,
    probs: &[Vec<f64>],
    labels: &[usize],
    k: usize,
) -> Result<Vec<MetricReport>> {
    let targets = one_hot(labels, k);
    let auroc = per_class_auroc(probs, &targets)?;
    let aupr = per_class_average_precision(probs, &targets)?;
    let mut a = MetricReport::from_values(protocol, dataset, "macro_auroc", &auroc)?;
    let mut b = MetricReport::from_values(protocol, dataset, "macro_aupr", &aupr)?;
    a.n = labels.len();
    b.n = labels.len();
    Ok(vec![a, b])
}

fn zeroshot_protocol(ckpt: &Checkpoint, ds: &EvalDataset<'_>, cfg: &EvalConfig) -> Result<Vec<MetricReport>> {
    let idx: Vec<usize> = (0..ds.items.len()).collect();
    let (probs, _) = zero_shot_scores(ckpt, ds, &idx)?;
    classification_reports("zeroshot", &cfg.dataset, &probs, &ds.labels(&idx), ds.n_classes())
}

/// Zero-shot reports on the test part of the downstream split, the data
/// the fine-tune protocol is scored on.
pub fn zeroshot_on_downstream_test(ckpt: &Checkpoint, ds: &EvalDataset<'_>, cfg: &EvalConfig) -> Result<Vec<MetricReport>> {
    let (_, _, test) = ds.downstream_split(cfg.downstream_split, cfg.seed);
    let (probs, _) = zero_shot_scores(ckpt, ds, &test)?;
    classification_reports("zeroshot", &cfg.dataset, &probs, &ds.labels(&test), ds.n_classes())
}

/// Fine-tunes on the train part of the downstream split (validating on its
/// val part) and scores the classifier on the test part.
pub fn finetune_evaluation(
    ckpt: &Checkpoint,
    ds: &EvalDataset<'_>,
    cfg: &EvalConfig,
    ft: &FinetuneConfig,
) -> Result<(Vec<MetricReport>, FinetuneOutcome)> {
    let (train, val, test) = ds.downstream_split(cfg.downstream_split, cfg.seed);
    let out = finetune(&ckpt.model, &ds.labeled_set(&train), Some(&ds.labeled_set(&val)), ft)?;
    let test_set = ds.labeled_set(&test);
    let pixels: Vec<&[f32]> = test_set.items.iter().map(|i| i.pixels.as_slice()).collect();
    let probs = out.classifier.predict(&pixels)?;
    let reports = classification_reports("finetune", &cfg.dataset, &probs, &ds.labels(&test), ds.n_classes())?;
    Ok((reports, out))
}

/// One few-shot run: macro AUROC on the downstream test part.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FewShotRun {
    pub n_per_class: usize,
    pub seed: u64,
    pub macro_auroc: f64,
}

pub fn fewshot_runs(
    ckpt: &Checkpoint,
    ds: &EvalDataset<'_>,
    cfg: &EvalConfig,
    ft: &FinetuneConfig,
) -> Result<Vec<FewShotRun>> {
    let (train, val, test) = ds.downstream_split(cfg.downstream_split, cfg.seed);
    let pool = ds.labeled_set(&train);
    let val_set = ds.labeled_set(&val);
    let test_set = ds.labeled_set(&test);
    let pixels: Vec<&[f32]> = test_set.items.iter().map(|i| i.pixels.as_slice()).collect();
    let mut runs = Vec::new();
    for &n in &cfg.shots {
        for r in 0..cfg.seeds as u64 {
            let seed = cfg.seed + r;
            let subset = fewshot_sample(&pool, n, seed)?;
            let run_cfg = FinetuneConfig { seed, ..ft.clone() };
            let out = finetune(&ckpt.model, &subset.set, Some(&val_set), &run_cfg)?;
            let probs = out.classifier.predict(&pixels)?;
            let auroc = macro_auroc(&probs, &test_set.targets())?;
            log::info!("few-shot n={n} seed={seed}: macro AUROC {auroc:.4}");
            runs.push(FewShotRun {
                n_per_class: n,
                seed,
                macro_auroc: auroc,
            });
        }
    }
    Ok(runs)
}

/// Per-run records followed by one aggregate per shot count. Aggregates
/// beyond the first shot count carry a paired t-test against it.
pub fn fewshot_reports(runs: &[FewShotRun], dataset: &str, n_test: usize) -> Result<Vec<MetricReport>> {
    let mut out: Vec<MetricReport> = runs
        .iter()
        .map(|r| {
            MetricReport::point("fewshot", dataset, "macro_auroc", r.macro_auroc, n_test)
                .with_seed(r.seed)
                .with_shots(r.n_per_class)
        })
        .collect();
    let mut shots: Vec<usize> = Vec::new();
    for r in runs {
        if !shots.contains(&r.n_per_class) {
            shots.push(r.n_per_class);
        }
    }
    let values = |n: usize| runs.iter().filter(|r| r.n_per_class == n).map(|r| r.macro_auroc).collect::<Vec<_>>();
    let base = shots.first().map(|&n| values(n));
    for &n in &shots {
        let v = values(n);
        if v.len() < 2 {
            continue;
        }
        let mut rep = MetricReport::from_values("fewshot", dataset, "mean_macro_auroc", &v)?.with_shots(n);
        if let Some(b) = base.as_ref().filter(|b| b.len() == v.len() && n != shots[0]) {
            rep = rep.with_p_value(two_sided_t_test(&v, b, true)?, &format!("n_per_class={}", shots[0]));
        }
        out.push(rep);
    }
    Ok(out)
}

/// Results of the retrieval protocol, by direction and criterion.
#[derive(Clone, Debug)]
pub struct RetrievalSuite {
    pub t2i: RetrievalResult,
    pub i2t: RetrievalResult,
    /// Image-to-image, correct when the classes agree.
    pub i2i_class: RetrievalResult,
    /// Image-to-image, correct when the patients agree.
    pub i2i_patient: RetrievalResult,
}

type Truth = BTreeMap<String, BTreeSet<String>>;

/// Cross-modal retrieval over a seeded subset of patients.
///
/// Image-to-image queries are the images of the first modality and the
/// gallery the images of the others. Texts are the pairing texts of the
/// subset patients that have keywords, one per image; a text and an image
/// match when they share class and modality.
pub fn retrieval_suite(ckpt: &Checkpoint, ds: &EvalDataset<'_>, cfg: &EvalConfig) -> Result<RetrievalSuite> {
    let mut patients: Vec<&str> = ds.items.iter().map(|i| i.patient.patient_id.as_str()).collect();
    patients.sort_unstable();
    patients.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.retrieval_patients.min(patients.len());
    let chosen: BTreeSet<&str> = index::sample(&mut rng, patients.len(), n).into_iter().map(|i| patients[i]).collect();
    let items: Vec<&EvalItem<'_>> = ds
        .items
        .iter()
        .filter(|i| chosen.contains(i.patient.patient_id.as_str()))
        .collect();
    let class_label = |c: usize| vec![ds.class_names[c].clone()];
    let images = embed_images(
        &ckpt.model,
        &items.iter().map(|i| (i.image, class_label(i.class))).collect::<Vec<_>>(),
    )?;
    let names = ModalityNames::default();
    let texts: Vec<(RowMeta, String)> = items
        .iter()
        .filter_map(|i| {
            pairing_text(&names, &i.image.modality, i.patient).map(|t| {
                let mut m = row_meta(i.image, class_label(i.class));
                m.id = format!("{}#text", i.image.image_id);
                (m, t)
            })
        })
        .collect();
    if texts.is_empty() {
        return Err(Error::Data("no retrieval patient has report keywords".into()));
    }
    let texts = embed_texts(&ckpt.model, &ckpt.vocab, &texts)?;

    let key = |m: &RowMeta| (m.labels.clone(), m.modality.clone());
    let mut text_by_key: BTreeMap<_, BTreeSet<String>> = BTreeMap::new();
    for i in 0..texts.len() {
        text_by_key.entry(key(texts.meta(i))).or_default().insert(texts.id(i).to_string());
    }
    let mut image_by_key: BTreeMap<_, BTreeSet<String>> = BTreeMap::new();
    for i in 0..images.len() {
        image_by_key.entry(key(images.meta(i))).or_default().insert(images.id(i).to_string());
    }
    let t2i_truth: Truth = (0..texts.len())
        .map(|i| (texts.id(i).to_string(), image_by_key[&key(texts.meta(i))].clone()))
        .collect();
    let i2t_queries = images.filter(|m| text_by_key.contains_key(&key(m)));
    let i2t_truth: Truth = (0..i2t_queries.len())
        .map(|i| (i2t_queries.id(i).to_string(), text_by_key[&key(i2t_queries.meta(i))].clone()))
        .collect();

    let first = ds.modalities[0].tag().to_string();
    let queries = images.filter(|m| m.modality.as_deref() == Some(first.as_str()));
    let gallery = images.filter(|m| m.modality.as_deref() != Some(first.as_str()));
    let mut by_class: BTreeMap<&[String], BTreeSet<String>> = BTreeMap::new();
    let mut by_patient: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for (m, _) in gallery.rows() {
        by_class.entry(&m.labels).or_default().insert(m.id.clone());
        by_patient.entry(m.patient_id.as_deref().unwrap_or("")).or_default().insert(m.id.clone());
    }
    let mut class_truth = Truth::new();
    let mut patient_truth = Truth::new();
    for (m, _) in queries.rows() {
        if let Some(s) = by_class.get(m.labels.as_slice()) {
            class_truth.insert(m.id.clone(), s.clone());
        }
        if let Some(s) = by_patient.get(m.patient_id.as_deref().unwrap_or("")) {
            patient_truth.insert(m.id.clone(), s.clone());
        }
    }
    let class_q = queries.filter(|m| class_truth.contains_key(&m.id));
    let patient_q = queries.filter(|m| patient_truth.contains_key(&m.id));
    Ok(RetrievalSuite {
        t2i: recall_at_k(&texts, &images, &t2i_truth, &cfg.ks)?,
        i2t: recall_at_k(&i2t_queries, &texts, &i2t_truth, &cfg.ks)?,
        i2i_class: recall_at_k(&class_q, &gallery, &class_truth, &cfg.ks)?,
        i2i_patient: recall_at_k(&patient_q, &gallery, &patient_truth, &cfg.ks)?,
    })
}

fn retrieval_reports(suite: &RetrievalSuite, dataset: &str) -> Vec<MetricReport> {
    let mut out = Vec::new();
    for (name, r) in [
        ("t2i", &suite.t2i),
        ("i2i", &suite.i2i_class),
        ("i2i_patient", &suite.i2i_patient),
        ("i2t", &suite.i2t),
    ] {
        for (k, v) in r.ks.iter().zip(&r.recalls) {
            out.push(MetricReport::point("retrieval", dataset, &format!("{name}_recall@{k}"), *v, r.n_queries));
        }
        out.push(MetricReport::point(
            "retrieval",
            dataset,
            &format!("{name}_mean_recall"),
            r.mean_recall,
            r.n_queries,
        ));
    }
    out
}

/// Runs one evaluation protocol on a corpus split and returns its reports.
pub fn evaluate_protocol(
    ckpt: &Checkpoint,
    corpus: &CorpusManifest,
    protocol: Protocol,
    cfg: &EvalConfig,
    finetune_cfg: &FinetuneConfig,
) -> Result<Vec<MetricReport>> {
    cfg.validate()?;
    let ds = EvalDataset::from_corpus(corpus, cfg.split, cfg.classes.as_deref())?;
    let reports = match protocol {
        Protocol::Zeroshot => zeroshot_protocol(ckpt, &ds, cfg)?,
        Protocol::Finetune => finetune_evaluation(ckpt, &ds, cfg, finetune_cfg)?.0,
        Protocol::Fewshot => {
            let ft = cfg.fewshot_finetune.as_ref().unwrap_or(finetune_cfg);
            let runs = fewshot_runs(ckpt, &ds, cfg, ft)?;
            let n_test = ds.downstream_split(cfg.downstream_split, cfg.seed).2.len();
            fewshot_reports(&runs, &cfg.dataset, n_test)?
        }
        Protocol::Retrieval => retrieval_reports(&retrieval_suite(ckpt, &ds, cfg)?, &cfg.dataset),
    };
    for r in &reports {
        r.validate()?;
    }
    Ok(reports)
}
