//! Multi-modal patient records and the synthetic corpus generator.
//!
//! A patient owns examination images of several modalities and, sometimes,
//! a keyword label set from a report. Images of different modalities from
//! the same patient are the positives of the image-image contrastive term.

mod generator;
mod persist;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::KeywordSet;

pub use generator::{generate_synthetic_corpus, synthetic_class_catalogue, GeneratorConfig, SyntheticClass};
pub use persist::{load_corpus, persist_corpus, IMAGE_DIR, MANIFEST_FILE};

/// Imaging modality tag such as `CFP` or `OCT`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Modality(String);

impl Modality {
    /// The five modalities named for ophthalmic imaging.
    pub const DEFAULTS: [&'static str; 5] = ["CFP", "OCT", "FFA", "ICGA", "FAF"];

    pub fn new(tag: &str) -> Result<Self> {
        if tag.is_empty() {
            return Err(Error::Validation("modality tag is empty".into()));
        }
        if tag.chars().any(|c| c.is_lowercase() || c.is_whitespace()) {
            return Err(Error::Validation(format!(
                "modality tag {tag:?} must be uppercase without whitespace"
            )));
        }
        Ok(Self(tag.to_string()))
    }

    pub fn tag(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Modality {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Modality::new(&s)
    }
}

impl From<Modality> for String {
    fn from(m: Modality) -> String {
        m.0
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// 8-bit `height x width x channels` raster; values read as `byte / 255`.
#[derive(Clone, PartialEq, Eq)]
pub struct Pixels {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Pixels {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dimension(
                "pixel buffer",
                format!("{height}x{width}x{channels}"),
                format!("{} bytes", data.len()),
            ));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Validation(format!("{channels} channels; expected 1 or 3")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Quantizes `[0, 1]` values to bytes.
    pub fn from_unit(height: usize, width: usize, channels: usize, values: &[f32]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite pixel".into()));
        }
        let data = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(height, width, channels, data)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    /// Values in `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f32> {
        self.data.iter().map(|&b| f32::from(b) / 255.0).collect()
    }
}

impl fmt::Debug for Pixels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Pixels({}x{}x{})", self.height, self.width, self.channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub modality: Modality,
    pub pixels: Pixels,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub images: Vec<ImageRecord>,
    /// Absent when the patient has no report.
    pub keywords: Option<KeywordSet>,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        if self.patient_id.is_empty() {
            return Err(Error::Validation("empty patient_id".into()));
        }
        for img in &self.images {
            if img.patient_id != self.patient_id {
                return Err(Error::Validation(format!(
                    "image {} belongs to patient {} but is listed under {}",
                    img.image_id, img.patient_id, self.patient_id
                )));
            }
        }
        if self.keywords.as_ref().is_some_and(KeywordSet::is_empty) {
            return Err(Error::Validation(format!(
                "patient {} has an empty keyword set",
                self.patient_id
            )));
        }
        Ok(())
    }
}

/// Every unordered pair of the patient's images with different modalities,
/// ordered by image id within each pair and then lexicographically.
pub fn pair_examinations(patient: &PatientRecord) -> Vec<(&ImageRecord, &ImageRecord)> {
    let mut images: Vec<&ImageRecord> = patient.images.iter().collect();
    images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut pairs = Vec::new();
    for (i, a) in images.iter().enumerate() {
        for b in &images[i + 1..] {
            if a.modality != b.modality {
                pairs.push((*a, *b));
            }
        }
    }
    pairs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One manifest line: a patient, its split, and (for synthetic data) the
/// latent class. Training code never reads `latent_class`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEntry {
    pub split: Split,
    pub patient: PatientRecord,
    pub latent_class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub modality_set: Vec<Modality>,
    pub generator_seed: Option<u64>,
    pub entries: Vec<CorpusEntry>,
}

impl CorpusManifest {
    /// Checks every corpus-level invariant: declared modalities, unique
    /// image and patient ids, and patient-disjoint splits.
    pub fn validate(&self) -> Result<()> {
        if self.modality_set.is_empty() {
            return Err(Error::Validation("corpus declares no modalities".into()));
        }
        let declared: HashSet<&Modality> = self.modality_set.iter().collect();
        if declared.len() != self.modality_set.len() {
            return Err(Error::Validation("duplicate modality in modality_set".into()));
        }
        let mut split_of: HashMap<&str, Split> = HashMap::new();
        let mut image_ids: HashSet<&str> = HashSet::new();
        let mut shape = None;
        for e in &self.entries {
            e.patient.validate()?;
            if let Some(prev) = split_of.insert(&e.patient.patient_id, e.split) {
                return Err(Error::Validation(if prev == e.split {
                    format!("patient {} listed twice", e.patient.patient_id)
                } else {
                    format!(
                        "patient {} appears in both {prev} and {} splits",
                        e.patient.patient_id, e.split
                    )
                }));
            }
            for img in &e.patient.images {
                if !declared.contains(&img.modality) {
                    return Err(Error::Validation(format!(
                        "image {} has undeclared modality {}",
                        img.image_id, img.modality
                    )));
                }
                if !image_ids.insert(&img.image_id) {
                    return Err(Error::Validation(format!("duplicate image_id {}", img.image_id)));
                }
                let s = img.pixels.shape();
                if *shape.get_or_insert(s) != s {
                    return Err(Error::Validation(format!(
                        "image {} has shape {s:?}, corpus uses {:?}",
                        img.image_id,
                        shape.unwrap()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn patient_ids(&self, split: Split) -> BTreeSet<&str> {
        self.split(split).map(|e| e.patient.patient_id.as_str()).collect()
    }

    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.entries
            .iter()
            .flat_map(|e| e.patient.images.first())
            .map(|i| i.pixels.shape())
            .next()
    }

    pub fn n_images(&self) -> usize {
        self.entries.iter().map(|e| e.patient.images.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(id: &str, modality: &str) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            patient_id: "p".into(),
            modality: Modality::new(modality).unwrap(),
            pixels: Pixels::new(1, 1, 1, vec![0]).unwrap(),
        }
    }

    fn patient(images: Vec<ImageRecord>) -> PatientRecord {
        PatientRecord {
            patient_id: "p".into(),
            images,
            keywords: None,
        }
    }

    fn ids(pairs: &[(&ImageRecord, &ImageRecord)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(a, b)| (a.image_id.clone(), b.image_id.clone()))
            .collect()
    }

    #[test]
    fn pairs_every_cross_modality_combination() {
        let p = patient(vec![img("c", "FFA"), img("a", "CFP"), img("b", "OCT")]);
        let got = ids(&pair_examinations(&p));
        let want: Vec<(String, String)> = [("a", "b"), ("a", "c"), ("b", "c")]
            .iter()
            .map(|(x, y)| (x.to_string(), y.to_string()))
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn no_pairs_for_single_or_same_modality() {
        assert!(pair_examinations(&patient(vec![img("a", "CFP")])).is_empty());
        assert!(pair_examinations(&patient(vec![img("a", "CFP"), img("b", "CFP")])).is_empty());
    }

    #[test]
    fn modality_tags_are_validated() {
        assert!(Modality::new("").is_err());
        assert!(Modality::new("cfp").is_err());
        assert!(Modality::new("ICGA").is_ok());
    }

    #[test]
    fn patient_in_two_splits_is_rejected() {
        let entry = |split| CorpusEntry {
            split,
            patient: patient(vec![]),
            latent_class: None,
        };
        let m = CorpusManifest {
            modality_set: vec![Modality::new("CFP").unwrap()],
            generator_seed: None,
            entries: vec![entry(Split::Train), entry(Split::Test)],
        };
        let err = m.validate().unwrap_err();
        assert!(err.to_string().contains("both train and test"), "{err}");
    }

    #[test]
    fn empty_keyword_set_is_rejected() {
        let mut p = patient(vec![]);
        p.keywords = Some(KeywordSet::default());
        assert!(p.validate().is_err());
    }
}
