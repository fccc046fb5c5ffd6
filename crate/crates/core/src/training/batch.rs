use rand::seq::index;
use rand::Rng;

use crate::corpus::{ImageRecord, Modality, PatientRecord};
use crate::error::{Error, Result};
use crate::text::{ModalityNames, TokenSequence, Vocabulary};

/// Text paired with an image: the modality's long name followed by the
/// patient's rendered keywords, the same shape as a zero-shot prompt.
pub fn pairing_text(names: &ModalityNames, modality: &Modality, patient: &PatientRecord) -> Option<String> {
    let kw = patient.keywords.as_ref()?;
    names.prompt(modality, &kw.render()).ok()
}

/// One batch row. Every sample feeds reconstruction through its anchor.
#[derive(Clone, Debug)]
pub struct Sample<'a> {
    pub patient: &'a PatientRecord,
    pub anchor: &'a ImageRecord,
    /// Same-patient image of another modality, when one exists.
    pub partner: Option<&'a ImageRecord>,
    /// Tokenized text for the anchor, when the patient has keywords.
    pub text: Option<TokenSequence>,
}

#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub samples: Vec<Sample<'a>>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_text_pairs(&self) -> usize {
        self.samples.iter().filter(|s| s.text.is_some()).count()
    }

    pub fn n_img_pairs(&self) -> usize {
        self.samples.iter().filter(|s| s.partner.is_some()).count()
    }

    pub fn patient_ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.patient.patient_id.as_str()).collect()
    }
}

/// Everything batch composition needs besides the random stream.
#[derive(Clone, Debug)]
pub struct BatchSource<'a> {
    patients: Vec<&'a PatientRecord>,
    vocab: &'a Vocabulary,
    names: &'a ModalityNames,
}

impl<'a> BatchSource<'a> {
    /// Patients without images are skipped.
    pub fn new(
        patients: impl IntoIterator<Item = &'a PatientRecord>,
        vocab: &'a Vocabulary,
        names: &'a ModalityNames,
    ) -> Result<Self> {
        let patients: Vec<_> = patients.into_iter().filter(|p| !p.images.is_empty()).collect();
        if patients.is_empty() {
            return Err(Error::Data("no patient with images to sample from".into()));
        }
        Ok(Self {
            patients,
            vocab,
            names,
        })
    }

    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    fn sample<R: Rng + ?Sized>(&self, patient: &'a PatientRecord, rng: &mut R) -> Sample<'a> {
        let anchor = &patient.images[rng.random_range(0..patient.images.len())];
        let partners: Vec<&ImageRecord> = patient
            .images
            .iter()
            .filter(|i| i.modality != anchor.modality)
            .collect();
        let partner = if partners.is_empty() {
            None
        } else {
            Some(partners[rng.random_range(0..partners.len())])
        };
        let text = pairing_text(self.names, &anchor.modality, patient).map(|t| self.vocab.tokenize(&t));
        Sample {
            patient,
            anchor,
            partner,
            text,
        }
    }

    /// Draws `min(batch_size, n_patients)` distinct patients uniformly, one
    /// uniformly chosen image each, plus a uniformly chosen cross-modality
    /// partner and the keyword text when available.
    pub fn compose<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Batch<'a> {
        let n = batch_size.min(self.patients.len());
        let picks = index::sample(rng, self.patients.len(), n);
        let samples = picks
            .into_iter()
            .map(|i| self.sample(self.patients[i], rng))
            .collect();
        Batch { samples }
    }

    /// Consecutive batches covering every patient once, in stored order.
    pub fn sweep<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<Batch<'a>> {
        self.patients
            .chunks(batch_size.max(1))
            .map(|chunk| Batch {
                samples: chunk.iter().map(|p| self.sample(p, rng)).collect(),
            })
            .collect()
    }
}

/// Samples one training batch; see [`BatchSource::compose`].
pub fn compose_batch<'a, R: Rng + ?Sized>(source: &BatchSource<'a>, batch_size: usize, rng: &mut R) -> Batch<'a> {
    source.compose(batch_size, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, GeneratorConfig, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus(text_fraction: f64) -> crate::corpus::CorpusManifest {
        let cfg = GeneratorConfig {
            n_train: 30,
            n_val: 0,
            n_test: 0,
            image_size: 8,
            text_fraction,
            ..GeneratorConfig::default()
        };
        generate_synthetic_corpus(&cfg, 3).unwrap()
    }

    #[test]
    fn no_text_means_no_text_pairs() {
        let m = corpus(0.0);
        let vocab = Vocabulary::fit(["color fundus"], 16);
        let names = ModalityNames::default();
        let src = BatchSource::new(m.split(Split::Train).map(|e| &e.patient), &vocab, &names).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let b = compose_batch(&src, 8, &mut rng);
            assert_eq!(b.len(), 8);
            assert_eq!(b.n_text_pairs(), 0);
            assert_eq!(b.n_img_pairs(), 8);
        }
    }

    #[test]
    fn single_modality_patients_have_no_pairs() {
        let mut m = corpus(1.0);
        for e in &mut m.entries {
            e.patient.images.truncate(1);
        }
        let vocab = Vocabulary::fit(["x"], 16);
        let names = ModalityNames::default();
        let src = BatchSource::new(m.entries.iter().map(|e| &e.patient), &vocab, &names).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = compose_batch(&src, 10, &mut rng);
        assert_eq!(b.n_img_pairs(), 0);
        assert_eq!(b.n_text_pairs(), 10);
    }

    #[test]
    fn seeded_batches_repeat() {
        let m = corpus(0.5);
        let vocab = Vocabulary::fit(["x"], 16);
        let names = ModalityNames::default();
        let src = BatchSource::new(m.entries.iter().map(|e| &e.patient), &vocab, &names).unwrap();
        let ids = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..4)
                .flat_map(|_| {
                    compose_batch(&src, 6, &mut rng)
                        .samples
                        .iter()
                        .map(|s| (s.anchor.image_id.clone(), s.partner.map(|p| p.image_id.clone())))
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(9), ids(9));
        assert_ne!(ids(9), ids(10));
    }

    #[test]
    fn partner_has_other_modality_and_same_patient() {
        let m = corpus(0.5);
        let vocab = Vocabulary::fit(["x"], 16);
        let names = ModalityNames::default();
        let src = BatchSource::new(m.entries.iter().map(|e| &e.patient), &vocab, &names).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = compose_batch(&src, 30, &mut rng);
        let mut seen: Vec<&str> = b.patient_ids();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 30, "patients drawn without replacement");
        for s in &b.samples {
            let p = s.partner.unwrap();
            assert_ne!(p.modality, s.anchor.modality);
            assert_eq!(p.patient_id, s.anchor.patient_id);
        }
    }
}
