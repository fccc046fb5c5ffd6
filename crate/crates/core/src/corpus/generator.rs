use std::f32::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CorpusEntry, CorpusManifest, ImageRecord, Modality, PatientRecord, Pixels, Split};
use crate::error::{Error, Result};
use crate::text::{extract_keywords, KeywordDictionary};

/// A latent disease class and the report phrasings used for it.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticClass {
    pub name: &'static str,
    pub phrases: &'static [&'static str],
}

const CATALOGUE: [SyntheticClass; 8] = [
    SyntheticClass {
        name: "normal",
        phrases: &["normal fundus", "no significant abnormality"],
    },
    SyntheticClass {
        name: "mild DR",
        phrases: &["mild diabetic retinopathy", "mild nonproliferative diabetic retinopathy"],
    },
    SyntheticClass {
        name: "glaucoma",
        phrases: &["glaucoma", "glaucomatous optic disc"],
    },
    SyntheticClass {
        name: "dry AMD",
        phrases: &["dry age-related macular degeneration", "atrophic macular degeneration"],
    },
    SyntheticClass {
        name: "severe DR",
        phrases: &["severe diabetic retinopathy", "severe non-proliferative diabetic retinopathy"],
    },
    SyntheticClass {
        name: "wet AMD",
        phrases: &["wet age-related macular degeneration", "neovascular macular degeneration"],
    },
    SyntheticClass {
        name: "RVO",
        phrases: &["retinal vein occlusion"],
    },
    SyntheticClass {
        name: "choroidal melanoma",
        phrases: &["choroidal melanoma"],
    },
];

const TEMPLATES: [&str; 4] = [
    "Findings: {} in the right eye.",
    "{} noted on examination.",
    "Impression: {}. Follow up advised.",
    "Left eye shows {}.",
];

/// The latent classes available to the generator, in class-index order.
pub fn synthetic_class_catalogue() -> &'static [SyntheticClass] {
    &CATALOGUE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_latent_classes: usize,
    pub modalities: Vec<String>,
    pub images_per_patient_per_modality: usize,
    pub text_fraction: f64,
    pub image_size: usize,
    pub channels: usize,
    /// Per-pixel Gaussian noise standard deviation.
    pub noise_std: f32,
    /// Maximum per-patient translation of the class pattern, in pixels.
    pub jitter: f32,
    /// Strength of the patient-specific lesion shared across modalities.
    pub lesion_strength: f32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_train: 1600,
            n_val: 200,
            n_test: 400,
            n_latent_classes: 4,
            modalities: vec!["CFP".into(), "OCT".into()],
            images_per_patient_per_modality: 1,
            text_fraction: 0.25,
            image_size: 64,
            channels: 3,
            noise_std: 0.1,
            jitter: 3.0,
            lesion_strength: 0.25,
        }
    }
}

impl GeneratorConfig {
    pub fn n_patients(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn modality_set(&self) -> Result<Vec<Modality>> {
        self.modalities.iter().map(|m| Modality::new(m)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_latent_classes < 2 || self.n_latent_classes > CATALOGUE.len() {
            return err(format!(
                "n_latent_classes must be in [2, {}], got {}",
                CATALOGUE.len(),
                self.n_latent_classes
            ));
        }
        if self.modalities.len() < 2 {
            return err(format!(
                "the generator needs at least 2 modalities, got {}",
                self.modalities.len()
            ));
        }
        let set = self.modality_set().map_err(|e| Error::Config(e.to_string()))?;
        for (i, m) in set.iter().enumerate() {
            if set[..i].contains(m) {
                return err(format!("modality {m} listed twice"));
            }
        }
        if !(0.0..=1.0).contains(&self.text_fraction) {
            return err(format!("text_fraction must be in [0, 1], got {}", self.text_fraction));
        }
        if self.images_per_patient_per_modality == 0 {
            return err("images_per_patient_per_modality must be at least 1".into());
        }
        if self.image_size < 8 {
            return err(format!("image_size must be at least 8, got {}", self.image_size));
        }
        if self.channels != 1 && self.channels != 3 {
            return err(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.n_patients() == 0 {
            return err("corpus has no patients".into());
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("jitter", self.jitter),
            ("lesion_strength", self.lesion_strength),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Smooth class pattern: two oriented gratings and two Gaussian blobs mixed
/// into the output channels.
struct ClassPattern {
    gratings: [(f32, f32, f32); 2],
    blobs: [(f32, f32, f32, f32); 2],
    mix: Vec<[f32; 4]>,
}

impl ClassPattern {
    fn sample(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let mut grating = || {
            let freq = rng.random_range(1.0..3.0f32);
            let angle = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            (freq * angle.cos(), freq * angle.sin(), phase)
        };
        let gratings = [grating(), grating()];
        let mut blob = || {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (
                rng.random_range(0.25..0.75f32),
                rng.random_range(0.25..0.75f32),
                rng.random_range(0.08..0.18f32),
                sign,
            )
        };
        let blobs = [blob(), blob()];
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let mix = (0..channels)
            .map(|_| {
                let mut row = [0.0f32; 4];
                for v in &mut row {
                    *v = normal.sample(rng);
                }
                let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-3);
                row.map(|v| v / norm)
            })
            .collect();
        Self { gratings, blobs, mix }
    }

    /// Features at unit coordinates `(u, v)`.
    fn features(&self, u: f32, v: f32) -> [f32; 4] {
        let g = |(fx, fy, ph): (f32, f32, f32)| (2.0 * PI * (fx * u + fy * v) + ph).sin();
        let b = |(cx, cy, s, sign): (f32, f32, f32, f32)| {
            let d2 = (u - cx).powi(2) + (v - cy).powi(2);
            sign * 2.0 * (-d2 / (2.0 * s * s)).exp()
        };
        [g(self.gratings[0]), g(self.gratings[1]), b(self.blobs[0]), b(self.blobs[1])]
    }
}

/// Per-patient variation shared by all of the patient's images.
struct PatientLook {
    shift: (f32, f32),
    amplitude: f32,
    lesion: (f32, f32, f32, f32),
}

/// Fixed rendering of modality index `m`: channel permutation, mirror,
/// blur, contrast curve and optional inversion.
struct ModalityTransform {
    perm: Vec<usize>,
    mirror: bool,
    blur: usize,
    gamma: f32,
    invert: bool,
}

impl ModalityTransform {
    fn for_index(m: usize, channels: usize) -> Self {
        let mut perm: Vec<usize> = (0..channels).map(|c| (c + m) % channels).collect();
        if m % 2 == 1 {
            perm.reverse();
        }
        const GAMMAS: [f32; 5] = [1.0, 0.6, 1.7, 0.8, 1.4];
        Self {
            perm,
            mirror: m % 2 == 1,
            blur: m % 3,
            gamma: GAMMAS[m % GAMMAS.len()],
            invert: m % 4 == 1 || m % 4 == 2,
        }
    }
}

/// Generates a corpus whose patients carry a latent class rendered through
/// per-modality transforms of a class pattern. Fully determined by
/// `(cfg, seed)`.
pub fn generate_synthetic_corpus(cfg: &GeneratorConfig, seed: u64) -> Result<CorpusManifest> {
    cfg.validate()?;
    let modality_set = cfg.modality_set()?;
    let dict = KeywordDictionary::starter();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patterns: Vec<ClassPattern> = (0..cfg.n_latent_classes)
        .map(|_| ClassPattern::sample(&mut rng, cfg.channels))
        .collect();
    let transforms: Vec<ModalityTransform> = (0..modality_set.len())
        .map(|m| ModalityTransform::for_index(m, cfg.channels))
        .collect();

    let splits: Vec<(Split, usize)> = vec![
        (Split::Train, cfg.n_train),
        (Split::Val, cfg.n_val),
        (Split::Test, cfg.n_test),
    ];
    let mut entries = Vec::with_capacity(cfg.n_patients());
    let mut next_id = 0usize;
    for (split, n) in splits {
        let n_text = (cfg.text_fraction * n as f64).round() as usize;
        let mut with_text = vec![false; n];
        with_text[..n_text].iter_mut().for_each(|t| *t = true);
        with_text.shuffle(&mut rng);
        for has_text in with_text {
            next_id += 1;
            let patient_id = format!("P{next_id:05}");
            let class = rng.random_range(0..cfg.n_latent_classes);
            let look = PatientLook {
                shift: (
                    rng.random_range(-cfg.jitter..=cfg.jitter),
                    rng.random_range(-cfg.jitter..=cfg.jitter),
                ),
                amplitude: rng.random_range(0.8..1.2),
                lesion: (
                    rng.random_range(0.15..0.85),
                    rng.random_range(0.15..0.85),
                    rng.random_range(0.04..0.09),
                    if rng.random_bool(0.5) { cfg.lesion_strength } else { -cfg.lesion_strength },
                ),
            };
            let base = render_base(&patterns[class], &look, cfg.image_size, cfg.channels);
            let mut images = Vec::new();
            for (m, modality) in modality_set.iter().enumerate() {
                for k in 0..cfg.images_per_patient_per_modality {
                    let values = apply_modality(&base, &transforms[m], cfg, &mut rng);
                    images.push(ImageRecord {
                        image_id: format!("{patient_id}-{modality}-{k}"),
                        patient_id: patient_id.clone(),
                        modality: modality.clone(),
                        pixels: Pixels::from_unit(cfg.image_size, cfg.image_size, cfg.channels, &values)?,
                    });
                }
            }
            let keywords = if has_text {
                let entry = &CATALOGUE[class];
                let phrase = entry.phrases[rng.random_range(0..entry.phrases.len())];
                let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
                let report = template.replacen("{}", phrase, 1);
                let kw = extract_keywords(&report, &dict);
                if kw.is_empty() {
                    return Err(Error::Data(format!("report {report:?} yields no keywords")));
                }
                Some(kw)
            } else {
                None
            };
            entries.push(CorpusEntry {
                split,
                patient: PatientRecord {
                    patient_id,
                    images,
                    keywords,
                },
                latent_class: Some(class),
            });
        }
    }
    let manifest = CorpusManifest {
        modality_set,
        generator_seed: Some(seed),
        entries,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Class pattern plus patient variation, `size x size x channels`,
/// centred on 0.5.
fn render_base(p: &ClassPattern, look: &PatientLook, size: usize, channels: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; size * size * channels];
    let s = size as f32;
    let (lx, ly, lr, ls) = look.lesion;
    for y in 0..size {
        for x in 0..size {
            let u = (x as f32 + 0.5 - look.shift.0) / s;
            let v = (y as f32 + 0.5 - look.shift.1) / s;
            let f = p.features(u, v);
            let (pu, pv) = ((x as f32 + 0.5) / s, (y as f32 + 0.5) / s);
            let lesion = ls * (-((pu - lx).powi(2) + (pv - ly).powi(2)) / (2.0 * lr * lr)).exp();
            for c in 0..channels {
                let mixed: f32 = p.mix[c].iter().zip(f).map(|(w, f)| w * f).sum();
                out[(y * size + x) * channels + c] = 0.5 + 0.2 * look.amplitude * mixed + lesion;
            }
        }
    }
    out
}

fn apply_modality(base: &[f32], t: &ModalityTransform, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (size, channels) = (cfg.image_size, cfg.channels);
    let mut img = vec![0.0f32; base.len()];
    for y in 0..size {
        for x in 0..size {
            let sx = if t.mirror { size - 1 - x } else { x };
            for c in 0..channels {
                img[(y * size + x) * channels + c] = base[(y * size + sx) * channels + t.perm[c]];
            }
        }
    }
    if t.blur > 0 {
        img = box_blur(&img, size, channels, t.blur);
    }
    let noise = Normal::new(0.0f32, cfg.noise_std.max(f32::MIN_POSITIVE)).unwrap();
    for v in &mut img {
        let mut p = v.clamp(0.0, 1.0).powf(t.gamma);
        if t.invert {
            p = 1.0 - p;
        }
        if cfg.noise_std > 0.0 {
            p += noise.sample(rng);
        }
        *v = p.clamp(0.0, 1.0);
    }
    img
}

/// Separable box blur with edge clamping.
fn box_blur(img: &[f32], size: usize, channels: usize, radius: usize) -> Vec<f32> {
    let r = radius as isize;
    let n = size as isize;
    let at = |buf: &[f32], x: isize, y: isize, c: usize| {
        let x = x.clamp(0, n - 1) as usize;
        let y = y.clamp(0, n - 1) as usize;
        buf[(y * size + x) * channels + c]
    };
    let w = (2 * r + 1) as f32;
    let mut tmp = vec![0.0f32; img.len()];
    for y in 0..n {
        for x in 0..n {
            for c in 0..channels {
                let s: f32 = (-r..=r).map(|d| at(img, x + d, y, c)).sum();
                tmp[(y as usize * size + x as usize) * channels + c] = s / w;
            }
        }
    }
    let mut out = vec![0.0f32; img.len()];
    for y in 0..n {
        for x in 0..n {
            for c in 0..channels {
                let s: f32 = (-r..=r).map(|d| at(&tmp, x, y + d, c)).sum();
                out[(y as usize * size + x as usize) * channels + c] = s / w;
            }
        }
    }
    out
}
