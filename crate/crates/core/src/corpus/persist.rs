//! On-disk corpus layout: `manifest.jsonl` plus one lossless PNM raster per
//! image under `images/`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use super::{CorpusEntry, CorpusManifest, ImageRecord, Modality, PatientRecord, Pixels, Split};
use crate::error::{Error, Result};
use crate::text::KeywordSet;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    modality_set: Vec<Modality>,
    generator_seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageLine {
    image_id: String,
    modality: Modality,
    relative_path: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    patient_id: String,
    split: Split,
    images: Vec<ImageLine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keywords: Option<KeywordSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    latent_class: Option<usize>,
}

fn image_path(image_id: &str, channels: usize) -> String {
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    format!("{IMAGE_DIR}/{image_id}.{ext}")
}

/// Writes the manifest and image files under `dir`, creating it if needed.
pub fn persist_corpus(manifest: &CorpusManifest, dir: &Path) -> Result<()> {
    manifest.validate()?;
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    let mut out = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    let header = Header {
        format_version: FORMAT_VERSION,
        modality_set: manifest.modality_set.clone(),
        generator_seed: manifest.generator_seed,
    };
    writeln!(out, "{}", serde_json::to_string(&header).map_err(json_err)?)?;
    for e in &manifest.entries {
        let mut images = Vec::with_capacity(e.patient.images.len());
        for img in &e.patient.images {
            if img.image_id.contains(['/', '\\']) || img.image_id.starts_with('.') {
                return Err(Error::Validation(format!(
                    "image_id {:?} cannot be used as a file name",
                    img.image_id
                )));
            }
            let rel = image_path(&img.image_id, img.pixels.shape().2);
            write_pnm(&dir.join(&rel), &img.pixels)?;
            images.push(ImageLine {
                image_id: img.image_id.clone(),
                modality: img.modality.clone(),
                relative_path: rel,
            });
        }
        let line = RecordLine {
            patient_id: e.patient.patient_id.clone(),
            split: e.split,
            images,
            keywords: e.patient.keywords.clone(),
            latent_class: e.latent_class,
        };
        writeln!(out, "{}", serde_json::to_string(&line).map_err(json_err)?)?;
    }
    out.flush()?;
    Ok(())
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Format(e.to_string())
}

fn write_pnm(path: &Path, pixels: &Pixels) -> Result<()> {
    let (h, w, c) = pixels.shape();
    let (subtype, color) = if c == 1 {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    } else {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    };
    let file = BufWriter::new(fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(subtype)
        .write_image(pixels.bytes(), w as u32, h as u32, color)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn read_pnm(path: &Path, image_id: &str) -> Result<Pixels> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Integrity(format!("image {image_id}: cannot read {}: {e}", path.display()))
    })?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
        .map_err(|e| Error::Integrity(format!("image {image_id}: undecodable {}: {e}", path.display())))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        image::DynamicImage::ImageLuma8(buf) => Pixels::new(h, w, 1, buf.into_raw()),
        other => Pixels::new(h, w, 3, other.into_rgb8().into_raw()),
    }
}

/// Reads a corpus written by [`persist_corpus`] and validates it.
pub fn load_corpus(dir: &Path) -> Result<CorpusManifest> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Data(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: manifest_path.clone(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "empty manifest".into()))?;
    let header: Header = serde_json::from_str(first).map_err(|e| parse_err(1, format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "manifest format_version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let mut entries = Vec::new();
    for (n, line) in lines {
        let rec: RecordLine = serde_json::from_str(line).map_err(|e| parse_err(n + 1, e.to_string()))?;
        let mut images = Vec::with_capacity(rec.images.len());
        for img in rec.images {
            let pixels = read_pnm(&dir.join(&img.relative_path), &img.image_id)?;
            images.push(ImageRecord {
                image_id: img.image_id,
                patient_id: rec.patient_id.clone(),
                modality: img.modality,
                pixels,
            });
        }
        entries.push(CorpusEntry {
            split: rec.split,
            patient: PatientRecord {
                patient_id: rec.patient_id,
                images,
                keywords: rec.keywords,
            },
            latent_class: rec.latent_class,
        });
    }
    let manifest = CorpusManifest {
        modality_set: header.modality_set,
        generator_seed: header.generator_seed,
        entries,
    };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, GeneratorConfig};

    fn tiny() -> CorpusManifest {
        let cfg = GeneratorConfig {
            n_train: 4,
            n_val: 2,
            n_test: 2,
            image_size: 8,
            text_fraction: 0.5,
            ..GeneratorConfig::default()
        };
        generate_synthetic_corpus(&cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny();
        persist_corpus(&m, dir.path()).unwrap();
        assert_eq!(load_corpus(dir.path()).unwrap(), m);
    }

    #[test]
    fn grayscale_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig {
            n_train: 2,
            n_val: 0,
            n_test: 0,
            image_size: 8,
            channels: 1,
            ..GeneratorConfig::default()
        };
        let m = generate_synthetic_corpus(&cfg, 1).unwrap();
        persist_corpus(&m, dir.path()).unwrap();
        assert_eq!(load_corpus(dir.path()).unwrap(), m);
    }

    #[test]
    fn missing_image_is_an_integrity_error_naming_the_image() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny();
        persist_corpus(&m, dir.path()).unwrap();
        let victim = &m.entries[1].patient.images[0].image_id;
        fs::remove_file(dir.path().join(image_path(victim, 3))).unwrap();
        let err = load_corpus(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
        assert!(err.to_string().contains(victim.as_str()), "{err}");
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        persist_corpus(&tiny(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut text: Vec<String> = fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
        text[3] = "{not json".into();
        fs::write(&path, text.join("\n")).unwrap();
        match load_corpus(dir.path()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn patient_leaking_across_splits_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        persist_corpus(&tiny(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        // duplicate the first train patient as a test patient without images
        let mut rec: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
        rec["split"] = "test".into();
        rec["images"] = serde_json::Value::Array(vec![]);
        lines.push(rec.to_string());
        fs::write(&path, lines.join("\n")).unwrap();
        let err = load_corpus(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }
}
