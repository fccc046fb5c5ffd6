use std::collections::BTreeMap;

use crate::corpus::Modality;
use crate::error::{Error, Result};

/// Long, human-readable modality names used in prompts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalityNames(BTreeMap<String, String>);

impl Default for ModalityNames {
    fn default() -> Self {
        let mut m = BTreeMap::new();
        for (tag, long) in [
            ("CFP", "color fundus"),
            ("FFA", "fundus fluorescein angiography"),
            ("ICGA", "indocyanine green angiography"),
            ("FAF", "fundus autofluorescence"),
        ] {
            m.insert(tag.to_string(), long.to_string());
        }
        Self(m)
    }
}

impl ModalityNames {
    pub fn empty() -> Self {
        Self(BTreeMap::new())
    }

    pub fn register(&mut self, tag: &str, long_name: &str) {
        self.0.insert(tag.to_string(), long_name.to_lowercase());
    }

    /// Registered long name, or the tag lowercased when none is known.
    pub fn long_name(&self, modality: &Modality) -> String {
        self.0
            .get(modality.tag())
            .cloned()
            .unwrap_or_else(|| modality.tag().to_lowercase())
    }

    /// `"<modality long name>, <class name>"`.
    pub fn prompt(&self, modality: &Modality, class_name: &str) -> Result<String> {
        if class_name.trim().is_empty() {
            return Err(Error::Config("prompt class name is empty".into()));
        }
        Ok(format!("{}, {class_name}", self.long_name(modality)))
    }
}

/// Zero-shot prompt with the default modality names, e.g.
/// `"color fundus, diabetic retinopathy"`.
pub fn build_prompt(modality: &Modality, class_name: &str) -> Result<String> {
    ModalityNames::default().prompt(modality, class_name)
}
