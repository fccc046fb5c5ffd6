//! Report text to keyword labels, zero-shot prompts, and tokenization.

mod keywords;
mod prompt;
mod vocab;

pub use keywords::{extract_keywords, KeywordDictionary, KeywordSet, Pattern};
pub use prompt::{build_prompt, ModalityNames};
pub use vocab::{words, TokenSequence, Vocabulary, END, PAD, START, UNKNOWN};
