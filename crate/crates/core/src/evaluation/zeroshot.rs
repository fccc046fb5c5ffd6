use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::Embedding;

#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShotPrediction {
    /// Cosine similarity to each class prompt, in input order.
    pub scores: Vec<f64>,
    pub predicted: usize,
}

/// Index of the largest score; ties go to the earliest entry.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn check_prompts(prompts: &[(String, Embedding)]) -> Result<()> {
    if prompts.len() < 2 {
        return Err(Error::Config(format!(
            "zero-shot classification needs at least 2 classes, got {}",
            prompts.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for (name, _) in prompts {
        if !seen.insert(name.as_str()) {
            return Err(Error::Config(format!("duplicate class name {name:?}")));
        }
    }
    let dim = prompts[0].1.dim();
    if let Some((name, e)) = prompts.iter().find(|(_, e)| e.dim() != dim) {
        return Err(Error::dimension(format!("prompt embedding of {name}"), dim, e.dim()));
    }
    Ok(())
}

/// Scores an image against one prompt embedding per class and predicts the
/// most similar class.
pub fn zero_shot_classify(image: &Embedding, prompts: &[(String, Embedding)]) -> Result<ZeroShotPrediction> {
    check_prompts(prompts)?;
    if image.dim() != prompts[0].1.dim() {
        return Err(Error::dimension("image embedding", prompts[0].1.dim(), image.dim()));
    }
    let scores: Vec<f64> = prompts.iter().map(|(_, p)| image.dot(p)).collect();
    let predicted = argmax_first(&scores);
    Ok(ZeroShotPrediction { scores, predicted })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f32]) -> Embedding {
        Embedding::normalized(v).unwrap()
    }

    #[test]
    fn identical_prompt_wins() {
        let prompts = vec![("a".to_string(), e(&[1.0, 0.0, 0.0])), ("b".to_string(), e(&[0.0, 1.0, 0.0]))];
        let p = zero_shot_classify(&e(&[1.0, 0.0, 0.0]), &prompts).unwrap();
        assert_eq!(p.scores, vec![1.0, 0.0]);
        assert_eq!(p.predicted, 0);
    }

    #[test]
    fn equidistant_image_picks_first_listed() {
        let prompts = vec![("a".to_string(), e(&[1.0, 0.0])), ("b".to_string(), e(&[0.0, 1.0]))];
        let p = zero_shot_classify(&e(&[1.0, 1.0]), &prompts).unwrap();
        let cos45 = std::f64::consts::FRAC_1_SQRT_2;
        assert!((p.scores[0] - cos45).abs() < 1e-6);
        assert_eq!(p.scores[0], p.scores[1]);
        assert_eq!(p.predicted, 0);
        let swapped = vec![prompts[1].clone(), prompts[0].clone()];
        assert_eq!(zero_shot_classify(&e(&[1.0, 1.0]), &swapped).unwrap().predicted, 0);
    }

    #[test]
    fn duplicate_or_single_class_is_rejected() {
        let dup = vec![("a".to_string(), e(&[1.0, 0.0])), ("a".to_string(), e(&[0.0, 1.0]))];
        assert!(matches!(zero_shot_classify(&e(&[1.0, 0.0]), &dup), Err(Error::Config(_))));
        let one = vec![("a".to_string(), e(&[1.0, 0.0]))];
        assert!(matches!(zero_shot_classify(&e(&[1.0, 0.0]), &one), Err(Error::Config(_))));
    }
}
