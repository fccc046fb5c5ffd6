use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mclab::model::{ClipMae, ModelConfig};
use mclab::text::Vocabulary;
use mclab::training::{
    encoder_digest, fewshot_sample, finetune, Classifier, FinetuneConfig, FinetuneMode, LabeledItem, LabeledSet,
};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        enc_dim: 16,
        enc_depth: 1,
        enc_heads: 2,
        dec_dim: 8,
        dec_depth: 1,
        dec_heads: 2,
        text_dim: 16,
        text_depth: 1,
        text_heads: 2,
        proj_dim: 8,
        ..ModelConfig::default()
    }
}

/// `per_class[c]` items of class `c`, each image a flat intensity level
/// that identifies its class plus noise.
fn labeled(per_class: &[usize], seed: u64) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = per_class.len();
    let len = tiny_model().image_size.pow(2) * tiny_model().channels;
    let mut items = Vec::new();
    for (c, &n) in per_class.iter().enumerate() {
        for i in 0..n {
            let level = (c as f32 + 0.5) / k as f32;
            let pixels = (0..len).map(|_| (level + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)).collect();
            let mut targets = vec![false; k];
            targets[c] = true;
            items.push(LabeledItem {
                id: format!("c{c}-{i}"),
                pixels,
                targets,
            });
        }
    }
    LabeledSet {
        class_names: (0..k).map(|c| format!("class{c}")).collect(),
        items,
    }
}

fn short_config() -> FinetuneConfig {
    FinetuneConfig {
        total_epochs: Some(3),
        freeze_epochs: 1,
        warmup_epochs: 1,
        batch_size: Some(4),
        ..FinetuneConfig::default()
    }
}

fn vocab() -> Vocabulary {
    Vocabulary::fit(["a retinal image", "an optical scan"], 12)
}

fn model() -> ClipMae {
    ClipMae::new(tiny_model(), vocab().len(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

#[test]
fn fewshot_sample_takes_n_per_class() {
    let set = labeled(&[5, 5, 5, 5], 0);
    let one = fewshot_sample(&set, 1, 9).unwrap();
    assert_eq!(one.set.len(), 4);
    assert!(one.clamped.is_empty());
    assert!(one.set.missing_classes().is_empty());
    assert_eq!(fewshot_sample(&set, 1, 9).unwrap().set, one.set);
}

#[test]
fn fewshot_sample_clamps_small_classes() {
    let set = labeled(&[2, 6, 6], 0);
    let few = fewshot_sample(&set, 4, 1).unwrap();
    assert_eq!(few.set.len(), 2 + 4 + 4);
    assert_eq!(few.clamped, vec![("class0".to_string(), 2)]);
    assert!(fewshot_sample(&set, 0, 1).is_err());
}

#[test]
fn fewshot_sample_rejects_empty_class() {
    let mut set = labeled(&[3, 3], 0);
    set.class_names.push("class2".into());
    for item in &mut set.items {
        item.targets.push(false);
    }
    assert!(fewshot_sample(&set, 1, 0).is_err());
}

#[test]
fn finetune_rejects_missing_training_class() {
    let mut set = labeled(&[4, 4], 0);
    set.class_names.push("class2".into());
    for item in &mut set.items {
        item.targets.push(false);
    }
    assert!(finetune(&model(), &set, None, &short_config()).is_err());
}

#[test]
fn single_label_predictions_are_distributions() {
    let train = labeled(&[4, 4, 4], 1);
    let val = labeled(&[2, 2, 2], 2);
    let out = finetune(&model(), &train, Some(&val), &short_config()).unwrap();
    assert_eq!(out.history.len(), 3);
    assert_eq!(out.lrs.len(), 3 * 3);
    let images: Vec<&[f32]> = val.items.iter().map(|i| i.pixels.as_slice()).collect();
    for row in out.classifier.predict(&images).unwrap() {
        assert_eq!(row.len(), 3);
        assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn multi_label_predictions_are_independent_probabilities() {
    let train = labeled(&[3, 3], 1);
    let cfg = FinetuneConfig {
        mode: FinetuneMode::MultiLabel,
        ..short_config()
    };
    let out = finetune(&model(), &train, None, &cfg).unwrap();
    let images: Vec<&[f32]> = train.items.iter().map(|i| i.pixels.as_slice()).collect();
    for row in out.classifier.predict(&images).unwrap() {
        assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn frozen_epochs_keep_the_encoder() {
    let m = model();
    let before = encoder_digest(&m.params);
    let cfg = FinetuneConfig {
        freeze_epochs: 2,
        ..short_config()
    };
    let out = finetune(&m, &labeled(&[4, 4], 1), None, &cfg).unwrap();
    // Digests are taken at the start of each epoch.
    assert!(out.history.iter().all(|h| h.encoder_digest == before));
    assert!(out.history[..2].iter().all(|h| h.frozen));
    assert!(!out.history[2].frozen);
    assert_ne!(out.final_digest, before);
}

#[test]
fn classifier_round_trips_through_disk() {
    let train = labeled(&[4, 4], 1);
    let out = finetune(&model(), &train, None, &short_config()).unwrap();
    let vocab = vocab();
    let dir = tempfile::tempdir().unwrap();
    out.classifier.save(&vocab, dir.path()).unwrap();
    let (back, vocab_back) = Classifier::load(dir.path()).unwrap();
    assert_eq!(vocab_back, vocab);
    assert_eq!(back.class_names, out.classifier.class_names);
    assert_eq!(back.mode, out.classifier.mode);
    let images: Vec<&[f32]> = train.items.iter().map(|i| i.pixels.as_slice()).collect();
    assert_eq!(back.predict(&images).unwrap(), out.classifier.predict(&images).unwrap());
    let backbone = back.backbone().unwrap();
    assert_eq!(encoder_digest(&backbone.params), out.final_digest);
}
