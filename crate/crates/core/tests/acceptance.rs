//! Acceptance suite. Every test prints one `ACCEPTANCE [PASS|FAIL] <n>` line
//! to stderr and then asserts. The end-to-end and ablation criteria train
//! real models and take several minutes each.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mclab::corpus::{generate_synthetic_corpus, load_corpus, persist_corpus, CorpusManifest, GeneratorConfig, Split};
use mclab::evaluation::{
    binary_auroc, binary_average_precision, embed_images, evaluate_protocol, fewshot_runs, recall_at_k,
    retrieval_suite, zeroshot_on_downstream_test, EmbeddingStore, EvalConfig, EvalDataset,
    MetricReport, Protocol, RowMeta, Side,
};
use mclab::losses::{
    combined_loss, combined_objective, image_image_contrastive, image_text_contrastive, masked_reconstruction_loss,
    LossWeights, ObjectiveInputs, ReconTarget, TermValues,
};
use mclab::model::{Embedding, ModelConfig};
use mclab::training::{finetune, pretrain, read_step_log, Checkpoint, FinetuneConfig, PretrainConfig};

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr();
    let _ = writeln!(err, "ACCEPTANCE [{tag}] {n} {name}: {detail}");
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

const FD_STEP: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-4;
const INSTANCES: usize = 24;

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut a = Array2::zeros((n, d));
    for mut row in a.rows_mut() {
        row.mapv_inplace(|_| rng.random_range(-1.0f64..1.0));
        let norm = row.dot(&row).sqrt();
        let target = rng.random_range(0.3..0.9);
        row.mapv_inplace(|v| v / norm * target);
    }
    a
}

fn rel_err(a: &[f64], f: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(f).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nf = f.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nf);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

struct Instance {
    img: Array2<f64>,
    txt: Array2<f64>,
    pa: Array2<f64>,
    pb: Array2<f64>,
    rec: Array3<f64>,
    orig: Array3<f64>,
    mask: Array2<bool>,
    tau: f64,
}

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.random_range(2..=8);
    let m = rng.random_range(2..=8);
    let d = rng.random_range(2..=16);
    let b = rng.random_range(1..=4);
    let p = rng.random_range(2..=6);
    let len = rng.random_range(1..=5);
    let mut mask = Array2::from_shape_fn((b, p), |_| rng.random_bool(0.5));
    mask[[0, 0]] = true;
    Instance {
        img: random_rows(rng, n, d),
        txt: random_rows(rng, n, d),
        pa: random_rows(rng, m, d),
        pb: random_rows(rng, m, d),
        rec: Array3::from_shape_fn((b, p, len), |_| rng.random_range(-1.0..1.0)),
        orig: Array3::from_shape_fn((b, p, len), |_| rng.random_range(-1.0..1.0)),
        mask,
        tau: rng.random_range(0.25..1.0),
    }
}

fn objective_value(x: &Instance, w: &LossWeights) -> f64 {
    let inputs = ObjectiveInputs {
        img: Some(x.img.view()),
        txt: Some(x.txt.view()),
        pair_a: Some(x.pa.view()),
        pair_b: Some(x.pb.view()),
        reconstructed: x.rec.view(),
        original: x.orig.view(),
        mask: x.mask.view(),
        tau: x.tau,
    };
    combined_objective(&inputs, w, ReconTarget::MaskedOnly).unwrap().breakdown.total
}

/// Value of the single loss term selected by `w`, computed by the
/// value-only entry points rather than the gradient routine.
fn term_value(x: &Instance, w: &LossWeights) -> f64 {
    let mut v = 0.0;
    if w.img_text > 0.0 {
        v += w.img_text * image_text_contrastive(x.img.view(), x.txt.view(), x.tau).unwrap();
    }
    if w.img_img > 0.0 {
        v += w.img_img * image_image_contrastive(x.pa.view(), x.pb.view(), x.tau).unwrap();
    }
    if w.recon > 0.0 {
        v += w.recon * masked_reconstruction_loss(x.rec.view(), x.orig.view(), x.mask.view()).unwrap();
    }
    v
}

/// Worst relative error over the instance's input blocks.
fn gradient_error(x: &Instance, w: &LossWeights, value: fn(&Instance, &LossWeights) -> f64) -> f64 {
    let inputs = ObjectiveInputs {
        img: Some(x.img.view()),
        txt: Some(x.txt.view()),
        pair_a: Some(x.pa.view()),
        pair_b: Some(x.pb.view()),
        reconstructed: x.rec.view(),
        original: x.orig.view(),
        mask: x.mask.view(),
        tau: x.tau,
    };
    let g = combined_objective(&inputs, w, ReconTarget::MaskedOnly).unwrap();
    let zeros2 = |a: &Array2<f64>| Array2::<f64>::zeros(a.dim());
    let analytic: [Vec<f64>; 5] = [
        g.img.clone().unwrap_or_else(|| zeros2(&x.img)).into_iter().collect(),
        g.txt.clone().unwrap_or_else(|| zeros2(&x.txt)).into_iter().collect(),
        g.pair_a.clone().unwrap_or_else(|| zeros2(&x.pa)).into_iter().collect(),
        g.pair_b.clone().unwrap_or_else(|| zeros2(&x.pb)).into_iter().collect(),
        g.reconstructed.iter().copied().collect(),
    ];
    let mut worst: f64 = 0.0;
    for (block, a) in analytic.iter().enumerate() {
        let mut fd = Vec::with_capacity(a.len());
        for k in 0..a.len() {
            let mut plus = clone_instance(x);
            let mut minus = clone_instance(x);
            *entry(&mut plus, block, k) += FD_STEP;
            *entry(&mut minus, block, k) -= FD_STEP;
            fd.push((value(&plus, w) - value(&minus, w)) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(a, &fd));
    }
    let mut plus = clone_instance(x);
    let mut minus = clone_instance(x);
    plus.tau += FD_STEP * x.tau;
    minus.tau -= FD_STEP * x.tau;
    let fd_tau = (value(&plus, w) - value(&minus, w)) / (2.0 * FD_STEP * x.tau);
    worst.max(rel_err(&[g.tau], &[fd_tau]))
}

fn clone_instance(x: &Instance) -> Instance {
    Instance {
        img: x.img.clone(),
        txt: x.txt.clone(),
        pa: x.pa.clone(),
        pb: x.pb.clone(),
        rec: x.rec.clone(),
        orig: x.orig.clone(),
        mask: x.mask.clone(),
        tau: x.tau,
    }
}

fn entry(x: &mut Instance, block: usize, k: usize) -> &mut f64 {
    match block {
        0 => x.img.iter_mut().nth(k).unwrap(),
        1 => x.txt.iter_mut().nth(k).unwrap(),
        2 => x.pa.iter_mut().nth(k).unwrap(),
        3 => x.pb.iter_mut().nth(k).unwrap(),
        _ => x.rec.iter_mut().nth(k).unwrap(),
    }
}

#[test]
fn criterion_1_gradient_suite() {
    let terms = [
        ("img-text", LossWeights::new(1.0, 0.0, 0.0).unwrap(), term_value as fn(&Instance, &LossWeights) -> f64),
        ("img-img", LossWeights::new(0.0, 1.0, 0.0).unwrap(), term_value),
        ("recon", LossWeights::new(0.0, 0.0, 1.0).unwrap(), term_value),
        ("combined", LossWeights::default(), objective_value),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut details = Vec::new();
    let mut pass = true;
    for (name, w, value) in terms {
        let mut worst: f64 = 0.0;
        for _ in 0..INSTANCES {
            let x = instance(&mut rng);
            worst = worst.max(gradient_error(&x, &w, value));
        }
        pass &= worst <= GRAD_TOL;
        details.push(format!("{name} max rel err {worst:.2e}"));
    }
    report(
        1,
        "gradient suite",
        pass,
        &format!("{INSTANCES} instances per term, tol {GRAD_TOL:e}; {}", details.join(", ")),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 2. Closed forms

#[test]
fn criterion_2_closed_forms() {
    let mut worst_ln_n: f64 = 0.0;
    for n in [2usize, 4, 8] {
        let d = 5;
        let x = Array2::from_elem((n, d), 1.0 / (d as f64).sqrt());
        for tau in [0.07, 1.0] {
            let l = image_text_contrastive(x.view(), x.view(), tau).unwrap();
            worst_ln_n = worst_ln_n.max((l - (n as f64).ln()).abs());
            let l = image_image_contrastive(x.view(), x.view(), tau).unwrap();
            worst_ln_n = worst_ln_n.max((l - (n as f64).ln()).abs());
        }
    }
    let eye = Array2::from_shape_fn((2, 2), |(i, j)| if i == j { 1.0 } else { 0.0 });
    let ortho = image_text_contrastive(eye.view(), eye.view(), 1.0).unwrap();
    let ortho_err = (ortho - (1.0 + (-1f64).exp()).ln()).abs();

    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_sum: f64 = 0.0;
    for _ in 0..100 {
        let (a, b, c): (f64, f64, f64) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), rng.random());
        let t = TermValues {
            img_text: Some((a, 4)),
            img_img: Some((b, 4)),
            recon: Some((c, 10)),
        };
        let total = combined_loss(&t, &w).unwrap().total;
        worst_sum = worst_sum.max((total - (0.75 * a + 0.75 * b + 1.0 * c)).abs());
    }
    let pass = worst_ln_n <= 1e-9 && ortho_err <= 1e-9 && worst_sum <= 1e-12;
    report(
        2,
        "closed-form loss values",
        pass,
        &format!("ln N err {worst_ln_n:.1e}, ln(1+e^-1) err {ortho_err:.1e}, weighted sum err {worst_sum:.1e}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 3. Metric oracles

fn auroc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut ties, mut p, mut n) = (0u64, 0u64, 0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            p += 1;
        } else {
            n += 1;
        }
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                wins += 1;
            } else if scores[i] == scores[j] {
                ties += 1;
            }
        }
    }
    (2 * wins + ties) as f64 / 2.0 / (p as f64 * n as f64)
}

fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    // Position of item i when sorting by descending score, ties by index.
    let rank = |i: usize| {
        1 + (0..scores.len())
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
    };
    let mut pos_ranks: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).map(rank).collect();
    pos_ranks.sort_unstable();
    let mut sum = 0.0;
    for (hits, r) in pos_ranks.iter().enumerate() {
        sum += (hits + 1) as f64 / *r as f64;
    }
    sum / pos_ranks.len() as f64
}

fn random_labeled_scores(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let len = rng.random_range(2..80);
    let discrete = rng.random_bool(0.5);
    loop {
        let labels: Vec<bool> = (0..len).map(|_| rng.random_bool(0.3)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            let scores = (0..len)
                .map(|_| if discrete { rng.random_range(0..5) as f64 / 4.0 } else { rng.random() })
                .collect();
            return (scores, labels);
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

/// Recall@K by sorting every candidate and scanning for the first correct one.
fn recall_oracle(
    queries: &EmbeddingStore,
    targets: &EmbeddingStore,
    truth: &BTreeMap<String, BTreeSet<String>>,
    ks: &[usize],
) -> Vec<f64> {
    let mut hits = vec![0usize; ks.len()];
    for q in 0..queries.len() {
        let qid = queries.id(q);
        let mut cands: Vec<(f64, String)> = (0..targets.len())
            .filter(|&t| targets.id(t) != qid)
            .map(|t| (dot(queries.row(q), targets.row(t)), targets.id(t).to_string()))
            .collect();
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        let first = cands.iter().position(|(_, id)| truth[qid].contains(id)).unwrap();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first < k.min(cands.len()) {
                *h += 1;
            }
        }
    }
    hits.iter().map(|&h| h as f64 / queries.len() as f64).collect()
}

fn random_store(rng: &mut ChaCha8Rng, prefix: &str, n: usize, d: usize, discrete: bool) -> EmbeddingStore {
    let mut s = EmbeddingStore::new(Side::Image, d);
    for i in 0..n {
        let v: Vec<f32> = (0..d)
            .map(|_| if discrete { rng.random_range(-1..=1) as f32 } else { rng.random_range(-1.0..1.0) })
            .collect();
        let v = if v.iter().all(|x| *x == 0.0) { vec![1.0; d] } else { v };
        s.push(RowMeta::new(format!("{prefix}{i:03}")), &Embedding::normalized(&v).unwrap()).unwrap();
    }
    s
}

#[test]
fn criterion_3_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut auroc_ok = 0;
    let mut ap_ok = 0;
    for _ in 0..200 {
        let (s, l) = random_labeled_scores(&mut rng);
        if binary_auroc(&s, &l).unwrap() == auroc_oracle(&s, &l) {
            auroc_ok += 1;
        }
    }
    for _ in 0..200 {
        let (s, l) = random_labeled_scores(&mut rng);
        if binary_average_precision(&s, &l).unwrap() == ap_oracle(&s, &l) {
            ap_ok += 1;
        }
    }
    let ks = [1usize, 5, 10];
    let mut recall_ok = 0;
    let mut identity_ok = 0;
    let mut monotone_ok = 0;
    for case in 0..100 {
        let d = rng.random_range(2..8);
        let discrete = case % 2 == 0;
        let nq = rng.random_range(2..15);
        let nt = rng.random_range(2..25);
        let queries = random_store(&mut rng, "q", nq, d, discrete);
        // Every third case retrieves within one store so self-exclusion is exercised.
        let targets = if case % 3 == 0 { queries.clone() } else { random_store(&mut rng, "t", nt, d, discrete) };
        let mut truth = BTreeMap::new();
        for q in 0..queries.len() {
            let qid = queries.id(q).to_string();
            let candidates: Vec<String> = (0..targets.len())
                .map(|t| targets.id(t).to_string())
                .filter(|t| *t != qid)
                .collect();
            let mut set = BTreeSet::new();
            set.insert(candidates[rng.random_range(0..candidates.len())].clone());
            for c in &candidates {
                if rng.random_bool(0.15) {
                    set.insert(c.clone());
                }
            }
            truth.insert(qid, set);
        }
        let got = recall_at_k(&queries, &targets, &truth, &ks).unwrap();
        if got.recalls == recall_oracle(&queries, &targets, &truth, &ks) {
            recall_ok += 1;
        }
        if got.mean_recall == got.recalls.iter().sum::<f64>() / ks.len() as f64 {
            identity_ok += 1;
        }
        if got.recalls.windows(2).all(|w| w[0] <= w[1]) {
            monotone_ok += 1;
        }
    }
    let pass = auroc_ok == 200 && ap_ok == 200 && recall_ok == 100 && identity_ok == recall_ok && monotone_ok == recall_ok;
    report(
        3,
        "metric-oracle equivalence",
        pass,
        &format!(
            "AUROC {auroc_ok}/200, AP {ap_ok}/200, Recall@K {recall_ok}/100, mean identity {identity_ok}, K-monotone {monotone_ok}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Shared small-scale setup for criteria 4 and 7

fn tiny_corpus() -> CorpusManifest {
    let gc = GeneratorConfig {
        n_train: 48,
        n_val: 8,
        n_test: 40,
        image_size: 16,
        ..GeneratorConfig::default()
    };
    generate_synthetic_corpus(&gc, 5).unwrap()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        enc_dim: 32,
        enc_depth: 1,
        enc_heads: 2,
        dec_dim: 16,
        dec_depth: 1,
        dec_heads: 2,
        text_dim: 32,
        text_depth: 1,
        text_heads: 2,
        proj_dim: 16,
        ..ModelConfig::default()
    }
}

fn tiny_pretrain() -> PretrainConfig {
    PretrainConfig {
        total_epochs: 6,
        warmup_epochs: 2,
        batch_size: 16,
        ..PretrainConfig::default()
    }
}

// ---------------------------------------------------------------------------
// 4. Schedules

fn pretrain_closed_form(step: usize, base: f64, warmup: usize, total: usize) -> f64 {
    if step + 1 >= total {
        0.0
    } else if step < warmup {
        base * step as f64 / warmup as f64
    } else {
        let t = (step - warmup) as f64 / (total - 1 - warmup) as f64;
        0.5 * base * (1.0 + (PI * t).cos())
    }
}

fn finetune_closed_form(step: usize, spe: usize, peak: f64, fin: f64, warmup: usize, total: usize) -> f64 {
    let e = step as f64 / spe as f64;
    if e < warmup as f64 {
        peak * e / warmup as f64
    } else if e >= (total - 1) as f64 {
        fin
    } else {
        let t = (e - warmup as f64) / (total - 1 - warmup) as f64;
        fin + 0.5 * (peak - fin) * (1.0 + (PI * t).cos())
    }
}

#[test]
fn criterion_4_schedules() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus();
    let cfg = tiny_pretrain();
    let out = pretrain(&corpus, &tiny_model(), &cfg, dir.path()).unwrap();
    let steps = read_step_log(&out.log_path).unwrap();
    let total = steps.len();
    let spe = total / cfg.total_epochs;
    let warmup = cfg.warmup_epochs * spe;
    let mut pre_err: f64 = 0.0;
    for (i, s) in steps.iter().enumerate() {
        assert_eq!(s.step as usize, i);
        pre_err = pre_err.max((s.lr - pretrain_closed_form(i, cfg.base_lr, warmup, total)).abs());
    }
    let pre_zero = steps.last().unwrap().lr == 0.0;

    let ckpt = Checkpoint::load(&out.checkpoint_path).unwrap();
    let ds = EvalDataset::from_corpus(&corpus, Split::Test, None).unwrap();
    let (train_idx, val_idx, _) = ds.downstream_split([0.7, 0.3, 0.0], 0);
    let train = ds.labeled_set(&train_idx);
    let val = ds.labeled_set(&val_idx);
    let fcfg = FinetuneConfig::default();
    let ft = finetune(&ckpt.model, &train, Some(&val), &fcfg).unwrap();
    let epochs = fcfg.total_epochs();
    let fspe = ft.lrs.len() / epochs;
    let mut ft_err: f64 = 0.0;
    for (i, lr) in ft.lrs.iter().enumerate() {
        let want = finetune_closed_form(i, fspe, 5e-4, 1e-6, fcfg.warmup_epochs, epochs);
        ft_err = ft_err.max((lr - want).abs());
    }
    let peak_exact = ft.lrs[fcfg.warmup_epochs * fspe] == 5e-4;
    let final_exact = ft.lrs[(epochs - 1) * fspe..].iter().all(|&lr| lr == 1e-6);
    let d = &ft.history;
    let frozen = d[1..=5].iter().all(|h| h.encoder_digest == d[0].encoder_digest);
    let frozen_flags = d.iter().enumerate().all(|(e, h)| h.frozen == (e < 5));
    let moved = d[6].encoder_digest != d[5].encoder_digest;

    let pass = pre_err <= 1e-9 && ft_err <= 1e-9 && pre_zero && peak_exact && final_exact && frozen && frozen_flags && moved;
    report(
        4,
        "schedule conformance",
        pass,
        &format!(
            "pretrain {total} steps max err {pre_err:.1e}, final lr 0: {pre_zero}; fine-tune {} steps max err {ft_err:.1e}, \
             5e-4 at warmup end: {peak_exact}, 1e-6 through final epoch: {final_exact}; \
             encoder digest fixed epochs 0-5: {frozen}, changed by epoch 6: {moved}",
            ft.lrs.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 5. End-to-end on the calibrated synthetic corpus

fn acceptance_corpus() -> CorpusManifest {
    let gc = GeneratorConfig::default();
    assert_eq!((gc.n_train, gc.n_val, gc.n_test), (1600, 200, 400));
    assert_eq!((gc.n_latent_classes, gc.modalities.len(), gc.image_size), (4, 2, 64));
    assert_eq!(gc.text_fraction, 0.25);
    generate_synthetic_corpus(&gc, 7).unwrap()
}

/// Block-averaged pixels: `cells x cells x channels` features.
fn pooled(pixels: &[f32], size: usize, channels: usize, cells: usize) -> Vec<f64> {
    let block = size / cells;
    let mut out = vec![0.0; cells * cells * channels];
    for y in 0..size {
        for x in 0..size {
            for c in 0..channels {
                let cell = ((y / block) * cells + x / block) * channels + c;
                out[cell] += f64::from(pixels[(y * size + x) * channels + c]);
            }
        }
    }
    let area = (block * block) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    out
}

/// Supervised reference: multinomial logistic regression on pooled pixels,
/// trained on the train split and scored on the test split. Establishes
/// that the labels are learnable from the images at all.
fn supervised_oracle_auroc(corpus: &CorpusManifest) -> f64 {
    let (size, _, channels) = corpus.image_shape().unwrap();
    let k = 4;
    let features = |split: Split| -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for e in corpus.split(split) {
            for img in &e.patient.images {
                xs.push(pooled(&img.pixels.to_unit(), size, channels, 8));
                ys.push(e.latent_class.unwrap());
            }
        }
        (xs, ys)
    };
    let (mut xtr, ytr) = features(Split::Train);
    let (mut xte, yte) = features(Split::Test);
    let dim = xtr[0].len();
    let mean: Vec<f64> = (0..dim).map(|j| xtr.iter().map(|x| x[j]).sum::<f64>() / xtr.len() as f64).collect();
    let sd: Vec<f64> = (0..dim)
        .map(|j| (xtr.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / xtr.len() as f64).sqrt().max(1e-9))
        .collect();
    for x in xtr.iter_mut().chain(xte.iter_mut()) {
        for j in 0..dim {
            x[j] = (x[j] - mean[j]) / sd[j];
        }
    }
    let mut w = vec![vec![0.0; dim + 1]; k];
    let softmax = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        let z: Vec<f64> = w.iter().map(|wc| wc[dim] + wc[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    };
    for _ in 0..300 {
        let mut grad = vec![vec![0.0; dim + 1]; k];
        for (x, &y) in xtr.iter().zip(&ytr) {
            let p = softmax(&w, x);
            for c in 0..k {
                let g = p[c] - if c == y { 1.0 } else { 0.0 };
                for j in 0..dim {
                    grad[c][j] += g * x[j];
                }
                grad[c][dim] += g;
            }
        }
        let n = xtr.len() as f64;
        for c in 0..k {
            for j in 0..=dim {
                w[c][j] -= 0.5 * (grad[c][j] / n + 1e-4 * w[c][j]);
            }
        }
    }
    let probs: Vec<Vec<f64>> = xte.iter().map(|x| softmax(&w, x)).collect();
    (0..k)
        .map(|c| {
            let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let l: Vec<bool> = yte.iter().map(|&y| y == c).collect();
            auroc_oracle(&s, &l)
        })
        .sum::<f64>()
        / k as f64
}

fn metric<'a>(reports: &'a [MetricReport], name: &str) -> &'a MetricReport {
    reports.iter().find(|r| r.metric == name && r.seed.is_none()).unwrap()
}

/// Few-shot runs use a shortened fine-tune; see the README.
fn fewshot_config() -> FinetuneConfig {
    FinetuneConfig {
        total_epochs: Some(FEWSHOT_EPOCHS),
        warmup_epochs: 2,
        ..FinetuneConfig::default()
    }
}

const FEWSHOT_EPOCHS: usize = 12;

#[test]
fn criterion_5_end_to_end() {
    let corpus = acceptance_corpus();
    let oracle = supervised_oracle_auroc(&corpus);
    let calibrated = oracle >= 0.95;

    let dir = tempfile::tempdir().unwrap();
    let cfg = PretrainConfig::default();
    assert_eq!((cfg.total_epochs, cfg.batch_size), (20, 64));
    let start = std::time::Instant::now();
    let out = pretrain(&corpus, &ModelConfig::default(), &cfg, dir.path()).unwrap();
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let first = out.steps.first().unwrap().total;
    let last = out.steps.last().unwrap().total;
    let descent = 1.0 - last / first;
    let ckpt = Checkpoint::load(&out.checkpoint_path).unwrap();

    let ecfg = EvalConfig::default();
    let zs = evaluate_protocol(&ckpt, &corpus, Protocol::Zeroshot, &ecfg, &FinetuneConfig::default()).unwrap();
    let zs_auroc = metric(&zs, "macro_auroc").value;
    let ds = EvalDataset::from_corpus(&corpus, Split::Test, None).unwrap();
    let suite = retrieval_suite(&ckpt, &ds, &ecfg).unwrap();
    let i2i_r1 = suite.i2i_class.recall(1).unwrap();
    let t2i_mean = suite.t2i.mean_recall;

    let runs = fewshot_runs(&ckpt, &ds, &ecfg, &fewshot_config()).unwrap();
    let mean_at = |n: usize| {
        let v: Vec<f64> = runs.iter().filter(|r| r.n_per_class == n).map(|r| r.macro_auroc).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (fs1, fs16) = (mean_at(1), mean_at(16));

    let ft = evaluate_protocol(&ckpt, &corpus, Protocol::Finetune, &ecfg, &FinetuneConfig::default()).unwrap();
    let ft_auroc = metric(&ft, "macro_auroc").value;
    let zs_same = metric(&zeroshot_on_downstream_test(&ckpt, &ds, &ecfg).unwrap(), "macro_auroc").value;

    let checks = [
        ("pretrain loss descent >= 30%", descent >= 0.30, format!("{first:.4} -> {last:.4} ({:.1}%)", descent * 100.0)),
        ("(a) zero-shot macro AUROC >= 0.90", zs_auroc >= 0.90, format!("{zs_auroc:.4} over {} images", ds.items.len())),
        ("(b) i2i Recall@1 >= 0.50", i2i_r1 >= 0.50, format!("{i2i_r1:.4} over {} queries", suite.i2i_class.n_queries)),
        ("(c) t2i mean recall >= 0.60", t2i_mean >= 0.60, format!("{t2i_mean:.4} over {} queries", suite.t2i.n_queries)),
        ("(d) few-shot n=16 >= n=1", fs16 >= fs1, format!("{fs16:.4} vs {fs1:.4}")),
        ("(e) fine-tune >= zero-shot", ft_auroc >= zs_same, format!("{ft_auroc:.4} vs {zs_same:.4} on the downstream test part")),
    ];
    let mut pass = calibrated;
    let mut details = vec![
        format!("oracle calibration: {} pooled-pixel softmax regression AUROC {oracle:.4} (need >= 0.95)", if calibrated { "ok" } else { "MISS" }),
        format!("pretrain {minutes:.1} min"),
    ];
    for (name, ok, detail) in &checks {
        pass &= ok;
        details.push(format!("{name}: {} {detail}", if *ok { "ok" } else { "MISS" }));
    }
    report(5, "synthetic end-to-end", pass, &details.join("; "));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 6. Ablations

const ABLATION_EPOCHS: usize = 5;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

fn ablation_run(corpus: &CorpusManifest, weights: LossWeights, seed: u64, dir: &Path) -> Checkpoint {
    let cfg = PretrainConfig {
        total_epochs: ABLATION_EPOCHS,
        warmup_epochs: 1,
        weights,
        seed,
        ..PretrainConfig::default()
    };
    let out = pretrain(corpus, &ModelConfig::default(), &cfg, dir).unwrap();
    Checkpoint::load(&out.checkpoint_path).unwrap()
}

#[test]
fn criterion_6_ablations() {
    let corpus = acceptance_corpus();
    let ds = EvalDataset::from_corpus(&corpus, Split::Test, None).unwrap();
    let ecfg = EvalConfig::default();
    let ft = FinetuneConfig::default();
    let mut degraded = 0;
    let mut covered = 0;
    let mut lines = Vec::new();
    for seed in ABLATION_SEEDS {
        let dir = tempfile::tempdir().unwrap();
        let full = ablation_run(&corpus, LossWeights::default(), seed, &dir.path().join("full"));
        let no_ii = ablation_run(&corpus, LossWeights::new(0.75, 0.0, 1.0).unwrap(), seed, &dir.path().join("no_ii"));
        let no_it = ablation_run(&corpus, LossWeights::new(0.0, 0.75, 1.0).unwrap(), seed, &dir.path().join("no_it"));
        let r_full = retrieval_suite(&full, &ds, &ecfg).unwrap().i2i_class.recall(1).unwrap();
        let r_no_ii = retrieval_suite(&no_ii, &ds, &ecfg).unwrap().i2i_class.recall(1).unwrap();
        if r_no_ii < r_full {
            degraded += 1;
        }
        let zs = evaluate_protocol(&no_it, &corpus, Protocol::Zeroshot, &ecfg, &ft).unwrap();
        let a = metric(&zs, "macro_auroc");
        let covers = a.ci_low <= 0.5 && 0.5 <= a.ci_high;
        if covers {
            covered += 1;
        }
        lines.push(format!(
            "seed {seed}: i2i R@1 full {r_full:.3} vs no img-img {r_no_ii:.3}; no img-text zero-shot {:.3} [{:.3}, {:.3}]",
            a.value, a.ci_low, a.ci_high
        ));
    }
    let pass = degraded >= 2 && covered == ABLATION_SEEDS.len();
    report(
        6,
        "ablation directions",
        pass,
        &format!(
            "{ABLATION_EPOCHS}-epoch runs; img-img ablation degrades i2i in {degraded}/3, img-text ablation CI covers 0.5 in {covered}/3; {}",
            lines.join("; ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 7. Determinism and persistence

#[test]
fn criterion_7_determinism_and_persistence() {
    let corpus = tiny_corpus();
    let cfg = tiny_pretrain();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pretrain(&corpus, &tiny_model(), &cfg, a.path()).unwrap();
    let rb = pretrain(&corpus, &tiny_model(), &cfg, b.path()).unwrap();
    let same = |i: usize| ra.steps[i].total.to_bits() == rb.steps[i].total.to_bits();
    let deterministic = ra.steps.len() > 10 && same(0) && same(10);

    let bytes = std::fs::read(&ra.checkpoint_path).unwrap();
    let ckpt = Checkpoint::load(&ra.checkpoint_path).unwrap();
    let ckpt_exact = ckpt.to_bytes().unwrap() == bytes;

    let ds = EvalDataset::from_corpus(&corpus, Split::Test, None).unwrap();
    let images: Vec<_> = ds.items.iter().map(|i| (i.image, vec![ds.class_names[i.class].clone()])).collect();
    let store = embed_images(&ckpt.model, &images).unwrap();
    let store_path = a.path().join("test.emb");
    store.save(&store_path).unwrap();
    let stored = std::fs::read(&store_path).unwrap();
    let loaded = EmbeddingStore::load(&store_path).unwrap();
    let store_exact = loaded == store && loaded.to_bytes().unwrap() == stored;

    let cdir = a.path().join("corpus");
    persist_corpus(&corpus, &cdir).unwrap();
    let manifest_equal = load_corpus(&cdir).unwrap() == corpus;

    let pass = deterministic && ckpt_exact && store_exact && manifest_equal;
    report(
        7,
        "determinism and persistence",
        pass,
        &format!(
            "step 0/10 totals identical: {deterministic} ({:.6}, {:.6}); checkpoint bytes: {ckpt_exact}; \
             store bytes: {store_exact}; manifest equality: {manifest_equal}",
            ra.steps[0].total, ra.steps[10].total
        ),
    );
    assert!(pass);
}
