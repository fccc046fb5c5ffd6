use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mclab::evaluation::{read_reports, EmbeddingStore, Side};
use mclab::training::read_step_log;

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn mclab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mclab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mclab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` with its bytes, keyed by relative path.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

struct Pipeline {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    run: PathBuf,
}

impl Pipeline {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let data = root.join("data");
        let run = root.join("run");
        let c = tiny_config();
        ok(&["generate-data", "--config", s(&c), "--out", s(&data)]);
        ok(&["pretrain", "--config", s(&c), "--data", s(&data), "--out", s(&run)]);
        Self {
            _tmp: tmp,
            root,
            data,
            run,
        }
    }

    fn checkpoint(&self) -> PathBuf {
        self.run.join("checkpoints/best.ckpt")
    }

    fn eval(&self, cmd: &str, out: &Path, extra: &[&str]) -> Output {
        let c = tiny_config();
        let k = self.checkpoint();
        let mut args = vec![cmd, "--config", s(&c), "--checkpoint", s(&k), "--data", s(&self.data), "--out", s(out)];
        args.extend_from_slice(extra);
        ok(&args)
    }
}

#[test]
fn generate_data_is_reproducible_and_refuses_non_empty_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let c = tiny_config();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["generate-data", "--config", s(&c), "--out", s(&a), "--seed", "7"]);
    ok(&["generate-data", "--config", s(&c), "--out", s(&b), "--seed", "7"]);
    assert_eq!(tree(&a), tree(&b));
    assert!(a.join("manifest.jsonl").is_file());
    assert!(a.join("config.resolved").is_file());

    let again = mclab(&["generate-data", "--config", s(&c), "--out", s(&a)]);
    assert_eq!(again.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&again.stderr).contains("not empty"));
    assert!(!a.join("FAILED").exists(), "a refused directory is not ours to mark");
}

#[test]
fn configuration_errors_exit_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let one = tmp.path().join("one.toml");
    fs::write(&one, "[corpus.generator]\nmodalities = [\"CFP\"]\n").unwrap();
    let out = mclab(&["generate-data", "--config", s(&one), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("at least 2 modalities"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "one-line diagnostic: {err}");
    assert!(!tmp.path().join("d").exists());

    let unknown = tmp.path().join("unknown.toml");
    fs::write(&unknown, "[pretrain]\nlearning_rate = 0.1\n").unwrap();
    let out = mclab(&["generate-data", "--config", s(&unknown), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn usage_errors_exit_with_code_2() {
    assert_eq!(mclab(&["pretrain"]).status.code(), Some(2));
    assert_eq!(mclab(&["no-such-command"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let out = mclab(&[
        "embed",
        "--checkpoint",
        "x",
        "--data",
        "y",
        "--side",
        "image",
        "--split",
        "holdout",
        "--out",
        s(&tmp.path().join("e")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pretrain_with_missing_data_leaves_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let out = mclab(&["pretrain", "--data", s(&tmp.path().join("absent")), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!run.exists());
}

#[test]
fn full_pipeline() {
    let p = Pipeline::new();
    let c = tiny_config();

    // Pretrain outputs and replay from the resolved config.
    assert!(p.checkpoint().is_file());
    assert!(p.run.join("logs/train.jsonl").is_file());
    assert!(p.run.join("config.resolved").is_file());
    let replay = p.root.join("replay");
    ok(&[
        "pretrain",
        "--config",
        s(&p.run.join("config.resolved")),
        "--data",
        s(&p.data),
        "--out",
        s(&replay),
    ]);
    let first = read_step_log(&p.run.join("logs/train.jsonl")).unwrap();
    let second = read_step_log(&replay.join("logs/train.jsonl")).unwrap();
    assert_eq!(first[0], second[0]);
    assert_eq!(first, second);
    assert_eq!(fs::read(p.checkpoint()).unwrap(), fs::read(replay.join("checkpoints/best.ckpt")).unwrap());

    // Embedding stores.
    let k = p.checkpoint();
    let img = p.root.join("emb/image.emb");
    ok(&["embed", "--config", s(&c), "--checkpoint", s(&k), "--data", s(&p.data), "--side", "image", "--out", s(&img)]);
    let store = EmbeddingStore::load(&img).unwrap();
    store.validate().unwrap();
    assert_eq!(store.side(), Side::Image);
    // 160 test patients, one image per modality
    assert_eq!(store.len(), 320);
    for (_, row) in store.rows() {
        let n: f64 = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-6);
    }
    let txt = p.root.join("emb/text.emb");
    ok(&["embed", "--config", s(&c), "--checkpoint", s(&k), "--data", s(&p.data), "--side", "text", "--out", s(&txt)]);
    let texts = EmbeddingStore::load(&txt).unwrap();
    assert_eq!(texts.side(), Side::Text);
    assert!(!texts.is_empty() && texts.len() % 2 == 0);

    // Evaluation protocols into one directory.
    let ev = p.root.join("eval");
    let zs = p.eval("zeroshot", &ev, &[]);
    let zs_lines = read_reports(&ev.join("reports/zeroshot.jsonl")).unwrap();
    let metrics: Vec<&str> = zs_lines.iter().map(|r| r.metric.as_str()).collect();
    assert_eq!(metrics, ["macro_auroc", "macro_aupr"]);
    assert_eq!(String::from_utf8_lossy(&zs.stdout).lines().count(), 2);

    p.eval("retrieve", &ev, &["--K", "1,5,10"]);
    let ret = read_reports(&ev.join("reports/retrieval.jsonl")).unwrap();
    for dir in ["t2i", "i2i", "i2t"] {
        let at = |k: &str| ret.iter().find(|r| r.metric == format!("{dir}_{k}")).unwrap().value;
        let recalls = [at("recall@1"), at("recall@5"), at("recall@10")];
        assert!(recalls[0] <= recalls[1] && recalls[1] <= recalls[2]);
        let mean = recalls.iter().sum::<f64>() / 3.0;
        assert!((at("mean_recall") - mean).abs() <= 1e-12, "{dir}");
    }

    p.eval("fewshot", &ev, &[]);
    let fs_lines = read_reports(&ev.join("reports/fewshot.jsonl")).unwrap();
    let runs: Vec<_> = fs_lines.iter().filter(|r| r.seed.is_some()).collect();
    assert_eq!(runs.len(), 25);
    let aggregates: Vec<_> = fs_lines.iter().filter(|r| r.metric == "mean_macro_auroc").collect();
    assert_eq!(aggregates.len(), 5);
    assert!(aggregates[1..].iter().all(|r| r.p_value.is_some()));

    p.eval("finetune", &ev, &[]);
    assert_eq!(read_reports(&ev.join("reports/finetune.jsonl")).unwrap().len(), 2);
    assert!(ev.join("logs/finetune.jsonl").is_file());
    let (classifier, _) = mclab::training::Classifier::load(&ev.join("checkpoints/classifier")).unwrap();
    assert_eq!(classifier.class_names.len(), 4);
    assert!(!ev.join("FAILED").exists());

    // Report over everything produced.
    let rep = p.root.join("report/summary.md");
    ok(&["report", "--in", s(&p.root), "--out", s(&rep)]);
    let text = fs::read_to_string(&rep).unwrap();
    let consumed: usize = ["zeroshot", "retrieval", "fewshot", "finetune"]
        .iter()
        .map(|n| read_reports(&ev.join(format!("reports/{n}.jsonl"))).unwrap().len())
        .sum();
    assert!(text.contains(&format!("{consumed} metric lines")));
    assert_eq!(text.lines().filter(|l| l.starts_with("| eval/reports/")).count(), consumed);
    for plot in ["summary-loss.svg", "summary-fewshot.svg", "summary-finetune.svg"] {
        let path = p.root.join("report").join(plot);
        assert!(fs::metadata(&path).map(|m| m.len() > 0).unwrap_or(false), "{plot}");
    }
}

#[test]
fn report_on_empty_input_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = mclab(&["report", "--in", s(&empty), "--out", s(&tmp.path().join("r.md"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!tmp.path().join("r.md").exists());
}

#[test]
fn runtime_failures_leave_a_marker() {
    let p = Pipeline::new();
    // The 16 validation patients are too few for every class to reach the
    // downstream test part, so scoring fails after outputs were started.
    let cfg = p.root.join("bad.toml");
    let mut text = fs::read_to_string(tiny_config()).unwrap();
    text = text.replace("[eval]\n", "[eval]\nsplit = \"val\"\n");
    fs::write(&cfg, text).unwrap();
    let ev = p.root.join("bad");
    let out = mclab(&[
        "finetune",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&p.checkpoint()),
        "--data",
        s(&p.data),
        "--out",
        s(&ev),
    ]);
    assert!(!out.status.success());
    let marker = fs::read_to_string(ev.join("FAILED")).unwrap();
    assert!(!marker.trim().is_empty());
}
