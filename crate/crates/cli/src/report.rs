use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use walkdir::WalkDir;

use mclab::evaluation::MetricReport;
use mclab::training::{FinetuneEpoch, StepRecord};

use crate::error::CliError;
use crate::output::Output;
use crate::plot::{box_chart, line_chart};

/// What a JSONL file under the input directory turned out to hold.
enum Source {
    Metrics(Vec<MetricReport>),
    Steps(Vec<StepRecord>),
    Finetune(Vec<FinetuneEpoch>),
}

fn parse_all<T: serde::de::DeserializeOwned>(text: &str) -> Option<Vec<T>> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return None;
    }
    lines.iter().map(|l| serde_json::from_str(l).ok()).collect()
}

fn classify(text: &str) -> Option<Source> {
    if let Some(m) = parse_all(text) {
        return Some(Source::Metrics(m));
    }
    if let Some(s) = parse_all(text) {
        return Some(Source::Steps(s));
    }
    parse_all(text).map(Source::Finetune)
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "-".into())
}

fn table(rows: &[(PathBuf, MetricReport)]) -> String {
    let mut s = String::from(
        "| source | protocol | dataset | metric | n/class | seed | value | 95% CI | n | p |\n\
         |---|---|---|---|---|---|---|---|---|---|\n",
    );
    for (src, r) in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {:.4} | [{:.4}, {:.4}] | {} | {} |",
            src.display(),
            r.protocol,
            r.dataset,
            r.metric,
            fmt_opt(r.n_per_class),
            fmt_opt(r.seed),
            r.value,
            r.ci_low,
            r.ci_high,
            r.n,
            r.p_value.map(|p| format!("{p:.3e}")).unwrap_or_else(|| "-".into()),
        );
    }
    s
}

fn plot_path(out: &Path, name: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    out.with_file_name(format!("{stem}-{name}.svg"))
}

/// Aggregates every report line under `input` into a markdown table at
/// `out`, with SVG plots beside it.
pub fn report(input: &Path, out: &Path, output: &Output) -> Result<(), CliError> {
    if !input.is_dir() {
        return Err(CliError::Validation(format!("input directory {} does not exist", input.display())));
    }
    let mut metrics: Vec<(PathBuf, MetricReport)> = Vec::new();
    let mut steps: Vec<(PathBuf, Vec<StepRecord>)> = Vec::new();
    let mut finetunes: Vec<(PathBuf, Vec<FinetuneEpoch>)> = Vec::new();
    let mut files: Vec<PathBuf> = WalkDir::new(input)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "jsonl"))
        .map(|e| e.into_path())
        .collect();
    files.sort();
    for path in files {
        let rel = path.strip_prefix(input).unwrap_or(&path).to_path_buf();
        match classify(&fs::read_to_string(&path)?) {
            Some(Source::Metrics(m)) => metrics.extend(m.into_iter().map(|r| (rel.clone(), r))),
            Some(Source::Steps(s)) => steps.push((rel, s)),
            Some(Source::Finetune(f)) => finetunes.push((rel, f)),
            None => {}
        }
    }
    if metrics.is_empty() {
        return Err(CliError::Validation(format!("no report lines found under {}", input.display())));
    }

    let mut plots: Vec<(PathBuf, String)> = Vec::new();
    for (i, (src, s)) in steps.iter().enumerate() {
        let series = |name: &str, f: fn(&StepRecord) -> f64| (name.to_string(), s.iter().map(|r| (r.step as f64, f(r))).collect());
        let svg = line_chart(
            &format!("training loss ({})", src.display()),
            "step",
            "loss",
            &[
                series("total", |r| r.total),
                series("image-text", |r| r.l_img_text),
                series("image-image", |r| r.l_img_img),
                series("reconstruction", |r| r.l_recon),
            ],
        );
        plots.push((plot_path(out, &format!("loss{}", suffix(i))), svg));
    }
    for (i, (src, f)) in finetunes.iter().enumerate() {
        let train = f.iter().map(|e| (e.epoch as f64, e.train_loss)).collect();
        let val = f.iter().filter_map(|e| e.val_loss.map(|v| (e.epoch as f64, v))).collect();
        let svg = line_chart(
            &format!("fine-tune loss ({})", src.display()),
            "epoch",
            "loss",
            &[("train".into(), train), ("validation".into(), val)],
        );
        plots.push((plot_path(out, &format!("finetune{}", suffix(i))), svg));
    }
    let mut runs: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (_, r) in &metrics {
        if r.protocol == "fewshot" && r.seed.is_some() {
            if let Some(n) = r.n_per_class {
                runs.entry(n).or_default().push(r.value);
            }
        }
    }
    if !runs.is_empty() {
        let groups: Vec<(String, Vec<f64>)> = runs.into_iter().map(|(n, v)| (n.to_string(), v)).collect();
        plots.push((
            plot_path(out, "fewshot"),
            box_chart("few-shot macro AUROC by examples per class", "examples per class", "macro AUROC", &groups),
        ));
    }

    output.prepare_file(out)?;
    let mut doc = format!("# Run report\n\n{} metric lines from {}\n\n", metrics.len(), input.display());
    doc.push_str(&table(&metrics));
    if !plots.is_empty() {
        doc.push_str("\n## Plots\n\n");
    }
    for (path, svg) in &plots {
        fs::write(path, svg)?;
        let name = path.file_name().unwrap().to_string_lossy();
        let _ = writeln!(doc, "- [{name}]({name})");
    }
    fs::write(out, doc)?;
    info!("{} metric lines and {} plots written next to {}", metrics.len(), plots.len(), out.display());
    Ok(())
}

fn suffix(i: usize) -> String {
    if i == 0 {
        String::new()
    } else {
        format!("-{i}")
    }
}
