//! Result tables (markdown, CSV) and the JSON bundle they render from.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use voxmind::zoo::ModelName;

use crate::pipeline::PhaseResult;
use crate::CliError;

pub const MIN_SEEDS_FOR_MEDIAN: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

impl Metrics {
    fn of(r: &PhaseResult) -> Self {
        Metrics {
            accuracy: r.report.accuracy,
            precision: r.report.precision,
            recall: r.report.recall,
            f1: r.report.f1,
            auc: r.report.auc,
        }
    }
}

/// One (model, phase) cell: the median over seeds when at least
/// [`MIN_SEEDS_FOR_MEDIAN`] are present, otherwise the raw values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model: ModelName,
    pub phase: u8,
    pub seeds: Vec<u64>,
    pub median: Option<Metrics>,
    pub per_seed: Vec<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub summaries: Vec<Summary>,
    pub results: Vec<PhaseResult>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

pub fn summarize(results: &[PhaseResult]) -> Bundle {
    let mut groups: BTreeMap<(ModelName, u8), Vec<&PhaseResult>> = BTreeMap::new();
    for r in results {
        groups.entry((r.model, r.phase)).or_default().push(r);
    }
    let summaries = groups
        .into_iter()
        .map(|((model, phase), mut rs)| {
            rs.sort_by_key(|r| r.seed);
            let per_seed: Vec<Metrics> = rs.iter().map(|r| Metrics::of(r)).collect();
            let med = |f: fn(&Metrics) -> f64| median(&mut per_seed.iter().map(f).collect::<Vec<_>>());
            let median = (rs.len() >= MIN_SEEDS_FOR_MEDIAN).then(|| Metrics {
                accuracy: med(|m| m.accuracy),
                precision: med(|m| m.precision),
                recall: med(|m| m.recall),
                f1: med(|m| m.f1),
                auc: per_seed
                    .iter()
                    .map(|m| m.auc)
                    .collect::<Option<Vec<f64>>>()
                    .map(|mut v| median(&mut v)),
            });
            Summary { model, phase, seeds: rs.iter().map(|r| r.seed).collect(), median, per_seed }
        })
        .collect();
    let mut results = results.to_vec();
    results.sort_by_key(|r| (r.model, r.phase, r.seed));
    Bundle { summaries, results }
}

fn f2(v: f64) -> String {
    format!("{v:.2}")
}

fn auc2(v: Option<f64>) -> String {
    v.map(f2).unwrap_or_else(|| "n/a".into())
}

const PHASE_TITLES: [&str; 3] = [
    "Phase 1: baseline on non-augmented data",
    "Phase 2: training on augmented data",
    "Phase 3: transfer learning (frozen backbone, fine-tuned head)",
];

/// Rows for one summary: the median row, or one flagged row per seed.
fn rows(s: &Summary) -> Vec<(String, Metrics)> {
    match s.median {
        Some(m) => vec![(format!("{} (median of {})", s.model, s.seeds.len()), m)],
        None => s
            .seeds
            .iter()
            .zip(&s.per_seed)
            .map(|(seed, m)| (format!("{} (single run, seed {seed})", s.model), *m))
            .collect(),
    }
}

pub fn render_markdown(b: &Bundle) -> String {
    let mut md = String::from("# Results\n\n");
    md.push_str("Positive class: Unstable. Metrics are on the held-out test split; values rounded to 2 decimals.\n");
    for phase in 1..=3u8 {
        let ss: Vec<&Summary> = b.summaries.iter().filter(|s| s.phase == phase).collect();
        if ss.is_empty() {
            continue;
        }
        let _ = write!(md, "\n## {}\n\n| Model | Accuracy | Precision | Recall | F1 |\n|---|---|---|---|---|\n", PHASE_TITLES[phase as usize - 1]);
        for s in &ss {
            for (name, m) in rows(s) {
                let _ = writeln!(md, "| {name} | {} | {} | {} | {} |", f2(m.accuracy), f2(m.precision), f2(m.recall), f2(m.f1));
            }
        }
    }

    let models: Vec<ModelName> = {
        let mut v: Vec<ModelName> = b.summaries.iter().map(|s| s.model).collect();
        v.dedup();
        v
    };
    md.push_str("\n## AUC\n\n| Model | Phase 1 | Phase 2 | Phase 3 |\n|---|---|---|---|\n");
    for m in &models {
        let cell = |p: u8| {
            b.summaries
                .iter()
                .find(|s| s.model == *m && s.phase == p)
                .map(|s| match s.median {
                    Some(med) => auc2(med.auc),
                    None => s.per_seed.iter().map(|x| auc2(x.auc)).collect::<Vec<_>>().join(" / ") + " (single runs)",
                })
                .unwrap_or_else(|| "-".into())
        };
        let _ = writeln!(md, "| {m} | {} | {} | {} |", cell(1), cell(2), cell(3));
    }

    md.push_str("\n## Comparison across phases\n\n| Model | Phase | Accuracy | Precision | Recall | F1 |\n|---|---|---|---|---|---|\n");
    for m in &models {
        for s in b.summaries.iter().filter(|s| s.model == *m) {
            for (_, x) in rows(s) {
                let _ = writeln!(md, "| {m} | Phase {} | {} | {} | {} | {} |", s.phase, f2(x.accuracy), f2(x.precision), f2(x.recall), f2(x.f1));
            }
        }
    }

    md.push_str("\n## Per-seed results\n\n| Model | Phase | Seed | Accuracy | Precision | Recall | F1 | AUC | Epochs | Best epoch |\n|---|---|---|---|---|---|---|---|---|---|\n");
    for r in &b.results {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.model,
            r.phase,
            r.seed,
            f2(r.report.accuracy),
            f2(r.report.precision),
            f2(r.report.recall),
            f2(r.report.f1),
            auc2(r.report.auc),
            r.history.epochs.len(),
            r.history.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
        );
    }
    md
}

pub fn results_csv(b: &Bundle) -> String {
    let mut s = String::from("model,phase,seed,accuracy,precision,recall,f1,auc,tp,fn,fp,tn,epochs\n");
    for r in &b.results {
        let c = &r.report.confusion;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.model,
            r.phase,
            r.seed,
            r.report.accuracy,
            r.report.precision,
            r.report.recall,
            r.report.f1,
            r.report.auc.map(|a| a.to_string()).unwrap_or_default(),
            c.tp(),
            c.fn_(),
            c.fp(),
            c.tn(),
            r.history.epochs.len()
        );
    }
    s
}

pub fn roc_csv(r: &PhaseResult) -> String {
    let mut s = String::from("fpr,tpr,threshold\n");
    for p in &r.report.roc {
        let _ = writeln!(s, "{},{},{}", p.fpr, p.tpr, p.threshold);
    }
    s
}

/// Write `report.json`, `report.md`, `results.csv` and `roc/*.csv` under `dir`.
pub fn write_bundle(dir: &Path, b: &Bundle) -> Result<(), CliError> {
    fs::create_dir_all(dir.join("roc"))?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(b).expect("bundle json") + "\n")?;
    fs::write(dir.join("report.md"), render_markdown(b))?;
    fs::write(dir.join("results.csv"), results_csv(b))?;
    for r in &b.results {
        fs::write(dir.join("roc").join(format!("{}_p{}_seed{}.csv", r.model, r.phase, r.seed)), roc_csv(r))?;
    }
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<Bundle, CliError> {
    let text = fs::read_to_string(dir.join("report.json"))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("report.json: {e}")))
}
