//! Post-run invariant checks; the CLI exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use voxmind::dataset::{check_leakage, Split};

use crate::pipeline::{PhaseResult, Prepared};
use crate::runlog::{kind, read_events, Event};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checks: Vec<Check>,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    fn push(&mut self, name: &str, ok: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), ok, detail: detail.into() });
    }

    pub fn render(&self) -> String {
        self.checks
            .iter()
            .map(|c| format!("[{}] {}: {}\n", if c.ok { "ok" } else { "FAIL" }, c.name, c.detail))
            .collect()
    }
}

type Key = (String, u8, u64);

/// Events after the most recent `run_start`.
fn current_run(events: &[Event]) -> &[Event] {
    let start = events.iter().rposition(|e| e.event == kind::RUN_START).unwrap_or(0);
    &events[start..]
}

pub fn audit_data(prep: &Prepared, copies_per_sample: usize, report: &mut AuditReport) {
    let leak = check_leakage(&prep.augmented);
    report.push("leakage", leak.ok, format!("{} violations", leak.violations.len()));
    let dirty: Vec<&str> = prep
        .augmented
        .entries
        .iter()
        .filter(|e| e.split != Split::Train && e.augmented)
        .map(|e| e.clip_id.as_str())
        .collect();
    report.push("val/test non-augmented", dirty.is_empty(), format!("{} augmented val/test entries", dirty.len()));
    let raw_train = prep.split.in_split(Split::Train).count();
    let aug_train = prep.augmented.in_split(Split::Train).count();
    report.push(
        "augmented train size",
        aug_train == raw_train * (1 + copies_per_sample),
        format!("{aug_train} = {raw_train} x (1 + {copies_per_sample})"),
    );
}

pub fn audit_run(log: &Path, results: &[PhaseResult], report: &mut AuditReport) -> Result<(), CliError> {
    let events = read_events(log)?;
    let events = current_run(&events);
    let key = |e: &Event| -> Option<Key> { Some((e.model.clone()?, e.phase?, e.seed?)) };
    let mut by_key: BTreeMap<Key, Vec<&Event>> = BTreeMap::new();
    for e in events {
        if let Some(k) = key(e) {
            by_key.entry(k).or_default().push(e);
        }
    }

    let mut test_once = Vec::new();
    let mut ckpt_first = Vec::new();
    for r in results {
        let k = (r.model.as_str().to_string(), r.phase, r.seed);
        let evs = by_key.get(&k).map(Vec::as_slice).unwrap_or(&[]);
        let reads: Vec<&&Event> = evs.iter().filter(|e| e.event == kind::TEST_READ).collect();
        let seq_of = |name: &str| evs.iter().find(|e| e.event == name).map(|e| e.seq);
        let ok = reads.len() == 1 && seq_of(kind::TRAIN_END).is_some_and(|t| t < reads[0].seq);
        if !ok {
            test_once.push(format!("{k:?}"));
        }
        if r.phase == 2 {
            let ok = match (seq_of(kind::CHECKPOINT_WRITTEN), reads.first()) {
                (Some(c), Some(t)) => c < t.seq,
                _ => false,
            };
            if !ok {
                ckpt_first.push(format!("{k:?}"));
            }
        }
    }
    report.push("test split read once, after training", test_once.is_empty(), violations(&test_once));
    if results.iter().any(|r| r.phase == 2) {
        report.push("phase-2 checkpoint precedes test read", ckpt_first.is_empty(), violations(&ckpt_first));
    }

    let mut per_seed: BTreeMap<u64, Vec<&str>> = BTreeMap::new();
    for r in results {
        per_seed.entry(r.seed).or_default().push(&r.test_clips_sha256);
    }
    let same = per_seed.values().all(|v| v.windows(2).all(|w| w[0] == w[1]));
    report.push("shared test split across phases", same, format!("{} seeds", per_seed.len()));

    let p3: Vec<&PhaseResult> = results.iter().filter(|r| r.phase == 3).collect();
    if !p3.is_empty() {
        let bad: Vec<String> = p3
            .iter()
            .filter(|r| r.backbone_sha256_before.is_none() || r.backbone_sha256_before != r.backbone_sha256_after)
            .map(|r| format!("({}, seed {})", r.model, r.seed))
            .collect();
        report.push("frozen backbone unchanged", bad.is_empty(), violations(&bad));
    }
    Ok(())
}

fn violations(v: &[String]) -> String {
    if v.is_empty() {
        "none".into()
    } else {
        v.join(", ")
    }
}
