use serde::{Deserialize, Serialize};

use super::DatasetManifest;
use crate::error::{HalluxError, Result};

/// Train/test partition rule. Subjects and classes are written 1-based here,
/// as in dataset documentation; `action_class` in samples is 0-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SplitSpec {
    /// Odd-numbered subjects train, even-numbered subjects test.
    OriginalSplit,
    LeaveOneSubjectOut { held_out: u32 },
    /// Odd/even subject split restricted to classes `first..=last`.
    ClassSubset { first: usize, last: usize },
    Custom { train: Vec<String>, test: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

fn non_empty(split: Split, what: &str) -> Result<Split> {
    if split.train.is_empty() || split.test.is_empty() {
        return Err(HalluxError::Split(format!(
            "{what} leaves {} train and {} test samples",
            split.train.len(),
            split.test.len()
        )));
    }
    Ok(split)
}

fn by_subject(manifest: &DatasetManifest, class_ok: impl Fn(usize) -> bool, is_test: impl Fn(u32) -> bool) -> Split {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in manifest.samples.iter().filter(|s| class_ok(s.action_class)) {
        if is_test(s.subject) {
            test.push(s.sample_id.clone());
        } else {
            train.push(s.sample_id.clone());
        }
    }
    Split { train, test }
}

/// Deterministic; ids keep manifest order.
pub fn make_split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<Split> {
    match spec {
        SplitSpec::OriginalSplit => non_empty(by_subject(manifest, |_| true, |s| s % 2 == 0), "original split"),
        SplitSpec::LeaveOneSubjectOut { held_out } => {
            if !manifest.subjects().contains(held_out) {
                return Err(HalluxError::Split(format!(
                    "held-out subject {held_out} not in manifest (subjects {:?})",
                    manifest.subjects()
                )));
            }
            non_empty(
                by_subject(manifest, |_| true, |s| s == *held_out),
                &format!("leaving out subject {held_out}"),
            )
        }
        SplitSpec::ClassSubset { first, last } => {
            if *first == 0 || first > last || *last > manifest.num_classes {
                return Err(HalluxError::Split(format!(
                    "class range {first}..={last} invalid for {} classes",
                    manifest.num_classes
                )));
            }
            let range = (first - 1)..*last;
            non_empty(
                by_subject(manifest, |c| range.contains(&c), |s| s % 2 == 0),
                &format!("classes {first}..={last}"),
            )
        }
        SplitSpec::Custom { train, test } => {
            let known: std::collections::HashSet<&str> =
                manifest.samples.iter().map(|s| s.sample_id.as_str()).collect();
            let unknown: Vec<&str> = train
                .iter()
                .chain(test)
                .map(String::as_str)
                .filter(|id| !known.contains(id))
                .collect();
            if !unknown.is_empty() {
                return Err(HalluxError::Split(format!("unknown sample ids: {}", unknown.join(", "))));
            }
            let train_set: std::collections::HashSet<&str> = train.iter().map(String::as_str).collect();
            let overlap: Vec<&str> = test.iter().map(String::as_str).filter(|id| train_set.contains(id)).collect();
            if !overlap.is_empty() {
                return Err(HalluxError::Split(format!("ids in both train and test: {}", overlap.join(", "))));
            }
            non_empty(Split { train: train.clone(), test: test.clone() }, "custom split")
        }
    }
}
