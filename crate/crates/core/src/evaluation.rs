//! Accuracy, confusion matrices, experiment reports and inference timing.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::EncodedDataset;
use crate::error::{HalluxError, Result};
use crate::graph::Bindings;
use crate::models::{InferencePath, ModelBundle};

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(HalluxError::InvalidArgument(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(HalluxError::InvalidArgument("accuracy of an empty set".into()));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total().max(1) as f64
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(HalluxError::InvalidArgument(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(HalluxError::InvalidArgument(format!(
                "class id out of range for {num_classes} classes: predicted {p}, true {l}"
            )));
        }
        counts[l][p] += 1;
    }
    Ok(ConfusionMatrix { num_classes, counts })
}

/// Predictions of one configuration on one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigResult {
    pub configuration: String,
    pub ids: Vec<String>,
    pub preds: Vec<usize>,
    pub labels: Vec<usize>,
    pub confusion: ConfusionMatrix,
}

impl ConfigResult {
    pub fn new(configuration: &str, ids: Vec<String>, preds: Vec<usize>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        accuracy(&preds, &labels)?;
        let confusion = confusion_matrix(&preds, &labels, num_classes)?;
        Ok(Self { configuration: configuration.to_string(), ids, preds, labels, confusion })
    }

    /// Accuracy in percent, from the confusion matrix.
    pub fn accuracy_pct(&self) -> f64 {
        100.0 * self.confusion.accuracy()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: String,
    pub results: Vec<ConfigResult>,
}

impl FoldReport {
    pub fn get(&self, configuration: &str) -> Option<&ConfigResult> {
        self.results.iter().find(|r| r.configuration == configuration)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub mode: String,
    pub ms_per_clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub num_classes: usize,
    pub folds: Vec<FoldReport>,
    pub timing: Vec<TimingRow>,
}

fn pct(v: f64) -> String {
    format!("{v:.2}")
}

impl EvalReport {
    /// Configurations in first-seen order.
    pub fn configurations(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for f in &self.folds {
            for r in &f.results {
                if !out.contains(&r.configuration) {
                    out.push(r.configuration.clone());
                }
            }
        }
        out
    }

    /// Mean per-fold accuracy in percent.
    pub fn accuracy_pct(&self, configuration: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .folds
            .iter()
            .filter_map(|f| f.get(configuration).map(ConfigResult::accuracy_pct))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn timing_of(&self, mode: &str) -> Option<f64> {
        self.timing.iter().find(|t| t.mode == mode).map(|t| t.ms_per_clip)
    }

    /// Accuracy table: one row per fold (plus `Average` when there are
    /// several), one column per configuration. Cells are formatted strings.
    pub fn accuracy_table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let configs = self.configurations();
        let mut header = vec!["fold".to_string()];
        header.extend(configs.iter().cloned());
        let mut rows = Vec::new();
        for f in &self.folds {
            let mut row = vec![f.fold.clone()];
            for c in &configs {
                row.push(f.get(c).map(|r| pct(r.accuracy_pct())).unwrap_or_default());
            }
            rows.push(row);
        }
        if self.folds.len() > 1 {
            let mut row = vec!["Average".to_string()];
            for c in &configs {
                row.push(self.accuracy_pct(c).map(pct).unwrap_or_default());
            }
            rows.push(row);
        }
        (header, rows)
    }

    fn write_accuracy_csv(&self, path: &Path) -> Result<()> {
        let (header, rows) = self.accuracy_table();
        write_csv(path, &header, &rows)
    }

    fn write_confusion_csv(&self, path: &Path) -> Result<()> {
        let header: Vec<String> = ["fold", "configuration", "true_class", "predicted_class", "count"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut rows = Vec::new();
        for f in &self.folds {
            for r in &f.results {
                for (t, row) in r.confusion.counts.iter().enumerate() {
                    for (p, &n) in row.iter().enumerate() {
                        if n > 0 {
                            rows.push(vec![f.fold.clone(), r.configuration.clone(), t.to_string(), p.to_string(), n.to_string()]);
                        }
                    }
                }
            }
        }
        write_csv(path, &header, &rows)
    }

    fn write_timing_csv(&self, path: &Path) -> Result<()> {
        let header = vec!["mode".to_string(), "ms_per_clip".to_string()];
        let rows = self.timing.iter().map(|t| vec![t.mode.clone(), format!("{:.3}", t.ms_per_clip)]).collect::<Vec<_>>();
        write_csv(path, &header, &rows)
    }

    pub fn markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "## Protocol: {}\n", self.protocol);
        let (header, rows) = self.accuracy_table();
        let _ = writeln!(s, "Accuracy (%)\n");
        s.push_str(&markdown_table(&header, &rows));
        if !self.timing.is_empty() {
            let _ = writeln!(s, "\nInference time (ms per clip)\n");
            let rows: Vec<Vec<String>> =
                self.timing.iter().map(|t| vec![t.mode.clone(), format!("{:.3}", t.ms_per_clip)]).collect();
            s.push_str(&markdown_table(&["mode".into(), "ms_per_clip".into()], &rows));
        }
        s
    }
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| HalluxError::Format(format!("csv: {e}"));
    w.write_record(header).map_err(to_err)?;
    for r in rows {
        w.write_record(r).map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| HalluxError::Format(format!("csv: {e}")))?;
    crate::io_util::write_atomic(path, &bytes)
}

fn markdown_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut s = format!("| {} |\n|", header.join(" | "));
    for _ in header {
        s.push_str("---|");
    }
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "| {} |", r.join(" | "));
    }
    s
}

/// Writes `{protocol}_accuracy.csv`, `{protocol}_confusion.csv`,
/// `timing.csv` (when any report carries timings) and `summary.md`.
pub fn emit_reports(reports: &[EvalReport], dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(HalluxError::InvalidArgument("no protocol reports to emit".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut md = String::from("# Results\n\n");
    let mut timing = Vec::new();
    for r in reports {
        let acc = dir.join(format!("{}_accuracy.csv", r.protocol));
        r.write_accuracy_csv(&acc)?;
        let conf = dir.join(format!("{}_confusion.csv", r.protocol));
        r.write_confusion_csv(&conf)?;
        files.extend([acc, conf]);
        md.push_str(&r.markdown());
        md.push('\n');
        timing.extend(r.timing.iter().cloned());
    }
    if !timing.is_empty() {
        let t = EvalReport { protocol: String::new(), num_classes: 0, folds: Vec::new(), timing };
        let p = dir.join("timing.csv");
        t.write_timing_csv(&p)?;
        files.push(p);
    }
    let p = dir.join("summary.md");
    crate::io_util::write_atomic(&p, md.as_bytes())?;
    files.push(p);
    Ok(files)
}

/// Reads back an accuracy CSV as `(header, rows)`.
pub fn read_table_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let to_err = |e: csv::Error| HalluxError::Format(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(to_err)?;
    let header = r.headers().map_err(to_err)?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(to_err)?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

/// Timed inference modes of one bundle.
fn bundle_modes(bundle: &ModelBundle) -> Vec<(String, InferencePath)> {
    let mut modes: Vec<(String, InferencePath)> = bundle
        .streams
        .iter()
        .enumerate()
        .map(|(i, s)| (s.modality.to_string(), InferencePath::Stream(i)))
        .collect();
    if bundle.streams.len() > 1 {
        modes.push((format!("fusion-{}", bundle.fusion.strategy), InferencePath::Fusion));
    }
    if let Some(h) = &bundle.hallucination {
        modes.push((format!("hallucinated-{}", h.mode), InferencePath::Hallucinated));
    }
    modes
}

const WARMUP: usize = 5;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median single-clip inference time per mode over `reps` timed runs,
/// after warm-up. Clips cycle through `ids`.
pub fn timing_benchmark(bundle: &ModelBundle, data: &EncodedDataset, ids: &[String], reps: usize) -> Result<Vec<TimingRow>> {
    let modes: Vec<(String, &ModelBundle, InferencePath)> =
        bundle_modes(bundle).into_iter().map(|(m, p)| (m, bundle, p)).collect();
    timing_benchmark_modes(&modes, data, ids, reps)
}

/// [`timing_benchmark`] over explicitly named modes, possibly from several
/// bundles. Modes are interleaved within each repetition so that drift in
/// machine load affects all of them alike.
pub fn timing_benchmark_modes(
    modes: &[(String, &ModelBundle, InferencePath)],
    data: &EncodedDataset,
    ids: &[String],
    reps: usize,
) -> Result<Vec<TimingRow>> {
    if reps < 10 {
        return Err(HalluxError::InvalidArgument(format!("timing needs at least 10 repetitions, got {reps}")));
    }
    if ids.is_empty() {
        return Err(HalluxError::InvalidArgument("timing needs at least one clip".into()));
    }
    let rows = data.rows(ids)?;
    let mut prepared = Vec::new();
    for (_, bundle, path) in modes {
        let graph = bundle.inference_graph(*path)?;
        let probs = graph.output_id("probs")?;
        let clips: Vec<Bindings> = rows
            .iter()
            .map(|&r| {
                let mut b = Bindings::new();
                for (i, s) in bundle.streams.iter().enumerate() {
                    let wanted = match path {
                        InferencePath::Stream(j) => i == *j,
                        InferencePath::Fusion => true,
                        InferencePath::Hallucinated => i == 0,
                    };
                    if wanted {
                        b.insert(format!("x{i}"), data.batch(s.modality, &[r])?);
                    }
                }
                Ok(b)
            })
            .collect::<Result<_>>()?;
        prepared.push((graph, probs, clips));
    }
    let mut times = vec![Vec::with_capacity(reps); modes.len()];
    for r in 0..WARMUP + reps {
        for (k, (graph, probs, clips)) in prepared.iter().enumerate() {
            let t = Instant::now();
            let out = graph.evaluate(&clips[r % clips.len()], &[*probs])?;
            let ms = t.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(out);
            if r >= WARMUP {
                times[k].push(ms);
            }
        }
    }
    Ok(modes
        .iter()
        .zip(times)
        .map(|((mode, _, _), t)| TimingRow { mode: mode.clone(), ms_per_clip: median(t) })
        .collect())
}

/// Merge timing rows, keeping the first measurement of each mode.
pub fn merge_timings(rows: impl IntoIterator<Item = TimingRow>) -> Vec<TimingRow> {
    let mut seen = BTreeSet::new();
    rows.into_iter().filter(|r| seen.insert(r.mode.clone())).collect()
}
