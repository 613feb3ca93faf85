//! Window payloads on disk: HLXT `[channels, samples]` or CSV with one
//! header row of channel names and one row per time step.

use std::io::Read;
use std::path::Path;

use crate::encoding::SignalWindow;
use crate::error::{HalluxError, Result};
use crate::tensor::{load_hlxt, save_hlxt, Tensor};

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn csv_error(path: &Path, e: impl std::fmt::Display) -> HalluxError {
    HalluxError::Format(format!("{}: {e}", path.display()))
}

/// Reads a CSV window; `groups` assigns channels to sensors (pass `None`
/// for consecutive triples).
pub fn read_csv_window(path: &Path, groups: Option<Vec<usize>>) -> Result<SignalWindow> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if names.is_empty() {
        return Err(csv_error(path, "no columns"));
    }
    let mut series = vec![Vec::new(); names.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        for (c, field) in rec.iter().enumerate() {
            let v: f32 = field
                .parse()
                .map_err(|_| csv_error(path, format!("row {}: `{field}` is not a number", row + 2)))?;
            series[c].push(v);
        }
    }
    let groups = groups.unwrap_or_else(|| (0..names.len()).map(|c| c / 3).collect());
    SignalWindow::new(names, groups, series)
}

pub fn write_csv_window(window: &SignalWindow, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(window.names()).map_err(|e| csv_error(path, e))?;
    for t in 0..window.len() {
        let row: Vec<String> = window.series().iter().map(|s| s[t].to_string()).collect();
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn load_window(path: &Path, names: Vec<String>, groups: Vec<usize>) -> Result<SignalWindow> {
    if is_csv(path) {
        let w = read_csv_window(path, Some(groups.clone()))?;
        let series = w.series().to_vec();
        return SignalWindow::new(names, groups, series);
    }
    let t = load_hlxt(path)?;
    if t.ndim() != 2 {
        return Err(HalluxError::Format(format!(
            "{}: window tensor must be [channels, samples], got {:?}",
            path.display(),
            t.shape()
        )));
    }
    let (c, len) = (t.shape()[0], t.shape()[1]);
    let series = t.data().chunks_exact(len).map(<[f32]>::to_vec).collect::<Vec<_>>();
    debug_assert_eq!(series.len(), c);
    SignalWindow::new(names, groups, series)
}

pub(crate) fn window_tensor(window: &SignalWindow) -> Result<Tensor> {
    Tensor::new(vec![window.num_channels(), window.len()], window.series().concat())
}

pub(crate) fn save_window(window: &SignalWindow, path: &Path) -> Result<()> {
    save_hlxt(&window_tensor(window)?, path)
}

/// Payload shape without reading the data: `[C, L]` for windows,
/// the stored shape for HLXT files.
pub(crate) fn peek_shape(path: &Path) -> Result<Vec<usize>> {
    if is_csv(path) {
        let mut rdr = csv::ReaderBuilder::new().from_path(path).map_err(|e| csv_error(path, e))?;
        let c = rdr.headers().map_err(|e| csv_error(path, e))?.len();
        let rows = rdr.records().count();
        return Ok(vec![c, rows]);
    }
    let mut f = std::fs::File::open(path)?;
    let mut head = [0u8; 8];
    f.read_exact(&mut head)?;
    if &head[..4] != b"HLXT" {
        return Err(HalluxError::Format(format!("{}: bad HLXT magic", path.display())));
    }
    let ndim = head[7] as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut word = [0u8; 8];
    for _ in 0..ndim {
        f.read_exact(&mut word)?;
        shape.push(u64::from_le_bytes(word) as usize);
    }
    Ok(shape)
}
