//! CSV datasets, residual files and the data manifest.
//!
//! Dataset rows are `episode,t,label,<channels...>,demand_<bus>...,setpoint_<gen>...`
//! with values written to 9 significant digits. Residual files carry
//! `episode,t,<channels...>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::estimator::KnownInputs;
use crate::pipeline::{PipelineError, Result};
use crate::plant::{GridModel, MeasurementFrame};
use crate::threat::Dataset;

pub const FORMAT: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

fn data_err(path: &Path, msg: impl std::fmt::Display) -> PipelineError {
    PipelineError::Data(format!("{}: {msg}", path.display()))
}

/// Nine significant digits.
pub fn fmt_value(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let csv_err = |e: csv::Error| data_err(path, e);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| data_err(path, e))?;
    write_text(path, &String::from_utf8(bytes).expect("CSV output is UTF-8"))
}

fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let text = read_text(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| data_err(path, e))?.iter().map(str::to_string).collect();
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>().map_err(|e| data_err(path, e))?;
    Ok((header, rows))
}

fn demand_names(grid: &GridModel) -> Vec<String> {
    (1..=grid.n_bus()).map(|b| format!("demand_{b}")).collect()
}

fn setpoint_names(grid: &GridModel) -> Vec<String> {
    (1..=grid.generators().len()).map(|k| format!("setpoint_{k}")).collect()
}

fn episode_ids(data: &Dataset) -> Vec<usize> {
    let mut ids = vec![0; data.len()];
    for (e, r) in data.episodes.iter().enumerate() {
        ids[r.clone()].iter_mut().for_each(|v| *v = e);
    }
    ids
}

pub fn dataset_header(grid: &GridModel) -> Vec<String> {
    let mut h = vec!["episode".to_string(), "t".into(), "label".into()];
    h.extend(grid.channel_names());
    h.extend(demand_names(grid));
    h.extend(setpoint_names(grid));
    h
}

pub fn write_dataset(path: &Path, grid: &GridModel, data: &Dataset) -> Result<()> {
    let ids = episode_ids(data);
    let rows = data.frames.iter().zip(&data.known).zip(ids).map(|((f, k), e)| {
        let mut r = vec![e.to_string(), f.t.to_string(), f.label.to_string()];
        r.extend(f.z.iter().chain(&k.bus_demand).chain(&k.setpoints).map(|v| fmt_value(*v)));
        r
    });
    write_rows(path, &dataset_header(grid), rows)
}

fn parse<T: std::str::FromStr>(path: &Path, row: usize, s: &str) -> Result<T> {
    s.parse().map_err(|_| data_err(path, format!("row {}: cannot parse {s:?}", row + 1)))
}

/// Group consecutive rows with the same episode id into episodes.
fn episodes_from_ids(ids: &[usize]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=ids.len() {
        if i == ids.len() || ids[i] != ids[start] {
            out.push(start..i);
            start = i;
        }
    }
    out
}

pub fn read_dataset(path: &Path, grid: &GridModel) -> Result<Dataset> {
    let (header, rows) = read_rows(path)?;
    if header != dataset_header(grid) {
        return Err(data_err(path, "header does not match the grid's channels"));
    }
    let m = grid.layout().len();
    let (nb, ng) = (grid.n_bus(), grid.generators().len());
    let mut data = Dataset::empty(grid);
    let mut ids = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        ids.push(parse::<usize>(path, i, &r[0])?);
        let values: Vec<f64> = r.iter().skip(3).map(|s| parse(path, i, s)).collect::<Result<_>>()?;
        let label: usize = parse(path, i, &r[2])?;
        if label >= data.n_classes {
            return Err(data_err(path, format!("row {}: label {label} out of range", i + 1)));
        }
        data.frames.push(MeasurementFrame { t: parse(path, i, &r[1])?, z: values[..m].to_vec(), label });
        data.known.push(KnownInputs {
            bus_demand: values[m..m + nb].to_vec(),
            setpoints: values[m + nb..m + nb + ng].to_vec(),
        });
    }
    data.episodes = episodes_from_ids(&ids);
    Ok(data)
}

pub fn write_residuals(path: &Path, grid: &GridModel, data: &Dataset, residuals: &[Vec<f64>]) -> Result<()> {
    let mut header = vec!["episode".to_string(), "t".into()];
    header.extend(grid.channel_names());
    let ids = episode_ids(data);
    let rows = data.frames.iter().zip(residuals).zip(ids).map(|((f, r), e)| {
        let mut row = vec![e.to_string(), f.t.to_string()];
        row.extend(r.iter().map(|v| fmt_value(*v)));
        row
    });
    write_rows(path, &header, rows)
}

pub fn read_residuals(path: &Path, grid: &GridModel, expected_rows: usize) -> Result<Vec<Vec<f64>>> {
    let (header, rows) = read_rows(path)?;
    if header.len() != grid.layout().len() + 2 {
        return Err(data_err(path, "residual columns do not match the grid's channels"));
    }
    if rows.len() != expected_rows {
        return Err(data_err(path, format!("{} rows, dataset has {expected_rows}", rows.len())));
    }
    rows.iter()
        .enumerate()
        .map(|(i, r)| r.iter().skip(2).map(|s| parse(path, i, s)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub rows: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub format: u32,
    pub seed: u64,
    pub channel_names: Vec<String>,
    /// Per-channel sensor noise standard deviation.
    pub noise_std: Vec<f64>,
    pub files: Vec<FileEntry>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl DataManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &(serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&read_text(path)?).map_err(|e| data_err(path, e))?;
        if m.format != FORMAT {
            return Err(data_err(path, format!("unsupported format {}", m.format)));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::build_default_grid;
    use crate::threat::{build_dataset, EpisodeConfig, Scenario};

    #[test]
    fn dataset_round_trip_to_nine_digits() {
        let g = build_default_grid();
        let cfg = EpisodeConfig { hours: 4, ..Default::default() };
        let data = build_dataset(&g, &[Scenario::normal(), Scenario::covert(1, 0.3)], 2, &cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_dataset(&p, &g, &data).unwrap();
        let back = read_dataset(&p, &g).unwrap();
        assert_eq!(back.episodes, data.episodes);
        assert_eq!(back.labels(), data.labels());
        for (a, b) in back.frames.iter().zip(&data.frames) {
            for (x, y) in a.z.iter().zip(&b.z) {
                assert!((x - y).abs() <= 1e-8 * y.abs().max(1e-300));
            }
        }
        let text = read_text(&p).unwrap();
        assert!(text.starts_with("episode,t,label,flow_1_2,"));
    }

    #[test]
    fn episodes_group_consecutive_ids() {
        assert_eq!(episodes_from_ids(&[0, 0, 1, 1, 1, 2]), vec![0..2, 2..5, 5..6]);
        assert!(episodes_from_ids(&[]).is_empty());
    }
}
