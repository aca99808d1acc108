//! Running configured experiments and writing their outputs.
//!
//! An output directory holds `effective_config.toml`, one
//! `metrics_seed_<s>.csv` per seed and `summary.json`. Everything is written
//! into `<dir>.partial` first and renamed on success, so a failed run leaves
//! nothing behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fedsim::{max_accuracy, MetricsRecord, Simulation};
use crate::model::Dataset;

pub const CSV_HEADER: &str = "epoch,seed,accuracy,train_loss,uplink_scalars,downlink_scalars,wall_ms";

/// Records of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
}

/// Runs one seed of `cfg` on already loaded data.
pub fn run_seed(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, seed: u64) -> Result<SeedRun> {
    let clients = cfg.partition_clients(train, seed)?;
    let mut sim = Simulation::new(cfg.sim_config(seed), train, clients)?;
    let records = sim.run(test, cfg.epochs, cfg.eval_every, seed, cfg.record_wall_clock)?;
    Ok(SeedRun { seed, records })
}

/// Runs every seed of `cfg`, in order.
pub fn run_experiment(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<Vec<SeedRun>> {
    cfg.seeds.iter().map(|&s| run_seed(cfg, train, test, s)).collect()
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

pub fn write_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    if records.is_empty() {
        w.write_record(CSV_HEADER.split(',')).map_err(csv_error)?;
    }
    for r in records {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

/// Mean and population standard deviation of one reported quantity across
/// seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Cell {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        Self { mean, std, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    /// `max_accuracy`, `final_accuracy` and `final_train_loss`.
    pub cells: BTreeMap<String, Cell>,
    pub uplink_scalars_per_client: u64,
    pub downlink_scalars_per_client: u64,
}

pub fn summarize(runs: &[SeedRun]) -> Summary {
    let collect = |f: &dyn Fn(&SeedRun) -> f64| Cell::from_values(runs.iter().map(f).collect());
    let mut cells = BTreeMap::new();
    cells.insert(
        "max_accuracy".to_string(),
        collect(&|r| max_accuracy(&r.records).unwrap_or(f64::NAN)),
    );
    cells.insert(
        "final_accuracy".to_string(),
        collect(&|r| r.records.last().map_or(f64::NAN, |m| m.accuracy)),
    );
    cells.insert(
        "final_train_loss".to_string(),
        collect(&|r| r.records.last().map_or(f64::NAN, |m| m.train_loss)),
    );
    let last = runs.first().and_then(|r| r.records.last());
    Summary {
        seeds: runs.iter().map(|r| r.seed).collect(),
        cells,
        uplink_scalars_per_client: last.map_or(0, |m| m.uplink_scalars),
        downlink_scalars_per_client: last.map_or(0, |m| m.downlink_scalars),
    }
}

pub fn metrics_file_name(seed: u64) -> String {
    format!("metrics_seed_{seed}.csv")
}

fn partial_path(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

fn write_all(dir: &Path, cfg: &ExperimentConfig, runs: &[SeedRun]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("effective_config.toml"), cfg.to_toml())?;
    for run in runs {
        write_csv(&run.records, &dir.join(metrics_file_name(run.seed)))?;
    }
    let summary = serde_json::to_string_pretty(&summarize(runs))
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    fs::write(dir.join("summary.json"), summary + "\n")?;
    Ok(())
}

/// Writes the run outputs into `dir`, replacing an existing directory only
/// once everything has been written.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, runs: &[SeedRun]) -> Result<()> {
    let staging = partial_path(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    if let Err(e) = write_all(&staging, cfg, runs) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&staging, dir)?;
    Ok(())
}
