//! Grid runner: one simulation per (strategy, κ, α, seed) cell.
//!
//! Layout of the output directory:
//!
//! ```text
//! <out>/manifest.json          index of all cells and their status
//! <out>/config.toml            the config that produced the grid
//! <out>/cells/<id>.jsonl       one RoundReport per line
//! <out>/cells/<id>.csv         flat per-round metrics
//! ```
//!
//! Every file is written to a temporary name and renamed into place, so an
//! interrupted run never leaves a half-written cell that looks complete.
//! Re-running skips cells the manifest marks as done.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Cell, ExperimentConfig};
use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::federation::Simulation;
use crate::metrics::{final_accuracy, rounds_to_fraction, settling_round, CsvRow, RoundReport};

pub const MANIFEST: &str = "manifest.json";
/// Rounds averaged into a cell's final accuracy.
pub const FINAL_WINDOW: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub id: String,
    pub strategy: String,
    pub kappa: f64,
    pub alpha: String,
    pub seed: u64,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_sparsity: Option<f64>,
    /// First round reaching 95% of the final accuracy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds_to_95: Option<usize>,
    /// First round from which accuracy stays at or above 95% of the final accuracy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub settled_95: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes_up_total: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes_down_total: Option<u64>,
    pub jsonl: PathBuf,
    pub csv: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub cells: Vec<CellRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Option<Self>> {
        match fs::read_to_string(path) {
            Ok(s) => Ok(Some(serde_json::from_str(&s)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn count(&self, status: CellStatus) -> usize {
        self.cells.iter().filter(|c| c.status == status).count()
    }
}

/// Writes `bytes` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct GridOptions {
    /// Worker threads for independent cells; 0 uses the rayon default.
    pub jobs: usize,
    /// Re-run cells even if the manifest marks them done.
    pub force: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSummary {
    pub total: usize,
    pub executed: usize,
    pub skipped: usize,
    pub failed: usize,
}

fn record_for(cell: &Cell) -> CellRecord {
    let id = cell.id();
    CellRecord {
        strategy: cell.strategy.name().into(),
        kappa: cell.kappa,
        alpha: cell.alpha.label(),
        seed: cell.seed,
        status: CellStatus::Pending,
        error: None,
        final_accuracy: None,
        final_sparsity: None,
        rounds_to_95: None,
        settled_95: None,
        bytes_up_total: None,
        bytes_down_total: None,
        jsonl: PathBuf::from("cells").join(format!("{id}.jsonl")),
        csv: PathBuf::from("cells").join(format!("{id}.csv")),
        id,
    }
}

fn write_cell_files(out: &Path, rec: &CellRecord, reports: &[RoundReport]) -> Result<()> {
    let mut jsonl = Vec::new();
    for r in reports {
        serde_json::to_writer(&mut jsonl, r)?;
        jsonl.push(b'\n');
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(CsvRow::from_report(
            r,
            &rec.strategy,
            rec.kappa,
            &rec.alpha,
            rec.seed,
        ))?;
    }
    let csv_bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    write_atomic(&out.join(&rec.jsonl), &jsonl)?;
    write_atomic(&out.join(&rec.csv), &csv_bytes)?;
    Ok(())
}

fn run_cell(cfg: &ExperimentConfig, cell: &Cell, data: &SplitDataset) -> Result<Vec<RoundReport>> {
    let run = cfg.run_config(cell)?;
    let mut sim = Simulation::with_data(&run, data, cell.seed)?;
    sim.run(|r| {
        log::debug!("{} round {} acc {:.4}", cell.id(), r.round, r.test_accuracy);
        Ok(())
    })
}

fn summarize(rec: &mut CellRecord, reports: &[RoundReport]) {
    let acc: Vec<f64> = reports.iter().map(|r| r.test_accuracy).collect();
    let fin = final_accuracy(&acc, FINAL_WINDOW);
    rec.final_accuracy = fin;
    rec.final_sparsity = reports.last().map(|r| r.sparsity);
    rec.rounds_to_95 = fin.and_then(|f| rounds_to_fraction(&acc, f, 0.95));
    rec.settled_95 = fin.map(|f| settling_round(&acc, f, 0.95));
    rec.bytes_up_total = Some(reports.iter().map(|r| r.bytes_up).sum());
    rec.bytes_down_total = Some(reports.iter().map(|r| r.bytes_down).sum());
}

/// Runs every pending cell of the grid under `out`.
pub fn run_grid(cfg: &ExperimentConfig, out: &Path, opts: &GridOptions) -> Result<GridSummary> {
    cfg.validate()?;
    fs::create_dir_all(out.join("cells"))?;
    write_atomic(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let manifest_path = out.join(MANIFEST);

    let previous: BTreeMap<String, CellRecord> = Manifest::load(&manifest_path)?
        .map(|m| m.cells.into_iter().map(|c| (c.id.clone(), c)).collect())
        .unwrap_or_default();

    let cells = cfg.cells();
    let mut records = Vec::with_capacity(cells.len());
    let mut todo = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        let fresh = record_for(cell);
        match previous.get(&fresh.id) {
            Some(p)
                if !opts.force
                    && p.status == CellStatus::Done
                    && out.join(&p.jsonl).exists()
                    && out.join(&p.csv).exists() =>
            {
                records.push(p.clone())
            }
            _ => {
                records.push(fresh);
                todo.push(i);
            }
        }
    }
    let skipped = cells.len() - todo.len();
    let manifest = Mutex::new(Manifest { cells: records });
    let save = |m: &Manifest| -> Result<()> {
        write_atomic(&manifest_path, serde_json::to_string_pretty(m)?.as_bytes())
    };
    save(&manifest.lock().unwrap())?;
    if todo.is_empty() {
        return Ok(GridSummary {
            total: cells.len(),
            executed: 0,
            skipped,
            failed: 0,
        });
    }

    let data = cfg.dataset.source().load()?;
    let work = |i: &usize| -> Result<()> {
        let cell = &cells[*i];
        log::info!("running {}", cell.id());
        let mut rec = manifest.lock().unwrap().cells[*i].clone();
        match run_cell(cfg, cell, &data).and_then(|reports| {
            write_cell_files(out, &rec, &reports)?;
            Ok(reports)
        }) {
            Ok(reports) => {
                summarize(&mut rec, &reports);
                rec.status = CellStatus::Done;
                rec.error = None;
            }
            Err(e) => {
                log::error!("cell {} failed: {e}", cell.id());
                rec.status = CellStatus::Failed;
                rec.error = Some(e.to_string());
            }
        }
        let mut m = manifest.lock().unwrap();
        m.cells[*i] = rec;
        save(&m)
    };

    let results: Vec<Result<()>> = if opts.jobs == 1 {
        todo.iter().map(work).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        pool.install(|| todo.par_iter().map(work).collect())
    };
    for r in results {
        r?;
    }
    let m = manifest.into_inner().unwrap();
    Ok(GridSummary {
        total: cells.len(),
        executed: todo.len(),
        skipped,
        failed: m.count(CellStatus::Failed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    const TINY: &str = r#"
        strategy = ["fedavg", "fedpai_u_server"]
        rounds = 2
        num_clients = 4
        clients_per_round = 0.5
        kappa = [1.0, 0.5]
        alpha = 1.0
        seeds = [0, 1]
        [dataset]
        kind = "synthetic"
        num_classes = 3
        samples_per_class = 20
        input_dim = 4
        [model]
        kind = "mlp"
        hidden = [8]
        [training]
        local_epochs = 1
        batch_size = 8
        grasp_batch = 16
    "#;

    #[test]
    fn grid_writes_all_cells_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(TINY).unwrap();
        let opts = GridOptions {
            jobs: 1,
            force: false,
        };
        let s = run_grid(&cfg, dir.path(), &opts).unwrap();
        assert_eq!((s.total, s.executed, s.skipped, s.failed), (8, 8, 0, 0));
        let m = Manifest::load(&dir.path().join(MANIFEST)).unwrap().unwrap();
        assert_eq!(m.cells.len(), 8);
        for c in &m.cells {
            assert_eq!(c.status, CellStatus::Done);
            assert!(c.final_accuracy.is_some());
            let csv = fs::read_to_string(dir.path().join(&c.csv)).unwrap();
            assert_eq!(csv.lines().count(), 3);
        }

        // Simulate an interrupt that lost one cell.
        let lost = dir.path().join(&m.cells[3].csv);
        fs::remove_file(&lost).unwrap();
        let s = run_grid(&cfg, dir.path(), &opts).unwrap();
        assert_eq!((s.executed, s.skipped), (1, 7));
        assert!(lost.exists());
    }

    #[test]
    fn failures_are_recorded_per_cell() {
        let dir = tempfile::tempdir().unwrap();
        // Six training samples cannot give 50 clients one sample each.
        let text = TINY
            .replace("num_clients = 4", "num_clients = 50")
            .replace("samples_per_class = 20", "samples_per_class = 3");
        let cfg = parse_config(&text).unwrap();
        let s = run_grid(
            &cfg,
            dir.path(),
            &GridOptions {
                jobs: 1,
                force: false,
            },
        )
        .unwrap();
        assert_eq!(s.failed, 8);
        let m = Manifest::load(&dir.path().join(MANIFEST)).unwrap().unwrap();
        assert!(m.cells.iter().all(|c| c.error.is_some()));
    }
}
