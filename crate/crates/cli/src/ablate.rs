//! Sweep harness: expands the grid, resolves and deduplicates cells, runs them
//! on a bounded worker pool and writes one summary row per cell.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use eeg2img::evalsuite::MetricReport;
use eeg2img::Result;
use toml::{Table, Value};

use crate::commands::run_harness;
use crate::config::{Harness, RunConfig};
use crate::output::{csv_field, RunDir};

pub type Overrides = Vec<(String, Value)>;

/// Grid cells in lexicographic key order with the last key varying fastest,
/// followed by the explicit cells.
pub fn expand(cfg: &RunConfig) -> Vec<Overrides> {
    let mut cells: Vec<Overrides> = vec![Vec::new()];
    for (key, values) in &cfg.ablate.grid {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    if cfg.ablate.grid.is_empty() {
        cells.clear();
    }
    cells.extend(cfg.ablate.cells.iter().map(|t| t.iter().map(|(k, v)| (k.clone(), v.clone())).collect()));
    cells
}

fn describe(o: &Overrides) -> String {
    o.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellStatus {
    Ok(Vec<MetricReport>),
    /// The cell's config is illegal; not run.
    Skipped(String),
    /// Same resolved config as an earlier cell; not run.
    Duplicate(usize),
    Failed(String),
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub index: usize,
    pub overrides: Overrides,
    pub config: Option<RunConfig>,
    pub status: CellStatus,
}

pub const REPRESENTATION_METRICS: [&str; 3] = ["kmeans_accuracy", "knn_accuracy", "classification_accuracy"];
pub const GENERATION_METRICS: [&str; 4] = ["class_match", "oracle_real_accuracy", "inception_score", "fid"];

fn metric_columns(h: Harness) -> Vec<&'static str> {
    let mut cols = REPRESENTATION_METRICS.to_vec();
    if h == Harness::Generation {
        cols.extend(GENERATION_METRICS);
    }
    cols
}

/// `summary.csv`: one row per cell, sorted by cell index.
pub fn summary_csv(harness: Harness, results: &[CellResult]) -> String {
    let cols = metric_columns(harness);
    let mut s = String::from("cell,status,overrides,module_set,n_layers_temporal,n_heads_temporal,n_layers_spatial,n_heads_spatial,window_len");
    for c in &cols {
        let _ = write!(s, ",{c}");
    }
    s.push_str(",reason\n");
    for r in results {
        let (status, reason, reports) = match &r.status {
            CellStatus::Ok(rep) => ("ok", String::new(), rep.as_slice()),
            CellStatus::Skipped(why) => ("skipped", why.clone(), &[][..]),
            CellStatus::Duplicate(of) => ("duplicate", format!("same config as cell {of:03}"), &[][..]),
            CellStatus::Failed(why) => ("failed", why.clone(), &[][..]),
        };
        let _ = write!(s, "{:03},{status},{}", r.index, csv_field(&describe(&r.overrides)));
        match &r.config {
            Some(c) => {
                let e = &c.encoder;
                let _ = write!(
                    s,
                    ",{},{},{},{},{},{}",
                    e.module_set(),
                    e.n_layers_temporal,
                    e.n_heads_temporal,
                    e.n_layers_spatial,
                    e.n_heads_spatial,
                    e.window_len
                );
            }
            None => s.push_str(",,,,,,"),
        }
        for c in &cols {
            match reports.iter().find(|m| m.metric == *c) {
                Some(m) => {
                    let _ = write!(s, ",{:.10}", m.value);
                }
                None => s.push(','),
            }
        }
        let _ = writeln!(s, ",{}", csv_field(&reason));
    }
    s
}

/// Resolves every cell against the base file and overrides; illegal cells
/// are skipped and repeated configs marked as duplicates.
pub fn plan(base: &Table, overrides: &Overrides, cfg: &RunConfig) -> Vec<CellResult> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    expand(cfg)
        .into_iter()
        .enumerate()
        .map(|(index, cell)| {
            let mut all = overrides.clone();
            all.extend(cell.iter().cloned());
            let (config, status) = match RunConfig::resolve(base, &all) {
                Err(e) => {
                    log::warn!("event=cell_skipped cell={index:03} reason={:?}", e.to_string());
                    (None, CellStatus::Skipped(e.to_string()))
                }
                Ok(c) => match seen.get(&c.fingerprint()) {
                    Some(&first) => {
                        log::warn!("event=cell_duplicate cell={index:03} same_as={first:03}");
                        (Some(c), CellStatus::Duplicate(first))
                    }
                    None => {
                        seen.insert(c.fingerprint(), index);
                        (Some(c), CellStatus::Ok(Vec::new()))
                    }
                },
            };
            CellResult {
                index,
                overrides: cell,
                config,
                status,
            }
        })
        .collect()
}

/// Runs the planned cells with at most `ablate.workers` in flight; each cell
/// writes to `cell-NNN/` under `out`.
pub fn run(base: &Table, overrides: &Overrides, cfg: &RunConfig, out: &Path) -> Result<Vec<CellResult>> {
    let dir = RunDir::create(out, cfg)?;
    let mut cells = plan(base, overrides, cfg);
    if cells.is_empty() {
        log::warn!("event=empty_sweep");
    }
    let todo: Vec<usize> = (0..cells.len()).filter(|&i| matches!(cells[i].status, CellStatus::Ok(_))).collect();
    let next = AtomicUsize::new(0);
    let done = Mutex::new(Vec::new());
    let workers = cfg.ablate.workers.min(todo.len()).max(1);
    let harness = cfg.ablate.harness;
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = todo.get(k) else { break };
                let cell = &cells[i];
                let c = cell.config.as_ref().expect("runnable cells are resolved");
                log::info!("event=cell_start cell={i:03} overrides={:?}", describe(&cell.overrides));
                let status = RunDir::create(&dir.file(&format!("cell-{i:03}")), c)
                    .and_then(|d| run_harness(c, harness, &d))
                    .map_or_else(
                        |e| {
                            log::error!("event=cell_failed cell={i:03} error={:?}", e.to_string());
                            CellStatus::Failed(e.to_string())
                        },
                        CellStatus::Ok,
                    );
                done.lock().expect("no worker panicked").push((i, status));
            });
        }
    });
    for (i, status) in done.into_inner().expect("no worker panicked") {
        cells[i].status = status;
    }
    dir.write("summary.csv", summary_csv(harness, &cells))?;
    Ok(cells)
}
