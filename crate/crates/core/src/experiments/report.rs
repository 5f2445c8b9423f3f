use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::RunConfig;
use super::svg;
use super::sweep::RUNS_DIR;
use super::train::{
    read_json, read_records, FailureRecord, RunRecord, RunSummary, CONFIG_FILE, FAILURE_FILE,
    RECORDS_FILE, SUMMARY_FILE,
};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

#[derive(Debug, Clone, PartialEq)]
pub enum RunState {
    Finished(RunSummary),
    Failed(FailureRecord),
    /// Records exist but the run has neither a summary nor a failure file.
    Incomplete,
}

/// One run directory as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub records: Vec<RunRecord>,
    pub state: RunState,
}

impl RunEntry {
    pub fn read(dir: &Path) -> Result<Self> {
        let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let records = if dir.join(RECORDS_FILE).exists() {
            read_records(dir)?
        } else {
            Vec::new()
        };
        if records.windows(2).any(|w| w[0].step > w[1].step) {
            return Err(Error::Config(format!(
                "{}: record steps decrease",
                dir.display()
            )));
        }
        let state = if dir.join(SUMMARY_FILE).exists() {
            RunState::Finished(read_json(&dir.join(SUMMARY_FILE))?)
        } else if dir.join(FAILURE_FILE).exists() {
            RunState::Failed(read_json(&dir.join(FAILURE_FILE))?)
        } else {
            RunState::Incomplete
        };
        Ok(RunEntry {
            dir: dir.to_path_buf(),
            config,
            records,
            state,
        })
    }

    /// Final metrics of a finished run.
    pub fn final_metrics(&self) -> Option<&MetricsReport> {
        match &self.state {
            RunState::Finished(s) => Some(&s.final_record.metrics),
            _ => None,
        }
    }
}

/// Reads every run under `root`. `root` may be one run directory, a
/// directory of run directories, or a sweep output with a `runs/` folder.
pub fn load_runs(root: &Path) -> Result<Vec<RunEntry>> {
    if root.join(CONFIG_FILE).exists() {
        return Ok(vec![RunEntry::read(root)?]);
    }
    let base = if root.join(RUNS_DIR).is_dir() {
        root.join(RUNS_DIR)
    } else {
        root.to_path_buf()
    };
    let mut dirs = Vec::new();
    for e in fs::read_dir(&base).map_err(|e| Error::io(&base, e))? {
        let p = e.map_err(|e| Error::io(&base, e))?.path();
        if p.join(CONFIG_FILE).exists() {
            dirs.push(p);
        }
    }
    dirs.sort();
    dirs.iter().map(|d| RunEntry::read(d)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Precision,
    Recall,
    ResidualEntropy,
    TrainAccuracy,
    ValAccuracy,
    TestAccuracy,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Precision,
        Metric::Recall,
        Metric::ResidualEntropy,
        Metric::TrainAccuracy,
        Metric::ValAccuracy,
        Metric::TestAccuracy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::ResidualEntropy => "residual_entropy",
            Metric::TrainAccuracy => "train_accuracy",
            Metric::ValAccuracy => "val_accuracy",
            Metric::TestAccuracy => "test_accuracy",
        }
    }

    pub fn value(self, m: &MetricsReport) -> Option<f64> {
        match self {
            Metric::Precision => Some(m.precision),
            Metric::Recall => Some(m.recall),
            Metric::ResidualEntropy => Some(m.residual_entropy),
            Metric::TrainAccuracy => Some(m.train_accuracy),
            Metric::ValAccuracy => m.val_accuracy,
            Metric::TestAccuracy => m.test_accuracy,
        }
    }

    /// Residual entropy is better when small; everything else when large.
    pub fn lower_is_better(self) -> bool {
        self == Metric::ResidualEntropy
    }

    fn range(self) -> Option<(f64, f64)> {
        match self {
            Metric::Recall => None,
            _ => Some((0.0, 1.0)),
        }
    }
}

/// Seed statistics of one metric in one (bits, scale) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellStats {
    pub values: Vec<f64>,
    pub best: f64,
    pub worst: f64,
    pub mean: f64,
    pub std: f64,
}

impl CellStats {
    pub fn new(values: Vec<f64>, lower_is_better: bool) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let (best, worst) = if lower_is_better {
            (min, max)
        } else {
            (max, min)
        };
        Some(CellStats {
            values,
            best,
            worst,
            mean,
            std,
        })
    }
}

/// A column of the grid: one parameter scale, labelled by the smallest
/// total parameter count among its runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaleAxis {
    pub alpha: f64,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricGrid {
    pub metric: Metric,
    pub bits: Vec<usize>,
    pub scales: Vec<ScaleAxis>,
    /// `cells[row][col]`, rows following `bits` and columns `scales`.
    pub cells: Vec<Vec<Option<CellStats>>>,
}

impl MetricGrid {
    pub fn cell(&self, bits: usize, alpha: f64) -> Option<&CellStats> {
        let r = self.bits.iter().position(|&b| b == bits)?;
        let c = self.scales.iter().position(|s| s.alpha == alpha)?;
        self.cells[r][c].as_ref()
    }

    /// Best-over-seeds values of one row, in ascending parameter order.
    pub fn best_row(&self, bits: usize) -> Vec<Option<f64>> {
        match self.bits.iter().position(|&b| b == bits) {
            Some(r) => self.cells[r]
                .iter()
                .map(|c| c.as_ref().map(|c| c.best))
                .collect(),
            None => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterPoint {
    pub latent_bits: usize,
    pub alpha: f64,
    pub seed: u64,
    pub param_count: usize,
    pub residual_entropy: f64,
    /// Train minus validation accuracy.
    pub overfit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellCounts {
    pub latent_bits: usize,
    pub alpha: f64,
    pub finished: usize,
    pub failed: usize,
    pub incomplete: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub grids: Vec<MetricGrid>,
    pub counts: Vec<CellCounts>,
    pub scatter: Vec<ScatterPoint>,
}

impl Report {
    pub fn grid(&self, metric: Metric) -> &MetricGrid {
        self.grids
            .iter()
            .find(|g| g.metric == metric)
            .expect("every metric has a grid")
    }
}

/// Aggregates final metrics of every finished run into grids. Records are
/// only read, never modified.
pub fn build_report(runs: &[RunEntry]) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument(
            "report needs at least one run".into(),
        ));
    }
    let key = |e: &RunEntry| (e.config.model.latent_bits, e.config.model.alpha.to_bits());
    let mut bits: Vec<usize> = runs.iter().map(|e| e.config.model.latent_bits).collect();
    bits.sort_unstable();
    bits.dedup();
    let mut scale_map: BTreeMap<u64, usize> = BTreeMap::new();
    for e in runs {
        let n = e.config.model.param_count(&e.config.grammar).total;
        let slot = scale_map.entry(e.config.model.alpha.to_bits()).or_insert(n);
        *slot = (*slot).min(n);
    }
    let mut scales: Vec<ScaleAxis> = scale_map
        .into_iter()
        .map(|(a, n)| ScaleAxis {
            alpha: f64::from_bits(a),
            param_count: n,
        })
        .collect();
    scales.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));

    let mut by_cell: BTreeMap<(usize, u64), Vec<&RunEntry>> = BTreeMap::new();
    for e in runs {
        by_cell.entry(key(e)).or_default().push(e);
    }
    for v in by_cell.values_mut() {
        v.sort_by_key(|e| e.config.seed);
    }

    let grids = Metric::ALL
        .iter()
        .map(|&metric| MetricGrid {
            metric,
            bits: bits.clone(),
            scales: scales.clone(),
            cells: bits
                .iter()
                .map(|&b| {
                    scales
                        .iter()
                        .map(|s| {
                            let values = by_cell
                                .get(&(b, s.alpha.to_bits()))
                                .map(|es| {
                                    es.iter()
                                        .filter_map(|e| {
                                            e.final_metrics().and_then(|m| metric.value(m))
                                        })
                                        .collect()
                                })
                                .unwrap_or_default();
                            CellStats::new(values, metric.lower_is_better())
                        })
                        .collect()
                })
                .collect(),
        })
        .collect();

    let counts = by_cell
        .iter()
        .map(|(&(b, a), es)| CellCounts {
            latent_bits: b,
            alpha: f64::from_bits(a),
            finished: es
                .iter()
                .filter(|e| matches!(e.state, RunState::Finished(_)))
                .count(),
            failed: es
                .iter()
                .filter(|e| matches!(e.state, RunState::Failed(_)))
                .count(),
            incomplete: es
                .iter()
                .filter(|e| matches!(e.state, RunState::Incomplete))
                .count(),
        })
        .collect();

    let scatter = by_cell
        .values()
        .flatten()
        .filter_map(|e| {
            let m = e.final_metrics()?;
            Some(ScatterPoint {
                latent_bits: e.config.model.latent_bits,
                alpha: e.config.model.alpha,
                seed: e.config.seed,
                param_count: e.config.model.param_count(&e.config.grammar).total,
                residual_entropy: m.residual_entropy,
                overfit: m.train_accuracy - m.val_accuracy?,
            })
        })
        .collect();

    Ok(Report {
        grids,
        counts,
        scatter,
    })
}

/// True when each value is at least the previous one minus `tol`.
pub fn is_monotone_non_decreasing(values: &[f64], tol: f64) -> bool {
    values.windows(2).all(|w| w[1] >= w[0] - tol)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("{}: {other:?}", path.display())),
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn write_grid_csv(path: &Path, grid: &MetricGrid, pick: fn(&CellStats) -> String) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["latent_bits".to_string()];
    header.extend(grid.scales.iter().map(|s| s.param_count.to_string()));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (b, row) in grid.bits.iter().zip(&grid.cells) {
        let mut line = vec![b.to_string()];
        line.extend(row.iter().map(|c| c.as_ref().map(pick).unwrap_or_default()));
        w.write_record(&line).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the report into `out` and returns the files written.
///
/// Per metric: `<metric>_{best,worst,mean,std}.csv` grids (rows are latent
/// bits, columns total parameter counts), `<metric>_best.svg` and
/// `<metric>_worst.svg` heatmaps and `<metric>_hist.svg` per-cell seed
/// histograms. Also `entropy_vs_overfit.{csv,svg}` and `runs.csv`.
pub fn write_report(report: &Report, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    for g in &report.grids {
        let name = g.metric.name();
        put(
            format!("{name}_best.svg"),
            svg::heatmap(
                g,
                |c| c.best,
                &format!("{name}, best over seeds"),
                g.metric.range(),
            ),
        )?;
        put(
            format!("{name}_worst.svg"),
            svg::heatmap(
                g,
                |c| c.worst,
                &format!("{name}, worst over seeds"),
                g.metric.range(),
            ),
        )?;
        put(
            format!("{name}_hist.svg"),
            svg::histograms(g, &format!("{name} per cell"), g.metric.range()),
        )?;
    }
    put(
        "entropy_vs_overfit.svg".into(),
        svg::scatter(
            &report
                .scatter
                .iter()
                .map(|p| (p.overfit, p.residual_entropy))
                .collect::<Vec<_>>(),
            "residual entropy vs overfitting",
            "train − val accuracy",
            "residual entropy",
        ),
    )?;
    for g in &report.grids {
        let name = g.metric.name();
        let stats: [(&str, fn(&CellStats) -> String); 4] = [
            ("best", |c| fmt(c.best)),
            ("worst", |c| fmt(c.worst)),
            ("mean", |c| fmt(c.mean)),
            ("std", |c| fmt(c.std)),
        ];
        for (stat, pick) in stats {
            let p = out.join(format!("{name}_{stat}.csv"));
            write_grid_csv(&p, g, pick)?;
            written.push(p);
        }
    }
    let p = out.join("entropy_vs_overfit.csv");
    write_rows(&p, &report.scatter)?;
    written.push(p);
    let p = out.join("runs.csv");
    write_rows(&p, &report.counts)?;
    written.push(p);
    Ok(written)
}

/// Loads every run under `records` and writes the report into `out`.
pub fn report(records: &Path, out: &Path) -> Result<Report> {
    let runs = load_runs(records)?;
    let r = build_report(&runs)?;
    write_report(&r, out)?;
    Ok(r)
}
