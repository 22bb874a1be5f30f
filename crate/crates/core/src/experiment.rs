//! The perturbation study: build a prior map with SLAM on the mapping
//! sequence, then run every evaluation sequence in each mode against
//! increasingly displaced copies of that map.

use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use thiserror::Error;

use crate::eval::{ate_rmse, runtime_stats, EvalError, TrajectoryRecord};
use crate::graph::{FactorGraph, GraphError, Mode, OptimizationReport, SolverConfig, Weighting};
use crate::map_store::{MapError, MarkerId, MarkerMap, PerturbationConfig};
use crate::se3::Pose;
use crate::sim::{derive_seed, simulate_sequence, DatasetRecipe, Environment, NoiseConfig, Sequence, SimError};

/// Standard displacement sweep in meters.
pub const DEFAULT_SWEEP: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

const PERTURB_TAG: u64 = 0xD1_5B;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("marker {0} is never observed in the mapping sequence")]
    UnobservedMarker(MarkerId),
    #[error("invalid noise configuration")]
    InvalidNoise,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub recipe: DatasetRecipe,
    pub noise: NoiseConfig,
    pub solver: SolverConfig,
    pub deltas: Vec<f64>,
    pub modes: Vec<Mode>,
    pub out_dir: Option<PathBuf>,
    /// Run cells on the rayon pool. Results are identical either way, but
    /// per-frame timings are only comparable across a serial run.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            recipe: DatasetRecipe::default(),
            noise: NoiseConfig::default(),
            solver: SolverConfig::default(),
            deltas: DEFAULT_SWEEP.to_vec(),
            modes: Mode::ALL.to_vec(),
            out_dir: None,
            parallel: false,
        }
    }
}

impl ExperimentConfig {
    pub fn weighting(&self) -> Weighting {
        Weighting::from_noise(&self.noise)
    }
}

/// The simulated world plus its mapping and evaluation sequences.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub environment: Environment,
    pub mapping: Sequence,
    pub evaluation: Vec<Sequence>,
}

pub fn simulate_dataset(cfg: &ExperimentConfig) -> Result<Dataset, ExperimentError> {
    if !cfg.noise.is_valid() {
        return Err(ExperimentError::InvalidNoise);
    }
    let environment = cfg.recipe.environment()?;
    let mapping = simulate_sequence("mapping", &cfg.recipe.mapping_spec(), &environment, &cfg.noise)?;
    let evaluation = cfg
        .recipe
        .evaluation_specs()
        .iter()
        .enumerate()
        .map(|(i, spec)| simulate_sequence(&format!("seq{:02}", i + 1), spec, &environment, &cfg.noise))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        environment,
        mapping,
        evaluation,
    })
}

/// Result of running one sequence through the per-frame pipeline.
#[derive(Clone, Debug)]
pub struct SequenceRun {
    pub trajectory: TrajectoryRecord,
    pub reports: Vec<OptimizationReport>,
    pub graph: FactorGraph,
}

/// Feeds every frame of `seq` to a fresh graph in `mode`. `origin` anchors
/// the first keyframe in Slam mode.
pub fn run_sequence(
    seq: &Sequence,
    mode: Mode,
    prior: Option<&MarkerMap>,
    weighting: Weighting,
    solver: SolverConfig,
    origin: Option<Pose>,
) -> Result<SequenceRun, ExperimentError> {
    let mut graph = FactorGraph::with_mode(mode, prior, weighting, solver)?;
    if let Some(origin) = origin {
        graph.set_origin(origin);
    }
    let mut reports = Vec::with_capacity(seq.frames.len());
    for (frame, odom) in seq.frames.iter().zip(&seq.odometry) {
        reports.push(graph.process_frame(frame, odom.as_ref())?);
    }
    let trajectory = TrajectoryRecord::from_samples(graph.trajectory())?;
    Ok(SequenceRun {
        trajectory,
        reports,
        graph,
    })
}

/// Runs Slam on the mapping sequence, anchored at its true first pose so the
/// map lives in the world frame, and returns the final marker estimates.
pub fn build_prior_map(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<MarkerMap, ExperimentError> {
    let origin = dataset.mapping.ground_truth.samples().first().map(|s| s.1);
    let run = run_sequence(
        &dataset.mapping,
        Mode::Slam,
        None,
        cfg.weighting(),
        cfg.solver.clone(),
        origin,
    )?;
    let map = run.graph.marker_map(&format!("slam on mapping sequence, seed {}", cfg.recipe.master_seed));
    if let Some(id) = dataset.environment.markers.ids().find(|id| !map.contains(*id)) {
        return Err(ExperimentError::UnobservedMarker(id));
    }
    Ok(map)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellStats {
    pub ate_rmse: f64,
    pub runtime_mean_ms: f64,
    pub runtime_median_ms: f64,
    pub runtime_p95_ms: f64,
    pub mean_iterations: f64,
    pub frames: usize,
}

/// One (sequence, mode, displacement) cell. Slam rows carry no displacement.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    /// 1-based evaluation sequence number.
    pub sequence: usize,
    pub length_m: f64,
    pub mode: Mode,
    pub delta_p: Option<f64>,
    pub outcome: Result<CellStats, String>,
}

impl ResultRow {
    pub fn stats(&self) -> Option<&CellStats> {
        self.outcome.as_ref().ok()
    }
}

/// Column key of the result tables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Column {
    pub mode: Mode,
    pub delta_p: Option<f64>,
}

/// Mean over the successful rows of a column.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColumnAverage {
    pub column: Column,
    pub rows: usize,
    pub length_m: f64,
    pub ate_rmse: f64,
    pub runtime_mean_ms: f64,
    pub mean_iterations: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

fn mode_rank(m: Mode) -> usize {
    Mode::ALL.iter().position(|x| *x == m).expect("mode listed in ALL")
}

impl ResultTable {
    pub fn new(mut rows: Vec<ResultRow>) -> Self {
        rows.sort_by(|a, b| {
            a.sequence
                .cmp(&b.sequence)
                .then(mode_rank(a.mode).cmp(&mode_rank(b.mode)))
                .then(a.delta_p.unwrap_or(-1.0).total_cmp(&b.delta_p.unwrap_or(-1.0)))
        });
        Self { rows }
    }

    /// Distinct columns in (mode, displacement) order.
    pub fn columns(&self) -> Vec<Column> {
        let mut cols: Vec<Column> = Vec::new();
        for r in &self.rows {
            let c = Column {
                mode: r.mode,
                delta_p: r.delta_p,
            };
            if !cols.contains(&c) {
                cols.push(c);
            }
        }
        cols.sort_by(|a, b| {
            mode_rank(a.mode)
                .cmp(&mode_rank(b.mode))
                .then(a.delta_p.unwrap_or(-1.0).total_cmp(&b.delta_p.unwrap_or(-1.0)))
        });
        cols
    }

    pub fn sequences(&self) -> Vec<(usize, f64)> {
        let mut seqs: Vec<(usize, f64)> = Vec::new();
        for r in &self.rows {
            if !seqs.iter().any(|s| s.0 == r.sequence) {
                seqs.push((r.sequence, r.length_m));
            }
        }
        seqs
    }

    pub fn cell(&self, sequence: usize, column: Column) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.sequence == sequence && r.mode == column.mode && r.delta_p == column.delta_p)
    }

    pub fn average(&self, column: Column) -> Option<ColumnAverage> {
        let rows: Vec<(&ResultRow, &CellStats)> = self
            .rows
            .iter()
            .filter(|r| r.mode == column.mode && r.delta_p == column.delta_p)
            .filter_map(|r| r.stats().map(|s| (r, s)))
            .collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&(&ResultRow, &CellStats)) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Some(ColumnAverage {
            column,
            rows: rows.len(),
            length_m: mean(&|(r, _)| r.length_m),
            ate_rmse: mean(&|(_, s)| s.ate_rmse),
            runtime_mean_ms: mean(&|(_, s)| s.runtime_mean_ms),
            mean_iterations: mean(&|(_, s)| s.mean_iterations),
        })
    }

    pub fn averages(&self) -> Vec<ColumnAverage> {
        self.columns().into_iter().filter_map(|c| self.average(c)).collect()
    }

    pub fn errors(&self) -> impl Iterator<Item = &ResultRow> {
        self.rows.iter().filter(|r| r.outcome.is_err())
    }
}

#[derive(Clone, Copy, Debug)]
struct Cell {
    seq_index: usize,
    mode: Mode,
    delta_index: Option<usize>,
}

/// Perturbation seed of one cell, derived from its coordinates.
pub fn cell_seed(master: u64, sequence: usize, mode: Mode, delta_index: usize) -> u64 {
    derive_seed(
        master,
        &[PERTURB_TAG, sequence as u64, mode_rank(mode) as u64, delta_index as u64],
    )
}

fn run_cell(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    prior: &MarkerMap,
    cell: Cell,
) -> Result<CellStats, ExperimentError> {
    let seq = &dataset.evaluation[cell.seq_index];
    let map = match cell.delta_index {
        Some(k) => Some(
            PerturbationConfig {
                delta: cfg.deltas[k],
                seed: cell_seed(cfg.recipe.master_seed, cell.seq_index + 1, cell.mode, k),
            }
            .apply(prior)?,
        ),
        None => None,
    };
    let run = run_sequence(seq, cell.mode, map.as_ref(), cfg.weighting(), cfg.solver.clone(), None)?;
    // half a frame period pairs every estimate with its own ground-truth sample
    let max_dt = 0.5 / seq.spec.rate;
    let ate = ate_rmse(&run.trajectory, &seq.ground_truth, max_dt)?;
    let rt = runtime_stats(&run.reports)?;
    let iters = run.reports.iter().map(|r| r.iterations as f64).sum::<f64>() / run.reports.len() as f64;
    Ok(CellStats {
        ate_rmse: ate.rmse,
        runtime_mean_ms: rt.mean_ms,
        runtime_median_ms: rt.median_ms,
        runtime_p95_ms: rt.p95_ms,
        mean_iterations: iters,
        frames: run.reports.len(),
    })
}

/// Runs every (sequence, mode, displacement) cell. Slam runs once per
/// sequence since it never reads the map. Failing cells become error rows.
pub fn run_matrix(cfg: &ExperimentConfig, dataset: &Dataset, prior: &MarkerMap) -> ResultTable {
    let mut cells = Vec::new();
    for seq_index in 0..dataset.evaluation.len() {
        for &mode in &cfg.modes {
            if mode.uses_prior_map() {
                for k in 0..cfg.deltas.len() {
                    cells.push(Cell {
                        seq_index,
                        mode,
                        delta_index: Some(k),
                    });
                }
            } else {
                cells.push(Cell {
                    seq_index,
                    mode,
                    delta_index: None,
                });
            }
        }
    }
    let row = |cell: &Cell| ResultRow {
        sequence: cell.seq_index + 1,
        length_m: dataset.evaluation[cell.seq_index].ground_truth.path_length(),
        mode: cell.mode,
        delta_p: cell.delta_index.map(|k| cfg.deltas[k]),
        outcome: run_cell(cfg, dataset, prior, *cell).map_err(|e| e.to_string()),
    };
    let rows = if cfg.parallel {
        cells.par_iter().map(row).collect()
    } else {
        cells.iter().map(row).collect()
    };
    ResultTable::new(rows)
}

/// Simulates the dataset, builds the prior map and runs the matrix.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Dataset, MarkerMap, ResultTable), ExperimentError> {
    let dataset = simulate_dataset(cfg)?;
    let prior = build_prior_map(cfg, &dataset)?;
    let table = run_matrix(cfg, &dataset, &prior);
    Ok((dataset, prior, table))
}

/// Settings that shape the numbers in the tables, one `key: value` per line.
pub fn describe(cfg: &ExperimentConfig) -> String {
    let n = &cfg.noise;
    let s = &cfg.solver;
    let r = &cfg.recipe;
    let mut out = String::new();
    let _ = writeln!(out, "master_seed: {}", r.master_seed);
    let _ = writeln!(
        out,
        "dataset: {} markers, {} Hz, mapping {} s / {} m, {} evaluation sequences of {} s",
        r.n_markers,
        r.rate,
        r.mapping_duration,
        r.mapping_length,
        r.evaluation_lengths.len(),
        r.evaluation_duration
    );
    let _ = writeln!(
        out,
        "noise: detection {} m per m of range, {} deg; odometry {} m, {} deg per step",
        n.detection_trans_sigma_per_m,
        n.detection_rot_sigma.to_degrees(),
        n.odometry_trans_sigma,
        n.odometry_rot_sigma.to_degrees()
    );
    let _ = writeln!(
        out,
        "solver: levenberg-marquardt, lambda0 {}, factor {}, lambda_max {}, rel_tol {}, grad_tol {}, max_iters {}, {:?} jacobians",
        s.lambda_init, s.lambda_factor, s.lambda_max, s.rel_tol, s.grad_tol, s.max_iters, s.jacobians
    );
    let _ = writeln!(
        out,
        "sweep: {:?} m; modes: {}",
        cfg.deltas,
        cfg.modes.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
    );
    let _ = writeln!(out, "perturbation: positions only, uniform 3D directions, fresh draw per cell");
    let _ = writeln!(out, "ate: translation rmse after SE(3) alignment, unit scale, max_dt half the frame period");
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

/// Which metric a rendered table reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableKind {
    /// Trajectory error; fully determined by the seeds.
    Ate,
    /// Per-frame solver wall time and iteration counts; machine dependent.
    Runtime,
}

fn delta_label(d: Option<f64>) -> String {
    d.map(|d| format!("{d}")).unwrap_or_default()
}

/// Renders `table` as long-format CSV (one line per cell, then one average
/// line per column) or as a wide markdown table with sequences as rows and
/// (mode, displacement) columns.
pub fn render_tables(table: &ResultTable, format: TableFormat, kind: TableKind) -> String {
    match format {
        TableFormat::Csv => render_csv(table, kind),
        TableFormat::Markdown => render_markdown(table, kind),
    }
}

fn render_csv(table: &ResultTable, kind: TableKind) -> String {
    let mut out = String::new();
    match kind {
        TableKind::Ate => out.push_str("sequence,length_m,mode,delta_p_m,ate_rmse_m,error\n"),
        TableKind::Runtime => out.push_str(
            "sequence,length_m,mode,delta_p_m,runtime_mean_ms,runtime_median_ms,runtime_p95_ms,mean_iterations,error\n",
        ),
    }
    for r in &table.rows {
        let head = format!("{},{},{},{}", r.sequence, r.length_m, r.mode.name(), delta_label(r.delta_p));
        let body = match (&r.outcome, kind) {
            (Ok(s), TableKind::Ate) => format!("{},", s.ate_rmse),
            (Ok(s), TableKind::Runtime) => format!(
                "{},{},{},{},",
                s.runtime_mean_ms, s.runtime_median_ms, s.runtime_p95_ms, s.mean_iterations
            ),
            (Err(e), TableKind::Ate) => format!(",{}", csv_field(e)),
            (Err(e), TableKind::Runtime) => format!(",,,,{}", csv_field(e)),
        };
        let _ = writeln!(out, "{head},{body}");
    }
    for a in table.averages() {
        let head = format!("average,{},{},{}", a.length_m, a.column.mode.name(), delta_label(a.column.delta_p));
        let _ = match kind {
            TableKind::Ate => writeln!(out, "{head},{},", a.ate_rmse),
            TableKind::Runtime => writeln!(out, "{head},{},,,{},", a.runtime_mean_ms, a.mean_iterations),
        };
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn column_title(c: &Column) -> String {
    match c.delta_p {
        None => c.mode.name().to_string(),
        Some(d) => format!("{} {:.2}", c.mode.name(), d),
    }
}

fn render_markdown(table: &ResultTable, kind: TableKind) -> String {
    let cols = table.columns();
    let mut header = vec!["sequence".to_string(), "length [m]".to_string()];
    header.extend(cols.iter().map(column_title));
    let value = |s: &CellStats| match kind {
        TableKind::Ate => format!("{:.3}", s.ate_rmse),
        TableKind::Runtime => format!("{:.2}", s.runtime_mean_ms),
    };
    let mut lines: Vec<Vec<String>> = Vec::new();
    for (seq, len) in table.sequences() {
        let mut line = vec![format!("{seq}"), format!("{len:.2}")];
        for c in &cols {
            line.push(match table.cell(seq, *c).map(|r| &r.outcome) {
                Some(Ok(s)) => value(s),
                Some(Err(_)) => "error".to_string(),
                None => "-".to_string(),
            });
        }
        lines.push(line);
    }
    let avgs: Vec<Option<ColumnAverage>> = cols.iter().map(|c| table.average(*c)).collect();
    let mut avg_line = vec!["average".to_string()];
    avg_line.push(
        avgs.iter()
            .flatten()
            .next()
            .map(|a| format!("{:.2}", a.length_m))
            .unwrap_or_else(|| "-".to_string()),
    );
    for a in &avgs {
        avg_line.push(match (a, kind) {
            (Some(a), TableKind::Ate) => format!("{:.3}", a.ate_rmse),
            (Some(a), TableKind::Runtime) => format!("{:.2}", a.runtime_mean_ms),
            (None, _) => "-".to_string(),
        });
    }
    lines.push(avg_line);

    let widths: Vec<usize> = (0..header.len())
        .map(|i| lines.iter().map(|l| l[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let fmt_line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}", w = *w))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = match kind {
        TableKind::Ate => String::from("ATE RMSE [m]\n\n"),
        TableKind::Runtime => String::from("Mean optimization time per frame [ms]\n\n"),
    };
    out.push_str(&fmt_line(&header));
    let rule: Vec<String> = widths.iter().map(|w| format!("{}:", "-".repeat(w.saturating_sub(1).max(2)))).collect();
    out.push_str(&format!("|{}|\n", rule.iter().map(|r| format!(" {r} ")).collect::<Vec<_>>().join("|")));
    for l in &lines {
        out.push_str(&fmt_line(l));
    }
    out
}
