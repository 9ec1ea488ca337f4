//! Seeded parameter sweeps: every (grid point, seed) cell trains a model
//! from scratch, solves once and records its metrics.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use lae_gdm::config::RunConfig;
use lae_gdm::trainer::{config_hash, StepMetrics};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commands::Pipeline;
use crate::{CliError, SweepKind};

/// Header comment identifying the column layout of sweep CSVs.
pub const SCHEMA: &str = "# lae-sweep v1";

/// GU count used by the AeBS-count sweep.
pub const AEBS_SWEEP_GUS: usize = 12;

pub fn default_grid(kind: SweepKind) -> Vec<f64> {
    match kind {
        SweepKind::Aebs => vec![2.0, 3.0],
        SweepKind::Gu => vec![8.0, 12.0, 16.0],
        SweepKind::Range => vec![100.0, 150.0, 200.0],
        SweepKind::Steps => vec![5.0, 15.0, 25.0],
        SweepKind::Lr => vec![1e-4, 3e-4, 1e-3],
    }
}

fn whole(kind: SweepKind, v: f64) -> Result<usize, CliError> {
    if v.fract() != 0.0 || v < 1.0 {
        return Err(CliError::Config(format!("{kind:?} sweep value {v} is not a positive integer")));
    }
    Ok(v as usize)
}

/// Checks a grid against the supported ranges.
pub fn validate_grid(kind: SweepKind, grid: &[f64]) -> Result<(), CliError> {
    for &v in grid {
        if !v.is_finite() {
            return Err(CliError::Config(format!("{kind:?} sweep value {v} is not finite")));
        }
        match kind {
            SweepKind::Aebs => {
                let k = whole(kind, v)?;
                if !(2..=5).contains(&k) {
                    return Err(CliError::Config(format!("AeBS count {k} outside [2, 5]")));
                }
            }
            SweepKind::Range => {
                if !(100.0..=250.0).contains(&v) {
                    return Err(CliError::Config(format!("communication range {v} m outside [100, 250]")));
                }
            }
            SweepKind::Gu | SweepKind::Steps => {
                whole(kind, v)?;
            }
            SweepKind::Lr => {
                if v <= 0.0 {
                    return Err(CliError::Config(format!("learning rate {v} must be positive")));
                }
            }
        }
    }
    Ok(())
}

/// The configuration of one grid point.
pub fn apply(base: &RunConfig, kind: SweepKind, value: f64) -> RunConfig {
    let mut cfg = base.clone();
    match kind {
        SweepKind::Aebs => {
            cfg.network.num_aebs = value as usize;
            cfg.network.num_gus = AEBS_SWEEP_GUS;
        }
        SweepKind::Gu => cfg.network.num_gus = value as usize,
        SweepKind::Range => cfg.network.comm_radius_m = value,
        SweepKind::Steps => {
            cfg.diffusion.steps = value as usize;
            cfg.train.timestep_samples = cfg.train.timestep_samples.min(cfg.diffusion.steps);
        }
        SweepKind::Lr => cfg.train.learning_rate = value,
    }
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
    pub utility: Option<f64>,
    pub sum_rate: Option<f64>,
    pub coverage: Option<f64>,
    pub reward: Option<f64>,
    pub feasible: Option<bool>,
    /// Mean training reward over the last ten steps.
    pub final_reward: Option<f64>,
    pub wall_time: f64,
    pub error: Option<String>,
}

pub struct Cell {
    pub row: CellRow,
    pub config: RunConfig,
    pub curve: Vec<StepMetrics>,
}

fn final_mean(curve: &[StepMetrics]) -> Option<f64> {
    let tail = &curve[curve.len().saturating_sub(10)..];
    (!tail.is_empty()).then(|| tail.iter().map(|m| m.mean_reward).sum::<f64>() / tail.len() as f64)
}

pub fn run_cell(base: &RunConfig, kind: SweepKind, value: f64, seed: u64) -> Cell {
    let config = apply(base, kind, value);
    let hash = config_hash(&config.snapshot());
    let start = Instant::now();
    let mut curve = Vec::new();
    let result = (|| -> Result<_, lae_gdm::Error> {
        let p = Pipeline::new(config.clone())?;
        let (model, c) = p.train(seed, None, false)?;
        curve = c;
        p.solve(&model, seed)
    })();
    let wall_time = start.elapsed().as_secs_f64();
    let mut row = CellRow {
        value,
        seed,
        config_hash: hash,
        utility: None,
        sum_rate: None,
        coverage: None,
        reward: None,
        feasible: None,
        final_reward: final_mean(&curve),
        wall_time,
        error: None,
    };
    match result {
        Ok(out) => {
            let e = &out.best.evaluation;
            row.utility = Some(e.report.utility);
            row.sum_rate = Some(e.report.sum_rate);
            row.coverage = Some(e.report.coverage);
            row.reward = Some(e.reward);
            row.feasible = Some(e.feasible);
        }
        Err(e) => {
            log::warn!("sweep cell {value} seed {seed} failed: {e}");
            row.error = Some(e.to_string());
        }
    }
    Cell { row, config, curve }
}

/// Runs every cell of `grid x seeds` on the rayon pool; the returned cells
/// are in grid-major order whatever the completion order.
pub fn run_sweep(
    base: &RunConfig,
    kind: SweepKind,
    grid: Option<&[f64]>,
    seeds: u64,
    first_seed: u64,
) -> Result<Vec<Cell>, CliError> {
    let grid = grid.map(<[f64]>::to_vec).unwrap_or_else(|| default_grid(kind));
    validate_grid(kind, &grid)?;
    let cells: Vec<(f64, u64)> = grid
        .iter()
        .flat_map(|&v| (0..seeds).map(move |s| (v, first_seed + s)))
        .collect();
    Ok(cells.into_par_iter().map(|(v, s)| run_cell(base, kind, v, s)).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(Stat { mean, std: var.sqrt() })
    }

    pub fn sem(&self, n: usize) -> f64 {
        self.std / (n.max(1) as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub value: f64,
    pub runs: usize,
    pub failures: usize,
    pub utility: Option<Stat>,
    pub sum_rate: Option<Stat>,
    pub coverage: Option<Stat>,
    pub reward: Option<Stat>,
    pub final_reward: Option<Stat>,
    pub feasible_rate: Option<f64>,
}

/// Mean and standard deviation per grid point, in first-seen order.
pub fn summarize(rows: &[CellRow]) -> Vec<SummaryRow> {
    let mut values: Vec<f64> = Vec::new();
    for r in rows {
        if !values.contains(&r.value) {
            values.push(r.value);
        }
    }
    values
        .into_iter()
        .map(|value| {
            let group: Vec<&CellRow> = rows.iter().filter(|r| r.value == value).collect();
            let pick = |f: fn(&CellRow) -> Option<f64>| Stat::of(&group.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            let ok: Vec<bool> = group.iter().filter_map(|r| r.feasible).collect();
            SummaryRow {
                value,
                runs: group.len(),
                failures: group.iter().filter(|r| r.error.is_some()).count(),
                utility: pick(|r| r.utility),
                sum_rate: pick(|r| r.sum_rate),
                coverage: pick(|r| r.coverage),
                reward: pick(|r| r.reward),
                final_reward: pick(|r| r.final_reward),
                feasible_rate: (!ok.is_empty()).then(|| ok.iter().filter(|&&b| b).count() as f64 / ok.len() as f64),
            }
        })
        .collect()
}

fn field(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Run(e.to_string())
}

const CELL_COLUMNS: [&str; 12] = [
    "kind", "value", "seed", "config_hash", "utility", "sum_rate", "coverage", "reward", "feasible", "final_reward",
    "wall_time", "error",
];

const SUMMARY_COLUMNS: [&str; 15] = [
    "kind",
    "value",
    "runs",
    "failures",
    "utility_mean",
    "utility_std",
    "sum_rate_mean",
    "sum_rate_std",
    "coverage_mean",
    "coverage_std",
    "reward_mean",
    "reward_std",
    "final_reward_mean",
    "final_reward_std",
    "feasible_rate",
];

fn kind_name(kind: SweepKind) -> &'static str {
    match kind {
        SweepKind::Aebs => "aebs",
        SweepKind::Gu => "gu",
        SweepKind::Range => "range",
        SweepKind::Steps => "steps",
        SweepKind::Lr => "lr",
    }
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    let mut file = fs::File::create(path).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    writeln!(file, "{SCHEMA}").map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    Ok(csv::Writer::from_writer(file))
}

/// Writes `sweep_<kind>_cells.csv`, `sweep_<kind>_summary.csv`, a
/// configuration per cell under `cells/`, and for step and learning-rate
/// sweeps the training curves in `sweep_<kind>_curves.csv`.
pub fn write_sweep(out: &Path, kind: SweepKind, cells: &[Cell]) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Run(format!("{}: {e}", out.display())))?;
    let name = kind_name(kind);

    let mut w = writer(&out.join(format!("sweep_{name}_cells.csv")))?;
    w.write_record(CELL_COLUMNS).map_err(csv_err)?;
    for c in cells {
        let r = &c.row;
        w.write_record([
            name.to_string(),
            r.value.to_string(),
            r.seed.to_string(),
            r.config_hash.clone(),
            field(r.utility),
            field(r.sum_rate),
            field(r.coverage),
            field(r.reward),
            r.feasible.map(|b| b.to_string()).unwrap_or_default(),
            field(r.final_reward),
            r.wall_time.to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
        let dir = out.join("cells").join(format!("{name}_{}_seed{}", r.value, r.seed));
        fs::create_dir_all(&dir).map_err(|e| CliError::Run(format!("{}: {e}", dir.display())))?;
        fs::write(dir.join("config.toml"), c.config.to_toml())
            .map_err(|e| CliError::Run(format!("{}: {e}", dir.display())))?;
    }
    w.flush().map_err(|e| CliError::Run(e.to_string()))?;

    let rows: Vec<CellRow> = cells.iter().map(|c| c.row.clone()).collect();
    let mut w = writer(&out.join(format!("sweep_{name}_summary.csv")))?;
    w.write_record(SUMMARY_COLUMNS).map_err(csv_err)?;
    for s in summarize(&rows) {
        let pair = |x: &Option<Stat>| match x {
            Some(st) => [st.mean.to_string(), st.std.to_string()],
            None => [String::new(), String::new()],
        };
        let mut rec = vec![name.to_string(), s.value.to_string(), s.runs.to_string(), s.failures.to_string()];
        for st in [&s.utility, &s.sum_rate, &s.coverage, &s.reward, &s.final_reward] {
            rec.extend(pair(st));
        }
        rec.push(field(s.feasible_rate));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Run(e.to_string()))?;

    if matches!(kind, SweepKind::Steps | SweepKind::Lr) {
        let mut w = writer(&out.join(format!("sweep_{name}_curves.csv")))?;
        w.write_record(["kind", "value", "seed", "step", "mean_reward", "max_reward", "feasible_rate"])
            .map_err(csv_err)?;
        for c in cells {
            for m in &c.curve {
                w.write_record([
                    name.to_string(),
                    c.row.value.to_string(),
                    c.row.seed.to_string(),
                    m.step.to_string(),
                    m.mean_reward.to_string(),
                    m.max_reward.to_string(),
                    m.feasible_rate.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| CliError::Run(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(value: f64, coverage: Option<f64>) -> CellRow {
        CellRow {
            value,
            seed: 0,
            config_hash: String::new(),
            utility: coverage,
            sum_rate: coverage,
            coverage,
            reward: coverage,
            feasible: coverage.map(|_| true),
            final_reward: None,
            wall_time: 0.0,
            error: coverage.is_none().then(|| "boom".into()),
        }
    }

    #[test]
    fn grid_ranges_are_enforced() {
        assert!(validate_grid(SweepKind::Aebs, &[2.0, 5.0]).is_ok());
        assert!(validate_grid(SweepKind::Aebs, &[6.0]).is_err());
        assert!(validate_grid(SweepKind::Aebs, &[2.5]).is_err());
        assert!(validate_grid(SweepKind::Range, &[99.0]).is_err());
        assert!(validate_grid(SweepKind::Range, &[250.0]).is_ok());
        assert!(validate_grid(SweepKind::Lr, &[0.0]).is_err());
    }

    #[test]
    fn summary_statistics() {
        let rows = vec![row(2.0, Some(0.5)), row(2.0, Some(0.7)), row(2.0, None), row(3.0, Some(1.0))];
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].runs, 3);
        assert_eq!(s[0].failures, 1);
        let c = s[0].coverage.as_ref().unwrap();
        assert!((c.mean - 0.6).abs() < 1e-12);
        assert!((c.std - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[1].coverage.as_ref().unwrap().std, 0.0);
    }

    #[test]
    fn aebs_sweep_fixes_gu_count() {
        let cfg = apply(&RunConfig::desk(), SweepKind::Aebs, 3.0);
        assert_eq!(cfg.network.num_aebs, 3);
        assert_eq!(cfg.network.num_gus, AEBS_SWEEP_GUS);
        let cfg = apply(&RunConfig::desk(), SweepKind::Steps, 2.0);
        assert_eq!(cfg.train.timestep_samples, 2);
    }

    #[test]
    fn empty_grid_writes_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let cells = run_sweep(&RunConfig::desk(), SweepKind::Range, Some(&[]), 3, 0).unwrap();
        assert!(cells.is_empty());
        write_sweep(dir.path(), SweepKind::Range, &cells).unwrap();
        let text = fs::read_to_string(dir.path().join("sweep_range_summary.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], SCHEMA);
        assert!(lines[1].starts_with("kind,value,runs"));
    }
}
