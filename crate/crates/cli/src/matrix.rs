//! Ablation matrices and one-parameter sweeps over several seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{Command, RunConfig};
use crate::error::CliError;
use crate::run::{data_key, execute, prepare, Prepared, RunOptions};

/// A named set of overrides applied to the base configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl Cell {
    pub fn new(name: &str, overrides: &[(&str, &str)]) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// Parses `name:key=value,key=value`; the override list may be empty.
    pub fn parse(spec: &str) -> Result<Self, CliError> {
        let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
        if name.trim().is_empty() {
            return Err(CliError::Config(format!("cell `{spec}` has no name")));
        }
        let mut overrides: Vec<(String, String)> = Vec::new();
        for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("cell `{name}`: expected key=value, got `{part}`")))?;
            if overrides.iter().any(|(seen, _)| seen == k.trim()) {
                return Err(CliError::Config(format!("cell `{name}`: duplicate key `{}`", k.trim())));
            }
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Self {
            name: name.trim().to_string(),
            overrides,
        })
    }

    fn describe(&self) -> String {
        if self.overrides.is_empty() {
            return "-".into();
        }
        self.overrides
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Rows removing one ranking-distillation ingredient at a time.
pub fn ranking_preset() -> Vec<Cell> {
    vec![
        Cell::new("full", &[]),
        Cell::new("no-position", &[("distill.gamma_p", "0")]),
        Cell::new("no-confidence", &[("distill.gamma_c", "0")]),
        Cell::new("no-consistency", &[("distill.gamma_o", "0")]),
        Cell::new("no-ranking", &[("distill.lambda_d", "0")]),
    ]
}

/// Rows varying the embedding-distillation mode.
pub fn embedding_preset() -> Vec<Cell> {
    vec![
        Cell::new("full", &[]),
        Cell::new("no-embedding", &[("embed.mode", "none")]),
        Cell::new("no-offset", &[("embed.mode", "offset-disabled")]),
        Cell::new("hint", &[("embed.mode", "hint-align")]),
    ]
}

pub fn preset(name: &str) -> Result<Vec<Cell>, CliError> {
    match name {
        "ranking" => Ok(ranking_preset()),
        "embedding" => Ok(embedding_preset()),
        _ => Err(CliError::Config(format!("unknown preset `{name}` (ranking, embedding)"))),
    }
}

/// Result of one (cell, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct CellRun {
    pub cell: String,
    pub seed: u64,
    /// `Err` holds the failure message; the matrix continues past it.
    pub result: Result<(f64, f64), String>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

struct Job {
    cell: usize,
    seed: u64,
    config: Result<RunConfig, CliError>,
}

/// Runs every cell over every seed as `distill` runs. Cells with the same
/// data settings share one prepared dataset; runs execute in parallel.
pub fn run_matrix(base: &RunConfig, cells: &[Cell], seeds: &[u64], out: Option<&Path>) -> Result<Vec<CellRun>, CliError> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(CliError::Config("a matrix needs at least one cell and one seed".into()));
    }
    let mut names: Vec<&str> = cells.iter().map(|c| c.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| slug(w[0]) == slug(w[1])) {
        return Err(CliError::Config("cell names must be distinct".into()));
    }
    let base_layer: Vec<(String, String)> = base.entries().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let mut jobs = Vec::new();
    for (ci, cell) in cells.iter().enumerate() {
        for &seed in seeds {
            let mut overrides = cell.overrides.clone();
            if overrides.iter().any(|(k, _)| k == "seed") {
                return Err(CliError::Config(format!("cell `{}` overrides the seed", cell.name)));
            }
            overrides.push(("seed".into(), seed.to_string()));
            jobs.push(Job {
                cell: ci,
                seed,
                config: RunConfig::resolve(Command::Distill, &base_layer, &overrides),
            });
        }
    }
    // Unknown or duplicate override keys are configuration errors, not
    // cell failures.
    for job in &jobs {
        if let Err(CliError::Config(m)) = &job.config {
            return Err(CliError::Config(format!("cell `{}`: {m}", cells[job.cell].name)));
        }
    }
    let mut prepared: BTreeMap<String, Result<Prepared, String>> = BTreeMap::new();
    for job in &jobs {
        if let Ok(cfg) = &job.config {
            prepared
                .entry(data_key(cfg))
                .or_insert_with(|| prepare(cfg).map_err(|e| e.to_string()));
        }
    }
    let runs = jobs
        .par_iter()
        .map(|job| {
            let cell = &cells[job.cell];
            let result = match &job.config {
                Err(e) => Err(e.to_string()),
                Ok(cfg) => match &prepared[&data_key(cfg)] {
                    Err(e) => Err(e.clone()),
                    Ok(p) => {
                        let opts = RunOptions {
                            out: out.map(|o| o.join(slug(&cell.name)).join(format!("seed-{}", job.seed))),
                            ..RunOptions::default()
                        };
                        execute(cfg, p, &opts)
                            .map(|o| (o.test.hr, o.test.ndcg))
                            .map_err(|e| e.to_string())
                    }
                },
            };
            CellRun {
                cell: cell.name.clone(),
                seed: job.seed,
                result,
            }
        })
        .collect();
    Ok(runs)
}

fn runs_csv(first_column: &str, label: impl Fn(&CellRun) -> String, runs: &[CellRun], k: &str) -> String {
    let mut s = format!("{first_column},seed,status,hr@{k},ndcg@{k}\n");
    for r in runs {
        match &r.result {
            Ok((hr, ndcg)) => writeln!(s, "{},{},ok,{hr},{ndcg}", label(r), r.seed),
            Err(e) => writeln!(s, "{},{},\"failed: {}\",,", label(r), r.seed, e.replace('"', "'")),
        }
        .expect("string write");
    }
    s
}

/// Mean ± sd of HR and NDCG per cell, in cell order.
pub fn summarize(cells: &[Cell], runs: &[CellRun]) -> Vec<(String, String, usize, (f64, f64), (f64, f64))> {
    cells
        .iter()
        .map(|c| {
            let ok: Vec<(f64, f64)> = runs
                .iter()
                .filter(|r| r.cell == c.name)
                .filter_map(|r| r.result.as_ref().ok().copied())
                .collect();
            let hr: Vec<f64> = ok.iter().map(|x| x.0).collect();
            let nd: Vec<f64> = ok.iter().map(|x| x.1).collect();
            (c.name.clone(), c.describe(), ok.len(), mean_sd(&hr), mean_sd(&nd))
        })
        .collect()
}

fn write(path: PathBuf, text: &str) -> Result<(), CliError> {
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

/// Runs the matrix and writes `ablation.csv`, `report.md` and
/// `config.resolved` under `out`. Returns the markdown table.
pub fn ablate(base: &RunConfig, cells: &[Cell], seeds: &[u64], out: &Path) -> Result<String, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let runs = run_matrix(base, cells, seeds, Some(out))?;
    let k = base.get("train.eval_k");
    let mut md = format!(
        "# ablation\n\nSeeds: {}\n\n| cell | overrides | HR@{k} | NDCG@{k} | runs |\n|---|---|---|---|---|\n",
        seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", ")
    );
    for (name, desc, n, (hm, hs), (nm, ns)) in summarize(cells, &runs) {
        writeln!(md, "| {name} | {desc} | {hm:.4} ± {hs:.4} | {nm:.4} ± {ns:.4} | {n}/{} |", seeds.len()).unwrap();
    }
    let failures: Vec<&CellRun> = runs.iter().filter(|r| r.result.is_err()).collect();
    if !failures.is_empty() {
        writeln!(md, "\n## Failed runs\n").unwrap();
        for r in failures {
            writeln!(md, "- {} seed {}: {}", r.cell, r.seed, r.result.as_ref().unwrap_err()).unwrap();
        }
    }
    write(out.join("ablation.csv"), &runs_csv("cell", |r| r.cell.clone(), &runs, k))?;
    write(out.join("report.md"), &md)?;
    write(out.join("config.resolved"), &base.render())?;
    Ok(md)
}

pub const SWEEP_PARAMS: [&str; 5] = ["lambda_d", "gamma_p", "gamma_c", "gamma_o", "beta"];

/// Eight-level bar per value, scaled between the minimum and maximum.
pub fn sparkline(values: &[f64]) -> String {
    const BARS: [char; 8] = ['▁', '▂', '▃', '▄', '▅', '▆', '▇', '█'];
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                ' '
            } else if hi > lo {
                BARS[(((v - lo) / (hi - lo)) * 7.0).round() as usize]
            } else {
                BARS[3]
            }
        })
        .collect()
}

/// Parses a comma-separated grid of numbers.
pub fn parse_grid(text: &str) -> Result<Vec<String>, CliError> {
    let grid: Vec<String> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    if grid.is_empty() {
        return Err(CliError::Config("sweep grid is empty".into()));
    }
    for v in &grid {
        v.parse::<f64>()
            .map_err(|_| CliError::Config(format!("grid value `{v}` is not a number")))?;
    }
    Ok(grid)
}

/// One run per (grid value, seed). Writes `sweep.csv` and `report.md`.
pub fn sweep(base: &RunConfig, param: &str, grid: &[String], seeds: &[u64], out: &Path) -> Result<String, CliError> {
    if !SWEEP_PARAMS.contains(&param) {
        return Err(CliError::Config(format!(
            "cannot sweep `{param}`; choose one of {}",
            SWEEP_PARAMS.join(", ")
        )));
    }
    if grid.is_empty() {
        return Err(CliError::Config("sweep grid is empty".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let key = format!("distill.{param}");
    let cells: Vec<Cell> = grid
        .iter()
        .map(|v| Cell {
            name: format!("{param}={v}"),
            overrides: vec![(key.clone(), v.clone())],
        })
        .collect();
    let runs = run_matrix(base, &cells, seeds, Some(out))?;
    let k = base.get("train.eval_k");
    let value_of = |r: &CellRun| r.cell.split_once('=').map(|x| x.1.to_string()).unwrap_or_default();
    let csv = runs_csv("param,value", |r| format!("{param},{}", value_of(r)), &runs, k);
    let summary = summarize(&cells, &runs);
    let line = sparkline(&summary.iter().map(|s| s.3 .0).collect::<Vec<_>>());
    let mut md = format!("# sweep over {key}\n\nHR@{k} by value: `{line}`\n\n| {param} | HR@{k} | NDCG@{k} | runs |\n|---|---|---|---|\n");
    for (v, (_, _, n, (hm, hs), (nm, ns))) in grid.iter().zip(&summary) {
        writeln!(md, "| {v} | {hm:.4} ± {hs:.4} | {nm:.4} ± {ns:.4} | {n}/{} |", seeds.len()).unwrap();
    }
    write(out.join("sweep.csv"), &csv)?;
    write(out.join("report.md"), &md)?;
    write(out.join("config.resolved"), &base.render())?;
    Ok(md)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_parsing() {
        let c = Cell::parse("no-pos:distill.gamma_p=0, embed.mode=none").unwrap();
        assert_eq!(c.name, "no-pos");
        assert_eq!(c.overrides.len(), 2);
        assert_eq!(Cell::parse("full").unwrap().overrides, vec![]);
        assert!(Cell::parse("x:a=1,a=2").is_err());
        assert!(Cell::parse(":a=1").is_err());
        assert!(Cell::parse("x:a").is_err());
    }

    #[test]
    fn mean_sd_examples() {
        assert_eq!(mean_sd(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sparkline_levels() {
        assert_eq!(sparkline(&[0.0, 1.0]), "▁█");
        assert_eq!(sparkline(&[0.5, 0.5]), "▄▄");
        assert_eq!(sparkline(&[0.0, 0.5, 1.0]).chars().count(), 3);
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0.1, 0.2").unwrap(), vec!["0.1", "0.2"]);
        assert!(parse_grid("").is_err());
        assert!(parse_grid("a").is_err());
    }

    #[test]
    fn unknown_override_is_config_error() {
        let base = RunConfig::defaults(Command::Ablate);
        let cells = vec![Cell::new("bad", &[("distill.nope", "1")])];
        assert!(matches!(run_matrix(&base, &cells, &[1], None), Err(CliError::Config(_))));
    }
}
