//! Summary tables across completed run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::matrix::mean_sd;

/// Relative improvement of `ours` over `student`, in percent.
pub fn gain_percent(ours: f64, student: f64) -> f64 {
    (ours - student) / student * 100.0
}

pub fn format_gain(g: f64) -> String {
    format!("{g:+.2}%")
}

/// One completed run read back from disk.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
}

pub fn read_metrics(path: &Path) -> Result<BTreeMap<String, f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let bad = || CliError::Data(format!("{}:{}: malformed metric row `{line}`", path.display(), n + 1));
        let (k, v) = line.split_once(',').ok_or_else(bad)?;
        out.insert(k.to_string(), v.parse().map_err(|_| bad())?);
    }
    Ok(out)
}

pub fn load_run(dir: &Path) -> Result<RunRecord, CliError> {
    if !dir.is_dir() {
        return Err(CliError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found"),
        ));
    }
    let (command, config) = RunConfig::read_resolved(&dir.join("config.resolved"))?;
    if command != "train" && command != "distill" {
        return Err(CliError::Data(format!("{}: `{command}` runs have no metrics", dir.display())));
    }
    Ok(RunRecord {
        dir: dir.to_path_buf(),
        command,
        metrics: read_metrics(&dir.join("metrics.csv"))?,
        config,
    })
}

/// Settings that must match for two runs to share a table group.
fn group_key(r: &RunRecord) -> String {
    let data: Vec<String> = r
        .config
        .iter()
        .filter(|(k, _)| k.starts_with("data.") || k.starts_with("synth."))
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    format!("{}|{}", r.config.get("student.kind").map_or("", String::as_str), data.join(","))
}

fn test_keys(r: &RunRecord) -> Vec<&String> {
    r.metrics.keys().filter(|k| k.starts_with("test_")).collect()
}

/// Markdown table grouped by student kind and dataset: the plain student
/// row, the distilled row and their relative gain (`(ours - student) /
/// student`) per metric, each averaged over the runs in the cell.
pub fn report(dirs: &[PathBuf]) -> Result<String, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Config("report needs at least one run directory".into()));
    }
    let runs: Vec<RunRecord> = dirs.iter().map(|d| load_run(d)).collect::<Result<_, _>>()?;
    let keys = test_keys(&runs[0]);
    for r in &runs[1..] {
        if test_keys(r) != keys {
            return Err(CliError::Data(format!(
                "{} reports {:?} but {} reports {:?}",
                r.dir.display(),
                test_keys(r),
                runs[0].dir.display(),
                keys
            )));
        }
    }
    let mut groups: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in &runs {
        groups.entry(group_key(r)).or_default().push(r);
    }
    let metric_names: Vec<String> = keys.iter().map(|k| k.trim_start_matches("test_").to_string()).collect();
    let mut md = String::from("# results\n\n| student | row | runs |");
    for m in &metric_names {
        write!(md, " {m} |").unwrap();
    }
    md.push_str("\n|---|---|---|");
    md.push_str(&"---|".repeat(metric_names.len()));
    md.push('\n');
    for (gi, (_, members)) in groups.iter().enumerate() {
        let kind = members[0].config.get("student.kind").cloned().unwrap_or_default();
        let label = if groups.len() > 1 && groups.keys().filter(|k| k.starts_with(&format!("{kind}|"))).count() > 1 {
            format!("{kind} (data {})", gi + 1)
        } else {
            kind
        };
        let mut means: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (role, name) in [("train", "student"), ("distill", "distilled")] {
            let rows: Vec<&&RunRecord> = members.iter().filter(|r| r.command == role).collect();
            if rows.is_empty() {
                continue;
            }
            write!(md, "| {label} | {name} | {} |", rows.len()).unwrap();
            let mut row_means = Vec::new();
            for k in &keys {
                let xs: Vec<f64> = rows.iter().map(|r| r.metrics[*k]).collect();
                let (m, sd) = mean_sd(&xs);
                row_means.push(m);
                if rows.len() > 1 {
                    write!(md, " {m:.4} ± {sd:.4} |").unwrap();
                } else {
                    write!(md, " {m:.4} |").unwrap();
                }
            }
            md.push('\n');
            means.insert(role, row_means);
        }
        if let (Some(s), Some(o)) = (means.get("train"), means.get("distill")) {
            write!(md, "| {label} | Gain.S | |").unwrap();
            for (o, s) in o.iter().zip(s) {
                write!(md, " {} |", format_gain(gain_percent(*o, *s))).unwrap();
            }
            md.push('\n');
        }
    }
    Ok(md)
}
