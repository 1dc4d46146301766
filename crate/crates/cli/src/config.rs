//! Flat `key=value` run configuration with dotted keys.
//!
//! Values are resolved in three layers: built-in defaults (which depend on
//! the command), then a config file, then `--set` overrides from the command
//! line. Every key has a default, so an empty configuration is a valid run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use distillrec_core::data::SplitBundle;
use distillrec_core::distill::DistillConfig;
use distillrec_core::embed::FusionMode;
use distillrec_core::student::{EncoderKind, Reduction, StudentConfig};
use distillrec_core::synthetic::SyntheticConfig;
use distillrec_core::teacher::TeacherQuality;
use distillrec_core::trainer::TrainConfig;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    Train,
    Distill,
    Ablate,
    Sweep,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Distill => "distill",
            Command::Ablate => "ablate",
            Command::Sweep => "sweep",
        }
    }
}

/// Reference student for the "before" side of the overlap diagnostic.
#[derive(Clone, Debug, PartialEq)]
pub enum Baseline {
    /// Train a plain student with the same seed and student settings.
    Train,
    /// The untrained student.
    Init,
    /// Skip the diagnostic.
    None,
    /// A checkpoint written by an earlier run.
    Checkpoint(PathBuf),
}

/// Keys fixed by a command. Setting them to anything else is an error.
fn pinned(command: Command) -> &'static [(&'static str, &'static str)] {
    match command {
        Command::Train => &[("distill.lambda_d", "0"), ("embed.mode", "none")],
        _ => &[],
    }
}

fn defaults(command: Command) -> BTreeMap<String, String> {
    let synth = SyntheticConfig::default();
    let distill = DistillConfig::default();
    let train = TrainConfig::default();
    let student = StudentConfig::new(EncoderKind::SelfAttentive, 2);
    let teacher = TeacherQuality::default();
    let synth_json = serde_json::to_value(&synth).expect("plain struct");
    let mut m: BTreeMap<String, String> = SyntheticConfig::KEYS
        .iter()
        .map(|k| (format!("synth.{k}"), synth_json[*k].to_string()))
        .collect();
    let baseline = match command {
        Command::Distill => "train",
        _ => "none",
    };
    for (k, v) in [
        ("seed", "0".to_string()),
        ("data.path", String::new()),
        ("data.seed", "0".into()),
        ("data.split", "8:1:1".into()),
        ("teacher.path", String::new()),
        ("teacher.seed", "0".into()),
        ("teacher.sigma_g", teacher.sigma_g.to_string()),
        ("teacher.corruption", teacher.corruption.to_string()),
        ("teacher.list_len", teacher.list_len.to_string()),
        ("student.kind", student.kind.as_str().into()),
        ("student.dim", student.dim.to_string()),
        ("student.max_len", student.max_len.to_string()),
        ("student.dropout", student.dropout.to_string()),
        ("student.heads", student.heads.to_string()),
        ("train.epochs", train.epochs.to_string()),
        ("train.batch_size", train.batch_size.to_string()),
        ("train.learning_rate", train.learning_rate.to_string()),
        ("train.weight_decay", train.weight_decay.to_string()),
        ("train.negatives", train.negatives.to_string()),
        ("train.patience", train.patience.to_string()),
        ("train.eval_k", train.eval_k.to_string()),
        ("train.exclude_seen", train.exclude_seen.to_string()),
        ("train.reduction", "mean".into()),
        ("distill.k", distill.k.to_string()),
        ("distill.beta", distill.beta.to_string()),
        ("distill.gamma_p", distill.gamma_p.to_string()),
        ("distill.gamma_c", distill.gamma_c.to_string()),
        ("distill.gamma_o", distill.gamma_o.to_string()),
        ("distill.lambda_d", distill.lambda_d.to_string()),
        ("distill.refresh_epochs", distill.refresh_epochs.to_string()),
        ("distill.baseline", baseline.into()),
        ("embed.mode", FusionMode::OffsetSum.as_str().into()),
        ("embed.lambda_h", train.lambda_h.to_string()),
    ] {
        m.insert(k.to_string(), v);
    }
    for (k, v) in pinned(command) {
        m.insert(k.to_string(), v.to_string());
    }
    m
}

/// Every key a configuration may set.
pub fn known_keys() -> Vec<String> {
    defaults(Command::Distill).into_keys().collect()
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// repeating a key is an error.
pub fn parse_pairs(text: &str, source: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("{source}:{}: expected key=value, got `{line}`", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(CliError::Config(format!("{source}:{}: duplicate key `{k}`", n + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}

/// A fully resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Layers `file` then `overrides` over the command defaults.
    pub fn resolve(
        command: Command,
        file: &[(String, String)],
        overrides: &[(String, String)],
    ) -> Result<Self, CliError> {
        let mut values = defaults(command);
        for layer in [file, overrides] {
            let mut seen = Vec::new();
            for (k, v) in layer {
                if seen.contains(&k) {
                    return Err(CliError::Config(format!("duplicate key `{k}`")));
                }
                seen.push(k);
                if !values.contains_key(k) {
                    return Err(CliError::Config(format!("unknown key `{k}`")));
                }
                values.insert(k.clone(), v.clone());
            }
        }
        for (k, v) in pinned(command) {
            if values[*k] != *v && !same_number(&values[*k], v) {
                return Err(CliError::Config(format!(
                    "`{}` requires {k}={v}; use `distill` for teacher-guided runs",
                    command.as_str()
                )));
            }
        }
        let cfg = Self { command, values };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn defaults(command: Command) -> Self {
        Self::resolve(command, &[], &[]).expect("defaults are valid")
    }

    /// Returns a copy with `overrides` applied on top.
    pub fn with(&self, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let layer: Vec<(String, String)> = self.values.clone().into_iter().collect();
        Self::resolve(self.command, &layer, overrides)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| CliError::Config(format!("{key}: cannot parse `{v}`")))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// Parses every section once so errors surface before any work starts.
    fn validate(&self) -> Result<(), CliError> {
        self.synthetic()?;
        self.teacher_quality()?;
        self.student(2)?;
        self.train()?.validate()?;
        self.distill()?.validate()?;
        self.split_ratios()?;
        self.baseline()?;
        self.parsed::<u64>("seed")?;
        self.parsed::<u64>("data.seed")?;
        self.parsed::<u64>("teacher.seed")?;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.parsed("seed").expect("validated")
    }

    pub fn data_seed(&self) -> u64 {
        self.parsed("data.seed").expect("validated")
    }

    pub fn teacher_seed(&self) -> u64 {
        self.parsed("teacher.seed").expect("validated")
    }

    pub fn data_path(&self) -> Option<PathBuf> {
        self.path("data.path")
    }

    pub fn teacher_path(&self) -> Option<PathBuf> {
        self.path("teacher.path")
    }

    pub fn split_ratios(&self) -> Result<[u32; 3], CliError> {
        let v = self.get("data.split");
        let parts: Vec<u32> = v
            .split(':')
            .map(|p| p.trim().parse::<u32>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Config(format!("data.split: cannot parse `{v}`")))?;
        match parts[..] {
            [a, b, c] if a > 0 && a + b + c > 0 => Ok([a, b, c]),
            _ => Err(CliError::Config(format!("data.split must be a:b:c with a > 0, got `{v}`"))),
        }
    }

    pub fn synthetic(&self) -> Result<SyntheticConfig, CliError> {
        let mut c = SyntheticConfig::default();
        for k in SyntheticConfig::KEYS {
            c.set(k, self.get(&format!("synth.{k}")))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn teacher_quality(&self) -> Result<TeacherQuality, CliError> {
        let q = TeacherQuality {
            sigma_g: self.parsed("teacher.sigma_g")?,
            corruption: self.parsed("teacher.corruption")?,
            list_len: self.parsed("teacher.list_len")?,
            keep_grounding: false,
        };
        if !(q.sigma_g >= 0.0 && q.sigma_g.is_finite()) || !(0.0..=1.0).contains(&q.corruption) || q.list_len == 0 {
            return Err(CliError::Config(format!(
                "teacher settings out of range: sigma_g {} corruption {} list_len {}",
                q.sigma_g, q.corruption, q.list_len
            )));
        }
        Ok(q)
    }

    pub fn embed_mode(&self) -> Result<FusionMode, CliError> {
        Ok(FusionMode::parse(self.get("embed.mode"))?)
    }

    pub fn student(&self, item_count: usize) -> Result<StudentConfig, CliError> {
        let mut c = StudentConfig::new(EncoderKind::parse(self.get("student.kind"))?, item_count);
        c.dim = self.parsed("student.dim")?;
        c.max_len = self.parsed("student.max_len")?;
        c.dropout = self.parsed("student.dropout")?;
        c.heads = self.parsed("student.heads")?;
        self.embed_mode()?;
        if c.dim == 0 || c.max_len == 0 || c.heads == 0 || c.dim % c.heads != 0 || !(0.0..1.0).contains(&c.dropout) {
            return Err(CliError::Config(format!(
                "student settings out of range: dim {} max_len {} heads {} dropout {}",
                c.dim, c.max_len, c.heads, c.dropout
            )));
        }
        Ok(c)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let reduction = match self.get("train.reduction") {
            "mean" => Reduction::Mean,
            "sum" => Reduction::Sum,
            other => return Err(CliError::Config(format!("train.reduction `{other}` is not mean or sum"))),
        };
        Ok(TrainConfig {
            epochs: self.parsed("train.epochs")?,
            batch_size: self.parsed("train.batch_size")?,
            learning_rate: self.parsed("train.learning_rate")?,
            weight_decay: self.parsed("train.weight_decay")?,
            negatives: self.parsed("train.negatives")?,
            patience: self.parsed("train.patience")?,
            eval_k: self.parsed("train.eval_k")?,
            seed: self.parsed("seed")?,
            reduction,
            exclude_seen: self.parsed("train.exclude_seen")?,
            lambda_h: self.parsed("embed.lambda_h")?,
        })
    }

    pub fn distill(&self) -> Result<DistillConfig, CliError> {
        Ok(DistillConfig {
            k: self.parsed("distill.k")?,
            beta: self.parsed("distill.beta")?,
            gamma_p: self.parsed("distill.gamma_p")?,
            gamma_c: self.parsed("distill.gamma_c")?,
            gamma_o: self.parsed("distill.gamma_o")?,
            lambda_d: self.parsed("distill.lambda_d")?,
            refresh_epochs: self.parsed("distill.refresh_epochs")?,
        })
    }

    pub fn baseline(&self) -> Result<Baseline, CliError> {
        Ok(match self.get("distill.baseline") {
            "train" => Baseline::Train,
            "init" => Baseline::Init,
            "none" => Baseline::None,
            "" => return Err(CliError::Config("distill.baseline is empty".into())),
            path => Baseline::Checkpoint(PathBuf::from(path)),
        })
    }

    /// Sorted `key=value` lines, headed by the command.
    pub fn render(&self) -> String {
        let mut s = format!("command={}\n", self.command.as_str());
        for (k, v) in &self.values {
            writeln!(s, "{k}={v}").expect("string write");
        }
        s
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Reads a `config.resolved` file back into its command and key/values.
    pub fn read_resolved(path: &Path) -> Result<(String, BTreeMap<String, String>), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut pairs: BTreeMap<String, String> = parse_pairs(&text, &path.display().to_string())?.into_iter().collect();
        let command = pairs
            .remove("command")
            .ok_or_else(|| CliError::Config(format!("{}: no command line", path.display())))?;
        Ok((command, pairs))
    }
}

fn same_number(a: &str, b: &str) -> bool {
    matches!((a.parse::<f64>(), b.parse::<f64>()), (Ok(x), Ok(y)) if x == y)
}

/// Checks that a split has something to train and evaluate on.
pub fn check_split(split: &SplitBundle) -> Result<(), CliError> {
    if split.train.is_empty() || split.test.is_empty() {
        return Err(CliError::Data(format!(
            "split leaves {} train and {} test samples",
            split.train.len(),
            split.test.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(s: &str) -> Vec<(String, String)> {
        parse_pairs(s, "test").unwrap()
    }

    #[test]
    fn bare_run_is_valid() {
        for c in [Command::Synth, Command::Train, Command::Distill, Command::Ablate, Command::Sweep] {
            RunConfig::defaults(c);
        }
        assert_eq!(RunConfig::defaults(Command::Train).get("embed.mode"), "none");
        assert_eq!(RunConfig::defaults(Command::Distill).get("distill.baseline"), "train");
    }

    #[test]
    fn precedence() {
        let file = pairs("seed=3\ntrain.epochs=7\n");
        let cli = pairs("seed=5");
        let c = RunConfig::resolve(Command::Distill, &file, &cli).unwrap();
        assert_eq!(c.seed(), 5);
        assert_eq!(c.train().unwrap().epochs, 7);
        assert_eq!(c.train().unwrap().batch_size, 256);
    }

    #[test]
    fn duplicates_and_unknown_keys() {
        assert!(parse_pairs("seed=1\nseed=2", "f").is_err());
        assert!(parse_pairs("noequals", "f").is_err());
        let dup = vec![("seed".to_string(), "1".to_string()), ("seed".to_string(), "2".to_string())];
        assert!(RunConfig::resolve(Command::Train, &[], &dup).is_err());
        assert!(RunConfig::resolve(Command::Train, &pairs("sed=1"), &[]).is_err());
    }

    #[test]
    fn bad_values() {
        for bad in ["train.epochs=0", "distill.beta=0", "student.kind=lstm", "data.split=8:1", "embed.mode=x"] {
            assert!(RunConfig::resolve(Command::Distill, &pairs(bad), &[]).is_err(), "{bad}");
        }
        assert!(RunConfig::resolve(Command::Train, &pairs("distill.lambda_d=0.5"), &[]).is_err());
        assert!(RunConfig::resolve(Command::Train, &pairs("distill.lambda_d=0.0"), &[]).is_ok());
    }

    #[test]
    fn render_round_trips() {
        let c = RunConfig::resolve(Command::Distill, &pairs("distill.gamma_c=0.25"), &[]).unwrap();
        let dir = std::env::temp_dir().join(format!("distillrec-config-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("config.resolved");
        std::fs::write(&path, c.render()).unwrap();
        let (cmd, values) = RunConfig::read_resolved(&path).unwrap();
        assert_eq!(cmd, "distill");
        let layer: Vec<_> = values.into_iter().collect();
        assert_eq!(RunConfig::resolve(Command::Distill, &layer, &[]).unwrap(), c);
        std::fs::remove_dir_all(dir).unwrap();
    }
}
