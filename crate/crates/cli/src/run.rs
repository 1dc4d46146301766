//! Data preparation and single training runs with their output files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use distillrec_core::data::{self, InteractionDataset, SequenceSample, SplitBundle};
use distillrec_core::eval::{self, MetricsReport};
use distillrec_core::student::StudentModel;
use distillrec_core::synthetic::{generate_synthetic, SyntheticTruth};
use distillrec_core::teacher::{synthesize_teacher, TeacherArtifact};
use distillrec_core::trainer::{TrainState, Trainer};

use crate::config::{check_split, Baseline, Command, RunConfig};
use crate::error::CliError;

/// Dataset, samples, split and (when needed) the teacher artifact.
pub struct Prepared {
    pub dataset: InteractionDataset,
    pub samples: Vec<SequenceSample>,
    pub split: SplitBundle,
    pub truth: Option<SyntheticTruth>,
    pub teacher: Option<TeacherArtifact>,
}

/// The keys that determine [`prepare`]'s result.
pub fn data_key(cfg: &RunConfig) -> String {
    cfg.entries()
        .filter(|(k, _)| {
            k.starts_with("data.") || k.starts_with("synth.") || k.starts_with("teacher.") || *k == "student.max_len"
        })
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}

fn needs_teacher(cfg: &RunConfig) -> Result<bool, CliError> {
    Ok(cfg.distill()?.is_active()
        || cfg.embed_mode()?.uses_teacher()
        || (cfg.command != Command::Train && cfg.baseline()? != Baseline::None))
}

/// Loads or generates the dataset and, for teacher-guided runs, loads or
/// synthesizes the teacher artifact.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let max_len = cfg.student(2)?.max_len;
    let (dataset, truth) = match cfg.data_path() {
        Some(path) => (data::load_interactions(&path)?, None),
        None => {
            let (d, t) = generate_synthetic(&cfg.synthetic()?, cfg.data_seed())?;
            (d, Some(t))
        }
    };
    let samples = data::build_sequences(&dataset, max_len)?;
    let split = data::chronological_split(
        samples.clone(),
        cfg.split_ratios()?,
        dataset.item_count(),
        dataset.user_count(),
    )?;
    check_split(&split)?;
    let teacher = if needs_teacher(cfg)? {
        let t = match (cfg.teacher_path(), &truth) {
            (Some(path), _) => TeacherArtifact::load(&path)?,
            (None, Some(truth)) => synthesize_teacher(
                &truth.teacher_embeddings,
                &samples,
                &cfg.teacher_quality()?,
                cfg.teacher_seed(),
            )?,
            (None, None) => {
                return Err(CliError::Config(
                    "teacher.path is required when data.path is set and the run uses a teacher".into(),
                ))
            }
        };
        t.validate(dataset.item_count(), &split.train)?;
        Some(t)
    } else {
        None
    };
    Ok(Prepared {
        dataset,
        samples,
        split,
        truth,
        teacher,
    })
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Output directory; nothing is written when absent.
    pub out: Option<PathBuf>,
    /// Continue from `out/state` if present.
    pub resume: bool,
    /// Stop after this many total epochs, leaving a resumable state.
    pub stop_after: Option<usize>,
    /// Echo log lines to stderr.
    pub verbose: bool,
}

pub struct RunOutcome {
    pub config: RunConfig,
    pub model: StudentModel,
    pub state: TrainState,
    pub validation: MetricsReport,
    pub test: MetricsReport,
    /// Teacher–student top-k overlap on test samples: `(k, before, after)`.
    pub overlap: Option<(usize, f64, f64)>,
    pub log: Vec<String>,
}

impl RunOutcome {
    /// `(name, value)` rows of `metrics.csv`, in a fixed order.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let k = self.test.k;
        let mut rows = vec![
            (format!("test_hr@{k}"), self.test.hr),
            (format!("test_ndcg@{k}"), self.test.ndcg),
            (format!("val_hr@{k}"), self.validation.hr),
            (format!("val_ndcg@{k}"), self.validation.ndcg),
            ("best_epoch".into(), self.state.best_epoch as f64),
            ("epochs_run".into(), self.state.epochs_done as f64),
            ("test_samples".into(), self.test.samples as f64),
        ];
        if let Some((ok, before, after)) = self.overlap {
            rows.push((format!("overlap_before@{ok}"), before));
            rows.push((format!("overlap_after@{ok}"), after));
        }
        rows
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Builds the student for `cfg`, attaching teacher embeddings if the
/// embedding mode uses them.
pub fn build_student(cfg: &RunConfig, prepared: &Prepared) -> Result<StudentModel, CliError> {
    let mut model = StudentModel::new(cfg.student(prepared.split.item_count)?, cfg.seed())?;
    let mode = cfg.embed_mode()?;
    if mode.uses_teacher() {
        let teacher = prepared
            .teacher
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("embed.mode={} needs a teacher", mode.as_str())))?;
        model.attach(&teacher.embeddings, mode, cfg.seed())?;
    }
    Ok(model)
}

/// Trains one configuration. `train` runs ignore the teacher entirely.
pub fn execute(cfg: &RunConfig, prepared: &Prepared, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let distill = cfg.distill()?;
    let train_cfg = cfg.train()?;
    let teacher = match cfg.command {
        Command::Train => None,
        _ => prepared.teacher.as_ref(),
    };
    let trainer = Trainer::new(&prepared.split, teacher, distill, train_cfg.clone())?;
    let state_dir = opts.out.as_ref().map(|o| o.join("state"));
    if let Some(out) = &opts.out {
        create_dir(out)?;
    }
    let state = match &state_dir {
        Some(dir) if opts.resume && dir.join("progress.json").exists() => TrainState::load(dir)?,
        _ => TrainState::new(build_student(cfg, prepared)?, &train_cfg)?,
    };
    let mut log = Vec::new();
    let verbose = opts.verbose;
    let state = trainer.resume(state, opts.stop_after, &mut |line| {
        if verbose {
            eprintln!("{line}");
        }
        log.push(line.to_string());
    })?;
    let model = state.best_model();
    let k = train_cfg.eval_k;
    let validation = eval::evaluate(&model, &prepared.split.validation, k, train_cfg.exclude_seen)?;
    let test = eval::evaluate(&model, &prepared.split.test, k, train_cfg.exclude_seen)?;
    let overlap = match (cfg.command, teacher) {
        (Command::Train, _) | (_, None) => None,
        (_, Some(t)) => overlap_diagnostic(cfg, prepared, t, &model, k)?,
    };
    let outcome = RunOutcome {
        config: cfg.clone(),
        model,
        state,
        validation,
        test,
        overlap,
        log,
    };
    if let Some(out) = &opts.out {
        write_outputs(out, &outcome)?;
        outcome.state.save(state_dir.as_ref().expect("set with out"))?;
    }
    Ok(outcome)
}

/// Overlap of the teacher's lists with the baseline and the distilled
/// student on test samples the teacher covers.
fn overlap_diagnostic(
    cfg: &RunConfig,
    prepared: &Prepared,
    teacher: &TeacherArtifact,
    after: &StudentModel,
    k: usize,
) -> Result<Option<(usize, f64, f64)>, CliError> {
    let before = match cfg.baseline()? {
        Baseline::None => return Ok(None),
        Baseline::Init => StudentModel::new(cfg.student(prepared.split.item_count)?, cfg.seed())?,
        Baseline::Checkpoint(path) => StudentModel::load(&path)?,
        Baseline::Train => {
            let plain = RunConfig::resolve(
                Command::Train,
                &cfg.entries()
                    .filter(|(k, _)| !matches!(*k, "distill.lambda_d" | "embed.mode" | "distill.baseline"))
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .collect::<Vec<_>>(),
                &[],
            )?;
            execute(&plain, prepared, &RunOptions::default())?.model
        }
    };
    if before.config.item_count != after.config.item_count {
        return Err(CliError::Data(format!(
            "baseline model has {} items, data has {}",
            before.config.item_count, after.config.item_count
        )));
    }
    let covered: Vec<&SequenceSample> = prepared
        .split
        .test
        .iter()
        .filter(|s| teacher.entries.contains_key(&s.index))
        .collect();
    if covered.is_empty() {
        return Ok(None);
    }
    let k = k.min(teacher.entries[&covered[0].index].ranking.len());
    let teacher_lists: Vec<Vec<usize>> = covered
        .iter()
        .map(|s| teacher.entries[&s.index].ranking[..k].to_vec())
        .collect();
    let prefixes: Vec<&[usize]> = covered.iter().map(|s| s.prefix.as_slice()).collect();
    let b = before.recommend(&prefixes, k, false)?;
    let a = after.recommend(&prefixes, k, false)?;
    let (before, after) = eval::overlap_before_after(&teacher_lists, &b, &a, k)?;
    Ok(Some((k, before, after)))
}

pub fn metrics_csv(outcome: &RunOutcome) -> String {
    let mut s = String::from("metric,value\n");
    for (name, v) in outcome.metrics() {
        writeln!(s, "{name},{v}").expect("string write");
    }
    s
}

fn history_csv(state: &TrainState) -> String {
    let mut s = String::from("epoch,loss,rec_loss,distill_loss,hint_loss,first_batch_loss,last_batch_loss,val_hr,val_ndcg\n");
    for r in &state.history {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch, r.loss, r.rec_loss, r.distill_loss, r.hint_loss, r.first_batch_loss, r.last_batch_loss, r.val_hr, r.val_ndcg
        )
        .expect("string write");
    }
    s
}

fn run_report(o: &RunOutcome) -> String {
    let mut s = String::new();
    let cfg = &o.config;
    writeln!(s, "# {} run\n", cfg.command.as_str()).unwrap();
    writeln!(s, "| metric | value |\n|---|---|").unwrap();
    for (name, v) in o.metrics() {
        writeln!(s, "| {name} | {v:.6} |").unwrap();
    }
    if let Some((k, _, _)) = o.overlap {
        writeln!(
            s,
            "\nOverlap is the mean fraction of the teacher's top-{} list shared with the \
             student's, on covered test samples; the \"before\" student is `distill.baseline={}`.",
            k,
            cfg.get("distill.baseline")
        )
        .unwrap();
    }
    writeln!(
        s,
        "\nStopping policy: at most {} epochs, early stop after {} epochs without \
         validation NDCG@{} improvement; the best validation epoch is reported.",
        cfg.get("train.epochs"),
        cfg.get("train.patience"),
        cfg.get("train.eval_k")
    )
    .unwrap();
    writeln!(s, "\n## Epochs\n\n| epoch | loss | rec | distill | hint | val HR | val NDCG |\n|---|---|---|---|---|---|---|").unwrap();
    for r in &o.state.history {
        writeln!(
            s,
            "| {} | {:.5} | {:.5} | {:.5} | {:.5} | {:.4} | {:.4} |",
            r.epoch, r.loss, r.rec_loss, r.distill_loss, r.hint_loss, r.val_hr, r.val_ndcg
        )
        .unwrap();
    }
    writeln!(s, "\n## Resolved configuration\n\n| key | value |\n|---|---|").unwrap();
    for (k, v) in cfg.entries() {
        writeln!(s, "| {k} | {v} |").unwrap();
    }
    s
}

fn write_outputs(out: &Path, o: &RunOutcome) -> Result<(), CliError> {
    write(&out.join("config.resolved"), &o.config.render())?;
    o.model.save(&out.join("model.ckpt"))?;
    write(&out.join("metrics.csv"), &metrics_csv(o))?;
    write(&out.join("history.csv"), &history_csv(&o.state))?;
    write(&out.join("report.md"), &run_report(o))?;
    let mut log = o.log.join("\n");
    log.push('\n');
    write(&out.join("log.txt"), &log)
}

/// Writes the dataset, generator truth and teacher artifact for a
/// synthetic configuration. Returns a short summary.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    if cfg.data_path().is_some() {
        return Err(CliError::Config("synth generates data; unset data.path".into()));
    }
    create_dir(out)?;
    let (dataset, truth) = generate_synthetic(&cfg.synthetic()?, cfg.data_seed())?;
    let samples = data::build_sequences(&dataset, cfg.student(2)?.max_len)?;
    let teacher = synthesize_teacher(
        &truth.teacher_embeddings,
        &samples,
        &cfg.teacher_quality()?,
        cfg.teacher_seed(),
    )?;
    dataset.write_tsv(&out.join("interactions.tsv"))?;
    dataset.write_id_maps(out)?;
    truth.save(&out.join("truth.txt"))?;
    let manifest = teacher.save(&out.join("teacher"))?;
    write(&out.join("config.resolved"), &cfg.render())?;
    let summary = format!(
        "users {}\nitems {}\ninteractions {}\nsamples {}\nteacher {}\n",
        dataset.user_count(),
        dataset.item_count(),
        dataset.len(),
        samples.len(),
        manifest.display()
    );
    write(&out.join("log.txt"), &summary)?;
    write(
        &out.join("report.md"),
        &format!("# synthetic dataset\n\n```\n{summary}```\n"),
    )?;
    Ok(summary)
}
