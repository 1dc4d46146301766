//! Mini-batch training with optional ranking and embedding distillation,
//! early stopping on validation NDCG and resumable state.
//!
//! Every random stream (shuffle, negatives, dropout) is derived from the
//! run seed and the epoch, so a run resumed at an epoch boundary follows
//! the uninterrupted trajectory exactly.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use distillrec_autodiff::{AdamConfig, AdamState, AutodiffError, Graph, NodeId, ParamStore, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{sample_negatives, SequenceSample, SplitBundle};
use crate::distill::{batch_weights, distill_loss_node, refresh_student_topk, DistillConfig, StudentTopK};
use crate::embed::{self, FusionMode};
use crate::error::{CoreError, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::seed;
use crate::student::{rec_loss_node, Reduction, StudentModel};
use crate::teacher::TeacherArtifact;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Negatives per positive.
    pub negatives: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub eval_k: usize,
    pub seed: u64,
    pub reduction: Reduction,
    pub exclude_seen: bool,
    /// Weight of the alignment loss in hint mode.
    pub lambda_h: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            negatives: 1,
            patience: 10,
            eval_k: 20,
            seed: 0,
            reduction: Reduction::Mean,
            exclude_seen: false,
            lambda_h: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.negatives == 0 || self.eval_k == 0 {
            return bad("epochs, batch_size, negatives and eval_k must be positive".into());
        }
        if !(self.lambda_h >= 0.0 && self.lambda_h.is_finite()) {
            return bad(format!("lambda_h = {}", self.lambda_h));
        }
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
        .validate()
        .map_err(|e| CoreError::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub rec_loss: f64,
    pub distill_loss: f64,
    pub hint_loss: f64,
    pub first_batch_loss: f64,
    pub last_batch_loss: f64,
    pub val_hr: f64,
    pub val_ndcg: f64,
}

/// Everything needed to continue training after an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: StudentModel,
    pub adam: AdamState,
    pub epochs_done: usize,
    pub best_params: ParamStore,
    pub best_ndcg: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
    pub history: Vec<EpochRecord>,
    pub stopped: bool,
    pub student_topk: StudentTopK,
}

#[derive(Serialize, Deserialize)]
struct Progress {
    epochs_done: usize,
    best_ndcg: f64,
    best_epoch: usize,
    bad_epochs: usize,
    stopped: bool,
    history: Vec<EpochRecord>,
    student_topk: Vec<(usize, Vec<usize>)>,
}

impl TrainState {
    pub fn new(model: StudentModel, cfg: &TrainConfig) -> Result<Self> {
        let adam = AdamState::new(AdamConfig {
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        })?;
        Ok(Self {
            best_params: model.params.clone(),
            model,
            adam,
            epochs_done: 0,
            best_ndcg: f64::NEG_INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
            history: Vec::new(),
            stopped: false,
            student_topk: StudentTopK::new(),
        })
    }

    /// The model with its best validation parameters.
    pub fn best_model(&self) -> StudentModel {
        StudentModel {
            config: self.model.config.clone(),
            params: self.best_params.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.save(&dir.join("current.ckpt"))?;
        self.best_model().save(&dir.join("best.ckpt"))?;
        self.adam.save(BufWriter::new(File::create(dir.join("adam.txt"))?))?;
        let progress = Progress {
            epochs_done: self.epochs_done,
            best_ndcg: self.best_ndcg,
            best_epoch: self.best_epoch,
            bad_epochs: self.bad_epochs,
            stopped: self.stopped,
            history: self.history.clone(),
            student_topk: self.student_topk.iter().map(|(k, v)| (*k, v.clone())).collect(),
        };
        std::fs::write(dir.join("progress.json"), serde_json::to_string(&progress)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = StudentModel::load(&dir.join("current.ckpt"))?;
        let best = StudentModel::load(&dir.join("best.ckpt"))?;
        let adam = AdamState::load(BufReader::new(File::open(dir.join("adam.txt"))?))?;
        adam.config.validate()?;
        let p: Progress = serde_json::from_str(&std::fs::read_to_string(dir.join("progress.json"))?)?;
        Ok(Self {
            model,
            adam,
            epochs_done: p.epochs_done,
            best_params: best.params,
            best_ndcg: p.best_ndcg,
            best_epoch: p.best_epoch,
            bad_epochs: p.bad_epochs,
            history: p.history,
            stopped: p.stopped,
            student_topk: p.student_topk.into_iter().collect(),
        })
    }
}

pub struct Trainer<'a> {
    pub split: &'a SplitBundle,
    pub teacher: Option<&'a TeacherArtifact>,
    pub distill: DistillConfig,
    pub config: TrainConfig,
}

/// A batch loss graph and its labelled terms.
pub struct LossGraph {
    pub graph: Graph,
    pub total: NodeId,
    pub rec: NodeId,
    pub distill: Option<NodeId>,
    pub hint: Option<NodeId>,
}

struct StepLosses {
    total: f64,
    rec: f64,
    distill: f64,
    hint: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(
        split: &'a SplitBundle,
        teacher: Option<&'a TeacherArtifact>,
        distill: DistillConfig,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        distill.validate()?;
        if split.train.is_empty() {
            return Err(CoreError::invalid("no training samples"));
        }
        if distill.is_active() {
            let t = teacher.ok_or_else(|| CoreError::Teacher("distillation needs a teacher artifact".into()))?;
            t.validate(split.item_count, &split.train)?;
        }
        Ok(Self {
            split,
            teacher,
            distill,
            config,
        })
    }

    /// Trains from scratch and returns the final state.
    pub fn train(&self, model: StudentModel, log: &mut dyn FnMut(&str)) -> Result<TrainState> {
        let state = TrainState::new(model, &self.config)?;
        self.resume(state, None, log)
    }

    /// Continues `state` until the epoch budget, early stopping, or
    /// `stop_after` total epochs.
    pub fn resume(&self, mut state: TrainState, stop_after: Option<usize>, log: &mut dyn FnMut(&str)) -> Result<TrainState> {
        if state.model.config.item_count != self.split.item_count {
            return Err(CoreError::invalid(format!(
                "model has {} items, data has {}",
                state.model.config.item_count, self.split.item_count
            )));
        }
        let limit = stop_after.unwrap_or(self.config.epochs).min(self.config.epochs);
        while state.epochs_done < limit && !state.stopped {
            let epoch = state.epochs_done;
            if self.distill.needs_student_topk() && (epoch % self.distill.refresh_epochs == 0 || state.student_topk.is_empty()) {
                state.student_topk = refresh_student_topk(&state.model, &self.split.train, self.distill.k)?;
            }
            let record = self.run_epoch(&mut state, epoch)?;
            log(&format!(
                "epoch {:>3}  loss {:.6}  rec {:.6}  distill {:.6}  hint {:.6}  val_hr@{k} {:.4}  val_ndcg@{k} {:.4}",
                epoch + 1,
                record.loss,
                record.rec_loss,
                record.distill_loss,
                record.hint_loss,
                record.val_hr,
                record.val_ndcg,
                k = self.config.eval_k
            ));
            let improved = record.val_ndcg > state.best_ndcg;
            state.history.push(record);
            state.epochs_done += 1;
            if improved {
                state.best_ndcg = state.history.last().expect("pushed").val_ndcg;
                state.best_epoch = state.epochs_done;
                state.best_params = state.model.params.clone();
                state.bad_epochs = 0;
            } else {
                state.bad_epochs += 1;
                if self.config.patience > 0 && state.bad_epochs >= self.config.patience {
                    log(&format!(
                        "early stop after epoch {}; best epoch {}",
                        state.epochs_done, state.best_epoch
                    ));
                    state.stopped = true;
                }
            }
        }
        Ok(state)
    }

    pub fn validate_model(&self, model: &StudentModel) -> Result<MetricsReport> {
        evaluate(model, &self.split.validation, self.config.eval_k, self.config.exclude_seen)
    }

    fn run_epoch(&self, state: &mut TrainState, epoch: usize) -> Result<EpochRecord> {
        let cfg = &self.config;
        let train = &self.split.train;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[seed::SHUFFLE, epoch as u64]));
        let (mut total, mut rec, mut dist, mut hint) = (0.0, 0.0, 0.0, 0.0);
        let mut first = f64::NAN;
        let mut last = f64::NAN;
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SequenceSample> = chunk.iter().map(|&i| &train[i]).collect();
            let l = self.step(state, &batch, epoch, step)?;
            if step == 0 {
                first = l.total;
            }
            last = l.total;
            total += l.total;
            rec += l.rec;
            dist += l.distill;
            hint += l.hint;
            steps += 1;
        }
        let n = steps as f64;
        let val = if self.split.validation.is_empty() {
            None
        } else {
            Some(self.validate_model(&state.model)?)
        };
        Ok(EpochRecord {
            epoch: epoch + 1,
            loss: total / n,
            rec_loss: rec / n,
            distill_loss: dist / n,
            hint_loss: hint / n,
            first_batch_loss: first,
            last_batch_loss: last,
            val_hr: val.as_ref().map_or(0.0, |m| m.hr),
            val_ndcg: val.as_ref().map_or(0.0, |m| m.ndcg),
        })
    }

    /// The joint training loss for one batch, exactly as a training step
    /// builds it. Dropout and negatives are derived from `(epoch, step)`.
    pub fn loss_graph(
        &self,
        model: &StudentModel,
        student_topk: &StudentTopK,
        batch: &[&SequenceSample],
        epoch: usize,
        step: usize,
    ) -> Result<LossGraph> {
        let cfg = &self.config;
        let b = batch.len();
        let neg = cfg.negatives;
        let mut g = Graph::new(true);
        let table = model.item_table(&mut g);
        let prefixes: Vec<&[usize]> = batch.iter().map(|s| s.prefix.as_slice()).collect();
        let e = model.encode(
            &mut g,
            table,
            &prefixes,
            seed::derive(cfg.seed, &[seed::DROPOUT, epoch as u64, step as u64]),
        )?;

        let mut rec_ids = Vec::with_capacity(b * (1 + neg));
        for s in batch {
            rec_ids.push(s.target);
            let seed_value = seed::derive(cfg.seed, &[seed::NEGATIVES, epoch as u64, s.index as u64]);
            rec_ids.extend(sample_negatives(s.target, self.split.item_count, neg, seed_value)?);
        }
        let rec_logits = g.gather_dot(e, table, rec_ids.clone(), 1 + neg);
        let rec = rec_loss_node(&mut g, rec_logits, b, neg, cfg.reduction);
        let mut loss = rec;

        let mut distill_node = None;
        if self.distill.is_active() {
            let teacher = self.teacher.expect("checked in new");
            let (ids, w) = batch_weights(batch, teacher, student_topk, &self.distill)?;
            let logits = g.gather_dot(e, table, ids, self.distill.k);
            let ld = distill_loss_node(&mut g, logits, w, cfg.reduction);
            let scaled = g.scale(ld, self.distill.lambda_d);
            loss = g.add(loss, scaled);
            distill_node = Some(ld);
        }

        let mut hint_node = None;
        if model.config.embed_mode == FusionMode::HintAlign && cfg.lambda_h > 0.0 {
            let mut items: BTreeSet<usize> = rec_ids.iter().copied().collect();
            for s in batch {
                items.extend(s.prefix.iter().copied());
            }
            let items: Vec<usize> = items.into_iter().collect();
            let target = model.hint_target(&mut g)?;
            let lh = embed::hint_loss_node(&mut g, table, target, &items);
            let scaled = g.scale(lh, cfg.lambda_h);
            loss = g.add(loss, scaled);
            hint_node = Some(lh);
        }
        let total = g.label(loss, "loss.total");
        Ok(LossGraph {
            graph: g,
            total,
            rec,
            distill: distill_node,
            hint: hint_node,
        })
    }

    fn step(&self, state: &mut TrainState, batch: &[&SequenceSample], epoch: usize, step: usize) -> Result<StepLosses> {
        let LossGraph {
            graph: mut g,
            total: loss,
            rec,
            distill: distill_node,
            hint: hint_node,
        } = self.loss_graph(&state.model, &state.student_topk, batch, epoch, step)?;
        let model = &state.model;
        let diverged = |detail: String| CoreError::Diverged {
            epoch: epoch + 1,
            step: step + 1,
            detail,
        };
        match g.forward(&model.params, &Default::default()) {
            Ok(()) => {}
            Err(AutodiffError::NonFinite { node }) => return Err(diverged(format!("non-finite value at {node}"))),
            Err(e) => return Err(e.into()),
        }
        let value = |n| -> Result<f64> { Ok(g.value(n)?.item().expect("scalar")) };
        let losses = StepLosses {
            total: value(loss)?,
            rec: value(rec)?,
            distill: distill_node.map(value).transpose()?.unwrap_or(0.0),
            hint: hint_node.map(value).transpose()?.unwrap_or(0.0),
        };
        let grads = g.backward(loss, &Tensor::scalar(1.0))?;
        match state.adam.step(&mut state.model.params, &grads) {
            Ok(()) => {}
            Err(AutodiffError::NonFiniteGradient(name)) => {
                return Err(diverged(format!("non-finite gradient for `{name}`")))
            }
            Err(e) => return Err(e.into()),
        }
        Ok(losses)
    }
}
