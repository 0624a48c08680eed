//! Fine-tuning, evaluation, prediction and modality-masking probes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, Var};
use crate::data_model::{Category, ClipRecord, LabelSet, ModalitySet};
use crate::error::{Error, Result};
use crate::heads::softplus;
use crate::metrics::{average_precision, Confusion};
use crate::model::{ClipTensors, HiccapModel, Task};
use crate::optim::{AdamW, OptimizerConfig, ReduceLrOnPlateau};
use crate::params::ParamId;
use crate::rng::Stream;

/// Clips ready for the model, with labels when available.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSet {
    pub ids: Vec<String>,
    pub clips: Vec<ClipTensors>,
    pub labels: Vec<Option<LabelSet>>,
}

impl ClipSet {
    pub fn from_records(records: &[ClipRecord]) -> Self {
        Self {
            ids: records.iter().map(|r| r.clip_id.clone()).collect(),
            clips: records.iter().map(ClipTensors::from_record).collect(),
            labels: records.iter().map(|r| r.labels.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            clips: idx.iter().map(|&i| self.clips[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }

    pub fn masked(&self, mask: ModalitySet) -> Self {
        Self {
            clips: self.clips.iter().map(|c| c.masked(mask)).collect(),
            ..self.clone()
        }
    }

    fn require_labels(&self) -> Result<Vec<&LabelSet>> {
        self.labels
            .iter()
            .zip(&self.ids)
            .map(|(l, id)| l.as_ref().ok_or_else(|| Error::NoLabels(id.clone())))
            .collect()
    }
}

/// Gold class per head for the given labels.
pub fn gold_classes(task: Task, labels: &[&LabelSet]) -> Vec<Vec<usize>> {
    match task {
        Task::Binary => vec![labels.iter().map(|l| l.binary as usize).collect()],
        Task::Multitask => (0..4)
            .map(|c| labels.iter().map(|l| l.categories[c] as usize).collect())
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Mean accuracy over the task heads.
    AvgAccuracy,
    MacroF1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub selection: Selection,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Worker threads for evaluation; 1 keeps everything on the caller.
    pub eval_threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            selection: Selection::AvgAccuracy,
            max_steps: None,
            seed: 0,
            eval_threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_selection: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    /// Parameters of the epoch with the best validation selection metric.
    pub model: HiccapModel,
    pub optimizer: AdamW,
    pub history: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub step_losses: Vec<f64>,
}

/// Gradients of every bound trainable parameter.
pub(crate) fn param_grads(g: &Graph, loss: Var) -> Vec<(ParamId, crate::autograd::Matrix)> {
    let grads = g.backward(loss);
    g.bound_params()
        .into_iter()
        .filter_map(|(id, v)| grads.wrt(v).map(|d| (id, d.clone())))
        .collect()
}

/// One optimizer step on a fine-tuning batch; returns the loss.
pub fn finetune_step(
    model: &mut HiccapModel,
    opt: &mut AdamW,
    set: &ClipSet,
    batch: &[usize],
    task: Task,
) -> Result<f64> {
    let labels = set.subset(batch).require_labels()?.into_iter().cloned().collect::<Vec<_>>();
    let label_refs: Vec<&LabelSet> = labels.iter().collect();
    let gold = gold_classes(task, &label_refs);
    let clips: Vec<&ClipTensors> = batch.iter().map(|&i| &set.clips[i]).collect();
    let (loss, grads, updates) = {
        let mut g = Graph::new(&model.store, Mode::Train);
        let reps = model.represent(&mut g, &clips)?;
        let (total, _) = model.finetune_loss(&mut g, &reps, task, &gold)?;
        let loss = g.scalar(total);
        let grads = if loss.is_finite() { param_grads(&g, total) } else { vec![] };
        (loss, grads, g.take_buffer_updates())
    };
    if !loss.is_finite() {
        return Ok(loss);
    }
    opt.step(&mut model.store, &grads);
    model.apply_buffer_updates(updates)?;
    Ok(loss)
}

pub fn finetune(model: HiccapModel, train: &ClipSet, val: &ClipSet, task: Task, cfg: &TrainConfig) -> Result<FinetuneResult> {
    cfg.optimizer.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyPartition("train"));
    }
    if val.is_empty() {
        return Err(Error::EmptyPartition("validation"));
    }
    train.require_labels()?;
    val.require_labels()?;
    let mut model = model;
    let mut opt = AdamW::new(&cfg.optimizer);
    let mut sched = ReduceLrOnPlateau::new(&cfg.optimizer);
    let mut best = model.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let bs = cfg.optimizer.batch_size;
    'epochs: for epoch in 0..cfg.optimizer.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        Stream::indexed(cfg.seed, "shuffle", epoch as u64).shuffle(&mut order);
        let mut sum = 0.0;
        let mut steps = 0;
        for (step, batch) in order.chunks(bs).enumerate() {
            if cfg.max_steps.is_some_and(|m| step_losses.len() >= m) {
                break;
            }
            let loss = finetune_step(&mut model, &mut opt, train, batch, task)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            step_losses.push(loss);
            sum += loss;
            steps += 1;
        }
        if steps == 0 {
            break 'epochs;
        }
        let report = evaluate_with(&model, val, task, cfg.eval_threads)?;
        let score = match cfg.selection {
            Selection::AvgAccuracy => report.mean_accuracy,
            Selection::MacroF1 => report.macro_f1.or(report.binary.as_ref().and_then(|b| b.f1)).unwrap_or(0.0),
        };
        if score > best_score {
            best_score = score;
            best = model.clone();
            best_epoch = Some(epoch);
        }
        opt.lr = sched.step(report.loss, opt.lr);
        history.push(EpochLog {
            epoch,
            train_loss: sum / steps as f64,
            val_loss: report.loss,
            val_selection: score,
            lr: opt.lr,
        });
        log::info!(
            "epoch {epoch}: train loss {:.5}, val loss {:.5}, val selection {score:.4}, lr {:.2e}",
            sum / steps as f64,
            report.loss,
            opt.lr
        );
    }
    Ok(FinetuneResult {
        model: best,
        optimizer: opt,
        history,
        best_epoch,
        step_losses,
    })
}

// ---- prediction and evaluation ----

/// Per-clip class probabilities and log-probabilities, one `[p0, p1]` per
/// head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub task: Task,
    pub ids: Vec<String>,
    pub probs: Vec<Vec<[f64; 2]>>,
    #[serde(skip)]
    pub log_probs: Vec<Vec<[f64; 2]>>,
}

fn predict_chunk(model: &HiccapModel, clips: &[ClipTensors], task: Task) -> Result<Vec<Vec<[f64; 2]>>> {
    let mut g = Graph::new(&model.store, Mode::Eval);
    let refs: Vec<&ClipTensors> = clips.iter().collect();
    let reps = model.represent(&mut g, &refs)?;
    let logits = model.classify(&mut g, &reps, task)?;
    let lps: Vec<Var> = logits.iter().map(|l| g.log_softmax_rows(*l)).collect();
    Ok((0..clips.len())
        .map(|i| {
            lps.iter()
                .map(|lp| {
                    let v = g.value(*lp);
                    [v[[i, 0]], v[[i, 1]]]
                })
                .collect()
        })
        .collect())
}

const PREDICT_CHUNK: usize = 64;

/// Eval-mode prediction. Rows are independent in eval mode, so chunking and
/// threading do not change results.
pub fn predict_with(model: &HiccapModel, set: &ClipSet, task: Task, threads: usize) -> Result<Predictions> {
    let chunks: Vec<&[ClipTensors]> = set.clips.chunks(PREDICT_CHUNK).collect();
    let parts: Vec<Result<Vec<Vec<[f64; 2]>>>> = if threads > 1 && chunks.len() > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| chunks.par_iter().map(|c| predict_chunk(model, c, task)).collect())
    } else {
        chunks.iter().map(|c| predict_chunk(model, c, task)).collect()
    };
    let mut log_probs = Vec::with_capacity(set.len());
    for p in parts {
        log_probs.extend(p?);
    }
    let probs = log_probs
        .iter()
        .map(|heads| heads.iter().map(|lp| [lp[0].exp(), lp[1].exp()]).collect())
        .collect();
    Ok(Predictions {
        task,
        ids: set.ids.clone(),
        probs,
        log_probs,
    })
}

pub fn predict(model: &HiccapModel, set: &ClipSet, task: Task) -> Result<Predictions> {
    predict_with(model, set, task, 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub name: String,
    /// Positive-class F1; `None` when neither gold nor predictions contain a
    /// positive.
    pub f1: Option<f64>,
    pub accuracy: f64,
    /// `None` without gold positives.
    pub average_precision: Option<f64>,
    pub confusion: Confusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub n_clips: usize,
    pub mask: Option<ModalitySet>,
    /// Binary head (binary task only).
    pub binary: Option<HeadReport>,
    /// Per-category heads (multi-task only).
    pub categories: Vec<HeadReport>,
    /// Mean F1 over categories with a defined F1.
    pub macro_f1: Option<f64>,
    pub mean_accuracy: f64,
    /// Objective value on this partition (weighted for multi-task).
    pub loss: f64,
}

fn head_report(name: &str, probs: &[[f64; 2]], gold: &[usize]) -> Result<HeadReport> {
    let preds: Vec<bool> = probs.iter().map(|p| p[1] > p[0]).collect();
    let golds: Vec<bool> = gold.iter().map(|&g| g == 1).collect();
    let confusion = Confusion::count(&preds, &golds, true)?;
    let f1 = match confusion.f1() {
        Ok(v) => Some(v),
        Err(Error::NoPositivesAnywhere) => None,
        Err(e) => return Err(e),
    };
    let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
    let average_precision = match average_precision(&scores, &golds) {
        Ok(v) => Some(v),
        Err(Error::NoPositives) => None,
        Err(e) => return Err(e),
    };
    Ok(HeadReport {
        name: name.to_string(),
        f1,
        accuracy: confusion.accuracy(),
        average_precision,
        confusion,
    })
}

/// Score predictions against labels. Class decisions are the argmax (ties go
/// to the negative class).
pub fn score(
    model: &HiccapModel,
    preds: &Predictions,
    labels: &[&LabelSet],
) -> Result<MetricsReport> {
    if labels.len() != preds.probs.len() {
        return Err(Error::LengthMismatch {
            left: preds.probs.len(),
            right: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyPartition("evaluation"));
    }
    let task = preds.task;
    let gold = gold_classes(task, labels);
    let n = labels.len() as f64;
    let mut heads = Vec::new();
    let mut head_losses = Vec::new();
    for (h, g) in gold.iter().enumerate() {
        let probs: Vec<[f64; 2]> = preds.probs.iter().map(|p| p[h]).collect();
        let name = match task {
            Task::Binary => "binary",
            Task::Multitask => Category::ALL[h].name(),
        };
        heads.push(head_report(name, &probs, g)?);
        let ce = if preds.log_probs.len() == preds.probs.len() {
            -preds.log_probs.iter().zip(g).map(|(lp, &y)| lp[h][y]).sum::<f64>() / n
        } else {
            -preds.probs.iter().zip(g).map(|(p, &y)| p[h][y].ln()).sum::<f64>() / n
        };
        head_losses.push(ce);
    }
    let loss = match task {
        Task::Binary => head_losses[0],
        Task::Multitask => {
            let theta = model.store.get(model.task_weights.theta);
            head_losses.iter().zip(theta.iter()).map(|(l, t)| softplus(*t) * l).sum()
        }
    };
    let mean_accuracy = heads.iter().map(|h| h.accuracy).sum::<f64>() / heads.len() as f64;
    Ok(match task {
        Task::Binary => MetricsReport {
            task,
            n_clips: labels.len(),
            mask: None,
            macro_f1: None,
            binary: heads.pop(),
            categories: vec![],
            mean_accuracy,
            loss,
        },
        Task::Multitask => {
            let defined: Vec<f64> = heads.iter().filter_map(|h| h.f1).collect();
            MetricsReport {
                task,
                n_clips: labels.len(),
                mask: None,
                macro_f1: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
                binary: None,
                categories: heads,
                mean_accuracy,
                loss,
            }
        }
    })
}

pub fn evaluate_with(model: &HiccapModel, set: &ClipSet, task: Task, threads: usize) -> Result<MetricsReport> {
    if set.is_empty() {
        return Err(Error::EmptyPartition("evaluation"));
    }
    let labels = set.require_labels()?;
    let preds = predict_with(model, set, task, threads)?;
    score(model, &preds, &labels)
}

pub fn evaluate(model: &HiccapModel, set: &ClipSet, task: Task) -> Result<MetricsReport> {
    evaluate_with(model, set, task, 1)
}

/// Evaluate with the masked modalities replaced by an all-zeros timestep.
pub fn mask_probe(model: &HiccapModel, set: &ClipSet, task: Task, mask: ModalitySet) -> Result<MetricsReport> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    if model.active().iter().all(|m| mask.contains(m)) {
        return Err(Error::AllMasked);
    }
    let mut r = evaluate(model, &set.masked(mask), task)?;
    r.mask = Some(mask);
    Ok(r)
}

impl MetricsReport {
    /// F1 of a named head (`binary` or a category name).
    pub fn f1_of(&self, name: &str) -> Option<f64> {
        self.binary
            .iter()
            .chain(&self.categories)
            .find(|h| h.name == name)
            .and_then(|h| h.f1)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("head,f1,accuracy,average_precision,tp,fp,fn,tn\n");
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
        for h in self.binary.iter().chain(&self.categories) {
            let c = h.confusion;
            s.push_str(&format!(
                "{},{},{:.6},{},{},{},{},{}\n",
                h.name,
                opt(h.f1),
                h.accuracy,
                opt(h.average_precision),
                c.tp,
                c.fp,
                c.fn_,
                c.tn
            ));
        }
        if let Some(m) = self.macro_f1 {
            s.push_str(&format!("macro,{m:.6},{:.6},,,,,\n", self.mean_accuracy));
        }
        s
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} task, {} clips", self.task, self.n_clips)?;
        if let Some(m) = self.mask {
            write!(f, ", masked {m}")?;
        }
        writeln!(f)?;
        let opt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        for h in self.binary.iter().chain(&self.categories) {
            writeln!(
                f,
                "  {:<16} F1 {:>7}  acc {:.4}  AP {:>7}",
                h.name,
                opt(h.f1),
                h.accuracy,
                opt(h.average_precision)
            )?;
        }
        if self.task == Task::Multitask {
            writeln!(f, "  macro F1 {}", opt(self.macro_f1))?;
        }
        writeln!(f, "  mean accuracy {:.4}, loss {:.5}", self.mean_accuracy, self.loss)
    }
}
