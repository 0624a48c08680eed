//! Self-supervised pretraining: modality-replacement corruption, matching
//! and contrastive objectives, and the pretraining loop.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode};
use crate::data_model::Modality;
use crate::error::{Error, Result};
use crate::model::{ClipTensors, HiccapModel};
use crate::optim::{AdamW, OptimizerConfig, ReduceLrOnPlateau};
use crate::rng::Stream;
use crate::train_eval::param_grads;

/// Matching labels `(vtm, vam, atm)` after replacing `m`.
pub fn matching_labels(replaced: Option<Modality>) -> [bool; 3] {
    match replaced {
        None => [true, true, true],
        Some(Modality::Video) => [false, false, true],
        Some(Modality::Text) => [false, true, false],
        Some(Modality::Audio) => [true, false, false],
    }
}

/// Per-sample corruption decision: the replaced modality and the donor index.
pub type Replacement = Option<(Modality, usize)>;

/// Draw replacements for a batch of `n` samples. Per sample the draws are,
/// in order: modality `floor(3u)`, Bernoulli(`p`), then a donor uniform over
/// the other `n - 1` samples. A batch of one is never corrupted and draws
/// nothing.
pub fn plan_corruption(n: usize, p: f64, rng: &mut Stream) -> Vec<Replacement> {
    if n < 2 {
        return vec![None; n];
    }
    (0..n)
        .map(|i| {
            let m = Modality::ALL[rng.index(3)];
            if !rng.bernoulli(p) {
                return None;
            }
            let mut donor = rng.index(n - 1);
            if donor >= i {
                donor += 1;
            }
            Some((m, donor))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptedBatch {
    pub clips: Vec<ClipTensors>,
    pub labels: Vec<[bool; 3]>,
    pub replaced: Vec<Replacement>,
}

impl CorruptedBatch {
    /// Indices of samples that are still fully aligned.
    pub fn aligned_rows(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == [true; 3]).collect()
    }
}

/// Corrupt a batch without touching the inputs. Donor sequences are taken
/// from the original, uncorrupted batch.
pub fn corrupt_batch(batch: &[&ClipTensors], p: f64, rng: &mut Stream) -> CorruptedBatch {
    let replaced = plan_corruption(batch.len(), p, rng);
    let clips = batch
        .iter()
        .zip(&replaced)
        .map(|(c, r)| {
            let mut out = (*c).clone();
            if let Some((m, donor)) = r {
                out.seqs[m.index()] = batch[*donor].seqs[m.index()].clone();
            }
            out
        })
        .collect();
    let labels = replaced.iter().map(|r| matching_labels(r.map(|x| x.0))).collect();
    CorruptedBatch { clips, labels, replaced }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Hybrid,
    Matching,
    Contrastive,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(Self::Hybrid),
            "matching" => Ok(Self::Matching),
            "contrastive" => Ok(Self::Contrastive),
            _ => Err(Error::Config(format!("unknown objective {s:?}"))),
        }
    }
}

/// How the hybrid objective combines its two losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Both losses every step.
    Summed,
    /// Matching on even steps, contrastive on odd steps.
    Alternating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub corruption_p: f64,
    pub objective: Objective,
    pub schedule: Schedule,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            corruption_p: 0.5,
            objective: Objective::Hybrid,
            schedule: Schedule::Summed,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.corruption_p) {
            return Err(Error::Config(format!("corruption probability {} outside [0, 1]", self.corruption_p)));
        }
        self.optimizer.validate()
    }

    fn uses(&self, step: usize) -> (bool, bool) {
        match (self.objective, self.schedule) {
            (Objective::Matching, _) => (true, false),
            (Objective::Contrastive, _) => (false, true),
            (Objective::Hybrid, Schedule::Summed) => (true, true),
            (Objective::Hybrid, Schedule::Alternating) => (step % 2 == 0, step % 2 == 1),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub total: f64,
    pub matching: Option<f64>,
    pub contrastive: Option<f64>,
    /// The contrastive term was requested but no aligned sample remained.
    pub empty_aligned: bool,
}

/// Loss of a corrupted batch. In train mode the model is updated.
fn run_batch(
    model: &mut HiccapModel,
    opt: Option<&mut AdamW>,
    batch: &CorruptedBatch,
    use_matching: bool,
    use_contrastive: bool,
) -> Result<StepOutcome> {
    let mode = if opt.is_some() { Mode::Train } else { Mode::Eval };
    let mut out = StepOutcome::default();
    let (grads, updates) = {
        let mut g = Graph::new(&model.store, mode);
        let refs: Vec<&ClipTensors> = batch.clips.iter().collect();
        let reps = model.represent(&mut g, &refs)?;
        let mut terms = Vec::new();
        if use_matching {
            let (m, _) = model.matching_loss(&mut g, &reps, &batch.labels)?;
            out.matching = Some(g.scalar(m));
            terms.push(m);
        }
        if use_contrastive {
            let rows = batch.aligned_rows();
            match model.contrastive_loss(&mut g, &reps, &rows) {
                Ok((c, _)) => {
                    out.contrastive = Some(g.scalar(c));
                    terms.push(c);
                }
                Err(Error::EmptyAlignedSubset) => out.empty_aligned = true,
                Err(e) => return Err(e),
            }
        }
        if terms.is_empty() {
            return Ok(out);
        }
        let total = if terms.len() == 1 { terms[0] } else { g.add(terms[0], terms[1]) };
        out.total = g.scalar(total);
        if opt.is_none() || !out.total.is_finite() {
            return Ok(out);
        }
        (param_grads(&g, total), g.take_buffer_updates())
    };
    if let Some(opt) = opt {
        opt.step(&mut model.store, &grads);
        model.apply_buffer_updates(updates)?;
    }
    Ok(out)
}

/// One optimizer step on an already corrupted batch.
pub fn pretrain_step(
    model: &mut HiccapModel,
    opt: &mut AdamW,
    batch: &CorruptedBatch,
    cfg: &PretrainConfig,
    step: usize,
) -> Result<StepOutcome> {
    let (m, c) = cfg.uses(step);
    run_batch(model, Some(opt), batch, m, c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    /// Batches whose contrastive term was skipped for lack of aligned rows.
    pub empty_aligned_batches: usize,
}

#[derive(Clone, Debug)]
pub struct PretrainResult {
    /// Parameters with the lowest validation loss seen, including the
    /// initial model.
    pub model: HiccapModel,
    pub optimizer: AdamW,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: Option<usize>,
    pub history: Vec<PretrainEpoch>,
}

/// Validation loss with the full objective, using a corruption draw that is
/// the same every epoch.
pub fn validation_loss(model: &HiccapModel, val: &[ClipTensors], cfg: &PretrainConfig) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::EmptyPartition("validation"));
    }
    let (m, c) = match cfg.objective {
        Objective::Matching => (true, false),
        Objective::Contrastive => (false, true),
        Objective::Hybrid => (true, true),
    };
    let mut model = model.clone();
    let mut sum = 0.0;
    let mut weight = 0usize;
    for (b, chunk) in val.chunks(cfg.optimizer.batch_size).enumerate() {
        let refs: Vec<&ClipTensors> = chunk.iter().collect();
        let mut rng = Stream::indexed(cfg.seed, "corruption/val", b as u64);
        let batch = corrupt_batch(&refs, cfg.corruption_p, &mut rng);
        let out = run_batch(&mut model, None, &batch, m, c)?;
        if out.matching.is_some() || out.contrastive.is_some() {
            sum += out.total * chunk.len() as f64;
            weight += chunk.len();
        }
    }
    Ok(if weight == 0 { f64::INFINITY } else { sum / weight as f64 })
}

pub fn run_pretraining(model: HiccapModel, train: &[ClipTensors], val: &[ClipTensors], cfg: &PretrainConfig) -> Result<PretrainResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyPartition("train"));
    }
    let mut model = model;
    let mut opt = AdamW::new(&cfg.optimizer);
    let mut sched = ReduceLrOnPlateau::new(&cfg.optimizer);
    let initial_val_loss = validation_loss(&model, val, cfg)?;
    let mut best = model.clone();
    let mut best_val_loss = initial_val_loss;
    let mut best_epoch = None;
    let mut history = Vec::new();
    let mut global = 0usize;
    for epoch in 0..cfg.optimizer.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        Stream::indexed(cfg.seed, "pretrain/shuffle", epoch as u64).shuffle(&mut order);
        let mut sum = 0.0;
        let mut steps = 0usize;
        let mut empty = 0usize;
        for (step, idx) in order.chunks(cfg.optimizer.batch_size).enumerate() {
            let refs: Vec<&ClipTensors> = idx.iter().map(|&i| &train[i]).collect();
            let mut rng = Stream::indexed(cfg.seed, "corruption", global as u64);
            let batch = corrupt_batch(&refs, cfg.corruption_p, &mut rng);
            let out = pretrain_step(&mut model, &mut opt, &batch, cfg, global)?;
            global += 1;
            if !out.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            if out.empty_aligned {
                empty += 1;
                log::warn!("epoch {epoch}, step {step}: no aligned samples, contrastive term skipped");
            }
            if out.matching.is_some() || out.contrastive.is_some() {
                sum += out.total;
                steps += 1;
            }
        }
        let val_loss = validation_loss(&model, val, cfg)?;
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best = model.clone();
            best_epoch = Some(epoch);
        }
        opt.lr = sched.step(val_loss, opt.lr);
        let train_loss = if steps == 0 { f64::NAN } else { sum / steps as f64 };
        log::info!("pretrain epoch {epoch}: train loss {train_loss:.5}, val loss {val_loss:.5}, lr {:.2e}", opt.lr);
        history.push(PretrainEpoch {
            epoch,
            train_loss,
            val_loss,
            lr: opt.lr,
            empty_aligned_batches: empty,
        });
    }
    Ok(PretrainResult {
        model: best,
        optimizer: opt,
        initial_val_loss,
        best_val_loss,
        best_epoch,
        history,
    })
}
