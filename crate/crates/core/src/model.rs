//! The full HICCAP network: encoders, hierarchical cross-attention, pooling,
//! classification heads, matching heads and contrastive projections.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, Var};
use crate::data_model::{ClipRecord, Dims, Modality, ModalityOrdering, ModalitySet};
use crate::encoders::{EncoderConfig, RecurrentEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::hca::{Fusion, HcaConfig};
use crate::heads::{self, LossWeights, MlpBlock};
use crate::params::{Initializer, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Binary,
    Multitask,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Task::Binary),
            "multitask" | "multi-task" => Ok(Task::Multitask),
            _ => Err(Error::Config(format!("unknown task {s:?}; use binary or multitask"))),
        }
    }

    pub fn num_heads(self) -> usize {
        match self {
            Task::Binary => 1,
            Task::Multitask => 4,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Binary => "binary",
            Task::Multitask => "multitask",
        })
    }
}

/// Matching tasks as (name, first modality, second modality).
pub const MATCHING_TASKS: [(&str, Modality, Modality); 3] = [
    ("vtm", Modality::Video, Modality::Text),
    ("vam", Modality::Video, Modality::Audio),
    ("atm", Modality::Audio, Modality::Text),
];

/// Contrastive modality pairs, each with its own projection stack.
pub const CONTRASTIVE_PAIRS: [(&str, Modality, Modality); 3] = [
    ("av", Modality::Audio, Modality::Video),
    ("at", Modality::Audio, Modality::Text),
    ("vt", Modality::Video, Modality::Text),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dims: Dims,
    pub encoder: EncoderConfig,
    pub hca: HcaConfig,
    pub ordering: ModalityOrdering,
    /// Modalities fed to the model; fewer than three gives the ablation
    /// variants.
    pub modalities: ModalitySet,
    /// Contrastive embedding width; `None` means `max(d_model / 4, 2)`.
    pub proj_dim: Option<usize>,
    pub tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dims: Dims::default(),
            encoder: EncoderConfig::default(),
            hca: HcaConfig::default(),
            ordering: ModalityOrdering::default(),
            modalities: ModalitySet::ALL,
            proj_dim: None,
            tau: 0.07,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.encoder.d_model
    }

    pub fn proj_dim(&self) -> usize {
        self.proj_dim.unwrap_or((self.d_model() / 4).max(2))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.hca.validate(self.d_model())?;
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality must be active".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.proj_dim() == 0 {
            return Err(Error::Config("proj_dim must be >= 1".into()));
        }
        for m in Modality::ALL {
            if self.dims.get(m) == 0 {
                return Err(Error::Config(format!("{m} feature width must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Model-ready inputs of one clip; `None` is a masked or absent modality
/// and is fed as a single all-zeros timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipTensors {
    pub seqs: [Option<Matrix>; 3],
}

impl ClipTensors {
    pub fn from_record(rec: &ClipRecord) -> Self {
        Self {
            seqs: Modality::ALL.map(|m| rec.sequence(m).map(|s| s.to_matrix())),
        }
    }

    pub fn masked(&self, mask: ModalitySet) -> Self {
        let mut out = self.clone();
        for m in mask.iter() {
            out.seqs[m.index()] = None;
        }
        out
    }
}

/// Per-modality `batch x d_model` pooled representations.
pub type Reps = [Option<Var>; 3];

#[derive(Clone, Debug)]
pub struct HiccapModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub text: Option<TextEncoder>,
    pub audio: Option<RecurrentEncoder>,
    pub video: Option<RecurrentEncoder>,
    pub fusion: Fusion,
    pub binary_head: MlpBlock,
    pub task_heads: [MlpBlock; 4],
    pub task_weights: LossWeights,
    pub matching_heads: [MlpBlock; 3],
    pub matching_weights: LossWeights,
    pub projections: [MlpBlock; 3],
    pub contrastive_weights: LossWeights,
}

impl HiccapModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let d = config.d_model();
        let active = config.modalities;
        let enc = &config.encoder;
        let text = active
            .contains(Modality::Text)
            .then(|| TextEncoder::new(&mut store, &mut init, "enc.t", config.dims.text, enc));
        let audio = active.contains(Modality::Audio).then(|| {
            RecurrentEncoder::new(&mut store, &mut init, "enc.a", Modality::Audio, config.dims.audio, enc)
        });
        let video = active.contains(Modality::Video).then(|| {
            RecurrentEncoder::new(&mut store, &mut init, "enc.v", Modality::Video, config.dims.video, enc)
        });
        let fusion = Fusion::new(&mut store, &mut init, active, config.ordering, d, &config.hca);
        let fused = active.len() * d;
        let binary_head = MlpBlock::new(&mut store, &mut init, "head.binary", fused, 2);
        let task_heads = [0, 1, 2, 3].map(|i| MlpBlock::new(&mut store, &mut init, &format!("head.task{i}"), fused, 2));
        let task_weights = LossWeights::new(&mut store, "loss.task", 4);
        let matching_heads =
            MATCHING_TASKS.map(|(n, _, _)| MlpBlock::new(&mut store, &mut init, &format!("match.{n}"), 2 * d, 2));
        let matching_weights = LossWeights::new(&mut store, "loss.match", 3);
        let p = config.proj_dim();
        let projections = CONTRASTIVE_PAIRS.map(|(n, _, _)| {
            MlpBlock::with_widths(
                &mut store,
                &mut init,
                &format!("proj.{n}"),
                [d, (d / 2).max(1), (d / 4).max(1), p],
            )
        });
        let contrastive_weights = LossWeights::new(&mut store, "loss.contrast", 3);
        Ok(Self {
            config,
            store,
            text,
            audio,
            video,
            fusion,
            binary_head,
            task_heads,
            task_weights,
            matching_heads,
            matching_weights,
            projections,
            contrastive_weights,
        })
    }

    pub fn active(&self) -> ModalitySet {
        self.config.modalities
    }

    fn encode(&self, g: &mut Graph, m: Modality, seq: Option<&Matrix>) -> Result<Var> {
        let dim = self.config.dims.get(m);
        let x = match seq {
            Some(s) => {
                if s.nrows() == 0 {
                    return Err(Error::EmptySequence(m));
                }
                if s.ncols() != dim {
                    return Err(Error::ShapeMismatch(format!(
                        "{m} features have width {}, model expects {dim}",
                        s.ncols()
                    )));
                }
                g.constant(s.clone())
            }
            None => g.constant(Array2::zeros((1, dim))),
        };
        Ok(match m {
            Modality::Text => self.text.as_ref().expect("active text encoder").forward(g, x),
            Modality::Audio => self.audio.as_ref().expect("active audio encoder").forward(g, x),
            Modality::Video => self.video.as_ref().expect("active video encoder").forward(g, x),
        })
    }

    /// Pooled representation of one clip, `1 x d` per active modality.
    pub fn represent_clip(&self, g: &mut Graph, clip: &ClipTensors) -> Result<Reps> {
        let mut enc = [None, None, None];
        for m in self.active().iter() {
            enc[m.index()] = Some(self.encode(g, m, clip.seqs[m.index()].as_ref())?);
        }
        self.fusion.forward(g, &enc)
    }

    /// Stack pooled representations of a batch into `batch x d` per modality.
    pub fn represent(&self, g: &mut Graph, clips: &[&ClipTensors]) -> Result<Reps> {
        if clips.is_empty() {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        let mut rows: [Vec<Var>; 3] = [vec![], vec![], vec![]];
        for c in clips {
            let r = self.represent_clip(g, c)?;
            for m in self.active().iter() {
                rows[m.index()].push(r[m.index()].expect("active modality"));
            }
        }
        let mut out = [None, None, None];
        for m in self.active().iter() {
            let parts = &rows[m.index()];
            out[m.index()] = Some(if parts.len() == 1 {
                parts[0]
            } else {
                g.concat_rows(parts)
            });
        }
        Ok(out)
    }

    fn fused(&self, g: &mut Graph, reps: &Reps) -> Var {
        let parts: Vec<Var> = self.active().iter().map(|m| reps[m.index()].expect("active")).collect();
        if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_cols(&parts)
        }
    }

    /// `batch x 2` logits per head: one for binary, four for multi-task.
    pub fn classify(&self, g: &mut Graph, reps: &Reps, task: Task) -> Result<Vec<Var>> {
        let x = self.fused(g, reps);
        match task {
            Task::Binary => Ok(vec![self.binary_head.forward(g, x)?]),
            Task::Multitask => self.task_heads.iter().map(|h| h.forward(g, x)).collect(),
        }
    }

    /// Fine-tuning loss. `gold[h][i]` is the class of sample `i` for head
    /// `h`. Returns the total and the per-head cross-entropies.
    pub fn finetune_loss(&self, g: &mut Graph, reps: &Reps, task: Task, gold: &[Vec<usize>]) -> Result<(Var, Vec<Var>)> {
        let logits = self.classify(g, reps, task)?;
        if gold.len() != logits.len() {
            return Err(Error::ShapeMismatch(format!("{} gold rows for {} heads", gold.len(), logits.len())));
        }
        let losses: Vec<Var> = logits
            .iter()
            .zip(gold)
            .map(|(l, y)| heads::cross_entropy(g, *l, y))
            .collect();
        let total = match task {
            Task::Binary => losses[0],
            Task::Multitask => self.task_weights.total(g, &losses),
        };
        Ok((total, losses))
    }

    fn require_trimodal(&self) -> Result<()> {
        if self.active() != ModalitySet::ALL {
            return Err(Error::Config("pretraining needs all three modalities".into()));
        }
        Ok(())
    }

    /// `batch x 2` matching logits for VTM, VAM and ATM.
    pub fn matching_logits(&self, g: &mut Graph, reps: &Reps) -> Result<[Var; 3]> {
        self.require_trimodal()?;
        let mut out = Vec::with_capacity(3);
        for ((_, a, b), head) in MATCHING_TASKS.iter().zip(&self.matching_heads) {
            let ra = reps[a.index()].expect("trimodal");
            let rb = reps[b.index()].expect("trimodal");
            let x = g.concat_cols(&[ra, rb]);
            out.push(head.forward(g, x)?);
        }
        Ok([out[0], out[1], out[2]])
    }

    /// Weighted matching loss against per-sample `(vtm, vam, atm)` labels.
    pub fn matching_loss(&self, g: &mut Graph, reps: &Reps, labels: &[[bool; 3]]) -> Result<(Var, [Var; 3])> {
        let logits = self.matching_logits(g, reps)?;
        let mut parts = Vec::with_capacity(3);
        for (k, l) in logits.iter().enumerate() {
            let gold: Vec<usize> = labels.iter().map(|y| y[k] as usize).collect();
            parts.push(heads::cross_entropy(g, *l, &gold));
        }
        let total = self.matching_weights.total(g, &parts);
        Ok((total, [parts[0], parts[1], parts[2]]))
    }

    /// Unit-norm projections `(u_m, u_m')` for each contrastive pair. Both
    /// sides go through the pair's stack as one stacked batch.
    pub fn project_pairs(&self, g: &mut Graph, reps: &Reps, rows: &[usize]) -> Result<[(Var, Var); 3]> {
        self.require_trimodal()?;
        let n = rows.len();
        let mut out = Vec::with_capacity(3);
        for ((_, a, b), block) in CONTRASTIVE_PAIRS.iter().zip(&self.projections) {
            let za = g.select_rows(reps[a.index()].expect("trimodal"), rows);
            let zb = g.select_rows(reps[b.index()].expect("trimodal"), rows);
            let z = g.concat_rows(&[za, zb]);
            let u = heads::project(g, block, z)?;
            out.push((g.slice_rows(u, 0, n), g.slice_rows(u, n, n)));
        }
        Ok([out[0], out[1], out[2]])
    }

    /// Weighted NCE over the three pairs, restricted to `rows`.
    pub fn contrastive_loss(&self, g: &mut Graph, reps: &Reps, rows: &[usize]) -> Result<(Var, [Var; 3])> {
        if rows.is_empty() {
            return Err(Error::EmptyAlignedSubset);
        }
        let tau = self.config.tau;
        let pairs = self.project_pairs(g, reps, rows)?;
        let parts: Vec<Var> = pairs.iter().map(|(u, v)| heads::nce(g, *u, *v, tau)).collect();
        let total = self.contrastive_weights.total(g, &parts);
        Ok((total, [parts[0], parts[1], parts[2]]))
    }

    /// Apply running-stat updates collected during a train-mode pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(crate::params::ParamId, Matrix)>) -> Result<()> {
        for (id, v) in updates {
            self.store.set(id, v)?;
        }
        Ok(())
    }
}
