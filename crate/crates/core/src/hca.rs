//! Hierarchical cross-attention.
//!
//! For a target modality `m1` with contexts `(m2, m3)`:
//!
//! ```text
//! head_1   = softmax(Q(m1)   K(m2)^T / sqrt(d_k)) V(m2)
//! head^m1  = softmax(Q(head_1) K(m3)^T / sqrt(d_k)) V(m3)
//! ```
//!
//! Each stage has its own learned Q/K/V projections and an optional output
//! map back to `d_model`. The per-timestep result is then collapsed by
//! additive attention pooling: `alpha = softmax(v^T tanh(W_h h_i + b_h))`,
//! `r = sum_i alpha_i h_i`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, Mode, Var};
use crate::data_model::{Modality, ModalityOrdering, ModalitySet};
use crate::encoders::{EncodedSequence, Linear};
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamId, ParamKind, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HcaConfig {
    /// Query/key/value width; `None` means `d_model`.
    pub d_k: Option<usize>,
    pub n_heads: usize,
    /// Map attention output back to `d_model` with `W_O`. Required when
    /// `d_k != d_model`.
    pub output_projection: bool,
    /// Width of the pooling scorer; `None` means `d_model`.
    pub pool_dim: Option<usize>,
}

impl Default for HcaConfig {
    fn default() -> Self {
        Self {
            d_k: None,
            n_heads: 1,
            output_projection: true,
            pool_dim: None,
        }
    }
}

impl HcaConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        let d_k = self.d_k.unwrap_or(d_model);
        if d_k == 0 || self.n_heads == 0 || d_k % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_k = {d_k} must be a positive multiple of n_heads = {}",
                self.n_heads
            )));
        }
        if !self.output_projection && d_k != d_model {
            return Err(Error::Config(
                "without an output projection d_k must equal d_model".into(),
            ));
        }
        if self.pool_dim == Some(0) {
            return Err(Error::Config("pool_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// One scaled dot-product cross-attention stage.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Option<Linear>,
    pub d_k: usize,
    pub n_heads: usize,
}

/// Attention output and the per-head `T1 x T2` weight matrices.
pub struct AttentionVars {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        d_model: usize,
        cfg: &HcaConfig,
    ) -> Self {
        let d_k = cfg.d_k.unwrap_or(d_model);
        let query = Linear::new(store, init, &format!("{name}.q"), d_model, d_k, true);
        let key = Linear::new(store, init, &format!("{name}.k"), d_model, d_k, true);
        let value = Linear::new(store, init, &format!("{name}.v"), d_model, d_k, true);
        let output = cfg
            .output_projection
            .then(|| Linear::new(store, init, &format!("{name}.o"), d_k, d_model, false));
        Self {
            query,
            key,
            value,
            output,
            d_k,
            n_heads: cfg.n_heads,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.query.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output.as_ref().map_or(self.d_k, |o| o.out_dim)
    }

    pub fn forward(&self, g: &mut Graph, query: Var, context: Var) -> Result<AttentionVars> {
        let (t1, wq) = g.shape(query);
        let (t2, wc) = g.shape(context);
        if t1 == 0 || t2 == 0 {
            return Err(Error::ShapeMismatch("attention over an empty sequence".into()));
        }
        if wq != self.query.in_dim || wc != self.key.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "attention expects widths {}/{}, got query {wq} and context {wc}",
                self.query.in_dim, self.key.in_dim
            )));
        }
        let q = self.query.forward(g, query);
        let k = self.key.forward(g, context);
        let v = self.value.forward(g, context);
        let head_dim = self.d_k / self.n_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * head_dim, head_dim),
                    g.slice_cols(k, h * head_dim, head_dim),
                    g.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let raw = g.matmul_nt(qh, kh);
            let logits = g.scale(raw, scale);
            if !g.value(logits).iter().all(|x| x.is_finite()) {
                return Err(Error::NonFiniteLogit);
            }
            let a = g.softmax_rows(logits);
            outputs.push(g.matmul(a, vh));
            weights.push(a);
        }
        let mut out = if outputs.len() == 1 {
            outputs[0]
        } else {
            g.concat_cols(&outputs)
        };
        if let Some(o) = &self.output {
            out = o.forward(g, out);
        }
        Ok(AttentionVars {
            output: out,
            weights,
        })
    }
}

/// Chained cross-attention stages for one target modality. A trimodal head
/// has two stages; in bimodal models a single stage attends to the one
/// other modality.
#[derive(Clone, Debug)]
pub struct HcaHead {
    pub target: Modality,
    pub contexts: Vec<Modality>,
    pub stages: Vec<CrossAttention>,
}

impl HcaHead {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        target: Modality,
        contexts: Vec<Modality>,
        d_model: usize,
        cfg: &HcaConfig,
    ) -> Self {
        let stages = (0..contexts.len())
            .map(|i| CrossAttention::new(store, init, &format!("{name}.stage{}", i + 1), d_model, cfg))
            .collect();
        Self {
            target,
            contexts,
            stages,
        }
    }

    /// Each stage's output becomes the query of the next.
    pub fn forward(&self, g: &mut Graph, target: Var, contexts: &[Var]) -> Result<Var> {
        if contexts.len() != self.stages.len() {
            return Err(Error::ShapeMismatch(format!(
                "head for {} expects {} contexts, got {}",
                self.target,
                self.stages.len(),
                contexts.len()
            )));
        }
        let mut q = target;
        for (stage, ctx) in self.stages.iter().zip(contexts) {
            q = stage.forward(g, q, *ctx)?.output;
        }
        Ok(q)
    }
}

/// Additive (tanh-scored) attention pooling.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub v: ParamId,
    pub dim: usize,
}

impl AttentionPool {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, dim: usize, hidden: usize) -> Self {
        let w_h = store.add(format!("{name}.w_h"), init.uniform(dim, hidden, dim), ParamKind::Trainable);
        let b_h = store.add(format!("{name}.b_h"), init.uniform(1, hidden, dim), ParamKind::Trainable);
        let v = store.add(format!("{name}.v"), init.uniform(hidden, 1, hidden), ParamKind::Trainable);
        Self { w_h, b_h, v, dim }
    }

    /// Returns the pooled `1 x d` row and the `1 x T` weights.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let (t, d) = g.shape(x);
        if t == 0 || d != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "pooling expects T >= 1 rows of width {}, got {t}x{d}",
                self.dim
            )));
        }
        let w = g.param(self.w_h);
        let b = g.param(self.b_h);
        let v = g.param(self.v);
        let xw = g.matmul(x, w);
        let pre = g.add_row(xw, b);
        let h = g.tanh(pre);
        let scores = g.matmul(h, v);
        let row = g.transpose(scores);
        let alpha = g.softmax_rows(row);
        let r = g.matmul(alpha, x);
        Ok((r, alpha))
    }
}

/// Per-modality HCA heads plus pooling over the active modalities.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub active: ModalitySet,
    pub ordering: ModalityOrdering,
    pub heads: [Option<HcaHead>; 3],
    pub pools: [Option<AttentionPool>; 3],
}

impl Fusion {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        active: ModalitySet,
        ordering: ModalityOrdering,
        d_model: usize,
        cfg: &HcaConfig,
    ) -> Self {
        let pool_dim = cfg.pool_dim.unwrap_or(d_model);
        let mut heads: [Option<HcaHead>; 3] = [None, None, None];
        let mut pools: [Option<AttentionPool>; 3] = [None, None, None];
        for m in active.iter() {
            let contexts: Vec<Modality> = ordering
                .contexts(m)
                .into_iter()
                .filter(|c| active.contains(*c))
                .collect();
            if !contexts.is_empty() {
                heads[m.index()] = Some(HcaHead::new(
                    store,
                    init,
                    &format!("hca.{m}"),
                    m,
                    contexts,
                    d_model,
                    cfg,
                ));
            }
            pools[m.index()] = Some(AttentionPool::new(store, init, &format!("pool.{m}"), d_model, pool_dim));
        }
        Self {
            active,
            ordering,
            heads,
            pools,
        }
    }

    /// Pooled `1 x d` representation for every active modality.
    pub fn forward(&self, g: &mut Graph, encoded: &[Option<Var>; 3]) -> Result<[Option<Var>; 3]> {
        let mut out = [None, None, None];
        for m in self.active.iter() {
            let target = encoded[m.index()]
                .ok_or_else(|| Error::ShapeMismatch(format!("missing encoded {m} sequence")))?;
            let seq = match &self.heads[m.index()] {
                Some(head) => {
                    let ctx: Vec<Var> = head
                        .contexts
                        .iter()
                        .map(|c| {
                            encoded[c.index()]
                                .ok_or_else(|| Error::ShapeMismatch(format!("missing encoded {c} sequence")))
                        })
                        .collect::<Result<_>>()?;
                    head.forward(g, target, &ctx)?
                }
                None => target,
            };
            let pool = self.pools[m.index()].as_ref().expect("pool for active modality");
            out[m.index()] = Some(pool.forward(g, seq)?.0);
        }
        Ok(out)
    }
}

// ---- standalone evaluation on plain matrices ----

pub struct Attention {
    pub output: Matrix,
    /// One `T1 x T2` row-stochastic matrix per head.
    pub weights: Vec<Matrix>,
}

pub fn cross_attention(
    store: &ParamStore,
    params: &CrossAttention,
    query: &Matrix,
    context: &Matrix,
) -> Result<Attention> {
    let mut g = Graph::new(store, Mode::Eval);
    let q = g.constant(query.clone());
    let c = g.constant(context.clone());
    let a = params.forward(&mut g, q, c)?;
    Ok(Attention {
        output: g.value(a.output).clone(),
        weights: a.weights.iter().map(|w| g.value(*w).clone()).collect(),
    })
}

pub fn hca_head(
    store: &ParamStore,
    head: &HcaHead,
    target: &EncodedSequence,
    ctx_first: &EncodedSequence,
    ctx_second: &EncodedSequence,
) -> Result<Matrix> {
    if head.stages.len() != 2 {
        return Err(Error::ShapeMismatch("hca_head needs a two-stage head".into()));
    }
    let mut g = Graph::new(store, Mode::Eval);
    let t = g.constant(target.data.clone());
    let c1 = g.constant(ctx_first.data.clone());
    let c2 = g.constant(ctx_second.data.clone());
    let out = head.forward(&mut g, t, &[c1, c2])?;
    Ok(g.value(out).clone())
}

pub struct Pooled {
    pub vector: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn attention_pool(store: &ParamStore, pool: &AttentionPool, seq: &Matrix) -> Result<Pooled> {
    let mut g = Graph::new(store, Mode::Eval);
    let x = g.constant(seq.clone());
    let (r, alpha) = pool.forward(&mut g, x)?;
    Ok(Pooled {
        vector: g.value(r).iter().cloned().collect(),
        weights: g.value(alpha).iter().cloned().collect(),
    })
}

/// Pooled representations `(r_text, r_audio, r_video)` of a trimodal fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedRepresentation {
    pub text: Vec<f64>,
    pub audio: Vec<f64>,
    pub video: Vec<f64>,
}

pub fn fuse(
    store: &ParamStore,
    fusion: &Fusion,
    text: &EncodedSequence,
    audio: &EncodedSequence,
    video: &EncodedSequence,
) -> Result<FusedRepresentation> {
    if fusion.active != ModalitySet::ALL {
        return Err(Error::Config("fuse needs a trimodal fusion".into()));
    }
    let mut g = Graph::new(store, Mode::Eval);
    let enc = [
        Some(g.constant(text.data.clone())),
        Some(g.constant(audio.data.clone())),
        Some(g.constant(video.data.clone())),
    ];
    let out = fusion.forward(&mut g, &enc)?;
    let row = |v: Option<Var>| g.value(v.expect("trimodal")).iter().cloned().collect::<Vec<_>>();
    Ok(FusedRepresentation {
        text: row(out[0]),
        audio: row(out[1]),
        video: row(out[2]),
    })
}

/// Set every projection of a stage to the identity with zero biases.
/// Requires `d_model == d_k`.
pub fn set_identity(store: &mut ParamStore, stage: &CrossAttention) -> Result<()> {
    let mut layers = vec![&stage.query, &stage.key, &stage.value];
    if let Some(o) = &stage.output {
        layers.push(o);
    }
    for l in layers {
        if l.in_dim != l.out_dim {
            return Err(Error::ShapeMismatch("identity needs square projections".into()));
        }
        store.set(l.weight, Array2::eye(l.in_dim))?;
        if let Some(b) = l.bias {
            store.set(b, Array2::zeros((1, l.out_dim)))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn stage(d: usize, seed: u64) -> (ParamStore, CrossAttention) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let ca = CrossAttention::new(&mut store, &mut init, "s", d, &HcaConfig::default());
        (store, ca)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = crate::rng::Stream::new(seed, "m");
        Array2::from_shape_fn((rows, cols), |_| s.normal())
    }

    #[test]
    fn identity_projection_known_weights() {
        let (mut store, ca) = stage(2, 0);
        set_identity(&mut store, &ca).unwrap();
        let out = cross_attention(&store, &ca, &array![[1.0, 0.0]], &array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        // softmax([1/sqrt(2), 0]) evaluated independently
        let e = (1.0f64 / 2f64.sqrt()).exp();
        let w0 = e / (e + 1.0);
        assert!((w0 - 0.6698).abs() < 1e-4);
        assert!((out.weights[0][[0, 0]] - w0).abs() < 1e-6);
        assert!((out.weights[0][[0, 1]] - (1.0 - w0)).abs() < 1e-6);
        assert!((out.output[[0, 0]] - w0).abs() < 1e-6);
        assert!((out.output[[0, 1]] - (1.0 - w0)).abs() < 1e-6);
    }

    #[test]
    fn singleton_context_returns_its_value_row() {
        let (store, ca) = stage(3, 1);
        let ctx = random(1, 3, 2);
        let q = random(4, 3, 3);
        let out = cross_attention(&store, &ca, &q, &ctx).unwrap();
        // projected value row through V and O
        let v = ctx.dot(store.get(ca.value.weight)) + store.get(ca.value.bias.unwrap());
        let expect = v.dot(store.get(ca.output.as_ref().unwrap().weight));
        for r in 0..4 {
            assert_eq!(out.weights[0][[r, 0]], 1.0);
            for c in 0..3 {
                assert!((out.output[[r, c]] - expect[[0, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_are_stochastic_and_context_order_irrelevant() {
        let (store, ca) = stage(4, 5);
        let q = random(3, 4, 6);
        let ctx = random(5, 4, 7);
        let a = cross_attention(&store, &ca, &q, &ctx).unwrap();
        for row in a.weights[0].rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let perm = [3, 0, 4, 1, 2];
        let ctx_p = ctx.select(ndarray::Axis(0), &perm);
        let b = cross_attention(&store, &ca, &q, &ctx_p).unwrap();
        for (x, y) in a.output.iter().zip(b.output.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_head_splits_width() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(9);
        let cfg = HcaConfig {
            d_k: Some(6),
            n_heads: 3,
            ..Default::default()
        };
        let ca = CrossAttention::new(&mut store, &mut init, "mh", 4, &cfg);
        let out = cross_attention(&store, &ca, &random(2, 4, 1), &random(5, 4, 2)).unwrap();
        assert_eq!(out.weights.len(), 3);
        assert_eq!(out.output.dim(), (2, 4));
        assert!(HcaConfig { d_k: Some(5), n_heads: 2, ..Default::default() }.validate(4).is_err());
    }

    #[test]
    fn shape_errors() {
        let (store, ca) = stage(3, 1);
        assert!(matches!(
            cross_attention(&store, &ca, &random(2, 4, 1), &random(2, 3, 2)),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            cross_attention(&store, &ca, &random(2, 3, 1), &Array2::zeros((0, 3))),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn non_finite_logit_detected() {
        let (store, ca) = stage(2, 1);
        let q = array![[f64::INFINITY, 0.0]];
        assert!(matches!(
            cross_attention(&store, &ca, &q, &random(2, 2, 3)),
            Err(Error::NonFiniteLogit)
        ));
    }

    fn pool(d: usize) -> (ParamStore, AttentionPool) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(3);
        let p = AttentionPool::new(&mut store, &mut init, "p", d, 5);
        (store, p)
    }

    #[test]
    fn pool_single_row_and_identical_rows() {
        let (store, p) = pool(3);
        let one = array![[0.5, -1.0, 2.0]];
        let r = attention_pool(&store, &p, &one).unwrap();
        assert_eq!(r.weights, vec![1.0]);
        assert_eq!(r.vector, vec![0.5, -1.0, 2.0]);
        let same = array![[0.5, -1.0, 2.0], [0.5, -1.0, 2.0], [0.5, -1.0, 2.0]];
        let r = attention_pool(&store, &p, &same).unwrap();
        for (a, b) in r.vector.iter().zip([0.5, -1.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_zero_scorer_is_mean() {
        let (mut store, p) = pool(2);
        store.set(p.v, Array2::zeros((5, 1))).unwrap();
        let x = array![[1.0, 2.0], [3.0, -4.0], [5.0, 0.5], [-1.0, 1.0]];
        let r = attention_pool(&store, &p, &x).unwrap();
        for w in &r.weights {
            assert!((w - 0.25).abs() < 1e-15);
        }
        assert!((r.vector[0] - 2.0).abs() < 1e-12);
        assert!((r.vector[1] + 0.125).abs() < 1e-12);
    }

    #[test]
    fn pool_rejects_empty() {
        let (store, p) = pool(2);
        assert!(attention_pool(&store, &p, &Array2::zeros((0, 2))).is_err());
    }
}
