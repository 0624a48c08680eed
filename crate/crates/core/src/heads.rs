//! MLP blocks, classification and matching heads, contrastive projections
//! and the loss functions built on them.

use ndarray::Array2;

pub use crate::autograd::softplus;
use crate::autograd::{Graph, Matrix, Mode, Var};
use crate::encoders::Linear;
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamId, ParamKind, ParamStore};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// `softplus^{-1}(1)`: raw value that gives an effective weight of exactly 1.
pub const UNIT_WEIGHT_RAW: f64 = 0.541_324_854_612_918_1;

/// Batch normalization over the batch axis with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Array2::ones((1, width)), ParamKind::Trainable),
            beta: store.add(format!("{name}.beta"), Array2::zeros((1, width)), ParamKind::Trainable),
            running_mean: store.add(format!("{name}.running_mean"), Array2::zeros((1, width)), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Array2::ones((1, width)), ParamKind::Buffer),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Batch statistics in train mode with at least two rows; running
    /// statistics otherwise. Train mode queues the running-stat update on
    /// the graph.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        if g.mode() == Mode::Train && g.shape(x).0 >= 2 {
            let (y, mean, var) = g.batch_norm_train(x, gamma, beta, self.eps);
            let store = g.store();
            let m = self.momentum;
            let rm = store.get(self.running_mean) * (1.0 - m) + &mean * m;
            let rv = store.get(self.running_var) * (1.0 - m) + &var * m;
            g.queue_buffer_update(self.running_mean, rm);
            g.queue_buffer_update(self.running_var, rv);
            return y;
        }
        let store = g.store();
        let mean = g.constant(store.get(self.running_mean).clone());
        let inv = g.constant(store.get(self.running_var).mapv(|v| 1.0 / (v + self.eps).sqrt()));
        let c = g.sub_row(x, mean);
        let xhat = g.mul_row(c, inv);
        let y = g.mul_row(xhat, gamma);
        g.add_row(y, beta)
    }
}

/// Three affine layers; the first two are followed by batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct MlpBlock {
    pub layers: [Linear; 3],
    pub norms: [BatchNorm; 2],
}

impl MlpBlock {
    /// Hidden widths `in/2` and `in/4` (at least 1).
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let widths = [in_dim, (in_dim / 2).max(1), (in_dim / 4).max(1), out_dim];
        Self::with_widths(store, init, name, widths)
    }

    pub fn with_widths(store: &mut ParamStore, init: &mut Initializer, name: &str, w: [usize; 4]) -> Self {
        let layers = [
            Linear::new(store, init, &format!("{name}.fc1"), w[0], w[1], true),
            Linear::new(store, init, &format!("{name}.fc2"), w[1], w[2], true),
            Linear::new(store, init, &format!("{name}.fc3"), w[2], w[3], true),
        ];
        let norms = [
            BatchNorm::new(store, &format!("{name}.bn1"), w[1]),
            BatchNorm::new(store, &format!("{name}.bn2"), w[2]),
        ];
        Self { layers, norms }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[2].out_dim
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (rows, cols) = g.shape(x);
        if rows == 0 || cols != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "MLP expects batch x {}, got {rows}x{cols}",
                self.in_dim()
            )));
        }
        let mut h = x;
        for (layer, bn) in self.layers[..2].iter().zip(&self.norms) {
            let a = layer.forward(g, h);
            let n = bn.forward(g, a);
            h = g.relu(n);
        }
        Ok(self.layers[2].forward(g, h))
    }
}

/// Learnable positive loss weights `softplus(theta)`, stored as a `1 x k` row.
#[derive(Clone, Debug)]
pub struct LossWeights {
    pub theta: ParamId,
    pub len: usize,
}

impl LossWeights {
    /// Initialized so every effective weight is 1.
    pub fn new(store: &mut ParamStore, name: &str, len: usize) -> Self {
        let theta = store.add(
            format!("{name}.theta"),
            Array2::from_elem((1, len), UNIT_WEIGHT_RAW),
            ParamKind::Trainable,
        );
        Self { theta, len }
    }

    pub fn effective(&self, store: &ParamStore) -> Vec<f64> {
        store.get(self.theta).iter().map(|&t| softplus(t)).collect()
    }

    /// `sum_i softplus(theta_i) * losses[i]`.
    pub fn total(&self, g: &mut Graph, losses: &[Var]) -> Var {
        assert_eq!(losses.len(), self.len, "one loss per weight");
        let theta = g.param(self.theta);
        let w = g.softplus(theta);
        let l = g.concat_cols(losses);
        let wl = g.mul(w, l);
        g.sum(wl)
    }
}

/// Mean cross-entropy of `batch x classes` logits against class indices.
pub fn cross_entropy(g: &mut Graph, logits: Var, gold: &[usize]) -> Var {
    let lp = g.log_softmax_rows(logits);
    let picked = g.gather(lp, gold);
    let m = g.mean(picked);
    g.scale(m, -1.0)
}

/// Apply a projection stack and L2-normalize each row.
pub fn project(g: &mut Graph, block: &MlpBlock, z: Var) -> Result<Var> {
    let p = block.forward(g, z)?;
    if let Some(row) = g
        .value(p)
        .rows()
        .into_iter()
        .position(|r| r.iter().all(|&v| v == 0.0))
    {
        return Err(Error::ZeroVector { row });
    }
    Ok(g.normalize_rows(p))
}

/// Batch-pooled NCE over unit rows:
/// `-log( sum_i e^{s_ii} / sum_{i,j} e^{s_ij} )` with `s = U U'^T / tau`.
pub fn nce(g: &mut Graph, u: Var, u_prime: Var, tau: f64) -> Var {
    let s = g.matmul_nt(u, u_prime);
    let s = g.scale(s, 1.0 / tau);
    let all = g.logsumexp(s);
    let d = g.diag(s);
    let pos = g.logsumexp(d);
    g.sub(all, pos)
}

// ---- standalone evaluation on plain values ----

/// Run an MLP block. Train mode also returns the running-stat updates it
/// would apply.
pub fn mlp_block(
    store: &ParamStore,
    block: &MlpBlock,
    x: &Matrix,
    mode: Mode,
) -> Result<(Matrix, Vec<(ParamId, Matrix)>)> {
    let mut g = Graph::new(store, mode);
    let xv = g.constant(x.clone());
    let y = block.forward(&mut g, xv)?;
    let out = g.value(y).clone();
    Ok((out, g.take_buffer_updates()))
}

pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let mut row = logits;
    crate::autograd::softmax_row_inplace(&mut row);
    row
}

/// Class probabilities of a head over concatenated representations.
pub fn head_probs(store: &ParamStore, head: &MlpBlock, reps: &[&[f64]]) -> Result<[f64; 2]> {
    let x: Vec<f64> = reps.iter().flat_map(|r| r.iter().cloned()).collect();
    let n = x.len();
    let x = Array2::from_shape_vec((1, n), x).expect("row");
    let (y, _) = mlp_block(store, head, &x, Mode::Eval)?;
    if y.ncols() != 2 {
        return Err(Error::ShapeMismatch(format!("head has {} outputs, expected 2", y.ncols())));
    }
    Ok(softmax2([y[[0, 0]], y[[0, 1]]]))
}

pub fn binary_forward(
    store: &ParamStore,
    r_text: &[f64],
    r_audio: &[f64],
    r_video: &[f64],
    head: &MlpBlock,
) -> Result<[f64; 2]> {
    head_probs(store, head, &[r_text, r_audio, r_video])
}

pub fn multitask_forward(
    store: &ParamStore,
    r_text: &[f64],
    r_audio: &[f64],
    r_video: &[f64],
    heads: &[MlpBlock; 4],
) -> Result<[[f64; 2]; 4]> {
    let mut out = [[0.0; 2]; 4];
    for (o, h) in out.iter_mut().zip(heads) {
        *o = head_probs(store, h, &[r_text, r_audio, r_video])?;
    }
    Ok(out)
}

pub fn matching_forward(store: &ParamStore, r_a: &[f64], r_b: &[f64], head: &MlpBlock) -> Result<[f64; 2]> {
    head_probs(store, head, &[r_a, r_b])
}

/// `-ln probs[gold]`.
pub fn task_loss(probs: [f64; 2], gold: usize) -> f64 {
    -probs[gold].ln()
}

pub fn weighted_total(losses: &[f64], theta: &[f64]) -> f64 {
    losses.iter().zip(theta).map(|(l, t)| softplus(*t) * l).sum()
}

pub fn multitask_total(losses: [f64; 4], theta: [f64; 4]) -> f64 {
    weighted_total(&losses, &theta)
}

pub fn matching_total(losses: [f64; 3], theta: [f64; 3]) -> f64 {
    weighted_total(&losses, &theta)
}

/// Project a batch in eval mode and return unit rows.
pub fn project_pair(store: &ParamStore, block: &MlpBlock, z: &Matrix) -> Result<Matrix> {
    let mut g = Graph::new(store, Mode::Eval);
    let zv = g.constant(z.clone());
    let u = project(&mut g, block, zv)?;
    Ok(g.value(u).clone())
}

pub fn nce_loss(u: &Matrix, u_prime: &Matrix, tau: f64) -> Result<f64> {
    if u.dim() != u_prime.dim() || u.nrows() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "NCE needs two non-empty batches of equal shape, got {:?} and {:?}",
            u.dim(),
            u_prime.dim()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let a = g.constant(u.clone());
    let b = g.constant(u_prime.clone());
    let l = nce(&mut g, a, b, tau);
    Ok(g.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn unit_weight_constant() {
        assert!((softplus(UNIT_WEIGHT_RAW) - 1.0).abs() < 1e-15);
        // stays exactly 1 after the f32 rounding the store applies
        assert!((softplus(UNIT_WEIGHT_RAW as f32 as f64) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn bn_two_sample_batch() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.constant(array![[-1.0], [1.0]]);
        let y = bn.forward(&mut g, x);
        let e = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((g.value(y)[[0, 0]] + e).abs() < 1e-12);
        assert!((g.value(y)[[1, 0]] - e).abs() < 1e-12);
        let ups = g.take_buffer_updates();
        assert_eq!(ups.len(), 2);
        // running var: 0.9 * 1 + 0.1 * 2 (unbiased)
        assert!((ups[1].1[[0, 0]] - 1.1).abs() < 1e-12);
        assert_eq!(ups[0].1[[0, 0]], 0.0);
    }

    #[test]
    fn bn_single_row_train_uses_running_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.constant(array![[3.0, -2.0]]);
        let y = bn.forward(&mut g, x);
        let e = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((g.value(y)[[0, 0]] - 3.0 * e).abs() < 1e-12);
        assert!(g.take_buffer_updates().is_empty());
    }

    fn block(in_dim: usize, out: usize) -> (ParamStore, MlpBlock) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(4);
        let b = MlpBlock::new(&mut store, &mut init, "mlp", in_dim, out);
        (store, b)
    }

    #[test]
    fn zero_everything_gives_zero() {
        let (mut store, b) = block(6, 2);
        for l in &b.layers {
            store.set(l.weight, Array2::zeros(store.get(l.weight).dim())).unwrap();
            store.set(l.bias.unwrap(), Array2::zeros(store.get(l.bias.unwrap()).dim())).unwrap();
        }
        let (y, _) = mlp_block(&store, &b, &Array2::zeros((3, 6)), Mode::Eval).unwrap();
        assert_eq!(y, Array2::<f64>::zeros((3, 2)));
    }

    #[test]
    fn shape_contract() {
        let (store, b) = block(12, 2);
        let (y, ups) = mlp_block(&store, &b, &Array2::ones((5, 12)), Mode::Train).unwrap();
        assert_eq!(y.dim(), (5, 2));
        assert_eq!(ups.len(), 4);
        assert!(mlp_block(&store, &b, &Array2::ones((5, 11)), Mode::Eval).is_err());
    }

    #[test]
    fn softmax_and_task_loss() {
        assert_eq!(softmax2([0.7, 0.7]), [0.5, 0.5]);
        let p = softmax2([0.0, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        assert_eq!(task_loss([1.0, 0.0], 0), 0.0);
        assert!((task_loss([0.5, 0.5], 1) - 0.693_147).abs() < 1e-6);
        assert!((task_loss([0.25, 0.75], 1) - 0.287_682).abs() < 1e-6);
    }

    #[test]
    fn weighted_totals() {
        assert_eq!(multitask_total([0.0; 4], [1.0, -3.0, 2.0, 0.5]), 0.0);
        let u = UNIT_WEIGHT_RAW;
        assert!((multitask_total([0.5, 0.25, 0.25, 1.0], [u; 4]) - 2.0).abs() < 1e-12);
        assert!((multitask_total([1.0; 4], [0.0; 4]) - 2.772_588_7).abs() < 1e-7);
        assert!((matching_total([1.0; 3], [0.0; 3]) - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nce_known_values() {
        let u = array![[1.0, 0.0]];
        assert!(nce_loss(&u, &u, 0.07).unwrap().abs() < 1e-12);
        let u = array![[1.0, 0.0], [0.0, 1.0]];
        let l = nce_loss(&u, &u, 1.0).unwrap();
        assert!((l - 0.313_262).abs() < 1e-6);
        assert!((l - softplus(-1.0)).abs() < 1e-12);
        assert!(nce_loss(&u, &array![[1.0, 0.0]], 1.0).is_err());
    }

    #[test]
    fn projection_rows_unit_and_zero_row_rejected() {
        let (store, b) = block(8, 4);
        let mut s = crate::rng::Stream::new(2, "z");
        let z = Array2::from_shape_fn((5, 8), |_| s.normal());
        let u = project_pair(&store, &b, &z).unwrap();
        for r in u.rows() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-9);
        }
        let (mut store, b) = block(4, 2);
        let fc3 = &b.layers[2];
        store.set(fc3.weight, Array2::zeros((1, 2))).unwrap();
        store.set(fc3.bias.unwrap(), Array2::zeros((1, 2))).unwrap();
        assert!(matches!(
            project_pair(&store, &b, &Array2::ones((2, 4))),
            Err(Error::ZeroVector { row: 0 })
        ));
    }

    #[test]
    fn identity_stack_returns_unit_vector() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(0);
        let b = MlpBlock::with_widths(&mut store, &mut init, "id", [2, 2, 2, 2]);
        for l in &b.layers {
            store.set(l.weight, Array2::eye(2)).unwrap();
            store.set(l.bias.unwrap(), Array2::zeros((1, 2))).unwrap();
        }
        let u = project_pair(&store, &b, &array![[0.6, 0.8]]).unwrap();
        assert!((u[[0, 0]] - 0.6).abs() < 1e-12 && (u[[0, 1]] - 0.8).abs() < 1e-12);
    }
}
