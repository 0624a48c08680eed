//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably, binds parameters lazily on
//! first use and records every operation on a tape. [`Graph::backward`]
//! walks the tape in reverse. Batch-norm running statistics computed in
//! training mode are queued on the graph and applied to the store by the
//! caller, so a forward pass never mutates the model.

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

pub type Matrix = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    SubRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Diag(Var),
    Sum(Var),
    MeanRows(Var),
    LogSumExp(Var),
    NormalizeRows(Var, Vec<f64>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    LstmCell {
        gates: Var,
        c_prev: Option<Var>,
        // activated gates i, f, g, o and tanh(c)
        act: Matrix,
        tanh_c: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    mode: Mode,
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
    buffer_updates: Vec<(ParamId, Matrix)>,
}

/// Gradients of one scalar with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn softmax_row_inplace(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            store,
            mode,
            nodes: Vec::with_capacity(1024),
            bound: vec![None; store.len()],
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param);
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameter variables bound so far, in binding order.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }

    pub(crate) fn queue_buffer_update(&mut self, id: ParamId, value: Matrix) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Matrix)> {
        std::mem::take(&mut self.buffer_updates)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Broadcast-add a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn sub_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "sub_row expects a row");
        let v = self.value(a) - self.value(row);
        self.push(v, Op::SubRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a row");
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    // ---- elementwise ----

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Log(a))
    }

    // ---- row-wise normalizers ----

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            softmax_row_inplace(row.as_slice_mut().expect("standard layout"));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Divide each row by its L2 norm. Callers must rule out zero rows.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let norms: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut v = x.clone();
        for (mut row, n) in v.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|x| x / n);
        }
        self.push(v, Op::NormalizeRows(a, norms))
    }

    // ---- structural ----

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols rows");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows cols");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), rows);
        self.push(v, Op::SelectRows(a, rows.to_vec()))
    }

    /// Pick column `cols[r]` of row `r`; result is `n x 1`.
    pub fn gather(&mut self, a: Var, cols: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), cols.len(), "gather length");
        let v = Array2::from_shape_fn((cols.len(), 1), |(r, _)| x[[r, cols[r]]]);
        self.push(v, Op::Gather(a, cols.to_vec()))
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), x.ncols(), "diag of non-square matrix");
        let v = Array2::from_shape_fn((x.nrows(), 1), |(r, _)| x[[r, r]]);
        self.push(v, Op::Diag(a))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means, `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    /// `log(sum(exp(a)))` over every entry, computed with max subtraction.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        self.push(Array2::from_elem((1, 1), lse), Op::LogSumExp(a))
    }

    // ---- fused layers ----

    /// Training-mode batch normalization over rows with biased batch
    /// variance. Returns the output and the batch mean and unbiased variance
    /// (for running-statistics updates).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Matrix, Matrix) {
        let xv = self.value(x);
        let n = xv.nrows() as f64;
        let mean = xv.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = xv - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let inv = ndarray::Array1::from(inv_std.clone());
        let xhat = &centered * &inv;
        let y = &xhat * &self.value(gamma).row(0) + &self.value(beta).row(0);
        let unbiased = if n > 1.0 { &var * (n / (n - 1.0)) } else { var.clone() };
        let mean = mean.insert_axis(Axis(0));
        let unbiased = unbiased.insert_axis(Axis(0));
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        (v, mean, unbiased)
    }

    /// One LSTM step from pre-activation gates `rows x 4H` (order i, f, g, o)
    /// and the previous cell state. Returns `[h | c]` as a `rows x 2H` node;
    /// slice it to get the two halves.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Option<Var>) -> Var {
        let gv = self.value(gates);
        let hd = gv.ncols() / 4;
        let rows = gv.nrows();
        let mut act = gv.clone();
        for mut row in act.rows_mut() {
            for (j, a) in row.iter_mut().enumerate() {
                *a = if (2 * hd..3 * hd).contains(&j) {
                    a.tanh()
                } else {
                    sigmoid(*a)
                };
            }
        }
        let mut out = Array2::zeros((rows, 2 * hd));
        let mut tanh_c = Array2::zeros((rows, hd));
        for r in 0..rows {
            for k in 0..hd {
                let prev = c_prev.map(|p| self.value(p)[[r, k]]).unwrap_or(0.0);
                let c = act[[r, hd + k]] * prev + act[[r, k]] * act[[r, 2 * hd + k]];
                let tc = c.tanh();
                tanh_c[[r, k]] = tc;
                out[[r, k]] = act[[r, 3 * hd + k]] * tc;
                out[[r, hd + k]] = c;
            }
        }
        self.push(
            out,
            Op::LstmCell {
                gates,
                c_prev,
                act,
                tanh_c,
            },
        )
    }

    // ---- backward ----

    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_op(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_op(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                acc(&mut grads[a.0], g.dot(&val(*b).t()));
                acc(&mut grads[b.0], val(*a).t().dot(g));
            }
            Op::MatMulNt(a, b) => {
                acc(&mut grads[a.0], g.dot(val(*b)));
                acc(&mut grads[b.0], g.t().dot(val(*a)));
            }
            Op::Transpose(a) => acc(&mut grads[a.0], g.t().to_owned()),
            Op::Add(a, b) => {
                acc(&mut grads[a.0], g.clone());
                acc(&mut grads[b.0], g.clone());
            }
            Op::AddRow(a, r) => {
                acc(&mut grads[a.0], g.clone());
                acc(&mut grads[r.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Sub(a, b) => {
                acc(&mut grads[a.0], g.clone());
                acc(&mut grads[b.0], -g);
            }
            Op::SubRow(a, r) => {
                acc(&mut grads[a.0], g.clone());
                acc(&mut grads[r.0], -g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Mul(a, b) => {
                acc(&mut grads[a.0], g * val(*b));
                acc(&mut grads[b.0], g * val(*a));
            }
            Op::MulRow(a, r) => {
                acc(&mut grads[a.0], g * val(*r));
                acc(
                    &mut grads[r.0],
                    (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
            }
            Op::Scale(a, k) => acc(&mut grads[a.0], g * *k),
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(&mut grads[a.0], g * &y.mapv(|s| s * (1.0 - s)));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(&mut grads[a.0], g * &y.mapv(|t| 1.0 - t * t));
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(&mut grads[a.0], d);
            }
            Op::Softplus(a) => acc(&mut grads[a.0], g * &val(*a).mapv(sigmoid)),
            Op::Exp(a) => acc(&mut grads[a.0], g * &node.value),
            Op::Log(a) => acc(&mut grads[a.0], g / val(*a)),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(&mut grads[a.0], y * &(g - &dot));
            }
            Op::LogSoftmaxRows(a) => {
                let sm = node.value.mapv(f64::exp);
                let gs = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(&mut grads[a.0], g - &(sm * &gs));
            }
            Op::NormalizeRows(a, norms) => {
                let y = &node.value;
                let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let mut d = g - &(y * &dot);
                for (mut row, n) in d.rows_mut().into_iter().zip(norms) {
                    row.mapv_inplace(|x| x / n);
                }
                acc(&mut grads[a.0], d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(val(*a).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(&mut grads[a.0], d);
            }
            Op::SliceRows(a, start) => {
                let mut d = Array2::zeros(val(*a).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(&mut grads[a.0], d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    acc(&mut grads[p.0], g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = val(*p).nrows();
                    acc(&mut grads[p.0], g.slice(s![off..off + h, ..]).to_owned());
                    off += h;
                }
            }
            Op::SelectRows(a, rows) => {
                let mut d = Array2::zeros(val(*a).dim());
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(k);
                }
                acc(&mut grads[a.0], d);
            }
            Op::Gather(a, cols) => {
                let mut d = Array2::zeros(val(*a).dim());
                for (r, &c) in cols.iter().enumerate() {
                    d[[r, c]] += g[[r, 0]];
                }
                acc(&mut grads[a.0], d);
            }
            Op::Diag(a) => {
                let mut d = Array2::zeros(val(*a).dim());
                for r in 0..g.nrows() {
                    d[[r, r]] = g[[r, 0]];
                }
                acc(&mut grads[a.0], d);
            }
            Op::Sum(a) => acc(&mut grads[a.0], Array2::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::MeanRows(a) => {
                let x = val(*a);
                let n = x.nrows() as f64;
                let mut d = Array2::zeros(x.dim());
                for mut row in d.rows_mut() {
                    row.assign(&(&g.row(0) / n));
                }
                acc(&mut grads[a.0], d);
            }
            Op::LogSumExp(a) => {
                let lse = node.value[[0, 0]];
                acc(&mut grads[a.0], val(*a).mapv(|x| (x - lse).exp()) * g[[0, 0]]);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = xhat.nrows() as f64;
                acc(&mut grads[beta.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(
                    &mut grads[gamma.0],
                    (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
                let dxhat = g * &val(*gamma).row(0);
                let sum_d = dxhat.sum_axis(Axis(0));
                let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                let mut dx = &dxhat * n - &sum_d - &(xhat * &sum_dx);
                for mut row in dx.rows_mut() {
                    Zip::from(&mut row)
                        .and(&ndarray::ArrayView1::from(inv_std.as_slice()))
                        .for_each(|d, s| *d *= s / n);
                }
                acc(&mut grads[x.0], dx);
            }
            Op::LstmCell {
                gates,
                c_prev,
                act,
                tanh_c,
            } => {
                let hd = tanh_c.ncols();
                let rows = tanh_c.nrows();
                let mut dgates = Array2::zeros((rows, 4 * hd));
                let mut dc_prev = Array2::zeros((rows, hd));
                for r in 0..rows {
                    for k in 0..hd {
                        let ig = act[[r, k]];
                        let fg = act[[r, hd + k]];
                        let gg = act[[r, 2 * hd + k]];
                        let og = act[[r, 3 * hd + k]];
                        let tc = tanh_c[[r, k]];
                        let dh = g[[r, k]];
                        let dc = dh * og * (1.0 - tc * tc) + g[[r, hd + k]];
                        let prev = c_prev.map(|p| val(p)[[r, k]]).unwrap_or(0.0);
                        dgates[[r, k]] = dc * gg * ig * (1.0 - ig);
                        dgates[[r, hd + k]] = dc * prev * fg * (1.0 - fg);
                        dgates[[r, 2 * hd + k]] = dc * ig * (1.0 - gg * gg);
                        dgates[[r, 3 * hd + k]] = dh * tc * og * (1.0 - og);
                        dc_prev[[r, k]] = dc * fg;
                    }
                }
                acc(&mut grads[gates.0], dgates);
                if let Some(p) = c_prev {
                    acc(&mut grads[p.0], dc_prev);
                }
            }
        }
    }
}

fn acc(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences of `f` at every entry of `x`.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut out = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            out.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn check_unary(x: Matrix, build: &dyn Fn(&mut Graph, Var) -> Var) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Train);
        let v = g.constant(x.clone());
        // weight outputs so that row-normalizing ops get a nontrivial gradient
        let y = build(&mut g, v);
        let w = g.constant(Array2::from_shape_fn(g.shape(y), |(r, c)| 0.3 + 0.7 * ((r * 7 + c * 3) % 5) as f64));
        let yw = g.mul(y, w);
        let loss = g.sum(yw);
        let grads = g.backward(loss);
        let analytic = grads.wrt(v).unwrap().clone();
        let wv = g.value(w).clone();
        let numeric = numeric_grad(&x, &|m| {
            let mut g = Graph::new(&store, Mode::Train);
            let v = g.constant(m.clone());
            let y = build(&mut g, v);
            let w = g.constant(wv.clone());
            let yw = g.mul(y, w);
            let s = g.sum(yw);
            g.scalar(s)
        });
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    fn sample() -> Matrix {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]
    }

    #[test]
    fn elementwise_grads() {
        check_unary(sample(), &|g, v| g.sigmoid(v));
        check_unary(sample(), &|g, v| g.tanh(v));
        check_unary(sample(), &|g, v| g.relu(v));
        check_unary(sample(), &|g, v| g.softplus(v));
        check_unary(sample(), &|g, v| g.exp(v));
        check_unary(sample().mapv(|x| x.abs() + 0.1), &|g, v| g.log(v));
        check_unary(sample(), &|g, v| g.scale(v, -2.5));
    }

    #[test]
    fn rowwise_grads() {
        check_unary(sample(), &|g, v| g.softmax_rows(v));
        check_unary(sample(), &|g, v| g.log_softmax_rows(v));
        check_unary(sample(), &|g, v| g.normalize_rows(v));
        check_unary(sample(), &|g, v| g.mean_rows(v));
        check_unary(sample(), &|g, v| g.logsumexp(v));
    }

    #[test]
    fn structural_grads() {
        check_unary(sample(), &|g, v| g.transpose(v));
        check_unary(sample(), &|g, v| g.slice_cols(v, 1, 2));
        check_unary(sample(), &|g, v| g.slice_rows(v, 1, 1));
        check_unary(sample(), &|g, v| g.select_rows(v, &[1, 0, 1]));
        check_unary(sample(), &|g, v| g.gather(v, &[2, 0]));
        check_unary(sample(), &|g, v| {
            let t = g.transpose(v);
            let sq = g.matmul(v, t);
            g.diag(sq)
        });
        check_unary(sample(), &|g, v| {
            let a = g.slice_cols(v, 0, 1);
            g.concat_cols(&[v, a, v])
        });
        check_unary(sample(), &|g, v| g.concat_rows(&[v, v]));
    }

    #[test]
    fn binary_grads() {
        let other = array![[0.5, 0.2, -0.3], [-0.4, 0.9, 0.1]];
        let row = array![[0.2, -0.7, 1.3]];
        let o = other.clone();
        check_unary(sample(), &move |g, v| {
            let b = g.constant(o.clone());
            let p = g.mul(v, b);
            let q = g.add(p, v);
            g.sub(q, b)
        });
        let r = row.clone();
        check_unary(sample(), &move |g, v| {
            let b = g.constant(r.clone());
            let p = g.add_row(v, b);
            let q = g.mul_row(p, b);
            g.sub_row(q, b)
        });
        // gradient w.r.t. the broadcast row
        let s2 = sample();
        check_unary(row.clone(), &move |g, r| {
            let x = g.constant(s2.clone());
            let p = g.mul_row(x, r);
            let q = g.add_row(p, r);
            g.sub_row(q, r)
        });
        let o2 = other.clone();
        check_unary(sample(), &move |g, v| {
            let b = g.constant(o2.clone());
            let bt = g.transpose(b);
            let m = g.matmul(v, bt);
            let n = g.matmul_nt(v, b);
            g.add(m, n)
        });
        let s3 = sample();
        check_unary(other, &move |g, b| {
            let a = g.constant(s3.clone());
            g.matmul_nt(a, b)
        });
    }

    #[test]
    fn batch_norm_grads() {
        let x = array![[0.3, -1.2], [1.1, 0.4], [-0.2, 0.9], [0.5, 0.5]];
        check_unary(x.clone(), &|g, v| {
            let gamma = g.constant(array![[1.5, -0.5]]);
            let beta = g.constant(array![[0.1, 0.2]]);
            g.batch_norm_train(v, gamma, beta, 1e-5).0
        });
        let xc = x.clone();
        check_unary(array![[1.5, -0.5]], &move |g, gm| {
            let xv = g.constant(xc.clone());
            let beta = g.constant(array![[0.1, 0.2]]);
            g.batch_norm_train(xv, gm, beta, 1e-5).0
        });
    }

    #[test]
    fn lstm_cell_grads() {
        let gates = array![[0.3, -1.2, 0.7, 0.2, 1.1, 0.4, -0.5, 0.8]];
        // single step, then a second step consuming both h and c
        check_unary(gates, &|g, v| {
            let hc = g.lstm_cell(v, None);
            let h = g.slice_cols(hc, 0, 2);
            let c = g.slice_cols(hc, 2, 2);
            let w = g.constant(array![
                [0.5, -0.3, 0.2, 0.9, 0.1, 0.7, -0.6, 0.4],
                [0.2, 0.2, -0.8, 0.3, 0.5, -0.1, 0.6, 0.3]
            ]);
            let hw = g.matmul(h, w);
            let next = g.add(hw, v);
            let hc2 = g.lstm_cell(next, Some(c));
            g.concat_cols(&[hc2, c])
        });
    }

    #[test]
    fn batch_norm_two_sample_value() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.constant(array![[-1.0], [1.0]]);
        let gamma = g.constant(array![[1.0]]);
        let beta = g.constant(array![[0.0]]);
        let (y, mean, var) = g.batch_norm_train(x, gamma, beta, 1e-5);
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y)[[0, 0]] + expect).abs() < 1e-15);
        assert!((g.value(y)[[1, 0]] - expect).abs() < 1e-15);
        assert_eq!(mean[[0, 0]], 0.0);
        assert_eq!(var[[0, 0]], 2.0);
    }
}
