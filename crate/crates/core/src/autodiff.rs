//! Reverse-mode automatic differentiation over a recorded computation graph.
//!
//! A [`Graph`] is a tape: every primitive call evaluates eagerly, appends a
//! node holding its output, and records the operation so that
//! [`Graph::backward`] can replay it in reverse. Nodes only ever refer to
//! earlier nodes, so the tape order is a topological order.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::AutodiffError;
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Scalar, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Padding of a 1-D convolution along time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    /// Left padding of `width - 1`: output `t` sees inputs `≤ t`.
    Causal,
    /// Symmetric padding: output `t` sees `t - ⌊w/2⌋ ..= t + ⌊w/2⌋`.
    Same,
}

impl PadMode {
    fn left(self, width: usize) -> usize {
        match self {
            PadMode::Causal => width - 1,
            PadMode::Same => (width - 1) / 2,
        }
    }
}

/// Recorded primitive.
#[derive(Debug, Clone)]
pub enum Op<T> {
    Input,
    Param(String),
    Add(Var, Var),
    /// Matrix plus a row vector broadcast over rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Conv1d {
        input: Var,
        filters: Var,
        pad: PadMode,
    },
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        input: Var,
        start: usize,
        end: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        input: Var,
        start: usize,
        end: usize,
    },
    Sum(Var),
    Mean(Var),
    /// Gathers individual `(row, col)` cells of a matrix into a vector.
    Pick {
        input: Var,
        cells: Vec<(usize, usize)>,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Computation record: a topologically ordered tape of evaluated nodes.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op<T> {
        &self.nodes[v.0].op
    }

    /// Registers a constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Input,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named parameter leaf. Binding the same name twice returns
    /// the first binding, so a caller can pre-bind a parameter with a
    /// substitute value before running a forward pass.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(name.to_string()),
            value: value.clone(),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    fn push(&mut self, op: Op<T>) -> Result<Var> {
        let value = evaluate(&op, |v| &self.nodes[v.0].value)?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale(a, T::of(factor)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    /// `input [time × in_ch]` convolved with `filters [width × in_ch × out_ch]`.
    pub fn conv1d(&mut self, input: Var, filters: Var, pad: PadMode) -> Result<Var> {
        self.push(Op::Conv1d {
            input,
            filters,
            pad,
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSoftmax(a))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.push(Op::Gather {
            table,
            ids: ids.to_vec(),
        })
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1 / (1 - p)`. `p == 0` is the identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::operand(
                "dropout",
                format!("probability {p} not in [0, 1)"),
            ));
        }
        if p == 0.0 {
            return Ok(input);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask = (0..self.value(input).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        self.push(Op::Dropout { input, mask })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceCols { input, start, end })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceRows { input, start, end })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    pub fn pick(&mut self, input: Var, cells: &[(usize, usize)]) -> Result<Var> {
        self.push(Op::Pick {
            input,
            cells: cells.to_vec(),
        })
    }

    /// Re-evaluates every recorded node from the leaf values and returns the
    /// recomputed outputs in tape order.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.op {
                Op::Input | Op::Param(_) => node.value.clone(),
                op => evaluate(op, |v| &values[v.0])?,
            };
            values.push(value);
        }
        Ok(values)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (input, contribution) in self.vjp(&node.op, &node.value, &g)? {
                accumulate(&mut grads[input.0], contribution)?;
            }
            grads[idx] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (name, &v) in &self.params {
            let g = match grads.get(v.0).cloned().flatten() {
                Some(g) => g,
                None => Tensor::zeros(self.value(v).shape()),
            };
            params.insert(name.clone(), g);
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn vjp(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match op {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, row) => {
                let cols = g.cols();
                let mut gr = vec![T::zero(); cols];
                for chunk in g.data().chunks(cols) {
                    for (acc, &x) in gr.iter_mut().zip(chunk) {
                        *acc = *acc + x;
                    }
                }
                vec![
                    (*a, g.clone()),
                    (*row, Tensor::new(val(*row).shape().to_vec(), gr)?),
                ]
            }
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)?),
                (*b, g.zip_map(val(*a), |x, y| x * y)?),
            ],
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * *c))],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut ga = vec![T::zero(); m * k];
                matmul_bt_acc(g.data(), bv.data(), &mut ga, m, n, k);
                let mut gb = vec![T::zero(); k * n];
                matmul_at_acc(av.data(), g.data(), &mut gb, m, k, n);
                vec![
                    (*a, Tensor::new(vec![m, k], ga)?),
                    (*b, Tensor::new(vec![k, n], gb)?),
                ]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Conv1d {
                input,
                filters,
                pad,
            } => {
                let (x, f) = (val(*input), val(*filters));
                let (time, cin) = (x.shape()[0], x.shape()[1]);
                let (width, cout) = (f.shape()[0], f.shape()[2]);
                let left = pad.left(width);
                let mut gx = vec![T::zero(); time * cin];
                let mut gf = vec![T::zero(); width * cin * cout];
                for k in 0..width {
                    let Some((t0, t1, s0)) = conv_span(time, k, left) else { continue };
                    let rows = t1 - t0;
                    let fk = &f.data()[k * cin * cout..(k + 1) * cin * cout];
                    let g_rows = &g.data()[t0 * cout..t1 * cout];
                    matmul_bt_acc(g_rows, fk, &mut gx[s0 * cin..(s0 + rows) * cin], rows, cout, cin);
                    let x_rows = &x.data()[s0 * cin..(s0 + rows) * cin];
                    matmul_at_acc(
                        x_rows,
                        g_rows,
                        &mut gf[k * cin * cout..(k + 1) * cin * cout],
                        rows,
                        cin,
                        cout,
                    );
                }
                vec![
                    (*input, Tensor::new(x.shape().to_vec(), gx)?),
                    (*filters, Tensor::new(f.shape().to_vec(), gf)?),
                ]
            }
            Op::Sigmoid(a) => vec![(*a, g.zip_map(out, |gi, s| gi * s * (T::one() - s))?)],
            Op::Tanh(a) => vec![(*a, g.zip_map(out, |gi, y| gi * (T::one() - y * y))?)],
            Op::Softmax(a) => {
                let cols = out.cols();
                let mut gx = vec![T::zero(); out.len()];
                for ((gr, yr), dst) in g
                    .data()
                    .chunks(cols)
                    .zip(out.data().chunks(cols))
                    .zip(gx.chunks_mut(cols))
                {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - dot);
                    }
                }
                vec![(*a, Tensor::new(out.shape().to_vec(), gx)?)]
            }
            Op::LogSoftmax(a) => {
                let cols = out.cols();
                let mut gx = vec![T::zero(); out.len()];
                for ((gr, yr), dst) in g
                    .data()
                    .chunks(cols)
                    .zip(out.data().chunks(cols))
                    .zip(gx.chunks_mut(cols))
                {
                    let total: T = gr.iter().copied().sum();
                    for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = gi - yi.exp() * total;
                    }
                }
                vec![(*a, Tensor::new(out.shape().to_vec(), gx)?)]
            }
            Op::Gather { table, ids } => {
                let t = val(*table);
                let cols = t.cols();
                let mut gt = Tensor::zeros(t.shape());
                let data = gt.data_mut();
                for (i, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        data[id * cols + c] = data[id * cols + c] + g.data()[i * cols + c];
                    }
                }
                vec![(*table, gt)]
            }
            Op::Dropout { input, mask } => {
                let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                vec![(*input, Tensor::new(g.shape().to_vec(), data)?)]
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let pc = val(p).cols();
                    let data = g
                        .data()
                        .chunks(total)
                        .flat_map(|row| row[offset..offset + pc].iter().copied())
                        .collect();
                    res.push((p, Tensor::new(val(p).shape().to_vec(), data)?));
                    offset += pc;
                }
                res
            }
            Op::SliceCols { input, start, end } => {
                let x = val(*input);
                let cols = x.cols();
                let width = end - start;
                let mut gx = Tensor::zeros(x.shape());
                for (r, grow) in g.data().chunks(width).enumerate() {
                    gx.data_mut()[r * cols + start..r * cols + end].copy_from_slice(grow);
                }
                vec![(*input, gx)]
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let rows = val(p).rows();
                    let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    res.push((p, Tensor::new(val(p).shape().to_vec(), data)?));
                    offset += rows;
                }
                res
            }
            Op::SliceRows { input, start, end } => {
                let x = val(*input);
                let cols = x.cols();
                let mut gx = Tensor::zeros(x.shape());
                gx.data_mut()[start * cols..end * cols].copy_from_slice(g.data());
                vec![(*input, gx)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = T::of(val(*a).len() as f64);
                vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
            }
            Op::Pick { input, cells } => {
                let x = val(*input);
                let cols = x.cols();
                let mut gx = Tensor::zeros(x.shape());
                for (i, &(r, c)) in cells.iter().enumerate() {
                    let slot = &mut gx.data_mut()[r * cols + c];
                    *slot = *slot + g.data()[i];
                }
                vec![(*input, gx)]
            }
        })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.axpy(T::one(), &g)?,
        None => *slot = Some(g),
    }
    Ok(())
}

/// Output rows `t0..t1` of filter tap `k` read input rows starting at `s0`.
fn conv_span(time: usize, k: usize, left: usize) -> Option<(usize, usize, usize)> {
    let shift = k as isize - left as isize;
    let t0 = (-shift).max(0) as usize;
    let t1 = (time as isize - shift).min(time as isize);
    if t1 <= t0 as isize {
        return None;
    }
    Some((t0, t1 as usize, (t0 as isize + shift) as usize))
}

fn expect_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.rank() != 2 {
        return Err(AutodiffError::operand(
            op,
            format!("expected a matrix, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn evaluate<'a, T: Scalar>(op: &Op<T>, val: impl Fn(Var) -> &'a Tensor<T>) -> Result<Tensor<T>> {
    Ok(match op {
        Op::Input | Op::Param(_) => unreachable!("leaves are not evaluated"),
        Op::Add(a, b) => val(*a).zip_map(val(*b), |x, y| x + y)?,
        Op::AddRow(a, row) => {
            let (a, row) = (val(*a), val(*row));
            if row.len() != a.cols() {
                return Err(AutodiffError::operand(
                    "add_row",
                    format!("row of {} for {} columns", row.len(), a.cols()),
                ));
            }
            let mut out = a.clone();
            for chunk in out.data_mut().chunks_mut(row.len()) {
                for (o, &r) in chunk.iter_mut().zip(row.data()) {
                    *o = *o + r;
                }
            }
            out
        }
        Op::Mul(a, b) => val(*a).zip_map(val(*b), |x, y| x * y)?,
        Op::Scale(a, c) => val(*a).map(|x| x * *c),
        Op::MatMul(a, b) => val(*a).matmul(val(*b))?,
        Op::Transpose(a) => {
            expect_matrix("transpose", val(*a))?;
            val(*a).transpose()
        }
        Op::Conv1d {
            input,
            filters,
            pad,
        } => {
            let (x, f) = (val(*input), val(*filters));
            expect_matrix("conv1d", x)?;
            if f.rank() != 3 {
                return Err(AutodiffError::operand(
                    "conv1d",
                    format!("filters must be width × in × out, got {:?}", f.shape()),
                ));
            }
            let (time, cin) = (x.shape()[0], x.shape()[1]);
            let (width, fin, cout) = (f.shape()[0], f.shape()[1], f.shape()[2]);
            if fin != cin {
                return Err(AutodiffError::operand(
                    "conv1d",
                    format!("input has {cin} channels, filters expect {fin}"),
                ));
            }
            let left = pad.left(width);
            let mut out = vec![T::zero(); time * cout];
            for k in 0..width {
                let Some((t0, t1, s0)) = conv_span(time, k, left) else { continue };
                let rows = t1 - t0;
                matmul_acc(
                    &x.data()[s0 * cin..(s0 + rows) * cin],
                    &f.data()[k * cin * cout..(k + 1) * cin * cout],
                    &mut out[t0 * cout..t1 * cout],
                    rows,
                    cin,
                    cout,
                );
            }
            Tensor::new(vec![time, cout], out)?
        }
        Op::Sigmoid(a) => val(*a).map(sigmoid),
        Op::Tanh(a) => val(*a).map(|x| x.tanh()),
        Op::Softmax(a) => {
            let x = val(*a);
            let cols = x.cols();
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(cols) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total = total + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / total;
                }
            }
            out
        }
        Op::LogSoftmax(a) => {
            let x = val(*a);
            let cols = x.cols();
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(cols) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                for v in row.iter_mut() {
                    *v = *v - lse;
                }
            }
            out
        }
        Op::Gather { table, ids } => {
            let t = val(*table);
            expect_matrix("gather", t)?;
            if ids.is_empty() {
                return Err(AutodiffError::operand("gather", "no ids"));
            }
            let cols = t.cols();
            let mut data = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                if id >= t.rows() {
                    return Err(AutodiffError::operand(
                        "gather",
                        format!("id {id} out of range for {} rows", t.rows()),
                    ));
                }
                data.extend_from_slice(t.row(id));
            }
            Tensor::new(vec![ids.len(), cols], data)?
        }
        Op::Dropout { input, mask } => {
            let x = val(*input);
            let data = x.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
            Tensor::new(x.shape().to_vec(), data)?
        }
        Op::ConcatCols(parts) => {
            let first = parts
                .first()
                .ok_or_else(|| AutodiffError::operand("concat_cols", "no inputs"))?;
            let rows = val(*first).rows();
            for &p in parts {
                expect_matrix("concat_cols", val(p))?;
                if val(p).rows() != rows {
                    return Err(AutodiffError::operand("concat_cols", "row counts differ"));
                }
            }
            let total: usize = parts.iter().map(|&p| val(p).cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(val(p).row(r));
                }
            }
            Tensor::new(vec![rows, total], data)?
        }
        Op::SliceCols { input, start, end } => {
            let x = val(*input);
            expect_matrix("slice_cols", x)?;
            if start >= end || *end > x.cols() {
                return Err(AutodiffError::operand(
                    "slice_cols",
                    format!("bad range {start}..{end} for {} columns", x.cols()),
                ));
            }
            let data = x
                .data()
                .chunks(x.cols())
                .flat_map(|row| row[*start..*end].iter().copied())
                .collect();
            Tensor::new(vec![x.rows(), end - start], data)?
        }
        Op::ConcatRows(parts) => {
            let first = parts
                .first()
                .ok_or_else(|| AutodiffError::operand("concat_rows", "no inputs"))?;
            let cols = val(*first).cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for &p in parts {
                expect_matrix("concat_rows", val(p))?;
                if val(p).cols() != cols {
                    return Err(AutodiffError::operand("concat_rows", "column counts differ"));
                }
                rows += val(p).rows();
                data.extend_from_slice(val(p).data());
            }
            Tensor::new(vec![rows, cols], data)?
        }
        Op::SliceRows { input, start, end } => {
            let x = val(*input);
            expect_matrix("slice_rows", x)?;
            if start >= end || *end > x.rows() {
                return Err(AutodiffError::operand(
                    "slice_rows",
                    format!("bad range {start}..{end} for {} rows", x.rows()),
                ));
            }
            let cols = x.cols();
            Tensor::new(
                vec![end - start, cols],
                x.data()[start * cols..end * cols].to_vec(),
            )?
        }
        Op::Sum(a) => Tensor::scalar(val(*a).sum()),
        Op::Mean(a) => {
            let x = val(*a);
            Tensor::scalar(x.sum() / T::of(x.len() as f64))
        }
        Op::Pick { input, cells } => {
            let x = val(*input);
            expect_matrix("pick", x)?;
            if cells.is_empty() {
                return Err(AutodiffError::operand("pick", "no cells"));
            }
            let mut data = Vec::with_capacity(cells.len());
            for &(r, c) in cells {
                if r >= x.rows() || c >= x.cols() {
                    return Err(AutodiffError::operand(
                        "pick",
                        format!("cell ({r}, {c}) outside {:?}", x.shape()),
                    ));
                }
                data.push(x.at(r, c));
            }
            Tensor::new(vec![cells.len()], data)?
        }
    })
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any node, `None` when the node does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter; parameters the loss does not reach get zeros.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}

/// Compares the analytic gradient of `f` at `theta` against central
/// differences with step `eps`, over every coordinate.
///
/// Returns the maximum relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn finite_difference_check<F>(f: F, theta: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..theta.len()).collect();
    finite_difference_check_named("theta", f, theta, eps, &coords)
}

/// Like [`finite_difference_check`] but binds `theta` as the parameter
/// `name` (so model code that looks the parameter up by name picks up the
/// probe) and only checks the listed flat coordinates.
pub fn finite_difference_check_named<F>(
    name: &str,
    f: F,
    theta: &Tensor<f64>,
    eps: f64,
    coords: &[usize],
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(AutodiffError::BadEpsilon(eps));
    }
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.param(name, t);
        let out = f(&mut g, v)?;
        let value = g.value(out);
        if value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(value.shape().to_vec()));
        }
        Ok(value.item())
    };

    let first = eval(theta)?;
    let second = eval(theta)?;
    if first.to_bits() != second.to_bits() {
        return Err(AutodiffError::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let v = g.param(name, theta);
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .wrt(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(theta.shape()));

    let mut worst: f64 = 0.0;
    let mut probe = theta.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
