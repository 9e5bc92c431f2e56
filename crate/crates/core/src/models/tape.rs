//! Matrix-level reverse-mode differentiation for the training path.
//!
//! A [`Tape`] records every intermediate `Array2<f64>` together with the op
//! that produced it; [`Tape::backward`] walks the record in reverse.

use ndarray::{s, Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position of this node in the tape, and of its gradient in [`Tape::backward`]'s output.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// Rows of `table` at `ids`; rows equal to `zero_id` read as zeros and take no gradient.
    Gather { table: Var, ids: Vec<usize>, zero_id: Option<usize> },
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    SliceCols(Var, usize),
    Row(Var, usize),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Transpose(Var),
    SoftmaxCol(Var),
    MaxRows(Var, Vec<usize>),
    MeanRows(Var),
    /// Zero-padded sliding windows over rows, `width` rows concatenated per position.
    Windows(Var, usize),
    SoftmaxCe { logits: Var, target: usize },
    SigmoidBce { logits: Var, targets: Vec<f64>, weights: Vec<f64> },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

fn window_rows(x: &Array2<f64>, width: usize) -> Array2<f64> {
    let (n, d) = x.dim();
    let half = width / 2;
    let mut out = Array2::zeros((n, width * d));
    for t in 0..n {
        for w in 0..width {
            let src = t as isize + w as isize - half as isize;
            if src >= 0 && (src as usize) < n {
                out.slice_mut(s![t, w * d..(w + 1) * d])
                    .assign(&x.row(src as usize));
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn gather(&mut self, table: Var, ids: &[usize], zero_id: Option<usize>) -> Var {
        let t = self.value(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            if Some(id) != zero_id {
                out.row_mut(r).assign(&t.row(id));
            }
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                zero_id,
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `a` (n x k) plus row vector `b` (1 x k) broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + &self.value(b).row(0);
        self.push(v, Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + width]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let v = self.value(a).slice(s![i..i + 1, ..]).to_owned();
        self.push(v, Op::Row(a, i))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        let views: Vec<_> = rows.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("stack_rows col mismatch");
        self.push(v, Op::StackRows(rows.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// Softmax down a column vector (n x 1).
    pub fn softmax_col(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut v = x.mapv(|z| (z - max).exp());
        let sum = v.sum();
        v /= sum;
        self.push(v, Op::SoftmaxCol(a))
    }

    /// Column-wise max over rows, giving 1 x k.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut arg = Vec::with_capacity(x.ncols());
        let mut v = Array2::zeros((1, x.ncols()));
        for (j, col) in x.columns().into_iter().enumerate() {
            let (i, m) = col
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &z)| if z > best.1 { (i, z) } else { best });
            arg.push(i);
            v[[0, j]] = m;
        }
        self.push(v, Op::MaxRows(a, arg))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn windows(&mut self, a: Var, width: usize) -> Var {
        let v = window_rows(self.value(a), width);
        self.push(v, Op::Windows(a, width))
    }

    /// Cross-entropy of softmax(logits) (1 x C) against `target`.
    pub fn softmax_ce(&mut self, logits: Var, target: usize) -> Var {
        let z = self.value(logits).row(0);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - z[target];
        self.push(Array2::from_elem((1, 1), loss), Op::SoftmaxCe { logits, target })
    }

    /// Weighted sum of per-column binary cross-entropies on sigmoid(logits).
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Var {
        let z = self.value(logits).row(0);
        let loss: f64 = z
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&x, &y), &w)| w * (softplus(x) - y * x))
            .sum();
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::SigmoidBce {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total: f64 = terms.iter().map(|(v, w)| w * self.scalar(*v)).sum();
        self.push(Array2::from_elem((1, 1), total), Op::WeightedSum(terms.to_vec()))
    }

    /// Gradients of the scalar `loss` with respect to every leaf (other slots are `None`).
    pub fn backward(&self, loss: Var) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => grads[i] = Some(g),
                Op::Gather { table, ids, zero_id } => {
                    let t = self.value(*table);
                    let mut dt = Array2::zeros(t.dim());
                    for (r, &id) in ids.iter().enumerate() {
                        if Some(id) != *zero_id {
                            let mut row = dt.row_mut(id);
                            row += &g.row(r);
                        }
                    }
                    accumulate(&mut grads[table.0], dt);
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::AddRow(a, b) => {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[a.0], g);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Tanh(a) => {
                    let d = &g * &node.value.mapv(|y| 1.0 - y * y);
                    accumulate(&mut grads[a.0], d);
                }
                Op::Sigmoid(a) => {
                    let d = &g * &node.value.mapv(|y| y * (1.0 - y));
                    accumulate(&mut grads[a.0], d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[a.0], d);
                }
                Op::Row(a, r) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.row_mut(*r).assign(&g.row(0));
                    accumulate(&mut grads[a.0], d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let d = g.slice(s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads[p.0], d);
                        offset += w;
                    }
                }
                Op::StackRows(rows) => {
                    let mut offset = 0;
                    for r in rows {
                        let h = self.value(*r).nrows();
                        let d = g.slice(s![offset..offset + h, ..]).to_owned();
                        accumulate(&mut grads[r.0], d);
                        offset += h;
                    }
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads[a.0], g.t().to_owned());
                }
                Op::SoftmaxCol(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum();
                    let d = y * &g.mapv(|x| x - dot);
                    accumulate(&mut grads[a.0], d);
                }
                Op::MaxRows(a, arg) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    for (j, &i) in arg.iter().enumerate() {
                        d[[i, j]] = g[[0, j]];
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let n = x.nrows() as f64;
                    let mut d = Array2::zeros(x.dim());
                    d += &(g.row(0).mapv(|v| v / n));
                    accumulate(&mut grads[a.0], d);
                }
                Op::Windows(a, width) => {
                    let x = self.value(*a);
                    let (n, dcols) = x.dim();
                    let half = width / 2;
                    let mut d = Array2::zeros((n, dcols));
                    for t in 0..n {
                        for w in 0..*width {
                            let src = t as isize + w as isize - half as isize;
                            if src >= 0 && (src as usize) < n {
                                let mut row = d.row_mut(src as usize);
                                row += &g.slice(s![t, w * dcols..(w + 1) * dcols]);
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::SoftmaxCe { logits, target } => {
                    let z = self.value(*logits);
                    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut p = z.mapv(|x| (x - max).exp());
                    let sum = p.sum();
                    p /= sum;
                    p[[0, *target]] -= 1.0;
                    accumulate(&mut grads[logits.0], p * g[[0, 0]]);
                }
                Op::SigmoidBce {
                    logits,
                    targets,
                    weights,
                } => {
                    let z = self.value(*logits);
                    let mut d = Array2::zeros(z.dim());
                    for j in 0..z.ncols() {
                        d[[0, j]] = g[[0, 0]] * weights[j] * (sigmoid(z[[0, j]]) - targets[j]);
                    }
                    accumulate(&mut grads[logits.0], d);
                }
                Op::WeightedSum(terms) => {
                    for (v, w) in terms {
                        accumulate(&mut grads[v.0], Array2::from_elem((1, 1), g[[0, 0]] * w));
                    }
                }
            }
        }
        grads
    }
}

pub(crate) fn sigmoid_f(x: f64) -> f64 {
    sigmoid(x)
}

pub(crate) fn sliding_windows(x: &Array2<f64>, width: usize) -> Array2<f64> {
    window_rows(x, width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` with respect to every entry of every input.
    fn numeric_grads(
        inputs: &[Array2<f64>],
        f: &dyn Fn(&mut Tape, &[Var]) -> Var,
    ) -> Vec<Array2<f64>> {
        let eps = 1e-6;
        let eval = |vals: &[Array2<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
            let out = f(&mut tape, &vars);
            tape.scalar(out)
        };
        inputs
            .iter()
            .enumerate()
            .map(|(k, x)| {
                let mut g = Array2::zeros(x.dim());
                for idx in 0..x.len() {
                    let (r, c) = (idx / x.ncols(), idx % x.ncols());
                    let mut plus = inputs.to_vec();
                    plus[k][[r, c]] += eps;
                    let mut minus = inputs.to_vec();
                    minus[k][[r, c]] -= eps;
                    g[[r, c]] = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                }
                g
            })
            .collect()
    }

    fn check(inputs: Vec<Array2<f64>>, f: &dyn Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let numeric = numeric_grads(&inputs, f);
        for (v, n) in vars.iter().zip(numeric) {
            let a = grads[v.0].clone().unwrap_or_else(|| Array2::zeros(n.dim()));
            for (x, y) in a.iter().zip(n.iter()) {
                assert!((x - y).abs() < 1e-6, "analytic {x} vs numeric {y}");
            }
        }
    }

    #[test]
    fn attention_pooling_gradients() {
        let h = array![[0.3, -0.2], [0.1, 0.5], [-0.4, 0.2]];
        let w = array![[0.5, -0.1], [0.2, 0.3]];
        let v = array![[0.7], [-0.6]];
        check(vec![h, w, v], &|t, x| {
            let proj = t.matmul(x[0], x[1]);
            let act = t.tanh(proj);
            let scores = t.matmul(act, x[2]);
            let alpha = t.softmax_col(scores);
            let at = t.transpose(alpha);
            let fact = t.matmul(at, x[0]);
            t.softmax_ce(fact, 1)
        });
    }

    #[test]
    fn gate_ops_and_bce_gradients() {
        let a = array![[0.3, -0.2, 0.8, 0.1]];
        let b = array![[0.5, 0.4, -0.3, 0.2]];
        check(vec![a, b], &|t, x| {
            let s = t.add_row(x[0], x[1]);
            let left = t.slice_cols(s, 0, 2);
            let right = t.slice_cols(s, 2, 2);
            let gl = t.sigmoid(left);
            let gr = t.tanh(right);
            let m = t.mul(gl, gr);
            let cat = t.concat_cols(&[m, gl]);
            let ce = t.softmax_ce(cat, 2);
            let bce = t.sigmoid_bce(m, &[1.0, 0.0], &[1.0, 0.5]);
            t.weighted_sum(&[(ce, 1.0), (bce, 2.0)])
        });
    }

    #[test]
    fn conv_max_mean_gather_gradients() {
        let table = array![[0.0, 0.0], [0.2, -0.4], [0.6, 0.1], [-0.3, 0.9]];
        let w = array![[0.1, 0.2], [-0.3, 0.4], [0.5, -0.6], [0.7, 0.8], [-0.9, 0.15], [0.25, -0.35]];
        check(vec![table, w], &|t, x| {
            let e = t.gather(x[0], &[1, 3, 0, 2], Some(0));
            let win = t.windows(e, 3);
            let conv = t.matmul(win, x[1]);
            let act = t.tanh(conv);
            let pooled = t.max_rows(act);
            let mean = t.mean_rows(act);
            let rows = t.stack_rows(&[pooled, mean]);
            let flat = t.transpose(rows);
            let col = t.transpose(flat);
            let second = t.row(col, 1);
            let first = t.slice_cols(col, 0, 2);
            let first = t.add_row(first, second);
            let top = t.max_rows(first);
            t.softmax_ce(top, 0)
        });
    }

    #[test]
    fn padding_row_takes_no_gradient() {
        let mut tape = Tape::new();
        let table = tape.leaf(array![[1.0, 1.0], [0.5, 0.5]]);
        let e = tape.gather(table, &[0, 1], Some(0));
        assert_eq!(tape.value(e).row(0).sum(), 0.0);
        let m = tape.mean_rows(e);
        let loss = tape.softmax_ce(m, 0);
        let g = tape.backward(loss);
        let dt = g[table.0].as_ref().unwrap();
        assert_eq!(dt.row(0).sum(), 0.0);
        assert!(dt.row(1).iter().any(|v| *v != 0.0));
    }
}
