//! Minimal reverse-mode differentiation over `f64` matrices.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! walks the record once in reverse and accumulates gradients for every
//! node. The op set is exactly what the encoder/attention/decoder stack
//! needs, nothing more. All values are two-dimensional: batches are rows,
//! feature dimensions are columns, scalars are 1x1.

use ndarray::{s, Array2, Axis};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// a (m,k) . b (k,n)
    MatMul(Var, Var),
    /// elementwise a + b
    Add(Var, Var),
    /// a (m,n) + row (1,n), broadcast over rows
    AddRow(Var, Var),
    /// elementwise a * b
    Mul(Var, Var),
    /// a (m,n) * col (m,1), broadcast over columns
    MulCol(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    /// horizontal concatenation
    ConcatCols(Vec<Var>),
    /// columns [start, start+width)
    SliceCols { src: Var, start: usize, width: usize },
    /// per-row dot product: (m,n),(m,n) -> (m,1)
    RowsDot(Var, Var),
    /// per-row masked softmax; rows whose mask is all zero come out as all
    /// zeros instead of erroring (an absent attention source)
    MaskedSoftmaxRows { src: Var },
    /// rows of `table` selected by id: (v,n) -> (ids.len(),n)
    GatherRows { table: Var, ids: Vec<usize> },
    /// per-row -log softmax(logits)[target]: (m,v) -> (m,1)
    CrossEntropyRows { logits: Var, targets: Vec<usize> },
    /// sum of all entries -> (1,1)
    SumAll(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by a backward pass.
pub struct Gradients {
    grads: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> &Array2<f64> {
        &self.grads[v.0]
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.leaf(Array2::zeros((rows, cols)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.value(col).ncols(), 1);
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            let pv = self.value(*p);
            v.slice_mut(s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, width: usize) -> Var {
        let v = self.value(src).slice(s![.., start..start + width]).to_owned();
        self.push(v, Op::SliceCols { src, start, width })
    }

    pub fn rows_dot(&mut self, a: Var, b: Var) -> Var {
        let prod = self.value(a) * self.value(b);
        let v = prod.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowsDot(a, b))
    }

    pub fn masked_softmax_rows(&mut self, src: Var, mask: Array2<f64>) -> Var {
        let x = self.value(src);
        debug_assert_eq!(x.dim(), mask.dim());
        let mut v = Array2::zeros(x.dim());
        for (r, row) in x.outer_iter().enumerate() {
            let mut max = f64::NEG_INFINITY;
            for (c, &val) in row.iter().enumerate() {
                if mask[(r, c)] > 0.0 && val > max {
                    max = val;
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut z = 0.0;
            for (c, &val) in row.iter().enumerate() {
                if mask[(r, c)] > 0.0 {
                    let e = (val - max).exp();
                    v[(r, c)] = e;
                    z += e;
                }
            }
            for c in 0..row.len() {
                v[(r, c)] /= z;
            }
        }
        self.push(v, Op::MaskedSoftmaxRows { src })
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).assign(&t.row(id));
        }
        self.push(v, Op::GatherRows { table, ids: ids.to_vec() })
    }

    /// Numerically stable per-row negative log likelihood of the target id.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        debug_assert_eq!(x.nrows(), targets.len());
        let mut v = Array2::zeros((targets.len(), 1));
        for (r, row) in x.outer_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&val| (val - max).exp()).sum::<f64>().ln();
            v[(r, 0)] = lse - row[targets[r]];
        }
        self.push(v, Op::CrossEntropyRows { logits, targets: targets.to_vec() })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Reverse pass from a scalar node: returns a gradient per tape node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Array2<f64>> =
            self.nodes.iter().map(|n| Array2::zeros(n.value.dim())).collect();
        grads[loss.0][(0, 0)] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let g = grads[i].clone();
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    grads[a.0] += &ga;
                    grads[b.0] += &gb;
                }
                Op::Add(a, b) => {
                    grads[a.0] += &g;
                    grads[b.0] += &g;
                }
                Op::AddRow(a, row) => {
                    grads[a.0] += &g;
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    grads[row.0] += &gr;
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    grads[a.0] += &ga;
                    grads[b.0] += &gb;
                }
                Op::MulCol(a, col) => {
                    let ga = &g * &self.nodes[col.0].value;
                    let gcol =
                        (&g * &self.nodes[a.0].value).sum_axis(Axis(1)).insert_axis(Axis(1));
                    grads[a.0] += &ga;
                    grads[col.0] += &gcol;
                }
                Op::Scale(a, c) => {
                    let ga = g.mapv(|x| x * c);
                    grads[a.0] += &ga;
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let ga = &g * &(y * &y.mapv(|v| 1.0 - v));
                    grads[a.0] += &ga;
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let ga = &g * &y.mapv(|v| 1.0 - v * v);
                    grads[a.0] += &ga;
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        let gp = g.slice(s![.., at..at + w]).to_owned();
                        grads[p.0] += &gp;
                        at += w;
                    }
                }
                Op::SliceCols { src, start, width } => {
                    let mut gs = Array2::zeros(self.nodes[src.0].value.dim());
                    gs.slice_mut(s![.., *start..*start + *width]).assign(&g);
                    grads[src.0] += &gs;
                }
                Op::RowsDot(a, b) => {
                    // g is (m,1); broadcast across columns.
                    let ga = &self.nodes[b.0].value * &g;
                    let gb = &self.nodes[a.0].value * &g;
                    grads[a.0] += &ga;
                    grads[b.0] += &gb;
                }
                Op::MaskedSoftmaxRows { src } => {
                    // dx = y * (g - sum_j g_j y_j); masked entries have y=0.
                    let y = &self.nodes[i].value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let gs = y * &(&g - &dot);
                    grads[src.0] += &gs;
                }
                Op::GatherRows { table, ids } => {
                    let gt = &mut grads[table.0];
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(r);
                    }
                }
                Op::CrossEntropyRows { logits, targets } => {
                    let x = &self.nodes[logits.0].value;
                    let mut gl = Array2::zeros(x.dim());
                    for (r, row) in x.outer_iter().enumerate() {
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                        let z: f64 = exps.iter().sum();
                        let upstream = g[(r, 0)];
                        for (c, e) in exps.iter().enumerate() {
                            let softmax = e / z;
                            let indicator = if c == targets[r] { 1.0 } else { 0.0 };
                            gl[(r, c)] = upstream * (softmax - indicator);
                        }
                    }
                    grads[logits.0] += &gl;
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.nodes[a.0].value.dim(), g[(0, 0)]);
                    grads[a.0] += &ga;
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences on a scalar-valued graph builder.
    fn finite_diff_check(
        inputs: Vec<Array2<f64>>,
        build: impl Fn(&mut Tape, &[Var]) -> Var,
    ) {
        let eval = |values: &[Array2<f64>]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
            let loss = build(&mut tape, &vars);
            tape.value(loss)[(0, 0)]
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);

        let h = 1e-5;
        for (vi, var) in vars.iter().enumerate() {
            let analytic = grads.of(*var).clone();
            for r in 0..inputs[vi].nrows() {
                for c in 0..inputs[vi].ncols() {
                    let mut plus = inputs.clone();
                    plus[vi][(r, c)] += h;
                    let mut minus = inputs.clone();
                    minus[vi][(r, c)] -= h;
                    let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let a = analytic[(r, c)];
                    let denom = a.abs().max(numeric.abs()).max(1e-4);
                    assert!(
                        (a - numeric).abs() / denom < 1e-6,
                        "input {vi} ({r},{c}): analytic {a} vs numeric {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_add_tanh_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let bias = random(&mut rng, 1, 2);
        finite_diff_check(vec![a, b, bias], |t, v| {
            let mm = t.matmul(v[0], v[1]);
            let ar = t.add_row(mm, v[2]);
            let th = t.tanh(ar);
            t.sum_all(th)
        });
    }

    #[test]
    fn lstm_style_gate_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = random(&mut rng, 2, 8);
        let c = random(&mut rng, 2, 2);
        finite_diff_check(vec![z, c], |t, v| {
            let i = t.slice_cols(v[0], 0, 2);
            let f = t.slice_cols(v[0], 2, 2);
            let g = t.slice_cols(v[0], 4, 2);
            let o = t.slice_cols(v[0], 6, 2);
            let i = t.sigmoid(i);
            let f = t.sigmoid(f);
            let g = t.tanh(g);
            let o = t.sigmoid(o);
            let fc = t.mul(f, v[1]);
            let ig = t.mul(i, g);
            let c2 = t.add(fc, ig);
            let tc = t.tanh(c2);
            let h = t.mul(o, tc);
            t.sum_all(h)
        });
    }

    #[test]
    fn attention_style_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dec = random(&mut rng, 2, 3);
        let attn = random(&mut rng, 3, 3);
        let e1 = random(&mut rng, 2, 3);
        let e2 = random(&mut rng, 2, 3);
        let e3 = random(&mut rng, 2, 3);
        // Row 0 attends to all three positions, row 1 only to the first two.
        let mask = array![[1.0, 1.0, 1.0], [1.0, 1.0, 0.0]];
        finite_diff_check(vec![dec, attn, e1, e2, e3], move |t, v| {
            let proj = t.matmul(v[0], v[1]);
            let s1 = t.rows_dot(proj, v[2]);
            let s2 = t.rows_dot(proj, v[3]);
            let s3 = t.rows_dot(proj, v[4]);
            let scores = t.concat_cols(&[s1, s2, s3]);
            let w = t.masked_softmax_rows(scores, mask.clone());
            let mut ctx = None;
            for (si, enc) in [v[2], v[3], v[4]].into_iter().enumerate() {
                let wi = t.slice_cols(w, si, 1);
                let part = t.mul_col(enc, wi);
                ctx = Some(match ctx {
                    None => part,
                    Some(acc) => t.add(acc, part),
                });
            }
            t.sum_all(ctx.unwrap())
        });
    }

    #[test]
    fn cross_entropy_and_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table = random(&mut rng, 5, 3);
        let proj = random(&mut rng, 3, 4);
        finite_diff_check(vec![table, proj], |t, v| {
            let rows = t.gather_rows(v[0], &[1, 4, 1]);
            let logits = t.matmul(rows, v[1]);
            let nll = t.cross_entropy_rows(logits, &[0, 3, 2]);
            let total = t.sum_all(nll);
            t.scale(total, 1.0 / 3.0)
        });
    }

    #[test]
    fn fully_masked_softmax_row_is_zero_everywhere() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let w = tape.masked_softmax_rows(x, array![[1.0, 1.0], [0.0, 0.0]]);
        let sm = tape.sum_all(w);
        assert!((tape.value(w).row(0).sum() - 1.0).abs() < 1e-12);
        assert_eq!(tape.value(w).row(1).sum(), 0.0);
        let grads = tape.backward(sm);
        assert_eq!(grads.of(x).row(1).sum(), 0.0);
    }

    #[test]
    fn mul_col_and_scale_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, 3, 4);
        let col = random(&mut rng, 3, 1);
        finite_diff_check(vec![a, col], |t, v| {
            let m = t.mul_col(v[0], v[1]);
            let sc = t.scale(m, 0.7);
            t.sum_all(sc)
        });
    }
}
