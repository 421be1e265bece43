//! Tape-based reverse-mode differentiation over dense 2-D tensors.
//!
//! Every value in the graph is a row-major `rows × cols` matrix. Batches are
//! rows, features are columns. Operations append a node to the tape; calling
//! [`Graph::backward`] on a `1 × 1` node walks the tape in reverse creation
//! order, which is a valid topological order by construction.
//!
//! ```
//! use agd_core::numerics::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::from_elem((1, 1), 3.0));
//! let y = g.square(x);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap()[[0, 0]], 6.0);
//! ```

use ndarray::{s, Array2, Axis, Zip};

use super::{log_sigmoid, sigmoid, NumericsError, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    BroadcastRows(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Silu(Var),
    Exp(Var),
    LogSigmoid(Var),
    Square(Var),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by a backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`, or `None` when `v`
    /// does not influence the root through differentiable leaves.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros of `shape` when absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    nonfinite: Option<String>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.nonfinite.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.nonfinite = Some(format!(
                "node {} ({}) produced a non-finite value",
                self.nodes.len(),
                op_name(&op)
            ));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf (parameters, or inputs whose gradient is wanted).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Description of the first non-finite intermediate, if any was produced.
    pub fn nonfinite(&self) -> Option<&str> {
        self.nonfinite.as_deref()
    }

    pub fn check_finite(&self) -> Result<(), NumericsError> {
        match &self.nonfinite {
            Some(msg) => Err(NumericsError::NonFinite(msg.clone())),
            None => Ok(()),
        }
    }

    fn expect_same_shape(&self, a: Var, b: Var, op: &str) -> Result<(), NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumericsError::Shape(format!(
                "{op}: operand shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != rb {
            return Err(NumericsError::Shape(format!(
                "matmul: ({ra}x{ca}) · ({rb}x{cb}) inner extents differ"
            )));
        }
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a + bias` where `bias` is `1 × cols` and broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let (_, ca) = self.shape(a);
        let sb = self.shape(bias);
        if sb != (1, ca) {
            return Err(NumericsError::Shape(format!(
                "add_bias: bias shape {sb:?} does not match (1, {ca})"
            )));
        }
        let value = self.value(a) + self.value(bias);
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(a, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.expect_same_shape(a, b, "add")?;
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.expect_same_shape(a, b, "sub")?;
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.expect_same_shape(a, b, "mul")?;
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// Repeats a `1 × cols` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var, NumericsError> {
        let (ra, ca) = self.shape(a);
        if ra != 1 {
            return Err(NumericsError::Shape(format!(
                "broadcast_rows: expected a single row, got {ra}"
            )));
        }
        let value = self
            .value(a)
            .broadcast((rows, ca))
            .expect("row broadcast")
            .to_owned();
        let rg = self.rg(a);
        Ok(self.push(value, Op::BroadcastRows(a), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).mapv(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let value = Array2::from_elem((1, 1), self.value(a).sum() / n);
        let rg = self.rg(a);
        self.push(value, Op::MeanAll(a), rg)
    }

    /// Row sums, `rows × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let Some(&first) = parts.first() else {
            return Err(NumericsError::Shape("concat_cols: no operands".into()));
        };
        let rows = self.shape(first).0;
        if let Some(bad) = parts.iter().find(|v| self.shape(**v).0 != rows) {
            return Err(NumericsError::Shape(format!(
                "concat_cols: row count {} differs from {rows}",
                self.shape(*bad).0
            )));
        }
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("checked row counts");
        let rg = parts.iter().any(|v| self.rg(*v));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start .. start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (_, ca) = self.shape(a);
        if start + len > ca {
            return Err(NumericsError::Shape(format!(
                "slice_cols: {start}..{} out of {ca} columns",
                start + len
            )));
        }
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    /// Picks column `idx[r]` from each row `r`, giving `rows × 1`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let (ra, ca) = self.shape(a);
        if idx.len() != ra {
            return Err(NumericsError::Shape(format!(
                "gather: {} indices for {ra} rows",
                idx.len()
            )));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= ca) {
            return Err(NumericsError::Shape(format!(
                "gather: index {bad} out of {ca} columns"
            )));
        }
        let value = Array2::from_shape_fn((ra, 1), |(r, _)| self.value(a)[[r, idx[r]]]);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Gather(a, idx.to_vec()), rg))
    }

    /// Gradients of `root` with respect to every differentiable leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumericsError> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(NumericsError::Shape(format!(
                "backward: root must be scalar, got {shape:?}"
            )));
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gout);
                continue;
            }
            let y = &node.value;
            let mut acc = |v: Var, g: Tensor| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &g,
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves handled above"),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, gout.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        acc(*b, self.value(*a).t().dot(&gout));
                    }
                }
                Op::AddBias(a, b) => {
                    if self.rg(*b) {
                        acc(*b, gout.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(*a, gout);
                }
                Op::Add(a, b) => {
                    acc(*b, gout.clone());
                    acc(*a, gout);
                }
                Op::Sub(a, b) => {
                    acc(*b, -&gout);
                    acc(*a, gout);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, &gout * self.value(*b));
                    }
                    if self.rg(*b) {
                        acc(*b, &gout * self.value(*a));
                    }
                }
                Op::Scale(a, c) => acc(*a, gout * *c),
                Op::AddScalar(a) => acc(*a, gout),
                Op::BroadcastRows(a) => acc(*a, gout.sum_axis(Axis(0)).insert_axis(Axis(0))),
                Op::Tanh(a) => {
                    let mut g = gout;
                    Zip::from(&mut g).and(y).for_each(|g, &t| *g *= 1.0 - t * t);
                    acc(*a, g);
                }
                Op::Sigmoid(a) => {
                    let mut g = gout;
                    Zip::from(&mut g).and(y).for_each(|g, &s| *g *= s * (1.0 - s));
                    acc(*a, g);
                }
                Op::Relu(a) => {
                    let mut g = gout;
                    Zip::from(&mut g)
                        .and(self.value(*a))
                        .for_each(|g, &x| *g *= if x > 0.0 { 1.0 } else { 0.0 });
                    acc(*a, g);
                }
                Op::Silu(a) => {
                    let mut g = gout;
                    Zip::from(&mut g).and(self.value(*a)).for_each(|g, &x| {
                        let s = sigmoid(x);
                        *g *= s * (1.0 + x * (1.0 - s));
                    });
                    acc(*a, g);
                }
                Op::Exp(a) => acc(*a, gout * y),
                Op::LogSigmoid(a) => {
                    let mut g = gout;
                    Zip::from(&mut g)
                        .and(self.value(*a))
                        .for_each(|g, &x| *g *= sigmoid(-x));
                    acc(*a, g);
                }
                Op::Square(a) => {
                    let mut g = gout;
                    Zip::from(&mut g)
                        .and(self.value(*a))
                        .for_each(|g, &x| *g *= 2.0 * x);
                    acc(*a, g);
                }
                Op::SumAll(a) => {
                    let s = gout[[0, 0]];
                    acc(*a, Array2::from_elem(self.shape(*a), s));
                }
                Op::MeanAll(a) => {
                    let sh = self.shape(*a);
                    let s = gout[[0, 0]] / (sh.0 * sh.1).max(1) as f64;
                    acc(*a, Array2::from_elem(sh, s));
                }
                Op::SumCols(a) => {
                    let sh = self.shape(*a);
                    let g = gout.broadcast(sh).expect("column broadcast").to_owned();
                    acc(*a, g);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        if self.rg(*p) {
                            acc(*p, gout.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut g = Array2::zeros(self.shape(*a));
                    let w = gout.ncols();
                    g.slice_mut(s![.., *start..*start + w]).assign(&gout);
                    acc(*a, g);
                }
                Op::LogSoftmax(a) => {
                    // d/dx_j = g_j - softmax_j * Σ_k g_k
                    let mut g = gout.clone();
                    for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                        let total: f64 = grow.sum();
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|gj, &lp| *gj -= lp.exp() * total);
                    }
                    acc(*a, g);
                }
                Op::Gather(a, idx) => {
                    let mut g = Array2::zeros(self.shape(*a));
                    for (r, &c) in idx.iter().enumerate() {
                        g[[r, c]] = gout[[r, 0]];
                    }
                    acc(*a, g);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::AddBias(..) => "add_bias",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::BroadcastRows(..) => "broadcast_rows",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Relu(..) => "relu",
        Op::Silu(..) => "silu",
        Op::Exp(..) => "exp",
        Op::LogSigmoid(..) => "log_sigmoid",
        Op::Square(..) => "square",
        Op::SumAll(..) => "sum_all",
        Op::MeanAll(..) => "mean_all",
        Op::SumCols(..) => "sum_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
        Op::LogSoftmax(..) => "log_softmax",
        Op::Gather(..) => "gather",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(f: impl Fn(&mut Graph, Var) -> Var, x0: Tensor) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = f(&mut g, x);
        let grads = g.backward(y).unwrap();
        let analytic = grads.get_or_zeros(x, x0.dim());
        let h = 1e-6;
        for idx in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.as_slice_mut().unwrap()[idx] += delta;
                let mut g = Graph::new();
                let v = g.param(xp);
                let out = f(&mut g, v);
                g.scalar(out)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() <= 1e-6 + 1e-5 * fd.abs(),
                "idx {idx}: fd {fd} analytic {an}"
            );
        }
    }

    #[test]
    fn square_at_three() {
        let mut g = Graph::new();
        let x = g.param(array![[3.0]]);
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.param(array![[0.0]]);
        let y = g.sigmoid(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 0.25);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(array![[1.0, 2.0]]);
        let y = g.tanh(x);
        assert!(matches!(g.backward(y), Err(NumericsError::Shape(_))));
    }

    #[test]
    fn shape_mismatch_is_descriptive() {
        let mut g = Graph::new();
        let a = g.constant(Array2::zeros((2, 3)));
        let b = g.constant(Array2::zeros((2, 3)));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("inner extents"));
    }

    #[test]
    fn nonfinite_is_surfaced() {
        let mut g = Graph::new();
        let x = g.param(array![[1000.0]]);
        let y = g.exp(x);
        let z = g.sum_all(y);
        assert!(g.nonfinite().is_some());
        assert!(matches!(g.backward(z), Err(NumericsError::NonFinite(_))));
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x0 = array![[0.3, -1.2, 0.7], [2.0, -0.1, 0.05]];
        fd_check(
            |g, x| {
                let a = g.tanh(x);
                let b = g.silu(x);
                let c = g.mul(a, b).unwrap();
                let d = g.log_sigmoid(c);
                let e = g.exp(x);
                let f = g.add(d, e).unwrap();
                let h = g.relu(f);
                let i = g.sum_cols(h);
                let j = g.square(i);
                g.mean_all(j)
            },
            x0,
        );
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let x0 = array![[0.3, -1.2, 0.7], [2.0, -0.1, 0.05]];
        fd_check(
            |g, x| {
                let left = g.slice_cols(x, 0, 2).unwrap();
                let right = g.slice_cols(x, 1, 2).unwrap();
                let cat = g.concat_cols(&[left, right, x]).unwrap();
                let lsm = g.log_softmax(cat);
                let picked = g.gather(lsm, &[1, 6]).unwrap();
                let w = g.constant(array![[0.5, -0.25], [1.0, 2.0], [0.1, 0.2]]);
                let m = g.matmul(x, w).unwrap();
                let row = g.slice_cols(m, 0, 1).unwrap();
                let rowt = g.sum_all(row);
                let sc = g.scale(rowt, 0.3);
                let sp = g.sum_all(picked);
                let t = g.add(sp, sc).unwrap();
                g.add_scalar(t, 1.5)
            },
            x0,
        );
    }

    #[test]
    fn broadcast_and_bias_match_finite_differences() {
        let x0 = array![[0.3, -1.2]];
        fd_check(
            |g, b| {
                let data = g.constant(array![[1.0, 2.0], [3.0, -4.0], [0.5, 0.5]]);
                let y = g.add_bias(data, b).unwrap();
                let br = g.broadcast_rows(b, 3).unwrap();
                let z = g.mul(y, br).unwrap();
                let s = g.sigmoid(z);
                let d = g.sub(s, y).unwrap();
                g.sum_all(d)
            },
            x0,
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(array![[2.0]]);
        let x = g.param(array![[3.0]]);
        let y = g.mul(c, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 2.0);
    }
}
