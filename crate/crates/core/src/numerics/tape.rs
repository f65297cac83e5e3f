//! Record-then-replay reverse-mode differentiation over small dense matrices.
//!
//! Every forward operation appends a node holding its value and the ids of its
//! inputs. [`Tape::backward`] walks the nodes in reverse insertion order, so each
//! recorded node is visited exactly once, and then clears the tape. Handles
//! ([`Var`]) carry the tape generation they were recorded in; using a handle
//! after the tape has been replayed is a contract error.

use super::tensor::{dims2, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    generation: u64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        shift: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConvPairs {
        top: usize,
        bottom: usize,
        kernels: usize,
        channels: usize,
        width: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Transpose(usize),
    Reshape(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Gradients of every gradient-requiring leaf, produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    generation: u64,
    by_id: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` for constants and non-leaf nodes.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        if var.generation != self.generation {
            return None;
        }
        self.by_id.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        if var.generation != self.generation {
            return None;
        }
        self.by_id.get_mut(var.id).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    generation: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var {
            id: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.generation != self.generation || v.id >= self.nodes.len() {
            return Err(Error::Contract(
                "variable was not recorded on the current tape (stale after backward?)".into(),
            ));
        }
        Ok(&self.nodes[v.id])
    }

    fn grad_flag(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a tensor as a leaf; gradients flow to it iff it requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// A gradient-free copy of `v` (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let n = self.node(v)?;
        let (shape, value) = (n.shape.clone(), n.value.clone());
        Ok(self.push(shape, value, false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> Result<&[f64]> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.node(v)?.shape)
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v)?;
        if n.value.len() != 1 {
            return Err(Error::shape("scalar", &n.shape, &[1]));
        }
        Ok(n.value[0])
    }

    pub fn to_tensor(&self, v: Var) -> Result<Tensor> {
        let n = self.node(v)?;
        Tensor::new(n.shape.clone(), n.value.clone())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.requires_grad)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        Ok(dims2(&self.node(v)?.shape))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a)?;
        let (k2, m) = self.dims(b)?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.nodes[a.id].shape, &self.nodes[b.id].shape));
        }
        let out = matmul(&self.nodes[a.id].value, &self.nodes[b.id].value, n, k, m);
        let rg = self.grad_flag(&[a.id, b.id]);
        Ok(self.push(vec![n, m], out, rg, Op::MatMul(a.id, b.id)))
    }

    /// Row-wise affine map `x·W + bias`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (n, a) = self.dims(x)?;
        let (a2, b) = self.dims(w)?;
        if a != a2 {
            return Err(Error::shape("linear", &self.nodes[x.id].shape, &self.nodes[w.id].shape));
        }
        if self.node(bias)?.value.len() != b {
            return Err(Error::shape(
                "linear bias",
                &self.nodes[w.id].shape,
                &self.nodes[bias.id].shape,
            ));
        }
        let mut out = matmul(&self.nodes[x.id].value, &self.nodes[w.id].value, n, a, b);
        let bv = &self.nodes[bias.id].value;
        for row in out.chunks_mut(b) {
            for (o, bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let rg = self.grad_flag(&[x.id, w.id, bias.id]);
        Ok(self.push(
            vec![n, b],
            out,
            rg,
            Op::Linear {
                x: x.id,
                w: w.id,
                b: bias.id,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.node(a)?.shape, &self.node(b)?.shape);
        if dims2(sa) != dims2(sb) {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (Vec<usize>, Vec<f64>, bool) {
        let na = &self.nodes[a.id];
        let nb = &self.nodes[b.id];
        let out = na.value.iter().zip(&nb.value).map(|(x, y)| f(*x, *y)).collect();
        (na.shape.clone(), out, na.requires_grad || nb.requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (s, v, rg) = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(s, v, rg, Op::Add(a.id, b.id)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (s, v, rg) = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(s, v, rg, Op::Sub(a.id, b.id)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (s, v, rg) = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(s, v, rg, Op::Mul(a.id, b.id)))
    }

    /// Adds one row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.dims(a)?;
        if self.node(row)?.value.len() != m {
            return Err(Error::shape("add_row", &self.nodes[a.id].shape, &self.nodes[row.id].shape));
        }
        let rv = &self.nodes[row.id].value;
        let mut out = self.nodes[a.id].value.clone();
        for r in out.chunks_mut(m) {
            for (o, x) in r.iter_mut().zip(rv) {
                *o += x;
            }
        }
        let rg = self.grad_flag(&[a.id, row.id]);
        Ok(self.push(vec![n, m], out, rg, Op::AddRow(a.id, row.id)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let n = self.node(a)?;
        let (s, v, rg) = (n.shape.clone(), n.value.iter().map(|x| x * c).collect(), n.requires_grad);
        Ok(self.push(s, v, rg, Op::Scale(a.id, c)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a)?;
        let (v, rg) = (n.value.iter().sum::<f64>(), n.requires_grad);
        Ok(self.push(vec![1], vec![v], rg, Op::Sum(a.id)))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let n = self.node(a)?;
        let (s, v, rg) = (n.shape.clone(), n.value.iter().map(|x| f(*x)).collect(), n.requires_grad);
        Ok(self.push(s, v, rg, op))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, f64::tanh, Op::Tanh(a.id))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, sigmoid, Op::Sigmoid(a.id))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, |x| x.max(0.0), Op::Relu(a.id))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims(a)?;
        let node = &self.nodes[a.id];
        if node.value.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("softmax input contains non-finite entries".into()));
        }
        let mut out = node.value.clone();
        for row in out.chunks_mut(m) {
            softmax_in_place(row);
        }
        let rg = node.requires_grad;
        Ok(self.push(vec![n, m], out, rg, Op::SoftmaxRows(a.id)))
    }

    /// Per-row normalization to zero mean and unit (biased) variance, then
    /// `gain ⊙ x̂ + shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims(x)?;
        for p in [gain, shift] {
            if self.node(p)?.value.len() != d {
                return Err(Error::shape("layer_norm", &self.nodes[x.id].shape, &self.nodes[p.id].shape));
            }
        }
        let xv = &self.nodes[x.id].value;
        let g = &self.nodes[gain.id].value;
        let b = &self.nodes[shift.id].value;
        let mut normalized = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            inv_std[i] = rstd;
            for j in 0..d {
                let xh = (row[j] - mean) * rstd;
                normalized[i * d + j] = xh;
                out[i * d + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.grad_flag(&[x.id, gain.id, shift.id]);
        Ok(self.push(
            vec![n, d],
            out,
            rg,
            Op::LayerNorm {
                x: x.id,
                gain: gain.id,
                shift: shift.id,
                normalized,
                inv_std,
            },
        ))
    }

    /// Batched two-row convolution: for each of the `n` pairs (`top[i]`,
    /// `bottom[i]`) produce `C` zero-padded "same" convolutions of length `d`,
    /// flattened channel-major into row `i` of an `n × (C·d)` output.
    pub fn conv_pairs(&mut self, top: Var, bottom: Var, kernels: Var) -> Result<Var> {
        self.same_shape("conv_pairs", top, bottom)?;
        let (n, d) = self.dims(top)?;
        let kshape = self.node(kernels)?.shape.clone();
        let (channels, width) = match kshape.as_slice() {
            [c, 2, w] => (*c, *w),
            _ => return Err(Error::shape("conv kernels", &kshape, &[0, 2, 0])),
        };
        if width % 2 == 0 {
            return Err(Error::Config(format!("convolution kernel width must be odd, got {width}")));
        }
        let pad = (width - 1) / 2;
        let tv = &self.nodes[top.id].value;
        let bv = &self.nodes[bottom.id].value;
        let kv = &self.nodes[kernels.id].value;
        let mut out = vec![0.0; n * channels * d];
        for i in 0..n {
            let rows = [&tv[i * d..(i + 1) * d], &bv[i * d..(i + 1) * d]];
            for c in 0..channels {
                let dst = &mut out[(i * channels + c) * d..(i * channels + c + 1) * d];
                for (r, src) in rows.iter().enumerate() {
                    let k = &kv[(c * 2 + r) * width..(c * 2 + r + 1) * width];
                    for (j, o) in dst.iter_mut().enumerate() {
                        for (u, kk) in k.iter().enumerate() {
                            let pos = j + u;
                            if pos >= pad && pos - pad < d {
                                *o += src[pos - pad] * kk;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.grad_flag(&[top.id, bottom.id, kernels.id]);
        Ok(self.push(
            vec![n, channels * d],
            out,
            rg,
            Op::ConvPairs {
                top: top.id,
                bottom: bottom.id,
                kernels: kernels.id,
                channels,
                width,
            },
        ))
    }

    /// Convolution of a stacked `2 × d` input with `C × 2 × w` kernels,
    /// returning `C × d`.
    pub fn conv_rows(&mut self, stack: Var, kernels: Var) -> Result<Var> {
        let (r, d) = self.dims(stack)?;
        if r != 2 {
            return Err(Error::shape("conv_rows", &self.nodes[stack.id].shape, &[2, d]));
        }
        let top = self.gather_rows(stack, &[0])?;
        let bottom = self.gather_rows(stack, &[1])?;
        let flat = self.conv_pairs(top, bottom, kernels)?;
        let channels = self.nodes[kernels.id].shape[0];
        self.reshape(flat, vec![channels, d])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, m) = self.dims(logits)?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy targets", &self.nodes[logits.id].shape, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= m) {
            return Err(Error::Index {
                what: "cross-entropy target",
                index: bad,
                len: m,
            });
        }
        let lv = &self.nodes[logits.id].value;
        if lv.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("cross-entropy logits contain non-finite entries".into()));
        }
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * m..(i + 1) * m];
            let (argmax, max) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            // log-sum-exp with the max term factored out so that near-certain
            // targets keep full relative precision.
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != argmax)
                .map(|(_, &v)| (v - max).exp())
                .sum();
            let lse = max + rest.ln_1p();
            total += (max - row[t]) + rest.ln_1p();
            for (p, &v) in probs[i * m..(i + 1) * m].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let rg = self.nodes[logits.id].requires_grad;
        Ok(self.push(
            vec![1],
            vec![total / n as f64],
            rg,
            Op::CrossEntropy {
                logits: logits.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims(a)?;
        let av = &self.nodes[a.id].value;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = av[i * m + j];
            }
        }
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(vec![m, n], out, rg, Op::Transpose(a.id)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n = self.node(a)?;
        if shape.iter().product::<usize>() != n.value.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &n.shape, &shape));
        }
        let (v, rg) = (n.value.clone(), n.requires_grad);
        Ok(self.push(shape, v, rg, Op::Reshape(a.id)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (n, _) = self.dims(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if r != n {
                return Err(Error::shape("concat_cols", &self.nodes[first.id].shape, &self.nodes[p.id].shape));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.id].value[i * w..(i + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.grad_flag(&ids);
        Ok(self.push(vec![n, total], out, rg, Op::ConcatCols(ids)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (_, m) = self.dims(first)?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if c != m {
                return Err(Error::shape("concat_rows", &self.nodes[first.id].shape, &self.nodes[p.id].shape));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * m);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.id].value);
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.grad_flag(&ids);
        Ok(self.push(vec![rows, m], out, rg, Op::ConcatRows(ids)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.dims(a)?;
        if len == 0 || start + len > m {
            return Err(Error::shape("slice_cols", &self.nodes[a.id].shape, &[start, len]));
        }
        let av = &self.nodes[a.id].value;
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&av[i * m + start..i * m + start + len]);
        }
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(vec![n, len], out, rg, Op::SliceCols { x: a.id, start }))
    }

    /// Selects rows by index (repeats allowed); gradients scatter-add back.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, m) = self.dims(a)?;
        if rows.is_empty() {
            return Err(Error::Contract("gather of zero rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index {
                what: "gathered row",
                index: bad,
                len: n,
            });
        }
        let av = &self.nodes[a.id].value;
        let mut out = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            out.extend_from_slice(&av[r * m..(r + 1) * m]);
        }
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(
            vec![rows.len(), m],
            out,
            rg,
            Op::GatherRows {
                x: a.id,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Replays adjoints from a scalar `loss` and clears the tape.
    ///
    /// Every leaf that requires a gradient receives one (zeros when the loss
    /// does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape; re-record the forward pass".into()));
        }
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let count = loss.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..count).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }

        let mut by_id: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                by_id[id] = Some(grads[id].take().unwrap_or_else(|| vec![0.0; node.value.len()]));
            }
        }
        let out = Gradients {
            generation: self.generation,
            by_id,
        };
        self.nodes.clear();
        self.generation += 1;
        Ok(out)
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        let val = |i: usize| nodes[i].value.as_slice();
        let dims = |i: usize| dims2(&nodes[i].shape);

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = dims(*a);
                let (_, m) = dims(*b);
                if wants(*a) {
                    accumulate(grads, *a, &matmul_bt(g, val(*b), n, m, k));
                }
                if wants(*b) {
                    accumulate(grads, *b, &matmul_at(val(*a), g, n, k, m));
                }
            }
            Op::Linear { x, w, b } => {
                let (n, a) = dims(*x);
                let (_, m) = dims(*w);
                if wants(*x) {
                    accumulate(grads, *x, &matmul_bt(g, val(*w), n, m, a));
                }
                if wants(*w) {
                    accumulate(grads, *w, &matmul_at(val(*x), g, n, a, m));
                }
                if wants(*b) {
                    accumulate(grads, *b, &col_sums(g, m));
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g);
                }
                if wants(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g);
                }
                if wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let ga: Vec<f64> = g.iter().zip(val(*b)).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, &ga);
                }
                if wants(*b) {
                    let gb: Vec<f64> = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, &gb);
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    accumulate(grads, *a, g);
                }
                if wants(*row) {
                    let m = val(*row).len();
                    accumulate(grads, *row, &col_sums(g, m));
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; val(*a).len()];
                accumulate(grads, *a, &ga);
            }
            Op::Tanh(a) => {
                let ga: Vec<f64> = g.iter().zip(&node.value).map(|(x, y)| x * (1.0 - y * y)).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = g.iter().zip(&node.value).map(|(x, y)| x * y * (1.0 - y)).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Relu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(val(*a))
                    .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::SoftmaxRows(a) => {
                let (_, m) = dims(*a);
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(m).zip(node.value.chunks(m)).zip(ga.chunks_mut(m)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((o, x), y) in out.iter_mut().zip(gr).zip(yr) {
                        *o = y * (x - dot);
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized,
                inv_std,
            } => {
                let (n, d) = dims(*x);
                let gv = val(*gain);
                if wants(*gain) {
                    let mut gg = vec![0.0; d];
                    for (gr, xr) in g.chunks(d).zip(normalized.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                    accumulate(grads, *gain, &gg);
                }
                if wants(*shift) {
                    accumulate(grads, *shift, &col_sums(g, d));
                }
                if wants(*x) {
                    let mut gx = vec![0.0; n * d];
                    let df = d as f64;
                    for i in 0..n {
                        let gr = &g[i * d..(i + 1) * d];
                        let xr = &normalized[i * d..(i + 1) * d];
                        let gxh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let s1: f64 = gxh.iter().sum();
                        let s2: f64 = gxh.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[i * d + j] = inv_std[i] / df * (df * gxh[j] - s1 - xr[j] * s2);
                        }
                    }
                    accumulate(grads, *x, &gx);
                }
            }
            Op::ConvPairs {
                top,
                bottom,
                kernels,
                channels,
                width,
            } => {
                let (n, d) = dims(*top);
                let (channels, width) = (*channels, *width);
                let pad = (width - 1) / 2;
                let kv = val(*kernels);
                let inputs = [*top, *bottom];
                let mut gin = [vec![0.0; n * d], vec![0.0; n * d]];
                let mut gk = vec![0.0; kv.len()];
                for i in 0..n {
                    for c in 0..channels {
                        let go = &g[(i * channels + c) * d..(i * channels + c + 1) * d];
                        for r in 0..2 {
                            let src = &val(inputs[r])[i * d..(i + 1) * d];
                            let kbase = (c * 2 + r) * width;
                            for (j, gj) in go.iter().enumerate() {
                                if *gj == 0.0 {
                                    continue;
                                }
                                for u in 0..width {
                                    let pos = j + u;
                                    if pos >= pad && pos - pad < d {
                                        gin[r][i * d + pos - pad] += gj * kv[kbase + u];
                                        gk[kbase + u] += gj * src[pos - pad];
                                    }
                                }
                            }
                        }
                    }
                }
                for (r, &inp) in inputs.iter().enumerate() {
                    if wants(inp) {
                        accumulate(grads, inp, &gin[r]);
                    }
                }
                if wants(*kernels) {
                    accumulate(grads, *kernels, &gk);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (n, m) = dims(*logits);
                let scale = g[0] / n as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * m + t] -= scale;
                }
                accumulate(grads, *logits, &gl);
            }
            Op::Transpose(a) => {
                let (n, m) = dims(*a);
                let mut ga = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        ga[i * m + j] = g[j * n + i];
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::Reshape(a) => accumulate(grads, *a, g),
            Op::ConcatCols(ids) => {
                let (n, total) = dims2(&node.shape);
                let mut offset = 0;
                for &p in ids {
                    let (_, w) = dims(p);
                    if wants(p) {
                        let mut gp = Vec::with_capacity(n * w);
                        for i in 0..n {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(grads, p, &gp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(ids) => {
                let mut offset = 0;
                for &p in ids {
                    let len = val(p).len();
                    if wants(p) {
                        accumulate(grads, p, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (n, m) = dims(*x);
                let (_, len) = dims2(&node.shape);
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    gx[i * m + start..i * m + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                accumulate(grads, *x, &gx);
            }
            Op::GatherRows { x, rows } => {
                let (n, m) = dims(*x);
                let mut gx = vec![0.0; n * m];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..m {
                        gx[r * m + j] += g[k * m + j];
                    }
                }
                accumulate(grads, *x, &gx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `a[n×k] · b[k×m]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g[n×m] · b[k×m]ᵀ` → `n×k`.
fn matmul_bt(g: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let gr = &g[i * m..(i + 1) * m];
        for p in 0..k {
            out[i * k + p] = gr.iter().zip(&b[p * m..(p + 1) * m]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[n×k]ᵀ · g[n×m]` → `k×m`.
fn matmul_at(a: &[f64], g: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let gr = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * m..(p + 1) * m].iter_mut().zip(gr) {
                *o += av * gv;
            }
        }
    }
    out
}

fn col_sums(g: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for row in g.chunks(m) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    out
}
