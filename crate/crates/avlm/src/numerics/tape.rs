//! Reverse-mode autodiff over row-major tensors.
//!
//! A `Tape` records ops in construction order (parents always precede
//! children), so the backward pass is a single reverse sweep. Every op
//! validates shapes and checks its output for NaN/Inf before the node is
//! admitted; model code propagates those errors with `?`.

use crate::error::{Error, Result};
use crate::numerics::{lit, mm_nn, mm_nt, mm_tn, Scalar, Tensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn<S> = Box<dyn Fn(&[Node<S>], &Tensor<S>, &mut Vec<Option<Tensor<S>>>)>;

pub struct Node<S: Scalar> {
    value: Tensor<S>,
    needs_grad: bool,
    backward: Option<BackwardFn<S>>,
}

/// Gradients keyed by `Var`, produced by [`Tape::backward`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn accumulate<S: Scalar>(grads: &mut Vec<Option<Tensor<S>>>, id: usize, delta: Tensor<S>) {
    match &mut grads[id] {
        Some(g) => {
            assert_eq!(g.shape(), delta.shape(), "gradient shape mismatch");
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

#[derive(Default)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, needs_grad: requires_grad, backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: &'static str, value: Tensor<S>, parents: &[Var], backward: BackwardFn<S>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, needs_grad, backward: Some(backward) });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar root. Returns gradients for every node
    /// that needed them; leaves created with `requires_grad` keep theirs.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("root must be scalar, got shape {:?}", root_val.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_val.shape(), S::one()));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Some(bwd) = &node.backward {
                bwd(&self.nodes, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!(
                    "inner dimensions disagree: left {:?} vs right {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let mut out = vec![S::zero(); m * n];
        mm_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let (ai, bi) = (a.0, b.0);
        self.push(
            "matmul",
            Tensor::new(vec![m, n], out)?,
            &[a, b],
            Box::new(move |nodes, g, grads| {
                if nodes[ai].needs_grad {
                    let mut da = vec![S::zero(); m * k];
                    mm_nt(g.data(), nodes[bi].value.data(), m, n, k, &mut da);
                    accumulate(grads, ai, Tensor { shape: nodes[ai].value.shape().to_vec(), data: da });
                }
                if nodes[bi].needs_grad {
                    let mut db = vec![S::zero(); k * n];
                    mm_tn(nodes[ai].value.data(), g.data(), k, m, n, &mut db);
                    accumulate(grads, bi, Tensor { shape: nodes[bi].value.shape().to_vec(), data: db });
                }
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ai = a.0;
        self.push(
            "transpose",
            Tensor::new(vec![n, m], out)?,
            &[a],
            Box::new(move |nodes, g, grads| {
                if nodes[ai].needs_grad {
                    let mut da = vec![S::zero(); m * n];
                    for j in 0..n {
                        for i in 0..m {
                            da[i * n + j] = g.data()[j * m + i];
                        }
                    }
                    accumulate(grads, ai, Tensor { shape: vec![m, n], data: da });
                }
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let (ai, bi) = (a.0, b.0);
        self.push(
            "add",
            Tensor { shape, data: out },
            &[a, b],
            Box::new(move |nodes, g, grads| {
                for id in [ai, bi] {
                    if nodes[id].needs_grad {
                        accumulate(grads, id, g.clone());
                    }
                }
            }),
        )
    }

    /// Broadcast add of a rank-1 bias over every row of a matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let d = self.value(bias).numel();
        if d != n || self.value(bias).rank() != 1 {
            return Err(Error::Shape {
                op: "add_row",
                detail: format!(
                    "matrix {:?} vs bias {:?}",
                    self.value(a).shape(),
                    self.value(bias).shape()
                ),
            });
        }
        let mut out = self.value(a).data().to_vec();
        let bv = self.value(bias).data();
        for row in out.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o = *o + b;
            }
        }
        let shape = self.value(a).shape().to_vec();
        let (ai, bi) = (a.0, bias.0);
        self.push(
            "add_row",
            Tensor { shape, data: out },
            &[a, bias],
            Box::new(move |nodes, g, grads| {
                if nodes[ai].needs_grad {
                    accumulate(grads, ai, g.clone());
                }
                if nodes[bi].needs_grad {
                    let mut db = vec![S::zero(); n];
                    for row in g.data().chunks(n) {
                        for (acc, &gv) in db.iter_mut().zip(row) {
                            *acc = *acc + gv;
                        }
                    }
                    let _ = m;
                    accumulate(grads, bi, Tensor { shape: vec![n], data: db });
                }
            }),
        )
    }

    /// y = x·W + b, the projector/LM building block.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let (ai, bi) = (a.0, b.0);
        self.push(
            "mul",
            Tensor { shape, data: out },
            &[a, b],
            Box::new(move |nodes, g, grads| {
                if nodes[ai].needs_grad {
                    let delta: Vec<S> = g.data().iter().zip(nodes[bi].value.data()).map(|(&gv, &bv)| gv * bv).collect();
                    accumulate(grads, ai, Tensor { shape: nodes[ai].value.shape().to_vec(), data: delta });
                }
                if nodes[bi].needs_grad {
                    let delta: Vec<S> = g.data().iter().zip(nodes[ai].value.data()).map(|(&gv, &av)| gv * av).collect();
                    accumulate(grads, bi, Tensor { shape: nodes[bi].value.shape().to_vec(), data: delta });
                }
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let cs = lit::<S>(c);
        let out = self.value(a).map(|v| v * cs);
        let ai = a.0;
        self.push(
            "scale",
            out,
            &[a],
            Box::new(move |nodes, g, grads| {
                if nodes[ai].needs_grad {
                    accumulate(grads, ai, g.map(|v| v * cs));
                }
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > S::zero() { v } else { S::zero() });
        let ai = a.0;
        self.push(
            "relu",
            out,
            &[a],
            Box::new(move |nodes, g, grads| {
                if nodes[ai].needs_grad {
                    let delta: Vec<S> = g
                        .data()
                        .iter()
                        .zip(nodes[ai].value.data())
                        .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                        .collect();
                    accumulate(grads, ai, Tensor { shape: nodes[ai].value.shape().to_vec(), data: delta });
                }
            }),
        )
    }

    /// GELU, tanh approximation; the backward uses the matching exact derivative.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let c: S = lit(0.797_884_560_802_865_4); // sqrt(2/pi)
        let k: S = lit(0.044715);
        let half: S = lit(0.5);
        let one = S::one();
        let three: S = lit(3.0);
        let out = self.value(a).map(|x| {
            let u = c * (x + k * x * x * x);
            half * x * (one + u.tanh())
        });
        let ai = a.0;
        self.push(
            "gelu",
            out,
            &[a],
            Box::new(move |nodes, g, grads| {
                if nodes[ai].needs_grad {
                    let delta: Vec<S> = g
                        .data()
                        .iter()
                        .zip(nodes[ai].value.data())
                        .map(|(&gv, &x)| {
                            let u = c * (x + k * x * x * x);
                            let t = u.tanh();
                            let du = c * (one + three * k * x * x);
                            gv * (half * (one + t) + half * x * (one - t * t) * du)
                        })
                        .collect();
                    accumulate(grads, ai, Tensor { shape: nodes[ai].value.shape().to_vec(), data: delta });
                }
            }),
        )
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let mut out = vec![S::zero(); m * n];
        for (row_in, row_out) in self.value(a).data().chunks(n).zip(out.chunks_mut(n)) {
            let mx = row_in.iter().fold(S::neg_infinity(), |acc, &v| acc.max(v));
            let mut sum = S::zero();
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - mx).exp();
                sum = sum + *o;
            }
            for o in row_out.iter_mut() {
                *o = *o / sum;
            }
        }
        let shape = self.value(a).shape().to_vec();
        let ai = a.0;
        let out_id = self.nodes.len();
        self.push(
            "softmax",
            Tensor { shape, data: out },
            &[a],
            Box::new(move |nodes, g, grads| {
                if nodes[ai].needs_grad {
                    let y = nodes[out_id].value.data();
                    let mut delta = vec![S::zero(); m * n];
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            delta[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(grads, ai, Tensor { shape: nodes[ai].value.shape().to_vec(), data: delta });
                }
            }),
        )
    }

    /// Adds a large negative constant above the diagonal of a square score
    /// matrix; gradient passes through untouched.
    pub fn add_causal_mask(&mut self, scores: Var) -> Result<Var> {
        let (m, n) = self.value(scores).dims2()?;
        if m != n {
            return Err(Error::Shape {
                op: "causal_mask",
                detail: format!("expected square scores, got {:?}", self.value(scores).shape()),
            });
        }
        let neg = lit::<S>(-1e9);
        let mut out = self.value(scores).data().to_vec();
        for i in 0..m {
            for j in (i + 1)..n {
                out[i * n + j] = out[i * n + j] + neg;
            }
        }
        let ai = scores.0;
        self.push(
            "causal_mask",
            Tensor { shape: vec![m, n], data: out },
            &[scores],
            Box::new(move |nodes, g, grads| {
                if nodes[ai].needs_grad {
                    accumulate(grads, ai, g.clone());
                }
            }),
        )
    }

    /// Row-wise layer norm with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!(
                    "x {:?} vs gamma {:?} / beta {:?}",
                    self.value(x).shape(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            });
        }
        let epss = lit::<S>(eps);
        let nf = lit::<S>(n as f64);
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = vec![S::zero(); m * n];
        for (row_in, row_out) in self.value(x).data().chunks(n).zip(out.chunks_mut(n)) {
            let mean: S = row_in.iter().copied().sum::<S>() / nf;
            let var: S = row_in.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let inv = (var + epss).sqrt().recip();
            for j in 0..n {
                row_out[j] = (row_in[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let (xi, gi, bi) = (x.0, gamma.0, beta.0);
        self.push(
            "layer_norm",
            Tensor { shape, data: out },
            &[x, gamma, beta],
            Box::new(move |nodes, g, grads| {
                let xv = nodes[xi].value.data();
                let gammav = nodes[gi].value.data();
                let mut dx = vec![S::zero(); m * n];
                let mut dgamma = vec![S::zero(); n];
                let mut dbeta = vec![S::zero(); n];
                for i in 0..m {
                    let xr = &xv[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let mean: S = xr.iter().copied().sum::<S>() / nf;
                    let var: S = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
                    let inv = (var + epss).sqrt().recip();
                    // h = dL/dx_hat
                    let mut h_mean = S::zero();
                    let mut hx_mean = S::zero();
                    for j in 0..n {
                        let xhat = (xr[j] - mean) * inv;
                        let h = gr[j] * gammav[j];
                        h_mean = h_mean + h;
                        hx_mean = hx_mean + h * xhat;
                        dgamma[j] = dgamma[j] + gr[j] * xhat;
                        dbeta[j] = dbeta[j] + gr[j];
                    }
                    h_mean = h_mean / nf;
                    hx_mean = hx_mean / nf;
                    for j in 0..n {
                        let xhat = (xr[j] - mean) * inv;
                        let h = gr[j] * gammav[j];
                        dx[i * n + j] = inv * (h - h_mean - xhat * hx_mean);
                    }
                }
                if nodes[xi].needs_grad {
                    accumulate(grads, xi, Tensor { shape: nodes[xi].value.shape().to_vec(), data: dx });
                }
                if nodes[gi].needs_grad {
                    accumulate(grads, gi, Tensor { shape: vec![n], data: dgamma });
                }
                if nodes[bi].needs_grad {
                    accumulate(grads, bi, Tensor { shape: vec![n], data: dbeta });
                }
            }),
        )
    }

    /// Elementwise mean of same-shaped tensors (temporal pooling, batch loss).
    pub fn mean_tensors(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Shape { op: "mean_tensors", detail: "empty input list".into() });
        }
        let shape = self.value(xs[0]).shape().to_vec();
        for &v in xs {
            if self.value(v).shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "mean_tensors",
                    detail: format!("{:?} vs {:?}", shape, self.value(v).shape()),
                });
            }
        }
        let k = lit::<S>(xs.len() as f64);
        let mut out = vec![S::zero(); self.value(xs[0]).numel()];
        for &v in xs {
            for (o, &x) in out.iter_mut().zip(self.value(v).data()) {
                *o = *o + x;
            }
        }
        for o in out.iter_mut() {
            *o = *o / k;
        }
        let parents: Vec<usize> = xs.iter().map(|v| v.0).collect();
        self.push(
            "mean_tensors",
            Tensor { shape, data: out },
            xs,
            Box::new(move |nodes, g, grads| {
                for &pid in &parents {
                    if nodes[pid].needs_grad {
                        accumulate(grads, pid, g.map(|v| v / k));
                    }
                }
            }),
        )
    }

    /// Gather rows of an embedding table by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Shape {
                op: "embedding",
                detail: format!("id {bad} out of range for table {:?}", self.value(table).shape()),
            });
        }
        if ids.is_empty() {
            return Err(Error::Shape { op: "embedding", detail: "empty id list".into() });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&self.value(table).data()[id * d..(id + 1) * d]);
        }
        let ids_owned = ids.to_vec();
        let ti = table.0;
        self.push(
            "embedding",
            Tensor::new(vec![ids.len(), d], out)?,
            &[table],
            Box::new(move |nodes, g, grads| {
                if nodes[ti].needs_grad {
                    let mut dt = vec![S::zero(); v * d];
                    for (i, &id) in ids_owned.iter().enumerate() {
                        let gr = &g.data()[i * d..(i + 1) * d];
                        let row = &mut dt[id * d..(id + 1) * d];
                        for (o, &gv) in row.iter_mut().zip(gr) {
                            *o = *o + gv;
                        }
                    }
                    accumulate(grads, ti, Tensor { shape: vec![v, d], data: dt });
                }
            }),
        )
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Shape { op: "concat_rows", detail: "empty input list".into() });
        }
        let (_, d) = self.value(xs[0]).dims2()?;
        let mut rows = 0;
        let mut sections = Vec::with_capacity(xs.len());
        for &v in xs {
            let (r, c) = self.value(v).dims2()?;
            if c != d {
                return Err(Error::Shape {
                    op: "concat_rows",
                    detail: format!("column mismatch: {:?} vs {:?}", self.value(xs[0]).shape(), self.value(v).shape()),
                });
            }
            sections.push((v.0, rows, r));
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * d);
        for &v in xs {
            out.extend_from_slice(self.value(v).data());
        }
        self.push(
            "concat_rows",
            Tensor::new(vec![rows, d], out)?,
            xs,
            Box::new(move |nodes, g, grads| {
                for &(pid, start, r) in &sections {
                    if nodes[pid].needs_grad {
                        let slice = g.data()[start * d..(start + r) * d].to_vec();
                        accumulate(grads, pid, Tensor { shape: nodes[pid].value.shape().to_vec(), data: slice });
                    }
                }
            }),
        )
    }

    /// Stack matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Shape { op: "concat_cols", detail: "empty input list".into() });
        }
        let (m, _) = self.value(xs[0]).dims2()?;
        let mut total = 0;
        let mut sections = Vec::with_capacity(xs.len());
        for &v in xs {
            let (r, c) = self.value(v).dims2()?;
            if r != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    detail: format!("row mismatch: {:?} vs {:?}", self.value(xs[0]).shape(), self.value(v).shape()),
                });
            }
            sections.push((v.0, total, c));
            total += c;
        }
        let mut out = vec![S::zero(); m * total];
        for &(pid, start, c) in &sections {
            let src = &self.nodes[pid].value;
            for i in 0..m {
                out[i * total + start..i * total + start + c].copy_from_slice(&src.data()[i * c..(i + 1) * c]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::new(vec![m, total], out)?,
            xs,
            Box::new(move |nodes, g, grads| {
                for &(pid, start, c) in &sections {
                    if nodes[pid].needs_grad {
                        let mut delta = vec![S::zero(); m * c];
                        for i in 0..m {
                            delta[i * c..(i + 1) * c]
                                .copy_from_slice(&g.data()[i * total + start..i * total + start + c]);
                        }
                        accumulate(grads, pid, Tensor { shape: nodes[pid].value.shape().to_vec(), data: delta });
                    }
                }
            }),
        )
    }

    /// Take a contiguous row range of a matrix.
    pub fn slice_rows(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if from >= to || to > m {
            return Err(Error::Shape {
                op: "slice_rows",
                detail: format!("range {from}..{to} out of bounds for shape {:?}", self.value(a).shape()),
            });
        }
        let out = self.value(a).data()[from * n..to * n].to_vec();
        let ai = a.0;
        self.push(
            "slice_rows",
            Tensor::new(vec![to - from, n], out)?,
            &[a],
            Box::new(move |nodes, g, grads| {
                if nodes[ai].needs_grad {
                    let mut delta = vec![S::zero(); m * n];
                    delta[from * n..to * n].copy_from_slice(g.data());
                    accumulate(grads, ai, Tensor { shape: vec![m, n], data: delta });
                }
            }),
        )
    }

    /// Take a contiguous column range of a matrix.
    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if from >= to || to > n {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("range {from}..{to} out of bounds for shape {:?}", self.value(a).shape()),
            });
        }
        let w = to - from;
        let mut out = vec![S::zero(); m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&self.value(a).data()[i * n + from..i * n + to]);
        }
        let ai = a.0;
        self.push(
            "slice_cols",
            Tensor::new(vec![m, w], out)?,
            &[a],
            Box::new(move |nodes, g, grads| {
                if nodes[ai].needs_grad {
                    let mut delta = vec![S::zero(); m * n];
                    for i in 0..m {
                        delta[i * n + from..i * n + to].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    accumulate(grads, ai, Tensor { shape: vec![m, n], data: delta });
                }
            }),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let total: S = self.value(a).data().iter().copied().sum();
        let ai = a.0;
        self.push(
            "sum_all",
            Tensor::scalar(total),
            &[a],
            Box::new(move |nodes, g, grads| {
                if nodes[ai].needs_grad {
                    let g0 = g.item();
                    accumulate(grads, ai, Tensor::full(nodes[ai].value.shape(), g0));
                }
            }),
        )
    }

    /// Mean cross-entropy over the rows where `mask` is true; `targets` and
    /// `mask` are aligned to logit rows. Masked-out rows contribute nothing.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (m, v) = self.value(logits).dims2()?;
        if targets.len() != m || mask.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!(
                    "logits {:?} vs targets len {} / mask len {}",
                    self.value(logits).shape(),
                    targets.len(),
                    mask.len()
                ),
            });
        }
        let n_masked = mask.iter().filter(|&&b| b).count();
        if n_masked == 0 {
            return Err(Error::Shape { op: "cross_entropy", detail: "all-false loss mask: no supervised positions".into() });
        }
        for (i, &t) in targets.iter().enumerate() {
            if mask[i] && t >= v {
                return Err(Error::Shape {
                    op: "cross_entropy",
                    detail: format!("target id {t} out of vocabulary {v}"),
                });
            }
        }
        let mut total = S::zero();
        for i in 0..m {
            if !mask[i] {
                continue;
            }
            let row = &self.value(logits).data()[i * v..(i + 1) * v];
            let mx = row.iter().fold(S::neg_infinity(), |acc, &x| acc.max(x));
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<S>().ln();
            total = total + lse - row[targets[i]];
        }
        let loss = total / lit::<S>(n_masked as f64);
        let li = logits.0;
        let targets_owned = targets.to_vec();
        let mask_owned = mask.to_vec();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |nodes, g, grads| {
                if nodes[li].needs_grad {
                    let g0 = g.item() / lit::<S>(n_masked as f64);
                    let lv = nodes[li].value.data();
                    let mut delta = vec![S::zero(); m * v];
                    for i in 0..m {
                        if !mask_owned[i] {
                            continue;
                        }
                        let row = &lv[i * v..(i + 1) * v];
                        let mx = row.iter().fold(S::neg_infinity(), |acc, &x| acc.max(x));
                        let sum: S = row.iter().map(|&x| (x - mx).exp()).sum();
                        for j in 0..v {
                            let p = (row[j] - mx).exp() / sum;
                            let ind = if j == targets_owned[i] { S::one() } else { S::zero() };
                            delta[i * v + j] = g0 * (p - ind);
                        }
                    }
                    accumulate(grads, li, Tensor { shape: vec![m, v], data: delta });
                }
            }),
        )
    }
}
