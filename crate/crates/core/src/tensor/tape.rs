use super::kernels::{self, Conv3dSpec, ConvGeom};
use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation selector for [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale(f32),
    Relu,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `b` is broadcast: element `i` of the output uses `b[i / inner]`.
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
        inner: usize,
    },
    Scale {
        a: usize,
        c: f32,
    },
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    Matmul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    },
    Conv3d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Gap {
        x: usize,
        channels: usize,
        spatial: usize,
    },
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedSoftmax {
        x: usize,
        keep: Vec<usize>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        offset: usize,
        channels: usize,
        positions: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat {
        a: usize,
        b: usize,
        outer: usize,
        a_chunk: usize,
        b_chunk: usize,
    },
    Charbonnier {
        y: usize,
        y_hat: usize,
        eps: f32,
    },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    L2NormalizeRows {
        a: usize,
        rows: usize,
        cols: usize,
        norms: Vec<f64>,
        eps: f64,
    },
    Index {
        a: usize,
        i: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Full-precision value for scalar reductions.
    exact: Option<f64>,
}

/// Append-only record of a forward computation.
///
/// Nodes are created in topological order, so the backward sweep simply
/// walks the node list in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn gelu_parts(x: f32) -> (f32, f32) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let x = x as f64;
    let u = K * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * A * x * x);
    (y as f32, dy as f32)
}

fn check_finite(data: &[f32], what: &str) -> Result<()> {
    if let Some(i) = data.iter().position(|v| v.is_nan()) {
        return Err(Error::Numeric(format!("NaN at element {i} of {what} input")));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let needs_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => parents.iter().any(|&p| self.nodes[p].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            exact: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// backward populates its gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, &[])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    /// Scalar value of a single-element node, in full precision when the
    /// node is a reduction.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        match n.exact {
            Some(x) => Ok(x),
            None => Ok(n.value.item()? as f64),
        }
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.node(v).value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Clears the gradients of every leaf.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || {
            b.ok_or_else(|| Error::Usage(format!("{op:?} needs a second operand")))
        };
        match op {
            ElementwiseOp::Add => self.binary(BinKind::Add, a, need_b()?),
            ElementwiseOp::Sub => self.binary(BinKind::Sub, a, need_b()?),
            ElementwiseOp::Mul => self.binary(BinKind::Mul, a, need_b()?),
            ElementwiseOp::Scale(c) => Ok(self.scale(a, c)),
            ElementwiseOp::Relu => Ok(self.relu(a)),
            ElementwiseOp::Gelu => Ok(self.gelu(a)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    /// Broadcast rule: `b` has `a`'s shape, a single element, or a shape
    /// that is a leading prefix of `a`'s shape.
    fn broadcast_inner(a: &[usize], b: &[usize]) -> Result<usize> {
        let (na, nb): (usize, usize) = (a.iter().product(), b.iter().product());
        if a == b {
            Ok(1)
        } else if nb == 1 {
            Ok(na.max(1))
        } else if b.len() < a.len() && a[..b.len()] == *b {
            Ok(a[b.len()..].iter().product())
        } else {
            dim_err(format!("shape mismatch: {a:?} vs {b:?}"))
        }
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a).value, &self.node(b).value);
        let inner = Self::broadcast_inner(ta.shape(), tb.shape())?;
        let (ad, bd) = (ta.data(), tb.data());
        let data: Vec<f32> = match kind {
            BinKind::Add => ad.iter().enumerate().map(|(i, &x)| x + bd[i / inner]).collect(),
            BinKind::Sub => ad.iter().enumerate().map(|(i, &x)| x - bd[i / inner]).collect(),
            BinKind::Mul => ad.iter().enumerate().map(|(i, &x)| x * bd[i / inner]).collect(),
        };
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(
            out,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                inner,
            },
            &[a.0, b.0],
        ))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let t = &self.node(a).value;
        let data = t.data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        self.push(out, Op::Scale { a: a.0, c }, &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = &self.node(a).value;
        let data = t
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        self.push(out, Op::Relu(a.0), &[a.0])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = &self.node(a).value;
        let data = t.data().iter().map(|&x| gelu_parts(x).0).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        self.push(out, Op::Gelu(a.0), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = &self.node(a).value;
        let data = t.data().iter().map(|&x| x.exp()).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        self.push(out, Op::Exp(a.0), &[a.0])
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// Matrix product of `a[.., m, k]` with `b[k, n]` (broadcast over the
    /// batch) or `b[B, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || !(sb.len() == 2 || sb.len() == 3) {
            return dim_err(format!("matmul needs matrices, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let b_batched = sb.len() == 3;
        if kb != k {
            return dim_err(format!(
                "matmul inner dimensions differ: {sa:?} · {sb:?}"
            ));
        }
        if b_batched && sb[0] != batch {
            return dim_err(format!("matmul batch sizes differ: {sa:?} · {sb:?}"));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(batch * m * n);
        for bi in 0..batch {
            let bm = if b_batched { &bd[bi * k * n..(bi + 1) * k * n] } else { bd };
            data.extend(kernels::gemm_nn(&ad[bi * m * k..(bi + 1) * m * k], bm, m, k, n));
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Matmul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                b_batched,
            },
            &[a.0, b.0],
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a).value;
        let (rows, cols) = match t.shape() {
            [r, c] => (*r, *c),
            s => return dim_err(format!("transpose needs a matrix, got {s:?}")),
        };
        let d = t.data();
        let mut data = vec![0f32; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = d[i * cols + j];
            }
        }
        let out = Tensor::new(&[cols, rows], data)?;
        Ok(self.push(out, Op::Transpose { a: a.0, rows, cols }, &[a.0]))
    }

    /// Divides each row of a matrix by its L2 norm (floored at `eps`).
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = &self.node(a).value;
        let (rows, cols) = match t.shape() {
            [r, c] => (*r, *c),
            s => return dim_err(format!("row normalization needs a matrix, got {s:?}")),
        };
        let d = t.data();
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &d[r * cols..(r + 1) * cols];
            let nrm = kernels::dot(row, row).sqrt().max(eps);
            norms.push(nrm);
            data.extend(row.iter().map(|&x| (x as f64 / nrm) as f32));
        }
        let out = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(
            out,
            Op::L2NormalizeRows {
                a: a.0,
                rows,
                cols,
                norms,
                eps,
            },
            &[a.0],
        ))
    }

    // ── convolution and pooling ─────────────────────────────────────

    /// Cross-correlation of `x[C_in, D, H, W]` with
    /// `weight[C_out, C_in/groups, kD, kH, kW]`.
    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: Conv3dSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(weight), spec)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return dim_err(format!(
                    "conv3d bias must be [{}], got {:?}",
                    geom.cout,
                    self.shape(b)
                ));
            }
        }
        let data = kernels::conv3d_forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let [d, h, w] = geom.odims;
        let out = Tensor::new(&[geom.cout, d, h, w], data)?;
        let mut parents = vec![x.0, weight.0];
        parents.extend(bias.map(|b| b.0));
        Ok(self.push(
            out,
            Op::Conv3d {
                x: x.0,
                w: weight.0,
                bias: bias.map(|b| b.0),
                geom,
            },
            &parents,
        ))
    }

    /// Global average pooling of `x[C, ...]` over everything but the
    /// leading channel axis.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x).value;
        if t.ndim() < 2 {
            return dim_err(format!("gap needs [C, spatial..], got {:?}", t.shape()));
        }
        let channels = t.shape()[0];
        let spatial: usize = t.shape()[1..].iter().product();
        if spatial == 0 {
            return dim_err(format!("gap over empty spatial extent {:?}", t.shape()));
        }
        let d = t.data();
        let data = (0..channels)
            .map(|c| (kernels::sum(&d[c * spatial..(c + 1) * spatial]) / spatial as f64) as f32)
            .collect();
        let out = Tensor::new(&[channels], data)?;
        Ok(self.push(
            out,
            Op::Gap {
                x: x.0,
                channels,
                spatial,
            },
            &[x.0],
        ))
    }

    // ── normalization ───────────────────────────────────────────────

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.node(x).value;
        let shape = t.shape();
        if axis >= shape.len() {
            return dim_err(format!("softmax axis {axis} out of range for {shape:?}"));
        }
        check_finite(t.data(), "softmax")?;
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let d = t.data();
        let mut data = vec![0f32; d.len()];
        let mut buf = vec![0f64; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| d[at(l)]).fold(f32::NEG_INFINITY, f32::max) as f64;
                let mut z = 0f64;
                for (l, b) in buf.iter_mut().enumerate() {
                    *b = (d[at(l)] as f64 - max).exp();
                    z += *b;
                }
                for (l, b) in buf.iter().enumerate() {
                    data[at(l)] = (b / z) as f32;
                }
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Softmax {
                x: x.0,
                outer,
                len,
                inner,
            },
            &[x.0],
        ))
    }

    /// Softmax of a vector restricted to the `keep` positions; every other
    /// position is exactly zero.
    pub fn masked_softmax(&mut self, x: Var, keep: &[usize]) -> Result<Var> {
        let t = &self.node(x).value;
        if t.ndim() != 1 {
            return dim_err(format!("masked softmax needs a vector, got {:?}", t.shape()));
        }
        if keep.is_empty() || keep.iter().any(|&i| i >= t.numel()) {
            return Err(Error::Usage(format!(
                "invalid keep set {keep:?} for length {}",
                t.numel()
            )));
        }
        check_finite(t.data(), "softmax")?;
        let d = t.data();
        let max = keep.iter().map(|&i| d[i]).fold(f32::NEG_INFINITY, f32::max) as f64;
        let e: Vec<f64> = keep.iter().map(|&i| (d[i] as f64 - max).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut data = vec![0f32; d.len()];
        for (&i, &ei) in keep.iter().zip(&e) {
            data[i] = (ei / z) as f32;
        }
        let out = Tensor::new(t.shape(), data)?;
        Ok(self.push(
            out,
            Op::MaskedSoftmax {
                x: x.0,
                keep: keep.to_vec(),
            },
            &[x.0],
        ))
    }

    /// Normalizes `x[C, ...]` over the channel axis at every position,
    /// then applies the per-channel affine `gain`, `offset`.
    pub fn layernorm(&mut self, x: Var, gain: Var, offset: Var, eps: f32) -> Result<Var> {
        let t = &self.node(x).value;
        if t.ndim() < 1 {
            return dim_err("layernorm needs a channel axis");
        }
        let channels = t.shape()[0];
        if self.shape(gain) != [channels] || self.shape(offset) != [channels] {
            return dim_err(format!(
                "layernorm affine must be [{channels}], got {:?} and {:?}",
                self.shape(gain),
                self.shape(offset)
            ));
        }
        let positions = t.numel() / channels.max(1);
        let d = t.data();
        let mut mean = vec![0f64; positions];
        for c in 0..channels {
            for (m, &v) in mean.iter_mut().zip(&d[c * positions..(c + 1) * positions]) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= channels as f64);
        let mut var = vec![0f64; positions];
        for c in 0..channels {
            let row = &d[c * positions..(c + 1) * positions];
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let dv = v as f64 - m;
                *s += dv * dv;
            }
        }
        let rstd: Vec<f64> = var
            .iter()
            .map(|&s| 1.0 / (s / channels as f64 + eps as f64).sqrt())
            .collect();
        let (gd, od) = (self.value(gain).data(), self.value(offset).data());
        let mut data = vec![0f32; d.len()];
        for c in 0..channels {
            let (gc, oc) = (gd[c] as f64, od[c] as f64);
            let row = &d[c * positions..(c + 1) * positions];
            let dst = &mut data[c * positions..(c + 1) * positions];
            for p in 0..positions {
                dst[p] = ((row[p] as f64 - mean[p]) * rstd[p] * gc + oc) as f32;
            }
        }
        let out = Tensor::new(t.shape(), data)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                offset: offset.0,
                channels,
                positions,
                mean,
                rstd,
            },
            &[x.0, gain.0, offset.0],
        ))
    }

    // ── structure ───────────────────────────────────────────────────

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || axis >= sa.len() {
            return dim_err(format!("cannot concat {sa:?} and {sb:?} along axis {axis}"));
        }
        for ax in 0..sa.len() {
            if ax != axis && sa[ax] != sb[ax] {
                return dim_err(format!(
                    "concat along axis {axis} needs equal other dims: {sa:?} vs {sb:?}"
                ));
            }
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (a_chunk, b_chunk) = (sa[axis] * inner, sb[axis] * inner);
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ad.len() + bd.len());
        for o in 0..outer {
            data.extend_from_slice(&ad[o * a_chunk..(o + 1) * a_chunk]);
            data.extend_from_slice(&bd[o * b_chunk..(o + 1) * b_chunk]);
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                a: a.0,
                b: b.0,
                outer,
                a_chunk,
                b_chunk,
            },
            &[a.0, b.0],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a.0), &[a.0]))
    }

    /// Element `i` of the flattened tensor as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = &self.node(a).value;
        if i >= t.numel() {
            return dim_err(format!("index {i} out of range for shape {:?}", t.shape()));
        }
        let out = Tensor::scalar(t.data()[i]);
        Ok(self.push(out, Op::Index { a: a.0, i }, &[a.0]))
    }

    // ── reductions ──────────────────────────────────────────────────

    fn push_scalar(&mut self, exact: f64, op: Op, parents: &[usize]) -> Var {
        let v = self.push(Tensor::scalar(exact as f32), op, parents);
        self.nodes[v.0].exact = Some(exact);
        v
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = kernels::sum(self.value(a).data());
        self.push_scalar(s, Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return dim_err("mean of an empty tensor");
        }
        let s = kernels::sum(t.data()) / t.numel() as f64;
        Ok(self.push_scalar(s, Op::Mean(a.0), &[a.0]))
    }

    /// Mean over voxels of `sqrt((y - y_hat)^2 + eps^2)`.
    pub fn charbonnier(&mut self, y: Var, y_hat: Var, eps: f32) -> Result<Var> {
        let (ty, th) = (self.value(y), self.value(y_hat));
        if ty.shape() != th.shape() {
            return dim_err(format!(
                "charbonnier shape mismatch: {:?} vs {:?}",
                ty.shape(),
                th.shape()
            ));
        }
        if ty.numel() == 0 {
            return dim_err("charbonnier of empty tensors");
        }
        let e2 = (eps as f64) * (eps as f64);
        let mut acc = [0f64; 4];
        let (yd, hd) = (ty.data(), th.data());
        for (i, (&a, &b)) in yd.iter().zip(hd).enumerate() {
            let r = a as f64 - b as f64;
            acc[i % 4] += (r * r + e2).sqrt();
        }
        let total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        let loss = total / yd.len() as f64;
        Ok(self.push_scalar(
            loss,
            Op::Charbonnier {
                y: y.0,
                y_hat: y_hat.0,
                eps,
            },
            &[y.0, y_hat.0],
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Gradients are added into every
    /// reachable gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.node(loss).value;
        if lt.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f32>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f32>)> = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
            } else {
                self.backward_node(i, &g, &mut adj);
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g)?;
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f32], adj: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let val = |p: usize| nodes[p].value.data();
        // Adds into the adjoint of `p`, allocating it on first touch.
        let mut add_to = |p: usize, f: &mut dyn FnMut(&mut [f32])| {
            if !nodes[p].needs_grad {
                return;
            }
            let slot = adj[p].get_or_insert_with(|| vec![0.0; nodes[p].value.numel()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, inner } => {
                let (a, b, inner) = (*a, *b, *inner);
                let (ad, bd) = (val(a), val(b));
                match kind {
                    BinKind::Add | BinKind::Sub => {
                        add_to(a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &x)| *s += x));
                        let sign = if *kind == BinKind::Add { 1.0 } else { -1.0 };
                        add_to(b, &mut |s| {
                            for (j, sj) in s.iter_mut().enumerate() {
                                *sj += (sign * kernels::sum(&g[j * inner..(j + 1) * inner])) as f32;
                            }
                        });
                    }
                    BinKind::Mul => {
                        add_to(a, &mut |s| {
                            for (idx, sv) in s.iter_mut().enumerate() {
                                *sv += g[idx] * bd[idx / inner];
                            }
                        });
                        add_to(b, &mut |s| {
                            for (j, sj) in s.iter_mut().enumerate() {
                                let r = j * inner..(j + 1) * inner;
                                *sj += kernels::dot(&g[r.clone()], &ad[r]) as f32;
                            }
                        });
                    }
                }
            }
            Op::Scale { a, c } => {
                add_to(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &x)| *s += c * x));
            }
            Op::Relu(a) => {
                let ad = val(*a);
                add_to(*a, &mut |s| {
                    for ((sv, &x), &gv) in s.iter_mut().zip(ad).zip(g) {
                        if x > 0.0 {
                            *sv += gv;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let ad = val(*a);
                add_to(*a, &mut |s| {
                    for ((sv, &x), &gv) in s.iter_mut().zip(ad).zip(g) {
                        *sv += gv * gelu_parts(x).1;
                    }
                });
            }
            Op::Exp(a) => {
                let out = nodes[i].value.data();
                add_to(*a, &mut |s| {
                    for ((sv, &y), &gv) in s.iter_mut().zip(out).zip(g) {
                        *sv += gv * y;
                    }
                });
            }
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
            } => {
                let (a, b, batch, m, k, n, bb) = (*a, *b, *batch, *m, *k, *n, *b_batched);
                let (ad, bd) = (val(a), val(b));
                let bmat = |bi: usize| if bb { &bd[bi * k * n..(bi + 1) * k * n] } else { bd };
                add_to(a, &mut |s| {
                    for bi in 0..batch {
                        let ga = kernels::gemm_nt(&g[bi * m * n..(bi + 1) * m * n], bmat(bi), m, n, k);
                        s[bi * m * k..(bi + 1) * m * k]
                            .iter_mut()
                            .zip(ga)
                            .for_each(|(s, x)| *s += x);
                    }
                });
                add_to(b, &mut |s| {
                    for bi in 0..batch {
                        let gb = kernels::gemm_tn(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            k,
                            m,
                            n,
                        );
                        let dst = if bb { &mut s[bi * k * n..(bi + 1) * k * n] } else { &mut *s };
                        dst.iter_mut().zip(gb).for_each(|(s, x)| *s += x);
                    }
                });
            }
            Op::Conv3d { x, w, bias, geom } => {
                let (xd, wd) = (val(*x), val(*w));
                add_to(*x, &mut |s| {
                    let gx = kernels::conv3d_grad_input(g, wd, geom);
                    s.iter_mut().zip(gx).for_each(|(s, v)| *s += v);
                });
                add_to(*w, &mut |s| {
                    let gw = kernels::conv3d_grad_weight(g, xd, geom);
                    s.iter_mut().zip(gw).for_each(|(s, v)| *s += v);
                });
                if let Some(b) = bias {
                    add_to(*b, &mut |s| {
                        let gb = kernels::conv3d_grad_bias(g, geom);
                        s.iter_mut().zip(gb).for_each(|(s, v)| *s += v);
                    });
                }
            }
            Op::Gap {
                x,
                channels,
                spatial,
            } => {
                let (channels, spatial) = (*channels, *spatial);
                add_to(*x, &mut |s| {
                    for c in 0..channels {
                        let share = g[c] / spatial as f32;
                        s[c * spatial..(c + 1) * spatial]
                            .iter_mut()
                            .for_each(|v| *v += share);
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let y = nodes[i].value.data();
                add_to(*x, &mut |s| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + ii;
                            let dotp: f64 = (0..len).map(|l| g[at(l)] as f64 * y[at(l)] as f64).sum();
                            for l in 0..len {
                                let j = at(l);
                                s[j] += (y[j] as f64 * (g[j] as f64 - dotp)) as f32;
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x, keep } => {
                let y = nodes[i].value.data();
                add_to(*x, &mut |s| {
                    let dotp: f64 = keep.iter().map(|&j| g[j] as f64 * y[j] as f64).sum();
                    for &j in keep {
                        s[j] += (y[j] as f64 * (g[j] as f64 - dotp)) as f32;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                channels,
                positions,
                mean,
                rstd,
            } => {
                let (channels, positions) = (*channels, *positions);
                let xd = val(*x);
                let gd = val(*gain);
                let xhat = |c: usize, p: usize| (xd[c * positions + p] as f64 - mean[p]) * rstd[p];
                add_to(*x, &mut |s| {
                    // mean over channels of g*gain and of g*gain*xhat
                    let mut m1 = vec![0f64; positions];
                    let mut m2 = vec![0f64; positions];
                    for c in 0..channels {
                        let gc = gd[c] as f64;
                        for p in 0..positions {
                            let gh = g[c * positions + p] as f64 * gc;
                            m1[p] += gh;
                            m2[p] += gh * xhat(c, p);
                        }
                    }
                    let inv_c = 1.0 / channels as f64;
                    for c in 0..channels {
                        let gc = gd[c] as f64;
                        for p in 0..positions {
                            let gh = g[c * positions + p] as f64 * gc;
                            let v = rstd[p] * (gh - m1[p] * inv_c - xhat(c, p) * m2[p] * inv_c);
                            s[c * positions + p] += v as f32;
                        }
                    }
                });
                add_to(*gain, &mut |s| {
                    for (c, sc) in s.iter_mut().enumerate() {
                        let t: f64 = (0..positions)
                            .map(|p| g[c * positions + p] as f64 * xhat(c, p))
                            .sum();
                        *sc += t as f32;
                    }
                });
                add_to(*offset, &mut |s| {
                    for (c, sc) in s.iter_mut().enumerate() {
                        *sc += kernels::sum(&g[c * positions..(c + 1) * positions]) as f32;
                    }
                });
            }
            Op::Concat {
                a,
                b,
                outer,
                a_chunk,
                b_chunk,
            } => {
                let (outer, ac, bc) = (*outer, *a_chunk, *b_chunk);
                add_to(*a, &mut |s| {
                    for o in 0..outer {
                        let src = &g[o * (ac + bc)..o * (ac + bc) + ac];
                        s[o * ac..(o + 1) * ac].iter_mut().zip(src).for_each(|(s, &x)| *s += x);
                    }
                });
                add_to(*b, &mut |s| {
                    for o in 0..outer {
                        let src = &g[o * (ac + bc) + ac..(o + 1) * (ac + bc)];
                        s[o * bc..(o + 1) * bc].iter_mut().zip(src).for_each(|(s, &x)| *s += x);
                    }
                });
            }
            Op::Charbonnier { y, y_hat, eps } => {
                let (yd, hd) = (val(*y), val(*y_hat));
                let e2 = (*eps as f64) * (*eps as f64);
                let scale = g[0] as f64 / yd.len() as f64;
                let dr = |j: usize| {
                    let r = yd[j] as f64 - hd[j] as f64;
                    scale * r / (r * r + e2).sqrt()
                };
                add_to(*y, &mut |s| {
                    for (j, sv) in s.iter_mut().enumerate() {
                        *sv += dr(j) as f32;
                    }
                });
                add_to(*y_hat, &mut |s| {
                    for (j, sv) in s.iter_mut().enumerate() {
                        *sv -= dr(j) as f32;
                    }
                });
            }
            Op::Sum(a) => add_to(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => {
                let share = g[0] / nodes[*a].value.numel() as f32;
                add_to(*a, &mut |s| s.iter_mut().for_each(|v| *v += share));
            }
            Op::Reshape(a) => add_to(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &x)| *s += x)),
            Op::Transpose { a, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                add_to(*a, &mut |s| {
                    for r in 0..rows {
                        for c in 0..cols {
                            s[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            Op::L2NormalizeRows {
                a,
                rows,
                cols,
                norms,
                eps,
            } => {
                let (rows, cols) = (*rows, *cols);
                let ad = val(*a);
                let y = nodes[i].value.data();
                add_to(*a, &mut |s| {
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let nrm = norms[r];
                        if nrm <= *eps {
                            // norm is clamped: the map is linear there
                            for j in span {
                                s[j] += (g[j] as f64 / nrm) as f32;
                            }
                            continue;
                        }
                        let yg = kernels::dot(&y[span.clone()], &g[span.clone()]);
                        for j in span {
                            let yj = ad[j] as f64 / nrm;
                            s[j] += ((g[j] as f64 - yj * yg) / nrm) as f32;
                        }
                    }
                });
            }
            Op::Index { a, i: at } => {
                let at = *at;
                add_to(*a, &mut |s| s[at] += g[0]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape, data: &[f32]) -> Var {
        tape.leaf(Tensor::new(&[data.len()], data.to_vec()).unwrap().requiring_grad())
    }

    #[test]
    fn relu_zeroes_negatives() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[-1.0, 0.5, 2.0]);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.5, 2.0]);
        assert_eq!(tape.value(y).data()[0].to_bits(), 0f32.to_bits());
    }

    #[test]
    fn add_zero_is_bitwise_identity() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.25, -3.5e-7, 7.0]);
        let z = tape.constant(Tensor::zeros(&[3]));
        let y = tape.add(x, z).unwrap();
        assert!(tape.value(y).bitwise_eq(tape.value(x)));
    }

    #[test]
    fn binary_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn prefix_broadcast_adds_per_channel() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap().requiring_grad());
        let b = tape.leaf(Tensor::new(&[2], vec![10., 20.]).unwrap().requiring_grad());
        let y = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[10., 20., 60., 80.]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[10., 10., 20., 20.]);
        assert_eq!(tape.grad(b).unwrap(), &[3., 7.]);
    }

    #[test]
    fn matmul_hand_example_and_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 1], vec![1., 1.]).unwrap());
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 1]);
        assert_eq!(tape.value(y).data(), &[3., 7.]);

        let eye = tape.constant(
            Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        let bm: Vec<f32> = (0..9).map(|i| i as f32 * 0.37 - 1.1).collect();
        let b = tape.constant(Tensor::new(&[3, 3], bm.clone()).unwrap());
        let y = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(y).data(), bm.as_slice());

        let bad = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, bad).map(|_| ()), Ok(())));
        assert!(matches!(tape.matmul(bad, a), Err(Error::Dimension(_))));
    }

    #[test]
    fn batched_matmul_broadcasts_rhs() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(&[2, 1, 2], vec![1., 2., 3., 4.]).unwrap().requiring_grad());
        let b = tape.leaf(Tensor::new(&[2, 1], vec![1., -1.]).unwrap().requiring_grad());
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 1, 1]);
        assert_eq!(tape.value(y).data(), &[-1., -1.]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[4., 6.]);
        assert_eq!(tape.grad(a).unwrap(), &[1., -1., 1., -1.]);
    }

    #[test]
    fn gap_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 2, 2, 2], 3.5));
        let g = tape.gap(x).unwrap();
        assert_eq!(tape.value(g).data(), &[3.5, 3.5]);
        let x = tape.constant(Tensor::new(&[1, 2, 1, 1], vec![0., 2.]).unwrap());
        let g = tape.gap(x).unwrap();
        assert_eq!(tape.value(g).data(), &[1.0]);
        let empty = tape.constant(Tensor::zeros(&[2, 0, 2, 2]));
        assert!(matches!(tape.gap(empty), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = tape.constant(Tensor::new(&[2], vec![1000., 0.]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[0], 1.0);
        assert!(d[1] >= 0.0 && d[1] < 1e-30);
        let x = tape.constant(Tensor::new(&[2], vec![f32::NAN, 0.]).unwrap());
        assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 3], vec![0., 1., 2., 5., 5., 5.]).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + d[1] + d[2] - 1.0).abs() < 1e-6);
        assert!((d[3] - 1.0 / 3.0).abs() < 1e-7);
        let y0 = tape.softmax(x, 0).unwrap();
        let d0 = tape.value(y0).data();
        assert!((d0[0] + d0[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn masked_softmax_zeroes_dropped_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3], vec![0.1, 0.3, 0.2]).unwrap());
        let y = tape.masked_softmax(x, &[1, 2]).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[0].to_bits(), 0f32.to_bits());
        let want = 0.3f64.exp() / (0.3f64.exp() + 0.2f64.exp());
        assert!((d[1] as f64 - want).abs() < 1e-6);
        assert!((d[1] + d[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layernorm_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 3], 2.5));
        let gn = tape.constant(Tensor::full(&[4], 1.0));
        let of = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layernorm(x, gn, of, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let x = tape.constant(Tensor::new(&[2, 2], vec![1., 1., -1., -1.]).unwrap());
        let gn = tape.constant(Tensor::full(&[2], 1.0));
        let of = tape.constant(Tensor::zeros(&[2]));
        let y = tape.layernorm(x, gn, of, 1e-5).unwrap();
        for (a, b) in tape.value(y).data().iter().zip([1., 1., -1., -1.]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn concat_examples() {
        let mut tape = Tape::new();
        let a = vec_leaf(&mut tape, &[1., 2.]);
        let b = vec_leaf(&mut tape, &[3.]);
        let c = tape.concat(a, b, 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3.]);
        let e = tape.constant(Tensor::zeros(&[0]));
        let c2 = tape.concat(a, e, 0).unwrap();
        assert!(tape.value(c2).bitwise_eq(tape.value(a)));

        // upstream gradient splits into exact slices
        let w = tape.constant(Tensor::new(&[3], vec![5., 6., 7.]).unwrap());
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[5., 6.]);
        assert_eq!(tape.grad(b).unwrap(), &[7.]);

        let m = tape.constant(Tensor::zeros(&[2, 2]));
        let n = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(tape.concat(m, n, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn charbonnier_examples() {
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::new(&[2, 2], vec![0.3, -1.0, 2.0, 0.0]).unwrap());
        let l = tape.charbonnier(y, y, 1e-3).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 1e-3);

        let y = tape.constant(Tensor::full(&[5], 3e-3));
        let h = tape.constant(Tensor::zeros(&[5]));
        let l = tape.charbonnier(y, h, 4e-3).unwrap();
        assert!((tape.scalar(l).unwrap() - 5e-3).abs() < 1e-9);
        let bad = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(tape.charbonnier(y, bad, 1e-3), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, -2.0, 0.5]);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, -2.0, 0.5]);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_accumulates() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn unreachable_leaves_untouched() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0]);
        let y = vec_leaf(&mut tape, &[2.0]);
        let s = tape.sum(x);
        let _unused = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(y).is_none());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2], 1.0).requiring_grad());
        assert!(!tape.requires_grad(x));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
    }
}
