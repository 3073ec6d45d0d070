//! Dense `f64` tensors and a reverse-mode tape.
//!
//! A [`Tape`] records every primitive as a node holding its value and the
//! indices of its parents. Nodes are appended in evaluation order, so the
//! node list is already topologically sorted and [`Tape::gradients`] only has
//! to walk it backwards once.
//!
//! There is no implicit broadcasting. Ops that combine a tensor with a
//! smaller one ([`Tape::add_trailing`], [`Tape::linear`], ...) name the
//! broadcast in their signature.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Number of elements implied by `shape` (1 for a scalar).
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major tensor with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the accumulator, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Element at a multi-index.
    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, d) in idx.iter().zip(&self.shape) {
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddTrailing(Var, Var),
    MulTrailing(Var, Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        axis: usize,
    },
    AvgPool2 {
        x: Var,
        axis: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    NormalizeAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    Contract {
        a: Var,
        x: Var,
        axis: usize,
    },
    WeightedSum {
        terms: Vec<(usize, Var)>,
        w: Var,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)).take(m) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Output positions `lo..hi` whose tap `k` reads inside the sequence.
fn conv_rows(k: usize, pad: usize, len: usize) -> Option<(usize, usize)> {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(len);
    (lo < hi).then_some((lo, hi))
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn gemm_a_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    for (grow, orow) in g.chunks_exact(n).zip(out.chunks_exact_mut(k)).take(m) {
        for (o, brow) in orow.iter_mut().zip(b.chunks_exact(n)) {
            *o += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn gemm_at_b_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    for (arow, grow) in a.chunks_exact(k).zip(g.chunks_exact(n)).take(m) {
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(n)) {
            if av == 0.0 {
                continue;
            }
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Append-only record of a forward computation.
///
/// A tape is single-writer; build one per training step and drop it after
/// the backward sweep.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Scalar value of a rank-0 (or single element) node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf holding a copy of `t`; gradients flow to it when
    /// `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            data: t.data.clone(),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape,
            data: t.data,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    /// Records a parameter leaf linked back to `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape.clone(),
            data: t.data.clone(),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, op, &[a, b])
    }

    fn map(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let data = self.nodes[x.0].data.iter().map(|v| f(*v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, op, &[x])
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let shape = &self.nodes[x.0].shape;
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op,
                axis,
                shape: shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(Op::Scale(x, s), x, |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.map(Op::AddScalar(x), x, |v| v + s)
    }

    fn trailing_len(&self, op: &'static str, x: Var, b: Var) -> Result<usize> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[b.0].shape);
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != sb[..] {
            return Err(Error::shape(op, sx, sb));
        }
        Ok(numel(sb))
    }

    /// `x + b` where `b` matches the trailing dimensions of `x`.
    pub fn add_trailing(&mut self, x: Var, b: Var) -> Result<Var> {
        let len = self.trailing_len("add_trailing", x, b)?;
        let bd = &self.nodes[b.0].data;
        let data = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % len])
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, data, Op::AddTrailing(x, b), &[x, b]))
    }

    /// `x * b` elementwise where `b` matches the trailing dimensions of `x`.
    pub fn mul_trailing(&mut self, x: Var, b: Var) -> Result<Var> {
        let len = self.trailing_len("mul_trailing", x, b)?;
        let bd = &self.nodes[b.0].data;
        let data = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * bd[i % len])
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, data, Op::MulTrailing(x, b), &[x, b]))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched matrix product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        for i in 0..bs {
            gemm_acc(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.push(vec![bs, m, n], out, Op::Bmm(a, b), &[a, b]))
    }

    /// Affine map over the last axis: `x[..., in] * w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(Error::shape("linear", sx, sw));
        }
        let (fin, fout) = (sw[0], sw[1]);
        if let Some(b) = b {
            let sb = &self.nodes[b.0].shape;
            if sb[..] != [fout] {
                return Err(Error::shape("linear", sw, sb));
            }
        }
        let rows = self.nodes[x.0].data.len() / fin;
        let mut out = match b {
            Some(b) => {
                let bd = &self.nodes[b.0].data;
                let mut o = Vec::with_capacity(rows * fout);
                for _ in 0..rows {
                    o.extend_from_slice(bd);
                }
                o
            }
            None => vec![0.0; rows * fout],
        };
        gemm_acc(&self.nodes[x.0].data, &self.nodes[w.0].data, &mut out, rows, fin, fout);
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = fout;
        let parents: Vec<Var> = core::iter::once(x).chain(Some(w)).chain(b).collect();
        Ok(self.push(shape, out, Op::Linear { x, w, b }, &parents))
    }

    /// 1-D convolution along `axis` with channels on the last axis.
    ///
    /// `w` is `[kernel, c_in, c_out]` with an odd kernel; inputs are zero
    /// padded symmetrically so the convolved length is preserved.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, axis: usize) -> Result<Var> {
        self.check_axis("conv1d", x, axis)?;
        let (sx, sw, sb) = (
            &self.nodes[x.0].shape,
            &self.nodes[w.0].shape,
            &self.nodes[b.0].shape,
        );
        let rank = sx.len();
        if axis + 1 >= rank {
            return Err(Error::InvalidAxis {
                op: "conv1d",
                axis,
                shape: sx.clone(),
            });
        }
        let cin = sx[rank - 1];
        if sw.len() != 3 || sw[0] % 2 == 0 || sw[1] != cin || sb[..] != [sw[2]] {
            return Err(Error::shape("conv1d", sx, sw));
        }
        let (kernel, cout) = (sw[0], sw[2]);
        let pad = kernel / 2;
        let outer: usize = sx[..axis].iter().product();
        let len = sx[axis];
        let mid: usize = sx[axis + 1..rank - 1].iter().product();
        let (xd, wd, bd) = (
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
        );
        let mut out = vec![0.0; outer * len * mid * cout];
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bd);
        }
        for o in 0..outer {
            for k in 0..kernel {
                let Some((lo, hi)) = conv_rows(k, pad, len) else { continue };
                let src = lo + k - pad;
                let rows = (hi - lo) * mid;
                let xs = (o * len + src) * mid * cin;
                let os = (o * len + lo) * mid * cout;
                gemm_acc(
                    &xd[xs..xs + rows * cin],
                    &wd[k * cin * cout..(k + 1) * cin * cout],
                    &mut out[os..os + rows * cout],
                    rows,
                    cin,
                    cout,
                );
            }
        }
        let mut shape = sx.clone();
        shape[rank - 1] = cout;
        Ok(self.push(shape, out, Op::Conv1d { x, w, b, axis }, &[x, w, b]))
    }

    /// Average pooling with window 2 and stride 2 along `axis`.
    pub fn avg_pool2(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("avg_pool2", x, axis)?;
        let sx = self.nodes[x.0].shape.clone();
        let (outer, len, inner) = split_axis(&sx, axis);
        if len % 2 != 0 {
            return Err(Error::InvalidAxis {
                op: "avg_pool2",
                axis,
                shape: sx,
            });
        }
        let half = len / 2;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; outer * half * inner];
        for o in 0..outer {
            for l in 0..half {
                for i in 0..inner {
                    let a = xd[(o * len + 2 * l) * inner + i];
                    let b = xd[(o * len + 2 * l + 1) * inner + i];
                    out[(o * half + l) * inner + i] = 0.5 * (a + b);
                }
            }
        }
        let mut shape = sx;
        shape[axis] = half;
        Ok(self.push(shape, out, Op::AvgPool2 { x, axis }, &[x]))
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat", &[], &[]))?;
        self.check_axis("concat", first, axis)?;
        let base = self.nodes[first.0].shape.clone();
        let mut total = 0;
        for v in xs {
            let s = &self.nodes[v.0].shape;
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in xs {
                let n = &self.nodes[v.0];
                let chunk = n.shape[axis] * inner;
                out.extend_from_slice(&n.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if numel(shape) != numel(sx) {
            return Err(Error::shape("reshape", sx, shape));
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &sx, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let index = permute_index(&sx, perm);
        let xd = &self.nodes[x.0].data;
        let data = index.iter().map(|&i| xd[i]).collect();
        Ok(self.push(
            out_shape,
            data,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.nodes[x.0].shape.len();
        if r < 2 {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: 1,
                shape: self.nodes[x.0].shape.clone(),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(Op::Relu(x), x, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(Op::Tanh(x), x, libm::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(Op::Sigmoid(x), x, sigmoid)
    }

    /// Softmax over `axis`; every slice along it sums to one.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let sx = self.nodes[x.0].shape.clone();
        let (outer, len, inner) = split_axis(&sx, axis);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| xd[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for l in 0..len {
                    let e = libm::exp(xd[at(l)] - mx);
                    out[at(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    out[at(l)] /= s;
                }
            }
        }
        Ok(self.push(sx, out, Op::Softmax { x, axis }, &[x]))
    }

    /// Divides every slice along `axis` by its sum.
    pub fn normalize_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("normalize_axis", x, axis)?;
        let sx = self.nodes[x.0].shape.clone();
        let (outer, len, inner) = split_axis(&sx, axis);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let s: f64 = (0..len).map(|l| xd[at(l)]).sum();
                for l in 0..len {
                    out[at(l)] = xd[at(l)] / s;
                }
            }
        }
        Ok(self.push(sx, out, Op::NormalizeAxis { x, axis }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].data.iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = &self.nodes[x.0].data;
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Vec::new(), vec![s], Op::Mean(x), &[x])
    }

    /// Mixes `x` along `axis` with the matrix `a`:
    /// `y[.., p, ..] = sum_l a[p, l] * x[.., l, ..]`.
    ///
    /// `a` is either `[P, L]`, shared by every slice, or `[B, P, L]` with one
    /// matrix per entry of the leading batch axis of `x` (then `axis >= 1`).
    pub fn contract(&mut self, a: Var, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("contract", x, axis)?;
        let (sa, sx) = (self.nodes[a.0].shape.clone(), self.nodes[x.0].shape.clone());
        let (outer, len, inner) = split_axis(&sx, axis);
        let batched = match sa.len() {
            2 if sa[1] == len => false,
            3 if axis >= 1 && sa[0] == sx[0] && sa[2] == len => true,
            _ => return Err(Error::shape("contract", &sa, &sx)),
        };
        let p_len = sa[sa.len() - 2];
        let per_batch = if batched { outer / sa[0] } else { outer };
        let (ad, xd) = (&self.nodes[a.0].data, &self.nodes[x.0].data);
        let mut out = vec![0.0; outer * p_len * inner];
        for o in 0..outer {
            let amat = if batched {
                let b = o / per_batch;
                &ad[b * p_len * len..(b + 1) * p_len * len]
            } else {
                &ad[..]
            };
            gemm_acc(
                amat,
                &xd[o * len * inner..(o + 1) * len * inner],
                &mut out[o * p_len * inner..(o + 1) * p_len * inner],
                p_len,
                len,
                inner,
            );
        }
        let mut shape = sx;
        shape[axis] = p_len;
        Ok(self.push(shape, out, Op::Contract { a, x, axis }, &[a, x]))
    }

    /// `sum_k w[terms[k].0] * terms[k].1` for a rank-1 weight vector `w`.
    pub fn weighted_sum(&mut self, terms: &[(usize, Var)], w: Var) -> Result<Var> {
        let (_, first) = *terms
            .first()
            .ok_or_else(|| Error::shape("weighted_sum", &[], &[]))?;
        let sw = self.nodes[w.0].shape.clone();
        let shape = self.nodes[first.0].shape.clone();
        if sw.len() != 1 {
            return Err(Error::shape("weighted_sum", &sw, &shape));
        }
        let mut out = vec![0.0; numel(&shape)];
        for &(k, v) in terms {
            if k >= sw[0] {
                return Err(Error::shape("weighted_sum", &sw, &[k]));
            }
            if self.nodes[v.0].shape != shape {
                return Err(Error::shape("weighted_sum", &shape, &self.nodes[v.0].shape));
            }
            let wk = self.nodes[w.0].data[k];
            for (o, x) in out.iter_mut().zip(&self.nodes[v.0].data) {
                *o += wk * x;
            }
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.1).chain(Some(w)).collect();
        Ok(self.push(
            shape,
            out,
            Op::WeightedSum {
                terms: terms.to_vec(),
                w,
            },
            &parents,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 || !ln.shape.iter().all(|&d| d == 1) {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            if node.param.is_some() {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Reverse sweep that accumulates into the parameter tensors of `store`.
    ///
    /// Every trainable parameter ends with a gradient buffer, zero-filled when
    /// the loss does not depend on it.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads.get(idx).and_then(|g| g.as_ref())) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        store.fill_missing_grads();
        Ok(())
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Takes the gradient buffer of `v` out of `grads` (zero-filled on
        // first use); None when `v` needs no gradient.
        let take = |grads: &mut [Option<Vec<f64>>], v: Var| -> Option<Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            Some(
                grads[v.0]
                    .take()
                    .unwrap_or_else(|| vec![0.0; nodes[v.0].data.len()]),
            )
        };
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                let v = $v;
                if let Some(mut $buf) = take(grads, v) {
                    $body
                    grads[v.0] = Some($buf);
                }
            };
        }
        let val = |v: Var| &nodes[v.0].data[..];
        let shp = |v: Var| &nodes[v.0].shape[..];

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_grad!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(x, y)| *x += y) });
                with_grad!(*b, |gb| { gb.iter_mut().zip(g).for_each(|(x, y)| *x += y) });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(x, y)| *x += y) });
                with_grad!(*b, |gb| { gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y) });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                with_grad!(*a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                with_grad!(*b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(x, s) => {
                with_grad!(*x, |gx| { gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b) });
            }
            Op::AddScalar(x) => {
                with_grad!(*x, |gx| { gx.iter_mut().zip(g).for_each(|(a, b)| *a += b) });
            }
            Op::AddTrailing(x, b) => {
                let len = val(*b).len();
                with_grad!(*x, |gx| { gx.iter_mut().zip(g).for_each(|(a, b)| *a += b) });
                with_grad!(*b, |gb| {
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % len] += gv;
                    }
                });
            }
            Op::MulTrailing(x, b) => {
                let (xv, bv) = (val(*x), val(*b));
                let len = bv.len();
                with_grad!(*x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * bv[i % len];
                    }
                });
                with_grad!(*b, |gb| {
                    for i in 0..g.len() {
                        gb[i % len] += g[i] * xv[i];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                with_grad!(*a, |ga| { gemm_a_bt_acc(g, val(*b), &mut ga, m, k, n) });
                with_grad!(*b, |gb| { gemm_at_b_acc(val(*a), g, &mut gb, m, k, n) });
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (val(*a), val(*b));
                with_grad!(*a, |ga| {
                    for i in 0..bs {
                        gemm_a_bt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &bv[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                with_grad!(*b, |gb| {
                    for i in 0..bs {
                        gemm_at_b_acc(
                            &av[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let sw = shp(*w);
                let (fin, fout) = (sw[0], sw[1]);
                let rows = val(*x).len() / fin;
                with_grad!(*x, |gx| { gemm_a_bt_acc(g, val(*w), &mut gx, rows, fin, fout) });
                with_grad!(*w, |gw| { gemm_at_b_acc(val(*x), g, &mut gw, rows, fin, fout) });
                if let Some(b) = b {
                    with_grad!(*b, |gb| {
                        for r in 0..rows {
                            for o in 0..fout {
                                gb[o] += g[r * fout + o];
                            }
                        }
                    });
                }
            }
            Op::Conv1d { x, w, b, axis } => {
                let (sx, sw) = (shp(*x), shp(*w));
                let rank = sx.len();
                let (kernel, cin, cout) = (sw[0], sw[1], sw[2]);
                let pad = kernel / 2;
                let outer: usize = sx[..*axis].iter().product();
                let len = sx[*axis];
                let mid: usize = sx[*axis + 1..rank - 1].iter().product();
                let (xv, wv) = (val(*x), val(*w));
                let mut gx = take(grads, *x);
                let mut gw = take(grads, *w);
                let mut gb = take(grads, *b);
                if let Some(gb) = gb.as_deref_mut() {
                    for grow in g.chunks(cout) {
                        gb.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    }
                }
                for o in 0..outer {
                    for k in 0..kernel {
                        let Some((lo, hi)) = conv_rows(k, pad, len) else { continue };
                        let src = lo + k - pad;
                        let rows = (hi - lo) * mid;
                        let xs = (o * len + src) * mid * cin;
                        let gs = (o * len + lo) * mid * cout;
                        let gslice = &g[gs..gs + rows * cout];
                        let wk = k * cin * cout..(k + 1) * cin * cout;
                        if let Some(gx) = gx.as_deref_mut() {
                            gemm_a_bt_acc(gslice, &wv[wk.clone()], &mut gx[xs..xs + rows * cin], rows, cin, cout);
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gemm_at_b_acc(&xv[xs..xs + rows * cin], gslice, &mut gw[wk], rows, cin, cout);
                        }
                    }
                }
                for (v, buf) in [(*x, gx), (*w, gw), (*b, gb)] {
                    if buf.is_some() {
                        grads[v.0] = buf;
                    }
                }
            }
            Op::AvgPool2 { x, axis } => {
                let (outer, len, inner) = split_axis(shp(*x), *axis);
                let half = len / 2;
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        for l in 0..half {
                            for i in 0..inner {
                                let gv = 0.5 * g[(o * half + l) * inner + i];
                                gx[(o * len + 2 * l) * inner + i] += gv;
                                gx[(o * len + 2 * l + 1) * inner + i] += gv;
                            }
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for v in xs {
                    let chunk = shp(*v)[*axis] * inner;
                    with_grad!(*v, |gv| {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset..o * total * inner + offset + chunk];
                            gv[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Reshape(x) => {
                with_grad!(*x, |gx| { gx.iter_mut().zip(g).for_each(|(a, b)| *a += b) });
            }
            Op::Permute { x, perm } => {
                let index = permute_index(shp(*x), perm);
                with_grad!(*x, |gx| {
                    for (o, &i) in index.iter().enumerate() {
                        gx[i] += g[o];
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x);
                with_grad!(*x, |gx| {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.data;
                with_grad!(*x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.data;
                with_grad!(*x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                let y = &node.data;
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::NormalizeAxis { x, axis } => {
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                let (xv, y) = (val(*x), &node.data);
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let s: f64 = (0..len).map(|l| xv[at(l)]).sum();
                            let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += (g[at(l)] - dot) / s;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |gx| { gx.iter_mut().for_each(|a| *a += g[0]) });
            }
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                with_grad!(*x, |gx| { gx.iter_mut().for_each(|a| *a += g[0] / n) });
            }
            Op::Contract { a, x, axis } => {
                let sa = shp(*a);
                let (outer, len, inner) = split_axis(shp(*x), *axis);
                let batched = sa.len() == 3;
                let p_len = sa[sa.len() - 2];
                let per_batch = if batched { outer / sa[0] } else { outer };
                let (av, xv) = (val(*a), val(*x));
                let amat = |o: usize| -> core::ops::Range<usize> {
                    if batched {
                        let b = o / per_batch;
                        b * p_len * len..(b + 1) * p_len * len
                    } else {
                        0..p_len * len
                    }
                };
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        gemm_at_b_acc(
                            &av[amat(o)],
                            &g[o * p_len * inner..(o + 1) * p_len * inner],
                            &mut gx[o * len * inner..(o + 1) * len * inner],
                            p_len,
                            len,
                            inner,
                        );
                    }
                });
                with_grad!(*a, |ga| {
                    for o in 0..outer {
                        let r = amat(o);
                        gemm_a_bt_acc(
                            &g[o * p_len * inner..(o + 1) * p_len * inner],
                            &xv[o * len * inner..(o + 1) * len * inner],
                            &mut ga[r],
                            p_len,
                            len,
                            inner,
                        );
                    }
                });
            }
            Op::WeightedSum { terms, w } => {
                let wv = val(*w);
                for &(k, v) in terms {
                    let wk = wv[k];
                    with_grad!(v, |gv| { gv.iter_mut().zip(g).for_each(|(a, b)| *a += wk * b) });
                }
                with_grad!(*w, |gw| {
                    for &(k, v) in terms {
                        gw[k] += val(v).iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
        }
    }
}

/// For each flat output position of a permutation, the flat input index.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total = numel(shape);
    let mut index = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        index.push(src);
        for d in (0..rank).rev() {
            counter[d] += 1;
            src += out_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= out_strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    index
}
