use std::sync::Arc;

use super::kernels::{
    self, bn_normalizer, conv2d_geom, conv_backward_data, conv_backward_kernel, conv_forward,
    conv_transpose2d_geom, gemm_nn, gemm_nt, gemm_tn, Activation, BnLayout, BnMode, ConvGeom,
};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    /// `gather(P, idx) + sum_i X_i W_i + b`
    Affine {
        terms: Vec<(Var, Var)>,
        bias: Option<Var>,
        gathered: Option<(Var, Arc<Vec<usize>>)>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Act(Var, Activation),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
        act: Option<Activation>,
    },
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    ConvT2d { x: Var, k: Var, geom: ConvGeom },
    ConcatChannels(Var, Var),
    ConcatCols(Var, Var),
    GatherRows(Var, Arc<Vec<usize>>),
    SliceRows { x: Var, start: usize },
    GatherPixels(Var, Arc<Vec<usize>>),
    NormalizeRows { x: Var, norms: Vec<T> },
    FrameApply {
        r: Var,
        frames: Arc<Vec<T>>,
        rows_patch: Arc<Vec<usize>>,
    },
    SqDistConst(Var, Arc<Vec<T>>),
    L1DistConst(Var, Arc<Vec<T>>),
    SumSq(Var),
    Sum(Var),
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Records operations for one forward pass and replays them in reverse.
///
/// A tape is confined to one worker and can run `backward` once.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients of every `requires_grad` leaf, by handle.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
        none => *none = Some(contrib),
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad: requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.affine(&[(a, b)], None, None)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.affine(&[(x, w)], b, None)
    }

    /// `out[r] = P[idx[r]] + sum_i X_i[r] W_i + b`.
    ///
    /// Equivalent to one linear layer over the concatenation of per-row inputs
    /// and per-group inputs, with the per-group product computed once per group.
    pub fn affine(
        &mut self,
        terms: &[(Var, Var)],
        bias: Option<Var>,
        gathered: Option<(Var, Arc<Vec<usize>>)>,
    ) -> Result<Var> {
        let (n, m) = match (terms.first(), &gathered) {
            (Some(&(x, w)), _) => (self.value(x).dims2()?.0, self.value(w).dims2()?.1),
            (None, Some((p, idx))) => (idx.len(), self.value(*p).dims2()?.1),
            (None, None) => return Err(Error::dim("affine with no inputs")),
        };
        let mut out = vec![T::zero(); n * m];
        if let Some((p, idx)) = &gathered {
            let (rows, pm) = self.value(*p).dims2()?;
            if pm != m || idx.len() != n {
                return Err(Error::dim(format!("gathered block {rows}x{pm} does not fit output {n}x{m}")));
            }
            let pd = self.data(*p);
            for (r, &g) in idx.iter().enumerate() {
                if g >= rows {
                    return Err(Error::dim(format!("gather index {g} out of {rows} rows")));
                }
                out[r * m..(r + 1) * m].copy_from_slice(&pd[g * m..(g + 1) * m]);
            }
        }
        for &(x, w) in terms {
            let (xn, d) = self.value(x).dims2()?;
            let (wd, wm) = self.value(w).dims2()?;
            if xn != n || wd != d || wm != m {
                return Err(Error::dim(format!(
                    "matmul inner extents differ: {:?} x {:?} into {n}x{m}",
                    self.shape(x),
                    self.shape(w)
                )));
            }
            gemm_nn(n, d, m, self.data(x), self.data(w), &mut out, true);
        }
        if let Some(b) = bias {
            if self.value(b).len() != m {
                return Err(Error::dim("bias length differs from output width"));
            }
            let bd = self.data(b);
            out.chunks_mut(m).for_each(|row| row.iter_mut().zip(bd).for_each(|(o, &b)| *o += b));
        }
        let mut inputs: Vec<Var> = terms.iter().flat_map(|&(x, w)| [x, w]).collect();
        inputs.extend(bias);
        inputs.extend(gathered.as_ref().map(|g| g.0));
        let op = Op::Affine {
            terms: terms.to_vec(),
            bias,
            gathered,
        };
        Ok(self.push(Tensor::from_parts(vec![n, m], out), &inputs, op))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, &[a, b], op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, &[a], Op::Scale(a, c))
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &[T]) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::dim("add_const: length mismatch"));
        }
        let data = self.data(a).iter().zip(c).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, &[a], Op::AddConst(a)))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = kernels::activation(self.value(x), kind);
        self.push(value, &[x], Op::Act(x, kind))
    }

    /// Batch normalization with learnable scale/shift, optionally fused with a
    /// trailing activation so the normalized pre-activation is never stored.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: T,
        act: Option<Activation>,
    ) -> Result<Var> {
        let layout = BnLayout::of(self.shape(x))?;
        if self.value(gamma).len() != layout.channels || self.value(beta).len() != layout.channels {
            return Err(Error::dim("batch_norm: scale/shift length differs from channel count"));
        }
        let (mean, inv_std, train) = bn_normalizer(&layout, self.data(x), mode, eps)?;
        let (xd, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![T::zero(); xd.len()];
        // fold normalization and affine into one scale/offset per channel
        let mul: Vec<T> = (0..layout.channels).map(|c| inv_std[c] * g[c]).collect();
        let add: Vec<T> = (0..layout.channels).map(|c| b[c] - mean[c] * mul[c]).collect();
        kernels::channel_affine(&layout, xd, &mul, &add, act, &mut out);
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
            train,
            act,
        };
        Ok(self.push(value, &[x, gamma, beta], op))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = conv2d_geom(self.value(x), self.value(k), stride, padding)?;
        let mut out = vec![T::zero(); geom.batch * geom.c_out * geom.ho * geom.wo];
        conv_forward(&geom, self.data(x), self.data(k), &mut out);
        let shape = vec![geom.batch, geom.c_out, geom.ho, geom.wo];
        let shape = if self.value(x).rank() == 4 { shape } else { shape[1..].to_vec() };
        Ok(self.push(Tensor::from_parts(shape, out), &[x, k], Op::Conv2d { x, k, geom }))
    }

    pub fn conv_transpose2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = conv_transpose2d_geom(self.value(x), self.value(k), stride, padding)?;
        let mut out = vec![T::zero(); geom.batch * geom.c_in * geom.h * geom.w];
        conv_backward_data(&geom, self.data(x), self.data(k), &mut out);
        let shape = vec![geom.batch, geom.c_in, geom.h, geom.w];
        let shape = if self.value(x).rank() == 4 { shape } else { shape[1..].to_vec() };
        Ok(self.push(Tensor::from_parts(shape, out), &[x, k], Op::ConvT2d { x, k, geom }))
    }

    /// Concatenates `[B, Ca, ...]` and `[B, Cb, ...]` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 3 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::dim(format!("concat_channels: {sa:?} vs {sb:?}")));
        }
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let mut out = Vec::with_capacity(sa[0] * (ca + cb));
        for bi in 0..sa[0] {
            out.extend_from_slice(&self.data(a)[bi * ca..(bi + 1) * ca]);
            out.extend_from_slice(&self.data(b)[bi * cb..(bi + 1) * cb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        Ok(self.push(Tensor::from_parts(shape, out), &[a, b], Op::ConcatChannels(a, b)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca) = self.value(a).dims2()?;
        let (nb, cb) = self.value(b).dims2()?;
        if n != nb {
            return Err(Error::dim("concat_cols: row counts differ"));
        }
        let mut out = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            out.extend_from_slice(&self.data(a)[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&self.data(b)[r * cb..(r + 1) * cb]);
        }
        Ok(self.push(Tensor::from_parts(vec![n, ca + cb], out), &[a, b], Op::ConcatCols(a, b)))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let (rows, d) = self.value(x).dims2()?;
        if idx.is_empty() {
            return Err(Error::dim("gather_rows: empty index"));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            if i >= rows {
                return Err(Error::dim(format!("gather index {i} out of {rows} rows")));
            }
            out.extend_from_slice(&xd[i * d..(i + 1) * d]);
        }
        let value = Tensor::from_parts(vec![idx.len(), d], out);
        Ok(self.push(value, &[x], Op::GatherRows(x, idx)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, d) = self.value(x).dims2()?;
        if start >= end || end > rows {
            return Err(Error::dim(format!("slice_rows {start}..{end} of {rows}")));
        }
        let value = Tensor::from_parts(vec![end - start, d], self.data(x)[start * d..end * d].to_vec());
        Ok(self.push(value, &[x], Op::SliceRows { x, start }))
    }

    /// Reads `[C]` feature vectors out of a `[B, C, H, W]` map at flat
    /// `b * H * W + pixel` positions, giving `[n, C]`.
    pub fn gather_pixels(&mut self, fmap: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let s = self.shape(fmap).to_vec();
        if s.len() != 4 || idx.is_empty() {
            return Err(Error::dim(format!("gather_pixels on {s:?}")));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let fd = self.data(fmap);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &p in idx.iter() {
            if p >= b * hw {
                return Err(Error::dim(format!("pixel index {p} out of range")));
            }
            let (bi, px) = (p / hw, p % hw);
            out.extend((0..c).map(|ch| fd[(bi * c + ch) * hw + px]));
        }
        let value = Tensor::from_parts(vec![idx.len(), c], out);
        Ok(self.push(value, &[fmap], Op::GatherPixels(fmap, idx)))
    }

    /// Unit-normalizes rows; rows with norm below 1e-12 become `(0, .., 1)`
    /// and pass no gradient.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let value = kernels::normalize_rows(self.value(x))?;
        let d = self.value(x).dims2()?.1;
        let norms = self
            .data(x)
            .chunks(d)
            .map(|r| {
                let n = r.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
                if n < T::lit(kernels::DEGENERATE_NORM) {
                    T::zero()
                } else {
                    n
                }
            })
            .collect();
        Ok(self.push(value, &[x], Op::NormalizeRows { x, norms }))
    }

    /// `y[i] = F[rows_patch[i]] * r[i]` with row-major 3x3 frames.
    pub fn frame_apply(&mut self, r: Var, frames: Arc<Vec<T>>, rows_patch: Arc<Vec<usize>>) -> Result<Var> {
        let (n, d) = self.value(r).dims2()?;
        if d != 3 || rows_patch.len() != n || frames.len() % 9 != 0 {
            return Err(Error::dim("frame_apply expects [n, 3] rows, one patch id per row and 3x3 frames"));
        }
        let patches = frames.len() / 9;
        let rd = self.data(r);
        let mut out = vec![T::zero(); n * 3];
        for i in 0..n {
            let p = rows_patch[i];
            if p >= patches {
                return Err(Error::dim(format!("patch id {p} out of {patches}")));
            }
            let f = &frames[p * 9..p * 9 + 9];
            let v = &rd[i * 3..i * 3 + 3];
            for a in 0..3 {
                out[i * 3 + a] = f[a * 3] * v[0] + f[a * 3 + 1] * v[1] + f[a * 3 + 2] * v[2];
            }
        }
        let op = Op::FrameApply { r, frames, rows_patch };
        Ok(self.push(Tensor::from_parts(vec![n, 3], out), &[r], op))
    }

    /// Scalar `sum (x - target)^2` against constant data.
    pub fn sq_dist_const(&mut self, x: Var, target: Arc<Vec<T>>) -> Result<Var> {
        if target.len() != self.value(x).len() {
            return Err(Error::dim("sq_dist_const: length mismatch"));
        }
        let s = self.data(x).iter().zip(target.iter()).fold(T::zero(), |a, (&p, &q)| a + (p - q) * (p - q));
        Ok(self.push(Tensor::scalar(s), &[x], Op::SqDistConst(x, target)))
    }

    /// Scalar `sum |x - target|` against constant data.
    pub fn l1_dist_const(&mut self, x: Var, target: Arc<Vec<T>>) -> Result<Var> {
        if target.len() != self.value(x).len() {
            return Err(Error::dim("l1_dist_const: length mismatch"));
        }
        let s = self.data(x).iter().zip(target.iter()).fold(T::zero(), |a, (&p, &q)| a + (p - q).abs());
        Ok(self.push(Tensor::scalar(s), &[x], Op::L1DistConst(x, target)))
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().fold(T::zero(), |a, &v| a + v * v);
        self.push(Tensor::scalar(s), &[x], Op::SumSq(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().fold(T::zero(), |a, &v| a + v);
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// `sum_i c_i * v_i` over scalar values.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut s = T::zero();
        for &(v, c) in terms {
            s += c * self.value(v).item()?;
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Tensor::scalar(s), &inputs, Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse pass from a scalar loss. Consumes the tape's recorded values.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Backward("tape already consumed by a previous backward".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::Backward("loss is detached from every requires_grad leaf".into()));
        }
        self.consumed = true;
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let (lower, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let g = grads[i].take();
            if let (Op::Leaf, true) = (&node.op, node.needs_grad) {
                let g = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                leaf_grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            } else if let Some(g) = g {
                backprop(lower, node, &g, &mut grads)?;
            }
            node.value = Tensor::from_parts(Vec::new(), vec![T::zero()]);
            node.op = Op::Leaf;
        }
        // leaves recorded after the loss cannot influence it
        for (i, node) in self.nodes.iter().enumerate().skip(n) {
            if node.needs_grad && matches!(node.op, Op::Leaf) {
                leaf_grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        self.nodes.truncate(0);
        Ok(Gradients { grads: leaf_grads })
    }
}

fn backprop<T: Real>(lower: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
    let val = |v: Var| &lower[v.0].value;
    let needs = |v: Var| lower[v.0].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Affine { terms, bias, gathered } => {
            let (n, m) = node.value.dims2()?;
            for &(x, w) in terms {
                let d = val(x).dims2()?.1;
                if needs(x) {
                    gemm_nt(n, m, d, g, val(w).data(), slot(grads, x, n * d), true);
                }
                if needs(w) {
                    gemm_tn(d, n, m, val(x).data(), g, slot(grads, w, d * m), true);
                }
            }
            if let Some(b) = *bias {
                if needs(b) {
                    let db = slot(grads, b, m);
                    g.chunks(m).for_each(|row| db.iter_mut().zip(row).for_each(|(a, &v)| *a += v));
                }
            }
            if let Some((p, idx)) = gathered {
                if needs(*p) {
                    let len = val(*p).len();
                    let dp = slot(grads, *p, len);
                    for (r, &gi) in idx.iter().enumerate() {
                        dp[gi * m..(gi + 1) * m].iter_mut().zip(&g[r * m..(r + 1) * m]).for_each(|(a, &v)| *a += v);
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if needs(v) {
                    add_into(grads, v, g.to_vec());
                }
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                add_into(grads, *a, g.to_vec());
            }
            if needs(*b) {
                add_into(grads, *b, g.iter().map(|&v| -v).collect());
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                add_into(grads, *a, g.iter().zip(val(*b).data()).map(|(&gv, &bv)| gv * bv).collect());
            }
            if needs(*b) {
                add_into(grads, *b, g.iter().zip(val(*a).data()).map(|(&gv, &av)| gv * av).collect());
            }
        }
        Op::Scale(a, c) => add_into(grads, *a, g.iter().map(|&v| v * *c).collect()),
        Op::AddConst(a) => add_into(grads, *a, g.to_vec()),
        Op::Act(x, kind) => {
            add_into(grads, *x, kind.backprop_from_output(g, node.value.data()));
        }
        Op::BatchNorm { x, gamma, beta, mean, inv_std, train, act } => {
            let layout = BnLayout::of(node.value.shape())?;
            let c = layout.channels;
            let xd = val(*x).data();
            let gm = val(*gamma).data();
            // gradient w.r.t. the affine output (before the fused activation)
            let dy: Vec<T> = match act {
                Some(a) => a.backprop_from_output(g, node.value.data()),
                None => g.to_vec(),
            };
            let (sum_dy, sum_dyx) = kernels::channel_grad_sums(&layout, xd, mean, &dy);
            let sum_dy_xhat: Vec<T> = (0..c).map(|ch| inv_std[ch] * sum_dyx[ch]).collect();
            if needs(*gamma) {
                add_into(grads, *gamma, sum_dy_xhat.clone());
            }
            if needs(*beta) {
                add_into(grads, *beta, sum_dy.clone());
            }
            if needs(*x) {
                let dx = slot(grads, *x, xd.len());
                // dx = k * (dy - mean(dy) - xhat * mean(dy * xhat)) with k = gamma / std,
                // expanded into a per-channel linear form in (dy, x)
                let a: Vec<T> = (0..c).map(|ch| gm[ch] * inv_std[ch]).collect();
                let (b, d): (Vec<T>, Vec<T>) = if *train {
                    let cnt = T::from_usize(layout.count()).unwrap();
                    (0..c)
                        .map(|ch| {
                            let mdy = sum_dy[ch] / cnt;
                            let q = a[ch] * inv_std[ch] * sum_dy_xhat[ch] / cnt;
                            (-q, -a[ch] * mdy + q * mean[ch])
                        })
                        .unzip()
                } else {
                    (vec![T::zero(); c], vec![T::zero(); c])
                };
                kernels::channel_accumulate(&layout, dx, &dy, xd, [&a, &b, &d]);
            }
        }
        Op::Conv2d { x, k, geom } => {
            if needs(*x) {
                let len = val(*x).len();
                conv_backward_data(geom, g, val(*k).data(), slot(grads, *x, len));
            }
            if needs(*k) {
                let len = val(*k).len();
                conv_backward_kernel(geom, val(*x).data(), g, slot(grads, *k, len));
            }
        }
        Op::ConvT2d { x, k, geom } => {
            if needs(*x) {
                let len = val(*x).len();
                let mut dx = vec![T::zero(); len];
                conv_forward(geom, g, val(*k).data(), &mut dx);
                add_into(grads, *x, dx);
            }
            if needs(*k) {
                let len = val(*k).len();
                conv_backward_kernel(geom, g, val(*x).data(), slot(grads, *k, len));
            }
        }
        Op::ConcatChannels(a, b) => {
            let batch = node.value.shape()[0];
            let (la, lb) = (val(*a).len() / batch, val(*b).len() / batch);
            let mut ga = Vec::with_capacity(val(*a).len());
            let mut gb = Vec::with_capacity(val(*b).len());
            for bi in 0..batch {
                let base = bi * (la + lb);
                ga.extend_from_slice(&g[base..base + la]);
                gb.extend_from_slice(&g[base + la..base + la + lb]);
            }
            if needs(*a) {
                add_into(grads, *a, ga);
            }
            if needs(*b) {
                add_into(grads, *b, gb);
            }
        }
        Op::ConcatCols(a, b) => {
            let (n, w) = node.value.dims2()?;
            let ca = val(*a).dims2()?.1;
            let mut ga = Vec::with_capacity(n * ca);
            let mut gb = Vec::with_capacity(n * (w - ca));
            for row in g.chunks(w) {
                ga.extend_from_slice(&row[..ca]);
                gb.extend_from_slice(&row[ca..]);
            }
            if needs(*a) {
                add_into(grads, *a, ga);
            }
            if needs(*b) {
                add_into(grads, *b, gb);
            }
        }
        Op::GatherRows(x, idx) => {
            let d = node.value.dims2()?.1;
            let len = val(*x).len();
            let dx = slot(grads, *x, len);
            for (r, &i) in idx.iter().enumerate() {
                dx[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &v)| *a += v);
            }
        }
        Op::SliceRows { x, start } => {
            let d = node.value.dims2()?.1;
            let len = val(*x).len();
            let dx = slot(grads, *x, len);
            dx[start * d..start * d + g.len()].iter_mut().zip(g).for_each(|(a, &v)| *a += v);
        }
        Op::GatherPixels(fmap, idx) => {
            let s = val(*fmap).shape();
            let (c, hw) = (s[1], s[2] * s[3]);
            let len = val(*fmap).len();
            let df = slot(grads, *fmap, len);
            for (r, &p) in idx.iter().enumerate() {
                let (bi, px) = (p / hw, p % hw);
                for ch in 0..c {
                    df[(bi * c + ch) * hw + px] += g[r * c + ch];
                }
            }
        }
        Op::NormalizeRows { x, norms } => {
            let d = node.value.dims2()?.1;
            let y = node.value.data();
            let len = val(*x).len();
            let dx = slot(grads, *x, len);
            for (r, &nrm) in norms.iter().enumerate() {
                if nrm == T::zero() {
                    continue;
                }
                let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                let proj = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                for j in 0..d {
                    dx[r * d + j] += (gr[j] - yr[j] * proj) / nrm;
                }
            }
        }
        Op::FrameApply { r, frames, rows_patch } => {
            let len = val(*r).len();
            let dr = slot(grads, *r, len);
            for (i, &p) in rows_patch.iter().enumerate() {
                let f = &frames[p * 9..p * 9 + 9];
                let gi = &g[i * 3..i * 3 + 3];
                for b in 0..3 {
                    dr[i * 3 + b] += f[b] * gi[0] + f[3 + b] * gi[1] + f[6 + b] * gi[2];
                }
            }
        }
        Op::SqDistConst(x, target) => {
            let two_g = T::lit(2.0) * g[0];
            let contrib = val(*x).data().iter().zip(target.iter()).map(|(&p, &q)| two_g * (p - q)).collect();
            add_into(grads, *x, contrib);
        }
        Op::L1DistConst(x, target) => {
            let contrib = val(*x)
                .data()
                .iter()
                .zip(target.iter())
                .map(|(&p, &q)| {
                    let d = p - q;
                    if d > T::zero() {
                        g[0]
                    } else if d < T::zero() {
                        -g[0]
                    } else {
                        T::zero()
                    }
                })
                .collect();
            add_into(grads, *x, contrib);
        }
        Op::SumSq(x) => {
            let two_g = T::lit(2.0) * g[0];
            add_into(grads, *x, val(*x).data().iter().map(|&v| two_g * v).collect());
        }
        Op::Sum(x) => add_into(grads, *x, vec![g[0]; val(*x).len()]),
        Op::WeightedSum(terms) => {
            for &(v, c) in terms {
                if needs(v) {
                    add_into(grads, v, vec![c * g[0]]);
                }
            }
        }
    }
    Ok(())
}
