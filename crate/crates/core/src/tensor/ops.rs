//! Tensor operations: forward kernels and their adjoints.

use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::tape::{accumulate, Node, Op, Tensor};
use crate::tensor::Element;

fn same_tape<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if !Rc::ptr_eq(&a.tape.nodes, &b.tape.nodes) {
        return Err(Error::contract("operands live on different tapes"));
    }
    Ok(())
}

/// Broadcast result shape: equal ranks, each axis equal or extent 1.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() != b.len() {
        return Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}: ranks differ")));
    }
    a.iter()
        .zip(b)
        .map(|(&da, &db)| {
            if da == db || db == 1 {
                Ok(da)
            } else if da == 1 {
                Ok(db)
            } else {
                Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}")))
            }
        })
        .collect()
}

/// Apply `f` elementwise over broadcast operands.
fn bcast_apply<E: Element>(
    a: &[E],
    ash: &[usize],
    b: &[E],
    bsh: &[usize],
    out_shape: &[usize],
    f: impl Fn(E, E) -> E,
) -> Vec<E> {
    if ash == bsh {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    // Row-vector broadcast is the hot path (bias adds).
    if ash.len() == 2 && bsh.len() == 2 && ash[1] == bsh[1] {
        let cols = ash[1];
        if bsh[0] == 1 {
            let mut out = Vec::with_capacity(a.len());
            for row in a.chunks_exact(cols) {
                out.extend(row.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
            return out;
        }
        if ash[0] == 1 {
            let mut out = Vec::with_capacity(b.len());
            for row in b.chunks_exact(cols) {
                out.extend(a.iter().zip(row).map(|(&x, &y)| f(x, y)));
            }
            return out;
        }
    }
    // General odometer walk with zero strides on broadcast axes.
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let stride_of = |sh: &[usize]| {
        let mut s = vec![0usize; rank];
        let mut acc = 1usize;
        for i in (0..rank).rev() {
            s[i] = if sh[i] == 1 { 0 } else { acc };
            acc *= sh[i];
        }
        s
    };
    let sa = stride_of(ash);
    let sb = stride_of(bsh);
    let mut out = Vec::with_capacity(numel);
    let mut coords = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for _ in 0..numel {
        out.push(f(a[ia], b[ib]));
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Reduce an output-shaped gradient back onto a (possibly broadcast) operand shape.
fn reduce_grad_to<E: Element>(g: &[E], out_shape: &[usize], in_shape: &[usize]) -> Vec<E> {
    if out_shape == in_shape {
        return g.to_vec();
    }
    if out_shape.len() == 2 && in_shape.len() == 2 && in_shape[0] == 1 && in_shape[1] == out_shape[1]
    {
        let cols = out_shape[1];
        let mut out = vec![E::zero(); cols];
        for row in g.chunks_exact(cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        return out;
    }
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..rank).rev() {
        strides[i] = if in_shape[i] == 1 { 0 } else { acc };
        acc *= in_shape[i];
    }
    let in_numel: usize = in_shape.iter().product();
    let mut out = vec![E::zero(); in_numel];
    let mut coords = vec![0usize; rank];
    let mut ii = 0usize;
    for t in 0..numel {
        out[ii] += g[t];
        for d in (0..rank).rev() {
            coords[d] += 1;
            ii += strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ii -= strides[d] * out_shape[d];
        }
    }
    out
}

pub(crate) fn matmul_nn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += ail * bv;
            }
        }
    }
    c
}

/// `a (m×n) · bᵀ` where `b` is stored `(k×n)`; result `m×k`.
fn matmul_nt<E: Element>(a: &[E], b: &[E], m: usize, n: usize, k: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (l, cv) in crow.iter_mut().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            let mut acc0 = E::zero();
            let mut acc1 = E::zero();
            let mut it = arow.chunks_exact(2).zip(brow.chunks_exact(2));
            for (ac, bc) in &mut it {
                acc0 += ac[0] * bc[0];
                acc1 += ac[1] * bc[1];
            }
            if n % 2 == 1 {
                acc0 += arow[n - 1] * brow[n - 1];
            }
            *cv = acc0 + acc1;
        }
    }
    c
}

/// `aᵀ (k×m) · g (m×n)` where `a` is stored `(m×k)`; result `k×n`.
fn matmul_tn<E: Element>(a: &[E], g: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            let crow = &mut c[l * n..(l + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += ail * gv;
            }
        }
    }
    c
}

fn sigmoid_scalar<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

fn reduce_axis_extents(shape: &[usize], axis: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for shape {shape:?}")));
    }
    if shape[axis] == 0 {
        return Err(Error::domain("cannot reduce over an empty axis"));
    }
    let outer: usize = shape[..axis].iter().product();
    let ext = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape: Vec<usize> = shape[..axis].to_vec();
    out_shape.extend_from_slice(&shape[axis + 1..]);
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    Ok((outer, ext, inner, out_shape))
}

impl<E: Element> Tensor<E> {
    fn unary(&self, data: Vec<E>, op: Op<E>) -> Tensor<E> {
        let rg = self.requires_grad();
        self.tape.push(self.shape.clone(), Arc::new(data), rg, op)
    }

    fn binary(&self, other: &Tensor<E>, which: fn(usize, usize) -> Op<E>, f: fn(E, E) -> E) -> Result<Tensor<E>> {
        same_tape(self, other)?;
        let out_shape = broadcast_shape(&self.shape, &other.shape)?;
        let a = self.value();
        let b = other.value();
        let data = bcast_apply(&a, &self.shape, &b, &other.shape, &out_shape, f);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out_shape, Arc::new(data), rg, which(self.id, other.id)))
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_tape(self, other)?;
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::dim(format!(
                "matmul needs (m,k)·(k,n), got {:?} · {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let data = matmul_nn(&self.value(), &other.value(), m, k, n);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(vec![m, n], Arc::new(data), rg, Op::Matmul { a: self.id, b: other.id }))
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, |a, b| Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, |a, b| Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, |a, b| Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn add_scalar(&self, c: E) -> Tensor<E> {
        let data = self.value().iter().map(|&x| x + c).collect();
        self.unary(data, Op::AddScalar { x: self.id })
    }

    pub fn scale(&self, c: E) -> Tensor<E> {
        let data = self.value().iter().map(|&x| x * c).collect();
        self.unary(data, Op::Scale { x: self.id, c })
    }

    pub fn relu(&self) -> Tensor<E> {
        let data = self.value().iter().map(|&x| if x > E::zero() { x } else { E::zero() }).collect();
        self.unary(data, Op::Relu { x: self.id })
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        let data = self.value().iter().map(|&x| sigmoid_scalar(x)).collect();
        self.unary(data, Op::Sigmoid { x: self.id })
    }

    /// Natural log; strict: any non-positive input is a domain error.
    pub fn log(&self) -> Result<Tensor<E>> {
        let v = self.value();
        if let Some(bad) = v.iter().find(|&&x| x <= E::zero()) {
            return Err(Error::domain(format!("log of non-positive input {bad}")));
        }
        let data = v.iter().map(|&x| x.ln()).collect();
        Ok(self.unary(data, Op::Log { x: self.id }))
    }

    /// Absolute value; adjoint uses sign(x) with sign(0) = 0.
    pub fn abs(&self) -> Tensor<E> {
        let data = self.value().iter().map(|&x| x.abs()).collect();
        self.unary(data, Op::Abs { x: self.id })
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        for p in parts {
            same_tape(first, p)?;
        }
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::dim(format!("concat axis {axis} out of range for rank {rank}")));
        }
        let mut axis_total = 0usize;
        for p in parts {
            if p.rank() != rank
                || p.shape[..axis] != first.shape[..axis]
                || p.shape[axis + 1..] != first.shape[axis + 1..]
            {
                return Err(Error::dim(format!(
                    "concat shapes incompatible along axis {axis}: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            axis_total += p.shape[axis];
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        let values: Vec<Arc<Vec<E>>> = parts.iter().map(|p| p.value()).collect();
        for o in 0..outer {
            for (p, v) in parts.iter().zip(&values) {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&v[o * block..(o + 1) * block]);
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(out_shape, Arc::new(data), rg, Op::Concat { xs: ids, axis }))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return Err(Error::dim(format!("narrow axis {axis} out of range for rank {}", self.rank())));
        }
        if len == 0 || start + len > self.shape[axis] {
            return Err(Error::dim(format!(
                "narrow [{start}, {start}+{len}) exceeds extent {} of shape {:?}",
                self.shape[axis], self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let ext = self.shape[axis];
        let v = self.value();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let rg = self.requires_grad();
        Ok(self.tape.push(out_shape, Arc::new(data), rg, Op::Narrow { x: self.id, axis, start }))
    }

    /// Max along `axis` (axis removed from the shape). Gradient flows only
    /// to the first index attaining the max.
    pub fn reduce_max(&self, axis: usize) -> Result<Tensor<E>> {
        let (outer, ext, inner, out_shape) = reduce_axis_extents(&self.shape, axis)?;
        let v = self.value();
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * ext * inner + i;
                let mut best = v[base];
                let mut arg = 0u32;
                for e in 1..ext {
                    let cand = v[base + e * inner];
                    if cand > best {
                        best = cand;
                        arg = e as u32;
                    }
                }
                data.push(best);
                argmax.push(arg);
            }
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(out_shape, Arc::new(data), rg, Op::ReduceMax { x: self.id, axis, argmax }))
    }

    /// Sum along `axis` (axis removed from the shape).
    pub fn reduce_sum(&self, axis: usize) -> Result<Tensor<E>> {
        let (outer, ext, inner, out_shape) = reduce_axis_extents(&self.shape, axis)?;
        let v = self.value();
        let mut data = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let base = (o * ext + e) * inner;
                let orow = &mut data[o * inner..(o + 1) * inner];
                for (ov, &xv) in orow.iter_mut().zip(&v[base..base + inner]) {
                    *ov += xv;
                }
            }
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(out_shape, Arc::new(data), rg, Op::ReduceSum { x: self.id, axis }))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&self) -> Tensor<E> {
        let mut acc = E::zero();
        for &x in self.value().iter() {
            acc += x;
        }
        let rg = self.requires_grad();
        self.tape.push(vec![1], Arc::new(vec![acc]), rg, Op::SumAll { x: self.id })
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let n = E::from_f64(self.numel() as f64);
        self.sum_all().scale(E::one() / n)
    }

    /// Same data, new shape (element count preserved; zero copy).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != self.numel() {
            return Err(Error::dim(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(shape.to_vec(), self.value(), rg, Op::Reshape { x: self.id }))
    }

    /// Rank-2 transpose.
    pub fn transpose2(&self) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(Error::dim(format!("transpose2 needs rank 2, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let v = self.value();
        let mut data = vec![E::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(vec![c, r], Arc::new(data), rg, Op::Transpose2 { x: self.id }))
    }

    /// Select rows of a rank-2 tensor; adjoint scatter-adds per source row.
    pub fn gather_rows(&self, rows: Arc<Vec<u32>>) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(Error::dim(format!("gather_rows needs rank 2, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i as usize >= r) {
            return Err(Error::index(format!("row index {bad} out of range 0..{r}")));
        }
        let v = self.value();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows.iter() {
            let i = i as usize;
            data.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(vec![rows.len(), c], Arc::new(data), rg, Op::GatherRows { x: self.id, rows }))
    }

    /// Repeat each row of a rank-2 tensor `times` consecutive times.
    pub fn repeat_rows(&self, times: usize) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(Error::dim(format!("repeat_rows needs rank 2, got {:?}", self.shape)));
        }
        if times == 0 {
            return Err(Error::dim("repeat_rows needs times >= 1"));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let v = self.value();
        let mut data = Vec::with_capacity(r * times * c);
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(vec![r * times, c], Arc::new(data), rg, Op::RepeatRows { x: self.id, times }))
    }

    /// Gather arbitrary flat indices into a new shape (im2col substrate).
    pub fn gather_flat(&self, idx: Arc<Vec<u32>>, out_shape: &[usize]) -> Result<Tensor<E>> {
        let numel: usize = out_shape.iter().product();
        if numel != idx.len() || out_shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!(
                "gather_flat shape {out_shape:?} does not match {} indices",
                idx.len()
            )));
        }
        let src = self.numel();
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= src) {
            return Err(Error::index(format!("flat index {bad} out of range 0..{src}")));
        }
        let v = self.value();
        let data: Vec<E> = idx.iter().map(|&i| v[i as usize]).collect();
        let rg = self.requires_grad();
        Ok(self.tape.push(out_shape.to_vec(), Arc::new(data), rg, Op::GatherFlat { x: self.id, idx }))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`, max-stabilized.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(Error::dim(format!("cross entropy needs (b,C) logits, got {:?}", self.shape)));
        }
        let (b, c) = (self.shape[0], self.shape[1]);
        if labels.len() != b {
            return Err(Error::dim(format!("{} labels for batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::index(format!("label {bad} out of range 0..{c}")));
        }
        let v = self.value();
        let mut probs = vec![E::zero(); b * c];
        let mut loss = E::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &v[r * c..(r + 1) * c];
            let mut m = row[0];
            for &x in &row[1..] {
                if x > m {
                    m = x;
                }
            }
            let mut sum = E::zero();
            for (p, &x) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (x - m).exp();
                sum += *p;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p = *p / sum;
            }
            loss += m + sum.ln() - row[label];
        }
        loss = loss / E::from_f64(b as f64);
        let rg = self.requires_grad();
        Ok(self.tape.push(
            vec![1],
            Arc::new(vec![loss]),
            rg,
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                labels: Arc::new(labels.to_vec()),
                probs: Arc::new(probs),
            },
        ))
    }

    /// Valid (un-padded) 2-D convolution over channel-last `(V,H,W,C)` input.
    ///
    /// `weight` is `(kh·kw·C, C_out)` with the patch unrolled `[ky][kx][c]`;
    /// `bias` is `(1, C_out)`. Implemented as im2col gather + matmul so the
    /// adjoint comes from existing ops.
    pub fn conv2d(
        &self,
        weight: &Tensor<E>,
        bias: &Tensor<E>,
        kh: usize,
        kw: usize,
        stride: usize,
    ) -> Result<Tensor<E>> {
        if self.rank() != 4 {
            return Err(Error::dim(format!("conv2d needs (V,H,W,C) input, got {:?}", self.shape)));
        }
        let (v, h, w, c) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        if h < kh || w < kw {
            return Err(Error::dim(format!(
                "conv2d input {h}x{w} below kernel {kh}x{kw}"
            )));
        }
        if weight.rank() != 2 || weight.shape[0] != kh * kw * c {
            return Err(Error::dim(format!(
                "conv2d weight {:?} does not match patch size {}",
                weight.shape,
                kh * kw * c
            )));
        }
        let c_out = weight.shape[1];
        let ho = (h - kh) / stride + 1;
        let wo = (w - kw) / stride + 1;
        let mut idx = Vec::with_capacity(v * ho * wo * kh * kw * c);
        for vi in 0..v {
            let vbase = vi * h * w * c;
            for oy in 0..ho {
                let iy0 = oy * stride;
                for ox in 0..wo {
                    let ix0 = ox * stride;
                    for ky in 0..kh {
                        let rbase = vbase + (iy0 + ky) * w * c + ix0 * c;
                        for kx in 0..kw {
                            let pbase = rbase + kx * c;
                            for ci in 0..c {
                                idx.push((pbase + ci) as u32);
                            }
                        }
                    }
                }
            }
        }
        let cols = self.gather_flat(Arc::new(idx), &[v * ho * wo, kh * kw * c])?;
        let z = cols.matmul(weight)?.add(bias)?;
        z.reshape(&[v, ho, wo, c_out])
    }
}

/// Apply the VJP of node `id`, accumulating into its inputs' grads.
pub(crate) fn backprop_node<E: Element>(nodes: &mut [Node<E>], id: usize, grad: &[E]) {
    // Take the op out so input nodes can be borrowed mutably; restored below.
    let op = std::mem::replace(&mut nodes[id].op, Op::Leaf);
    match &op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            if nodes[*a].requires_grad {
                let db = Arc::clone(&nodes[*b].data);
                accumulate(nodes, *a, matmul_nt(grad, &db, m, n, k));
            }
            if nodes[*b].requires_grad {
                let da = Arc::clone(&nodes[*a].data);
                accumulate(nodes, *b, matmul_tn(&da, grad, m, k, n));
            }
        }
        Op::Add { a, b } => {
            let out_shape = nodes[id].shape.clone();
            for &x in [a, b] {
                if nodes[x].requires_grad {
                    let sh = nodes[x].shape.clone();
                    accumulate(nodes, x, reduce_grad_to(grad, &out_shape, &sh));
                }
            }
        }
        Op::Sub { a, b } => {
            let out_shape = nodes[id].shape.clone();
            if nodes[*a].requires_grad {
                let sh = nodes[*a].shape.clone();
                accumulate(nodes, *a, reduce_grad_to(grad, &out_shape, &sh));
            }
            if nodes[*b].requires_grad {
                let sh = nodes[*b].shape.clone();
                let mut d = reduce_grad_to(grad, &out_shape, &sh);
                for v in &mut d {
                    *v = -*v;
                }
                accumulate(nodes, *b, d);
            }
        }
        Op::Mul { a, b } => {
            let out_shape = nodes[id].shape.clone();
            if nodes[*a].requires_grad {
                let bv = Arc::clone(&nodes[*b].data);
                let bsh = nodes[*b].shape.clone();
                let gb = bcast_apply(grad, &out_shape, &bv, &bsh, &out_shape, |g, y| g * y);
                let sh = nodes[*a].shape.clone();
                accumulate(nodes, *a, reduce_grad_to(&gb, &out_shape, &sh));
            }
            if nodes[*b].requires_grad {
                let av = Arc::clone(&nodes[*a].data);
                let ash = nodes[*a].shape.clone();
                let ga = bcast_apply(grad, &out_shape, &av, &ash, &out_shape, |g, x| g * x);
                let sh = nodes[*b].shape.clone();
                accumulate(nodes, *b, reduce_grad_to(&ga, &out_shape, &sh));
            }
        }
        Op::AddScalar { x } => {
            if nodes[*x].requires_grad {
                accumulate(nodes, *x, grad.to_vec());
            }
        }
        Op::Scale { x, c } => {
            if nodes[*x].requires_grad {
                accumulate(nodes, *x, grad.iter().map(|&g| g * *c).collect());
            }
        }
        Op::Relu { x } => {
            if nodes[*x].requires_grad {
                let xv = Arc::clone(&nodes[*x].data);
                let d = grad
                    .iter()
                    .zip(xv.iter())
                    .map(|(&g, &v)| if v > E::zero() { g } else { E::zero() })
                    .collect();
                accumulate(nodes, *x, d);
            }
        }
        Op::Sigmoid { x } => {
            if nodes[*x].requires_grad {
                let s = Arc::clone(&nodes[id].data);
                let d = grad.iter().zip(s.iter()).map(|(&g, &sv)| g * sv * (E::one() - sv)).collect();
                accumulate(nodes, *x, d);
            }
        }
        Op::Log { x } => {
            if nodes[*x].requires_grad {
                let xv = Arc::clone(&nodes[*x].data);
                let d = grad.iter().zip(xv.iter()).map(|(&g, &v)| g / v).collect();
                accumulate(nodes, *x, d);
            }
        }
        Op::Abs { x } => {
            if nodes[*x].requires_grad {
                let xv = Arc::clone(&nodes[*x].data);
                let d = grad
                    .iter()
                    .zip(xv.iter())
                    .map(|(&g, &v)| {
                        if v > E::zero() {
                            g
                        } else if v < E::zero() {
                            -g
                        } else {
                            E::zero()
                        }
                    })
                    .collect();
                accumulate(nodes, *x, d);
            }
        }
        Op::Concat { xs, axis } => {
            let out_shape = nodes[id].shape.clone();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let out_block = out_shape[*axis] * inner;
            let mut offset = 0usize;
            for &x in xs {
                let ext = nodes[x].shape[*axis];
                let block = ext * inner;
                if nodes[x].requires_grad {
                    let mut d = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        let base = o * out_block + offset;
                        d.extend_from_slice(&grad[base..base + block]);
                    }
                    accumulate(nodes, x, d);
                }
                offset += block;
            }
        }
        Op::Narrow { x, axis, start } => {
            if nodes[*x].requires_grad {
                let in_shape = nodes[*x].shape.clone();
                let out_shape = nodes[id].shape.clone();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let ext = in_shape[*axis];
                let len = out_shape[*axis];
                let mut d = vec![E::zero(); in_shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&grad[src..src + len * inner]);
                }
                accumulate(nodes, *x, d);
            }
        }
        Op::ReduceMax { x, axis, argmax } => {
            if nodes[*x].requires_grad {
                let in_shape = nodes[*x].shape.clone();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let ext = in_shape[*axis];
                let mut d = vec![E::zero(); in_shape.iter().product()];
                for o in 0..outer {
                    for i in 0..inner {
                        let t = o * inner + i;
                        let arg = argmax[t] as usize;
                        d[(o * ext + arg) * inner + i] += grad[t];
                    }
                }
                accumulate(nodes, *x, d);
            }
        }
        Op::ReduceSum { x, axis } => {
            if nodes[*x].requires_grad {
                let in_shape = nodes[*x].shape.clone();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let ext = in_shape[*axis];
                let mut d = vec![E::zero(); in_shape.iter().product()];
                for o in 0..outer {
                    for e in 0..ext {
                        let base = (o * ext + e) * inner;
                        for i in 0..inner {
                            d[base + i] = grad[o * inner + i];
                        }
                    }
                }
                accumulate(nodes, *x, d);
            }
        }
        Op::SumAll { x } => {
            if nodes[*x].requires_grad {
                let n = nodes[*x].data.len();
                accumulate(nodes, *x, vec![grad[0]; n]);
            }
        }
        Op::Reshape { x } => {
            if nodes[*x].requires_grad {
                accumulate(nodes, *x, grad.to_vec());
            }
        }
        Op::Transpose2 { x } => {
            if nodes[*x].requires_grad {
                let (r, c) = (nodes[*x].shape[0], nodes[*x].shape[1]);
                let mut d = vec![E::zero(); r * c];
                for j in 0..c {
                    for i in 0..r {
                        d[i * c + j] = grad[j * r + i];
                    }
                }
                accumulate(nodes, *x, d);
            }
        }
        Op::GatherRows { x, rows } => {
            if nodes[*x].requires_grad {
                let c = nodes[*x].shape[1];
                let mut d = vec![E::zero(); nodes[*x].data.len()];
                for (r, &src) in rows.iter().enumerate() {
                    let dst = &mut d[src as usize * c..(src as usize + 1) * c];
                    for (dv, &gv) in dst.iter_mut().zip(&grad[r * c..(r + 1) * c]) {
                        *dv += gv;
                    }
                }
                accumulate(nodes, *x, d);
            }
        }
        Op::RepeatRows { x, times } => {
            if nodes[*x].requires_grad {
                let (r, c) = (nodes[*x].shape[0], nodes[*x].shape[1]);
                let mut d = vec![E::zero(); r * c];
                for i in 0..r {
                    let drow = &mut d[i * c..(i + 1) * c];
                    for t in 0..*times {
                        let base = (i * times + t) * c;
                        for (dv, &gv) in drow.iter_mut().zip(&grad[base..base + c]) {
                            *dv += gv;
                        }
                    }
                }
                accumulate(nodes, *x, d);
            }
        }
        Op::GatherFlat { x, idx } => {
            if nodes[*x].requires_grad {
                let mut d = vec![E::zero(); nodes[*x].data.len()];
                for (t, &src) in idx.iter().enumerate() {
                    d[src as usize] += grad[t];
                }
                accumulate(nodes, *x, d);
            }
        }
        Op::SoftmaxCrossEntropy { logits, labels, probs } => {
            if nodes[*logits].requires_grad {
                let c = nodes[*logits].shape[1];
                let b = labels.len();
                let scale = grad[0] / E::from_f64(b as f64);
                let mut d: Vec<E> = probs.iter().map(|&p| p * scale).collect();
                for (r, &label) in labels.iter().enumerate() {
                    d[r * c + label] -= scale;
                }
                accumulate(nodes, *logits, d);
            }
        }
    }
    nodes[id].op = op;
}
