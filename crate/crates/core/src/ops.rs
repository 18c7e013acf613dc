//! Differentiable operations recorded on a [`Graph`].
//!
//! Elementwise binary ops require identical shapes. Broadcasting is explicit
//! through [`Graph::expand`].

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{split_axis, strides, Real, Tensor};

fn same_shape<F: Real>(g: &Graph<F>, a: Var, b: Var, op: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(dim_err!("{op}: shapes {:?} and {:?} differ", g.shape(a), g.shape(b)));
    }
    Ok(())
}

fn check_axis(shape: &[usize], axis: usize, op: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(dim_err!("{op}: axis {axis} out of range for shape {shape:?}"));
    }
    Ok(())
}

/// Stride, padding and output padding of a transposed convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransposeSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output_padding: [usize; 3],
}

impl TransposeSpec {
    pub fn unit() -> Self {
        TransposeSpec { stride: [1; 3], padding: [0; 3], output_padding: [0; 3] }
    }
}

impl<F: Real> Graph<F> {
    // ---------------------------------------------------------------- pointwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, &[a, b], |_, g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, &[a, b], |_, g, _| vec![Some(g.clone()), Some(g.map(|x| -x))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, &[a, b], move |gr, g, need| {
            vec![
                need[0].then(|| g.zip_map(gr.value(b), |d, y| d * y)),
                need[1].then(|| g.zip_map(gr.value(a), |d, x| d * x)),
            ]
        }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "div")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push(v, &[a, b], move |gr, g, need| {
            let bv = gr.value(b);
            vec![
                need[0].then(|| g.zip_map(bv, |d, y| d / y)),
                need[1].then(|| {
                    let av = gr.value(a);
                    Tensor::from_fn(g.shape(), |i| {
                        let y = bv.data()[i];
                        -g.data()[i] * av.data()[i] / (y * y)
                    })
                }),
            ]
        }))
    }

    /// `a / b` where `|b| > min_abs`, and `0` elsewhere (no gradient there).
    pub fn safe_div(&mut self, a: Var, b: Var, min_abs: F) -> Result<Var> {
        same_shape(self, a, b, "safe_div")?;
        let live = move |y: F| y.abs() > min_abs;
        let v = self.value(a).zip_map(self.value(b), |x, y| if live(y) { x / y } else { F::zero() });
        Ok(self.push(v, &[a, b], move |gr, g, need| {
            let av = gr.value(a);
            let bv = gr.value(b);
            vec![
                need[0].then(|| g.zip_map(bv, |d, y| if live(y) { d / y } else { F::zero() })),
                need[1].then(|| {
                    Tensor::from_fn(g.shape(), |i| {
                        let y = bv.data()[i];
                        if live(y) {
                            -(g.data()[i] / y) * (av.data()[i] / y)
                        } else {
                            F::zero()
                        }
                    })
                }),
            ]
        }))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -F::one())
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, &[a], |_, g, _| vec![Some(g.clone())])
    }

    pub fn mul_scalar(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, &[a], move |_, g, _| vec![Some(g.map(|d| d * s))])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, &[a], move |gr, g, _| {
            vec![Some(g.zip_map(gr.value(a), |d, x| d * (x + x)))]
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        let out = Var(self.len());
        self.push(v, &[a], move |gr, g, _| vec![Some(g.zip_map(gr.value(out), |d, y| d * y))])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.push(v, &[a], move |gr, g, _| vec![Some(g.zip_map(gr.value(a), |d, x| d / x))])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let out = Var(self.len());
        self.push(v, &[a], move |gr, g, _| {
            vec![Some(g.zip_map(gr.value(out), |d, y| d * y * (F::one() - y)))]
        })
    }

    /// `ln(sigmoid(a))`, stable for large negative inputs.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log_sigmoid);
        self.push(v, &[a], move |gr, g, _| {
            vec![Some(g.zip_map(gr.value(a), |d, x| d * sigmoid(-x)))]
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        self.push(v, &[a], move |gr, g, _| {
            vec![Some(g.zip_map(gr.value(a), |d, x| if x > F::zero() { d } else { F::zero() }))]
        })
    }

    /// Replaces entries where `mask` is true by `fill`; those entries pass no
    /// gradient. The replacement is a literal write, so the output never
    /// depends on the replaced values.
    pub fn select_const(&mut self, a: Var, mask: &[bool], fill: F) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(dim_err!("select_const: mask of {} for {:?}", mask.len(), self.shape(a)));
        }
        let mask = mask.to_vec();
        let src = self.value(a);
        let v = Tensor::from_fn(src.shape(), |i| if mask[i] { fill } else { src.data()[i] });
        Ok(self.push(v, &[a], move |_, g, _| {
            vec![Some(Tensor::from_fn(g.shape(), |i| if mask[i] { F::zero() } else { g.data()[i] }))]
        }))
    }

    // ------------------------------------------------------------------ shape

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        let orig = self.shape(a).to_vec();
        Ok(self.push(v, &[a], move |_, g, _| vec![Some(g.clone().reshaped(&orig).unwrap())]))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("permute: {perm:?} is not a permutation of rank {}", shape.len()));
        }
        let v = permute_tensor(self.value(a), perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.push(v, &[a], move |_, g, _| vec![Some(permute_tensor(g, &inverse))]))
    }

    /// Repeats a size-1 axis `n` times.
    pub fn expand(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis, "expand")?;
        if shape[axis] != 1 {
            return Err(dim_err!("expand: axis {axis} of {shape:?} is not 1"));
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let block = &src[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(block);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = n;
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(v, &[a], move |_, g, _| {
            let gd = g.data();
            let mut acc = vec![F::zero(); outer * inner];
            for o in 0..outer {
                let dst = &mut acc[o * inner..(o + 1) * inner];
                for r in 0..n {
                    let src = &gd[(o * n + r) * inner..][..inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
            vec![Some(Tensor::new(&shape, acc).unwrap())]
        }))
    }

    /// Inserts a size-1 axis at `axis` and expands it to `n`.
    pub fn tile_axis(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let mut shape = self.shape(a).to_vec();
        if axis > shape.len() {
            return Err(dim_err!("tile_axis: axis {axis} out of range for {shape:?}"));
        }
        shape.insert(axis, 1);
        let r = self.reshape(a, &shape)?;
        self.expand(r, axis, n)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis(&base, axis, "concat")?;
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(dim_err!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &e) in parts.iter().zip(&extents) {
                data.extend_from_slice(&self.value(p).data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let v = Tensor::new(&shape, data)?;
        let parts_shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        Ok(self.push(v, parts, move |_, g, need| {
            let gd = g.data();
            let mut offset = 0;
            let mut out = Vec::with_capacity(extents.len());
            for (i, &e) in extents.iter().enumerate() {
                if need[i] {
                    let mut d = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        d.extend_from_slice(&gd[(o * total + offset) * inner..][..e * inner]);
                    }
                    out.push(Some(Tensor::new(&parts_shapes[i], d).unwrap()));
                } else {
                    out.push(None);
                }
                offset += e;
            }
            out
        }))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis, "slice")?;
        if start + len > shape[axis] {
            return Err(dim_err!("slice: [{start}, {}) exceeds axis {axis} of {shape:?}", start + len));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * n + start) * inner..][..len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(v, &[a], move |_, g, _| {
            let mut d = vec![F::zero(); outer * n * inner];
            for o in 0..outer {
                d[(o * n + start) * inner..][..len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
            }
            vec![Some(Tensor::new(&shape, d).unwrap())]
        }))
    }

    /// Rows of a `[V, D]` table selected by `indices`, giving `[n, D]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(dim_err!("gather_rows: table must be 2-D, got {shape:?}"));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(dim_err!("gather_rows: index {bad} out of range for {rows} rows"));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let v = Tensor::new(&[indices.len(), d], data)?;
        let indices = indices.to_vec();
        Ok(self.push(v, &[table], move |_, g, _| {
            let mut acc = Tensor::zeros(&shape);
            for (r, &i) in indices.iter().enumerate() {
                let dst = &mut acc.data_mut()[i * d..(i + 1) * d];
                for (x, &y) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                    *x = *x + y;
                }
            }
            vec![Some(acc)]
        }))
    }

    // -------------------------------------------------------------- reductions

    /// Sum over `axis`; the axis is kept with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis, "sum_axis")?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for r in 0..n {
                for (d, &s) in dst.iter_mut().zip(&src[(o * n + r) * inner..][..inner]) {
                    *d = *d + s;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(v, &[a], move |_, g, _| {
            let mut d = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for _ in 0..n {
                    d.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::new(&shape, d).unwrap())]
        }))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        Ok(self.mul_scalar(s, F::one() / F::from_usize(n).unwrap()))
    }

    /// Max over `axis`, kept with extent 1. Ties route the gradient to the
    /// first maximal element.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis, "max_axis")?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![F::neg_infinity(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for r in 0..n {
                for j in 0..inner {
                    let i = (o * n + r) * inner + j;
                    if src[i] > data[o * inner + j] || r == 0 {
                        data[o * inner + j] = src[i];
                        arg[o * inner + j] = i;
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(v, &[a], move |_, g, _| {
            let mut d = Tensor::zeros(&shape);
            for (k, &i) in arg.iter().enumerate() {
                d.data_mut()[i] = d.data()[i] + g.data()[k];
            }
            vec![Some(d)]
        }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, &[a], move |_, g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.mul_scalar(s, F::one() / F::from_usize(n).unwrap())
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis, "softmax")?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![F::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |r: usize| (o * n + r) * inner + j;
                let m = (0..n).map(|r| src[idx(r)]).fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for r in 0..n {
                    let e = (src[idx(r)] - m).exp();
                    data[idx(r)] = e;
                    z = z + e;
                }
                for r in 0..n {
                    data[idx(r)] = data[idx(r)] / z;
                }
            }
        }
        let v = Tensor::new(&shape, data)?;
        let out = Var(self.len());
        Ok(self.push(v, &[a], move |gr, g, _| {
            let y = gr.value(out).data();
            let gd = g.data();
            let mut d = vec![F::zero(); y.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let idx = |r: usize| (o * n + r) * inner + j;
                    let dot: F = (0..n).map(|r| gd[idx(r)] * y[idx(r)]).sum();
                    for r in 0..n {
                        d[idx(r)] = y[idx(r)] * (gd[idx(r)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(&shape, d).unwrap())]
        }))
    }

    // ------------------------------------------------------------ linear algebra

    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]` with
    /// identical leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(dim_err!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        }
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        if sb[r - 2] != k {
            return Err(dim_err!("matmul: inner extents differ in {sa:?} x {sb:?}"));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![F::zero(); batch * m * n];
        for i in 0..batch {
            small_gemm(m, k, n, &av[i * m * k..][..m * k], k, 1, &bv[i * k * n..][..k * n], n, 1, &mut out[i * m * n..][..m * n]);
        }
        let mut shape = sa.clone();
        shape[r - 1] = n;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, &[a, b], move |gr, g, need| {
            let av = gr.value(a).data();
            let bv = gr.value(b).data();
            let gd = g.data();
            let da = need[0].then(|| {
                let mut d = vec![F::zero(); batch * m * k];
                for i in 0..batch {
                    // dA = dC * B^T
                    small_gemm(m, n, k, &gd[i * m * n..][..m * n], n, 1, &bv[i * k * n..][..k * n], 1, n, &mut d[i * m * k..][..m * k]);
                }
                Tensor::new(&sa, d).unwrap()
            });
            let db = need[1].then(|| {
                let mut d = vec![F::zero(); batch * k * n];
                for i in 0..batch {
                    // dB = A^T * dC
                    small_gemm(k, m, n, &av[i * m * k..][..m * k], 1, k, &gd[i * m * n..][..m * n], n, 1, &mut d[i * k * n..][..k * n]);
                }
                Tensor::new(&sb, d).unwrap()
            });
            vec![da, db]
        }))
    }

    /// `x W^T + b` for `x: [..., in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[1]) {
            return Err(dim_err!("linear: input {sx:?} does not match weight {sw:?}"));
        }
        let (o, i) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(dim_err!("linear: bias {:?} for {o} outputs", self.shape(b)));
            }
        }
        let rows = self.value(x).len() / i;
        let mut out = vec![F::zero(); rows * o];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                out[r * o..(r + 1) * o].copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { F::one() } else { F::zero() };
        F::gemm(rows, i, o, F::one(), self.value(x).data(), i as isize, 1, self.value(w).data(), 1, i as isize, beta, &mut out, o as isize, 1);
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = o;
        let v = Tensor::new(&shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(v, &parents, move |gr, g, need| {
            let xv = gr.value(x).data();
            let wv = gr.value(w).data();
            let gd = g.data();
            let dx = need[0].then(|| {
                let mut d = vec![F::zero(); rows * i];
                F::gemm(rows, o, i, F::one(), gd, o as isize, 1, wv, i as isize, 1, F::zero(), &mut d, i as isize, 1);
                Tensor::new(&sx, d).unwrap()
            });
            let dw = need[1].then(|| {
                let mut d = vec![F::zero(); o * i];
                F::gemm(o, rows, i, F::one(), gd, 1, o as isize, xv, i as isize, 1, F::zero(), &mut d, i as isize, 1);
                Tensor::new(&sw, d).unwrap()
            });
            let mut out = vec![dx, dw];
            if need.len() == 3 {
                out.push(need[2].then(|| {
                    let mut d = vec![F::zero(); o];
                    for r in 0..rows {
                        for (a, &v) in d.iter_mut().zip(&gd[r * o..(r + 1) * o]) {
                            *a = *a + v;
                        }
                    }
                    Tensor::new(&[o], d).unwrap()
                }));
            }
            out
        }))
    }

    // ------------------------------------------------------------ convolutions

    /// 3-D convolution: `x: [C_in, T, H, W]`, `w: [C_out, C_in, kt, kh, kw]`,
    /// optional `b: [C_out]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 5 {
            return Err(dim_err!("conv3d: expected [C,T,H,W] input and 5-D weight, got {sx:?}, {sw:?}"));
        }
        if sx[0] != sw[1] {
            return Err(dim_err!("conv3d: input has {} channels, weight expects {}", sx[0], sw[1]));
        }
        let c_out = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(dim_err!("conv3d: bias {:?} for {c_out} channels", self.shape(b)));
            }
        }
        let geom = ConvGeom::new(sx[0], [sx[1], sx[2], sx[3]], [sw[2], sw[3], sw[4]], stride, padding)?;
        let out = kernels::conv_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            c_out,
        );
        let [ot, oh, ow] = geom.output;
        let v = Tensor::new(&[c_out, ot, oh, ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(v, &parents, move |gr, g, need| {
            let want = [need[0], need[1], need.get(2).copied().unwrap_or(false)];
            let (dx, dw, db) = kernels::conv_backward(
                &geom,
                gr.value(x).data(),
                gr.value(w).data(),
                g.data(),
                c_out,
                want,
            );
            let mut out = vec![
                dx.map(|d| Tensor::new(&sx, d).unwrap()),
                dw.map(|d| Tensor::new(&sw, d).unwrap()),
            ];
            if need.len() == 3 {
                out.push(db.map(|d| Tensor::new(&[c_out], d).unwrap()));
            }
            out
        }))
    }

    /// Transposed 3-D convolution: `x: [C_in, T, H, W]`,
    /// `w: [C_in, C_out, kt, kh, kw]`. Output extents per axis are
    /// `(n - 1) * stride - 2 * padding + kernel + output_padding`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: TransposeSpec) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 5 {
            return Err(dim_err!("conv_transpose3d: expected [C,T,H,W] input and 5-D weight, got {sx:?}, {sw:?}"));
        }
        if sx[0] != sw[0] {
            return Err(dim_err!("conv_transpose3d: input has {} channels, weight expects {}", sx[0], sw[0]));
        }
        let (c_in, c_out) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(dim_err!("conv_transpose3d: bias {:?} for {c_out} channels", self.shape(b)));
            }
        }
        let kernel = [sw[2], sw[3], sw[4]];
        let mut out_ext = [0usize; 3];
        for a in 0..3 {
            if spec.stride[a] == 0 || spec.output_padding[a] >= spec.stride[a] {
                return Err(dim_err!("conv_transpose3d: invalid stride/output padding {spec:?}"));
            }
            let full = (sx[a + 1] - 1) * spec.stride[a] + kernel[a] + spec.output_padding[a];
            if full < 2 * spec.padding[a] + 1 {
                return Err(dim_err!("conv_transpose3d: padding {spec:?} too large"));
            }
            out_ext[a] = full - 2 * spec.padding[a];
        }
        let geom = ConvGeom::new(c_out, out_ext, kernel, spec.stride, spec.padding)?;
        if geom.output != [sx[1], sx[2], sx[3]] {
            return Err(dim_err!("conv_transpose3d: inconsistent geometry {geom:?} for input {sx:?}"));
        }
        let out = kernels::conv_transpose_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            c_in,
        );
        let v = Tensor::new(&[c_out, out_ext[0], out_ext[1], out_ext[2]], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(v, &parents, move |gr, g, need| {
            let want = [need[0], need[1], need.get(2).copied().unwrap_or(false)];
            let (dx, dw, db) = kernels::conv_transpose_backward(
                &geom,
                gr.value(x).data(),
                gr.value(w).data(),
                g.data(),
                c_in,
                want,
            );
            let mut out = vec![
                dx.map(|d| Tensor::new(&sx, d).unwrap()),
                dw.map(|d| Tensor::new(&sw, d).unwrap()),
            ];
            if need.len() == 3 {
                out.push(db.map(|d| Tensor::new(&[c_out], d).unwrap()));
            }
            out
        }))
    }

    /// 1-D convolution, no padding, stride 1: `x: [C_in, L]`,
    /// `w: [C_out, C_in, k]` -> `[C_out, L - k + 1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 2 || sw.len() != 3 {
            return Err(dim_err!("conv1d: expected [C,L] input and 3-D weight, got {sx:?}, {sw:?}"));
        }
        let x4 = self.reshape(x, &[sx[0], 1, 1, sx[1]])?;
        let w5 = self.reshape(w, &[sw[0], sw[1], 1, 1, sw[2]])?;
        let y = self.conv3d(x4, w5, b, [1; 3], [0; 3])?;
        let l = self.shape(y)[3];
        self.reshape(y, &[sw[0], l])
    }

    /// 2-D convolution, no padding, stride 1: `x: [C_in, H, W]`,
    /// `w: [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 {
            return Err(dim_err!("conv2d: expected [C,H,W] input and 4-D weight, got {sx:?}, {sw:?}"));
        }
        let x4 = self.reshape(x, &[sx[0], 1, sx[1], sx[2]])?;
        let w5 = self.reshape(w, &[sw[0], sw[1], 1, sw[2], sw[3]])?;
        let y = self.conv3d(x4, w5, b, [1; 3], [0; 3])?;
        let s = self.shape(y).to_vec();
        self.reshape(y, &[s[0], s[2], s[3]])
    }

    /// Max-pooling over `[C, T, H, W]` without padding.
    pub fn maxpool3d(&mut self, x: Var, kernel: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(dim_err!("maxpool3d: expected [C,T,H,W], got {sx:?}"));
        }
        let geom = ConvGeom::new(sx[0], [sx[1], sx[2], sx[3]], kernel, stride, [0; 3])?;
        let (vals, arg) = kernels::maxpool_forward(&geom, self.value(x).data());
        let [ot, oh, ow] = geom.output;
        let v = Tensor::new(&[sx[0], ot, oh, ow], vals)?;
        Ok(self.push(v, &[x], move |_, g, _| {
            let mut d = Tensor::zeros(&sx);
            for (k, &i) in arg.iter().enumerate() {
                d.data_mut()[i] = d.data()[i] + g.data()[k];
            }
            vec![Some(d)]
        }))
    }

    /// Max-pooling over `[C, L]`.
    pub fn maxpool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(dim_err!("maxpool1d: expected [C,L], got {sx:?}"));
        }
        let x4 = self.reshape(x, &[sx[0], 1, 1, sx[1]])?;
        let y = self.maxpool3d(x4, [1, 1, kernel], [1, 1, stride])?;
        let l = self.shape(y)[3];
        self.reshape(y, &[sx[0], l])
    }

    // ------------------------------------------------------------------ losses

    /// Mean sigmoid cross-entropy between `logits` and a `{0,1}` target of the
    /// same shape, computed in logit space.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<F>) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(dim_err!(
                "bce_with_logits: logits {:?} vs target {:?}",
                self.shape(logits),
                target.shape()
            ));
        }
        let n = F::from_usize(target.len().max(1)).unwrap();
        let x = self.value(logits);
        let total: F = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &p)| x.max(F::zero()) - x * p + (F::one() + (-x.abs()).exp()).ln())
            .sum();
        let target = target.clone();
        Ok(self.push(Tensor::scalar(total / n), &[logits], move |gr, g, _| {
            let s = g.item() / n;
            vec![Some(gr.value(logits).zip_map(&target, |x, p| (sigmoid(x) - p) * s))]
        }))
    }
}

/// `C = A B` into a row-major `m x n` output, with strided operands. Tiny
/// products use a direct loop.
#[allow(clippy::too_many_arguments)]
fn small_gemm<F: Real>(m: usize, k: usize, n: usize, a: &[F], rsa: usize, csa: usize, b: &[F], rsb: usize, csb: usize, c: &mut [F]) {
    if m * k * n > 512 {
        F::gemm(m, k, n, F::one(), a, rsa as isize, csa as isize, b, rsb as isize, csb as isize, F::zero(), c, n as isize, 1);
        return;
    }
    for i in 0..m {
        for j in 0..n {
            let mut acc = F::zero();
            for p in 0..k {
                acc = acc + a[i * rsa + p * csa] * b[p * rsb + j * csb];
            }
            c[i * n + j] = acc;
        }
    }
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn log_sigmoid<F: Real>(x: F) -> F {
    // ln(sigmoid(x)) = -softplus(-x)
    if x >= F::zero() {
        -(F::one() + (-x).exp()).ln()
    } else {
        x - (F::one() + x.exp()).ln()
    }
}

pub fn permute_tensor<F: Real>(t: &Tensor<F>, perm: &[usize]) -> Tensor<F> {
    let shape = t.shape();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.len();
    let mut data = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let src = t.data();
    let mut offset = 0usize;
    for _ in 0..n {
        data.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, data).unwrap()
}
