//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every op evaluates eagerly, records its inputs and
//! whatever it needs for the backward pass, and returns a [`Var`] handle.
//! Shapes are checked with assertions; they are fixed by the model code and a
//! violation is a programming error, not a data error. Ops whose validity
//! depends on values (zero-norm rows in cosine similarity) return `Result`.

use crate::alignment;
use crate::error::Result;
use crate::real::Real;
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(usize),
    LinComb(Vec<(Var, T)>),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(T, T)> },
    Silu(Var),
    AddChannel { x: Var, v: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Attention { q: Var, k: Var, v: Var, scale: T, probs: Vec<T> },
    TransposeLast2(Var),
    Reshape(Var),
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    GatherRows { table: Var, ids: Vec<usize> },
    AddBroadcast { x: Var, y: Var },
    MaskedMeanOr { x: Var, mask: Vec<bool>, fallback: Var },
    SpatialMean(Var),
    AffinePerSample { x: Var, scale: Vec<T> },
    Mse { x: Var, target: Tensor<T> },
    CosineMatrix(Var),
    MatSqDiff { a: Var, b: Var, weights: Option<Tensor<T>> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

/// Result of a backward pass: parameter gradients plus gradients of every
/// node that received one.
pub struct Gradients<T> {
    pub params: ParamStore<T>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.nodes[var.0].as_ref()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: usize) -> Var {
        let t = self.params.get(id).clone();
        self.push(t, Op::Param(id))
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param(id))
    }

    pub fn lin_comb(&mut self, terms: &[(Var, T)]) -> Var {
        assert!(!terms.is_empty());
        let shape = self.shape(terms[0].0).to_vec();
        let mut out = Tensor::zeros(&shape);
        for &(v, c) in terms {
            let x = self.value(v);
            assert_eq!(x.shape(), &shape[..], "lin_comb shape");
            for (o, &xi) in out.data_mut().iter_mut().zip(x.data()) {
                *o = *o + c * xi;
            }
        }
        self.push(out, Op::LinComb(terms.to_vec()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.lin_comb(&[(a, T::one()), (b, T::one())])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.lin_comb(&[(a, c)])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape).expect("reshape element count");
        self.push(t, Op::Reshape(x))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d kernel must be OIHW");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let geo = ConvGeom::new(&xs, &ws, stride, pad);
        let cols = im2col(self.value(x).data(), &geo);
        let mut tmp = vec![T::zero(); geo.co * geo.cols()];
        T::gemm(
            geo.co,
            geo.k(),
            geo.cols(),
            T::one(),
            self.value(w).data(),
            geo.k() as isize,
            1,
            &cols,
            geo.cols() as isize,
            1,
            T::zero(),
            &mut tmp,
            geo.cols() as isize,
            1,
        );
        let hw = geo.ho * geo.wo;
        let mut out = vec![T::zero(); geo.n * geo.co * hw];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for n in 0..geo.n {
            for co in 0..geo.co {
                let bv = bias.as_ref().map_or(T::zero(), |b| b[co]);
                let src = &tmp[co * geo.cols() + n * hw..co * geo.cols() + (n + 1) * hw];
                let dst = &mut out[(n * geo.co + co) * hw..(n * geo.co + co + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let t = Tensor::new(vec![geo.n, geo.co, geo.ho, geo.wo], out).unwrap();
        self.push(t, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        assert!(c % groups == 0, "channels must divide into groups");
        let inner: usize = xs[2..].iter().product();
        let m = c / groups * inner;
        let eps = T::lit(1e-5);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut stats = Vec::with_capacity(n * groups);
        let mf = T::lit(m as f64);
        for ni in 0..n {
            for gi in 0..groups {
                let off = (ni * c + gi * (c / groups)) * inner;
                let seg = &xv[off..off + m];
                let mean = seg.iter().copied().sum::<T>() / mf;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
                let rstd = T::one() / (var + eps).sqrt();
                stats.push((mean, rstd));
                for (j, &v) in seg.iter().enumerate() {
                    let ch = gi * (c / groups) + j / inner;
                    out[off + j] = (v - mean) * rstd * g[ch] + bt[ch];
                }
            }
        }
        let t = Tensor::new(xs, out).unwrap();
        self.push(t, Op::GroupNorm { x, gamma, beta, groups, stats })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).unwrap();
        self.push(t, Op::Silu(x))
    }

    /// `x[n, c, ...] + v[n, c]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(self.shape(v), &xs[..2], "add_channel shape");
        let inner: usize = xs[2..].iter().product();
        let vv = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            for o in chunk {
                *o = *o + vv[i];
            }
        }
        let t = Tensor::new(xs, out).unwrap();
        self.push(t, Op::AddChannel { x, v })
    }

    /// Affine map over the last axis: `x[..., in] @ w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (din, dout) = (ws[0], ws[1]);
        assert_eq!(*xs.last().unwrap(), din, "linear input width");
        let rows = self.value(x).len() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            rows,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            din as isize,
            1,
            self.value(w).data(),
            dout as isize,
            1,
            if b.is_some() { T::one() } else { T::zero() },
            &mut out,
            dout as isize,
            1,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let t = Tensor::new(shape, out).unwrap();
        self.push(t, Op::Linear { x, w, b })
    }

    /// Scaled dot-product attention over batched matrices:
    /// `softmax(q k^T / sqrt(d_k)) v` with `q: [N, n, d]`, `k: [N, m, d]`,
    /// `v: [N, m, dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let vs = self.shape(v).to_vec();
        assert_eq!(qs.len(), 3);
        assert_eq!(qs[0], ks[0]);
        assert_eq!(qs[0], vs[0]);
        assert_eq!(qs[2], ks[2], "query/key width");
        assert_eq!(ks[1], vs[1], "key/value count");
        let scale = T::one() / T::lit(qs[2] as f64).sqrt();
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            qs[0],
            qs[1],
            ks[1],
            qs[2],
            vs[2],
            scale,
        );
        let t = Tensor::new(vec![qs[0], qs[1], vs[2]], out).unwrap();
        self.push(t, Op::Attention { q, k, v, scale, probs })
    }

    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let r = xs.len();
        let (a, b) = (xs[r - 2], xs[r - 1]);
        let out = transpose_blocks(self.value(x).data(), a, b);
        let mut shape = xs;
        shape.swap(r - 2, r - 1);
        let t = Tensor::new(shape, out).unwrap();
        self.push(t, Op::TransposeLast2(x))
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (h, w) = (xs[2], xs[3]);
        let xv = self.value(x).data();
        let planes = xs[0] * xs[1];
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = xv[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(vec![xs[0], xs[1], 2 * h, 2 * w], out).unwrap();
        self.push(t, Op::Upsample2x(x))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        assert_eq!(as_[0], bs[0]);
        assert_eq!(as_[2..], bs[2..]);
        let inner: usize = as_[2..].iter().product();
        let (ca, cb) = (as_[1] * inner, bs[1] * inner);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for n in 0..as_[0] {
            out.extend_from_slice(&av[n * ca..(n + 1) * ca]);
            out.extend_from_slice(&bv[n * cb..(n + 1) * cb]);
        }
        let mut shape = as_;
        shape[1] += bs[1];
        let t = Tensor::new(shape, out).unwrap();
        self.push(t, Op::ConcatChannels(a, b))
    }

    /// Row lookup `table[ids[i], :]`, producing `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let ts = self.shape(table).to_vec();
        let d = ts[1];
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < ts[0], "row index out of range");
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out).unwrap();
        self.push(t, Op::GatherRows { table, ids: ids.to_vec() })
    }

    /// `x[b, ...] + y[...]` broadcast over the leading axis.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(&xs[1..], self.shape(y), "add_broadcast shape");
        let yv = self.value(y).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(yv.len()) {
            for (o, &yi) in chunk.iter_mut().zip(&yv) {
                *o = *o + yi;
            }
        }
        let t = Tensor::new(xs, out).unwrap();
        self.push(t, Op::AddBroadcast { x, y })
    }

    /// Mean over the masked positions of `x: [B, L, d]`; rows with an empty
    /// mask take `fallback: [d]` instead.
    pub fn masked_mean_or(&mut self, x: Var, mask: &[bool], fallback: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (b, l, d) = (xs[0], xs[1], xs[2]);
        assert_eq!(mask.len(), b * l);
        assert_eq!(self.value(fallback).len(), d);
        let xv = self.value(x).data();
        let fv = self.value(fallback).data();
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            let row = &mut out[bi * d..(bi + 1) * d];
            let count = mask[bi * l..(bi + 1) * l].iter().filter(|&&m| m).count();
            if count == 0 {
                row.copy_from_slice(fv);
                continue;
            }
            for li in 0..l {
                if mask[bi * l + li] {
                    let src = &xv[(bi * l + li) * d..(bi * l + li + 1) * d];
                    for (o, &s) in row.iter_mut().zip(src) {
                        *o = *o + s;
                    }
                }
            }
            let inv = T::one() / T::lit(count as f64);
            for o in row.iter_mut() {
                *o = *o * inv;
            }
        }
        let t = Tensor::new(vec![b, d], out).unwrap();
        self.push(t, Op::MaskedMeanOr { x, mask: mask.to_vec(), fallback })
    }

    /// Mean over every axis after the first two: `[N, C, ...] -> [N, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let inner: usize = xs[2..].iter().product();
        let inv = T::one() / T::lit(inner as f64);
        let out = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let t = Tensor::new(vec![xs[0], xs[1]], out).unwrap();
        self.push(t, Op::SpatialMean(x))
    }

    /// `offset[n, ...] + scale[n] * x[n, ...]` with constant offset and scales.
    pub fn affine_per_sample(&mut self, x: Var, scale: &[T], offset: &Tensor<T>) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs[0], scale.len());
        assert_eq!(offset.shape(), &xs[..]);
        let per = self.value(x).len() / xs[0];
        let mut out = offset.data().to_vec();
        for (i, (o, &xi)) in out.iter_mut().zip(self.value(x).data()).enumerate() {
            *o = *o + scale[i / per] * xi;
        }
        let t = Tensor::new(xs, out).unwrap();
        self.push(t, Op::AffinePerSample { x, scale: scale.to_vec() })
    }

    /// Mean squared difference to a constant target, as a scalar.
    pub fn mse(&mut self, x: Var, target: &Tensor<T>) -> Var {
        assert_eq!(self.shape(x), target.shape(), "mse shape");
        let n = T::lit(target.len() as f64);
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        self.push(Tensor::scalar(s), Op::Mse { x, target: target.clone() })
    }

    /// Pairwise cosine similarity of the rows of `x: [B, d]`.
    pub fn cosine_matrix(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let m = alignment::cosine_matrix(self.value(x).data(), xs[0], xs[1])?;
        let t = Tensor::new(vec![xs[0], xs[0]], m.into_values()).unwrap();
        Ok(self.push(t, Op::CosineMatrix(x)))
    }

    /// `(1/B^2) * sum_ij w_ij (a_ij - b_ij)^2` for `[B, B]` inputs; unit
    /// weights when `weights` is `None`.
    pub fn mat_sq_diff(&mut self, a: Var, b: Var, weights: Option<&Tensor<T>>) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        assert_eq!(self.shape(b), &s[..]);
        if let Some(w) = weights {
            assert_eq!(w.shape(), &s[..]);
        }
        let v = alignment::weighted_sq_diff(
            self.value(a).data(),
            self.value(b).data(),
            weights.map(|w| w.data()),
            s[0],
        );
        self.push(Tensor::scalar(v), Op::MatSqDiff { a, b, weights: weights.cloned() })
    }

    /// Backward pass from a scalar.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let seed = Tensor::full(self.shape(loss), T::one());
        self.backward_from(&[(loss, seed)])
    }

    /// Backward pass with explicit upstream gradients for several nodes.
    pub fn backward_from(&self, seeds: &[(Var, Tensor<T>)]) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads = self.params.zeros_like();
        for (v, g) in seeds {
            accumulate(&mut grads, *v, g.clone());
        }
        let mut kept: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads, &mut pgrads);
            kept[idx] = Some(g);
        }
        Gradients { params: pgrads, nodes: kept }
    }

    fn backward_node(
        &self,
        idx: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        pgrads: &mut ParamStore<T>,
    ) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => pgrads.get_mut(*id).add_assign(g),
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    let data = gd.iter().map(|&x| x * c).collect();
                    accumulate(grads, v, Tensor::new(g.shape().to_vec(), data).unwrap());
                }
            }
            Op::Reshape(x) => {
                let t = g.clone().reshape(self.shape(*x)).unwrap();
                accumulate(grads, *x, t);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let geo = ConvGeom::new(self.shape(*x), self.shape(*w), *stride, *pad);
                let hw = geo.ho * geo.wo;
                let ncols = geo.cols();
                let mut dtmp = vec![T::zero(); geo.co * ncols];
                for n in 0..geo.n {
                    for co in 0..geo.co {
                        dtmp[co * ncols + n * hw..co * ncols + (n + 1) * hw]
                            .copy_from_slice(&gd[(n * geo.co + co) * hw..(n * geo.co + co + 1) * hw]);
                    }
                }
                if let Some(b) = b {
                    let db: Vec<T> = dtmp.chunks(ncols).map(|r| r.iter().copied().sum()).collect();
                    accumulate(grads, *b, Tensor::new(vec![geo.co], db).unwrap());
                }
                let cols = im2col(self.value(*x).data(), &geo);
                let mut dw = vec![T::zero(); geo.co * geo.k()];
                T::gemm(
                    geo.co,
                    ncols,
                    geo.k(),
                    T::one(),
                    &dtmp,
                    ncols as isize,
                    1,
                    &cols,
                    1,
                    ncols as isize,
                    T::zero(),
                    &mut dw,
                    geo.k() as isize,
                    1,
                );
                accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw).unwrap());
                let mut dcols = cols;
                T::gemm(
                    geo.k(),
                    geo.co,
                    ncols,
                    T::one(),
                    self.value(*w).data(),
                    1,
                    geo.k() as isize,
                    &dtmp,
                    ncols as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    ncols as isize,
                    1,
                );
                let dx = col2im(&dcols, &geo);
                accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx).unwrap());
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let cg = c / groups;
                let m = cg * inner;
                let mf = T::lit(m as f64);
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for ni in 0..n {
                    for gi in 0..*groups {
                        let (mean, rstd) = stats[ni * groups + gi];
                        let off = (ni * c + gi * cg) * inner;
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..m {
                            let ch = gi * cg + j / inner;
                            let xhat = (xv[off + j] - mean) * rstd;
                            let dy = gd[off + j];
                            dg[ch] = dg[ch] + dy * xhat;
                            db[ch] = db[ch] + dy;
                            let dxh = dy * gam[ch];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xhat;
                        }
                        for j in 0..m {
                            let ch = gi * cg + j / inner;
                            let xhat = (xv[off + j] - mean) * rstd;
                            let dxh = gd[off + j] * gam[ch];
                            dx[off + j] = rstd * (dxh - s1 / mf - xhat * s2 / mf);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xs.to_vec(), dx).unwrap());
                accumulate(grads, *gamma, Tensor::new(vec![c], dg).unwrap());
                accumulate(grads, *beta, Tensor::new(vec![c], db).unwrap());
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &dy)| {
                        let s = sigmoid(v);
                        dy * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::AddChannel { x, v } => {
                let inner: usize = g.shape()[2..].iter().product();
                let dv = gd.chunks(inner).map(|c| c.iter().copied().sum()).collect();
                accumulate(grads, *v, Tensor::new(self.shape(*v).to_vec(), dv).unwrap());
                accumulate(grads, *x, g.clone());
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let rows = gd.len() / dout;
                if let Some(b) = b {
                    let mut db = vec![T::zero(); dout];
                    for row in gd.chunks(dout) {
                        for (d, &r) in db.iter_mut().zip(row) {
                            *d = *d + r;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(vec![dout], db).unwrap());
                }
                let mut dw = vec![T::zero(); din * dout];
                T::gemm(
                    din,
                    rows,
                    dout,
                    T::one(),
                    self.value(*x).data(),
                    1,
                    din as isize,
                    gd,
                    dout as isize,
                    1,
                    T::zero(),
                    &mut dw,
                    dout as isize,
                    1,
                );
                accumulate(grads, *w, Tensor::new(ws.to_vec(), dw).unwrap());
                let mut dx = vec![T::zero(); rows * din];
                T::gemm(
                    rows,
                    dout,
                    din,
                    T::one(),
                    gd,
                    dout as isize,
                    1,
                    self.value(*w).data(),
                    1,
                    dout as isize,
                    T::zero(),
                    &mut dx,
                    din as isize,
                    1,
                );
                accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx).unwrap());
            }
            Op::Attention { q, k, v, scale, probs } => {
                let qs = self.shape(*q);
                let ks = self.shape(*k);
                let vs = self.shape(*v);
                let (dq, dk, dv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    gd,
                    qs[0],
                    qs[1],
                    ks[1],
                    qs[2],
                    vs[2],
                    *scale,
                );
                accumulate(grads, *q, Tensor::new(qs.to_vec(), dq).unwrap());
                accumulate(grads, *k, Tensor::new(ks.to_vec(), dk).unwrap());
                accumulate(grads, *v, Tensor::new(vs.to_vec(), dv).unwrap());
            }
            Op::TransposeLast2(x) => {
                let xs = self.shape(*x);
                let r = xs.len();
                let dx = transpose_blocks(gd, xs[r - 1], xs[r - 2]);
                accumulate(grads, *x, Tensor::new(xs.to_vec(), dx).unwrap());
            }
            Op::Upsample2x(x) => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let mut dx = vec![T::zero(); xs.iter().product()];
                for p in 0..xs[0] * xs[1] {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let o = (p * h + y / 2) * w + xx / 2;
                            dx[o] = dx[o] + gd[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xs.to_vec(), dx).unwrap());
            }
            Op::ConcatChannels(a, b) => {
                let as_ = self.shape(*a);
                let bs = self.shape(*b);
                let inner: usize = as_[2..].iter().product();
                let (ca, cb) = (as_[1] * inner, bs[1] * inner);
                let mut da = Vec::with_capacity(as_[0] * ca);
                let mut db = Vec::with_capacity(bs[0] * cb);
                for chunk in gd.chunks(ca + cb) {
                    da.extend_from_slice(&chunk[..ca]);
                    db.extend_from_slice(&chunk[ca..]);
                }
                accumulate(grads, *a, Tensor::new(as_.to_vec(), da).unwrap());
                accumulate(grads, *b, Tensor::new(bs.to_vec(), db).unwrap());
            }
            Op::GatherRows { table, ids } => {
                let ts = self.shape(*table);
                let d = ts[1];
                let mut dt = vec![T::zero(); ts[0] * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] = dt[id * d + j] + gd[i * d + j];
                    }
                }
                accumulate(grads, *table, Tensor::new(ts.to_vec(), dt).unwrap());
            }
            Op::AddBroadcast { x, y } => {
                let ys = self.shape(*y);
                let mut dy = vec![T::zero(); ys.iter().product()];
                for chunk in gd.chunks(dy.len()) {
                    for (d, &c) in dy.iter_mut().zip(chunk) {
                        *d = *d + c;
                    }
                }
                accumulate(grads, *y, Tensor::new(ys.to_vec(), dy).unwrap());
                accumulate(grads, *x, g.clone());
            }
            Op::MaskedMeanOr { x, mask, fallback } => {
                let xs = self.shape(*x);
                let (b, l, d) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![T::zero(); b * l * d];
                let mut df = vec![T::zero(); d];
                for bi in 0..b {
                    let row = &gd[bi * d..(bi + 1) * d];
                    let count = mask[bi * l..(bi + 1) * l].iter().filter(|&&m| m).count();
                    if count == 0 {
                        for (f, &r) in df.iter_mut().zip(row) {
                            *f = *f + r;
                        }
                        continue;
                    }
                    let inv = T::one() / T::lit(count as f64);
                    for li in 0..l {
                        if mask[bi * l + li] {
                            let dst = &mut dx[(bi * l + li) * d..(bi * l + li + 1) * d];
                            for (o, &r) in dst.iter_mut().zip(row) {
                                *o = r * inv;
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xs.to_vec(), dx).unwrap());
                let fs = self.shape(*fallback).to_vec();
                accumulate(grads, *fallback, Tensor::new(fs, df).unwrap());
            }
            Op::SpatialMean(x) => {
                let xs = self.shape(*x);
                let inner: usize = xs[2..].iter().product();
                let inv = T::one() / T::lit(inner as f64);
                let mut dx = Vec::with_capacity(gd.len() * inner);
                for &gv in gd {
                    dx.extend(std::iter::repeat(gv * inv).take(inner));
                }
                accumulate(grads, *x, Tensor::new(xs.to_vec(), dx).unwrap());
            }
            Op::AffinePerSample { x, scale } => {
                let per = gd.len() / scale.len();
                let dx = gd.iter().enumerate().map(|(i, &v)| v * scale[i / per]).collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::Mse { x, target } => {
                let c = g.item() * T::lit(2.0) / T::lit(target.len() as f64);
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| c * (a - b))
                    .collect();
                accumulate(grads, *x, Tensor::new(target.shape().to_vec(), dx).unwrap());
            }
            Op::CosineMatrix(x) => {
                let xs = self.shape(*x);
                let dx = alignment::cosine_matrix_backward(
                    self.value(*x).data(),
                    node.value.data(),
                    gd,
                    xs[0],
                    xs[1],
                );
                accumulate(grads, *x, Tensor::new(xs.to_vec(), dx).unwrap());
            }
            Op::MatSqDiff { a, b, weights } => {
                let s = self.shape(*a);
                let da = alignment::weighted_sq_diff_grad(
                    self.value(*a).data(),
                    self.value(*b).data(),
                    weights.as_ref().map(|w| w.data()),
                    s[0],
                    g.item(),
                );
                let db = da.iter().map(|&v| -v).collect();
                accumulate(grads, *a, Tensor::new(s.to_vec(), da).unwrap());
                accumulate(grads, *b, Tensor::new(s.to_vec(), db).unwrap());
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Self {
        let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Self { n, ci, h, w, co, kh, kw, stride, pad, ho, wo }
    }

    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Unfolds `x: [N, C, H, W]` into `[C*kh*kw, N*Ho*Wo]`.
fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.cols();
    let hw = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.k() * ncols];
    for ci in 0..g.ci {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let plane = &x[(n * g.ci + ci) * g.h * g.w..(n * g.ci + ci + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst = &mut dst_row[n * hw + oy * g.wo..n * hw + (oy + 1) * g.wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.cols();
    let hw = g.ho * g.wo;
    let mut x = vec![T::zero(); g.n * g.ci * g.h * g.w];
    for ci in 0..g.ci {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let base = (n * g.ci + ci) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &src_row[n * hw + oy * g.wo..n * hw + (oy + 1) * g.wo];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let o = base + iy as usize * g.w + ix as usize;
                                x[o] = x[o] + s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn transpose_blocks<T: Real>(x: &[T], a: usize, b: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (blk_in, blk_out) in x.chunks(a * b).zip(out.chunks_mut(a * b)) {
        for i in 0..a {
            for j in 0..b {
                blk_out[j * a + i] = blk_in[i * b + j];
            }
        }
    }
    out
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    batch: usize,
    n: usize,
    m: usize,
    d: usize,
    dv: usize,
    scale: T,
) -> (Vec<T>, Vec<T>) {
    let mut probs = vec![T::zero(); batch * n * m];
    let mut out = vec![T::zero(); batch * n * dv];
    for b in 0..batch {
        let qb = &q[b * n * d..(b + 1) * n * d];
        let kb = &k[b * m * d..(b + 1) * m * d];
        let vb = &v[b * m * dv..(b + 1) * m * dv];
        let pb = &mut probs[b * n * m..(b + 1) * n * m];
        T::gemm(n, d, m, scale, qb, d as isize, 1, kb, 1, d as isize, T::zero(), pb, m as isize, 1);
        for row in pb.chunks_mut(m) {
            softmax_in_place(row);
        }
        let ob = &mut out[b * n * dv..(b + 1) * n * dv];
        T::gemm(n, m, dv, T::one(), pb, m as isize, 1, vb, dv as isize, 1, T::zero(), ob, dv as isize, 1);
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    batch: usize,
    n: usize,
    m: usize,
    d: usize,
    dv: usize,
    scale: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dvv = vec![T::zero(); v.len()];
    let mut ds = vec![T::zero(); n * m];
    for b in 0..batch {
        let qb = &q[b * n * d..(b + 1) * n * d];
        let kb = &k[b * m * d..(b + 1) * m * d];
        let vb = &v[b * m * dv..(b + 1) * m * dv];
        let pb = &probs[b * n * m..(b + 1) * n * m];
        let gb = &dout[b * n * dv..(b + 1) * n * dv];
        // dP = dO v^T
        T::gemm(n, dv, m, T::one(), gb, dv as isize, 1, vb, 1, dv as isize, T::zero(), &mut ds, m as isize, 1);
        // dV = P^T dO
        T::gemm(
            m,
            n,
            dv,
            T::one(),
            pb,
            1,
            m as isize,
            gb,
            dv as isize,
            1,
            T::zero(),
            &mut dvv[b * m * dv..(b + 1) * m * dv],
            dv as isize,
            1,
        );
        for (dsr, pr) in ds.chunks_mut(m).zip(pb.chunks(m)) {
            let dot = dsr.iter().zip(pr).map(|(&a, &p)| a * p).sum::<T>();
            for (x, &p) in dsr.iter_mut().zip(pr) {
                *x = p * (*x - dot);
            }
        }
        T::gemm(
            n,
            m,
            d,
            scale,
            &ds,
            m as isize,
            1,
            kb,
            d as isize,
            1,
            T::zero(),
            &mut dq[b * n * d..(b + 1) * n * d],
            d as isize,
            1,
        );
        T::gemm(
            m,
            n,
            d,
            scale,
            &ds,
            1,
            m as isize,
            qb,
            d as isize,
            1,
            T::zero(),
            &mut dk[b * m * d..(b + 1) * m * d],
            d as isize,
            1,
        );
    }
    (dq, dk, dvv)
}
