//! Primitive operations: forward construction and the matching adjoints.

use super::conv::{col2im, im2col, ConvGeom};
use super::{Op, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub(crate) struct BmmSpec {
    a: Var,
    b: Var,
    ta: bool,
    tb: bool,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    a_cols: usize,
    b_cols: usize,
}

impl BmmSpec {
    fn a_strides(&self) -> (isize, isize) {
        strides(self.ta, self.a_cols)
    }
    fn b_strides(&self) -> (isize, isize) {
        strides(self.tb, self.b_cols)
    }
    fn a_off(&self, s: usize) -> usize {
        if self.a_batched {
            s * self.m * self.k
        } else {
            0
        }
    }
    fn b_off(&self, s: usize) -> usize {
        if self.b_batched {
            s * self.k * self.n
        } else {
            0
        }
    }
}

fn strides(transposed: bool, cols: usize) -> (isize, isize) {
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

fn split_batch(shape: &[usize]) -> Option<(Option<usize>, usize, usize)> {
    match *shape {
        [r, c] => Some((None, r, c)),
        [b, r, c] => Some((Some(b), r, c)),
        _ => None,
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Tape<T> {
    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.values[x.0].map(f);
        let r = self.requires[x.0];
        self.push(out, op, r)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return shape_err(name, va.shape(), vb.shape());
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        let r = self.any_requires(&[a, b]);
        Ok(self.push(out, op, r))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.values[a.0].rank() != 2 || self.values[b.0].rank() != 2 {
            return shape_err("matmul", self.shape(a), self.shape(b));
        }
        self.bmm(a, b, false, false)
    }

    /// Batched matrix product `op(a) * op(b)` where `op` optionally transposes
    /// the trailing two axes. A rank-2 operand is broadcast across the batch.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (Some((ba, ra, ca)), Some((bb, rb, cb))) = (split_batch(&sa), split_batch(&sb)) else {
            return shape_err("bmm", &sa, &sb);
        };
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != kb {
            return shape_err("bmm", &sa, &sb);
        }
        let batch = match (ba, bb) {
            (Some(x), Some(y)) if x != y => return shape_err("bmm", &sa, &sb),
            (Some(x), _) | (None, Some(x)) => x,
            (None, None) => 1,
        };
        let spec = BmmSpec {
            a,
            b,
            ta,
            tb,
            batch,
            m,
            k,
            n,
            a_batched: ba.is_some(),
            b_batched: bb.is_some(),
            a_cols: ca,
            b_cols: cb,
        };
        let mut out = vec![T::zero(); batch * m * n];
        let (rsa, csa) = spec.a_strides();
        let (rsb, csb) = spec.b_strides();
        let (da, db) = (self.values[a.0].data(), self.values[b.0].data());
        for s in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &da[spec.a_off(s)..],
                rsa,
                csa,
                &db[spec.b_off(s)..],
                rsb,
                csb,
                T::zero(),
                &mut out[s * m * n..],
                n as isize,
                1,
            );
        }
        let shape = if ba.is_some() || bb.is_some() {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let r = self.any_requires(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Bmm(spec), r))
    }

    /// Cross-correlation of `x: [b, c, h, w]` with `w: [c_out, c, kh, kw]`
    /// plus an optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (b, c, h, wd) = self.values[x.0].dims4()?;
        let (co, ci, kh, kw) = self.values[w.0].dims4()?;
        if ci != c {
            return shape_err("conv2d", self.shape(x), self.shape(w));
        }
        check_bias(self, bias, co, "conv2d")?;
        let g = ConvGeom::forward(c, h, wd, kh, kw, stride, pad)?;
        let (pk, l) = (g.patch_len(), g.positions());
        let mut out = vec![T::zero(); b * co * l];
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); pk * l]
        };
        let xd = self.values[x.0].data();
        let wdata = self.values[w.0].data();
        for s in 0..b {
            let img = &xd[s * g.image_len()..(s + 1) * g.image_len()];
            let src: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(img, &g, &mut cols);
                &cols
            };
            T::gemm(
                co,
                pk,
                l,
                T::one(),
                wdata,
                pk as isize,
                1,
                src,
                l as isize,
                1,
                T::zero(),
                &mut out[s * co * l..],
                l as isize,
                1,
            );
        }
        if let Some(bv) = bias {
            add_channel_bias(&mut out, self.values[bv.0].data(), l);
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        let r = self.any_requires(&parents);
        let out = Tensor::new(&[b, co, g.oh, g.ow], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                bias,
                geom: g,
            },
            r,
        ))
    }

    /// Transposed convolution (the adjoint of [`Tape::conv2d`]) of
    /// `x: [b, c_in, ih, iw]` with `w: [c_in, c_out, kh, kw]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (b, ci, ih, iw) = self.values[x.0].dims4()?;
        let (wci, co, kh, kw) = self.values[w.0].dims4()?;
        if wci != ci {
            return shape_err("conv_transpose2d", self.shape(x), self.shape(w));
        }
        check_bias(self, bias, co, "conv_transpose2d")?;
        let g = ConvGeom::transposed(co, ih, iw, kh, kw, stride, pad)?;
        let (pk, l) = (g.patch_len(), g.positions());
        let mut out = vec![T::zero(); b * g.image_len()];
        let mut cols = vec![T::zero(); pk * l];
        let xd = self.values[x.0].data();
        let wdata = self.values[w.0].data();
        for s in 0..b {
            T::gemm(
                pk,
                ci,
                l,
                T::one(),
                wdata,
                1,
                pk as isize,
                &xd[s * ci * l..],
                l as isize,
                1,
                T::zero(),
                &mut cols,
                l as isize,
                1,
            );
            col2im(&cols, &g, &mut out[s * g.image_len()..(s + 1) * g.image_len()]);
        }
        if let Some(bv) = bias {
            add_channel_bias(&mut out, self.values[bv.0].data(), g.h * g.w);
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        let r = self.any_requires(&parents);
        let out = Tensor::new(&[b, co, g.h, g.w], out)?;
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                x,
                w,
                bias,
                geom: g,
            },
            r,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    /// `1 - x`, element-wise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.neg(x);
        self.add_scalar(n, T::one())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].sum();
        let r = self.requires[x.0];
        self.push(Tensor::scalar(s), Op::Sum(x), r)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.values[x.0].numel();
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = self.values[x.0].sum() / T::of(n as f64);
        let r = self.requires[x.0];
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), r))
    }

    /// Concatenate along axis 1 (channels).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if base.len() < 2 {
            return shape_err("concat", &base, &[0, 0]);
        }
        let mut channels = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return shape_err("concat", &base, s);
            }
            channels += s[1];
        }
        let (outer, inner) = (base[0], base[2..].iter().product::<usize>());
        let mut data = Vec::with_capacity(outer * channels * inner);
        for o in 0..outer {
            for p in parts {
                let v = &self.values[p.0];
                let len = v.shape()[1] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base.clone();
        shape[1] = channels;
        let r = self.any_requires(parts);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec()), r))
    }

    /// Channels `start..start + len` along axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start + len > s[1] {
            return shape_err("slice_channels", &s, &[start, len]);
        }
        let inner: usize = s[2..].iter().product();
        let v = self.values[x.0].data();
        let mut data = Vec::with_capacity(s[0] * len * inner);
        for o in 0..s[0] {
            let base = (o * s[1] + start) * inner;
            data.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        let r = self.requires[x.0];
        Ok(self.push(Tensor::new(&shape, data)?, Op::SliceChannels { x, start }, r))
    }

    /// Split along axis 1 into two equal halves.
    pub fn split_half(&mut self, x: Var) -> Result<(Var, Var)> {
        let c = self.shape(x).get(1).copied().unwrap_or(0);
        if c % 2 != 0 {
            return Err(Error::Config(format!("cannot split {c} channels in half")));
        }
        Ok((
            self.slice_channels(x, 0, c / 2)?,
            self.slice_channels(x, c / 2, c / 2)?,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.values[x.0].clone().reshape(shape)?;
        let r = self.requires[x.0];
        Ok(self.push(out, Op::Reshape(x), r))
    }

    /// Repeat a single-channel `[b, 1, ...]` tensor to `c` channels.
    pub fn broadcast_channels(&mut self, x: Var, c: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[1] != 1 {
            return shape_err("broadcast_channels", &s, &[s.first().copied().unwrap_or(0), 1]);
        }
        let inner: usize = s[2..].iter().product();
        let v = self.values[x.0].data();
        let mut data = Vec::with_capacity(s[0] * c * inner);
        for o in 0..s[0] {
            for _ in 0..c {
                data.extend_from_slice(&v[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s;
        shape[1] = c;
        let r = self.requires[x.0];
        Ok(self.push(Tensor::new(&shape, data)?, Op::BroadcastChannels(x), r))
    }

    /// Instance normalisation: per sample and channel, standardise over the
    /// spatial extent, then apply the per-channel affine `gamma`, `beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (b, c, h, w) = self.values[x.0].dims4()?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return shape_err("instance_norm", self.shape(x), self.shape(p));
            }
        }
        let n = h * w;
        let eps = T::of(NORM_EPS);
        let nf = T::of(n as f64);
        let xd = self.values[x.0].data();
        let (gd, bd) = (self.values[gamma.0].data(), self.values[beta.0].data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); b * c];
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..b {
            for ch in 0..c {
                let idx = s * c + ch;
                let plane = &xd[idx * n..(idx + 1) * n];
                let mean = plane.iter().copied().sum::<T>() / nf;
                let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                let is = T::one() / (var + eps).sqrt();
                inv_std[idx] = is;
                for j in 0..n {
                    let xh = (plane[j] - mean) * is;
                    xhat[idx * n + j] = xh;
                    out[idx * n + j] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let r = self.any_requires(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&[b, c, h, w], out)?,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            r,
        ))
    }
}

fn check_bias<T: Scalar>(tape: &Tape<T>, bias: Option<Var>, co: usize, op: &'static str) -> Result<()> {
    match bias {
        Some(bv) if tape.shape(bv) != [co] => shape_err(op, tape.shape(bv), &[co]),
        _ => Ok(()),
    }
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    let co = bias.len();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % co];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn acc<T: Scalar>(lo: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    lo[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// Propagate the gradient `g` of node `i` into its parents' accumulators.
pub(crate) fn backward_node<T: Scalar>(
    op: &Op<T>,
    i: usize,
    g: &[T],
    values: &[Tensor<T>],
    requires: &[bool],
    lo: &mut [Option<Vec<T>>],
) {
    let val = |v: Var| values[v.0].data();
    let len = |v: Var| values[v.0].numel();
    let out = values[i].data();
    let elementwise = |x: Var, lo: &mut [Option<Vec<T>>], f: &dyn Fn(usize) -> T| {
        if requires[x.0] {
            let d = acc(lo, x, len(x));
            for (j, dj) in d.iter_mut().enumerate() {
                *dj = *dj + g[j] * f(j);
            }
        }
    };
    match op {
        Op::Leaf => {}
        Op::Bmm(s) => {
            let (rsa, csa) = s.a_strides();
            let (rsb, csb) = s.b_strides();
            let mn = s.m * s.n;
            if requires[s.a.0] {
                let bv = val(s.b);
                let da = acc(lo, s.a, len(s.a));
                for b in 0..s.batch {
                    // d op(A) = dC op(B)^T
                    T::gemm(
                        s.m,
                        s.n,
                        s.k,
                        T::one(),
                        &g[b * mn..],
                        s.n as isize,
                        1,
                        &bv[s.b_off(b)..],
                        csb,
                        rsb,
                        T::one(),
                        &mut da[s.a_off(b)..],
                        rsa,
                        csa,
                    );
                }
            }
            if requires[s.b.0] {
                let av = val(s.a);
                let db = acc(lo, s.b, len(s.b));
                for b in 0..s.batch {
                    // d op(B) = op(A)^T dC
                    T::gemm(
                        s.k,
                        s.m,
                        s.n,
                        T::one(),
                        &av[s.a_off(b)..],
                        csa,
                        rsa,
                        &g[b * mn..],
                        s.n as isize,
                        1,
                        T::one(),
                        &mut db[s.b_off(b)..],
                        rsb,
                        csb,
                    );
                }
            }
        }
        Op::Conv2d { x, w, bias, geom } => {
            let gm = *geom;
            let (pk, l) = (gm.patch_len(), gm.positions());
            let co = values[w.0].shape()[0];
            let batch = values[x.0].shape()[0];
            let xv = val(*x);
            let wv = val(*w);
            let mut cols = vec![T::zero(); if gm.is_pointwise() { 0 } else { pk * l }];
            if requires[w.0] {
                let dw = acc(lo, *w, len(*w));
                for s in 0..batch {
                    let img = &xv[s * gm.image_len()..(s + 1) * gm.image_len()];
                    let src: &[T] = if gm.is_pointwise() {
                        img
                    } else {
                        im2col(img, &gm, &mut cols);
                        &cols
                    };
                    T::gemm(
                        co,
                        l,
                        pk,
                        T::one(),
                        &g[s * co * l..],
                        l as isize,
                        1,
                        src,
                        1,
                        l as isize,
                        T::one(),
                        dw,
                        pk as isize,
                        1,
                    );
                }
            }
            if requires[x.0] {
                let dx = acc(lo, *x, len(*x));
                for s in 0..batch {
                    let dimg = &mut dx[s * gm.image_len()..(s + 1) * gm.image_len()];
                    if gm.is_pointwise() {
                        T::gemm(
                            pk,
                            co,
                            l,
                            T::one(),
                            wv,
                            1,
                            pk as isize,
                            &g[s * co * l..],
                            l as isize,
                            1,
                            T::one(),
                            dimg,
                            l as isize,
                            1,
                        );
                    } else {
                        T::gemm(
                            pk,
                            co,
                            l,
                            T::one(),
                            wv,
                            1,
                            pk as isize,
                            &g[s * co * l..],
                            l as isize,
                            1,
                            T::zero(),
                            &mut cols,
                            l as isize,
                            1,
                        );
                        col2im(&cols, &gm, dimg);
                    }
                }
            }
            if let Some(bv) = bias {
                bias_backward(g, *bv, co, l, requires, lo);
            }
        }
        Op::ConvTranspose2d { x, w, bias, geom } => {
            let gm = *geom;
            let (pk, l) = (gm.patch_len(), gm.positions());
            let (batch, ci) = (values[x.0].shape()[0], values[x.0].shape()[1]);
            let co = gm.channels;
            let xv = val(*x);
            let wv = val(*w);
            let mut gcols = vec![T::zero(); pk * l];
            let need_w = requires[w.0];
            let need_x = requires[x.0];
            if need_w || need_x {
                for s in 0..batch {
                    im2col(
                        &g[s * gm.image_len()..(s + 1) * gm.image_len()],
                        &gm,
                        &mut gcols,
                    );
                    if need_x {
                        let dx = acc(lo, *x, len(*x));
                        T::gemm(
                            ci,
                            pk,
                            l,
                            T::one(),
                            wv,
                            pk as isize,
                            1,
                            &gcols,
                            l as isize,
                            1,
                            T::one(),
                            &mut dx[s * ci * l..],
                            l as isize,
                            1,
                        );
                    }
                    if need_w {
                        let dw = acc(lo, *w, len(*w));
                        T::gemm(
                            ci,
                            l,
                            pk,
                            T::one(),
                            &xv[s * ci * l..],
                            l as isize,
                            1,
                            &gcols,
                            1,
                            l as isize,
                            T::one(),
                            dw,
                            pk as isize,
                            1,
                        );
                    }
                }
            }
            if let Some(bv) = bias {
                bias_backward(g, *bv, co, gm.h * gm.w, requires, lo);
            }
        }
        Op::Add(a, b) => {
            elementwise(*a, lo, &|_| T::one());
            elementwise(*b, lo, &|_| T::one());
        }
        Op::Sub(a, b) => {
            elementwise(*a, lo, &|_| T::one());
            elementwise(*b, lo, &|_| -T::one());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            elementwise(*a, lo, &|j| bv[j]);
            elementwise(*b, lo, &|j| av[j]);
        }
        Op::Scale(x, s) => elementwise(*x, lo, &|_| *s),
        Op::AddScalar(x) | Op::Reshape(x) => elementwise(*x, lo, &|_| T::one()),
        Op::Sigmoid(x) => elementwise(*x, lo, &|j| out[j] * (T::one() - out[j])),
        Op::Tanh(x) => elementwise(*x, lo, &|j| T::one() - out[j] * out[j]),
        Op::Relu(x) => {
            let xv = val(*x);
            elementwise(*x, lo, &|j| if xv[j] > T::zero() { T::one() } else { T::zero() })
        }
        Op::LeakyRelu(x, slope) => {
            let xv = val(*x);
            elementwise(*x, lo, &|j| if xv[j] > T::zero() { T::one() } else { *slope })
        }
        Op::Abs(x) => {
            let xv = val(*x);
            elementwise(*x, lo, &|j| xv[j].signum() * if xv[j] == T::zero() { T::zero() } else { T::one() })
        }
        Op::Softplus(x) => {
            let xv = val(*x);
            elementwise(*x, lo, &|j| sigmoid(xv[j]))
        }
        Op::Sum(x) => {
            if requires[x.0] {
                let d = acc(lo, *x, len(*x));
                d.iter_mut().for_each(|v| *v = *v + g[0]);
            }
        }
        Op::Mean(x) => {
            if requires[x.0] {
                let n = len(*x);
                let gi = g[0] / T::of(n as f64);
                let d = acc(lo, *x, n);
                d.iter_mut().for_each(|v| *v = *v + gi);
            }
        }
        Op::Concat(parts) => {
            let shape = values[i].shape();
            let (outer, inner) = (shape[0], shape[2..].iter().product::<usize>());
            let total = shape[1] * inner;
            let mut offset = 0;
            for p in parts {
                let plen = values[p.0].shape()[1] * inner;
                if requires[p.0] {
                    let d = acc(lo, *p, outer * plen);
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + plen];
                        for (dv, &gv) in d[o * plen..(o + 1) * plen].iter_mut().zip(src) {
                            *dv = *dv + gv;
                        }
                    }
                }
                offset += plen;
            }
        }
        Op::SliceChannels { x, start } => {
            if requires[x.0] {
                let xs = values[x.0].shape();
                let inner: usize = xs[2..].iter().product();
                let c_in = xs[1];
                let c_out = values[i].shape()[1];
                let d = acc(lo, *x, len(*x));
                for o in 0..xs[0] {
                    let dst = (o * c_in + start) * inner;
                    let src = o * c_out * inner;
                    for k in 0..c_out * inner {
                        d[dst + k] = d[dst + k] + g[src + k];
                    }
                }
            }
        }
        Op::BroadcastChannels(x) => {
            if requires[x.0] {
                let os = values[i].shape();
                let inner: usize = os[2..].iter().product();
                let d = acc(lo, *x, len(*x));
                for o in 0..os[0] {
                    for c in 0..os[1] {
                        let src = &g[(o * os[1] + c) * inner..(o * os[1] + c + 1) * inner];
                        for (dv, &gv) in d[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *dv = *dv + gv;
                        }
                    }
                }
            }
        }
        Op::InstanceNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let s = values[x.0].shape();
            let (b, c, n) = (s[0], s[1], s[2] * s[3]);
            let gam = val(*gamma);
            if requires[gamma.0] {
                let d = acc(lo, *gamma, c);
                for idx in 0..b * c {
                    let ch = idx % c;
                    let dot: T = (0..n).map(|j| g[idx * n + j] * xhat[idx * n + j]).sum();
                    d[ch] = d[ch] + dot;
                }
            }
            if requires[beta.0] {
                let d = acc(lo, *beta, c);
                for idx in 0..b * c {
                    let ch = idx % c;
                    let tot: T = g[idx * n..(idx + 1) * n].iter().copied().sum();
                    d[ch] = d[ch] + tot;
                }
            }
            if requires[x.0] {
                let nf = T::of(n as f64);
                let d = acc(lo, *x, len(*x));
                for idx in 0..b * c {
                    let gm = gam[idx % c];
                    let gs = &g[idx * n..(idx + 1) * n];
                    let xh = &xhat[idx * n..(idx + 1) * n];
                    let sum_g: T = gs.iter().map(|&v| v * gm).sum();
                    let sum_gx: T = gs.iter().zip(xh).map(|(&v, &h)| v * gm * h).sum();
                    let k = inv_std[idx] / nf;
                    for j in 0..n {
                        let dxh = gs[j] * gm;
                        d[idx * n + j] = d[idx * n + j] + k * (nf * dxh - sum_g - xh[j] * sum_gx);
                    }
                }
            }
        }
    }
}

fn bias_backward<T: Scalar>(
    g: &[T],
    bias: Var,
    co: usize,
    plane: usize,
    requires: &[bool],
    lo: &mut [Option<Vec<T>>],
) {
    if !requires[bias.0] {
        return;
    }
    let d = acc(lo, bias, co);
    for (idx, chunk) in g.chunks(plane).enumerate() {
        let s: T = chunk.iter().copied().sum();
        d[idx % co] = d[idx % co] + s;
    }
}
