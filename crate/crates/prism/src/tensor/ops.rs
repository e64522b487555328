//! Differentiable tensor operations. Each op records a backward closure that
//! scatters the output gradient to its parents; see the module docs for the
//! determinism rules.

use std::rc::Rc;

use super::{linalg, Grads, Scalar, Tensor};
use crate::error::{Error, Result};

impl<E: Scalar> Tensor<E> {
    fn fetch(&self) -> (Rc<Vec<E>>, Vec<usize>) {
        (self.value(), self.shape())
    }

    fn unary(
        &self,
        f: impl Fn(E) -> E,
        // Local derivative as a function of (input, output).
        df: impl Fn(E, E) -> E + 'static,
    ) -> Tensor<E> {
        let (x, shape) = self.fetch();
        let y: Rc<Vec<E>> = Rc::new(x.iter().map(|&v| f(v)).collect());
        let needs = self.needs_grad();
        let backward = needs.then(|| {
            let x = Rc::clone(&x);
            let yc = Rc::clone(&y);
            let xid = self.id();
            let len = x.len();
            Box::new(move |dout: &[E], grads: &mut Grads<E>| {
                grads.add(xid, len, |g| {
                    for i in 0..len {
                        g[i] = g[i] + dout[i] * df(x[i], yc[i]);
                    }
                });
            }) as super::BackwardFn<E>
        });
        self.tape().push(y, shape, needs, backward)
    }

    /// `max(x, 0) + min(exp(x) - 1, 0)`; derivative 1 for x > 0, exp(x) below.
    pub fn elu(&self) -> Tensor<E> {
        self.unary(
            |x| if x > E::zero() { x } else { x.exp_m1() },
            |x, y| if x > E::zero() { E::one() } else { y + E::one() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        self.unary(
            |x| {
                if x >= E::zero() {
                    E::one() / (E::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (E::one() + e)
                }
            },
            |_, y| y * (E::one() - y),
        )
    }

    pub fn tanh(&self) -> Tensor<E> {
        self.unary(|x| x.tanh(), |_, y| E::one() - y * y)
    }

    pub fn sin(&self) -> Tensor<E> {
        self.unary(|x| x.sin(), |x, _| x.cos())
    }

    pub fn cos(&self) -> Tensor<E> {
        self.unary(|x| x.cos(), |x, _| -x.sin())
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self) -> Tensor<E> {
        let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let a = E::from_f64(0.044715);
        let half = E::from_f64(0.5);
        self.unary(
            move |x| {
                let u = c * (x + a * x * x * x);
                half * x * (E::one() + u.tanh())
            },
            move |x, _| {
                let u = c * (x + a * x * x * x);
                let t = u.tanh();
                let du = c * (E::one() + E::from_f64(3.0) * a * x * x);
                half * (E::one() + t) + half * x * (E::one() - t * t) * du
            },
        )
    }

    /// `ln(1 + exp(x))`, numerically stable; derivative sigmoid(x).
    pub fn softplus(&self) -> Tensor<E> {
        self.unary(
            |x| x.max(E::zero()) + (-x.abs()).exp().ln_1p(),
            |x, _| {
                if x >= E::zero() {
                    E::one() / (E::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (E::one() + e)
                }
            },
        )
    }

    pub fn exp(&self) -> Tensor<E> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    /// Natural log; caller guarantees positive inputs.
    pub fn ln(&self) -> Tensor<E> {
        self.unary(|x| x.ln(), |x, _| E::one() / x)
    }

    pub fn abs(&self) -> Tensor<E> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > E::zero() {
                    E::one()
                } else if x < E::zero() {
                    -E::one()
                } else {
                    E::zero()
                }
            },
        )
    }

    pub fn recip(&self) -> Tensor<E> {
        self.unary(|x| E::one() / x, |_, y| -(y * y))
    }

    /// `max(x, c)`; gradient passes where x >= c.
    pub fn clamp_min(&self, c: f64) -> Tensor<E> {
        let cv = E::from_f64(c);
        self.unary(
            move |x| x.max(cv),
            move |x, _| if x >= cv { E::one() } else { E::zero() },
        )
    }

    pub fn scale(&self, k: f64) -> Tensor<E> {
        let kv = E::from_f64(k);
        self.unary(move |x| x * kv, move |_, _| kv)
    }

    pub fn neg(&self) -> Tensor<E> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, k: f64) -> Tensor<E> {
        let kv = E::from_f64(k);
        self.unary(move |x| x + kv, |_, _| E::one())
    }

    pub fn square(&self) -> Tensor<E> {
        self.unary(|x| x * x, |x, _| E::from_f64(2.0) * x)
    }

    fn check_same_shape(&self, other: &Tensor<E>, op: &'static str) -> Result<Vec<usize>> {
        self.same_tape(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(Error::dims(op, &sa, &sb));
        }
        Ok(sa)
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let shape = self.check_same_shape(other, "add")?;
        let (a, b) = (self.value(), other.value());
        let y: Vec<E> = a.iter().zip(b.iter()).map(|(&x, &z)| x + z).collect();
        let needs = self.needs_grad() || other.needs_grad();
        let (aid, bid, len) = (self.id(), other.id(), a.len());
        let backward = needs.then(|| {
            Box::new(move |dout: &[E], grads: &mut Grads<E>| {
                grads.add(aid, len, |g| {
                    for i in 0..len {
                        g[i] = g[i] + dout[i];
                    }
                });
                grads.add(bid, len, |g| {
                    for i in 0..len {
                        g[i] = g[i] + dout[i];
                    }
                });
            }) as super::BackwardFn<E>
        });
        Ok(self.tape().push(Rc::new(y), shape, needs, backward))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let shape = self.check_same_shape(other, "sub")?;
        let (a, b) = (self.value(), other.value());
        let y: Vec<E> = a.iter().zip(b.iter()).map(|(&x, &z)| x - z).collect();
        let needs = self.needs_grad() || other.needs_grad();
        let (aid, bid, len) = (self.id(), other.id(), a.len());
        let backward = needs.then(|| {
            Box::new(move |dout: &[E], grads: &mut Grads<E>| {
                grads.add(aid, len, |g| {
                    for i in 0..len {
                        g[i] = g[i] + dout[i];
                    }
                });
                grads.add(bid, len, |g| {
                    for i in 0..len {
                        g[i] = g[i] - dout[i];
                    }
                });
            }) as super::BackwardFn<E>
        });
        Ok(self.tape().push(Rc::new(y), shape, needs, backward))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let shape = self.check_same_shape(other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let y: Vec<E> = a.iter().zip(b.iter()).map(|(&x, &z)| x * z).collect();
        let needs = self.needs_grad() || other.needs_grad();
        let (aid, bid, len) = (self.id(), other.id(), a.len());
        let backward = needs.then(|| {
            let a = Rc::clone(&a);
            let b = Rc::clone(&b);
            Box::new(move |dout: &[E], grads: &mut Grads<E>| {
                grads.add(aid, len, |g| {
                    for i in 0..len {
                        g[i] = g[i] + dout[i] * b[i];
                    }
                });
                grads.add(bid, len, |g| {
                    for i in 0..len {
                        g[i] = g[i] + dout[i] * a[i];
                    }
                });
            }) as super::BackwardFn<E>
        });
        Ok(self.tape().push(Rc::new(y), shape, needs, backward))
    }

    fn rank2(&self, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dims(op, &s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    /// `[r,c] + [c]`, the bias broadcast of a linear layer.
    pub fn add_bias(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_tape(bias)?;
        let (r, c) = self.rank2("add_bias")?;
        if bias.numel() != c {
            return Err(Error::dims("add_bias", &self.shape(), &bias.shape()));
        }
        let (a, b) = (self.value(), bias.value());
        let mut y = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                y.push(a[i * c + j] + b[j]);
            }
        }
        let needs = self.needs_grad() || bias.needs_grad();
        let (aid, bid) = (self.id(), bias.id());
        let backward = needs.then(|| {
            Box::new(move |dout: &[E], grads: &mut Grads<E>| {
                grads.add(aid, r * c, |g| {
                    for i in 0..r * c {
                        g[i] = g[i] + dout[i];
                    }
                });
                grads.add(bid, c, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] = g[j] + dout[i * c + j];
                        }
                    }
                });
            }) as super::BackwardFn<E>
        });
        Ok(self.tape().push(Rc::new(y), vec![r, c], needs, backward))
    }

    /// `[r,c] * [c]` with the row vector broadcast over rows.
    pub fn mul_row(&self, row: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_tape(row)?;
        let (r, c) = self.rank2("mul_row")?;
        if row.numel() != c {
            return Err(Error::dims("mul_row", &self.shape(), &row.shape()));
        }
        let (a, b) = (self.value(), row.value());
        let mut y = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                y.push(a[i * c + j] * b[j]);
            }
        }
        let needs = self.needs_grad() || row.needs_grad();
        let (aid, bid) = (self.id(), row.id());
        let backward = needs.then(|| {
            let a = Rc::clone(&a);
            let b = Rc::clone(&b);
            Box::new(move |dout: &[E], grads: &mut Grads<E>| {
                grads.add(aid, r * c, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] = g[i * c + j] + dout[i * c + j] * b[j];
                        }
                    }
                });
                grads.add(bid, c, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] = g[j] + dout[i * c + j] * a[i * c + j];
                        }
                    }
                });
            }) as super::BackwardFn<E>
        });
        Ok(self.tape().push(Rc::new(y), vec![r, c], needs, backward))
    }

    /// `[r,c] * [r]` with the column vector broadcast over columns.
    pub fn mul_col(&self, col: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_tape(col)?;
        let (r, c) = self.rank2("mul_col")?;
        if col.numel() != r {
            return Err(Error::dims("mul_col", &self.shape(), &col.shape()));
        }
        let (a, b) = (self.value(), col.value());
        let mut y = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                y.push(a[i * c + j] * b[i]);
            }
        }
        let needs = self.needs_grad() || col.needs_grad();
        let (aid, bid) = (self.id(), col.id());
        let backward = needs.then(|| {
            let a = Rc::clone(&a);
            let b = Rc::clone(&b);
            Box::new(move |dout: &[E], grads: &mut Grads<E>| {
                grads.add(aid, r * c, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] = g[i * c + j] + dout[i * c + j] * b[i];
                        }
                    }
                });
                grads.add(bid, r, |g| {
                    for i in 0..r {
                        let mut acc = E::zero();
                        for j in 0..c {
                            acc = acc + dout[i * c + j] * a[i * c + j];
                        }
                        g[i] = g[i] + acc;
                    }
                });
            }) as super::BackwardFn<E>
        });
        Ok(self.tape().push(Rc::new(y), vec![r, c], needs, backward))
    }

    /// Multiply every element by a single-element tensor.
    pub fn mul_scalar_t(&self, s: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_tape(s)?;
        if s.numel() != 1 {
            return Err(Error::dims("mul_scalar_t", &self.shape(), &s.shape()));
        }
        let (a, shape) = self.fetch();
        let sv = s.item();
        let y: Vec<E> = a.iter().map(|&x| x * sv).collect();
        let needs = self.needs_grad() || s.needs_grad();
        let (aid, sid, len) = (self.id(), s.id(), a.len());
        let backward = needs.then(|| {
            let a = Rc::clone(&a);
            Box::new(move |dout: &[E], grads: &mut Grads<E>| {
                grads.add(aid, len, |g| {
                    for i in 0..len {
                        g[i] = g[i] + dout[i] * sv;
                    }
                });
                grads.add(sid, 1, |g| {
                    let mut acc = E::zero();
                    for i in 0..len {
                        acc = acc + dout[i] * a[i];
                    }
                    g[0] = g[0] + acc;
                });
            }) as super::BackwardFn<E>
        });
        Ok(self.tape().push(Rc::new(y), shape, needs, backward))
    }

    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_tape(other)?;
        let (m, k) = self.rank2("matmul")?;
        let (k2, n) = other.rank2("matmul")?;
        if k != k2 {
            return Err(Error::dims("matmul", &[m, k], &[k2, n]));
        }
        let (a, b) = (self.value(), other.value());
        let mut y = vec![E::zero(); m * n];
        linalg::mm_nn(&a, &b, &mut y, m, k, n);
        let needs = self.needs_grad() || other.needs_grad();
        let (aid, bid) = (self.id(), other.id());
        let backward = needs.then(|| {
            let a = Rc::clone(&a);
            let b = Rc::clone(&b);
            Box::new(move |dout: &[E], grads: &mut Grads<E>| {
                grads.add(aid, m * k, |g| {
                    let mut da = vec![E::zero(); m * k];
                    linalg::mm_nt(dout, &b, &mut da, m, n, k);
                    for i in 0..m * k {
                        g[i] = g[i] + da[i];
                    }
                });
                grads.add(bid, k * n, |g| {
                    let mut db = vec![E::zero(); k * n];
                    linalg::mm_tn(&a, dout, &mut db, k, m, n);
                    for i in 0..k * n {
                        g[i] = g[i] + db[i];
                    }
                });
            }) as super::BackwardFn<E>
        });
        Ok(self.tape().push(Rc::new(y), vec![m, n], needs, backward))
    }

    /// `x @ w + b`.
    pub fn linear(&self, w: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.matmul(w)?.add_bias(b)
    }

    pub fn transpose(&self) -> Result<Tensor<E>> {
        let (r, c) = self.rank2("transpose")?;
        let a = self.value();
        let mut y = vec![E::zero(); r * c];
        linalg::transpose(&a, &mut y, r, c);
        let needs = self.needs_grad();
        let aid = self.id();
        let backward = needs.then(|| {
            Box::new(move |dout: &[E], grads: &mut Grads<E>| {
                grads.add(aid, r * c, |g| {
                    let mut dt = vec![E::zero(); r * c];
                    linalg::transpose(dout, &mut dt, c, r);
                    for i in 0..r * c {
                        g[i] = g[i] + dt[i];
                    }
                });
            }) as super::BackwardFn<E>
        });
        Ok(self.tape().push(Rc::new(y), vec![c, r], needs, backward))
    }

    /// Same buffer, new shape (element count must match).
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<E>> {
        let (a, shape) = self.fetch();
        if a.len() != new_shape.iter().product::<usize>() {
            return Err(Error::dims("reshape", &shape, new_shape));
        }
        let needs = self.needs_grad();
        let aid = self.id();
        let len = a.len();
        let backward = needs.then(|| {
            Box::new(move |dout: &[E], grads: &mut Grads<E>| {
                grads.add(aid, len, |g| {
                    for i in 0..len {
                        g[i] = g[i] + dout[i];
                    }
                });
            }) as super::BackwardFn<E>
        });
        Ok(self.tape().push(a, new_shape.to_vec(), needs, backward))
    }

    /// Contiguous slice `[start, start+len)` along `axis`, any rank.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        let (a, shape) = self.fetch();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Contract(format!(
                "slice [{start}, {}) on axis {axis} of shape {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;

        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            y.extend_from_slice(&a[base..base + len * inner]);
        }
        let needs = self.needs_grad();
        let aid = self.id();
        let total = a.len();
        let backward = needs.then(|| {
            Box::new(move |dout: &[E], grads: &mut Grads<E>| {
                grads.add(aid, total, |g| {
                    for o in 0..outer {
                        let src = o * len * inner;
                        let dst = (o * mid + start) * inner;
                        for i in 0..len * inner {
                            g[dst + i] = g[dst + i] + dout[src + i];
                        }
                    }
                });
            }) as super::BackwardFn<E>
        });
        Ok(self.tape().push(Rc::new(y), out_shape, needs, backward))
    }

    pub fn sum(&self) -> Tensor<E> {
        let (a, _) = self.fetch();
        let mut acc = E::zero();
        for &v in a.iter() {
            acc = acc + v;
        }
        let needs = self.needs_grad();
        let aid = self.id();
        let len = a.len();
        let backward = needs.then(|| {
            Box::new(move |dout: &[E], grads: &mut Grads<E>| {
                grads.add(aid, len, |g| {
                    for gi in g.iter_mut() {
                        *gi = *gi + dout[0];
                    }
                });
            }) as super::BackwardFn<E>
        });
        self.tape().push(Rc::new(vec![acc]), vec![1], needs, backward)
    }

    pub fn mean(&self) -> Tensor<E> {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// Softmax along the last axis of a rank-2 tensor, max-shifted.
    pub fn softmax_rows(&self) -> Tensor<E> {
        let (r, c) = self.rank2("softmax_rows").expect("softmax_rows needs rank 2");
        let a = self.value();
        let mut y = vec![E::zero(); r * c];
        for i in 0..r {
            let row = &a[i * c..(i + 1) * c];
            let mut m = row[0];
            for &v in row.iter() {
                m = m.max(v);
            }
            let mut s = E::zero();
            for j in 0..c {
                let e = (row[j] - m).exp();
                y[i * c + j] = e;
                s = s + e;
            }
            let inv = E::one() / s;
            for j in 0..c {
                y[i * c + j] = y[i * c + j] * inv;
            }
        }
        let y = Rc::new(y);
        let needs = self.needs_grad();
        let aid = self.id();
        let backward = needs.then(|| {
            let y = Rc::clone(&y);
            Box::new(move |dout: &[E], grads: &mut Grads<E>| {
                grads.add(aid, r * c, |g| {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let dr = &dout[i * c..(i + 1) * c];
                        let mut dot = E::zero();
                        for j in 0..c {
                            dot = dot + dr[j] * yr[j];
                        }
                        for j in 0..c {
                            g[i * c + j] = g[i * c + j] + yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }) as super::BackwardFn<E>
        });
        self.tape().push(y, vec![r, c], needs, backward)
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let (r, c) = self.rank2("layer_norm")?;
        if gamma.numel() != c || beta.numel() != c {
            return Err(Error::dims("layer_norm", &[r, c], &gamma.shape()));
        }
        let (a, gm, bt) = (self.value(), gamma.value(), beta.value());
        let epsv = E::from_f64(eps);
        let cn = E::from_f64(c as f64);

        let mut y = vec![E::zero(); r * c];
        let mut xhat = vec![E::zero(); r * c];
        let mut invs = vec![E::zero(); r];
        for i in 0..r {
            let row = &a[i * c..(i + 1) * c];
            let mut mu = E::zero();
            for &v in row.iter() {
                mu = mu + v;
            }
            mu = mu / cn;
            let mut var = E::zero();
            for &v in row.iter() {
                let d = v - mu;
                var = var + d * d;
            }
            var = var / cn;
            let inv = E::one() / (var + epsv).sqrt();
            invs[i] = inv;
            for j in 0..c {
                let xh = (row[j] - mu) * inv;
                xhat[i * c + j] = xh;
                y[i * c + j] = gm[j] * xh + bt[j];
            }
        }
        let xhat = Rc::new(xhat);
        let invs = Rc::new(invs);
        let needs = self.needs_grad() || gamma.needs_grad() || beta.needs_grad();
        let (aid, gid, bid) = (self.id(), gamma.id(), beta.id());
        let backward = needs.then(|| {
            let xhat = Rc::clone(&xhat);
            let invs = Rc::clone(&invs);
            let gm = Rc::clone(&gm);
            Box::new(move |dout: &[E], grads: &mut Grads<E>| {
                grads.add(gid, c, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] = g[j] + dout[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                grads.add(bid, c, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] = g[j] + dout[i * c + j];
                        }
                    }
                });
                grads.add(aid, r * c, |g| {
                    let cn = E::from_f64(c as f64);
                    for i in 0..r {
                        let xr = &xhat[i * c..(i + 1) * c];
                        let dr = &dout[i * c..(i + 1) * c];
                        let mut sum_dxh = E::zero();
                        let mut sum_dxh_xh = E::zero();
                        for j in 0..c {
                            let dxh = dr[j] * gm[j];
                            sum_dxh = sum_dxh + dxh;
                            sum_dxh_xh = sum_dxh_xh + dxh * xr[j];
                        }
                        let m1 = sum_dxh / cn;
                        let m2 = sum_dxh_xh / cn;
                        for j in 0..c {
                            let dxh = dr[j] * gm[j];
                            g[i * c + j] = g[i * c + j] + invs[i] * (dxh - m1 - xr[j] * m2);
                        }
                    }
                });
            }) as super::BackwardFn<E>
        });
        Ok(self.tape().push(Rc::new(y), vec![r, c], needs, backward))
    }

    /// Mean squared error against `other`.
    pub fn mse(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.sub(other)?.square().mean())
    }

    /// Mean absolute error against `other`.
    pub fn l1(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.sub(other)?.abs().mean())
    }
}

/// Concatenate along `axis`; all other extents must match.
pub fn concat<E: Scalar>(parts: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    if parts.is_empty() {
        return Err(Error::Contract("concat of zero tensors".into()));
    }
    let first_shape = parts[0].shape();
    if axis >= first_shape.len() {
        return Err(Error::Contract(format!(
            "concat axis {axis} out of range for shape {first_shape:?}"
        )));
    }
    let mut total_mid = 0usize;
    for p in parts {
        parts[0].same_tape(p)?;
        let s = p.shape();
        if s.len() != first_shape.len() {
            return Err(Error::dims("concat", &first_shape, &s));
        }
        for (ax, (&e, &f)) in s.iter().zip(first_shape.iter()).enumerate() {
            if ax != axis && e != f {
                return Err(Error::dims("concat", &first_shape, &s));
            }
        }
        total_mid += s[axis];
    }
    let outer: usize = first_shape[..axis].iter().product();
    let inner: usize = first_shape[axis + 1..].iter().product();
    let mut out_shape = first_shape.clone();
    out_shape[axis] = total_mid;

    let values: Vec<Rc<Vec<E>>> = parts.iter().map(|p| p.value()).collect();
    let mids: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let mut y = Vec::with_capacity(outer * total_mid * inner);
    for o in 0..outer {
        for (v, &mid) in values.iter().zip(mids.iter()) {
            let base = o * mid * inner;
            y.extend_from_slice(&v[base..base + mid * inner]);
        }
    }

    let needs = parts.iter().any(|p| p.needs_grad());
    let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
    let lens: Vec<usize> = values.iter().map(|v| v.len()).collect();
    let backward = needs.then(|| {
        let mids = mids.clone();
        Box::new(move |dout: &[E], grads: &mut Grads<E>| {
            let mut offset = 0usize;
            for (idx, &id) in ids.iter().enumerate() {
                let mid = mids[idx];
                grads.add(id, lens[idx], |g| {
                    for o in 0..outer {
                        let src = (o * total_mid + offset) * inner;
                        let dst = o * mid * inner;
                        for i in 0..mid * inner {
                            g[dst + i] = g[dst + i] + dout[src + i];
                        }
                    }
                });
                offset += mid;
            }
        }) as super::BackwardFn<E>
    });
    Ok(parts[0].tape().push(Rc::new(y), out_shape, needs, backward))
}
