//! Spatial ops on `[channels, height, width]` tensors: same-padding
//! convolution (kernel 1 or 3), non-overlapping average pooling, and the
//! token-grid / pixel-grid reassembly used by the patch tokenizer.

use std::rc::Rc;

use super::{Grads, Scalar, Tensor};
use crate::error::{Error, Result};

impl<E: Scalar> Tensor<E> {
    fn rank3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::dims(op, &s, &[0, 0, 0]));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// 2-D convolution, stride 1, zero padding to keep the spatial size.
    /// `self` is `[ci,h,w]`, `weight` is `[co,ci,k,k]` with k odd, `bias` is `[co]`.
    pub fn conv2d(&self, weight: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_tape(weight)?;
        self.same_tape(bias)?;
        let (ci, h, w) = self.rank3("conv2d")?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[1] != ci || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::dims("conv2d", &[ci, h, w], &ws));
        }
        let (co, k) = (ws[0], ws[2]);
        if bias.numel() != co {
            return Err(Error::dims("conv2d", &ws, &bias.shape()));
        }
        let pad = k / 2;
        let (x, wv, bv) = (self.value(), weight.value(), bias.value());

        let mut y = vec![E::zero(); co * h * w];
        for oc in 0..co {
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = bv[oc];
                    for ic in 0..ci {
                        for dy in 0..k {
                            let iy = oy + dy;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            for dx in 0..k {
                                let ix = ox + dx;
                                if ix < pad || ix - pad >= w {
                                    continue;
                                }
                                let ix = ix - pad;
                                acc = acc
                                    + wv[((oc * ci + ic) * k + dy) * k + dx]
                                        * x[(ic * h + iy) * w + ix];
                            }
                        }
                    }
                    y[(oc * h + oy) * w + ox] = acc;
                }
            }
        }

        let needs = self.needs_grad() || weight.needs_grad() || bias.needs_grad();
        let (xid, wid, bid) = (self.id(), weight.id(), bias.id());
        let backward = needs.then(|| {
            let x = Rc::clone(&x);
            let wv = Rc::clone(&wv);
            Box::new(move |dout: &[E], grads: &mut Grads<E>| {
                grads.add(bid, co, |g| {
                    for oc in 0..co {
                        let mut acc = E::zero();
                        for i in 0..h * w {
                            acc = acc + dout[oc * h * w + i];
                        }
                        g[oc] = g[oc] + acc;
                    }
                });
                grads.add(wid, co * ci * k * k, |g| {
                    for oc in 0..co {
                        for ic in 0..ci {
                            for dy in 0..k {
                                for dx in 0..k {
                                    let mut acc = E::zero();
                                    for oy in 0..h {
                                        let iy = oy + dy;
                                        if iy < pad || iy - pad >= h {
                                            continue;
                                        }
                                        let iy = iy - pad;
                                        for ox in 0..w {
                                            let ix = ox + dx;
                                            if ix < pad || ix - pad >= w {
                                                continue;
                                            }
                                            let ix = ix - pad;
                                            acc = acc
                                                + dout[(oc * h + oy) * w + ox]
                                                    * x[(ic * h + iy) * w + ix];
                                        }
                                    }
                                    let idx = ((oc * ci + ic) * k + dy) * k + dx;
                                    g[idx] = g[idx] + acc;
                                }
                            }
                        }
                    }
                });
                grads.add(xid, ci * h * w, |g| {
                    for oc in 0..co {
                        for oy in 0..h {
                            for ox in 0..w {
                                let d = dout[(oc * h + oy) * w + ox];
                                for ic in 0..ci {
                                    for dy in 0..k {
                                        let iy = oy + dy;
                                        if iy < pad || iy - pad >= h {
                                            continue;
                                        }
                                        let iy = iy - pad;
                                        for dx in 0..k {
                                            let ix = ox + dx;
                                            if ix < pad || ix - pad >= w {
                                                continue;
                                            }
                                            let ix = ix - pad;
                                            let idx = (ic * h + iy) * w + ix;
                                            g[idx] = g[idx]
                                                + d * wv[((oc * ci + ic) * k + dy) * k + dx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }) as super::BackwardFn<E>
        });
        Ok(self.tape().push(Rc::new(y), vec![co, h, w], needs, backward))
    }

    /// Non-overlapping k-by-k average pooling; spatial extents must divide by k.
    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor<E>> {
        let (c, h, w) = self.rank3("avg_pool2d")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Contract(format!(
                "avg_pool2d factor {k} does not divide spatial extents {h}x{w}"
            )));
        }
        if k == 1 {
            return self.reshape(&[c, h, w]);
        }
        let (ho, wo) = (h / k, w / k);
        let x = self.value();
        let inv = E::from_f64(1.0 / (k * k) as f64);
        let mut y = vec![E::zero(); c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = E::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            acc = acc + x[(ch * h + oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    y[(ch * ho + oy) * wo + ox] = acc * inv;
                }
            }
        }
        let needs = self.needs_grad();
        let xid = self.id();
        let backward = needs.then(|| {
            Box::new(move |dout: &[E], grads: &mut Grads<E>| {
                grads.add(xid, c * h * w, |g| {
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let d = dout[(ch * ho + oy) * wo + ox] * inv;
                                for dy in 0..k {
                                    for dx in 0..k {
                                        let idx = (ch * h + oy * k + dy) * w + ox * k + dx;
                                        g[idx] = g[idx] + d;
                                    }
                                }
                            }
                        }
                    }
                });
            }) as super::BackwardFn<E>
        });
        Ok(self.tape().push(Rc::new(y), vec![c, ho, wo], needs, backward))
    }

    /// Token grid `[rows*cols, ch*p*p]` to pixel planes `[ch, rows*p, cols*p]`.
    /// Patch vectors are row-major within the patch with channels interleaved
    /// last, i.e. element `(py*p + px)*ch + c`.
    pub fn unpatchify(&self, p: usize, rows: usize, cols: usize, ch: usize) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != rows * cols || s[1] != ch * p * p {
            return Err(Error::dims("unpatchify", &s, &[rows * cols, ch * p * p]));
        }
        let (h, w) = (rows * p, cols * p);
        let x = self.value();
        let mut y = vec![E::zero(); ch * h * w];
        let width = ch * p * p;
        for t in 0..rows * cols {
            let (gy, gx) = (t / cols, t % cols);
            for py in 0..p {
                for px in 0..p {
                    for c in 0..ch {
                        y[(c * h + gy * p + py) * w + gx * p + px] =
                            x[t * width + (py * p + px) * ch + c];
                    }
                }
            }
        }
        let needs = self.needs_grad();
        let xid = self.id();
        let backward = needs.then(|| {
            Box::new(move |dout: &[E], grads: &mut Grads<E>| {
                grads.add(xid, rows * cols * width, |g| {
                    for t in 0..rows * cols {
                        let (gy, gx) = (t / cols, t % cols);
                        for py in 0..p {
                            for px in 0..p {
                                for c in 0..ch {
                                    let idx = t * width + (py * p + px) * ch + c;
                                    g[idx] = g[idx]
                                        + dout[(c * h + gy * p + py) * w + gx * p + px];
                                }
                            }
                        }
                    }
                });
            }) as super::BackwardFn<E>
        });
        Ok(self.tape().push(Rc::new(y), vec![ch, h, w], needs, backward))
    }
}

/// Plain-data inverse of [`Tensor::unpatchify`]: cut channel planes
/// `[ch, rows*p, cols*p]` into patch vectors `[rows*cols, ch*p*p]`.
pub fn patchify<E: Scalar>(planes: &[E], ch: usize, h: usize, w: usize, p: usize) -> Vec<E> {
    assert_eq!(planes.len(), ch * h * w);
    assert!(h % p == 0 && w % p == 0, "patch size must divide image size");
    let (rows, cols) = (h / p, w / p);
    let width = ch * p * p;
    let mut out = vec![E::zero(); rows * cols * width];
    for t in 0..rows * cols {
        let (gy, gx) = (t / cols, t % cols);
        for py in 0..p {
            for px in 0..p {
                for c in 0..ch {
                    out[t * width + (py * p + px) * ch + c] =
                        planes[(c * h + gy * p + py) * w + gx * p + px];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::{backward, Tape};
    use super::*;

    #[test]
    fn conv2d_kernel1_is_channel_mix() {
        let t: Tape<f64> = Tape::new();
        let x = t
            .leaf(vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0], &[2, 2, 2])
            .unwrap();
        let w = t.leaf(vec![1.0, 0.5], &[1, 2, 1, 1]).unwrap();
        let b = t.leaf(vec![1.0], &[1]).unwrap();
        let y = x.conv2d(&w, &b).unwrap();
        assert_eq!(y.to_vec(), vec![7.0, 13.0, 19.0, 25.0]);
    }

    #[test]
    fn conv2d_kernel3_zero_padding() {
        // Uniform input, identity-ish kernel: border outputs see the zero pad.
        let t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![1.0; 9], &[1, 3, 3]).unwrap();
        let w = t.leaf(vec![1.0; 9], &[1, 1, 3, 3]).unwrap();
        let b = t.leaf(vec![0.0], &[1]).unwrap();
        let y = x.conv2d(&w, &b).unwrap().to_vec();
        assert_eq!(y[4], 9.0); // center sees all nine ones
        assert_eq!(y[0], 4.0); // corner sees four
        assert_eq!(y[1], 6.0); // edge sees six
    }

    #[test]
    fn zero_conv_output_and_grads_flow_to_weights() {
        let t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![0.3, -0.7, 0.9, 0.1], &[1, 2, 2]).unwrap();
        let w = t.leaf(vec![0.0; 9], &[1, 1, 3, 3]).unwrap();
        let b = t.leaf(vec![0.0], &[1]).unwrap();
        let y = x.conv2d(&w, &b).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
        let g = backward(&y.sum()).unwrap();
        let gw = g.get(&w).unwrap();
        assert!(gw.iter().any(|&v| v != 0.0), "zero conv must still learn");
    }

    #[test]
    fn avg_pool_hand_case_and_backward() {
        let t: Tape<f64> = Tape::new();
        let x = t
            .leaf((0..16).map(|i| i as f64).collect(), &[1, 4, 4])
            .unwrap();
        let y = x.avg_pool2d(2).unwrap();
        assert_eq!(y.to_vec(), vec![2.5, 4.5, 10.5, 12.5]);
        let g = backward(&y.sum()).unwrap();
        assert!(g.get(&x).unwrap().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn patchify_unpatchify_bit_exact() {
        let t: Tape<f64> = Tape::new();
        let (ch, h, w, p) = (3, 8, 8, 4);
        let planes: Vec<f64> = (0..ch * h * w).map(|i| (i as f64) * 0.013 - 1.0).collect();
        let patches = patchify(&planes, ch, h, w, p);
        let x = t.constant(patches, &[(h / p) * (w / p), ch * p * p]).unwrap();
        let back = x.unpatchify(p, h / p, w / p, ch).unwrap();
        assert_eq!(back.to_vec(), planes);
    }
}
