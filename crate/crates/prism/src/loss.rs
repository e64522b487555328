//! Training objectives: image reconstruction with a gradient-based
//! perceptual surrogate, splat-render supervision, confidence-weighted
//! point-map regression, body-parameter regression, and the hidden-state
//! distillation loss, combined into one weighted total.

use crate::body::BodyParams;
use crate::error::{Error, Result};
use crate::priors::BodyTensors;
use crate::tensor::{concat, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub nvs: f64,
    pub gs: f64,
    pub pts: f64,
    pub smplx: f64,
    pub lpips: f64,
    pub distill: f64,
    /// Negative-log-confidence regularizer inside the point loss. Zero
    /// recovers the bare confidence-weighted formulation.
    pub alpha_conf: f64,
    /// Absolute point-error term. Zero leaves only gradient terms, which
    /// cannot see a global offset.
    pub lambda_abs: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            nvs: 1.0,
            gs: 1.0,
            pts: 100.0,
            smplx: 1.0,
            lpips: 1.0,
            distill: 1.0,
            alpha_conf: 0.2,
            lambda_abs: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.nvs, self.gs, self.pts, self.smplx, self.lpips, self.distill, self.alpha_conf,
            self.lambda_abs,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Unweighted term values for one step, plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub nvs: f64,
    pub gs: f64,
    pub pts: f64,
    pub smplx: f64,
    pub distill: f64,
    pub total: f64,
}

impl LossReport {
    pub fn csv_header() -> &'static str {
        "step,nvs,gs,pts,smplx,distill,total"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.step, self.nvs, self.gs, self.pts, self.smplx, self.distill, self.total
        )
    }
}

fn same_shape<E: Scalar>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dims(op, &a.shape(), &b.shape()));
    }
    Ok(())
}

fn mse<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let d = a.sub(b)?;
    Ok(d.mul(&d)?.mean())
}

/// Per-channel Sobel gradients, same-size, then a one-pixel border crop so
/// the zero padding never leaks in. `[C,H,W]` -> `[2C, H-2, W-2]`.
fn sobel<E: Scalar>(img: &Tensor<E>) -> Result<Tensor<E>> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if s.len() != 3 || h < 3 || w < 3 {
        return Err(Error::dims("sobel", &s, &[0, 3, 3]));
    }
    let gx = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let gy = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let mut weight = vec![E::zero(); 2 * c * c * 9];
    for ch in 0..c {
        for (t, v) in gx.iter().enumerate() {
            weight[((2 * ch) * c + ch) * 9 + t] = E::from_f64(*v);
        }
        for (t, v) in gy.iter().enumerate() {
            weight[((2 * ch + 1) * c + ch) * 9 + t] = E::from_f64(*v);
        }
    }
    let tape = img.tape();
    let wt = tape.constant(weight, &[2 * c, c, 3, 3])?;
    let bias = tape.zeros(&[2 * c]);
    let full = img.conv2d(&wt, &bias)?;
    full.slice(1, 1, h - 2)?.slice(2, 1, w - 2)
}

/// Mean absolute difference of Sobel maps at scales 1, 1/2, 1/4. Exactly
/// zero for images that differ by a constant. Scales whose pooled map is
/// smaller than the Sobel kernel are skipped.
fn gradient_surrogate<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let s = a.shape();
    let mut terms = Vec::with_capacity(3);
    for k in [1usize, 2, 4] {
        if s[1] / k < 3 || s[2] / k < 3 {
            continue;
        }
        let (pa, pb) = (a.avg_pool2d(k)?, b.avg_pool2d(k)?);
        terms.push(sobel(&pa)?.sub(&sobel(&pb)?)?.abs().mean().reshape(&[1])?);
    }
    if terms.is_empty() {
        return Ok(a.tape().zeros(&[1]).sum());
    }
    Ok(concat(&terms, 0)?.mean())
}

/// Image loss: MSE plus the weighted multi-scale gradient surrogate.
pub fn loss_nvs<E: Scalar>(pred: &Tensor<E>, gt: &Tensor<E>, weights: &LossWeights) -> Result<Tensor<E>> {
    same_shape("loss_nvs", pred, gt)?;
    let base = mse(pred, gt)?;
    if weights.lpips == 0.0 {
        return Ok(base);
    }
    base.add(&gradient_surrogate(pred, gt)?.scale(weights.lpips))
}

/// Splat-render loss: same metric as [`loss_nvs`]. A 4-channel render is
/// compared on its color channels only.
pub fn loss_gs<E: Scalar>(render: &Tensor<E>, gt: &Tensor<E>, weights: &LossWeights) -> Result<Tensor<E>> {
    let rgb = if render.shape().first() == Some(&4) {
        render.slice(0, 0, 3)?
    } else {
        render.clone()
    };
    loss_nvs(&rgb, gt, weights)
}

/// Masked, confidence-weighted sums at one pooling scale. Returns the
/// gradient-difference term normalized by its own mask weight.
fn pts_scale_term<E: Scalar>(
    x: &Tensor<E>,
    c: &Tensor<E>,
    x_gt: &Tensor<E>,
    mask: &Tensor<E>,
    k: usize,
) -> Result<Tensor<E>> {
    let (xk, gk) = (x.avg_pool2d(k)?, x_gt.avg_pool2d(k)?);
    let (ck, mk) = (c.avg_pool2d(k)?, mask.avg_pool2d(k)?);
    let s = xk.shape();
    let (h, w) = (s[1], s[2]);

    let mval = mk.value();
    let mut weight_sum = 0.0;
    for i in 0..h {
        for j in 0..w.saturating_sub(1) {
            weight_sum += (mval[i * w + j] * mval[i * w + j + 1]).to_f64();
        }
    }
    for i in 0..h.saturating_sub(1) {
        for j in 0..w {
            weight_sum += (mval[i * w + j] * mval[(i + 1) * w + j]).to_f64();
        }
    }
    let norm = weight_sum.max(1.0);

    let mut acc = xk.tape().zeros(&[1]).sum();
    if w >= 2 {
        // Horizontal: difference between column j+1 and j, weighted by the
        // left endpoint's confidence and both endpoints' mask.
        let dx = xk.slice(2, 1, w - 1)?.sub(&xk.slice(2, 0, w - 1)?)?;
        let dgx = gk.slice(2, 1, w - 1)?.sub(&gk.slice(2, 0, w - 1)?)?;
        let wx = ck
            .slice(2, 0, w - 1)?
            .mul(&mk.slice(2, 0, w - 1)?)?
            .mul(&mk.slice(2, 1, w - 1)?)?;
        acc = acc.add(&dx.sub(&dgx)?.abs().mul(&broadcast_ch(&wx, 3)?)?.sum())?;
    }
    if h >= 2 {
        // Vertical: row i+1 minus row i, top endpoint.
        let dy = xk.slice(1, 1, h - 1)?.sub(&xk.slice(1, 0, h - 1)?)?;
        let dgy = gk.slice(1, 1, h - 1)?.sub(&gk.slice(1, 0, h - 1)?)?;
        let wy = ck
            .slice(1, 0, h - 1)?
            .mul(&mk.slice(1, 0, h - 1)?)?
            .mul(&mk.slice(1, 1, h - 1)?)?;
        acc = acc.add(&dy.sub(&dgy)?.abs().mul(&broadcast_ch(&wy, 3)?)?.sum())?;
    }
    Ok(acc.scale(1.0 / norm))
}

/// Tile a `[1,H,W]` map across `n` channels.
fn broadcast_ch<E: Scalar>(t: &Tensor<E>, n: usize) -> Result<Tensor<E>> {
    concat(&vec![t.clone(); n], 0)
}

/// Confidence-weighted point-map loss over four pooling scales:
/// sum_k 2^-k |C (grad_k X - grad_k X_gt)| + lambda_abs |C (X - X_gt)|
/// - alpha_conf mean(log C), every term restricted to masked pixels and
/// normalized by its own mask weight (floored at one).
pub fn loss_pts<E: Scalar>(
    x: &Tensor<E>,
    c: &Tensor<E>,
    x_gt: &Tensor<E>,
    mask: &Tensor<E>,
    weights: &LossWeights,
) -> Result<Tensor<E>> {
    same_shape("loss_pts", x, x_gt)?;
    let xs = x.shape();
    if xs.len() != 3 || xs[0] != 3 {
        return Err(Error::dims("loss_pts", &xs, &[3, 0, 0]));
    }
    let ms = vec![1, xs[1], xs[2]];
    if c.shape() != ms || mask.shape() != ms {
        return Err(Error::dims("loss_pts", &c.shape(), &ms));
    }

    let mut total = x.tape().zeros(&[1]).sum();
    for k in 0..4usize {
        let term = pts_scale_term(x, c, x_gt, mask, 1 << k)?;
        total = total.add(&term.scale(0.5f64.powi(k as i32)))?;
    }

    let mval = mask.value();
    let mask_sum: f64 = mval.iter().map(|m| <E as Scalar>::to_f64(*m)).sum();
    let norm = mask_sum.max(1.0);

    if weights.lambda_abs != 0.0 {
        let werr = x
            .sub(x_gt)?
            .abs()
            .mul(&broadcast_ch(&c.mul(mask)?, 3)?)?
            .sum()
            .scale(weights.lambda_abs / norm);
        total = total.add(&werr)?;
    }
    if weights.alpha_conf != 0.0 {
        let logc = c.ln().mul(mask)?.sum().scale(-weights.alpha_conf / norm);
        total = total.add(&logc)?;
    }
    Ok(total)
}

/// Body-parameter regression: per-group sum of squared errors, summed.
pub fn loss_smplx<E: Scalar>(student: &BodyTensors<E>, target: &BodyParams) -> Result<Tensor<E>> {
    target.validate()?;
    let tape = student.beta.tape();
    let groups: [(&Tensor<E>, &[f64]); 4] = [
        (&student.beta, &target.beta),
        (&student.theta, &target.theta),
        (&student.psi, &target.psi),
        (&student.cam, &target.cam),
    ];
    let mut total = tape.zeros(&[1]).sum();
    for (pred, want) in groups {
        if pred.numel() != want.len() {
            return Err(Error::dims("loss_smplx", &pred.shape(), &[want.len()]));
        }
        let t = tape.constant(want.iter().map(|&v| E::from_f64(v)).collect(), &[want.len()])?;
        let d = pred.reshape(&[want.len()])?.sub(&t)?;
        total = total.add(&d.mul(&d)?.sum())?;
    }
    Ok(total)
}

/// Mean layerwise MSE between two hidden-state traces over the same layers.
pub fn loss_distill<E: Scalar>(
    student: &[(usize, Tensor<E>)],
    teacher: &[(usize, Tensor<E>)],
) -> Result<Tensor<E>> {
    if student.is_empty() || student.len() != teacher.len() {
        return Err(Error::Contract(format!(
            "trace length mismatch: student {}, teacher {}",
            student.len(),
            teacher.len()
        )));
    }
    let mut terms = Vec::with_capacity(student.len());
    for ((si, s), (ti, t)) in student.iter().zip(teacher) {
        if si != ti {
            return Err(Error::Contract(format!("trace layers differ: {si} vs {ti}")));
        }
        same_shape("loss_distill", s, t)?;
        terms.push(mse(s, t)?.reshape(&[1])?);
    }
    Ok(concat(&terms, 0)?.mean())
}

/// Tape-side term handles going into the weighted total.
pub struct LossTerms<E: Scalar> {
    pub nvs: Tensor<E>,
    pub gs: Tensor<E>,
    pub pts: Tensor<E>,
    pub smplx: Tensor<E>,
    pub distill: Option<Tensor<E>>,
}

/// Weighted total on the tape plus a plain-value report. A non-finite term
/// aborts with the term's name.
pub fn loss_total<E: Scalar>(
    terms: &LossTerms<E>,
    weights: &LossWeights,
    step: u64,
) -> Result<(Tensor<E>, LossReport)> {
    weights.validate()?;
    let scalar_of = |t: &Tensor<E>, name: &str| -> Result<f64> {
        if t.numel() != 1 {
            return Err(Error::dims(
                "loss_total",
                &t.shape(),
                &[1],
            ));
        }
        let v = t.value()[0].to_f64();
        if !v.is_finite() {
            return Err(Error::Numeric {
                step,
                term: name.to_string(),
            });
        }
        Ok(v)
    };
    let nvs = scalar_of(&terms.nvs, "nvs")?;
    let gs = scalar_of(&terms.gs, "gs")?;
    let pts = scalar_of(&terms.pts, "pts")?;
    let smplx = scalar_of(&terms.smplx, "smplx")?;
    let distill = match &terms.distill {
        Some(t) => scalar_of(t, "distill")?,
        None => 0.0,
    };

    let mut total = terms
        .nvs
        .scale(weights.nvs)
        .add(&terms.gs.scale(weights.gs))?
        .add(&terms.pts.scale(weights.pts))?
        .add(&terms.smplx.scale(weights.smplx))?;
    if let Some(d) = &terms.distill {
        total = total.add(&d.scale(weights.distill))?;
    }
    let report = LossReport {
        step,
        nvs,
        gs,
        pts,
        smplx,
        distill,
        total: scalar_of(&total, "total")?,
    };
    Ok((total, report))
}
