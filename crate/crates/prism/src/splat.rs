//! Differentiable isotropic Gaussian splat compositing.
//!
//! Each gaussian projects to a screen-space disc of radius `3 sigma_proj`
//! with `sigma_proj = sigma * fx / depth`. Per pixel, the nearest 32
//! contributors by depth (ties broken by ascending gaussian index) composite
//! front to back: `C = sum c_i w_i prod_{j<i} (1 - w_j)` with
//! `w_i = alpha_i * exp(-delta^2 / (2 sigma_proj^2))`.
//!
//! The whole render is one fused tape op with an analytic backward pass that
//! scatters gradients to means, scales, opacities and colors. Internal math
//! runs in f64 regardless of the tape element type.

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::tensor::{Grads, Scalar, Tensor};
use std::rc::Rc;

/// Per-pixel contributor cap: nearest by depth.
pub const MAX_CONTRIBUTORS: usize = 32;
/// Compositing weights stay strictly below 1 so transmittance never hits 0.
const W_MAX: f64 = 0.9999;
/// Screen-space footprint floor, pixels; below this a splat would fall
/// between pixel centers, so it is clamped (gradient to sigma stops there).
const SIGMA_PROJ_MIN: f64 = 0.3;
const NEAR: f64 = 1e-4;
const CUTOFF_SIGMAS: f64 = 3.0;

/// A set of isotropic world-space gaussians living on a tape.
#[derive(Clone)]
pub struct GaussianSet<E: Scalar> {
    /// `[n, 3]` world positions.
    pub means: Tensor<E>,
    /// `[n]` isotropic scales, meters.
    pub sigma: Tensor<E>,
    /// `[n]` opacities in (0, 1).
    pub alpha: Tensor<E>,
    /// `[n, 3]` colors in (0, 1).
    pub color: Tensor<E>,
}

impl<E: Scalar> GaussianSet<E> {
    pub fn len(&self) -> usize {
        self.sigma.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sigma.numel();
        if self.means.shape() != vec![n, 3] || self.color.shape() != vec![n, 3] || self.alpha.numel() != n {
            return Err(Error::dims("gaussian set", &self.means.shape(), &[n, 3]));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct Proj {
    u: f64,
    v: f64,
    d: f64,
    sp: f64,
    sp_clamped: bool,
    culled: bool,
}

#[derive(Clone, Copy)]
struct Contrib {
    gauss: u32,
    w: f64,
    g: f64,
    d2: f64,
}

fn project_all(means: &[f64], sigma: &[f64], pose: &CameraPose) -> Vec<Proj> {
    let n = sigma.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let p = crate::geom::v3(means[3 * i], means[3 * i + 1], means[3 * i + 2]);
        let pc = pose.cam_coords(p);
        let d = -pc.z;
        if d <= NEAR || !d.is_finite() {
            out.push(Proj { u: 0.0, v: 0.0, d: 1.0, sp: 1.0, sp_clamped: false, culled: true });
            continue;
        }
        let u = pose.cx + pose.fx * pc.x / d;
        let v = pose.cy - pose.fy * pc.y / d;
        let sp_raw = sigma[i] * pose.fx / d;
        let sp_clamped = sp_raw < SIGMA_PROJ_MIN;
        let sp = if sp_clamped { SIGMA_PROJ_MIN } else { sp_raw };
        let culled = !(u.is_finite() && v.is_finite() && sp.is_finite());
        out.push(Proj { u, v, d, sp, sp_clamped, culled });
    }
    out
}

/// Candidate ordering: nearer depth wins, ties by lower index.
fn closer(a: (f64, u32), b: (f64, u32)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Render a gaussian set into a `[4, H, W]` rgb+alpha tensor.
pub fn splat_render<E: Scalar>(set: &GaussianSet<E>, pose: &CameraPose) -> Result<Tensor<E>> {
    set.validate()?;
    pose.validate()?;
    let (h, w) = (pose.height, pose.width);
    let tape = set.means.tape();
    let n = set.len();

    let means_v = set.means.value();
    let sigma_v = set.sigma.value();
    let alpha_v = set.alpha.value();
    let color_v = set.color.value();
    let means: Vec<f64> = means_v.iter().map(|&x| <E as Scalar>::to_f64(x)).collect();
    let sigma: Vec<f64> = sigma_v.iter().map(|&x| <E as Scalar>::to_f64(x)).collect();
    let alpha: Vec<f64> = alpha_v.iter().map(|&x| <E as Scalar>::to_f64(x)).collect();
    let color: Vec<f64> = color_v.iter().map(|&x| <E as Scalar>::to_f64(x)).collect();

    let proj = project_all(&means, &sigma, pose);

    // Bin: per pixel keep the MAX_CONTRIBUTORS nearest candidates.
    let mut cand: Vec<Vec<(f64, u32, f64)>> = vec![Vec::new(); h * w];
    for (i, pr) in proj.iter().enumerate() {
        if pr.culled {
            continue;
        }
        let r = CUTOFF_SIGMAS * pr.sp;
        let x0 = ((pr.u - r - 0.5).ceil().max(0.0)) as usize;
        let x1 = ((pr.u + r - 0.5).floor().min(w as f64 - 1.0)) as isize;
        let y0 = ((pr.v - r - 0.5).ceil().max(0.0)) as usize;
        let y1 = ((pr.v + r - 0.5).floor().min(h as f64 - 1.0)) as isize;
        if x1 < x0 as isize || y1 < y0 as isize {
            continue;
        }
        let r2 = r * r;
        for y in y0..=y1 as usize {
            let vc = y as f64 + 0.5;
            for x in x0..=x1 as usize {
                let uc = x as f64 + 0.5;
                let d2 = (uc - pr.u) * (uc - pr.u) + (vc - pr.v) * (vc - pr.v);
                if d2 > r2 {
                    continue;
                }
                let slot = &mut cand[y * w + x];
                if slot.len() < MAX_CONTRIBUTORS {
                    slot.push((pr.d, i as u32, d2));
                } else {
                    // Replace the farthest kept candidate if this one is nearer.
                    let mut far = 0;
                    for (k, c) in slot.iter().enumerate() {
                        if closer((slot[far].0, slot[far].1), (c.0, c.1)) {
                            far = k;
                        }
                    }
                    if closer((pr.d, i as u32), (slot[far].0, slot[far].1)) {
                        slot[far] = (pr.d, i as u32, d2);
                    }
                }
            }
        }
    }

    // Composite front to back and keep contributor lists for the backward.
    let mut out = vec![0.0f64; 4 * h * w];
    let mut contribs: Vec<Vec<Contrib>> = vec![Vec::new(); h * w];
    for p in 0..h * w {
        let slot = &mut cand[p];
        if slot.is_empty() {
            continue;
        }
        slot.sort_by(|a, b| {
            a.0.partial_cmp(&b.0).expect("finite depth").then(a.1.cmp(&b.1))
        });
        let mut t = 1.0f64;
        let list = &mut contribs[p];
        for &(_, idx, d2) in slot.iter() {
            let pr = &proj[idx as usize];
            let g = (-d2 / (2.0 * pr.sp * pr.sp)).exp();
            let w_i = (alpha[idx as usize] * g).min(W_MAX);
            if w_i <= 1e-12 {
                continue;
            }
            let wt = w_i * t;
            for ch in 0..3 {
                out[ch * h * w + p] += color[3 * idx as usize + ch] * wt;
            }
            out[3 * h * w + p] += wt;
            list.push(Contrib { gauss: idx, w: w_i, g, d2 });
            t *= 1.0 - w_i;
        }
    }

    let value: Vec<E> = out.iter().map(|&x| E::from_f64(x)).collect();
    let needs = set.means.needs_grad()
        || set.sigma.needs_grad()
        || set.alpha.needs_grad()
        || set.color.needs_grad();
    let ids = (set.means.id(), set.sigma.id(), set.alpha.id(), set.color.id());
    let backward = needs.then(|| {
        let pose = *pose;
        let rot = pose.rot;
        Box::new(move |dout: &[E], grads: &mut Grads<E>| {
            let mut gm = vec![0.0f64; n * 3];
            let mut gs = vec![0.0f64; n];
            let mut ga = vec![0.0f64; n];
            let mut gc = vec![0.0f64; n * 3];
            let hw = h * w;
            for p in 0..hw {
                let list = &contribs[p];
                if list.is_empty() {
                    continue;
                }
                let dr = <E as Scalar>::to_f64(dout[p]);
                let dg = <E as Scalar>::to_f64(dout[hw + p]);
                let db = <E as Scalar>::to_f64(dout[2 * hw + p]);
                let da = <E as Scalar>::to_f64(dout[3 * hw + p]);
                if dr == 0.0 && dg == 0.0 && db == 0.0 && da == 0.0 {
                    continue;
                }
                let uc = (p % w) as f64 + 0.5;
                let vc = (p / w) as f64 + 0.5;

                // Transmittance before each contributor, then the suffix sum
                // that carries the occlusion term of dL/dw_i.
                let k = list.len();
                let mut trans = vec![0.0f64; k];
                let mut t = 1.0;
                for (i, c) in list.iter().enumerate() {
                    trans[i] = t;
                    t *= 1.0 - c.w;
                }
                let mut suffix = 0.0f64; // sum_{j>i} w_j T_j q_j
                for i in (0..k).rev() {
                    let c = &list[i];
                    let gi = c.gauss as usize;
                    let q = color[3 * gi] * dr + color[3 * gi + 1] * dg + color[3 * gi + 2] * db + da;
                    let wt = c.w * trans[i];
                    gc[3 * gi] += wt * dr;
                    gc[3 * gi + 1] += wt * dg;
                    gc[3 * gi + 2] += wt * db;
                    let gw = trans[i] * q - suffix / (1.0 - c.w);
                    suffix += wt * q;
                    if c.w >= W_MAX {
                        continue; // clamped weight: no gradient into alpha/geometry
                    }
                    let pr = &proj[gi];
                    ga[gi] += gw * c.g;
                    let ag = alpha[gi] * c.g;
                    let gd2 = gw * ag * (-1.0 / (2.0 * pr.sp * pr.sp));
                    let gsp_shape = gw * ag * (c.d2 / (pr.sp * pr.sp * pr.sp));
                    let gu = gd2 * 2.0 * (pr.u - uc);
                    let gv = gd2 * 2.0 * (pr.v - vc);
                    let gsp = if pr.sp_clamped { 0.0 } else { gsp_shape };

                    let x_cam = (pr.u - pose.cx) * pr.d / pose.fx;
                    let y_cam = -(pr.v - pose.cy) * pr.d / pose.fy;
                    let gx = gu * pose.fx / pr.d;
                    let gy = -gv * pose.fy / pr.d;
                    let gdepth = -gu * pose.fx * x_cam / (pr.d * pr.d)
                        + gv * pose.fy * y_cam / (pr.d * pr.d)
                        - gsp * sigma[gi] * pose.fx / (pr.d * pr.d);
                    let gz = -gdepth;
                    let grad_cam = crate::geom::v3(gx, gy, gz);
                    let gw_world = rot.transpose().mul_vec(grad_cam);
                    gm[3 * gi] += gw_world.x;
                    gm[3 * gi + 1] += gw_world.y;
                    gm[3 * gi + 2] += gw_world.z;
                    gs[gi] += gsp * pose.fx / pr.d;
                }
            }
            grads.add(ids.0, n * 3, |acc| {
                for (a, v) in acc.iter_mut().zip(&gm) {
                    *a = *a + E::from_f64(*v);
                }
            });
            grads.add(ids.1, n, |acc| {
                for (a, v) in acc.iter_mut().zip(&gs) {
                    *a = *a + E::from_f64(*v);
                }
            });
            grads.add(ids.2, n, |acc| {
                for (a, v) in acc.iter_mut().zip(&ga) {
                    *a = *a + E::from_f64(*v);
                }
            });
            grads.add(ids.3, n * 3, |acc| {
                for (a, v) in acc.iter_mut().zip(&gc) {
                    *a = *a + E::from_f64(*v);
                }
            });
        }) as crate::tensor::BackwardFn<E>
    });
    Ok(tape.push(Rc::new(value), vec![4, h, w], needs, backward))
}
