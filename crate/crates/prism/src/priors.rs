//! Geometric prior branches: body-parameter decoding with triplane feature
//! lookup, and point-map prediction with confidence.
//!
//! Both branches read the mid-cascade token sequence. The body decoder works
//! on the source half (that is where observed appearance lives); its
//! parameters drive the capsule body, whose vertices are soft-splatted into
//! the target view as a plain-data position map and looked up in learned
//! triplanes. The point head works on the target half and predicts a
//! camera-frame point map plus a strictly positive confidence. The vertex
//! scaffold is treated as data: gradients reach the body heads through the
//! parameter loss, and reach the triplanes through the feature lookup.

use crate::body::{BodyParams, N_EXPR, N_POSE, N_SHAPE};
use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::tensor::{Grads, ParamLeaves, ParamStore, Scalar, Tensor};
use rand::Rng;
use std::rc::Rc;

/// Feature channels of both adapters and the triplanes.
pub const PRIOR_CH: usize = 32;
/// Triplane resolution (nodes per side).
pub const TRIPLANE_RES: usize = 32;

/// Screen-space footprint of one splatted vertex, pixels.
const VERTEX_SIGMA: f64 = 0.7;
const VERTEX_CUTOFF: f64 = 2.5;
/// Contributors deeper than the pixel's nearest hit by more than this are
/// treated as occluded, meters.
const DEPTH_BAND: f64 = 0.08;

/// Predicted body coefficients still attached to the tape.
pub struct BodyTensors<E: Scalar> {
    pub beta: Tensor<E>,
    pub theta: Tensor<E>,
    pub psi: Tensor<E>,
    pub cam: Tensor<E>,
}

impl<E: Scalar> BodyTensors<E> {
    /// Detach into plain coefficients for the kinematic scaffold.
    pub fn to_params(&self) -> Result<BodyParams> {
        let take = |t: &Tensor<E>| t.to_vec().iter().map(|v| <E as Scalar>::to_f64(*v)).collect::<Vec<f64>>();
        let cam = take(&self.cam);
        let params = BodyParams {
            beta: take(&self.beta),
            theta: take(&self.theta),
            psi: take(&self.psi),
            cam: cam
                .try_into()
                .map_err(|_| Error::Contract("cam head must emit 3 values".into()))?,
        };
        params.validate()?;
        Ok(params)
    }
}

fn glorot<E: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<E> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| E::from_f64(rng.gen_range(-a..a))).collect()
}

fn init_conv<E: Scalar>(store: &mut ParamStore<E>, name: &str, ci: usize, co: usize, k: usize, rng: &mut impl Rng) {
    let fan = ci * k * k;
    store.insert(
        &format!("{name}.w"),
        &[co, ci, k, k],
        glorot(rng, fan, co * k * k, co * ci * k * k),
    );
    store.insert(&format!("{name}.b"), &[co], vec![E::zero(); co]);
}

fn init_zero_linear<E: Scalar>(store: &mut ParamStore<E>, name: &str, fan_in: usize, fan_out: usize) {
    store.insert(&format!("{name}.w"), &[fan_in, fan_out], vec![E::zero(); fan_in * fan_out]);
    store.insert(&format!("{name}.b"), &[fan_out], vec![E::zero(); fan_out]);
}

/// Register every prior-branch parameter.
///
/// Regression heads start at zero so the initial prediction is the neutral
/// body (and `X = 0`, `C = softplus(0)`); adapters are Glorot; triplanes
/// start small but nonzero so the feature lookup has signal from step one.
pub fn init_prior_params<E: Scalar>(store: &mut ParamStore<E>, d: usize, p: usize, rng: &mut impl Rng) {
    let a = PRIOR_CH;
    init_conv(store, "prior.smpl.adapter.conv0", d, a, 3, rng);
    init_conv(store, "prior.smpl.adapter.conv1", a, a, 3, rng);
    init_zero_linear(store, "prior.smpl.head.beta", a, N_SHAPE);
    init_zero_linear(store, "prior.smpl.head.theta", a, N_POSE);
    init_zero_linear(store, "prior.smpl.head.psi", a, N_EXPR);
    init_zero_linear(store, "prior.smpl.head.cam", a, 3);
    init_conv(store, "prior.pts.adapter.conv0", d, a, 3, rng);
    init_conv(store, "prior.pts.adapter.conv1", a, a, 3, rng);
    init_zero_linear(store, "prior.pts.head", a, 4 * p * p);
    for plane in ["xy", "xz", "yz"] {
        let data: Vec<E> = (0..a * TRIPLANE_RES * TRIPLANE_RES)
            .map(|_| E::from_f64(rng.gen_range(-0.1..0.1)))
            .collect();
        store.insert(
            &format!("prior.triplane.{plane}"),
            &[a, TRIPLANE_RES, TRIPLANE_RES],
            data,
        );
    }
}

/// Tokens `[rows*cols, d]` to a spatial grid `[d, rows, cols]`.
fn tokens_to_grid<E: Scalar>(tokens: &Tensor<E>, rows: usize, cols: usize) -> Result<Tensor<E>> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] != rows * cols {
        return Err(Error::dims("tokens_to_grid", &s, &[rows * cols, 0]));
    }
    tokens.transpose()?.reshape(&[s[1], rows, cols])
}

fn adapter<E: Scalar>(
    grid: &Tensor<E>,
    leaves: &ParamLeaves<E>,
    prefix: &str,
) -> Result<Tensor<E>> {
    let g = |s: &str| leaves.get(&format!("{prefix}.{s}"));
    let mid = grid.conv2d(&g("conv0.w")?, &g("conv0.b")?)?.gelu();
    Ok(mid.conv2d(&g("conv1.w")?, &g("conv1.b")?)?.gelu())
}

/// Decode body coefficients from the source-half tokens: spatial adapter,
/// global mean pool, then four linear heads. Pose angles are tanh-bounded to
/// [-pi, pi] and the camera scale passes through softplus.
pub fn smplx_decoder<E: Scalar>(
    tokens: &Tensor<E>,
    rows: usize,
    cols: usize,
    leaves: &ParamLeaves<E>,
) -> Result<BodyTensors<E>> {
    let feat = adapter(&tokens_to_grid(tokens, rows, cols)?, leaves, "prior.smpl.adapter")?;
    let s = rows * cols;
    let flat = feat.reshape(&[PRIOR_CH, s])?;
    let tape = tokens.tape();
    let ones = tape.constant(vec![E::from_f64(1.0 / s as f64); s], &[s, 1])?;
    let pooled = flat.matmul(&ones)?.reshape(&[1, PRIOR_CH])?;

    let head = |name: &str| -> Result<Tensor<E>> {
        let w = leaves.get(&format!("prior.smpl.head.{name}.w"))?;
        let b = leaves.get(&format!("prior.smpl.head.{name}.b"))?;
        pooled.linear(&w, &b)
    };
    let beta = head("beta")?.reshape(&[N_SHAPE])?;
    let theta = head("theta")?.tanh().scale(std::f64::consts::PI).reshape(&[N_POSE])?;
    let psi = head("psi")?.reshape(&[N_EXPR])?;
    let cam_raw = head("cam")?;
    let scale = cam_raw.slice(1, 0, 1)?.softplus();
    let shift = cam_raw.slice(1, 1, 2)?;
    let cam = crate::tensor::concat(&[scale, shift], 1)?.reshape(&[3])?;
    Ok(BodyTensors { beta, theta, psi, cam })
}

/// Predict a camera-frame point map and confidence from the target-half
/// tokens. Returns `(X [3,H,W], C [1,H,W], F_pts [rows*cols, PRIOR_CH])`.
pub fn point_head<E: Scalar>(
    tokens: &Tensor<E>,
    rows: usize,
    cols: usize,
    p: usize,
    leaves: &ParamLeaves<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let feat = adapter(&tokens_to_grid(tokens, rows, cols)?, leaves, "prior.pts.adapter")?;
    let s = rows * cols;
    let token_feat = feat.reshape(&[PRIOR_CH, s])?.transpose()?;
    let w = leaves.get("prior.pts.head.w")?;
    let b = leaves.get("prior.pts.head.b")?;
    let maps = token_feat.linear(&w, &b)?.unpatchify(p, rows, cols, 4)?;
    let (h, wd) = (rows * p, cols * p);
    let x = maps.slice(0, 0, 3)?;
    let conf = maps.slice(0, 3, 1)?.softplus().reshape(&[1, h, wd])?;
    Ok((x, conf, token_feat))
}

/// Plain-data position map: world coordinates splatted into a target view.
#[derive(Debug, Clone)]
pub struct PositionMap {
    pub h: usize,
    pub w: usize,
    /// Three planes of world coordinates, channel-major.
    pub xyz: Vec<f64>,
    /// One plane, 1.0 where any vertex contributed.
    pub mask: Vec<f64>,
}

impl PositionMap {
    pub fn point(&self, y: usize, x: usize) -> [f64; 3] {
        let n = self.h * self.w;
        let i = y * self.w + x;
        [self.xyz[i], self.xyz[n + i], self.xyz[2 * n + i]]
    }
}

/// Soft-splat vertices into the target view. Each pixel averages the world
/// coordinates of contributing vertices with Gaussian screen weights,
/// keeping only vertices within [`DEPTH_BAND`] of the pixel's nearest hit.
pub fn render_position_map(vertices: &[Vec3], pose: &CameraPose) -> Result<PositionMap> {
    pose.validate()?;
    let (h, w) = (pose.height, pose.width);
    let mut best_depth = vec![f64::INFINITY; h * w];
    struct Cand {
        vert: u32,
        depth: f64,
        weight: f64,
    }
    let mut cands: Vec<Vec<Cand>> = (0..h * w).map(|_| Vec::new()).collect();
    let r = VERTEX_CUTOFF * VERTEX_SIGMA;
    for (i, vtx) in vertices.iter().enumerate() {
        if !(vtx.x.is_finite() && vtx.y.is_finite() && vtx.z.is_finite()) {
            return Err(Error::Contract(format!("non-finite vertex {i}")));
        }
        let Some((u, v, depth)) = pose.project(*vtx) else { continue };
        let x0 = ((u - r - 0.5).ceil().max(0.0)) as usize;
        let x1 = ((u + r - 0.5).floor().min(w as f64 - 1.0)) as isize;
        let y0 = ((v - r - 0.5).ceil().max(0.0)) as usize;
        let y1 = ((v + r - 0.5).floor().min(h as f64 - 1.0)) as isize;
        if x1 < x0 as isize || y1 < y0 as isize {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let du = x as f64 + 0.5 - u;
                let dv = y as f64 + 0.5 - v;
                let d2 = du * du + dv * dv;
                if d2 > r * r {
                    continue;
                }
                let p = y * w + x;
                cands[p].push(Cand {
                    vert: i as u32,
                    depth,
                    weight: (-d2 / (2.0 * VERTEX_SIGMA * VERTEX_SIGMA)).exp(),
                });
                if depth < best_depth[p] {
                    best_depth[p] = depth;
                }
            }
        }
    }
    let mut xyz = vec![0.0; 3 * h * w];
    let mut mask = vec![0.0; h * w];
    for p in 0..h * w {
        if cands[p].is_empty() {
            continue;
        }
        let cutoff = best_depth[p] + DEPTH_BAND;
        let mut acc = [0.0f64; 3];
        let mut total = 0.0;
        for c in &cands[p] {
            if c.depth > cutoff {
                continue;
            }
            let vtx = vertices[c.vert as usize];
            acc[0] += c.weight * vtx.x;
            acc[1] += c.weight * vtx.y;
            acc[2] += c.weight * vtx.z;
            total += c.weight;
        }
        if total > 0.0 {
            mask[p] = 1.0;
            xyz[p] = acc[0] / total;
            xyz[h * w + p] = acc[1] / total;
            xyz[2 * h * w + p] = acc[2] / total;
        }
    }
    Ok(PositionMap { h, w, xyz, mask })
}

/// Axis-aligned query volume for the triplanes.
#[derive(Debug, Clone, Copy)]
pub struct TriBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for TriBox {
    /// One cubic meter of margin around a standing subject at the origin.
    fn default() -> TriBox {
        TriBox {
            min: [-1.0, 0.0, -1.0],
            max: [1.0, 2.0, 1.0],
        }
    }
}

impl TriBox {
    /// Map a world coordinate to [0, R-1] plane coordinates, clamping
    /// queries outside the box to its boundary.
    fn plane_coord(&self, v: f64, axis: usize, res: usize) -> f64 {
        let t = (v - self.min[axis]) / (self.max[axis] - self.min[axis]);
        t.clamp(0.0, 1.0) * (res - 1) as f64
    }
}

struct BilinearTap {
    node: usize,
    weight: f64,
}

fn bilinear_taps(px: f64, py: f64, res: usize, taps: &mut Vec<BilinearTap>) {
    let x0 = (px.floor() as usize).min(res - 2);
    let y0 = (py.floor() as usize).min(res - 2);
    let fx = px - x0 as f64;
    let fy = py - y0 as f64;
    taps.clear();
    taps.push(BilinearTap { node: y0 * res + x0, weight: (1.0 - fx) * (1.0 - fy) });
    taps.push(BilinearTap { node: y0 * res + x0 + 1, weight: fx * (1.0 - fy) });
    taps.push(BilinearTap { node: (y0 + 1) * res + x0, weight: (1.0 - fx) * fy });
    taps.push(BilinearTap { node: (y0 + 1) * res + x0 + 1, weight: fx * fy });
}

/// Sample the three feature planes at every masked position-map pixel and
/// sum them into a `[PRIOR_CH, H, W]` feature image (zero where mask = 0).
/// Differentiable with respect to the planes; the positions are plain data.
pub fn triplane_query<E: Scalar>(
    planes: &[Tensor<E>; 3],
    pos: &PositionMap,
    bbox: &TriBox,
) -> Result<Tensor<E>> {
    let c = PRIOR_CH;
    let res = TRIPLANE_RES;
    for pl in planes {
        if pl.shape() != vec![c, res, res] {
            return Err(Error::dims("triplane_query", &pl.shape(), &[c, res, res]));
        }
    }
    let (h, w) = (pos.h, pos.w);
    let tape = planes[0].tape();
    // Per plane: the two world axes that parameterize it (x right, y up).
    let axes = [(0usize, 1usize), (0, 2), (1, 2)];

    // Precompute taps once; reused verbatim by the backward scatter.
    let mut all_taps: Vec<[(usize, [BilinearTap; 4]); 3]> = Vec::new();
    let mut masked: Vec<u32> = Vec::new();
    let mut scratch = Vec::with_capacity(4);
    for p in 0..h * w {
        if pos.mask[p] == 0.0 {
            continue;
        }
        masked.push(p as u32);
        let world = [pos.xyz[p], pos.xyz[h * w + p], pos.xyz[2 * h * w + p]];
        let mut per_plane: Vec<(usize, [BilinearTap; 4])> = Vec::with_capacity(3);
        for (pi, (ax, ay)) in axes.iter().enumerate() {
            let px = bbox.plane_coord(world[*ax], *ax, res);
            let py = bbox.plane_coord(world[*ay], *ay, res);
            bilinear_taps(px, py, res, &mut scratch);
            let taps: [BilinearTap; 4] = [
                BilinearTap { node: scratch[0].node, weight: scratch[0].weight },
                BilinearTap { node: scratch[1].node, weight: scratch[1].weight },
                BilinearTap { node: scratch[2].node, weight: scratch[2].weight },
                BilinearTap { node: scratch[3].node, weight: scratch[3].weight },
            ];
            per_plane.push((pi, taps));
        }
        all_taps.push([
            per_plane.remove(0),
            per_plane.remove(0),
            per_plane.remove(0),
        ]);
    }

    let plane_vals: Vec<Rc<Vec<E>>> = planes.iter().map(|p| p.value()).collect();
    let mut out = vec![E::zero(); c * h * w];
    for (mi, &p) in masked.iter().enumerate() {
        let p = p as usize;
        for (pi, taps) in &all_taps[mi] {
            let pv = &plane_vals[*pi];
            for tap in taps {
                let wgt = E::from_f64(tap.weight);
                for ch in 0..c {
                    out[ch * h * w + p] = out[ch * h * w + p] + pv[ch * res * res + tap.node] * wgt;
                }
            }
        }
    }

    let needs = planes.iter().any(|p| p.needs_grad());
    let ids = [planes[0].id(), planes[1].id(), planes[2].id()];
    let backward = needs.then(|| {
        Box::new(move |dout: &[E], grads: &mut Grads<E>| {
            for (k, id) in ids.iter().enumerate() {
                grads.add(*id, c * res * res, |g| {
                    for (mi, &p) in masked.iter().enumerate() {
                        let p = p as usize;
                        let (pi, taps) = &all_taps[mi][k];
                        debug_assert_eq!(*pi, k);
                        for tap in taps {
                            let wgt = E::from_f64(tap.weight);
                            for ch in 0..c {
                                g[ch * res * res + tap.node] =
                                    g[ch * res * res + tap.node] + dout[ch * h * w + p] * wgt;
                            }
                        }
                    }
                });
            }
        }) as crate::tensor::BackwardFn<E>
    });
    Ok(tape.push(Rc::new(out), vec![c, h, w], needs, backward))
}

/// Pool a pixel-space feature image to the token grid: `[C, H, W]` to
/// `[rows*cols, C]` with patch-size average pooling.
pub fn pool_to_tokens<E: Scalar>(features: &Tensor<E>, p: usize) -> Result<Tensor<E>> {
    let s = features.shape();
    let pooled = features.avg_pool2d(p)?;
    let (rows, cols) = (s[1] / p, s[2] / p);
    pooled.reshape(&[s[0], rows * cols])?.transpose()
}
