//! Pinhole cameras, Plücker ray maps and patch tokenization.
//!
//! Conventions, used everywhere in the crate:
//! - world is right-handed, y up; the camera looks down its own -z axis;
//! - `rot` maps world to camera, `t` is the world-to-camera translation, so
//!   the camera center is `-rot^T t`;
//! - rays pass through pixel centers: pixel `(u, v)` uses the continuous
//!   image point `(u + 0.5, v + 0.5)`, with v growing downward;
//! - a ray is embedded as `(d, m)` with unit direction `d` and moment
//!   `m = o x d`, which is invariant to sliding the origin along the ray.

use crate::error::{Error, Result};
use crate::geom::{v3, Mat3, Vec3};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct CameraPose {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rot: Mat3,
    /// World-to-camera translation.
    pub t: Vec3,
    pub width: usize,
    pub height: usize,
}

impl CameraPose {
    /// Camera at `eye` looking at `target`, `up` roughly +y.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<CameraPose> {
        let back = eye.sub(target);
        if back.norm() < 1e-9 {
            return Err(Error::Contract("look_at with eye == target".into()));
        }
        let z = back.normalized(); // camera +z points away from the target
        let x = up.cross(z);
        if x.norm() < 1e-9 {
            return Err(Error::Contract("look_at with up parallel to view".into()));
        }
        let x = x.normalized();
        let y = z.cross(x);
        let rot = Mat3::from_rows(x, y, z);
        let t = rot.mul_vec(eye).scale(-1.0);
        let pose = CameraPose {
            fx,
            fy,
            cx,
            cy,
            rot,
            t,
            width,
            height,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0)
            || !self.fx.is_finite()
            || !self.fy.is_finite()
            || !self.cx.is_finite()
            || !self.cy.is_finite()
        {
            return Err(Error::Contract(format!(
                "degenerate intrinsics fx={} fy={} cx={} cy={}",
                self.fx, self.fy, self.cx, self.cy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Contract("zero image extent".into()));
        }
        let err = self.rot.orthonormal_error();
        if err > 1e-5 {
            return Err(Error::Contract(format!(
                "rotation is not orthonormal (error {err:.2e})"
            )));
        }
        if (self.rot.det() - 1.0).abs() > 1e-5 {
            return Err(Error::Contract(format!(
                "rotation determinant {} is not +1",
                self.rot.det()
            )));
        }
        Ok(())
    }

    pub fn camera_center(&self) -> Vec3 {
        self.rot.transpose().mul_vec(self.t).scale(-1.0)
    }

    /// World-space ray through continuous image coordinates.
    pub fn ray_at(&self, uc: f64, vc: f64) -> (Vec3, Vec3) {
        let d_cam = v3((uc - self.cx) / self.fx, -(vc - self.cy) / self.fy, -1.0);
        let d = self.rot.transpose().mul_vec(d_cam).normalized();
        (self.camera_center(), d)
    }

    /// World-space ray through the center of pixel `(u, v)`.
    pub fn ray(&self, u: usize, v: usize) -> (Vec3, Vec3) {
        self.ray_at(u as f64 + 0.5, v as f64 + 0.5)
    }

    pub fn cam_coords(&self, p_world: Vec3) -> Vec3 {
        self.rot.mul_vec(p_world).add(self.t)
    }

    /// Project a world point; `None` if it is not strictly in front of the
    /// camera. Returns continuous pixel coordinates and the depth `-z_cam`.
    pub fn project(&self, p_world: Vec3) -> Option<(f64, f64, f64)> {
        let pc = self.cam_coords(p_world);
        let depth = -pc.z;
        if depth <= 1e-9 {
            return None;
        }
        let u = self.cx + self.fx * pc.x / depth;
        let v = self.cy - self.fy * pc.y / depth;
        Some((u, v, depth))
    }

    /// Structured-text record: `fx fy cx cy` then nine rotation entries
    /// row-major, then three translation entries.
    pub fn to_record(&self) -> String {
        let mut s = format!("{:.17e} {:.17e} {:.17e} {:.17e}", self.fx, self.fy, self.cx, self.cy);
        for v in self.rot.m {
            s.push_str(&format!(" {v:.17e}"));
        }
        for v in self.t.to_array() {
            s.push_str(&format!(" {v:.17e}"));
        }
        s
    }

    /// Parse [`CameraPose::to_record`] output. Image extents are not part of
    /// the record and come from the run configuration.
    pub fn from_record(line: &str, width: usize, height: usize) -> Result<CameraPose> {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|tok| tok.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Contract(format!("bad pose record: {e}")))?;
        if vals.len() != 16 {
            return Err(Error::Contract(format!(
                "pose record has {} fields, expected 16",
                vals.len()
            )));
        }
        let pose = CameraPose {
            fx: vals[0],
            fy: vals[1],
            cx: vals[2],
            cy: vals[3],
            rot: Mat3 {
                m: vals[4..13].try_into().unwrap(),
            },
            t: v3(vals[13], vals[14], vals[15]),
            width,
            height,
        };
        pose.validate()?;
        Ok(pose)
    }
}

/// Per-pixel ray embeddings `(d, m)`, pixel-major with the six channels
/// interleaved last.
#[derive(Debug, Clone)]
pub struct PluckerMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl PluckerMap {
    pub fn at(&self, u: usize, v: usize) -> &[f64] {
        &self.data[(v * self.w + u) * 6..(v * self.w + u) * 6 + 6]
    }

    pub fn dir(&self, u: usize, v: usize) -> Vec3 {
        let r = self.at(u, v);
        v3(r[0], r[1], r[2])
    }

    pub fn moment(&self, u: usize, v: usize) -> Vec3 {
        let r = self.at(u, v);
        v3(r[3], r[4], r[5])
    }
}

/// Build the `h x w x 6` ray map of a validated pose.
pub fn plucker_map(pose: &CameraPose) -> Result<PluckerMap> {
    pose.validate()?;
    let (h, w) = (pose.height, pose.width);
    let o = pose.camera_center();
    let rt = pose.rot.transpose();
    let mut data = Vec::with_capacity(h * w * 6);
    for v in 0..h {
        for u in 0..w {
            let d_cam = v3(
                (u as f64 + 0.5 - pose.cx) / pose.fx,
                -(v as f64 + 0.5 - pose.cy) / pose.fy,
                -1.0,
            );
            let d = rt.mul_vec(d_cam).normalized();
            let m = o.cross(d);
            data.extend_from_slice(&[d.x, d.y, d.z, m.x, m.y, m.z]);
        }
    }
    Ok(PluckerMap { h, w, data })
}

/// Tokenized view: `tokens` is `[rows*cols, d]`, patches row-major.
pub struct TokenSequence<E: Scalar> {
    pub tokens: Tensor<E>,
    pub rows: usize,
    pub cols: usize,
    pub p: usize,
}

fn check_patching(h: usize, w: usize, p: usize) -> Result<(usize, usize)> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Contract(format!(
            "patch size {p} does not divide image extents {h}x{w}"
        )));
    }
    Ok((h / p, w / p))
}

/// Source tokenizer: concatenate image RGB and the six ray channels per
/// pixel, cut into p x p patches (row-major within the patch, channels
/// interleaved last) and project each flattened patch with the learned
/// linear map `w: [9 p^2, d]`, `b: [d]`.
pub fn tokenize_source<E: Scalar>(
    tape: &Tape<E>,
    image: &[f32],
    rays: &PluckerMap,
    p: usize,
    w: &Tensor<E>,
    b: &Tensor<E>,
) -> Result<TokenSequence<E>> {
    let (h, wd) = (rays.h, rays.w);
    if image.len() != 3 * h * wd {
        return Err(Error::dims("tokenize_source", &[image.len()], &[3, h, wd]));
    }
    let (rows, cols) = check_patching(h, wd, p)?;
    let ws = w.shape();
    if ws != vec![9 * p * p, ws.get(1).copied().unwrap_or(0)] || ws[1] == 0 {
        return Err(Error::dims("tokenize_source", &ws, &[9 * p * p, 0]));
    }

    let width = 9 * p * p;
    let mut patches = vec![E::zero(); rows * cols * width];
    for ty in 0..rows {
        for tx in 0..cols {
            let t = ty * cols + tx;
            for py in 0..p {
                for px in 0..p {
                    let (y, x) = (ty * p + py, tx * p + px);
                    let base = t * width + (py * p + px) * 9;
                    for c in 0..3 {
                        patches[base + c] = E::from_f64(image[(c * h + y) * wd + x] as f64);
                    }
                    let ray = rays.at(x, y);
                    for c in 0..6 {
                        patches[base + 3 + c] = E::from_f64(ray[c]);
                    }
                }
            }
        }
    }
    let tokens = tape
        .constant(patches, &[rows * cols, width])?
        .linear(w, b)?;
    Ok(TokenSequence {
        tokens,
        rows,
        cols,
        p,
    })
}

/// Target tokenizer: ray channels only, projected with `w: [6 p^2, d]`.
pub fn tokenize_target<E: Scalar>(
    tape: &Tape<E>,
    rays: &PluckerMap,
    p: usize,
    w: &Tensor<E>,
    b: &Tensor<E>,
) -> Result<TokenSequence<E>> {
    let (h, wd) = (rays.h, rays.w);
    let (rows, cols) = check_patching(h, wd, p)?;
    let ws = w.shape();
    if ws.len() != 2 || ws[0] != 6 * p * p {
        return Err(Error::dims("tokenize_target", &ws, &[6 * p * p, 0]));
    }

    let width = 6 * p * p;
    let mut patches = vec![E::zero(); rows * cols * width];
    for ty in 0..rows {
        for tx in 0..cols {
            let t = ty * cols + tx;
            for py in 0..p {
                for px in 0..p {
                    let (y, x) = (ty * p + py, tx * p + px);
                    let base = t * width + (py * p + px) * 6;
                    let ray = rays.at(x, y);
                    for c in 0..6 {
                        patches[base + c] = E::from_f64(ray[c]);
                    }
                }
            }
        }
    }
    let tokens = tape
        .constant(patches, &[rows * cols, width])?
        .linear(w, b)?;
    Ok(TokenSequence {
        tokens,
        rows,
        cols,
        p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};

    fn test_pose() -> CameraPose {
        CameraPose::look_at(
            v3(0.3, 1.1, 2.0),
            v3(0.0, 0.9, 0.0),
            v3(0.0, 1.0, 0.0),
            55.4,
            55.4,
            32.0,
            32.0,
            64,
            64,
        )
        .unwrap()
    }

    #[test]
    fn look_at_faces_the_target() {
        let pose = test_pose();
        // The target should project to the image center.
        let (u, v, depth) = pose.project(v3(0.0, 0.9, 0.0)).unwrap();
        assert!((u - 32.0).abs() < 1e-9 && (v - 32.0).abs() < 1e-9);
        assert!((depth - pose.camera_center().dist(v3(0.0, 0.9, 0.0))).abs() < 1e-9);
    }

    #[test]
    fn ray_and_project_are_inverse() {
        let pose = test_pose();
        let (o, d) = pose.ray(17, 45);
        let p = o.add(d.scale(1.7));
        let (u, v, _) = pose.project(p).unwrap();
        assert!((u - 17.5).abs() < 1e-9, "u = {u}");
        assert!((v - 45.5).abs() < 1e-9, "v = {v}");
    }

    #[test]
    fn plucker_directions_are_unit_and_moment_orthogonal() {
        let pose = test_pose();
        let map = plucker_map(&pose).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let u = rng.gen_range(0..64);
            let v = rng.gen_range(0..64);
            let d = map.dir(u, v);
            let m = map.moment(u, v);
            assert!((d.norm() - 1.0).abs() < 1e-12);
            assert!(d.dot(m).abs() < 1e-12);
        }
    }

    #[test]
    fn plucker_is_invariant_to_sliding_along_the_ray() {
        // Recompute the moment from an origin moved 2 units along each ray.
        let pose = test_pose();
        let map = plucker_map(&pose).unwrap();
        for (u, v) in [(0, 0), (63, 63), (10, 50)] {
            let (o, d) = pose.ray(u, v);
            let o2 = o.add(d.scale(2.0));
            let m2 = o2.cross(d);
            let m = map.moment(u, v);
            assert!(m2.sub(m).norm() < 1e-12);
        }
    }

    #[test]
    fn bad_intrinsics_are_contract_errors() {
        let mut pose = test_pose();
        pose.fx = 0.0;
        assert!(plucker_map(&pose).is_err());
        let mut pose = test_pose();
        pose.rot.m[0] = 2.0;
        assert!(pose.validate().is_err());
    }

    #[test]
    fn pose_record_roundtrip_is_exact() {
        let pose = test_pose();
        let rec = pose.to_record();
        let back = CameraPose::from_record(&rec, 64, 64).unwrap();
        assert_eq!(pose.rot.m, back.rot.m);
        assert_eq!(pose.t, back.t);
        assert_eq!(pose.fx, back.fx);
    }

    #[test]
    fn zero_projection_gives_zero_tokens() {
        let tape: Tape<f64> = Tape::new();
        let pose = test_pose();
        let map = plucker_map(&pose).unwrap();
        let d = 8;
        let p = 8;
        let w = tape.leaf(vec![0.0; 9 * p * p * d], &[9 * p * p, d]).unwrap();
        let b = tape.leaf(vec![0.0; d], &[d]).unwrap();
        let img = vec![0.5f32; 3 * 64 * 64];
        let toks = tokenize_source(&tape, &img, &map, p, &w, &b).unwrap();
        assert_eq!(toks.tokens.shape(), vec![64, d]);
        assert!(toks.tokens.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tokenize_is_linear_in_the_image_for_zero_bias() {
        let tape: Tape<f64> = Tape::new();
        let pose = test_pose();
        let map = plucker_map(&pose).unwrap();
        let (d, p) = (4, 8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let w_data: Vec<f64> = (0..9 * p * p * d).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let w = tape.leaf(w_data, &[9 * p * p, d]).unwrap();
        let b = tape.leaf(vec![0.0; d], &[d]).unwrap();

        // Rays contribute linearly too, so subtract the ray-only component
        // (zero image) before comparing the scaled versions.
        let img1: Vec<f32> = (0..3 * 64 * 64).map(|i| (i % 97) as f32 / 97.0).collect();
        let img2: Vec<f32> = img1.iter().map(|v| v * 2.0).collect();
        let zero = vec![0.0f32; 3 * 64 * 64];

        let t0 = tokenize_source(&tape, &zero, &map, p, &w, &b).unwrap().tokens.to_vec();
        let t1 = tokenize_source(&tape, &img1, &map, p, &w, &b).unwrap().tokens.to_vec();
        let t2 = tokenize_source(&tape, &img2, &map, p, &w, &b).unwrap().tokens.to_vec();
        for i in 0..t1.len() {
            let lhs = t2[i] - t0[i];
            let rhs = 2.0 * (t1[i] - t0[i]);
            assert!((lhs - rhs).abs() < 1e-9, "at {i}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn patch_size_must_divide_extents() {
        let tape: Tape<f32> = Tape::new();
        let pose = test_pose();
        let map = plucker_map(&pose).unwrap();
        let w = tape.leaf(vec![0.0; 6 * 9 * 9 * 2], &[6 * 81, 2]).unwrap();
        let b = tape.leaf(vec![0.0; 2], &[2]).unwrap();
        assert!(tokenize_target(&tape, &map, 9, &w, &b).is_err());
    }
}
