//! Articulated capsule body: a fixed 16-joint kinematic tree whose bones are
//! capsules, driven by shape (`beta`), pose (`theta`) and expression (`psi`)
//! coefficients plus a 3-vector orthographic camera descriptor.
//!
//! Forward kinematics exists twice on purpose: a plain `f64` version used by
//! the synthetic renderer and the training loop (where the vertex scaffold is
//! treated as data), and a tape version used to verify that the body is
//! differentiable end to end. Tests cross-check the two against each other.

use crate::error::{Error, Result};
use crate::geom::{v3, Mat3, Vec3};
use crate::tensor::{concat, Scalar, Tape, Tensor};

pub const N_JOINTS: usize = 16;
pub const N_BONES: usize = N_JOINTS - 1;
pub const N_SHAPE: usize = 10;
pub const N_EXPR: usize = 10;
pub const N_POSE: usize = 3 * N_JOINTS;

/// Bone-length change per unit shape coefficient (fraction of rest length).
pub const SHAPE_STEP: f64 = 0.05;
/// Head-vertex displacement per unit expression coefficient, meters.
pub const EXPR_STEP: f64 = 0.02;
/// Bone whose child joint is the head; its vertices carry expression basis.
pub const HEAD_BONE: usize = 2;

pub const STANDING_HEIGHT: f64 = 1.80;

/// Shape, pose, expression and orthographic-camera coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyParams {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    /// (scale, tx, ty); scale strictly positive.
    pub cam: [f64; 3],
}

impl BodyParams {
    pub fn rest() -> BodyParams {
        BodyParams {
            beta: vec![0.0; N_SHAPE],
            theta: vec![0.0; N_POSE],
            psi: vec![0.0; N_EXPR],
            cam: [1.0, 0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.len() != N_SHAPE || self.theta.len() != N_POSE || self.psi.len() != N_EXPR {
            return Err(Error::dims(
                "body params",
                &[self.beta.len(), self.theta.len(), self.psi.len()],
                &[N_SHAPE, N_POSE, N_EXPR],
            ));
        }
        let all = self.beta.iter().chain(&self.theta).chain(&self.psi).chain(&self.cam);
        for v in all {
            if !v.is_finite() {
                return Err(Error::Contract("non-finite body parameter".into()));
            }
        }
        if self.theta.iter().any(|t| t.abs() > std::f64::consts::PI + 1e-12) {
            return Err(Error::Contract("pose angle outside [-pi, pi]".into()));
        }
        if self.cam[0] <= 0.0 {
            return Err(Error::Contract(format!("camera scale {} must be > 0", self.cam[0])));
        }
        Ok(())
    }

    /// Four labeled lines: `beta`, `theta`, `psi`, `cam`, each followed by
    /// its coefficients.
    pub fn to_record(&self) -> String {
        let join = |v: &[f64]| {
            v.iter().map(|x| format!("{x:.17e}")).collect::<Vec<_>>().join(" ")
        };
        format!(
            "beta {}\ntheta {}\npsi {}\ncam {}\n",
            join(&self.beta),
            join(&self.theta),
            join(&self.psi),
            join(&self.cam)
        )
    }

    pub fn from_record(text: &str) -> Result<BodyParams> {
        let mut params = BodyParams::rest();
        let mut seen = 0;
        for line in text.lines() {
            let mut toks = line.split_whitespace();
            let Some(label) = toks.next() else { continue };
            let vals: Vec<f64> = toks
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Contract(format!("bad body record: {e}")))?;
            match label {
                "beta" => params.beta = vals,
                "theta" => params.theta = vals,
                "psi" => params.psi = vals,
                "cam" => {
                    params.cam = vals
                        .try_into()
                        .map_err(|_| Error::Contract("cam wants 3 values".into()))?
                }
                other => return Err(Error::Contract(format!("unknown body field {other}"))),
            }
            seen += 1;
        }
        if seen != 4 {
            return Err(Error::Contract(format!("body record has {seen} of 4 fields")));
        }
        params.validate()?;
        Ok(params)
    }
}

/// One fixed surface sample on a bone capsule.
#[derive(Debug, Clone)]
pub struct TemplateVertex {
    pub bone: usize,
    /// Position along the bone axis, 0 at the parent joint, 1 at the child.
    pub u: f64,
    /// Unit offset direction in the parent joint's frame (radial for rings,
    /// tilted into the axis over the hemispherical caps).
    pub dir: [f64; 3],
    /// Expression displacement magnitudes; zero off the head bone.
    pub psi_basis: [f64; N_EXPR],
}

/// Fixed kinematic tree with capsule bones and a surface vertex template.
///
/// Joint order: pelvis, chest, neck, head, then left/right arm chains
/// (shoulder, elbow, wrist) and left/right leg chains (hip, knee, ankle).
/// `parents[j] < j` for every non-root joint, so forward kinematics is a
/// single forward loop. Bone `b` ends at child joint `b + 1`.
#[derive(Debug, Clone)]
pub struct ProxySkeleton {
    pub parents: [usize; N_JOINTS],
    /// Rest offset of each joint in its parent frame; entry 0 is the root's
    /// world rest position.
    pub offsets: [[f64; 3]; N_JOINTS],
    pub radii: [f64; N_BONES],
    /// Per-bone response to each shape coefficient (length multiplier slope).
    pub shape_basis: [[f64; N_SHAPE]; N_BONES],
    pub template: Vec<TemplateVertex>,
}

pub const PELVIS: usize = 0;
pub const CHEST: usize = 1;
pub const NECK: usize = 2;
pub const HEAD: usize = 3;

const RING_US: [f64; 4] = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
const RING_ANGLES: usize = 8;

fn perp_pair(axis: Vec3) -> (Vec3, Vec3) {
    let a = axis.normalized();
    let r = if a.x.abs() < 0.9 { v3(1.0, 0.0, 0.0) } else { v3(0.0, 1.0, 0.0) };
    let e1 = r.cross(a).normalized();
    let e2 = a.cross(e1);
    (e1, e2)
}

fn expr_basis(bone: usize, u: f64, dir: Vec3) -> [f64; N_EXPR] {
    let mut b = [0.0; N_EXPR];
    if bone == HEAD_BONE {
        for (k, bk) in b.iter_mut().enumerate() {
            let f = (k + 1) as f64;
            *bk = (f * (1.7 * u + 0.9) + dir.x + 2.0 * dir.y - dir.z).sin();
        }
    }
    b
}

impl ProxySkeleton {
    /// The canonical template, normalized so the rest pose stands exactly
    /// [`STANDING_HEIGHT`] meters tall.
    pub fn standard() -> ProxySkeleton {
        let parents = [0, 0, 1, 2, 1, 4, 5, 1, 7, 8, 0, 10, 11, 0, 13, 14];
        let mut offsets = [
            [0.0, 0.98, 0.0],    // pelvis rest position (world)
            [0.0, 0.32, 0.0],    // chest
            [0.0, 0.26, 0.0],    // neck
            [0.0, 0.16, 0.0],    // head
            [0.19, 0.21, 0.0],   // l shoulder
            [0.27, 0.0, 0.0],    // l elbow
            [0.25, 0.0, 0.0],    // l wrist
            [-0.19, 0.21, 0.0],  // r shoulder
            [-0.27, 0.0, 0.0],   // r elbow
            [-0.25, 0.0, 0.0],   // r wrist
            [0.10, -0.06, 0.0],  // l hip
            [0.0, -0.44, 0.0],   // l knee
            [0.0, -0.42, 0.0],   // l ankle
            [-0.10, -0.06, 0.0], // r hip
            [0.0, -0.44, 0.0],   // r knee
            [0.0, -0.42, 0.0],   // r ankle
        ];
        let mut radii = [
            0.13, 0.09, 0.11, // chest, neck, head
            0.06, 0.05, 0.045, // left arm
            0.06, 0.05, 0.045, // right arm
            0.08, 0.07, 0.055, // left leg
            0.08, 0.07, 0.055, // right leg
        ];

        let mut shape_basis = [[0.0; N_SHAPE]; N_BONES];
        let legs = [9, 10, 11, 12, 13, 14];
        let arms = [3, 4, 5, 6, 7, 8];
        for b in 0..N_BONES {
            shape_basis[b][0] = 1.0; // overall size
        }
        for b in legs {
            shape_basis[b][1] = 1.0;
        }
        for b in arms {
            shape_basis[b][2] = 1.0;
        }
        shape_basis[0][3] = 1.0; // torso
        shape_basis[1][3] = 1.0;
        shape_basis[HEAD_BONE][4] = 1.0; // head size
        shape_basis[3][5] = 1.0; // shoulder width
        shape_basis[6][5] = 1.0;
        shape_basis[9][6] = 1.0; // hip width
        shape_basis[12][6] = 1.0;
        shape_basis[4][7] = 1.0; // upper vs lower arm
        shape_basis[7][7] = 1.0;
        shape_basis[5][7] = -1.0;
        shape_basis[8][7] = -1.0;
        shape_basis[10][8] = 1.0; // upper vs lower leg
        shape_basis[13][8] = 1.0;
        shape_basis[11][8] = -1.0;
        shape_basis[14][8] = -1.0;
        shape_basis[1][9] = 1.0; // neck vs chest
        shape_basis[0][9] = -0.5;

        let mut sk = ProxySkeleton {
            parents,
            offsets,
            radii,
            shape_basis,
            template: Vec::new(),
        };
        sk.template = sk.build_template();

        // Normalize every length so the rest pose is exactly the standing
        // height; the ground clearance scales along with it.
        let k = STANDING_HEIGHT / sk.rest_height();
        for off in offsets.iter_mut() {
            for v in off.iter_mut() {
                *v *= k;
            }
        }
        for r in radii.iter_mut() {
            *r *= k;
        }
        sk.offsets = offsets;
        sk.radii = radii;
        sk.template = sk.build_template();
        sk
    }

    fn build_template(&self) -> Vec<TemplateVertex> {
        let mut verts = Vec::new();
        for bone in 0..N_BONES {
            let child = bone + 1;
            let axis = v3(
                self.offsets[child][0],
                self.offsets[child][1],
                self.offsets[child][2],
            );
            let a_hat = axis.normalized();
            let (e1, e2) = perp_pair(axis);
            for &u in &RING_US {
                for i in 0..RING_ANGLES {
                    let phi = 2.0 * std::f64::consts::PI * i as f64 / RING_ANGLES as f64;
                    let dir = e1.scale(phi.cos()).add(e2.scale(phi.sin()));
                    verts.push(TemplateVertex {
                        bone,
                        u,
                        dir: dir.to_array(),
                        psi_basis: expr_basis(bone, u, dir),
                    });
                }
            }
            // Hemispherical caps: one tilted ring plus the pole at each end.
            for (u, sign) in [(0.0, -1.0), (1.0, 1.0)] {
                let w = std::f64::consts::FRAC_PI_4;
                for i in 0..RING_ANGLES {
                    let phi = 2.0 * std::f64::consts::PI * i as f64 / RING_ANGLES as f64;
                    let radial = e1.scale(phi.cos()).add(e2.scale(phi.sin()));
                    let dir = radial.scale(w.cos()).add(a_hat.scale(sign * w.sin()));
                    verts.push(TemplateVertex {
                        bone,
                        u,
                        dir: dir.to_array(),
                        psi_basis: expr_basis(bone, u, dir),
                    });
                }
                let dir = a_hat.scale(sign);
                verts.push(TemplateVertex {
                    bone,
                    u,
                    dir: dir.to_array(),
                    psi_basis: expr_basis(bone, u, dir),
                });
            }
        }
        verts
    }

    pub fn validate(&self) -> Result<()> {
        for j in 1..N_JOINTS {
            if self.parents[j] >= j {
                return Err(Error::Contract(format!(
                    "joint {j} has parent {} at or after it",
                    self.parents[j]
                )));
            }
        }
        if self.radii.iter().any(|&r| r <= 0.0) {
            return Err(Error::Contract("non-positive capsule radius".into()));
        }
        Ok(())
    }

    /// Per-bone length/radius multipliers for a shape coefficient vector.
    pub fn bone_multipliers(&self, beta: &[f64]) -> Result<[f64; N_BONES]> {
        if beta.len() != N_SHAPE {
            return Err(Error::dims("bone_multipliers", &[beta.len()], &[N_SHAPE]));
        }
        let mut s = [1.0; N_BONES];
        for b in 0..N_BONES {
            let dot: f64 = (0..N_SHAPE).map(|k| self.shape_basis[b][k] * beta[k]).sum();
            s[b] = 1.0 + SHAPE_STEP * dot;
        }
        Ok(s)
    }

    /// Forward kinematics: world joint positions and rotations.
    pub fn fk(&self, theta: &[f64], beta: &[f64]) -> Result<(Vec<Vec3>, Vec<Mat3>)> {
        if theta.len() != N_POSE {
            return Err(Error::dims("fk", &[theta.len()], &[N_POSE]));
        }
        let s = self.bone_multipliers(beta)?;
        let mut pos = vec![v3(0.0, 0.0, 0.0); N_JOINTS];
        let mut rot = vec![Mat3::IDENTITY; N_JOINTS];
        for j in 0..N_JOINTS {
            let local = Mat3::from_euler(theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]);
            let off = v3(self.offsets[j][0], self.offsets[j][1], self.offsets[j][2]);
            if j == 0 {
                rot[0] = local;
                pos[0] = off;
            } else {
                let a = self.parents[j];
                rot[j] = rot[a].mul(&local);
                pos[j] = pos[a].add(rot[a].mul_vec(off.scale(s[j - 1])));
            }
        }
        Ok((pos, rot))
    }

    /// Capsule endpoints and effective radius of every bone under `beta`.
    pub fn bone_capsules(&self, theta: &[f64], beta: &[f64]) -> Result<Vec<(Vec3, Vec3, f64)>> {
        let (pos, _) = self.fk(theta, beta)?;
        let s = self.bone_multipliers(beta)?;
        Ok((0..N_BONES)
            .map(|b| (pos[self.parents[b + 1]], pos[b + 1], self.radii[b] * s[b]))
            .collect())
    }

    /// Surface vertex positions: the plain (non-differentiable) body forward.
    pub fn surface_vertices(&self, params: &BodyParams) -> Result<Vec<Vec3>> {
        params.validate()?;
        let (pos, rot) = self.fk(&params.theta, &params.beta)?;
        let s = self.bone_multipliers(&params.beta)?;
        let mut out = Vec::with_capacity(self.template.len());
        for tv in &self.template {
            let child = tv.bone + 1;
            let a = self.parents[child];
            let off = v3(
                self.offsets[child][0],
                self.offsets[child][1],
                self.offsets[child][2],
            );
            let expr: f64 = (0..N_EXPR).map(|k| tv.psi_basis[k] * params.psi[k]).sum();
            let rho = self.radii[tv.bone] * s[tv.bone] + EXPR_STEP * expr;
            let dir = v3(tv.dir[0], tv.dir[1], tv.dir[2]);
            let local = off.scale(tv.u * s[tv.bone]).add(dir.scale(rho));
            out.push(pos[a].add(rot[a].mul_vec(local)));
        }
        Ok(out)
    }

    /// Rest standing height from capsule extremes (not just sampled vertices).
    pub fn rest_height(&self) -> f64 {
        let rest = BodyParams::rest();
        let caps = self.bone_capsules(&rest.theta, &rest.beta).expect("rest fk");
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (a, b, r) in caps {
            lo = lo.min(a.y - r).min(b.y - r);
            hi = hi.max(a.y + r).max(b.y + r);
        }
        hi - lo
    }

    /// Standing height under arbitrary shape coefficients, rest pose.
    pub fn height_of(&self, beta: &[f64]) -> Result<f64> {
        let caps = self.bone_capsules(&vec![0.0; N_POSE], beta)?;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (a, b, r) in caps {
            lo = lo.min(a.y - r).min(b.y - r);
            hi = hi.max(a.y + r).max(b.y + r);
        }
        Ok(hi - lo)
    }

    /// Joints in the subtree rooted at `joint`, inclusive.
    pub fn subtree(&self, joint: usize) -> Vec<bool> {
        let mut inside = vec![false; N_JOINTS];
        inside[joint] = true;
        for j in 1..N_JOINTS {
            if inside[self.parents[j]] {
                inside[j] = true;
            }
        }
        inside
    }
}

/// Rotation matrix `Rz(z) Ry(y) Rx(x)` from three angle tensors of one
/// element each.
pub fn rot_zyx_tape<E: Scalar>(
    tape: &Tape<E>,
    rx: &Tensor<E>,
    ry: &Tensor<E>,
    rz: &Tensor<E>,
) -> Result<Tensor<E>> {
    let zero = tape.scalar(E::zero());
    let one = tape.scalar(E::one());
    let (sx, cx) = (rx.sin(), rx.cos());
    let (sy, cy) = (ry.sin(), ry.cos());
    let (sz, cz) = (rz.sin(), rz.cos());
    let rz_m = concat(
        &[
            cz.clone(),
            sz.neg(),
            zero.clone(),
            sz.clone(),
            cz.clone(),
            zero.clone(),
            zero.clone(),
            zero.clone(),
            one.clone(),
        ],
        0,
    )?
    .reshape(&[3, 3])?;
    let ry_m = concat(
        &[
            cy.clone(),
            zero.clone(),
            sy.clone(),
            zero.clone(),
            one.clone(),
            zero.clone(),
            sy.neg(),
            zero.clone(),
            cy.clone(),
        ],
        0,
    )?
    .reshape(&[3, 3])?;
    let rx_m = concat(
        &[
            one.clone(),
            zero.clone(),
            zero.clone(),
            zero.clone(),
            cx.clone(),
            sx.neg(),
            zero.clone(),
            sx.clone(),
            cx.clone(),
        ],
        0,
    )?
    .reshape(&[3, 3])?;
    rz_m.matmul(&ry_m)?.matmul(&rx_m)
}

/// Tape forward kinematics: per-joint world positions `[3,1]` and rotations
/// `[3,3]`, differentiable in `theta` and `beta`.
pub fn fk_tape<E: Scalar>(
    tape: &Tape<E>,
    sk: &ProxySkeleton,
    theta: &Tensor<E>,
    beta: &Tensor<E>,
) -> Result<(Vec<Tensor<E>>, Vec<Tensor<E>>)> {
    if theta.numel() != N_POSE || beta.numel() != N_SHAPE {
        return Err(Error::dims("fk_tape", &theta.shape(), &[N_POSE]));
    }
    let beta_row = beta.reshape(&[1, N_SHAPE])?;
    let mut mult = Vec::with_capacity(N_BONES);
    for b in 0..N_BONES {
        let basis: Vec<E> = sk.shape_basis[b].iter().map(|&v| E::from_f64(v)).collect();
        let col = tape.constant(basis, &[N_SHAPE, 1])?;
        mult.push(beta_row.matmul(&col)?.scale(SHAPE_STEP).add_scalar(1.0));
    }

    let mut pos: Vec<Tensor<E>> = Vec::with_capacity(N_JOINTS);
    let mut rot: Vec<Tensor<E>> = Vec::with_capacity(N_JOINTS);
    for j in 0..N_JOINTS {
        let ax = theta.slice(0, 3 * j, 1)?;
        let ay = theta.slice(0, 3 * j + 1, 1)?;
        let az = theta.slice(0, 3 * j + 2, 1)?;
        let local = rot_zyx_tape(tape, &ax, &ay, &az)?;
        let off_data: Vec<E> = sk.offsets[j].iter().map(|&v| E::from_f64(v)).collect();
        let off = tape.constant(off_data, &[3, 1])?;
        if j == 0 {
            rot.push(local);
            pos.push(off);
        } else {
            let a = sk.parents[j];
            rot.push(rot[a].matmul(&local)?);
            let step = rot[a].matmul(&off.mul_scalar_t(&mult[j - 1])?)?;
            pos.push(pos[a].add(&step)?);
        }
    }
    Ok((pos, rot))
}

/// Tape body forward: `[V, 3]` world vertex positions, differentiable in
/// `theta`, `beta` and `psi`. Mirrors [`ProxySkeleton::surface_vertices`].
pub fn surface_vertices_tape<E: Scalar>(
    tape: &Tape<E>,
    sk: &ProxySkeleton,
    theta: &Tensor<E>,
    beta: &Tensor<E>,
    psi: &Tensor<E>,
) -> Result<Tensor<E>> {
    if psi.numel() != N_EXPR {
        return Err(Error::dims("surface_vertices_tape", &psi.shape(), &[N_EXPR]));
    }
    let (pos, rot) = fk_tape(tape, sk, theta, beta)?;
    let beta_row = beta.reshape(&[1, N_SHAPE])?;
    let psi_row = psi.reshape(&[1, N_EXPR])?;
    let mut mult = Vec::with_capacity(N_BONES);
    for b in 0..N_BONES {
        let basis: Vec<E> = sk.shape_basis[b].iter().map(|&v| E::from_f64(v)).collect();
        let col = tape.constant(basis, &[N_SHAPE, 1])?;
        mult.push(beta_row.matmul(&col)?.scale(SHAPE_STEP).add_scalar(1.0));
    }

    let mut cols = Vec::with_capacity(sk.template.len());
    for tv in &sk.template {
        let child = tv.bone + 1;
        let a = sk.parents[child];
        let s = &mult[tv.bone];
        let off_data: Vec<E> = sk.offsets[child].iter().map(|&v| E::from_f64(v * tv.u)).collect();
        let off_u = tape.constant(off_data, &[3, 1])?;
        let dir_data: Vec<E> = tv.dir.iter().map(|&v| E::from_f64(v)).collect();
        let dir = tape.constant(dir_data, &[3, 1])?;

        let basis: Vec<E> = tv.psi_basis.iter().map(|&v| E::from_f64(v)).collect();
        let basis_col = tape.constant(basis, &[N_EXPR, 1])?;
        let rho = s
            .scale(sk.radii[tv.bone])
            .add(&psi_row.matmul(&basis_col)?.scale(EXPR_STEP))?;

        let local = off_u.mul_scalar_t(s)?.add(&dir.mul_scalar_t(&rho)?)?;
        cols.push(pos[a].add(&rot[a].matmul(&local)?)?);
    }
    concat(&cols, 1)?.transpose()
}
