//! Ground-truth generator: articulated capsule bodies rendered analytically
//! from a frontal camera frustum. Every pixel's color, camera-frame hit
//! point, and validity come from exact ray-capsule intersections, so the
//! point-map supervision has a closed-form oracle.

use crate::body::{BodyParams, ProxySkeleton, HEAD_BONE, N_BONES, NECK, N_POSE, PELVIS, STANDING_HEIGHT};
use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::geom::{v3, Vec3};
use crate::image_io::{write_point_map, write_ppm, Image, PointMap};
use rand::Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Height acceptance band around the nominal standing height, meters.
const HEIGHT_TOL: f64 = 0.045;
/// Subject placement jitter, meters, applied on x and z.
const JITTER: f64 = 0.1;
/// Camera orbit radius, meters.
pub const CAMERA_RADIUS: f64 = 2.0;
/// Frustum half-angle per axis, radians.
pub const FRUSTUM_DEG: f64 = 30.0;
const AMBIENT: f64 = 0.35;
/// Fraction of normal-facing alignment above which a head hit counts as
/// face surface for the expression tint.
const FACE_DOT: f64 = 0.3;
const FACE_TINT: f64 = 0.15;
const RAY_NEAR: f64 = 1e-4;

/// One generated subject: body, placement, and appearance.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub skeleton: ProxySkeleton,
    pub params: BodyParams,
    /// World translation applied to the whole body (x and z only).
    pub offset: Vec3,
    /// Per-bone base colors.
    pub albedo: Vec<[f64; 3]>,
    /// Unit light direction, pointing toward the light.
    pub light: Vec3,
    /// Rest standing height under this subject's shape, meters.
    pub height: f64,
}

impl SyntheticScene {
    /// Subject center the cameras aim at: the pelvis after placement.
    pub fn center(&self) -> Vec3 {
        let (pos, _) = self
            .skeleton
            .fk(&self.params.theta, &self.params.beta)
            .expect("scene params validated at construction");
        pos[PELVIS].add(self.offset)
    }

    /// World-space capsules of the posed, placed body.
    pub fn capsules(&self) -> Vec<(Vec3, Vec3, f64)> {
        self.skeleton
            .bone_capsules(&self.params.theta, &self.params.beta)
            .expect("scene params validated at construction")
            .into_iter()
            .map(|(a, b, r)| (a.add(self.offset), b.add(self.offset), r))
            .collect()
    }

    /// Forward direction of the face in world space.
    pub fn face_dir(&self) -> Vec3 {
        let (_, rot) = self
            .skeleton
            .fk(&self.params.theta, &self.params.beta)
            .expect("scene params validated at construction");
        rot[NECK].mul_vec(v3(0.0, 0.0, 1.0))
    }
}

/// Draw a subject: shape rejection-sampled into the height band, mild
/// articulation, expression coefficients, and placement jitter. The
/// orthographic record in `params.cam` encodes the jitter so parameter
/// supervision has an exact target.
pub fn sample_scene(seed: u64) -> Result<SyntheticScene> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let skeleton = ProxySkeleton::standard();
    let mut beta = vec![0.0; 10];
    let mut height = skeleton.rest_height();
    for attempt in 0.. {
        if attempt > 512 {
            return Err(Error::Contract("height rejection sampling did not converge".into()));
        }
        for b in beta.iter_mut() {
            *b = rng.gen_range(-1.0..1.0);
        }
        height = skeleton.height_of(&beta)?;
        if (height - STANDING_HEIGHT).abs() <= HEIGHT_TOL {
            break;
        }
    }
    let mut theta = vec![0.0; N_POSE];
    for (j, t) in theta.chunks_mut(3).enumerate() {
        if j == PELVIS {
            t[0] = rng.gen_range(-0.08..0.08);
            t[1] = rng.gen_range(-0.25..0.25);
            t[2] = rng.gen_range(-0.08..0.08);
        } else {
            for v in t.iter_mut() {
                *v = rng.gen_range(-0.25..0.25);
            }
        }
    }
    let psi: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (jx, jz) = (rng.gen_range(-JITTER..JITTER), rng.gen_range(-JITTER..JITTER));
    let albedo: Vec<[f64; 3]> = (0..N_BONES)
        .map(|_| [rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9)])
        .collect();
    let params = BodyParams {
        beta,
        theta,
        psi,
        cam: [
            CAMERA_RADIUS / (CAMERA_RADIUS + jz),
            jx,
            jz,
        ],
    };
    params.validate()?;
    Ok(SyntheticScene {
        skeleton,
        params,
        offset: v3(jx, 0.0, jz),
        albedo,
        light: v3(0.3, 0.8, 0.5).normalized(),
        height,
    })
}

/// Focal length putting the frustum half-angle at the image edge.
pub fn default_focal(height: usize) -> f64 {
    (height as f64 / 2.0) / FRUSTUM_DEG.to_radians().tan()
}

/// Pose on the fixed-radius orbit around `center`, aimed at it.
pub fn orbit_pose(center: Vec3, yaw: f64, pitch: f64, width: usize, height: usize) -> Result<CameraPose> {
    let eye = center.add(
        v3(
            yaw.sin() * pitch.cos(),
            pitch.sin(),
            yaw.cos() * pitch.cos(),
        )
        .scale(CAMERA_RADIUS),
    );
    let f = default_focal(height);
    CameraPose::look_at(
        eye,
        center,
        v3(0.0, 1.0, 0.0),
        f,
        f,
        width as f64 / 2.0,
        height as f64 / 2.0,
        width,
        height,
    )
}

/// Camera protocol: one strict frontal view, `count - 5` uniform draws from
/// the frustum, and the four corners, all on a fixed-radius orbit aimed at
/// `center`.
pub fn sample_cameras(
    seed: u64,
    count: usize,
    center: Vec3,
    width: usize,
    height: usize,
) -> Result<Vec<CameraPose>> {
    if count < 5 {
        return Err(Error::Config(format!("camera protocol needs at least 5 views, got {count}")));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let lim = FRUSTUM_DEG.to_radians();
    let mut poses = Vec::with_capacity(count);
    poses.push(orbit_pose(center, 0.0, 0.0, width, height)?);
    for _ in 0..count - 5 {
        let yaw = rng.gen_range(-lim..lim);
        let pitch = rng.gen_range(-lim..lim);
        poses.push(orbit_pose(center, yaw, pitch, width, height)?);
    }
    for (sy, sp) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        poses.push(orbit_pose(center, sy * lim, sp * lim, width, height)?);
    }
    Ok(poses)
}

/// Nearest intersection of a ray with one capsule: the finite cylinder
/// mantle plus both end spheres.
fn ray_capsule(o: Vec3, d: Vec3, p0: Vec3, p1: Vec3, r: f64) -> Option<(f64, Vec3)> {
    let axis = p1.sub(p0);
    let len = axis.norm();
    let mut best: Option<(f64, Vec3)> = None;
    let mut consider = |t: f64, n: Vec3| {
        if t > RAY_NEAR && best.map_or(true, |(bt, _)| t < bt) {
            best = Some((t, n));
        }
    };
    if len > 1e-12 {
        let a_hat = axis.scale(1.0 / len);
        let oc = o.sub(p0);
        let d_perp = d.sub(a_hat.scale(d.dot(a_hat)));
        let oc_perp = oc.sub(a_hat.scale(oc.dot(a_hat)));
        let a = d_perp.dot(d_perp);
        if a > 1e-14 {
            let b = 2.0 * d_perp.dot(oc_perp);
            let c = oc_perp.dot(oc_perp) - r * r;
            let disc = b * b - 4.0 * a * c;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                    let s = oc.add(d.scale(t)).dot(a_hat);
                    if s >= 0.0 && s <= len {
                        let hit = o.add(d.scale(t));
                        let foot = p0.add(a_hat.scale(s));
                        consider(t, hit.sub(foot).scale(1.0 / r));
                    }
                }
            }
        }
    }
    for cap in [p0, p1] {
        let oc = o.sub(cap);
        let b = 2.0 * d.dot(oc);
        let c = oc.dot(oc) - r * r;
        let disc = b * b - 4.0 * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / 2.0, (-b + sq) / 2.0] {
                let hit = o.add(d.scale(t));
                if len > 1e-12 {
                    let s = hit.sub(p0).dot(axis) / len;
                    if s >= 0.0 && s <= len {
                        continue; // mantle region, handled above
                    }
                }
                consider(t, hit.sub(cap).scale(1.0 / r));
            }
        }
    }
    best
}

/// Nearest hit over a capsule set.
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub bone: usize,
}

pub fn intersect_capsules(caps: &[(Vec3, Vec3, f64)], o: Vec3, d: Vec3) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, (p0, p1, r)) in caps.iter().enumerate() {
        if let Some((t, normal)) = ray_capsule(o, d, *p0, *p1, *r) {
            if best.as_ref().map_or(true, |h| t < h.t) {
                best = Some(Hit {
                    t,
                    point: o.add(d.scale(t)),
                    normal,
                    bone: i,
                });
            }
        }
    }
    best
}

fn shade(scene: &SyntheticScene, face_dir: Vec3, hit: &Hit) -> [f32; 3] {
    let mut albedo = scene.albedo[hit.bone];
    if hit.bone == HEAD_BONE && hit.normal.dot(face_dir) > FACE_DOT {
        for (c, a) in albedo.iter_mut().enumerate().take(3) {
            *a = (*a + scene.params.psi[c] * FACE_TINT).clamp(0.0, 1.0);
        }
    }
    let lambert = AMBIENT + (1.0 - AMBIENT) * scene.light.dot(hit.normal).max(0.0);
    [
        (albedo[0] * lambert) as f32,
        (albedo[1] * lambert) as f32,
        (albedo[2] * lambert) as f32,
    ]
}

/// Render one view analytically: color image, camera-frame point map, and
/// the point map's confidence plane doubling as the hit mask.
pub fn render_gt(scene: &SyntheticScene, pose: &CameraPose) -> Result<(Image, PointMap)> {
    pose.validate()?;
    let (h, w) = (pose.height, pose.width);
    let caps = scene.capsules();
    let face_dir = scene.face_dir();
    let mut img = Image::zeros(3, h, w);
    let mut xyz = vec![0.0f32; 3 * h * w];
    let mut conf = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (o, d) = pose.ray(x, y);
            let Some(hit) = intersect_capsules(&caps, o, d) else { continue };
            let rgb = shade(scene, face_dir, &hit);
            for c in 0..3 {
                img.data[(c * h + y) * w + x] = rgb[c];
            }
            let pc = pose.cam_coords(hit.point);
            xyz[y * w + x] = pc.x as f32;
            xyz[h * w + y * w + x] = pc.y as f32;
            xyz[2 * h * w + y * w + x] = pc.z as f32;
            conf[y * w + x] = 1.0;
        }
    }
    Ok((img, PointMap::new(h, w, xyz, conf)?))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Generate a dataset: per identity a scene, per view an image, point map,
/// and pose record, plus one parameter record. Returns the manifest path;
/// the manifest lists every asset with its content hash.
pub fn make_dataset(
    out_dir: &Path,
    identities: usize,
    views: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<PathBuf> {
    if identities == 0 || views == 0 {
        return Err(Error::Config("dataset needs at least one identity and view".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = String::from("identity,view,role,path,sha256\n");
    for i in 0..identities {
        let scene = sample_scene(seed.wrapping_add(1 + i as u64 * 7919))?;
        let cam_seed = seed.wrapping_add(104_729 + i as u64 * 7919);
        let mut poses = sample_cameras(cam_seed, views.max(5), scene.center(), width, height)?;
        poses.truncate(views);
        let dir = out_dir.join(format!("identity_{i:03}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (v, pose) in poses.iter().enumerate() {
            let (img, pm) = render_gt(&scene, pose)?;
            let img_path = dir.join(format!("view_{v:03}.ppm"));
            write_ppm(&img_path, &img)?;
            let pm_path = dir.join(format!("view_{v:03}.pmpt"));
            write_point_map(&pm_path, &pm)?;
            let pose_path = dir.join(format!("view_{v:03}.pose.txt"));
            fs::write(&pose_path, pose.to_record()).map_err(|e| Error::io(&pose_path, e))?;
            for (role, path) in [("image", &img_path), ("points", &pm_path), ("pose", &pose_path)] {
                let rel = path.strip_prefix(out_dir).unwrap().display();
                let _ = writeln!(manifest, "{i},{v},{role},{rel},{}", hash_file(path)?);
            }
        }
        let params_path = dir.join("params.txt");
        fs::write(&params_path, scene.params.to_record()).map_err(|e| Error::io(&params_path, e))?;
        let rel = params_path.strip_prefix(out_dir).unwrap().display();
        let _ = writeln!(manifest, "{i},-1,params,{rel},{}", hash_file(&params_path)?);
    }
    let manifest_path = out_dir.join("manifest.csv");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}
